use std::ffi::CString;

use agdmpc_py::python_module;
use pyo3::prelude::*;

fn run(script: &str) {
    pyo3::append_to_inittab!(python_module);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(script).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.display(py);
            panic!("python script failed");
        }
    });
}

#[test]
fn module_solves_and_checks_from_python() {
    let lqr = include_str!("../../../configs/lqr.json");
    run(&format!(
        r#"
import agdmpc_py, json
cfg = {lqr:?}
p = agdmpc_py.Problem(cfg)
assert (p.horizon, p.nx, p.nu) == (20, 2, 1)
agd = p.solve("agd")
ddp = p.solve("ddp")
assert ddp["status"] == "tolerance_reached", ddp["status"]
assert abs(agd["final_cost"] - ddp["final_cost"]) <= 1e-6 * ddp["final_cost"]
xs, cost = p.rollout(ddp["us"])
assert cost == ddp["final_cost"] and len(xs) == 21
g = p.gradient(ddp["us"])
assert max(abs(v) for row in g for v in row) < 1e-8
loop = p.mpc("ddp", duration=0.05)
assert len(loop["t"]) == 50 and loop["divergence_count"] == 0
lines = agdmpc_py.gradcheck(instances=2)
assert len(lines) == 9 and all(ok for *_, ok in lines)
try:
    p.solve("newton")
except ValueError:
    pass
else:
    raise AssertionError("unknown solver accepted")
try:
    agdmpc_py.Problem(json.dumps({{**json.loads(cfg), "bogus": 1}}))
except ValueError:
    pass
else:
    raise AssertionError("unknown key accepted")
"#
    ));
}
