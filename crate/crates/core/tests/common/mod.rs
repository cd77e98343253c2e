//! Experiment tasks loaded from the shipped configuration files.

#![allow(dead_code)]

use std::path::Path;

use agdmpc::agd::AgdSettings;
use agdmpc::cost::{CostWeights, ReferenceSpec};
use agdmpc::ddp::DdpSettings;
use agdmpc::dynamics::{ModelSpec, StateVec};
use agdmpc::mpc::{DisturbanceEvent, MpcConfig, SolverKind};
use agdmpc::ocp::OcpDef;
use serde_json::Value;

pub struct Task {
    pub ocp: OcpDef,
    pub agd: AgdSettings,
    pub ddp: DdpSettings,
    pub disturbances: Vec<DisturbanceEvent>,
    mpc: Option<Value>,
}

fn section<T: serde::de::DeserializeOwned + Default>(v: &Value, key: &str) -> T {
    v.get(key).map_or_else(T::default, |s| serde_json::from_value(s.clone()).unwrap())
}

pub fn load(name: &str) -> Task {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let model: ModelSpec = serde_json::from_value(v["model"].clone()).unwrap();
    let weights: CostWeights = serde_json::from_value(v["cost"]["weights"].clone()).unwrap();
    let refs: ReferenceSpec = serde_json::from_value(v["cost"]["reference"].clone()).unwrap();
    let x0: Vec<f64> = serde_json::from_value(v["ocp"]["x0"].clone()).unwrap();
    let ocp = OcpDef::new(
        model,
        weights,
        refs,
        v["ocp"]["horizon"].as_u64().unwrap() as usize,
        v["ocp"]["dt"].as_f64().unwrap(),
        StateVec::from_column_slice(&x0),
    )
    .unwrap();
    Task {
        ocp,
        agd: section(&v, "agd"),
        ddp: section(&v, "ddp"),
        disturbances: section(&v, "disturbances"),
        mpc: v.get("mpc").cloned(),
    }
}

impl Task {
    /// Closed-loop settings with the iteration budget resolved for `solver`.
    pub fn mpc(&self, solver: SolverKind) -> MpcConfig {
        let mut v = self.mpc.clone().expect("task has an mpc section");
        let budget = &v["iters_per_cycle"];
        let n = match (budget.as_u64(), solver) {
            (Some(n), _) => n,
            (None, SolverKind::Agd) => budget["agd"].as_u64().unwrap(),
            (None, SolverKind::Ddp) => budget["ddp"].as_u64().unwrap(),
        };
        v["iters_per_cycle"] = n.into();
        serde_json::from_value(v).unwrap()
    }
}

pub fn circle() -> Task {
    load("circle")
}

pub fn reach() -> Task {
    load("reach")
}

pub fn lqr() -> Task {
    load("lqr")
}
