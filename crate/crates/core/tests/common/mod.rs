#![allow(dead_code)]

use std::collections::BTreeMap;

use frbench::estimation::{estimate_labels, EstimationRun, Thresholds};
use frbench::scoring::{build_pair_plan, collect_scores, CollectOptions, RetryPolicy, ScoreStore, ScoreTable};
use frbench::simulator::{generate_world, Gaussian, ServiceModel, SimulatedService, World, WorldConfig};
use frbench::types::{FaceId, FaceRecord, Label, ServiceId};

pub struct Sim {
    pub world: World,
    pub faces: BTreeMap<FaceId, FaceRecord>,
    pub services: Vec<ServiceId>,
    pub table: ScoreTable,
    pub run: EstimationRun,
    pub annotated: BTreeMap<FaceId, Label>,
    pub thresholds: Thresholds,
}

/// Five services whose genuine and impostor means sit `separation` standard
/// deviations apart, on a mix of native scales.
pub fn services(separation: f64) -> Vec<ServiceModel> {
    let sd = 0.6 / separation;
    let unit = |id: &str, lo: f64| ServiceModel::new(id, Gaussian::new(lo + 0.6, sd), Gaussian::new(lo, sd));
    let mut pct = ServiceModel::new(
        "delta",
        Gaussian::new(80.0, sd * 100.0),
        Gaussian::new(20.0, sd * 100.0),
    );
    pct.native_range = (0.0, 100.0);
    let mut wide = ServiceModel::new("echo", Gaussian::new(3.0, sd * 10.0), Gaussian::new(-3.0, sd * 10.0));
    wide.native_range = (-10.0, 10.0);
    vec![
        unit("alpha", 0.2),
        unit("bravo", 0.15),
        unit("charlie", 0.25),
        pct,
        wide,
    ]
}

pub fn simulate(cfg: &WorldConfig, models: &[ServiceModel], seed: u64) -> Sim {
    simulate_with(cfg, models, seed, Thresholds::default())
}

pub fn simulate_with(cfg: &WorldConfig, models: &[ServiceModel], seed: u64, thresholds: Thresholds) -> Sim {
    let world = generate_world(cfg).expect("valid world");
    let records = world.face_records();
    let faces: BTreeMap<FaceId, FaceRecord> = records.iter().map(|f| (f.face_id, f.clone())).collect();
    let plan = build_pair_plan(&records, seed).expect("plan");
    let opts = CollectOptions {
        retry: RetryPolicy::no_delay(4),
        ..CollectOptions::default()
    };
    let mut tables = Vec::new();
    for m in models {
        let svc = SimulatedService::new(&world, m.clone(), seed).expect("valid model");
        let mut store = ScoreStore::in_memory();
        let (t, _) = collect_scores(&plan, &faces, &svc, &mut store, &opts).expect("scores");
        tables.push(t);
    }
    let mut table = ScoreTable::merge(tables);
    let modes = table.fit_modes(&BTreeMap::new()).expect("modes");
    table.normalize(&modes);
    let services: Vec<ServiceId> = models.iter().map(|m| m.service_id.clone()).collect();
    let run = estimate_labels(&records, &table, &services, &thresholds).expect("estimation");
    let annotated = world.annotated_labels(faces.values());
    Sim {
        world,
        faces,
        services,
        table,
        run,
        annotated,
        thresholds,
    }
}
