#![allow(dead_code)]

use std::path::PathBuf;

use capcrop::imagecore::build_pyramid;
use capcrop::landscape::grid_coords;
use capcrop::objective::bag_from_text;
use capcrop::objective::synthetic::heatmap_scorer;
use capcrop::pipeline::CropObjective;
use capcrop::sampler::theta_to_pixel_box;
use capcrop::synth::{random_blob_instance, BlobInstance};
use capcrop::{CropParams, PixelBox, RunConfig, Scorer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const RECOVERY_SIZE: usize = 256;
pub const RECOVERY_OUT: usize = 48;
pub const RECOVERY_GRID: usize = 41;
pub const RECOVERY_CAPTION: &str = "subject";
pub const RECOVERY_INSTANCES: u64 = 20;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Defaults except for the sampler output size.
pub fn recovery_config() -> RunConfig {
    RunConfig { out_size: RECOVERY_OUT, ..RunConfig::default() }
}

pub fn recovery_instance(seed: u64) -> BlobInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_blob_instance(RECOVERY_SIZE, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub seed: u64,
    pub center: (f64, f64),
    pub width_std: f64,
    pub theta: CropParams,
    pub pixel_box: PixelBox,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub image_size: usize,
    pub out_size: usize,
    pub grid: usize,
    pub caption: String,
    pub scorer: String,
    pub instances: Vec<OracleEntry>,
}

/// Loss at `theta` for a recovery instance under the recovery config.
pub fn recovery_loss(inst: &BlobInstance, theta: CropParams) -> f64 {
    let cfg = recovery_config();
    let scorer = heatmap_scorer();
    let user = bag_from_text(RECOVERY_CAPTION, scorer.vocabulary()).unwrap();
    let pyramid = build_pyramid(&inst.image, &cfg.scale_set, cfg.blur).unwrap();
    CropObjective::new(&pyramid, &user, &scorer, &cfg).value(theta).unwrap().total
}

/// Exhaustive search over a `grid x grid` lattice of feasible centers at
/// every scale of the schedule; ties keep the first point visited.
pub fn grid_oracle(seed: u64) -> OracleEntry {
    let inst = recovery_instance(seed);
    let cfg = recovery_config();
    let scorer = heatmap_scorer();
    let user = bag_from_text(RECOVERY_CAPTION, scorer.vocabulary()).unwrap();
    let pyramid = build_pyramid(&inst.image, &cfg.scale_set, cfg.blur).unwrap();
    let objective = CropObjective::new(&pyramid, &user, &scorer, &cfg);
    let mut best = (f64::INFINITY, CropParams::new(0.0, 0.0, 1.0));
    for s in cfg.scale_schedule() {
        let coords = grid_coords(RECOVERY_GRID, s);
        for &y in &coords {
            for &x in &coords {
                let theta = CropParams::new(x, y, s);
                let loss = objective.value(theta).unwrap().total;
                if loss < best.0 {
                    best = (loss, theta);
                }
            }
        }
    }
    OracleEntry {
        seed,
        center: inst.center,
        width_std: inst.width_std,
        theta: best.1,
        pixel_box: theta_to_pixel_box(best.1, RECOVERY_SIZE, RECOVERY_SIZE),
        loss: best.0,
    }
}

pub fn load_oracle() -> OracleFile {
    let text = std::fs::read_to_string(fixture_path("recovery_oracle.json")).expect("recovery oracle fixture");
    serde_json::from_str(&text).expect("recovery oracle json")
}
