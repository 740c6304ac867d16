#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sampled_rnn::config::{DataConfig, ExperimentConfig, GeneratedData};

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.json"))
}

pub fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("repository config loads")
}

pub fn generated(cfg: &mut ExperimentConfig) -> &mut GeneratedData {
    match &mut cfg.data {
        DataConfig::Generated(g) => g,
        DataConfig::Csv(_) => panic!("expected a generated config"),
    }
}

/// Van der Pol with a handful of short trajectories; fits in milliseconds.
pub fn small_vdp(out: Option<&Path>) -> ExperimentConfig {
    let mut cfg = load("van_der_pol");
    let g = generated(&mut cfg);
    g.train.n_traj = 8;
    g.train.t_end = 5.0;
    g.test.n_traj = 3;
    g.test.t_end = 3.0;
    g.validation = None;
    cfg.model.width = 20;
    cfg.seeds = vec![0, 1];
    cfg.output_dir = out.map(Path::to_path_buf);
    cfg
}
