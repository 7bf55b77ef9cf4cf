#![allow(dead_code)]

use std::path::Path;

use vmra_harness::dataset::Dataset;
use vmra_harness::synth::gen_synthetic;
use vmra_harness::Config;

/// A 32px configuration that trains in seconds.
pub fn small_config(n_subjects: usize) -> Config {
    let mut cfg = Config::default();
    cfg.data.n_subjects = n_subjects;
    cfg.data.image_size = 32;
    cfg.data.lesion_radius = 1.0;
    cfg.model.encoder.image_size = 32;
    cfg.model.vmrnn.height = 4;
    cfg.model.vmrnn.width = 4;
    cfg.train.epochs = 2;
    cfg.eval.bootstrap_samples = 20;
    cfg
}

pub fn generate(cfg: &Config, dir: &Path) -> Dataset {
    gen_synthetic(&cfg.data, dir).unwrap();
    Dataset::load(dir).unwrap()
}
