//! Sequential versus chunked-parallel selective scan timing.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vmra_core::scan::{selective_scan_par, selective_scan_seq, SsmParams};
use vmra_core::Tensor64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub lmax: usize,
    pub lmin: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// Timed repetitions per length; the fastest is reported.
    pub repeats: usize,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { lmax: 4096, lmin: 64, channels: 64, state_dim: 16, repeats: 3, threads: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "N")]
    pub state_dim: usize,
    pub threads: usize,
    pub chunk: usize,
    pub seq_ms: f64,
    pub par_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

/// Lengths `lmin, 2·lmin, ...` up to and including `lmax`.
pub fn lengths(lmin: usize, lmax: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut l = lmin.max(1);
    while l < lmax {
        out.push(l);
        l *= 2;
    }
    out.push(lmax);
    out
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let v = f()?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
        last = Some(v);
    }
    Ok((best, last.expect("one repeat")))
}

fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let threads = rayon::current_num_threads();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = SsmParams::<f64>::init(cfg.channels, cfg.state_dim, &mut rng);
    let mut rows = Vec::new();
    for l in lengths(cfg.lmin, cfg.lmax) {
        let u = Tensor64::from_fn(vec![l, cfg.channels], |_| rng.gen_range(-1.0..1.0))?;
        let chunk = l.div_ceil(threads);
        let (seq_ms, seq) = best_of(cfg.repeats, || Ok(selective_scan_seq(&params, &u)?))?;
        let (par_ms, par) = best_of(cfg.repeats, || Ok(selective_scan_par(&params, &u, chunk)?))?;
        rows.push(BenchRow {
            len: l,
            channels: cfg.channels,
            state_dim: cfg.state_dim,
            threads,
            chunk,
            seq_ms,
            par_ms,
            speedup: seq_ms / par_ms,
            max_abs_diff: par.max_abs_diff(&seq)?,
        });
    }
    Ok(rows)
}

pub fn scan_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.lmax == 0 || cfg.channels == 0 || cfg.state_dim == 0 {
        return Err(Error::config("scan-bench sizes must be positive"));
    }
    match cfg.threads {
        None => run(cfg),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::config(e.to_string()))?.install(|| run(cfg)),
    }
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
