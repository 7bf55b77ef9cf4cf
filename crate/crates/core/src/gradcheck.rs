//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled, seeded).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_coords: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel >= self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{name}[{idx}]: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compare reverse-mode gradients of `build` against central differences
/// for every parameter of `store` that the tape marks trainable.
pub fn check_store_gradients<F>(store: &ParamStore<f64>, cfg: &GradCheck, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        t.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport::default();
    let mut work = store.clone();
    for (name, grad) in &analytic {
        let n = grad.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(name, i, grad.data()[i], numeric, cfg.floor);
        }
    }
    Ok(report)
}

/// Convenience wrapper for free-standing inputs; `build` receives one var
/// per input tensor, in order.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheck, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("input{i}"), t.clone());
    }
    check_store_gradients(&store, cfg, |tape, s| {
        let vars = (0..inputs.len()).map(|i| tape.param(s, &format!("input{i}"))).collect::<Result<Vec<_>>>()?;
        build(tape, &vars)
    })
}
