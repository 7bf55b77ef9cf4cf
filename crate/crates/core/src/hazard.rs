//! Additive hazard head, censored training loss and history pooling.
//!
//! For an input `R̃ = [H, r_AA]`:
//!
//! ```text
//!   B   = R̃ · w_B + b_B
//!   H_k = ReLU(R̃ · w_k + b_k),          k = 0..K-1
//!   P_k = B + Σ_{i<k} H_i,              k = 1..K
//! ```
//!
//! `P` is an unbounded additive score. The loss passes `σ(P_k)` to a binary
//! cross-entropy against `1{event ≤ k}` for every year still under
//! observation.

use rand::Rng;

use crate::autodiff::{masked_bce_loss, Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vmrnn::VmrnnState;

/// Follow-up horizon in years.
pub const HORIZON: usize = 5;

/// Initial bias of every hazard head, keeping the ReLUs active at start.
pub const HAZARD_BIAS_INIT: f64 = 0.01;

/// Observed outcome of one subject. Years count from the last exam.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub event_year: Option<usize>,
    pub followup_years: usize,
}

impl Label {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.followup_years == 0 || self.followup_years > horizon {
            return Err(Error::invalid(format!("followup {} outside 1..={horizon}", self.followup_years)));
        }
        match self.event_year {
            Some(e) if e == 0 || e > self.followup_years => {
                Err(Error::invalid(format!("event year {e} outside 1..={}", self.followup_years)))
            }
            _ => Ok(()),
        }
    }

    pub fn censored(&self) -> bool {
        self.event_year.is_none()
    }

    /// Training class: 0 for no event, otherwise the event year.
    pub fn class(&self) -> usize {
        self.event_year.unwrap_or(0)
    }

    /// `(targets, mask)` over years `1..=horizon`; year `k` is observed when
    /// `k <= followup_years`.
    pub fn targets<T: Scalar>(&self, horizon: usize) -> (Vec<T>, Vec<bool>) {
        (1..=horizon)
            .map(|k| {
                let y = matches!(self.event_year, Some(e) if e <= k);
                (if y { T::one() } else { T::zero() }, k <= self.followup_years)
            })
            .unzip()
    }
}

/// Inverse-frequency weight per class `0..=horizon`, normalized to mean 1.
/// Classes absent from `labels` get the pre-normalization weight 1.
pub fn class_weights(labels: &[Label], horizon: usize) -> Vec<f64> {
    let n_classes = horizon + 1;
    let mut counts = vec![0usize; n_classes];
    for l in labels {
        counts[l.class().min(horizon)] += 1;
    }
    let n = labels.len() as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { n / (n_classes as f64 * c as f64) }).collect();
    let mean = raw.iter().sum::<f64>() / n_classes as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskOutput<T> {
    pub baseline: T,
    /// `H_0..H_{K-1}`, non-negative.
    pub hazards: Vec<T>,
    /// `P_1..P_K`, non-decreasing.
    pub cumulative: Vec<T>,
}

/// Parameter names of the hazard head under `prefix`.
pub struct HazardHead {
    pub input_dim: usize,
    pub horizon: usize,
    pub prefix: String,
}

impl HazardHead {
    pub fn new(input_dim: usize, horizon: usize, prefix: impl Into<String>) -> Result<Self> {
        if input_dim == 0 || horizon == 0 {
            return Err(Error::invalid("hazard head dimensions must be positive"));
        }
        Ok(Self { input_dim, horizon, prefix: prefix.into() })
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Zero weights make every subject score the same until training moves
    /// them; the small positive hazard bias keeps gradients flowing through
    /// the ReLUs.
    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, _rng: &mut impl Rng) {
        let (d, k) = (self.input_dim, self.horizon);
        store.insert(self.name("base.weight"), params::constant(&[d, 1], 0.0));
        store.insert(self.name("base.bias"), params::constant(&[1], 0.0));
        store.insert(self.name("hazard.weight"), params::constant(&[d, k], 0.0));
        store.insert(self.name("hazard.bias"), params::constant(&[k], HAZARD_BIAS_INIT));
    }

    /// Random weights, used to probe the head away from its initial point.
    pub fn randomize<T: Scalar>(&self, store: &mut ParamStore<T>, scale: f64, rng: &mut impl Rng) {
        let (d, k) = (self.input_dim, self.horizon);
        store.insert(self.name("base.weight"), params::uniform(&[d, 1], scale, rng));
        store.insert(self.name("base.bias"), params::uniform(&[1], scale, rng));
        store.insert(self.name("hazard.weight"), params::uniform(&[d, k], scale, rng));
        store.insert(self.name("hazard.bias"), params::uniform(&[k], scale, rng));
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, r_tilde: &Tensor<T>) -> Result<RiskOutput<T>> {
        if r_tilde.len() != self.input_dim {
            return Err(Error::shape("ahl_forward", self.input_dim, r_tilde.len()));
        }
        let x = r_tilde.reshape(vec![1, self.input_dim])?;
        let b = ops::add_row_vector(&ops::matmul(&x, store.get(&self.name("base.weight"))?)?, store.get(&self.name("base.bias"))?)?;
        let pre = ops::add_row_vector(&ops::matmul(&x, store.get(&self.name("hazard.weight"))?)?, store.get(&self.name("hazard.bias"))?)?;
        let hazards = ops::activation(&pre, ops::Activation::Relu)?.into_data();
        if !b.all_finite() || hazards.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite { op: "ahl_forward" });
        }
        Ok(risk_from_parts(b.data()[0], hazards))
    }

    /// Tape version of [`forward`](Self::forward); returns `P` as `[1×K]`.
    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, r_tilde: Var) -> Result<Var> {
        let n = tape.value(r_tilde).len();
        if n != self.input_dim {
            return Err(Error::shape("ahl_forward", self.input_dim, n));
        }
        let k = self.horizon;
        let x = tape.reshape(r_tilde, vec![1, n])?;
        let wb = tape.param(store, &self.name("base.weight"))?;
        let bb = tape.param(store, &self.name("base.bias"))?;
        let wh = tape.param(store, &self.name("hazard.weight"))?;
        let bh = tape.param(store, &self.name("hazard.bias"))?;
        let b = tape.matmul(x, wb)?;
        let b = tape.add_row_vector(b, bb)?;
        let h = tape.matmul(x, wh)?;
        let h = tape.add_row_vector(h, bh)?;
        let h = tape.relu(h)?;
        let ones = tape.constant(Tensor::ones(vec![1, k])?)?;
        let upper = tape.constant(Tensor::from_fn(vec![k, k], |i| if i / k <= i % k { T::one() } else { T::zero() })?)?;
        let base = tape.matmul(b, ones)?;
        let cum = tape.matmul(h, upper)?;
        tape.add(base, cum)
    }
}

/// `P_k = B + (H_0 + .. + H_{k-1})`.
pub fn risk_from_parts<T: Scalar>(baseline: T, hazards: Vec<T>) -> RiskOutput<T> {
    let mut acc = T::zero();
    let cumulative = hazards
        .iter()
        .map(|&h| {
            acc += h;
            baseline + acc
        })
        .collect();
    RiskOutput { baseline, hazards, cumulative }
}

/// Class-weighted masked cross-entropy of one subject.
pub fn risk_loss<T: Scalar>(out: &RiskOutput<T>, label: &Label, class_weights: &[f64]) -> Result<T> {
    let horizon = out.cumulative.len();
    label.validate(horizon)?;
    let (targets, mask) = label.targets::<T>(horizon);
    let w = class_weight(label, class_weights)?;
    Ok(masked_bce_loss(&out.cumulative, &targets, &mask, w))
}

/// Tape version of [`risk_loss`] on `P: [1×K]`.
pub fn trace_risk_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, label: &Label, class_weights: &[f64]) -> Result<Var> {
    let horizon = tape.value(p).len();
    label.validate(horizon)?;
    let (targets, mask) = label.targets::<T>(horizon);
    let w = class_weight(label, class_weights)?;
    tape.masked_bce(p, targets, mask, w)
}

fn class_weight<T: Scalar>(label: &Label, class_weights: &[f64]) -> Result<T> {
    class_weights
        .get(label.class())
        .map(|&w| T::of(w))
        .ok_or_else(|| Error::invalid(format!("no class weight for class {}", label.class())))
}

/// Spatial mean of the last state's hidden map, one value per channel.
pub fn pool_history<T: Scalar>(states: &[VmrnnState<T>]) -> Result<Tensor<T>> {
    let last = states.last().ok_or_else(|| Error::invalid("no recurrent state to pool"))?;
    pool_map(&last.h)
}

/// Spatial mean of a `C×H×W` map.
pub fn pool_map<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, hh, ww) = h.dims3()?;
    ops::mean_cols(&h.reshape(vec![c, hh * ww])?)
}

/// Tape version of [`pool_map`].
pub fn trace_pool_map<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let (c, hh, ww) = tape.value(h).dims3()?;
    let flat = tape.reshape(h, vec![c, hh * ww])?;
    tape.mean_cols(flat)
}
