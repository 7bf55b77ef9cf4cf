//! VSS gating block, VMRNN cell update and the enclosing recurrent block.
//!
//! One present timestep runs
//!
//! ```text
//!   X   = LP([T_t, O_{t-1}, Δt])                    C×H×W
//!   A   = PatchMerge(X)                             2C×H/2×W/2
//!   A₁  = SiLU(DWConv3x3(A) + b)
//!   A₃  = LayerNorm(Σ_v unpermute_v(S6_v(permute_v(A₁))))
//!   Y   = A₃ + SiLU(A),   F = σ(Y)
//!   C_t = F ⊙ (tanh Y + C_{t-1}),   H_t = F ⊙ tanh C_t
//!   O_t = Recon(PatchExpand(H_t))                   C×H×W
//! ```
//!
//! The recurrent state `(H, C)` lives at the merged resolution; the
//! reconstruction `O_t` is what the next step's projection sees. Missing
//! steps leave the state, the output and the step counter untouched.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, Activation, LAYERNORM_EPS};
use crate::params::{self, ParamStore};
use crate::scalar::Scalar;
use crate::scan::{self, SsmParams, DIRECTIONS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmrnnConfig {
    /// Length of the fused per-timestep feature.
    pub input_dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// S6 state size per channel.
    pub state_dim: usize,
}

impl Default for VmrnnConfig {
    fn default() -> Self {
        Self { input_dim: 64, channels: 8, height: 8, width: 8, state_dim: 8 }
    }
}

impl VmrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channels == 0 || self.state_dim == 0 {
            return Err(Error::invalid("vmrnn dimensions must be positive"));
        }
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::invalid(format!("vmrnn grid {}x{} must have even extents of at least 2", self.height, self.width)));
        }
        Ok(())
    }

    /// Channels at the merged resolution.
    pub fn coarse_channels(&self) -> usize {
        2 * self.channels
    }

    pub fn coarse_hw(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn fine_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Length of the pooled history embedding.
    pub fn history_dim(&self) -> usize {
        self.coarse_channels()
    }

    fn fine_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn coarse_shape(&self) -> [usize; 3] {
        let (h, w) = self.coarse_hw();
        [self.coarse_channels(), h, w]
    }
}

/// Recurrent state at the merged resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct VmrnnState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    /// Number of present steps consumed so far.
    pub t: usize,
}

impl<T: Scalar> VmrnnState<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Ok(Self { h: Tensor::zeros(shape.to_vec())?, c: Tensor::zeros(shape.to_vec())?, t: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VssOutput<T> {
    /// Pre-gate feature.
    pub y: Tensor<T>,
    /// Gate `σ(Y)`.
    pub f: Tensor<T>,
}

/// One timestep of block input.
#[derive(Debug, Clone)]
pub struct StepInput<T> {
    pub feature: Tensor<T>,
    /// Years since the previous present exam.
    pub delta_t: T,
    pub present: bool,
}

/// One timestep of block input recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TraceStep<T> {
    pub feature: Var,
    pub delta_t: T,
    pub present: bool,
}

/// `C_t = F ⊙ (tanh Y + C_{t-1})`, `H_t = F ⊙ tanh C_t`.
pub fn cell_step<T: Scalar>(prev: &VmrnnState<T>, vss: &VssOutput<T>) -> Result<VmrnnState<T>> {
    prev.c.expect_same_shape("cell_step", &vss.y)?;
    vss.y.expect_same_shape("cell_step", &vss.f)?;
    let c = vss.y.map(|y| y.tanh()).zip_map(&prev.c, |a, b| a + b)?.zip_map(&vss.f, |s, f| f * s)?;
    let h = vss.f.zip_map(&c.map(|v| v.tanh()), |f, tc| f * tc)?;
    Ok(VmrnnState { h, c, t: prev.t + 1 })
}

/// Gather index taking a position-major `(H·W)×C` map to `(H/2·W/2)×4C`
/// patch tokens. Each token concatenates its 2×2 cells in the order
/// (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn patch_merge_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let (hc, wc) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h * w);
    for i in 0..hc {
        for j in 0..wc {
            for (dy, dx) in OFFSETS {
                let pos = (2 * i + dy) * w + 2 * j + dx;
                idx.extend((0..c).map(|ch| pos * c + ch));
            }
        }
    }
    idx
}

/// Inverse of [`patch_merge_index`]: scatters `(H/2·W/2)×4C` tokens back
/// to a position-major `(H·W)×C` map.
pub fn patch_expand_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    scan::inverse_order(&patch_merge_index(c, h, w))
}

struct Indices {
    merge: Arc<[usize]>,
    expand: Arc<[usize]>,
    dir_in: Vec<Arc<[usize]>>,
    dir_out: Vec<Arc<[usize]>>,
}

/// The VMRNN block: parameter names under `prefix` plus the layer logic.
pub struct VmrnnBlock {
    pub cfg: VmrnnConfig,
    pub prefix: String,
    idx: Indices,
}

impl VmrnnBlock {
    pub fn new(cfg: VmrnnConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let cc = cfg.coarse_channels();
        let (hc, wc) = cfg.coarse_hw();
        let idx = Indices {
            merge: patch_merge_index(c, h, w).into(),
            expand: patch_expand_index(c, h, w).into(),
            dir_in: (0..DIRECTIONS).map(|v| scan::expand_index(hc, wc, cc, v)).collect(),
            dir_out: (0..DIRECTIONS).map(|v| scan::merge_index(hc, wc, cc, v)).collect(),
        };
        Ok(Self { cfg, prefix: prefix.into(), idx })
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    fn s6_prefix(&self, v: usize) -> String {
        self.name(&format!("vss.s6.{v}"))
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let cfg = &self.cfg;
        let (c, cc) = (cfg.channels, cfg.coarse_channels());
        let lp_in = cfg.input_dim + cfg.fine_len() + 1;
        let lp_out = cfg.fine_len();
        store.insert(self.name("lp.weight"), params::glorot(&[lp_in, lp_out], lp_in, lp_out, rng));
        store.insert(self.name("lp.bias"), params::constant(&[lp_out], 0.0));
        store.insert(self.name("merge.weight"), params::glorot(&[4 * c, cc], 4 * c, cc, rng));
        store.insert(self.name("merge.bias"), params::constant(&[cc], 0.0));
        store.insert(self.name("vss.dw.kernel"), params::uniform(&[cc, 3, 3], 1.0 / 3.0, rng));
        store.insert(self.name("vss.dw.bias"), params::constant(&[cc], 0.0));
        for v in 0..DIRECTIONS {
            SsmParams::init(cc, cfg.state_dim, rng).store_into(store, &self.s6_prefix(v));
        }
        store.insert(self.name("vss.ln.gamma"), params::constant(&[cc], 1.0));
        store.insert(self.name("vss.ln.beta"), params::constant(&[cc], 0.0));
        store.insert(self.name("expand.weight"), params::glorot(&[cc, 4 * c], cc, 4 * c, rng));
        store.insert(self.name("expand.bias"), params::constant(&[4 * c], 0.0));
        store.insert(self.name("recon.weight"), params::glorot(&[c, c], c, c, rng));
        store.insert(self.name("recon.bias"), params::constant(&[c], 0.0));
    }

    fn check_fine(&self, x: &Tensor<impl Scalar>, op: &'static str) -> Result<()> {
        if x.shape() != self.cfg.fine_shape() {
            return Err(Error::shape(op, format!("{:?}", self.cfg.fine_shape()), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    fn check_coarse(&self, x: &Tensor<impl Scalar>, op: &'static str) -> Result<()> {
        if x.shape() != self.cfg.coarse_shape() {
            return Err(Error::shape(op, format!("{:?}", self.cfg.coarse_shape()), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// `[T_t, flatten(H_prev), Δt] · W + b`, reshaped to `C×H×W`.
    pub fn lp_fuse<T: Scalar>(&self, store: &ParamStore<T>, feature: &Tensor<T>, h_prev: &Tensor<T>, delta_t: T) -> Result<Tensor<T>> {
        if feature.len() != self.cfg.input_dim {
            return Err(Error::shape("lp_fuse", self.cfg.input_dim, feature.len()));
        }
        self.check_fine(h_prev, "lp_fuse")?;
        let mut row = Vec::with_capacity(feature.len() + h_prev.len() + 1);
        row.extend_from_slice(feature.data());
        row.extend_from_slice(h_prev.data());
        row.push(delta_t);
        let n = row.len();
        let x = Tensor::new(vec![1, n], row)?;
        let y = ops::matmul(&x, store.get(&self.name("lp.weight"))?)?;
        ops::add_row_vector(&y, store.get(&self.name("lp.bias"))?)?.into_reshaped(self.cfg.fine_shape().to_vec())
    }

    /// 2×2 patch merge with a linear map to `2C` channels.
    pub fn patch_merge<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_fine(x, "patch_merge")?;
        let (c, h, w) = (self.cfg.channels, self.cfg.height, self.cfg.width);
        let (hc, wc) = self.cfg.coarse_hw();
        let pos = ops::transpose(&x.reshape(vec![c, h * w])?)?;
        let tokens = ops::gather(&pos, &self.idx.merge, vec![hc * wc, 4 * c])?;
        let m = ops::matmul(&tokens, store.get(&self.name("merge.weight"))?)?;
        let m = ops::add_row_vector(&m, store.get(&self.name("merge.bias"))?)?;
        ops::transpose(&m)?.into_reshaped(self.cfg.coarse_shape().to_vec())
    }

    /// Linear patch expand to the full grid followed by a 1×1 linear
    /// reconstruction to `C` channels.
    pub fn expand_reconstruct<T: Scalar>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_coarse(h, "expand_reconstruct")?;
        let cfg = &self.cfg;
        let (hc, wc) = cfg.coarse_hw();
        let pos = ops::transpose(&h.reshape(vec![cfg.coarse_channels(), hc * wc])?)?;
        let e = ops::matmul(&pos, store.get(&self.name("expand.weight"))?)?;
        let e = ops::add_row_vector(&e, store.get(&self.name("expand.bias"))?)?;
        let fine = ops::gather(&e, &self.idx.expand, vec![cfg.height * cfg.width, cfg.channels])?;
        let r = ops::matmul(&fine, store.get(&self.name("recon.weight"))?)?;
        let r = ops::add_row_vector(&r, store.get(&self.name("recon.bias"))?)?;
        ops::transpose(&r)?.into_reshaped(cfg.fine_shape().to_vec())
    }

    /// VSS block on a merged-resolution map `A`.
    pub fn vss_forward<T: Scalar>(&self, store: &ParamStore<T>, a: &Tensor<T>) -> Result<VssOutput<T>> {
        self.check_coarse(a, "vss_forward")?;
        let cc = self.cfg.coarse_channels();
        let (hc, wc) = self.cfg.coarse_hw();
        let hw = hc * wc;
        let conv = ops::dwconv3x3(a, store.get(&self.name("vss.dw.kernel"))?)?;
        let a1 = ops::activation(&ops::add_col_vector(&conv, store.get(&self.name("vss.dw.bias"))?)?, Activation::Silu)?;
        let seq = ops::transpose(&a1.reshape(vec![cc, hw])?)?;
        let mut merged: Option<Tensor<T>> = None;
        for v in 0..DIRECTIONS {
            let u = ops::gather(&seq, &self.idx.dir_in[v], vec![hw, cc])?;
            let params = SsmParams::from_store(store, &self.s6_prefix(v))?;
            let y = scan::selective_scan_seq(&params, &u)?;
            let back = ops::gather(&y, &self.idx.dir_out[v], vec![hw, cc])?;
            merged = Some(match merged {
                None => back,
                Some(m) => m.zip_map(&back, |x, y| x + y)?,
            });
        }
        let merged = merged.expect("four directions");
        let ln =
            ops::layernorm(&merged, store.get(&self.name("vss.ln.gamma"))?, store.get(&self.name("vss.ln.beta"))?, T::of(LAYERNORM_EPS))?;
        let a3 = ops::transpose(&ln)?.into_reshaped(self.cfg.coarse_shape().to_vec())?;
        let b1 = ops::activation(a, Activation::Silu)?;
        let y = a3.zip_map(&b1, |x, y| x + y)?;
        let f = ops::activation(&y, Activation::Sigmoid)?;
        Ok(VssOutput { y, f })
    }

    /// Run the block over a sequence. Returns the final hidden state and the
    /// state after every step (missing steps repeat the previous state).
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, steps: &[StepInput<T>]) -> Result<(Tensor<T>, Vec<VmrnnState<T>>)> {
        if steps.is_empty() {
            return Err(Error::invalid("empty exam sequence"));
        }
        if !steps.iter().any(|s| s.present) {
            return Err(Error::invalid("exam sequence has no present step"));
        }
        let mut state = VmrnnState::zeros(&self.cfg.coarse_shape())?;
        let mut out = Tensor::zeros(self.cfg.fine_shape().to_vec())?;
        let mut states = Vec::with_capacity(steps.len());
        for step in steps {
            if step.present {
                let x = self.lp_fuse(store, &step.feature, &out, step.delta_t)?;
                let a = self.patch_merge(store, &x)?;
                let vss = self.vss_forward(store, &a)?;
                state = cell_step(&state, &vss)?;
                out = self.expand_reconstruct(store, &state.h)?;
            }
            states.push(state.clone());
        }
        Ok((state.h, states))
    }

    /// Tape version of [`forward`](Self::forward); returns the final hidden
    /// state.
    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, steps: &[TraceStep<T>]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::invalid("empty exam sequence"));
        }
        if !steps.iter().any(|s| s.present) {
            return Err(Error::invalid("exam sequence has no present step"));
        }
        let zeros_coarse = tape.constant(Tensor::zeros(self.cfg.coarse_shape().to_vec())?)?;
        let (mut h, mut c) = (zeros_coarse, zeros_coarse);
        let mut out = tape.constant(Tensor::zeros(self.cfg.fine_shape().to_vec())?)?;
        for step in steps.iter().filter(|s| s.present) {
            let x = self.trace_lp_fuse(tape, store, step.feature, out, step.delta_t)?;
            let a = self.trace_patch_merge(tape, store, x)?;
            let (y, f) = self.trace_vss(tape, store, a)?;
            (h, c) = trace_cell_step(tape, c, y, f)?;
            out = self.trace_expand_reconstruct(tape, store, h)?;
        }
        Ok(h)
    }

    pub fn trace_lp_fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feature: Var,
        h_prev: Var,
        delta_t: T,
    ) -> Result<Var> {
        let n_feat = tape.value(feature).len();
        if n_feat != self.cfg.input_dim {
            return Err(Error::shape("lp_fuse", self.cfg.input_dim, n_feat));
        }
        let dt = tape.constant(Tensor::from_vec(vec![delta_t])?)?;
        let n = self.cfg.input_dim + self.cfg.fine_len() + 1;
        let x = tape.concat(&[feature, h_prev, dt], vec![1, n])?;
        let w = tape.param(store, &self.name("lp.weight"))?;
        let b = tape.param(store, &self.name("lp.bias"))?;
        let y = tape.matmul(x, w)?;
        let y = tape.add_row_vector(y, b)?;
        tape.reshape(y, self.cfg.fine_shape().to_vec())
    }

    pub fn trace_patch_merge<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = (self.cfg.channels, self.cfg.height, self.cfg.width);
        let (hc, wc) = self.cfg.coarse_hw();
        let x = tape.reshape(x, vec![c, h * w])?;
        let pos = tape.transpose(x)?;
        let tokens = tape.gather(pos, self.idx.merge.clone(), vec![hc * wc, 4 * c])?;
        let wm = tape.param(store, &self.name("merge.weight"))?;
        let bm = tape.param(store, &self.name("merge.bias"))?;
        let m = tape.matmul(tokens, wm)?;
        let m = tape.add_row_vector(m, bm)?;
        let m = tape.transpose(m)?;
        tape.reshape(m, self.cfg.coarse_shape().to_vec())
    }

    pub fn trace_expand_reconstruct<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let (hc, wc) = cfg.coarse_hw();
        let x = tape.reshape(h, vec![cfg.coarse_channels(), hc * wc])?;
        let pos = tape.transpose(x)?;
        let we = tape.param(store, &self.name("expand.weight"))?;
        let be = tape.param(store, &self.name("expand.bias"))?;
        let e = tape.matmul(pos, we)?;
        let e = tape.add_row_vector(e, be)?;
        let fine = tape.gather(e, self.idx.expand.clone(), vec![cfg.height * cfg.width, cfg.channels])?;
        let wr = tape.param(store, &self.name("recon.weight"))?;
        let br = tape.param(store, &self.name("recon.bias"))?;
        let r = tape.matmul(fine, wr)?;
        let r = tape.add_row_vector(r, br)?;
        let r = tape.transpose(r)?;
        tape.reshape(r, cfg.fine_shape().to_vec())
    }

    /// Returns `(Y, F)`.
    pub fn trace_vss<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, a: Var) -> Result<(Var, Var)> {
        let cc = self.cfg.coarse_channels();
        let (hc, wc) = self.cfg.coarse_hw();
        let hw = hc * wc;
        let k = tape.param(store, &self.name("vss.dw.kernel"))?;
        let kb = tape.param(store, &self.name("vss.dw.bias"))?;
        let conv = tape.dwconv3x3(a, k)?;
        let conv = tape.add_col_vector(conv, kb)?;
        let a1 = tape.silu(conv)?;
        let a1 = tape.reshape(a1, vec![cc, hw])?;
        let seq = tape.transpose(a1)?;
        let mut merged: Option<Var> = None;
        for v in 0..DIRECTIONS {
            let u = tape.gather(seq, self.idx.dir_in[v].clone(), vec![hw, cc])?;
            let y = scan::trace_s6(tape, store, &self.s6_prefix(v), u)?;
            let back = tape.gather(y, self.idx.dir_out[v].clone(), vec![hw, cc])?;
            merged = Some(match merged {
                None => back,
                Some(m) => tape.add(m, back)?,
            });
        }
        let gamma = tape.param(store, &self.name("vss.ln.gamma"))?;
        let beta = tape.param(store, &self.name("vss.ln.beta"))?;
        let ln = tape.layernorm(merged.expect("four directions"), gamma, beta)?;
        let a3 = tape.transpose(ln)?;
        let a3 = tape.reshape(a3, self.cfg.coarse_shape().to_vec())?;
        let b1 = tape.silu(a)?;
        let y = tape.add(a3, b1)?;
        let f = tape.sigmoid(y)?;
        Ok((y, f))
    }
}

/// Tape version of [`cell_step`]; returns `(H_t, C_t)`.
pub fn trace_cell_step<T: Scalar>(tape: &mut Tape<T>, c_prev: Var, y: Var, f: Var) -> Result<(Var, Var)> {
    let ty = tape.tanh(y)?;
    let s = tape.add(ty, c_prev)?;
    let c = tape.mul(f, s)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(f, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_store_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale)).unwrap()
    }

    fn setup(seed: u64) -> (VmrnnBlock, ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = VmrnnBlock::new(VmrnnConfig::default(), "vmrnn").unwrap();
        let mut store = ParamStore::new();
        block.init_params(&mut store, &mut rng);
        (block, store, rng)
    }

    fn steps(n: usize, rng: &mut ChaCha8Rng) -> Vec<StepInput<f64>> {
        (0..n).map(|_| StepInput { feature: random(&[64], 1.0, rng), delta_t: 1.0, present: true }).collect()
    }

    #[test]
    fn lp_fuse_of_zeros_is_zero() {
        let (block, store, _) = setup(1);
        let x = block.lp_fuse(&store, &Tensor::zeros(vec![64]).unwrap(), &Tensor::zeros(vec![8, 8, 8]).unwrap(), 0.0).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert!(block.lp_fuse(&store, &Tensor::zeros(vec![63]).unwrap(), &x, 0.0).is_err());
    }

    #[test]
    fn lp_fuse_identity_weights_reproduce_feature_layout() {
        let cfg = VmrnnConfig { input_dim: 32, channels: 2, height: 4, width: 4, state_dim: 2 };
        let block = VmrnnBlock::new(cfg, "b").unwrap();
        let mut store = ParamStore::new();
        block.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let n_in = 32 + 32 + 1;
        store.insert("b.lp.weight", Tensor::from_fn(vec![n_in, 32], |i| if i / 32 == i % 32 { 1.0 } else { 0.0 }).unwrap());
        let feat = Tensor::from_fn(vec![32], |i| i as f64).unwrap();
        let x = block.lp_fuse(&store, &feat, &Tensor::full(vec![2, 4, 4], 7.0).unwrap(), 3.0).unwrap();
        assert_eq!(x.data(), feat.data());
    }

    #[test]
    fn patch_merge_and_expand_indices_are_inverse() {
        let (c, h, w) = (3, 4, 6);
        let m = patch_merge_index(c, h, w);
        let e = patch_expand_index(c, h, w);
        for (k, &src) in m.iter().enumerate() {
            assert_eq!(e[src], k);
        }
        // token (0,0) channel 0 of quadrant (1,0) reads cell (1,0)
        assert_eq!(m[c], w * c);
        // quadrant (0,1) reads cell (0,1)
        assert_eq!(m[2 * c], c);
    }

    #[test]
    fn vss_of_zero_input_gives_half_gate() {
        let (block, store, _) = setup(2);
        let out = block.vss_forward(&store, &Tensor::zeros(vec![16, 4, 4]).unwrap()).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
        assert!(out.f.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn vss_gate_is_strictly_inside_unit_interval() {
        let (block, store, mut rng) = setup(3);
        for _ in 0..1000 {
            let out = block.vss_forward(&store, &random(&[16, 4, 4], 3.0, &mut rng)).unwrap();
            assert!(out.f.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn vss_matches_composition_of_sub_ops() {
        let (block, store, mut rng) = setup(4);
        let a = random(&[16, 4, 4], 1.0, &mut rng);
        let out = block.vss_forward(&store, &a).unwrap();

        let conv = ops::dwconv3x3(&a, store.get("vmrnn.vss.dw.kernel").unwrap()).unwrap();
        let bias = store.get("vmrnn.vss.dw.bias").unwrap();
        let a1 = Tensor::from_fn(vec![16, 4, 4], |i| ops::Activation::Silu.apply(conv.data()[i] + bias.data()[i / 16])).unwrap();
        let dirs = scan::cross_scan_expand(&a1).unwrap();
        let ys: Vec<Tensor<f64>> = (0..4)
            .map(|v| {
                let u = Tensor::new(vec![16, 16], dirs.data()[v * 256..(v + 1) * 256].to_vec()).unwrap();
                let p = SsmParams::from_store(&store, &format!("vmrnn.vss.s6.{v}")).unwrap();
                scan::selective_scan_seq(&p, &u).unwrap()
            })
            .collect();
        let merged = scan::cross_merge(&ys, 4, 4).unwrap();
        let pos = ops::transpose(&merged.reshape(vec![16, 16]).unwrap()).unwrap();
        let ln =
            ops::layernorm(&pos, store.get("vmrnn.vss.ln.gamma").unwrap(), store.get("vmrnn.vss.ln.beta").unwrap(), LAYERNORM_EPS).unwrap();
        let a3 = ops::transpose(&ln).unwrap();
        for i in 0..256 {
            let y = a3.data()[i] + ops::Activation::Silu.apply(a.data()[i]);
            assert_eq!(out.y.data()[i], y);
            assert_eq!(out.f.data()[i], ops::sigmoid(y));
        }
    }

    #[test]
    fn cell_step_fixed_point_and_saturation() {
        let zero = VmrnnState::<f64>::zeros(&[1, 1, 1]).unwrap();
        let vss =
            |y: f64| VssOutput { y: Tensor::full(vec![1, 1, 1], y).unwrap(), f: Tensor::full(vec![1, 1, 1], ops::sigmoid(y)).unwrap() };
        let s = cell_step(&zero, &vss(0.0)).unwrap();
        assert_eq!((s.c.data()[0], s.h.data()[0], s.t), (0.0, 0.0, 1));
        let s = cell_step(&zero, &vss(30.0)).unwrap();
        assert!((s.c.data()[0] - 1.0).abs() < 1e-12);
        assert!((s.h.data()[0] - 1f64.tanh()).abs() < 1e-12);
        assert!((s.h.data()[0] - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn cell_step_matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = VmrnnState::<f64>::zeros(&[2, 3, 3]).unwrap();
        let (mut c_ref, mut h_ref) = (vec![0.0; 18], vec![0.0; 18]);
        for _ in 0..5 {
            let y = random(&[2, 3, 3], 2.0, &mut rng);
            let f = y.map(ops::sigmoid);
            for i in 0..18 {
                c_ref[i] = f.data()[i] * (y.data()[i].tanh() + c_ref[i]);
                h_ref[i] = f.data()[i] * c_ref[i].tanh();
            }
            state = cell_step(&state, &VssOutput { y, f }).unwrap();
            assert_eq!(state.c.data(), c_ref.as_slice());
            assert_eq!(state.h.data(), h_ref.as_slice());
        }
        assert_eq!(state.t, 5);
    }

    #[test]
    fn single_step_block_is_one_cell_step() {
        let (block, store, mut rng) = setup(6);
        let seq = steps(1, &mut rng);
        let (h, states) = block.forward(&store, &seq).unwrap();
        let x = block.lp_fuse(&store, &seq[0].feature, &Tensor::zeros(vec![8, 8, 8]).unwrap(), 1.0).unwrap();
        let vss = block.vss_forward(&store, &block.patch_merge(&store, &x).unwrap()).unwrap();
        let expect = cell_step(&VmrnnState::zeros(&[16, 4, 4]).unwrap(), &vss).unwrap();
        assert_eq!(h, expect.h);
        assert_eq!(states, vec![expect]);
    }

    #[test]
    fn block_matches_explicit_unrolling() {
        let (block, store, mut rng) = setup(7);
        let seq = steps(4, &mut rng);
        let (h, _) = block.forward(&store, &seq).unwrap();
        let mut state = VmrnnState::zeros(&[16, 4, 4]).unwrap();
        let mut out = Tensor::zeros(vec![8, 8, 8]).unwrap();
        for s in &seq {
            let x = block.lp_fuse(&store, &s.feature, &out, s.delta_t).unwrap();
            let vss = block.vss_forward(&store, &block.patch_merge(&store, &x).unwrap()).unwrap();
            state = cell_step(&state, &vss).unwrap();
            out = block.expand_reconstruct(&store, &state.h).unwrap();
        }
        assert_eq!(h, state.h);
        assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn missing_steps_freeze_state() {
        let (block, store, mut rng) = setup(8);
        let mut seq = steps(5, &mut rng);
        for s in &mut seq[1..] {
            s.present = false;
        }
        let (h, states) = block.forward(&store, &seq).unwrap();
        assert_eq!(h, states[0].h);
        assert!(states.iter().all(|s| s == &states[0]));

        let base = steps(3, &mut rng);
        let (h_base, _) = block.forward(&store, &base).unwrap();
        for pos in 0..=3 {
            let mut with_gap = base.clone();
            with_gap.insert(pos, StepInput { feature: random(&[64], 5.0, &mut rng), delta_t: 9.0, present: false });
            assert_eq!(block.forward(&store, &with_gap).unwrap().0, h_base);
        }
    }

    #[test]
    fn block_rejects_empty_and_all_missing() {
        let (block, store, mut rng) = setup(9);
        assert!(block.forward(&store, &[]).is_err());
        let mut seq = steps(2, &mut rng);
        seq.iter_mut().for_each(|s| s.present = false);
        assert!(block.forward(&store, &seq).is_err());
    }

    #[test]
    fn block_is_order_sensitive() {
        let (block, store, mut rng) = setup(10);
        let seq = steps(3, &mut rng);
        let mut swapped = seq.clone();
        swapped.swap(0, 2);
        assert_ne!(block.forward(&store, &seq).unwrap().0, block.forward(&store, &swapped).unwrap().0);
    }

    fn trace_all(block: &VmrnnBlock, tape: &mut Tape<f64>, store: &ParamStore<f64>, seq: &[StepInput<f64>]) -> Var {
        let trace_steps: Vec<TraceStep<f64>> = seq
            .iter()
            .enumerate()
            .map(|(i, s)| TraceStep { feature: tape.param(store, &format!("feat{i}")).unwrap(), delta_t: s.delta_t, present: s.present })
            .collect();
        block.trace(tape, store, &trace_steps).unwrap()
    }

    #[test]
    fn tape_block_matches_plain_block() {
        let (block, mut store, mut rng) = setup(11);
        let mut seq = steps(4, &mut rng);
        seq[2].present = false;
        for (i, s) in seq.iter().enumerate() {
            store.insert(format!("feat{i}"), s.feature.clone());
        }
        let mut tape = Tape::new();
        let h = trace_all(&block, &mut tape, &store, &seq);
        assert_eq!(tape.value(h), &block.forward(&store, &seq).unwrap().0);
    }

    #[test]
    fn block_gradient_through_three_steps() {
        let (block, mut store, mut rng) = setup(12);
        let mut seq = steps(3, &mut rng);
        seq[1].delta_t = 2.0;
        for (i, s) in seq.iter().enumerate() {
            store.insert(format!("feat{i}"), s.feature.clone());
        }
        let proj = random(&[16, 4, 4], 1.0, &mut rng);
        let cfg = GradCheck { max_coords: Some(12), ..GradCheck::default() };
        let report = check_store_gradients(&store, &cfg, |tape, s| {
            let h = trace_all(&block, tape, s, &seq);
            let p = tape.constant(proj.clone())?;
            let m = tape.mul(h, p)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn vss_and_cell_gradients() {
        let (block, mut store, mut rng) = setup(13);
        store.insert("a", random(&[16, 4, 4], 1.0, &mut rng));
        store.insert("c_prev", random(&[16, 4, 4], 1.0, &mut rng));
        let proj = random(&[16, 4, 4], 1.0, &mut rng);
        let report = check_store_gradients(&store, &GradCheck::default(), |tape, s| {
            let a = tape.param(s, "a")?;
            let c_prev = tape.param(s, "c_prev")?;
            let (y, f) = block.trace_vss(tape, s, a)?;
            let (h, c) = trace_cell_step(tape, c_prev, y, f)?;
            let hc = tape.add(h, c)?;
            let p = tape.constant(proj.clone())?;
            let m = tape.mul(hc, p)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn lp_fuse_gradient() {
        let cfg = VmrnnConfig { input_dim: 6, channels: 2, height: 2, width: 2, state_dim: 2 };
        let block = VmrnnBlock::new(cfg, "b").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        block.init_params(&mut store, &mut rng);
        store.insert("t", random(&[6], 1.0, &mut rng));
        store.insert("h", random(&[2, 2, 2], 1.0, &mut rng));
        let proj = random(&[2, 2, 2], 1.0, &mut rng);
        let report = check_store_gradients(&store, &GradCheck::default(), |tape, s| {
            let t = tape.param(s, "t")?;
            let h = tape.param(s, "h")?;
            let x = block.trace_lp_fuse(tape, s, t, h, 1.5)?;
            let p = tape.constant(proj.clone())?;
            let m = tape.mul(x, p)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
