//! Selective state-space scan (S6) and the four-way cross scan used by the
//! VSS block.
//!
//! The recurrence, per channel `c` and state index `n`:
//!
//! ```text
//!   Abar_t = exp(Δ_t[c] · A[c, n])          (zero-order hold)
//!   Bbar_t = Δ_t[c] · B_t[n]                (Euler input term)
//!   h_t    = Abar_t · h_{t-1} + Bbar_t · u_t[c]
//!   y_t[c] = Σ_n C_t[n] · h_t[c, n] + D[c] · u_t[c]
//! ```
//!
//! `B_t`, `C_t` and `Δ_t` are projected from `u_t`; `A = -exp(A_log)` and `D`
//! are input-independent. Each step is an affine map `h ↦ a·h + b`, and
//! affine maps compose associatively:
//! `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`. [`selective_scan_par`] uses that
//! to split the sequence into chunks that are reduced independently and then
//! stitched together with their carried-in state.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::params::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-direction S6 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// `C×N`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `C`, direct passthrough.
    pub d_skip: Tensor<T>,
    /// `C×N`
    pub proj_b: Tensor<T>,
    /// `C×N`
    pub proj_c: Tensor<T>,
    /// `C×1`
    pub proj_delta: Tensor<T>,
    /// `C`
    pub delta_bias: Tensor<T>,
}

const FIELDS: [&str; 6] = ["a_log", "d_skip", "proj_b", "proj_c", "proj_delta", "delta_bias"];

impl<T: Scalar> SsmParams<T> {
    /// `A[c, n] = -(n + 1)`, so the decay rates span `[-1, -N]`; step sizes
    /// start log-uniform in `[0.001, 0.1]` across channels.
    pub fn init(channels: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        let a_log = Tensor::from_fn(vec![channels, state_dim], |i| T::of(((i % state_dim) + 1) as f64).ln()).expect("shape");
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let delta_bias = Tensor::from_fn(vec![channels], |_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse softplus
            T::of(dt.exp_m1().ln())
        })
        .expect("shape");
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            a_log,
            d_skip: params::constant(&[channels], 1.0),
            proj_b: params::uniform(&[channels, state_dim], bound, rng),
            proj_c: params::uniform(&[channels, state_dim], bound, rng),
            proj_delta: params::uniform(&[channels, 1], bound, rng),
            delta_bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Effective state matrix `A = -exp(A_log)`, strictly negative.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn store_into(&self, store: &mut ParamStore<T>, prefix: &str) {
        let tensors = [&self.a_log, &self.d_skip, &self.proj_b, &self.proj_c, &self.proj_delta, &self.delta_bias];
        for (field, t) in FIELDS.iter().zip(tensors) {
            store.insert(format!("{prefix}.{field}"), t.clone());
        }
    }

    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |f: &str| store.get(&format!("{prefix}.{f}")).cloned();
        Ok(Self {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            proj_b: get("proj_b")?,
            proj_c: get("proj_c")?,
            proj_delta: get("proj_delta")?,
            delta_bias: get("delta_bias")?,
        })
    }
}

/// Input-dependent quantities of one sequence.
#[derive(Debug, Clone)]
pub struct Projections<T> {
    /// `L×C`, strictly positive.
    pub delta: Tensor<T>,
    /// `L×N`
    pub b: Tensor<T>,
    /// `L×N`
    pub c: Tensor<T>,
}

/// `Δ = softplus(u·w_Δ + bias)`, `B = u·W_B`, `C = u·W_C`.
pub fn project<T: Scalar>(params: &SsmParams<T>, u: &Tensor<T>) -> Result<Projections<T>> {
    let (l, ch) = u.dims2()?;
    if ch != params.channels() {
        return Err(Error::shape("s6 project", params.channels(), ch));
    }
    let s = ops::matmul(u, &params.proj_delta)?;
    let bias = params.delta_bias.data();
    let delta = Tensor::from_fn(vec![l, ch], |i| ops::softplus(s.data()[i / ch] + bias[i % ch]))?;
    Ok(Projections { delta, b: ops::matmul(u, &params.proj_b)?, c: ops::matmul(u, &params.proj_c)? })
}

/// Zero-order-hold state term and Euler input term for one position.
///
/// `a` and `b_t` are `C×N`, `delta_t` is `C`.
pub fn discretize<T: Scalar>(a: &Tensor<T>, b_t: &Tensor<T>, delta_t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, n) = a.dims2()?;
    a.expect_same_shape("discretize", b_t)?;
    if delta_t.shape() != [c] {
        return Err(Error::shape("discretize", format!("[{c}]"), format!("{:?}", delta_t.shape())));
    }
    if let Some(bad) = delta_t.data().iter().find(|&&d| d <= T::zero() || !d.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {bad}")));
    }
    let dt = delta_t.data();
    let abar = Tensor::from_fn(vec![c, n], |i| (dt[i / n] * a.data()[i]).exp())?;
    let bbar = Tensor::from_fn(vec![c, n], |i| dt[i / n] * b_t.data()[i])?;
    Ok((abar, bbar))
}

struct ScanInputs<'a, T> {
    u: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    d: &'a [T],
    channels: usize,
    state: usize,
}

impl<'a, T: Scalar> ScanInputs<'a, T> {
    fn new(
        u: &'a Tensor<T>,
        delta: &'a Tensor<T>,
        a: &'a Tensor<T>,
        b: &'a Tensor<T>,
        c: &'a Tensor<T>,
        d: &'a Tensor<T>,
    ) -> Result<(Self, usize)> {
        let (l, ch) = u.dims2()?;
        let (ach, n) = a.dims2()?;
        u.expect_same_shape("selective_scan", delta)?;
        b.expect_same_shape("selective_scan", c)?;
        if ach != ch || b.shape() != [l, n] || d.shape() != [ch] {
            return Err(Error::shape(
                "selective_scan",
                format!("u [{l}, {ch}], a [{ch}, N], b/c [{l}, N], d [{ch}]"),
                format!("a {:?}, b {:?}, d {:?}", a.shape(), b.shape(), d.shape()),
            ));
        }
        Ok((Self { u: u.data(), delta: delta.data(), a: a.data(), b: b.data(), c: c.data(), d: d.data(), channels: ch, state: n }, l))
    }

    /// Advance `h` through positions `t0..t1`, writing `y` rows for those
    /// positions and, when given, the post-update state of every position.
    fn run(&self, t0: usize, t1: usize, h: &mut [T], y: &mut [T], mut states: Option<&mut [T]>) {
        let (ch, n) = (self.channels, self.state);
        for t in t0..t1 {
            let row = (t - t0) * ch;
            for c in 0..ch {
                let dl = self.delta[t * ch + c];
                let uu = self.u[t * ch + c];
                let mut acc = T::zero();
                for k in 0..n {
                    let abar = (dl * self.a[c * n + k]).exp();
                    let bbar = dl * self.b[t * n + k];
                    let hv = abar * h[c * n + k] + bbar * uu;
                    h[c * n + k] = hv;
                    acc += self.c[t * n + k] * hv;
                }
                y[row + c] = acc + self.d[c] * uu;
            }
            if let Some(s) = states.as_deref_mut() {
                s[(t - t0) * ch * n..(t - t0 + 1) * ch * n].copy_from_slice(h);
            }
        }
    }

    /// Compose the affine maps of positions `t0..t1` into one `(a, b)` pair
    /// per lane.
    fn reduce(&self, t0: usize, t1: usize) -> (Vec<T>, Vec<T>) {
        let (ch, n) = (self.channels, self.state);
        let mut a_acc = vec![T::one(); ch * n];
        let mut b_acc = vec![T::zero(); ch * n];
        for t in t0..t1 {
            for c in 0..ch {
                let dl = self.delta[t * ch + c];
                let uu = self.u[t * ch + c];
                for k in 0..n {
                    let lane = c * n + k;
                    let abar = (dl * self.a[lane]).exp();
                    let bbar = dl * self.b[t * n + k];
                    a_acc[lane] = abar * a_acc[lane];
                    b_acc[lane] = abar * b_acc[lane] + bbar * uu;
                }
            }
        }
        (a_acc, b_acc)
    }
}

/// Sequential scan from a zero state. Returns `y: [L×C]` and every
/// post-update state, flattened `[L×C×N]`.
pub fn scan_forward<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (inp, l) = ScanInputs::new(u, delta, a, b, c, d)?;
    let (ch, n) = (inp.channels, inp.state);
    let mut h = vec![T::zero(); ch * n];
    let mut y = vec![T::zero(); l * ch];
    let mut states = vec![T::zero(); l * ch * n];
    inp.run(0, l, &mut h, &mut y, Some(&mut states));
    Ok((Tensor::from_parts(vec![l, ch], y), states))
}

/// Chunked two-pass scan. Chunk summaries and chunk replays run on the
/// current rayon pool; the carry between chunks is a short sequential pass.
pub fn scan_forward_chunked<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let (inp, l) = ScanInputs::new(u, delta, a, b, c, d)?;
    let (ch, n) = (inp.channels, inp.state);
    let lanes = ch * n;
    let n_chunks = l.div_ceil(chunk);

    // pass 1: per-chunk composed affine maps (the last chunk's is never needed)
    let summaries: Vec<(Vec<T>, Vec<T>)> =
        (0..n_chunks - 1).into_par_iter().map(|j| inp.reduce(j * chunk, ((j + 1) * chunk).min(l))).collect();

    let mut carries = Vec::with_capacity(n_chunks);
    carries.push(vec![T::zero(); lanes]);
    for (sa, sb) in &summaries {
        let prev = carries.last().expect("non-empty");
        let next = (0..lanes).map(|i| sa[i] * prev[i] + sb[i]).collect();
        carries.push(next);
    }

    // pass 2: replay each chunk from its carried-in state
    let mut y = vec![T::zero(); l * ch];
    y.par_chunks_mut(chunk * ch).zip(carries.into_par_iter()).enumerate().for_each(|(j, (rows, mut h))| {
        let t0 = j * chunk;
        inp.run(t0, (t0 + chunk).min(l), &mut h, rows, None);
    });
    Ok(Tensor::from_parts(vec![l, ch], y))
}

/// Vector-Jacobian product of [`scan_forward`] for all six inputs.
pub(crate) fn scan_backward<T: Scalar>(inputs: [&Tensor<T>; 6], states: &[T], g: &Tensor<T>) -> Result<[Tensor<T>; 6]> {
    let [u, delta, a, b, c, d] = inputs;
    let (inp, l) = ScanInputs::new(u, delta, a, b, c, d)?;
    let (ch, n) = (inp.channels, inp.state);
    let gy = g.data();
    let mut gu = vec![T::zero(); l * ch];
    let mut gdelta = vec![T::zero(); l * ch];
    let mut ga = vec![T::zero(); ch * n];
    let mut gb = vec![T::zero(); l * n];
    let mut gc = vec![T::zero(); l * n];
    let mut gd = vec![T::zero(); ch];
    let mut carry = vec![T::zero(); ch * n];

    for t in (0..l).rev() {
        for c_ in 0..ch {
            let gyv = gy[t * ch + c_];
            let uu = inp.u[t * ch + c_];
            let dl = inp.delta[t * ch + c_];
            gd[c_] += gyv * uu;
            let mut gu_acc = gyv * inp.d[c_];
            let mut gdl_acc = T::zero();
            for k in 0..n {
                let lane = c_ * n + k;
                let hv = states[t * ch * n + lane];
                let hprev = if t > 0 { states[(t - 1) * ch * n + lane] } else { T::zero() };
                gc[t * n + k] += gyv * hv;
                let gh = gyv * inp.c[t * n + k] + carry[lane];
                let av = inp.a[lane];
                let abar = (dl * av).exp();
                let bv = inp.b[t * n + k];
                let g_abar = gh * hprev;
                gdl_acc += g_abar * abar * av + gh * bv * uu;
                ga[lane] += g_abar * abar * dl;
                gb[t * n + k] += gh * dl * uu;
                gu_acc += gh * dl * bv;
                carry[lane] = gh * abar;
            }
            gu[t * ch + c_] += gu_acc;
            gdelta[t * ch + c_] += gdl_acc;
        }
    }
    Ok([
        Tensor::from_parts(vec![l, ch], gu),
        Tensor::from_parts(vec![l, ch], gdelta),
        Tensor::from_parts(vec![ch, n], ga),
        Tensor::from_parts(vec![l, n], gb),
        Tensor::from_parts(vec![l, n], gc),
        Tensor::from_parts(vec![ch], gd),
    ])
}

/// S6 over one sequence `u: [L×C]`, sequential scan.
pub fn selective_scan_seq<T: Scalar>(params: &SsmParams<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let p = project(params, u)?;
    scan_forward(u, &p.delta, &params.a(), &p.b, &p.c, &params.d_skip).map(|(y, _)| y)
}

/// S6 over one sequence using the chunked parallel scan on the current
/// rayon pool. With `chunk >= L` the result is bitwise identical to
/// [`selective_scan_seq`].
pub fn selective_scan_par<T: Scalar>(params: &SsmParams<T>, u: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let p = project(params, u)?;
    scan_forward_chunked(u, &p.delta, &params.a(), &p.b, &p.c, &params.d_skip, chunk)
}

/// Record S6 on a tape; parameters are looked up under `prefix`.
pub fn trace_s6<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, u: Var) -> Result<Var> {
    let p = |f: &str| format!("{prefix}.{f}");
    let (l, ch) = tape.value(u).dims2()?;
    let a_log = tape.param(store, &p("a_log"))?;
    let d = tape.param(store, &p("d_skip"))?;
    let wb = tape.param(store, &p("proj_b"))?;
    let wc = tape.param(store, &p("proj_c"))?;
    let wd = tape.param(store, &p("proj_delta"))?;
    let bias = tape.param(store, &p("delta_bias"))?;

    let s = tape.matmul(u, wd)?;
    let ones = tape.constant(Tensor::ones(vec![1, ch])?)?;
    let s = tape.matmul(s, ones)?;
    let s = tape.add_row_vector(s, bias)?;
    let delta = tape.activation(s, Activation::Softplus)?;
    debug_assert_eq!(tape.shape(delta), [l, ch]);
    let b = tape.matmul(u, wb)?;
    let c = tape.matmul(u, wc)?;
    let a = tape.activation(a_log, Activation::Exp)?;
    let a = tape.scale(a, -T::one())?;
    tape.selective_scan(u, delta, a, b, c, d)
}

/// Number of scan directions.
pub const DIRECTIONS: usize = 4;

/// Spatial (row-major) index visited at each sequence position, for
/// direction `v`: 0 row-major, 1 row-major reversed, 2 column-major,
/// 3 column-major reversed.
pub fn direction_order(h: usize, w: usize, v: usize) -> Vec<usize> {
    let hw = h * w;
    let col_major = |s: usize| (s % h) * w + s / h;
    match v {
        0 => (0..hw).collect(),
        1 => (0..hw).rev().collect(),
        2 => (0..hw).map(col_major).collect(),
        3 => (0..hw).rev().map(col_major).collect(),
        _ => panic!("direction {v} out of range"),
    }
}

/// Inverse of [`direction_order`]: sequence position holding each spatial
/// index.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (s, &p) in order.iter().enumerate() {
        inv[p] = s;
    }
    inv
}

/// `C×H×W` map to four `(H·W)×C` directional sequences, stacked as
/// `[4, H·W, C]`.
pub fn cross_scan_expand<T: Scalar>(a1: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = a1.dims3()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(DIRECTIONS * hw * c);
    for v in 0..DIRECTIONS {
        for p in direction_order(h, w, v) {
            for ch in 0..c {
                out.push(a1.data()[ch * hw + p]);
            }
        }
    }
    Tensor::new(vec![DIRECTIONS, hw, c], out)
}

/// Un-permute each directional `(H·W)×C` output back to spatial layout and
/// sum them, giving `C×H×W`.
pub fn cross_merge<T: Scalar>(ys: &[Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    if ys.len() != DIRECTIONS {
        return Err(Error::shape("cross_merge", DIRECTIONS, ys.len()));
    }
    let hw = h * w;
    let (l, c) = ys[0].dims2()?;
    if l != hw {
        return Err(Error::shape("cross_merge", format!("{hw} positions"), l));
    }
    let mut out = vec![T::zero(); c * hw];
    for (v, y) in ys.iter().enumerate() {
        y.expect_same_shape("cross_merge", &ys[0])?;
        for (s, p) in direction_order(h, w, v).into_iter().enumerate() {
            for ch in 0..c {
                out[ch * hw + p] += y.data()[s * c + ch];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Gather indices turning a `(H·W)×C` position-major matrix into direction
/// `v`'s sequence.
pub(crate) fn expand_index(h: usize, w: usize, c: usize, v: usize) -> Arc<[usize]> {
    direction_order(h, w, v).into_iter().flat_map(|p| (0..c).map(move |ch| p * c + ch)).collect()
}

/// Gather indices undoing [`expand_index`].
pub(crate) fn merge_index(h: usize, w: usize, c: usize, v: usize) -> Arc<[usize]> {
    inverse_order(&direction_order(h, w, v)).into_iter().flat_map(|s| (0..c).map(move |ch| s * c + ch)).collect()
}
