//! Per-view convolutional encoder and the multi-view attention fusion that
//! turns one exam (four views) into a single feature vector `T_t`.
//!
//! Encoder: three stages of `conv3x3 + bias → SiLU → 2×2 average pool`.
//!
//! Fusion over the four view tokens, pre-norm:
//!
//! ```text
//!   X   = pool(feat) · W_tok + b_tok + E_view (+ E_absent)
//!   X₁  = X + MHSA(LN₁(X)) · W_o
//!   X₂  = X₁ + FFN(LN₂(X₁))
//!   T_t = mean over tokens of X₂
//! ```

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hazard::pool_map;
use crate::ops::{self, Activation, LAYERNORM_EPS};
use crate::params::{self, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Views per exam, in the order LCC, RCC, LMLO, RMLO.
pub const VIEWS: usize = 4;
pub const VIEW_NAMES: [&str; VIEWS] = ["LCC", "RCC", "LMLO", "RMLO"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Output channels of each stage; the input has one channel.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, channels: vec![8, 16, 16] }
    }
}

impl EncoderConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.channels.len();
        if stages == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("encoder needs at least one stage with positive channels"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << stages) {
            return Err(Error::invalid(format!("image size {} is not divisible by 2^{stages}", self.image_size)));
        }
        Ok(())
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, prefix: prefix.into() })
    }

    fn name(&self, stage: usize, field: &str) -> String {
        format!("{}.conv{stage}.{field}", self.prefix)
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let mut cin = 1;
        for (s, &cout) in self.cfg.channels.iter().enumerate() {
            let mut w: Tensor<T> = params::he(&[cout, cin, 3, 3], cin * 9, rng);
            // left-right symmetric kernels make the encoder commute with
            // mirroring, so a mirrored breast yields mirrored features
            for row in w.data_mut().chunks_exact_mut(3) {
                row[2] = row[0];
            }
            store.insert(self.name(s, "weight"), w);
            store.insert(self.name(s, "bias"), params::constant(&[cout], 0.0));
            cin = cout;
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let n = self.cfg.image_size;
        if shape != [1, n, n] {
            return Err(Error::shape("encode_view", format!("[1, {n}, {n}]"), format!("{shape:?}")));
        }
        Ok(())
    }

    /// `1×S×S` image to `C_e×S/8×S/8` features (for three stages).
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(img.shape())?;
        let mut x = img.clone();
        for s in 0..self.cfg.channels.len() {
            let conv = ops::conv3x3(&x, store.get(&self.name(s, "weight"))?)?;
            let conv = ops::add_col_vector(&conv, store.get(&self.name(s, "bias"))?)?;
            x = ops::avg_pool2(&ops::activation(&conv, Activation::Silu)?)?;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "encode_view" });
        }
        Ok(x)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Var) -> Result<Var> {
        self.check_image(tape.shape(img))?;
        let mut x = img;
        for s in 0..self.cfg.channels.len() {
            let w = tape.param(store, &self.name(s, "weight"))?;
            let b = tape.param(store, &self.name(s, "bias"))?;
            let conv = tape.conv3x3(x, w)?;
            let conv = tape.add_col_vector(conv, b)?;
            let act = tape.silu(conv)?;
            x = tape.avg_pool2(act)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Channels of each view's feature map.
    pub in_channels: usize,
    /// Token width `D_f`.
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward layer.
    pub ffn_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { in_channels: 16, dim: 64, heads: 2, ffn_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput<T> {
    /// Fused feature `T_t`.
    pub feature: Tensor<T>,
    /// Per-head `4×4` attention weights.
    pub attention: Vec<Tensor<T>>,
}

pub struct Fusion {
    pub cfg: FusionConfig,
    pub prefix: String,
    head_cols: Vec<Arc<[usize]>>,
    interleave: Arc<[usize]>,
}

impl Fusion {
    pub fn new(cfg: FusionConfig, prefix: impl Into<String>) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.dim == 0 || cfg.ffn_dim == 0 || cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::invalid(format!("fusion width {} must be a positive multiple of {} heads", cfg.dim, cfg.heads)));
        }
        let (d, dh) = (cfg.dim, cfg.dim / cfg.heads);
        let head_cols = (0..cfg.heads).map(|h| (0..VIEWS).flat_map(|r| (0..dh).map(move |j| r * d + h * dh + j)).collect()).collect();
        // concat of per-head [4×dh] blocks back to [4×D] rows
        let interleave =
            (0..VIEWS).flat_map(|r| (0..cfg.heads).flat_map(move |h| (0..dh).map(move |j| h * VIEWS * dh + r * dh + j))).collect();
        Ok(Self { cfg, prefix: prefix.into(), head_cols, interleave })
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let FusionConfig { in_channels: c, dim: d, ffn_dim: f, .. } = self.cfg;
        store.insert(self.name("token.weight"), params::glorot(&[c, d], c, d, rng));
        store.insert(self.name("token.bias"), params::constant(&[d], 0.0));
        store.insert(self.name("view_embedding"), params::uniform(&[VIEWS, d], 0.1, rng));
        store.insert(self.name("absent_embedding"), params::uniform(&[1, d], 0.1, rng));
        store.insert(self.name("ln1.gamma"), params::constant(&[d], 1.0));
        store.insert(self.name("ln1.beta"), params::constant(&[d], 0.0));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(self.name(w), params::glorot(&[d, d], d, d, rng));
        }
        store.insert(self.name("ln2.gamma"), params::constant(&[d], 1.0));
        store.insert(self.name("ln2.beta"), params::constant(&[d], 0.0));
        store.insert(self.name("ffn.w1"), params::glorot(&[d, f], d, f, rng));
        store.insert(self.name("ffn.b1"), params::constant(&[f], 0.0));
        store.insert(self.name("ffn.w2"), params::glorot(&[f, d], f, d, rng));
        store.insert(self.name("ffn.b2"), params::constant(&[d], 0.0));
    }

    fn absent_mask<T: Scalar>(present: &[bool; VIEWS]) -> Result<Tensor<T>> {
        Tensor::new(vec![VIEWS, 1], present.iter().map(|&p| if p { T::zero() } else { T::one() }).collect())
    }

    /// Stack the spatially pooled view features as `[4×C_e]`.
    pub fn pool_views<T: Scalar>(&self, features: &[&Tensor<T>; VIEWS]) -> Result<Tensor<T>> {
        let c = self.cfg.in_channels;
        let mut rows = Vec::with_capacity(VIEWS * c);
        for f in features {
            if f.rank() != 3 || f.shape()[0] != c {
                return Err(Error::shape("fuse_views", format!("[{c}, H, W]"), format!("{:?}", f.shape())));
            }
            if f.shape() != features[0].shape() {
                return Err(Error::shape("fuse_views", format!("{:?}", features[0].shape()), format!("{:?}", f.shape())));
            }
            rows.extend_from_slice(pool_map(f)?.data());
        }
        Tensor::new(vec![VIEWS, c], rows)
    }

    /// Fuse four view feature maps. Absent views should carry zero features.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &[&Tensor<T>; VIEWS],
        present: &[bool; VIEWS],
    ) -> Result<FusionOutput<T>> {
        self.forward_pooled(store, &self.pool_views(features)?, present)
    }

    /// [`forward`](Self::forward) on already pooled `[4×C_e]` view vectors.
    pub fn forward_pooled<T: Scalar>(&self, store: &ParamStore<T>, pooled: &Tensor<T>, present: &[bool; VIEWS]) -> Result<FusionOutput<T>> {
        let p = |n: &str| store.get(&self.name(n));
        let eps = T::of(LAYERNORM_EPS);
        let (d, heads) = (self.cfg.dim, self.cfg.heads);
        let dh = d / heads;
        let tok = ops::add_row_vector(&ops::matmul(pooled, p("token.weight")?)?, p("token.bias")?)?;
        let absent = ops::matmul(&Self::absent_mask(present)?, p("absent_embedding")?)?;
        let emb = p("view_embedding")?.zip_map(&absent, |a, b| a + b)?;
        let x = tok.zip_map(&emb, |a, b| a + b)?;

        let z = ops::layernorm(&x, p("ln1.gamma")?, p("ln1.beta")?, eps)?;
        let q = ops::matmul(&z, p("attn.wq")?)?;
        let k = ops::matmul(&z, p("attn.wk")?)?;
        let v = ops::matmul(&z, p("attn.wv")?)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut heads_out = Vec::with_capacity(VIEWS * d);
        let mut attention = Vec::with_capacity(heads);
        for cols in &self.head_cols {
            let qh = ops::gather(&q, cols, vec![VIEWS, dh])?;
            let kh = ops::gather(&k, cols, vec![VIEWS, dh])?;
            let vh = ops::gather(&v, cols, vec![VIEWS, dh])?;
            let s = ops::matmul(&qh, &ops::transpose(&kh)?)?.map(|e| e * scale);
            let a = ops::softmax_rows(&s)?;
            heads_out.extend_from_slice(ops::matmul(&a, &vh)?.data());
            attention.push(a);
        }
        let o = ops::gather(&Tensor::new(vec![heads * VIEWS * dh], heads_out)?, &self.interleave, vec![VIEWS, d])?;
        let x1 = x.zip_map(&ops::matmul(&o, p("attn.wo")?)?, |a, b| a + b)?;

        let z2 = ops::layernorm(&x1, p("ln2.gamma")?, p("ln2.beta")?, eps)?;
        let hdn = ops::activation(&ops::add_row_vector(&ops::matmul(&z2, p("ffn.w1")?)?, p("ffn.b1")?)?, Activation::Silu)?;
        let f = ops::add_row_vector(&ops::matmul(&hdn, p("ffn.w2")?)?, p("ffn.b2")?)?;
        let x2 = x1.zip_map(&f, |a, b| a + b)?;
        let feature = ops::mean_rows(&x2)?;
        if !feature.all_finite() {
            return Err(Error::NonFinite { op: "fuse_views" });
        }
        Ok(FusionOutput { feature, attention })
    }

    /// Tape version of [`forward`](Self::forward) on pooled `[4×C_e]` view
    /// vectors; returns `T_t` as `[D]`.
    pub fn trace_pooled<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pooled: Var, present: &[bool; VIEWS]) -> Result<Var> {
        let (d, heads) = (self.cfg.dim, self.cfg.heads);
        let dh = d / heads;
        let p = |tape: &mut Tape<T>, n: &str| tape.param(store, &self.name(n));
        let wt = p(tape, "token.weight")?;
        let bt = p(tape, "token.bias")?;
        let view = p(tape, "view_embedding")?;
        let absent = p(tape, "absent_embedding")?;
        let tok = tape.matmul(pooled, wt)?;
        let tok = tape.add_row_vector(tok, bt)?;
        let mask = tape.constant(Self::absent_mask(present)?)?;
        let absent = tape.matmul(mask, absent)?;
        let emb = tape.add(view, absent)?;
        let x = tape.add(tok, emb)?;

        let (g1, b1) = (p(tape, "ln1.gamma")?, p(tape, "ln1.beta")?);
        let z = tape.layernorm(x, g1, b1)?;
        let wq = p(tape, "attn.wq")?;
        let wk = p(tape, "attn.wk")?;
        let wv = p(tape, "attn.wv")?;
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for cols in &self.head_cols {
            let qh = tape.gather(q, cols.clone(), vec![VIEWS, dh])?;
            let kh = tape.gather(k, cols.clone(), vec![VIEWS, dh])?;
            let vh = tape.gather(v, cols.clone(), vec![VIEWS, dh])?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&outs, vec![heads * VIEWS * dh])?;
        let o = tape.gather(cat, self.interleave.clone(), vec![VIEWS, d])?;
        let wo = p(tape, "attn.wo")?;
        let o = tape.matmul(o, wo)?;
        let x1 = tape.add(x, o)?;

        let (g2, b2) = (p(tape, "ln2.gamma")?, p(tape, "ln2.beta")?);
        let z2 = tape.layernorm(x1, g2, b2)?;
        let (w1, fb1) = (p(tape, "ffn.w1")?, p(tape, "ffn.b1")?);
        let (w2, fb2) = (p(tape, "ffn.w2")?, p(tape, "ffn.b2")?);
        let hdn = tape.matmul(z2, w1)?;
        let hdn = tape.add_row_vector(hdn, fb1)?;
        let hdn = tape.silu(hdn)?;
        let f = tape.matmul(hdn, w2)?;
        let f = tape.add_row_vector(f, fb2)?;
        let x2 = tape.add(x1, f)?;
        tape.mean_rows(x2)
    }

    /// Tape version taking full feature maps `[C_e×H×W]`.
    pub fn trace<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &[Var; VIEWS],
        present: &[bool; VIEWS],
    ) -> Result<Var> {
        let c = self.cfg.in_channels;
        let mut pooled = Vec::with_capacity(VIEWS);
        for &f in features {
            let shape = tape.shape(f).to_vec();
            if shape.len() != 3 || shape[0] != c {
                return Err(Error::shape("fuse_views", format!("[{c}, H, W]"), format!("{shape:?}")));
            }
            let flat = tape.reshape(f, vec![c, shape[1] * shape[2]])?;
            pooled.push(tape.mean_cols(flat)?);
        }
        let stacked = tape.concat(&pooled, vec![VIEWS, c])?;
        self.trace_pooled(tape, store, stacked, present)
    }
}
