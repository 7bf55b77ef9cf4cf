//! The full per-subject model: encoder → multi-view fusion → VMRNN →
//! history pooling, concatenated with the asymmetry factor, → hazard head.
//!
//! `r_AA` is computed from the encoder feature maps outside the tape and
//! enters the head as a constant input, divided by a scale fixed from the
//! training split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asymmetry::{subject_asymmetry, AsymmetryConfig, SubjectAsymmetry};
use crate::autodiff::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig, Fusion, FusionConfig, VIEWS};
use crate::error::{Error, Result};
use crate::hazard::{pool_map, trace_pool_map, trace_risk_loss, HazardHead, Label, RiskOutput, HORIZON};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vmrnn::{StepInput, TraceStep, VmrnnBlock, VmrnnConfig};

pub const ENCODER_PREFIX: &str = "enc";
pub const FUSION_PREFIX: &str = "fusion";
pub const VMRNN_PREFIX: &str = "vmrnn";
pub const HEAD_PREFIX: &str = "ahl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub vmrnn: VmrnnConfig,
    pub asymmetry: AsymmetryConfig,
    pub horizon: usize,
    /// Run the recurrent block; otherwise the last present `T_t` is the
    /// history embedding.
    pub use_vmr: bool,
    /// Feed `r_AA` to the head; otherwise the coordinate is held at 0.
    pub use_asym: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            vmrnn: VmrnnConfig::default(),
            asymmetry: AsymmetryConfig::default(),
            horizon: HORIZON,
            use_vmr: true,
            use_asym: true,
        }
    }
}

/// One exam: four view images (LCC, RCC, LMLO, RMLO) of shape `1×S×S`.
#[derive(Debug, Clone)]
pub struct Exam<T> {
    pub images: [Tensor<T>; VIEWS],
    pub present: bool,
    /// Years since the previous present exam.
    pub delta_t: T,
}

/// Encoder output for one exam.
#[derive(Debug, Clone, PartialEq)]
pub struct ExamFeatures<T> {
    /// `C_e×s×s` per view.
    pub maps: [Tensor<T>; VIEWS],
    /// `[4×C_e]` spatially pooled maps.
    pub pooled: Tensor<T>,
    pub present: bool,
    pub delta_t: T,
}

/// Encoded exams plus the raw (unscaled) asymmetry factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures<T> {
    pub exams: Vec<ExamFeatures<T>>,
    pub asymmetry: SubjectAsymmetry<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub risk: RiskOutput<T>,
    /// The `r_AA` value the head saw.
    pub r_aa_input: T,
    /// The detector's `r_AA` before scaling and ablation.
    pub r_aa_raw: T,
    pub history: Tensor<T>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub vmrnn: VmrnnBlock,
    pub head: HazardHead,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.fusion.in_channels != cfg.encoder.feature_channels() {
            return Err(Error::invalid(format!(
                "fusion expects {} channels, encoder produces {}",
                cfg.fusion.in_channels,
                cfg.encoder.feature_channels()
            )));
        }
        if cfg.vmrnn.input_dim != cfg.fusion.dim {
            return Err(Error::invalid(format!("vmrnn input {} differs from fused width {}", cfg.vmrnn.input_dim, cfg.fusion.dim)));
        }
        let history = if cfg.use_vmr { cfg.vmrnn.history_dim() } else { cfg.fusion.dim };
        Ok(Self {
            encoder: Encoder::new(cfg.encoder.clone(), ENCODER_PREFIX)?,
            fusion: Fusion::new(cfg.fusion, FUSION_PREFIX)?,
            vmrnn: VmrnnBlock::new(cfg.vmrnn, VMRNN_PREFIX)?,
            head: HazardHead::new(history + 1, cfg.horizon, HEAD_PREFIX)?,
            cfg,
        })
    }

    /// Fresh parameters. The recurrent block's parameters are created even
    /// when it is disabled so that every configuration draws the same
    /// random stream.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, rng);
        self.fusion.init_params(&mut store, rng);
        self.vmrnn.init_params(&mut store, rng);
        self.head.init_params(&mut store, rng);
        if !self.cfg.use_vmr {
            let names: Vec<String> = store.names().filter(|n| n.starts_with(VMRNN_PREFIX)).map(str::to_string).collect();
            let mut kept = ParamStore::new();
            for (n, t) in store.iter() {
                if !names.iter().any(|x| x == n) {
                    kept.insert(n, t.clone());
                }
            }
            store = kept;
        }
        store
    }

    /// Encode every present exam and compute the asymmetry tracks.
    pub fn features<T: Scalar>(&self, store: &ParamStore<T>, exams: &[Exam<T>]) -> Result<SubjectFeatures<T>> {
        if !exams.iter().any(|e| e.present) {
            return Err(Error::invalid("subject has no present exam"));
        }
        let size = self.cfg.encoder.feature_size();
        let c = self.cfg.encoder.feature_channels();
        let zero_map = Tensor::zeros(vec![c, size, size])?;
        let mut out = Vec::with_capacity(exams.len());
        for exam in exams {
            let maps: [Tensor<T>; VIEWS] = if exam.present {
                let mut m = Vec::with_capacity(VIEWS);
                for img in &exam.images {
                    m.push(self.encoder.encode(store, img)?);
                }
                m.try_into().expect("four views")
            } else {
                std::array::from_fn(|_| zero_map.clone())
            };
            let pooled = self.fusion.pool_views(&[&maps[0], &maps[1], &maps[2], &maps[3]])?;
            out.push(ExamFeatures { maps, pooled, present: exam.present, delta_t: exam.delta_t });
        }
        let present: Vec<(usize, [&Tensor<T>; VIEWS])> =
            out.iter().enumerate().filter(|(_, e)| e.present).map(|(t, e)| (t, [&e.maps[0], &e.maps[1], &e.maps[2], &e.maps[3]])).collect();
        let asymmetry = subject_asymmetry(&present, &self.cfg.asymmetry)?;
        Ok(SubjectFeatures { exams: out, asymmetry })
    }

    fn r_aa_input<T: Scalar>(&self, feats: &SubjectFeatures<T>, r_aa_scale: T) -> T {
        if self.cfg.use_asym {
            feats.asymmetry.r_aa / r_aa_scale
        } else {
            T::zero()
        }
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, feats: &SubjectFeatures<T>, r_aa_scale: T) -> Result<Prediction<T>> {
        let mut fused = Vec::with_capacity(feats.exams.len());
        for e in &feats.exams {
            fused.push(if e.present { Some(self.fusion.forward_pooled(store, &e.pooled, &[true; VIEWS])?.feature) } else { None });
        }
        let history = if self.cfg.use_vmr {
            let zero = Tensor::zeros(vec![self.cfg.fusion.dim])?;
            let steps: Vec<StepInput<T>> = feats
                .exams
                .iter()
                .zip(&fused)
                .map(|(e, f)| StepInput { feature: f.clone().unwrap_or_else(|| zero.clone()), delta_t: e.delta_t, present: e.present })
                .collect();
            pool_map(&self.vmrnn.forward(store, &steps)?.0)?
        } else {
            fused.iter().rev().flatten().next().cloned().ok_or_else(|| Error::invalid("no present exam"))?
        };
        let r_aa_input = self.r_aa_input(feats, r_aa_scale);
        let mut r_tilde = history.data().to_vec();
        r_tilde.push(r_aa_input);
        let risk = self.head.forward(store, &Tensor::from_vec(r_tilde)?)?;
        Ok(Prediction { risk, r_aa_input, r_aa_raw: feats.asymmetry.r_aa, history })
    }

    /// Record the cumulative-risk row `P: [1×K]` on a tape. With `images`
    /// given the encoder is traced too; otherwise the cached pooled
    /// features enter as constants.
    pub fn trace_risk<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: &SubjectFeatures<T>,
        images: Option<&[Exam<T>]>,
        r_aa_scale: T,
    ) -> Result<Var> {
        let c = self.cfg.encoder.feature_channels();
        let mut steps = Vec::with_capacity(feats.exams.len());
        let mut last = None;
        for (t, e) in feats.exams.iter().enumerate() {
            if !e.present {
                steps.push(None);
                continue;
            }
            let pooled = match images {
                Some(exams) => {
                    let mut pooled = Vec::with_capacity(VIEWS);
                    for img in &exams[t].images {
                        let x = tape.constant(img.clone())?;
                        let m = self.encoder.trace(tape, store, x)?;
                        let s = self.cfg.encoder.feature_size();
                        let flat = tape.reshape(m, vec![c, s * s])?;
                        pooled.push(tape.mean_cols(flat)?);
                    }
                    tape.concat(&pooled, vec![VIEWS, c])?
                }
                None => tape.constant(e.pooled.clone())?,
            };
            let f = self.fusion.trace_pooled(tape, store, pooled, &[true; VIEWS])?;
            last = Some(f);
            steps.push(Some(f));
        }
        let last = last.ok_or_else(|| Error::invalid("subject has no present exam"))?;
        let history = if self.cfg.use_vmr {
            let zero = tape.constant(Tensor::zeros(vec![self.cfg.fusion.dim])?)?;
            let trace_steps: Vec<TraceStep<T>> = feats
                .exams
                .iter()
                .zip(&steps)
                .map(|(e, f)| TraceStep { feature: f.unwrap_or(zero), delta_t: e.delta_t, present: e.present })
                .collect();
            let h = self.vmrnn.trace(tape, store, &trace_steps)?;
            trace_pool_map(tape, h)?
        } else {
            last
        };
        let r = tape.constant(Tensor::from_vec(vec![self.r_aa_input(feats, r_aa_scale)])?)?;
        let dim = tape.value(history).len() + 1;
        let r_tilde = tape.concat(&[history, r], vec![dim])?;
        self.head.trace(tape, store, r_tilde)
    }

    /// Class-weighted censored loss of one subject on a tape.
    #[allow(clippy::too_many_arguments)]
    pub fn trace_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: &SubjectFeatures<T>,
        images: Option<&[Exam<T>]>,
        label: &Label,
        class_weights: &[f64],
        r_aa_scale: T,
    ) -> Result<Var> {
        let p = self.trace_risk(tape, store, feats, images, r_aa_scale)?;
        trace_risk_loss(tape, p, label, class_weights)
    }
}
