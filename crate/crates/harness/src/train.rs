//! Training: per-subject tapes evaluated in parallel, gradients reduced in
//! batch order, AdamW on the summed batch gradient.

use std::path::Path;

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vmra_core::hazard::{class_weights, trace_risk_loss, Label};
use vmra_core::io::save_checkpoint;
use vmra_core::metrics::{density_groups, rocauc_year, EvalRecord};
use vmra_core::pipeline::{Model, Prediction, SubjectFeatures, ENCODER_PREFIX};
use vmra_core::{ParamStore64, Tape64, Tensor64};

use crate::config::Config;
use crate::dataset::{split_indices, Dataset, Subject};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, cosine_lr, AdamW};

pub const TRAIN_LOG: &str = "train_log.csv";

/// Fresh model and parameters for `cfg`, seeded by `cfg.train.seed`.
pub fn init_model(cfg: &Config) -> Result<(Model, ParamStore64)> {
    let model = Model::new(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let store = model.init_params(&mut rng);
    Ok((model, store))
}

pub fn subject_features(model: &Model, store: &ParamStore64, subjects: &[&Subject]) -> Result<Vec<SubjectFeatures<f64>>> {
    subjects.par_iter().map(|s| Ok(model.features(store, &s.model_exams::<f64>())?)).collect()
}

/// Mean raw `r_AA` over `feats`, used to normalize the head input. Falls
/// back to 1 when every subject is perfectly symmetric.
pub fn r_aa_scale(feats: &[SubjectFeatures<f64>]) -> f64 {
    let mean = feats.iter().map(|f| f.asymmetry.r_aa).sum::<f64>() / feats.len().max(1) as f64;
    if mean > 0.0 && mean.is_finite() {
        mean
    } else {
        1.0
    }
}

pub fn predict_all(model: &Model, store: &ParamStore64, feats: &[SubjectFeatures<f64>], scale: f64) -> Result<Vec<Prediction<f64>>> {
    feats.par_iter().map(|f| Ok(model.predict(store, f, scale)?)).collect()
}

/// Evaluation records with density tertiles computed within `subjects`.
pub fn eval_records(subjects: &[&Subject], preds: &[Prediction<f64>]) -> Vec<EvalRecord> {
    let groups = density_groups(&subjects.iter().map(|s| s.dense_area).collect::<Vec<_>>());
    subjects
        .iter()
        .zip(preds)
        .zip(groups)
        .map(|((s, p), g)| EvalRecord { subject_id: s.id.clone(), scores: p.risk.cumulative.clone(), label: s.label, density_group: g })
        .collect()
}

/// Pairs `P_{k+1} < P_k` across all predictions.
pub fn monotone_violations(preds: &[Prediction<f64>]) -> usize {
    preds.iter().map(|p| p.risk.cumulative.windows(2).filter(|w| w[1] < w[0]).count()).sum()
}

/// Mean of the defined per-year AUCs.
pub fn mean_auc(records: &[EvalRecord], horizon: usize) -> Option<f64> {
    let aucs: Vec<f64> = (1..=horizon).filter_map(|k| rocauc_year(records, k)).collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_auc_mean: Option<f64>,
    pub val_auc_1y: Option<f64>,
    pub monotone_violations: usize,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Config,
    pub r_aa_scale: f64,
    pub epoch: usize,
    pub val_auc_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters of the best validation epoch.
    pub store: ParamStore64,
    /// Parameters after the last epoch.
    pub last: ParamStore64,
    pub meta: CheckpointMeta,
    pub log: Vec<EpochLog>,
}

struct Prepared<'a> {
    model: Model,
    train: Vec<&'a Subject>,
    val: Vec<&'a Subject>,
    weights: Vec<f64>,
}

/// Loss and parameter gradients of one subject.
pub fn subject_step(
    model: &Model,
    store: &ParamStore64,
    feats: &SubjectFeatures<f64>,
    subject: &Subject,
    frozen: bool,
    weights: &[f64],
    scale: f64,
) -> Result<(f64, IndexMap<String, Tensor64>)> {
    let mut tape = Tape64::new();
    let exams = if frozen {
        tape.freeze_prefix(ENCODER_PREFIX);
        None
    } else {
        Some(subject.model_exams::<f64>())
    };
    let p = model.trace_risk(&mut tape, store, feats, exams.as_deref(), scale)?;
    let loss = trace_risk_loss(&mut tape, p, &subject.label, weights)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, tape.param_grads(&grads)))
}

fn prepare<'a>(cfg: &Config, data: &'a Dataset) -> Result<Prepared<'a>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::dataset("no subjects"));
    }
    let [train, val, _] = split_indices(data.len(), &cfg.train);
    if train.is_empty() {
        return Err(Error::dataset("empty training split"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| &data.subjects[i]).collect::<Vec<_>>();
    let (train, val) = (pick(&train), pick(&val));
    for s in train.iter().chain(&val) {
        s.label.validate(cfg.model.horizon).map_err(|e| Error::dataset(format!("subject {}: {e}", s.id)))?;
    }
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    Ok(Prepared { model: Model::new(cfg.model.clone())?, weights: class_weights(&labels, cfg.model.horizon), train, val })
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

/// Train on the split of `data` selected by `cfg.train`. With `out`, the
/// best checkpoint and the per-epoch log are written there.
pub fn train(cfg: &Config, data: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
    let tc = &cfg.train;
    let prep = prepare(cfg, data)?;
    let model = &prep.model;
    let (_, mut store) = init_model(cfg)?;
    let mut opt = AdamW::new(tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x05ee_d0fb_a7c4);

    let steps_per_epoch = prep.train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;

    // with a frozen encoder the features never change
    let mut train_feats = subject_features(model, &store, &prep.train)?;
    let mut val_feats = subject_features(model, &store, &prep.val)?;
    let scale = r_aa_scale(&train_feats);

    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(Option<f64>, usize, ParamStore64)> = None;
    let mut order: Vec<usize> = (0..prep.train.len()).collect();
    for epoch in 0..tc.epochs {
        if !tc.freeze_encoder && epoch > 0 {
            train_feats = subject_features(model, &store, &prep.train)?;
            val_feats = subject_features(model, &store, &prep.val)?;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr, mut norm) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let results = batch
                .par_iter()
                .map(|&i| subject_step(model, &store, &train_feats[i], prep.train[i], tc.freeze_encoder, &prep.weights, scale))
                .collect::<Vec<_>>();
            let inv = 1.0 / batch.len() as f64;
            let mut grads: IndexMap<String, Tensor64> = IndexMap::new();
            for r in results {
                let (loss, g) = match r {
                    Ok(v) => v,
                    Err(Error::Core(vmra_core::Error::NonFinite { .. })) => return Err(diverged(epoch, step, f64::NAN)),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(diverged(epoch, step, loss));
                }
                loss_sum += loss;
                for (name, g) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            norm = clip_global_norm(&mut grads, tc.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(epoch, step, norm));
            }
            lr = cosine_lr(tc.lr, step, total_steps);
            opt.step(&mut store, &grads, lr)?;
        }

        let preds = predict_all(model, &store, &val_feats, scale)?;
        let records = eval_records(&prep.val, &preds);
        let val_auc_mean = mean_auc(&records, cfg.model.horizon);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_auc_mean.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY),
        };
        if improved {
            best = Some((val_auc_mean, epoch, store.clone()));
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / prep.train.len() as f64,
            grad_norm: norm,
            val_auc_mean,
            val_auc_1y: rocauc_year(&records, 1),
            monotone_violations: monotone_violations(&preds),
            best: improved,
        };
        info!("epoch {epoch}: loss {:.5} val auc {:?} (1y {:?}) lr {lr:.3e}", entry.train_loss, entry.val_auc_mean, entry.val_auc_1y);
        log.push(entry);
    }

    let (val_auc_mean, epoch, best_store) = best.expect("at least one epoch");
    let meta = CheckpointMeta { config: cfg.clone(), r_aa_scale: scale, epoch, val_auc_mean };
    if let Some(dir) = out {
        save_checkpoint(dir, &best_store, &serde_json::to_value(&meta)?)?;
        write_log(&dir.join(TRAIN_LOG), &log)?;
    }
    Ok(TrainOutput { store: best_store, last: store, meta, log })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

/// Mean loss over `subjects` at the given parameters, without updating.
pub fn mean_loss(model: &Model, store: &ParamStore64, subjects: &[&Subject], weights: &[f64], scale: f64, frozen: bool) -> Result<f64> {
    let feats = subject_features(model, store, subjects)?;
    let losses = subjects
        .par_iter()
        .zip(&feats)
        .map(|(s, f)| subject_step(model, store, f, s, frozen, weights, scale).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
