//! Checkpoint evaluation: prediction dump and stratified metrics report.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vmra_core::io::load_checkpoint;
use vmra_core::metrics::{stratified_report, Bootstrap, EvalRecord, ReportRow};
use vmra_core::pipeline::{Model, Prediction};
use vmra_core::ParamStore64;

use crate::dataset::{split_of, Dataset, Split, Subject};
use crate::error::{Error, Result};
use crate::train::{eval_records, predict_all, subject_features, CheckpointMeta};

pub struct Checkpoint {
    pub model: Model,
    pub store: ParamStore64,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint::<f64>(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("meta.json: {e}")))?;
        let model = Model::new(meta.config.model.clone())?;
        // the parameter set must be exactly what this configuration builds
        let expected = model.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
        let names = |s: &ParamStore64| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
        if names(&expected) != names(&store) {
            return Err(Error::Checkpoint("parameters do not match the stored model configuration".into()));
        }
        Ok(Self { model, store, meta })
    }
}

/// Per-subject outputs of one split.
pub struct Evaluation {
    pub predictions: Vec<Prediction<f64>>,
    pub records: Vec<EvalRecord>,
    pub subjects: Vec<String>,
}

pub fn evaluate_subjects(ckpt: &Checkpoint, subjects: &[&Subject]) -> Result<Evaluation> {
    let horizon = ckpt.meta.config.model.horizon;
    for s in subjects {
        s.label.validate(horizon).map_err(|e| Error::dataset(format!("subject {}: {e}", s.id)))?;
        let size = ckpt.meta.config.model.encoder.image_size;
        for views in s.exams.iter().filter_map(|e| e.images.as_ref()) {
            if views[0].shape() != [1, size, size] {
                return Err(Error::dataset(format!("subject {}: images are not {size}x{size}", s.id)));
            }
        }
    }
    let feats = subject_features(&ckpt.model, &ckpt.store, subjects)?;
    let predictions = predict_all(&ckpt.model, &ckpt.store, &feats, ckpt.meta.r_aa_scale)?;
    Ok(Evaluation { records: eval_records(subjects, &predictions), subjects: subjects.iter().map(|s| s.id.clone()).collect(), predictions })
}

pub fn evaluate_split(ckpt: &Checkpoint, data: &Dataset, split: Split) -> Result<Evaluation> {
    let idx = split_of(data.len(), &ckpt.meta.config.train, split);
    if idx.is_empty() {
        return Err(Error::dataset(format!("split {split:?} is empty")));
    }
    let subjects: Vec<&Subject> = idx.iter().map(|&i| &data.subjects[i]).collect();
    evaluate_subjects(ckpt, &subjects)
}

pub fn report(ckpt: &Checkpoint, eval: &Evaluation) -> Result<Vec<ReportRow>> {
    let ec = &ckpt.meta.config.eval;
    let boot = Bootstrap { samples: ec.bootstrap_samples, seed: ec.bootstrap_seed };
    Ok(stratified_report(&eval.records, ckpt.meta.config.model.horizon, &ec.model_tag, &boot)?)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `subject_id, P_1..P_K, B, H_0..H_{K-1}, r_AA, label_event_year, followup_years`.
pub fn write_predictions(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = eval.predictions.first().map_or(0, |p| p.risk.cumulative.len());
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=k).map(|i| format!("P_{i}")));
    header.push("B".into());
    header.extend((0..k).map(|i| format!("H_{i}")));
    header.extend(["r_AA", "label_event_year", "followup_years"].map(String::from));
    w.write_record(&header)?;
    for ((id, p), r) in eval.subjects.iter().zip(&eval.predictions).zip(&eval.records) {
        let mut row = vec![id.clone()];
        row.extend(p.risk.cumulative.iter().map(f64::to_string));
        row.push(p.risk.baseline.to_string());
        row.extend(p.risk.hazards.iter().map(f64::to_string));
        row.push(p.r_aa_raw.to_string());
        row.push(r.label.event_year.map_or(String::new(), |e| e.to_string()));
        row.push(r.label.followup_years.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Default location of the prediction dump next to a report file.
pub fn predictions_path(report: &Path) -> std::path::PathBuf {
    let stem = report.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.predictions.csv"))
}

#[derive(Debug, Serialize)]
pub struct AsymRow<'a> {
    pub subject_id: &'a str,
    pub t: usize,
    pub view_pair: &'static str,
    #[serde(rename = "D_max")]
    pub d_max: f64,
    pub p_h: usize,
    pub p_w: usize,
    pub persistent: bool,
    #[serde(rename = "r_AA")]
    pub r_aa: f64,
}

/// Per-record asymmetry dump for every subject of `data`.
pub fn asym_inspect(ckpt: &Checkpoint, data: &Dataset, out: &Path) -> Result<usize> {
    let subjects: Vec<&Subject> = data.subjects.iter().collect();
    let feats = subject_features(&ckpt.model, &ckpt.store, &subjects)?;
    let mut w = csv::Writer::from_path(out)?;
    let mut n = 0;
    for (s, f) in subjects.iter().zip(&feats) {
        let a = &f.asymmetry;
        for track in [&a.cc, &a.mlo] {
            for rec in &track.records {
                w.serialize(AsymRow {
                    subject_id: &s.id,
                    t: s.exams[rec.t].timestep,
                    view_pair: rec.view_pair.as_str(),
                    d_max: rec.d_max,
                    p_h: rec.p.0,
                    p_w: rec.p.1,
                    persistent: track.persistent,
                    r_aa: a.r_aa,
                })?;
                n += 1;
            }
        }
    }
    w.flush()?;
    Ok(n)
}
