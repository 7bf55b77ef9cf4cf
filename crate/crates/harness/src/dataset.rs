//! On-disk dataset: `manifest.csv` plus one VMRT image per present view.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vmra_core::hazard::Label;
use vmra_core::io::read_tensor;
use vmra_core::pipeline::Exam;
use vmra_core::{Scalar, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";
pub const VIEW_NAMES: [&str; 4] = vmra_core::encoder::VIEW_NAMES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub timestep: usize,
    pub view: String,
    /// Relative to the dataset root; empty for missing exams.
    pub image_path: String,
    pub age_years: f64,
    pub delta_t_years: f64,
    pub present: u8,
    pub event_year: Option<usize>,
    pub followup_years: usize,
    pub dense_area: f64,
}

#[derive(Debug, Clone)]
pub struct ExamRecord {
    pub timestep: usize,
    pub delta_t: f64,
    pub age: f64,
    /// LCC, RCC, LMLO, RMLO; `None` for a missing exam.
    pub images: Option<[Tensor<f32>; 4]>,
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub exams: Vec<ExamRecord>,
    pub label: Label,
    pub dense_area: f64,
}

impl Subject {
    /// Model inputs; missing exams get zero placeholder images.
    pub fn model_exams<T: Scalar>(&self) -> Vec<Exam<T>> {
        let blank = |shape: &[usize]| Tensor::<T>::zeros(shape.to_vec()).expect("image shape");
        let shape = self.exams.iter().find_map(|e| e.images.as_ref()).map(|v| v[0].shape().to_vec()).expect("a present exam");
        self.exams
            .iter()
            .map(|e| Exam {
                images: match &e.images {
                    Some(views) => std::array::from_fn(|v| views[v].cast()),
                    None => std::array::from_fn(|_| blank(&shape)),
                },
                present: e.images.is_some(),
                delta_t: T::of(e.delta_t),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sorted by subject id.
    pub subjects: Vec<Subject>,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(root.join(MANIFEST_FILE))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let rows = read_manifest(root)?;
        let mut by_subject: BTreeMap<String, Vec<ManifestRow>> = BTreeMap::new();
        for row in rows {
            by_subject.entry(row.subject_id.clone()).or_default().push(row);
        }
        if by_subject.is_empty() {
            return Err(Error::dataset("manifest has no rows"));
        }
        let subjects = by_subject.into_par_iter().map(|(id, rows)| build_subject(root, id, rows)).collect::<Result<Vec<_>>>()?;
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

fn build_subject(root: &Path, id: String, rows: Vec<ManifestRow>) -> Result<Subject> {
    let first = &rows[0];
    let label = Label { event_year: first.event_year, followup_years: first.followup_years };
    let dense_area = first.dense_area;
    let mut steps: BTreeMap<usize, Vec<&ManifestRow>> = BTreeMap::new();
    for row in &rows {
        if row.event_year != label.event_year || row.followup_years != label.followup_years || row.dense_area != dense_area {
            return Err(Error::dataset(format!("subject {id}: inconsistent per-subject columns")));
        }
        steps.entry(row.timestep).or_default().push(row);
    }
    let mut exams = Vec::with_capacity(steps.len());
    for (t, rows) in steps {
        let present = rows[0].present != 0;
        if rows.iter().any(|r| (r.present != 0) != present) {
            return Err(Error::dataset(format!("subject {id}, step {t}: views disagree on presence")));
        }
        let images = if present {
            let mut views: [Option<Tensor<f32>>; 4] = Default::default();
            for r in &rows {
                let v = VIEW_NAMES
                    .iter()
                    .position(|&n| n == r.view)
                    .ok_or_else(|| Error::dataset(format!("subject {id}: unknown view {}", r.view)))?;
                if views[v].is_some() {
                    return Err(Error::dataset(format!("subject {id}, step {t}: duplicate view {}", r.view)));
                }
                views[v] = Some(read_tensor::<f32>(&root.join(&r.image_path))?);
            }
            let [a, b, c, d] = views;
            match (a, b, c, d) {
                (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
                _ => return Err(Error::dataset(format!("subject {id}, step {t}: needs all four views"))),
            }
        } else {
            None
        };
        exams.push(ExamRecord { timestep: t, delta_t: rows[0].delta_t_years, age: rows[0].age_years, images });
    }
    if exams.iter().all(|e| e.images.is_none()) {
        return Err(Error::dataset(format!("subject {id} has no present exam")));
    }
    label.validate(usize::MAX).map_err(|e| Error::dataset(format!("subject {id}: {e}")))?;
    Ok(Subject { id, exams, label, dense_area })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject indices of each split: a seeded shuffle cut at the configured
/// fractions.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let n_val = (((n as f64) * cfg.val_fraction).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    [order, val, test]
}

pub fn split_of(n: usize, cfg: &TrainConfig, split: Split) -> Vec<usize> {
    let [train, val, test] = split_indices(n, cfg);
    match split {
        Split::Train => train,
        Split::Val => val,
        Split::Test => test,
    }
}
