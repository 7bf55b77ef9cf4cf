//! Synthetic longitudinal screening data.
//!
//! Each subject has a dense-area covariate `d ∈ [0, 1]` and up to
//! `timesteps` yearly exams of four views. A view is a breast-shaped region
//! filled with smoothed texture. The texture is shared by the two sides
//! (the right view is the mirror image of a left-oriented rendering), so
//! only the small side-specific noise and any lesion break the symmetry.
//! Texture amplitude grows with `d`, which hides lesions from global
//! statistics in dense subjects.
//!
//! Positive subjects carry a bright Gaussian lesion on one side, at the same
//! place in that side's CC and MLO views. It appears `lead_years` before the
//! event and grows every year, so earlier events show larger lesions at the
//! last exam. Event years count from the last exam.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use vmra_core::hazard::Label;
use vmra_core::io::write_tensor;
use vmra_core::Tensor;

use crate::config::SyntheticConfig;
use crate::dataset::{ManifestRow, IMAGE_DIR, MANIFEST_FILE, VIEW_NAMES};
use crate::error::{Error, Result};

const TEXTURE_SIGMA: f64 = 2.0;
const NOISE_SIGMA: f64 = 1.0;

/// Lesion geometry in left-oriented coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    /// `true` for the left breast.
    pub left: bool,
    /// `(row, col)` centres in the CC and MLO views.
    pub cc: (f64, f64),
    pub mlo: (f64, f64),
    /// Fractional exam index at which the lesion appears.
    pub onset: f64,
}

/// Everything needed to render one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPlan {
    pub id: String,
    pub density: f64,
    pub age: f64,
    pub label: Label,
    pub lesion: Option<Lesion>,
    pub present: Vec<bool>,
    seed: u64,
}

impl SubjectPlan {
    /// Lesion radius at exam `t`, if visible.
    pub fn lesion_radius(&self, cfg: &SyntheticConfig, t: usize) -> Option<f64> {
        let l = self.lesion?;
        let dt = t as f64 - l.onset;
        (dt >= 0.0).then_some(cfg.lesion_radius + cfg.growth_rate * dt)
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draw the latent plan of subject `index`.
pub fn plan_subject(cfg: &SyntheticConfig, index: usize) -> Result<SubjectPlan> {
    let mut rng = subject_rng(cfg.seed, index);
    let beta = Beta::new(cfg.density_alpha, cfg.density_beta).map_err(|e| Error::config(e.to_string()))?;
    let density: f64 = beta.sample(&mut rng);
    let age = rng.gen_range(40.0..70.0);
    let s = cfg.image_size as f64;
    let k = cfg.horizon;
    let last = (cfg.timesteps - 1) as f64;

    let positive = rng.gen_bool(cfg.positive_fraction);
    let (label, lesion) = if positive {
        let event = rng.gen_range(1..=k);
        let left = rng.gen_bool(0.5);
        let row = rng.gen_range(0.3..0.7) * s;
        let col = rng.gen_range(0.15..0.55) * s;
        let mlo_row = (row + rng.gen_range(-0.15..0.15) * s).clamp(0.2 * s, 0.8 * s);
        let onset = last + event as f64 - cfg.lead_years + rng.gen_range(-0.3..0.3);
        (Label { event_year: Some(event), followup_years: k }, Some(Lesion { left, cc: (row, col), mlo: (mlo_row, col), onset }))
    } else {
        let followup = if k > 1 && rng.gen_bool(cfg.censor_prob) { rng.gen_range(1..k) } else { k };
        (Label { event_year: None, followup_years: followup }, None)
    };
    let present = (0..cfg.timesteps).map(|t| t + 1 == cfg.timesteps || !rng.gen_bool(cfg.missing_prob)).collect();
    Ok(SubjectPlan { id: format!("s{index:04}"), density, age, label, lesion, present, seed: rng.gen() })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(x: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let at = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = k.iter().enumerate().map(|(o, w)| w * x[i * n + at(j as isize + o as isize - r)]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k.iter().enumerate().map(|(o, w)| w * tmp[at(i as isize + o as isize - r) * n + j]).sum();
        }
    }
    out
}

/// Smoothed white noise rescaled to unit standard deviation.
fn field(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let f = blur(&white, n, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.into_iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

/// Half-ellipse breast mask anchored at the left edge.
fn breast_mask(n: usize) -> Vec<f64> {
    let s = n as f64;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let y = (i as f64 + 0.5 - s / 2.0) / (0.45 * s);
            let x = (j as f64 + 0.5) / (0.8 * s);
            let r = (x * x + y * y).sqrt();
            // soft edge over a few pixels
            m[i * n + j] = ((1.0 - r) * s / 3.0).clamp(0.0, 1.0);
        }
    }
    m
}

fn lerp(lo: f64, hi: f64, d: f64) -> f64 {
    lo + (hi - lo) * d
}

/// The four view images of every exam (`None` for missing exams), each
/// `1×S×S` in view order LCC, RCC, LMLO, RMLO.
pub fn render_subject(cfg: &SyntheticConfig, plan: &SubjectPlan) -> Vec<Option<[Tensor<f32>; 4]>> {
    let n = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mask = breast_mask(n);
    let d = plan.density;
    let base = 0.25 + 0.3 * d;
    let amp = lerp(cfg.texture_min, cfg.texture_max, d);
    let side_amp = lerp(cfg.side_noise_min, cfg.side_noise_max, d);
    // anatomy is stable over time: one texture per view type
    let textures = [field(&mut rng, n, TEXTURE_SIGMA), field(&mut rng, n, TEXTURE_SIGMA)];

    (0..cfg.timesteps)
        .map(|t| {
            let noise: Vec<Vec<f64>> = (0..4).map(|_| field(&mut rng, n, NOISE_SIGMA)).collect();
            if !plan.present[t] {
                return None;
            }
            let radius = plan.lesion_radius(cfg, t);
            let views = std::array::from_fn(|v| {
                let left = v % 2 == 0;
                let mlo = v >= 2;
                let texture = &textures[usize::from(mlo)];
                let lesion = plan.lesion.filter(|l| l.left == left).zip(radius).map(|(l, r)| (if mlo { l.mlo } else { l.cc }, r));
                let mut img = vec![0f32; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let idx = i * n + j;
                        let mut v_ = base + amp * texture[idx] + side_amp * noise[v][idx];
                        if let Some(((ci, cj), r)) = lesion {
                            let dd = (i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2);
                            v_ += cfg.lesion_contrast * (-dd / (2.0 * r * r)).exp();
                        }
                        let px = (mask[idx] * v_).clamp(0.0, 1.0);
                        // right views are stored in their own orientation
                        let col = if left { j } else { n - 1 - j };
                        img[i * n + col] = px as f32;
                    }
                }
                Tensor::new(vec![1, n, n], img).expect("image shape")
            });
            Some(views)
        })
        .collect()
}

pub fn image_name(subject: &str, t: usize, view: usize) -> String {
    format!("{subject}_t{t}_{}.vmrt", VIEW_NAMES[view])
}

/// Write `manifest.csv` and the image files under `out`.
pub fn gen_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Vec<SubjectPlan>> {
    cfg.validate()?;
    fs::create_dir_all(out.join(IMAGE_DIR))?;
    let plans = (0..cfg.n_subjects).map(|i| plan_subject(cfg, i)).collect::<Result<Vec<_>>>()?;
    plans.par_iter().try_for_each(|plan| -> Result<()> {
        for (t, exam) in render_subject(cfg, plan).into_iter().enumerate() {
            if let Some(views) = exam {
                for (v, img) in views.iter().enumerate() {
                    write_tensor(out.join(IMAGE_DIR).join(image_name(&plan.id, t, v)), img)?;
                }
            }
        }
        Ok(())
    })?;

    let mut w = csv::Writer::from_path(out.join(MANIFEST_FILE))?;
    for plan in &plans {
        let mut last_present: Option<usize> = None;
        for t in 0..cfg.timesteps {
            let delta_t = last_present.map_or(0, |p| t - p);
            for (v, view) in VIEW_NAMES.iter().enumerate() {
                w.serialize(ManifestRow {
                    subject_id: plan.id.clone(),
                    timestep: t,
                    view: view.to_string(),
                    image_path: if plan.present[t] { format!("{IMAGE_DIR}/{}", image_name(&plan.id, t, v)) } else { String::new() },
                    age_years: ((plan.age + t as f64) * 100.0).round() / 100.0,
                    delta_t_years: delta_t as f64,
                    present: u8::from(plan.present[t]),
                    event_year: plan.label.event_year,
                    followup_years: plan.label.followup_years,
                    dense_area: (plan.density * 1e4).round() / 1e4,
                })?;
            }
            if plan.present[t] {
                last_present = Some(t);
            }
        }
    }
    w.flush()?;
    fs::write(out.join("synthetic.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(plans)
}
