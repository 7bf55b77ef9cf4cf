//! Censored-data ranking metrics and density-stratified reports.
//!
//! Scores are the cumulative risks `P_1..P_K`. A score `P_k` of a subject
//! is only ever read when year `k` is inside that subject's follow-up, so
//! predictions at censored years cannot influence any metric.
//!
//! * Concordance: pair `(i, j)` is comparable when `i` has an observed event
//!   at year `e_i` and `j` is still event-free and under observation past
//!   it (`e_i < min(e_j, f_j)`). Both are ranked on `P_{e_i}`; ties score
//!   one half. The horizon-`k` variant keeps pairs with `e_i <= k`.
//! * Year-`k` ROC-AUC: positives have an event by `k` and follow-up
//!   reaching `k`; negatives are event-free through `k` with follow-up
//!   reaching `k`. Ranked on `P_k` with the Mann-Whitney statistic.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityGroup {
    Low,
    Med,
    High,
}

impl DensityGroup {
    pub const ALL: [DensityGroup; 3] = [DensityGroup::Low, DensityGroup::Med, DensityGroup::High];

    pub fn as_str(self) -> &'static str {
        match self {
            DensityGroup::Low => "low",
            DensityGroup::Med => "med",
            DensityGroup::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub subject_id: String,
    /// `P_1..P_K`.
    pub scores: Vec<f64>,
    pub label: Label,
    pub density_group: DensityGroup,
}

impl EvalRecord {
    fn score(&self, year: usize) -> f64 {
        self.scores[year - 1]
    }
}

fn pair_credit(hi: f64, lo: f64) -> f64 {
    match hi.partial_cmp(&lo) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Equal) => 0.5,
        _ => 0.0,
    }
}

/// Concordance over the full horizon of the scores; `None` when no pair is
/// comparable.
pub fn c_index(records: &[EvalRecord]) -> Option<f64> {
    let horizon = records.iter().map(|r| r.scores.len()).max()?;
    c_index_horizon(records, horizon)
}

/// Concordance over pairs whose earlier event falls in years `1..=k`.
pub fn c_index_horizon(records: &[EvalRecord], k: usize) -> Option<f64> {
    let (mut credit, mut pairs) = (0.0, 0u64);
    for a in records {
        let Some(e) = a.label.event_year.filter(|&e| e <= k) else {
            continue;
        };
        for b in records {
            let later = b.label.event_year.map_or(usize::MAX, |eb| eb).min(b.label.followup_years);
            if e < later {
                credit += pair_credit(a.score(e), b.score(e));
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

/// `(positive, negative)` membership at year `k`; `None` when excluded.
pub fn year_status(label: &Label, k: usize) -> Option<bool> {
    if label.followup_years < k {
        return None;
    }
    Some(matches!(label.event_year, Some(e) if e <= k))
}

/// ROC-AUC at year `k`; `None` without both classes.
pub fn rocauc_year(records: &[EvalRecord], k: usize) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = records.iter().filter_map(|r| year_status(&r.label, k).map(|pos| (r.score(k), pos))).collect();
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the Mann-Whitney U, kept integral: each tie group contributes
    // 2·(negatives below)·(positives in group) + (negatives in group)·(positives in group)
    let (mut twice_u, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let pos = scored[i..j].iter().filter(|s| s.1).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += 2 * neg_below * pos + neg * pos;
        neg_below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Rank-based tertiles: the lowest third of values is `Low`, the highest
/// third `High`. Ties are broken by input order.
pub fn density_groups(values: &[f64]) -> Vec<DensityGroup> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut groups = vec![DensityGroup::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        groups[i] = DensityGroup::ALL[(3 * rank) / n];
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "rocauc")]
    RocAuc,
    #[serde(rename = "c_index")]
    CIndex,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RocAuc => "rocauc",
            Metric::CIndex => "c_index",
        }
    }

    pub fn eval(self, records: &[EvalRecord], year: usize) -> Option<f64> {
        match self {
            Metric::RocAuc => rocauc_year(records, year),
            Metric::CIndex => c_index_horizon(records, year),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub samples: usize,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self { samples: 1000, seed: 0 }
    }
}

/// Percentile interval `(2.5%, 97.5%)` of `metric` over subject-level
/// resamples; replicates where the metric is undefined are skipped.
pub fn bootstrap_ci(records: &[EvalRecord], boot: &Bootstrap, stat: impl Fn(&[EvalRecord]) -> Option<f64> + Sync) -> Option<(f64, f64)> {
    if records.is_empty() || boot.samples == 0 {
        return None;
    }
    let n = records.len();
    let mut values: Vec<f64> = (0..boot.samples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(boot.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let sample: Vec<EvalRecord> = (0..n).map(|_| records[rng.gen_range(0..n)].clone()).collect();
            stat(&sample)
        })
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some((quantile(&values, 0.025), quantile(&values, 0.975)))
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_tag: String,
    pub metric: Metric,
    pub year: usize,
    /// `overall`, `low`, `med` or `high`.
    pub density_group: String,
    pub value: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// Subjects in the group.
    pub n: usize,
}

/// Every metric for every year, overall and per density group.
pub fn stratified_report(records: &[EvalRecord], horizon: usize, model_tag: &str, boot: &Bootstrap) -> Result<Vec<ReportRow>> {
    if let Some(bad) = records.iter().find(|r| r.scores.len() != horizon) {
        return Err(Error::shape("stratified_report", horizon, bad.scores.len()));
    }
    let mut groups: Vec<(String, Vec<EvalRecord>)> = vec![("overall".into(), records.to_vec())];
    for g in DensityGroup::ALL {
        groups.push((g.as_str().into(), records.iter().filter(|r| r.density_group == g).cloned().collect()));
    }
    let mut rows = Vec::with_capacity(groups.len() * horizon * 2);
    for (name, members) in &groups {
        for metric in [Metric::RocAuc, Metric::CIndex] {
            for year in 1..=horizon {
                let value = metric.eval(members, year);
                let ci = value.and_then(|_| bootstrap_ci(members, boot, |s| metric.eval(s, year)));
                rows.push(ReportRow {
                    model_tag: model_tag.to_string(),
                    metric,
                    year,
                    density_group: name.clone(),
                    value,
                    ci_lo: ci.map(|c| c.0),
                    ci_hi: ci.map(|c| c.1),
                    n: members.len(),
                });
            }
        }
    }
    Ok(rows)
}
