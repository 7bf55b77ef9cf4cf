use proptest::prelude::*;
use vmra_core::hazard::{risk_from_parts, risk_loss, Label, RiskOutput, HORIZON};
use vmra_core::metrics::{c_index, rocauc_year, stratified_report, Bootstrap, DensityGroup, EvalRecord};

fn label() -> impl Strategy<Value = Label> {
    (1usize..=HORIZON).prop_flat_map(|f| {
        prop_oneof![Just(None), (1usize..=f).prop_map(Some)].prop_map(move |event_year| Label { event_year, followup_years: f })
    })
}

/// Coarse score grid so ties are common.
fn records(max_n: usize) -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec((prop::collection::vec(-6i32..6, HORIZON), label(), 0usize..3), 1..=max_n).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (s, label, g))| EvalRecord {
                subject_id: format!("s{i}"),
                scores: s.into_iter().map(|v| v as f64 * 0.25).collect(),
                label,
                density_group: DensityGroup::ALL[g],
            })
            .collect()
    })
}

fn credit(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

fn c_index_oracle(rs: &[EvalRecord]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, a) in rs.iter().enumerate() {
        for (j, b) in rs.iter().enumerate() {
            if i == j {
                continue;
            }
            let Some(e) = a.label.event_year else { continue };
            let horizon_b = b.label.event_year.unwrap_or(usize::MAX).min(b.label.followup_years);
            if e < horizon_b {
                num += credit(a.scores[e - 1], b.scores[e - 1]);
                den += 1.0;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn roc_oracle(rs: &[EvalRecord], k: usize) -> Option<f64> {
    // only subjects followed through year k carry an unmasked score there
    let seen: Vec<&EvalRecord> = rs.iter().filter(|r| r.label.followup_years >= k).collect();
    let pos: Vec<f64> = seen.iter().filter(|r| r.label.event_year.is_some_and(|e| e <= k)).map(|r| r.scores[k - 1]).collect();
    let neg: Vec<f64> = seen.iter().filter(|r| r.label.event_year.is_none_or(|e| e > k)).map(|r| r.scores[k - 1]).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut num = 0.0;
    for &p in &pos {
        for &n in &neg {
            num += credit(p, n);
        }
    }
    Some(num / (pos.len() * neg.len()) as f64)
}

fn map_scores(rs: &[EvalRecord], f: impl Fn(usize, &EvalRecord, f64) -> f64) -> Vec<EvalRecord> {
    rs.iter().map(|r| EvalRecord { scores: r.scores.iter().enumerate().map(|(k, &s)| f(k + 1, r, s)).collect(), ..r.clone() }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn c_index_matches_pair_enumeration(rs in records(20)) {
        prop_assert_eq!(c_index(&rs), c_index_oracle(&rs));
    }

    #[test]
    fn rocauc_matches_pair_enumeration(rs in records(20), k in 1usize..=HORIZON) {
        prop_assert_eq!(rocauc_year(&rs, k), roc_oracle(&rs, k));
    }

    #[test]
    fn rank_metrics_ignore_increasing_transforms(rs in records(20)) {
        let t = map_scores(&rs, |_, _, s| s * s * s + 2.0 * s - 7.0);
        prop_assert_eq!(c_index(&t), c_index(&rs));
        for k in 1..=HORIZON {
            prop_assert_eq!(rocauc_year(&t, k), rocauc_year(&rs, k));
        }
    }

    #[test]
    fn censored_years_do_not_matter(rs in records(20), noise in prop::collection::vec(-100.0f64..100.0, 20 * HORIZON)) {
        let perturbed = map_scores(&rs, |k, r, s| {
            if k > r.label.followup_years {
                noise[k - 1 + HORIZON * r.subject_id[1..].parse::<usize>().unwrap()]
            } else {
                s
            }
        });
        prop_assert_eq!(c_index(&perturbed), c_index(&rs));
        for k in 1..=HORIZON {
            prop_assert_eq!(rocauc_year(&perturbed, k), rocauc_year(&rs, k));
        }
        let boot = Bootstrap { samples: 20, seed: 3 };
        prop_assert_eq!(
            stratified_report(&perturbed, HORIZON, "m", &boot).unwrap(),
            stratified_report(&rs, HORIZON, "m", &boot).unwrap()
        );
        let weights = [1.0, 1.3, 0.8, 1.1, 0.9, 0.9];
        for (a, b) in rs.iter().zip(&perturbed) {
            let out = |p: &[f64]| RiskOutput { cumulative: p.to_vec(), ..risk_from_parts(0.0, vec![0.0; HORIZON]) };
            let (la, lb) = (risk_loss(&out(&a.scores), &a.label, &weights).unwrap(), risk_loss(&out(&b.scores), &b.label, &weights).unwrap());
            prop_assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn excluding_censored_before_year_is_a_no_op(rs in records(20), k in 1usize..=HORIZON) {
        let kept: Vec<EvalRecord> = rs.iter().filter(|r| r.label.followup_years >= k || r.label.event_year.is_some()).cloned().collect();
        prop_assert_eq!(rocauc_year(&kept, k), rocauc_year(&rs, k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn anti_ranked_c_index_is_complementary(n in 2usize..20, seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        // distinct event years and distinct scores: no ties anywhere
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s: Vec<f64> = (0..n).map(|i| i as f64).collect();
        s.shuffle(&mut rng);
        let rs: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord {
                subject_id: format!("s{i}"),
                scores: vec![s[i]; HORIZON],
                label: Label { event_year: Some(1 + i % HORIZON), followup_years: HORIZON },
                density_group: DensityGroup::Low,
            })
            .collect();
        let anti = map_scores(&rs, |_, _, v| -v);
        if let (Some(a), Some(b)) = (c_index(&rs), c_index(&anti)) {
            // tied event years are not comparable pairs, so no score ties arise
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
