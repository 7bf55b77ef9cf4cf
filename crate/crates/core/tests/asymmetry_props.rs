use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmra_core::asymmetry::{fuse_asymmetry, lat_track, mirror_width, sad_compute, AsymmetryConfig, AsymmetryRecord, ViewPair};
use vmra_core::Tensor;

fn map(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Explicit loops over cells and channels.
fn d_norm_oracle(l: &Tensor<f64>, r: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = l.dims3().unwrap();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in 0..c {
                let d = l.get(&[k, i, j]).unwrap() - r.get(&[k, i, w - 1 - j]).unwrap();
                acc += d * d;
            }
            out.push(acc.sqrt());
        }
    }
    out
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..7, 1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mirrored_input_has_zero_asymmetry(seed in any::<u64>(), (c, h, w) in dims()) {
        let l = map(seed, c, h, w);
        let (d, rec) = sad_compute(&l, &mirror_width(&l).unwrap(), 0, ViewPair::Cc).unwrap();
        prop_assert!(d.data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(rec.d_max, 0.0);
        prop_assert_eq!(rec.p, (0, 0));
    }

    #[test]
    fn d_norm_matches_channel_loop(seed in any::<u64>(), (c, h, w) in dims()) {
        let l = map(seed, c, h, w);
        let r = map(seed.wrapping_add(1), c, h, w);
        let (d, rec) = sad_compute(&l, &r, 0, ViewPair::Mlo).unwrap();
        let oracle = d_norm_oracle(&l, &r);
        prop_assert_eq!(d.data(), oracle.as_slice());
        let best = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = oracle.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(rec.d_max, best);
        prop_assert_eq!(rec.p, (first / w, first % w));
    }

    #[test]
    fn swapping_sides_reflects_the_map(seed in any::<u64>(), (c, h, w) in dims()) {
        let l = map(seed, c, h, w);
        let r = map(seed.wrapping_add(7), c, h, w);
        let (d, rec) = sad_compute(&l, &r, 0, ViewPair::Cc).unwrap();
        let (d_swap, rec_swap) = sad_compute(&r, &l, 0, ViewPair::Cc).unwrap();
        let reflected = mirror_width(&d.reshape(vec![1, h, w]).unwrap()).unwrap();
        prop_assert_eq!(d_swap.data(), reflected.data());
        prop_assert_eq!(rec.d_max, rec_swap.d_max);
    }

    #[test]
    fn d_max_is_positively_homogeneous(seed in any::<u64>(), (c, h, w) in dims(), e in -4i32..4) {
        // powers of two keep the scaling exact in floating point
        let s = 2f64.powi(e);
        let l = map(seed, c, h, w);
        let r = map(seed.wrapping_add(3), c, h, w);
        let (_, rec) = sad_compute(&l, &r, 0, ViewPair::Cc).unwrap();
        let (_, scaled) = sad_compute(&l.map(|v| v * s), &r.map(|v| v * s), 0, ViewPair::Cc).unwrap();
        prop_assert_eq!(scaled.d_max, rec.d_max * s);
    }

    #[test]
    fn growing_the_peak_never_lowers_d_max(seed in any::<u64>(), (c, h, w) in dims(), bump in 0.0f64..3.0) {
        let l = map(seed, c, h, w);
        let r = map(seed.wrapping_add(5), c, h, w);
        let (_, rec) = sad_compute(&l, &r, 0, ViewPair::Cc).unwrap();
        let (ph, pw) = rec.p;
        // push L away from the mirrored R at the peak, channel 0
        let mirrored = r.get(&[0, ph, w - 1 - pw]).unwrap();
        let mut bumped = l.clone();
        let idx = ph * w + pw;
        let v = bumped.data()[idx];
        bumped.data_mut()[idx] = if v >= mirrored { v + bump } else { v - bump };
        let (_, after) = sad_compute(&bumped, &r, 0, ViewPair::Cc).unwrap();
        prop_assert!(after.d_max >= rec.d_max);
    }

    #[test]
    fn r_aa_is_permutation_invariant(values in prop::collection::vec(0.0f64..10.0, 1..8), persistent in any::<bool>(), seed in any::<u64>()) {
        let records: Vec<AsymmetryRecord<f64>> = values
            .iter()
            .enumerate()
            .map(|(t, &d)| AsymmetryRecord { t, d_max: d, p: (0, 0), view_pair: ViewPair::Cc })
            .collect();
        let mut shuffled = records.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let a = fuse_asymmetry(&records, persistent, 0.5).unwrap();
        let b = fuse_asymmetry(&shuffled, persistent, 0.5).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn persistence_follows_adjacent_displacements(points in prop::collection::vec((0usize..8, 0usize..8), 1..6), window in 1usize..10) {
        let records: Vec<AsymmetryRecord<f64>> = points
            .iter()
            .enumerate()
            .map(|(t, &p)| AsymmetryRecord { t, d_max: 1.0, p, view_pair: ViewPair::Cc })
            .collect();
        let cfg = AsymmetryConfig { window, alpha: 0.5 };
        let lat = lat_track(&records, &cfg).unwrap();
        let theta = 0.4 * window as f64;
        let expected = points.windows(2).all(|pq| {
            let dh = pq[1].0 as f64 - pq[0].0 as f64;
            let dw = pq[1].1 as f64 - pq[0].1 as f64;
            (dh * dh + dw * dw).sqrt() < theta
        });
        prop_assert_eq!(lat.persistent, expected);
    }
}
