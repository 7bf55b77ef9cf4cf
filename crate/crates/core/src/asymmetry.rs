//! Bilateral asymmetry: the per-timestep spatial detector and the
//! longitudinal tracker that fuses its peaks into one risk factor `r_AA`.
//!
//! For left/right feature maps `L, R: C×H×W` the detector mirrors `R` along
//! the width axis and takes `D = L − R^F`. Its channel norm
//! `D_norm(h, w) = sqrt(Σ_c D²)` peaks at `p` with value `D_max`. The
//! tracker calls a peak persistent when consecutive peaks stay within
//! `0.4 · W_win` cells of each other and then upweights the mean peak value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Displacement threshold as a fraction of the window side.
pub const WINDOW_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewPair {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
}

impl ViewPair {
    pub const ALL: [ViewPair; 2] = [ViewPair::Cc, ViewPair::Mlo];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewPair::Cc => "CC",
            ViewPair::Mlo => "MLO",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryConfig {
    /// Side of the tracking window in feature-map cells.
    pub window: usize,
    /// Upweight applied to persistent asymmetry.
    pub alpha: f64,
}

impl Default for AsymmetryConfig {
    fn default() -> Self {
        Self { window: 5, alpha: 0.5 }
    }
}

impl AsymmetryConfig {
    pub fn threshold(&self) -> f64 {
        displacement_threshold(self.window)
    }
}

/// Peak of one bilateral comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetryRecord<T> {
    pub t: usize,
    pub d_max: T,
    /// `(row, col)` of the peak.
    pub p: (usize, usize),
    pub view_pair: ViewPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalAsymmetry<T> {
    pub records: Vec<AsymmetryRecord<T>>,
    pub persistent: bool,
    pub r_aa: T,
}

/// Reverse the width axis of a `C×H×W` map.
pub fn mirror_width<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    Tensor::from_fn(vec![c, h, w], |i| {
        let col = i % w;
        x.data()[i - col + (w - 1 - col)]
    })
}

/// Difference norm map and its peak. Ties go to the smallest row-major
/// index.
pub fn sad_compute<T: Scalar>(l: &Tensor<T>, r: &Tensor<T>, t: usize, view_pair: ViewPair) -> Result<(Tensor<T>, AsymmetryRecord<T>)> {
    l.expect_same_shape("sad_compute", r)?;
    let (c, h, w) = l.dims3()?;
    let hw = h * w;
    let mut sq = vec![T::zero(); hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = l.data()[ch * hw + y * w + x] - r.data()[ch * hw + y * w + (w - 1 - x)];
                sq[y * w + x] += d * d;
            }
        }
    }
    let norm: Vec<T> = sq.into_iter().map(|v| v.sqrt()).collect();
    let (mut best, mut d_max) = (0, norm[0]);
    for (i, &v) in norm.iter().enumerate().skip(1) {
        if v > d_max {
            best = i;
            d_max = v;
        }
    }
    let rec = AsymmetryRecord { t, d_max, p: (best / w, best % w), view_pair };
    Ok((Tensor::new(vec![h, w], norm)?, rec))
}

pub fn displacement_threshold(window: usize) -> f64 {
    WINDOW_FRACTION * window as f64
}

/// True when every adjacent pair of peaks moves less than `threshold`
/// (Euclidean, in cells). Vacuously true for a single record.
pub fn is_persistent<T>(records: &[AsymmetryRecord<T>], threshold: f64) -> bool {
    records.windows(2).all(|pair| {
        let dy = pair[1].p.0 as f64 - pair[0].p.0 as f64;
        let dx = pair[1].p.1 as f64 - pair[0].p.1 as f64;
        dy.hypot(dx) < threshold
    })
}

/// Mean peak value, multiplied by `1 + alpha` when the peak is persistent
/// across at least two records.
pub fn fuse_asymmetry<T: Scalar>(records: &[AsymmetryRecord<T>], persistent: bool, alpha: f64) -> Result<T> {
    if records.is_empty() {
        return Err(Error::invalid("asymmetry fusion needs at least one record"));
    }
    let base = records.iter().fold(T::zero(), |a, r| a + r.d_max) / T::of(records.len() as f64);
    Ok(if persistent && records.len() >= 2 { base * T::of(1.0 + alpha) } else { base })
}

/// Persistence test and fused risk factor over the present timesteps of
/// one view pair. Records are sorted by `t` first.
pub fn lat_track<T: Scalar>(records: &[AsymmetryRecord<T>], cfg: &AsymmetryConfig) -> Result<LongitudinalAsymmetry<T>> {
    if records.is_empty() {
        return Err(Error::invalid("asymmetry tracking needs at least one record"));
    }
    if cfg.window == 0 {
        return Err(Error::invalid("asymmetry window must be positive"));
    }
    let mut records = records.to_vec();
    records.sort_by_key(|r| r.t);
    let persistent = is_persistent(&records, cfg.threshold());
    let r_aa = fuse_asymmetry(&records, persistent, cfg.alpha)?;
    Ok(LongitudinalAsymmetry { records, persistent, r_aa })
}

/// Per-view-pair tracks and the averaged subject-level `r_AA`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectAsymmetry<T> {
    pub cc: LongitudinalAsymmetry<T>,
    pub mlo: LongitudinalAsymmetry<T>,
    pub r_aa: T,
}

/// Present timesteps as `(t, [LCC, RCC, LMLO, RMLO])` feature maps.
pub fn subject_asymmetry<T: Scalar>(steps: &[(usize, [&Tensor<T>; 4])], cfg: &AsymmetryConfig) -> Result<SubjectAsymmetry<T>> {
    let mut cc = Vec::with_capacity(steps.len());
    let mut mlo = Vec::with_capacity(steps.len());
    for &(t, [lcc, rcc, lmlo, rmlo]) in steps {
        cc.push(sad_compute(lcc, rcc, t, ViewPair::Cc)?.1);
        mlo.push(sad_compute(lmlo, rmlo, t, ViewPair::Mlo)?.1);
    }
    let cc = lat_track(&cc, cfg)?;
    let mlo = lat_track(&mlo, cfg)?;
    let r_aa = (cc.r_aa + mlo.r_aa) / T::of(2.0);
    Ok(SubjectAsymmetry { cc, mlo, r_aa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(t: usize, d_max: f64, p: (usize, usize)) -> AsymmetryRecord<f64> {
        AsymmetryRecord { t, d_max, p, view_pair: ViewPair::Cc }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn mirrored_input_has_zero_asymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random(&[3, 4, 5], &mut rng);
        let (d, r) = sad_compute(&l, &mirror_width(&l).unwrap(), 0, ViewPair::Cc).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert_eq!((r.d_max, r.p), (0.0, (0, 0)));
    }

    #[test]
    fn single_spike() {
        let mut l = Tensor::zeros(vec![1, 4, 5]).unwrap();
        l.data_mut()[2 * 5 + 3] = 3.0;
        let (_, r) = sad_compute(&l, &Tensor::zeros(vec![1, 4, 5]).unwrap(), 2, ViewPair::Mlo).unwrap();
        assert_eq!((r.d_max, r.p, r.t, r.view_pair), (3.0, (2, 3), 2, ViewPair::Mlo));
    }

    #[test]
    fn matches_channel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w) = (4, 6, 7);
        let l = random(&[c, h, w], &mut rng);
        let r = random(&[c, h, w], &mut rng);
        let (d, rec) = sad_compute(&l, &r, 0, ViewPair::Cc).unwrap();
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    let diff = l.get(&[ch, y, x]).unwrap() - r.get(&[ch, y, w - 1 - x]).unwrap();
                    s += diff * diff;
                }
                let v = s.sqrt();
                assert_eq!(d.get(&[y, x]).unwrap(), v);
                if v > best.0 {
                    best = (v, (y, x));
                }
            }
        }
        assert_eq!((rec.d_max, rec.p), best);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(vec![1, 2, 2]).unwrap();
        let b = Tensor::<f64>::zeros(vec![1, 2, 3]).unwrap();
        assert!(sad_compute(&a, &b, 0, ViewPair::Cc).is_err());
    }

    #[test]
    fn lat_enumerated_examples() {
        let cfg = AsymmetryConfig::default();
        assert_eq!(cfg.threshold(), 2.0);
        let single = lat_track(&[rec(0, 1.0, (1, 1))], &cfg).unwrap();
        assert!(single.persistent);
        assert_eq!(single.r_aa, 1.0);
        assert!(lat_track(&[rec(0, 1.0, (3, 3)), rec(1, 1.0, (4, 4))], &cfg).unwrap().persistent);
        assert!(!lat_track(&[rec(0, 1.0, (0, 0)), rec(1, 1.0, (4, 4))], &cfg).unwrap().persistent);
        // exactly at the threshold is not persistent
        assert!(!lat_track(&[rec(0, 1.0, (0, 0)), rec(1, 1.0, (0, 2))], &cfg).unwrap().persistent);
        assert!(lat_track::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn lat_sorts_by_time() {
        let cfg = AsymmetryConfig::default();
        let out = lat_track(&[rec(2, 1.0, (0, 0)), rec(0, 1.0, (0, 1)), rec(1, 1.0, (9, 9))], &cfg).unwrap();
        assert_eq!(out.records.iter().map(|r| r.t).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(!out.persistent);
    }

    #[test]
    fn fusion_examples() {
        let persistent = [rec(0, 2.0, (0, 0)), rec(1, 2.0, (0, 0)), rec(2, 2.0, (0, 0))];
        assert_eq!(fuse_asymmetry(&persistent, true, 0.5).unwrap(), 3.0);
        assert_eq!(fuse_asymmetry(&[rec(0, 1.0, (0, 0)), rec(1, 3.0, (5, 5))], false, 0.5).unwrap(), 2.0);
        let zeros = [rec(0, 0.0, (0, 0)), rec(1, 0.0, (0, 0))];
        assert_eq!(fuse_asymmetry(&zeros, true, 0.5).unwrap(), 0.0);
        assert_eq!(fuse_asymmetry(&zeros, false, 0.5).unwrap(), 0.0);
        assert_eq!(fuse_asymmetry(&[rec(0, 4.0, (0, 0))], true, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn subject_risk_averages_view_pairs() {
        let mut l = Tensor::zeros(vec![1, 3, 3]).unwrap();
        l.data_mut()[4] = 2.0;
        let z = Tensor::zeros(vec![1, 3, 3]).unwrap();
        let steps = [(0, [&l, &z, &z, &z]), (1, [&l, &z, &z, &z])];
        let out = subject_asymmetry(&steps, &AsymmetryConfig::default()).unwrap();
        assert_eq!(out.cc.r_aa, 3.0);
        assert_eq!(out.mlo.r_aa, 0.0);
        assert_eq!(out.r_aa, 1.5);
    }
}
