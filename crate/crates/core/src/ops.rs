//! Forward kernels on plain tensors.
//!
//! Every differentiable tape operation evaluates its forward pass through one
//! of these functions, so the tape and the plain API always agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// dy/dx given the input `x` and the output `y = apply(x)`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    let y = x.map(|v| kind.apply(v));
    if !y.all_finite() {
        return Err(Error::NonFinite { op: kind.name() });
    }
    Ok(y)
}

/// `a[m×k] · b[k×n]`.
/// Dot product with eight interleaved partial sums, so the reduction is
/// not one serial dependency chain. The summation order is fixed.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{k}, _]"), format!("{:?}", b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Depth-wise 3×3 cross-correlation with zero padding of width 1.
///
/// `x` is `C×H×W`, `k` is `C×3×3`; output channel `c` only reads input
/// channel `c`.
pub fn dwconv3x3<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if k.shape() != [c, 3, 3] {
        return Err(Error::shape("dwconv3x3", format!("[{c}, 3, 3]"), format!("{:?}", k.shape())));
    }
    let mut out = vec![T::zero(); c * h * w];
    let (xd, kd) = (x.data(), k.data());
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = kd[ch * 9 + ky * 3 + kx];
                accumulate_tap(plane, dst, h, w, ky, kx, wv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Full 3×3 cross-correlation, zero padding of width 1.
///
/// `x` is `Cin×H×W`, `w` is `Cout×Cin×3×3`.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, h, w) = x.dims3()?;
    let cout = match weight.shape() {
        [o, i, 3, 3] if *i == cin => *o,
        s => return Err(Error::shape("conv3x3", format!("[_, {cin}, 3, 3]"), format!("{s:?}"))),
    };
    let mut out = vec![T::zero(); cout * h * w];
    let (xd, wd) = (x.data(), weight.data());
    for o in 0..cout {
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let plane = &xd[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wd[((o * cin + i) * 3 + ky) * 3 + kx];
                    accumulate_tap(plane, dst, h, w, ky, kx, wv);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, h, w], out))
}

/// `dst[y, x] += wv * src[y + ky - 1, x + kx - 1]` over the valid region.
#[inline]
fn accumulate_tap<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, ky: usize, kx: usize, wv: T) {
    let (y0, y1) = valid_range(h, ky);
    let (x0, x1) = valid_range(w, kx);
    for y in y0..y1 {
        let sy = y + ky - 1;
        let srow = &src[sy * w..(sy + 1) * w];
        let drow = &mut dst[y * w..(y + 1) * w];
        for x in x0..x1 {
            drow[x] += wv * srow[x + kx - 1];
        }
    }
}

/// Output coordinates `o` with `0 <= o + k - 1 < n`.
#[inline]
pub(crate) fn valid_range(n: usize, k: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo.min(hi), hi)
}

/// 2×2 average pooling with stride 2 on `C×H×W`; H and W must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", "even spatial dims", format!("{:?}", x.shape())));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let p = base + 2 * i * w + 2 * j;
                out.push((d[p] + d[p + 1] + d[p + w] + d[p + w + 1]) * quarter);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Per-row statistics saved by [`layernorm_with_stats`].
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis with two-pass mean/variance.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layernorm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layernorm_with_stats<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = *x.shape().last().ok_or_else(|| Error::invalid("layernorm of a scalar"))?;
    if c == 0 {
        return Err(Error::invalid("layernorm over an empty axis"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layernorm", format!("[{c}]"), format!("{:?}/{:?}", gamma.shape(), beta.shape())));
    }
    let rows = x.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let (xd, g, b) = (x.data(), gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.len());
    let mut stats = NormStats { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * rstd * g[j] + b[j]);
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

/// `x + v` with `v` added to every row; `v.len()` must equal x's last extent.
pub fn add_row_vector<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let n = v.len();
    if x.shape().last() != Some(&n) {
        return Err(Error::shape("add_row_vector", format!("[.., {n}]"), format!("{:?}", x.shape())));
    }
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(v.data()) {
            *o += b;
        }
    }
    Ok(y)
}

/// `x + v` with `v[i]` added to the whole slab `x[i, ..]`.
pub fn add_col_vector<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let m = v.len();
    if x.shape().first() != Some(&m) {
        return Err(Error::shape("add_col_vector", format!("[{m}, ..]"), format!("{:?}", x.shape())));
    }
    let block = x.len() / m;
    let mut y = x.clone();
    for (slab, &b) in y.data_mut().chunks_mut(block).zip(v.data()) {
        for o in slab {
            *o += b;
        }
    }
    Ok(y)
}

/// `y.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
pub fn gather<T: Scalar>(x: &Tensor<T>, index: &[usize], shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
        return Err(Error::invalid(format!("gather index {bad} out of bounds for {:?}", x.shape())));
    }
    Tensor::new(shape, index.iter().map(|&i| x.data()[i]).collect())
}

/// Mean over the first axis of a matrix: `[m×n] -> [n]`.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let inv = T::one() / T::of(m as f64);
    let mut out = vec![T::zero(); n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::from_parts(vec![n], out))
}

/// Mean over the last axis of a matrix: `[m×n] -> [m]`.
pub fn mean_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let inv = T::one() / T::of(n as f64);
    let out = x.data().chunks(n).map(|row| row.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
    Ok(Tensor::from_parts(vec![m], out))
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let d = x.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &d[i * n..(i + 1) * n];
        let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            total += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn naive_dwconv(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.dims3().unwrap();
        Tensor::from_fn(vec![c, h, w], |idx| {
            let (ch, y, xx) = (idx / (h * w), (idx / w) % h, idx % w);
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s += k.get(&[ch, dy, dx]).unwrap() * x.get(&[ch, sy as usize, sx as usize]).unwrap();
                    }
                }
            }
            s
        })
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2).unwrap(), &m).unwrap(), m);
        let sel = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, k, n) in [(3, 4, 2), (8, 8, 8), (1, 7, 5)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dwconv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 4, 5], &mut rng);
        let k = Tensor::from_fn(vec![3, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(dwconv3x3(&x, &k).unwrap(), x);
    }

    #[test]
    fn dwconv_counts_taps_under_zero_padding() {
        let x = Tensor::<f64>::ones(vec![1, 4, 4]).unwrap();
        let k = Tensor::ones(vec![1, 3, 3]).unwrap();
        let y = dwconv3x3(&x, &k).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), Some(9.0));
        assert_eq!(y.get(&[0, 2, 2]), Some(9.0));
        assert_eq!(y.get(&[0, 0, 0]), Some(4.0));
        assert_eq!(y.get(&[0, 3, 3]), Some(4.0));
        assert_eq!(y.get(&[0, 0, 1]), Some(6.0));
    }

    #[test]
    fn dwconv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [[2, 5, 5], [3, 1, 1], [1, 2, 7], [4, 8, 8]] {
            let x = random(&shape, &mut rng);
            let k = random(&[shape[0], 3, 3], &mut rng);
            assert_eq!(dwconv3x3(&x, &k).unwrap(), naive_dwconv(&x, &k));
        }
    }

    #[test]
    fn dwconv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 3]).unwrap();
        let k = Tensor::zeros(vec![3, 3, 3]).unwrap();
        assert!(dwconv3x3(&x, &k).is_err());
    }

    #[test]
    fn conv3x3_single_channel_equals_dwconv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 6, 6], &mut rng);
        let k = random(&[1, 3, 3], &mut rng);
        let w = k.reshape(vec![1, 1, 3, 3]).unwrap();
        assert_eq!(conv3x3(&x, &w).unwrap(), dwconv3x3(&x, &k).unwrap());
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1_000_000 {
            let x: f64 = rng.gen_range(-30.0..30.0);
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn layernorm_constant_and_unit_cases() {
        let g = Tensor::<f64>::ones(vec![3]).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0]).unwrap();
        let y = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let g = Tensor::<f64>::ones(vec![2]).unwrap();
        let b = Tensor::zeros(vec![2]).unwrap();
        let x = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        let y = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
        // variance is exactly 1, so only eps perturbs the result
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_matches_explicit_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[4, 8], &mut rng);
        let g = random(&[8], &mut rng);
        let b = random(&[8], &mut rng);
        let y = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..8).map(|j| x.get(&[r, j]).unwrap()).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (j, &xj) in row.iter().enumerate() {
                let expect = (xj - mean) / (var + LAYERNORM_EPS).sqrt() * g.data()[j] + b.data()[j];
                assert!((y.get(&[r, j]).unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[5, 4], &mut rng).map(|v| v * 20.0);
        let s = softmax_rows(&x).unwrap();
        for i in 0..5 {
            let total: f64 = (0..4).map(|j| s.get(&[i, j]).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_halves_spatial_dims() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 4], |i| i as f64).unwrap();
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[(0.0 + 1.0 + 4.0 + 5.0) / 4.0, (2.0 + 3.0 + 6.0 + 7.0) / 4.0]);
    }
}
