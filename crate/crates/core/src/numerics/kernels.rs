//! Deterministic dense kernels.
//!
//! Every reduction runs in a fixed sequential order so that identical inputs
//! give bitwise-identical outputs, regardless of thread count.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); m * n];
    mm(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `out = a · b` with `a: m×k`, `b: k×n`.
pub fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub fn mm_at_b_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a · bᵀ` with `a: m×n`, `b: k×n`, `out: m×k`.
pub fn mm_a_bt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = dot(arow, brow);
        }
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place max-subtracted softmax over a contiguous slice.
pub fn softmax_in_place<F: Scalar>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![F::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[base + j * inner];
            }
            softmax_in_place(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                data[base + j * inner] = *l;
            }
        }
    }
    Ok(out)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row statistics saved by [`layernorm_rows`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

/// Layer normalization of each row of an `n×d` buffer followed by the affine
/// map `gamma * xhat + beta`.
pub fn layernorm_rows<F: Scalar>(
    x: &[F],
    n: usize,
    d: usize,
    gamma: &[F],
    beta: &[F],
    out: &mut [F],
) -> LayerNormCache<F> {
    let eps = F::lit(LAYERNORM_EPS);
    let dn = F::lit(d as f64);
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Backward of [`layernorm_rows`]. Accumulates into `dx`, `dgamma`, `dbeta`.
pub fn layernorm_rows_backward<F: Scalar>(
    dout: &[F],
    cache: &LayerNormCache<F>,
    gamma: &[F],
    n: usize,
    d: usize,
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let dn = F::lit(d as f64);
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let go = &dout[r * d..(r + 1) * d];
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for c in 0..d {
            let g = go[c] * gamma[c];
            mean_g += g;
            mean_gx += g * xh[c];
            dgamma[c] += go[c] * xh[c];
            dbeta[c] += go[c];
        }
        mean_g = mean_g / dn;
        mean_gx = mean_gx / dn;
        let rs = cache.rstd[r];
        for c in 0..d {
            let g = go[c] * gamma[c];
            dx[r * d + c] += rs * (g - mean_g - xh[c] * mean_gx);
        }
    }
}

/// Layer normalization without affine parameters, over the last axis.
pub fn layernorm<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let d = *x.shape().last().unwrap_or(&1);
    let n = if d == 0 { 0 } else { x.len() / d };
    let gamma = vec![F::one(); d];
    let beta = vec![F::zero(); d];
    let mut out = Tensor::zeros(x.shape());
    layernorm_rows(x.data(), n, d, &gamma, &beta, out.data_mut());
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Euclidean norm of a slice.
pub fn norm<F: Scalar>(x: &[F]) -> F {
    dot(x, x).sqrt()
}

/// Scales a vector to unit Euclidean norm.
pub fn l2_normalize_slice<F: Scalar>(x: &[F]) -> Result<Vec<F>> {
    let n = norm(x);
    if n == F::zero() || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(x.iter().map(|&v| v / n).collect())
}

/// Unit-normalizes every row (last axis) of a tensor.
pub fn l2_normalize<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::ZeroVector);
    }
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        data.extend(l2_normalize_slice(row)?);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    let na = norm(a);
    let nb = norm(b);
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[1.0], &[1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut rng = seeded(1);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let z = matmul(&Tensor::zeros(&[2, 3]), &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_transpose_identity() {
        let mut rng = seeded(2);
        let a = Tensor::<f32>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let lhs = matmul(&a, &b).unwrap().transpose().unwrap();
        let rhs = matmul(&b.transpose().unwrap(), &a.transpose().unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn slice_kernels_agree_with_transposed_matmul() {
        let mut rng = seeded(3);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let mut out = vec![0.0; 6];
        mm_at_b_acc(a.data(), b.data(), 4, 3, 2, &mut out);
        let expect = matmul(&a.transpose().unwrap(), &b).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let mut out = vec![0.0; 20];
        mm_a_bt(a.data(), c.data(), 4, 3, 5, &mut out);
        let expect = matmul(&a, &c.transpose().unwrap()).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::new(vec![2], vec![1.0f64, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        let x = Tensor::new(vec![2], vec![1000.0f32, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[&[0.0, 1.0], &[0.0, 3.0]]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert_eq!(s.data()[2], 0.5);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layernorm_gelu_l2() {
        let x = Tensor::new(vec![1, 4], vec![2.5f64; 4]).unwrap();
        assert!(layernorm(&x).data().iter().all(|&v| v == 0.0));
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let v = Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            l2_normalize(&Tensor::<f64>::zeros(&[3])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_backward_matches_central_difference() {
        let mut rng = seeded(4);
        let (n, d) = (2, 5);
        let x = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let loss = |x: &[f64]| {
            let mut out = vec![0.0; n * d];
            layernorm_rows(x, n, d, gamma.data(), beta.data(), &mut out);
            dot(&out, w.data())
        };
        let mut out = vec![0.0; n * d];
        let cache = layernorm_rows(x.data(), n, d, gamma.data(), beta.data(), &mut out);
        let mut dx = vec![0.0; n * d];
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        layernorm_rows_backward(w.data(), &cache, gamma.data(), n, d, &mut dx, &mut dg, &mut db);
        for i in 0..n * d {
            let h = 1e-5;
            let mut xp = x.data().to_vec();
            xp[i] += h;
            let mut xm = x.data().to_vec();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "i={i} fd={fd} an={}", dx[i]);
        }
    }

    #[test]
    fn kernels_are_bitwise_reproducible() {
        let mut rng = seeded(5);
        let a = Tensor::<f32>::randn(&[7, 9], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[9, 4], 1.0, &mut rng);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.to_le_bytes(), c2.to_le_bytes());
        let s1 = softmax(&a, 1).unwrap();
        let s2 = softmax(&a, 1).unwrap();
        assert_eq!(s1.to_le_bytes(), s2.to_le_bytes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..16)) {
            let n = v.len();
            let x = Tensor::new(vec![n], v).unwrap();
            let s = softmax(&x, 0).unwrap();
            let total: f64 = s.data().iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }
}
