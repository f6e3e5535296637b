//! Primitive differentiable operations: forward evaluation plus an explicit
//! adjoint for each.

use crate::error::{Error, Result};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// Default layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// matrix products

/// `A[r×k] · B[k×c]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, k) = a.dims2()?;
    let (k2, cols) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); r * cols];
    for i in 0..r {
        let row = &mut out[i * cols..(i + 1) * cols];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * cols..(p + 1) * cols];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_op("matmul", &[r, cols], out))
}

/// `Aᵀ · B` for `A[k×r]`, `B[k×c]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, r) = a.dims2()?;
    let (k2, cols) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); r * cols];
    for p in 0..k {
        let brow = &bd[p * cols..(p + 1) * cols];
        for i in 0..r {
            let av = ad[p * r + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * cols..(i + 1) * cols];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_op("matmul_tn", &[r, cols], out))
}

/// `A · Bᵀ` for `A[r×k]`, `B[c×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, k) = a.dims2()?;
    let (cols, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); r * cols];
    for i in 0..r {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..cols {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * cols + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Ok(Tensor::from_op("matmul_nt", &[r, cols], out))
}

/// Adjoint of [`matmul`]: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

/// Adds `bias[r]` to every column of `x[r×c]`.
pub fn add_row_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = x.dims2()?;
    if bias.len() != r {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data().to_vec();
    for (i, row) in out.chunks_mut(cols).enumerate() {
        let b = bias.data()[i];
        row.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(Tensor::from_op("add_row_bias", &[r, cols], out))
}

/// Adjoint of [`add_row_bias`] wrt the bias: row sums of the upstream.
pub fn row_sums<T: Real>(upstream: &Tensor<T>, bias_shape: &[usize]) -> Result<Tensor<T>> {
    let (_, cols) = upstream.dims2()?;
    let data = upstream
        .data()
        .chunks(cols)
        .map(|row| row.iter().copied().sum())
        .collect();
    Ok(Tensor::from_op("row_sums", bias_shape, data))
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, cols) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(Tensor::from_op("softmax_rows", &[r, cols], out))
}

/// Adjoint of [`softmax_rows`] given its output `y`:
/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape("softmax_rows_backward", y.shape(), upstream.shape()));
    }
    let (r, cols) = y.dims2()?;
    let mut out = vec![T::zero(); r * cols];
    for ((o, yr), gr) in out
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(upstream.data().chunks(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Ok(Tensor::from_op("softmax_rows_backward", &[r, cols], out))
}

// ---------------------------------------------------------------------------
// GELU (exact erf form)

#[inline]
fn std_normal_cdf<T: Real>(x: T) -> T {
    c::<T>(0.5) * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<T: Real>(x: T) -> T {
    // 1/sqrt(2π)
    c::<T>(0.398_942_280_401_432_7) * (-(x * x) * c(0.5)).exp()
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(
        "gelu",
        x.shape(),
        x.data().iter().map(|&v| v * std_normal_cdf(v)).collect(),
    )
}

/// Adjoint of [`gelu`]: `Φ(x) + x·φ(x)` times upstream.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(upstream, "gelu_backward", |v, g| {
        g * (std_normal_cdf(v) + v * std_normal_pdf(v))
    })
}

// ---------------------------------------------------------------------------
// layer norm

/// Saved activations of [`layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T = f32> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each row of `x[L×C]`, then applies `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (r, cols) = x.dims2()?;
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = c::<T>(cols as f64);
    let mut xhat = vec![T::zero(); r * cols];
    let mut out = vec![T::zero(); r * cols];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x.data()[i * cols..(i + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + c(eps)).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let h = (row[j] - mean) * is;
            xhat[i * cols + j] = h;
            out[i * cols + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_op("layer_norm", &[r, cols], out),
        LayerNormCache {
            normalized: Tensor::from_op("layer_norm", &[r, cols], xhat),
            inv_std,
        },
    ))
}

/// Adjoint of [`layer_norm`]: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (r, cols) = cache.normalized.dims2()?;
    if upstream.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "layer_norm_backward",
            cache.normalized.shape(),
            upstream.shape(),
        ));
    }
    let n = c::<T>(cols as f64);
    let xhat = cache.normalized.data();
    let g = upstream.data();
    let mut dx = vec![T::zero(); r * cols];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for i in 0..r {
        let off = i * cols;
        for j in 0..cols {
            dgamma[j] = dgamma[j] + g[off + j] * xhat[off + j];
            dbeta[j] = dbeta[j] + g[off + j];
            dxhat[j] = g[off + j] * gamma.data()[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = (0..cols).map(|j| dxhat[j] * xhat[off + j]).sum::<T>() / n;
        let is = cache.inv_std[i];
        for j in 0..cols {
            dx[off + j] = is * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
        }
    }
    Ok((
        Tensor::from_op("layer_norm_backward", &[r, cols], dx),
        Tensor::from_op("layer_norm_backward", gamma.shape(), dgamma),
        Tensor::from_op("layer_norm_backward", gamma.shape(), dbeta),
    ))
}

// ---------------------------------------------------------------------------
// loss

/// Label-smoothed cross-entropy on a single logit vector.
///
/// Returns the loss and its gradient wrt the logits (`p − q`).
pub fn cross_entropy_smoothed<T: Real>(logits: &Tensor<T>, target: usize, eps: f64) -> Result<(T, Tensor<T>)> {
    let k = logits.len();
    if target >= k {
        return Err(Error::Index {
            what: "class logits",
            index: target,
            size: k,
        });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Contract(format!("label smoothing must be in [0,1), got {eps}")));
    }
    let z = logits.data();
    let m = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    let q_other = c::<T>(eps / k as f64);
    let q_target = c::<T>(1.0 - eps + eps / k as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(k);
    for (i, &v) in z.iter().enumerate() {
        let logp = v - lse;
        let q = if i == target { q_target } else { q_other };
        loss = loss - q * logp;
        grad.push(logp.exp() - q);
    }
    Ok((loss, Tensor::from_op("cross_entropy_smoothed", logits.shape(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let b = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap().data(), &[1., 2., 3., 4.]);
        let sel = t(&[2, 2], &[1., 0., 0., 0.]);
        let b2 = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&sel, &b2).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::<f32>::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin());
        let b = Tensor::<f32>::from_fn(&[3, 5], |i| (i as f32 * 0.11).cos());
        let tn = matmul_tn(&a, &b).unwrap();
        let ref_tn = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&ref_tn).unwrap() < 1e-6);
        let d = Tensor::<f32>::from_fn(&[5, 4], |i| i as f32 * 0.1);
        let nt = matmul_nt(&a, &d).unwrap();
        let ref_nt = matmul(&a, &d.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&ref_nt).unwrap() < 1e-5);
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let y = softmax_rows(&t(&[1, 3], &[0., 0., 0.])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let a = softmax_rows(&t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let b = softmax_rows(&t(&[1, 3], &[100.3, 98.8, 102.0])).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // exp(k-3) / (e^-2 + e^-1 + 1), evaluated in f64
        let denom = (-2f64).exp() + (-1f64).exp() + 1.0;
        let expected = [(-2f64).exp() / denom, (-1f64).exp() / denom, 1.0 / denom];
        let y = softmax_rows(&t(&[1, 3], &[1., 2., 3.])).unwrap();
        for (a, b) in y.data().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!((expected[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
    }

    #[test]
    fn gelu_fixed_points() {
        let y = gelu(&t(&[2], &[0.0, 10.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // GELU(1) = Φ(1) = 0.841344746...
        let one = gelu(&Tensor::<f64>::scalar(1.0));
        assert!((one.data()[0] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let g = Tensor::full(&[4], 1.0f32);
        let b = Tensor::zeros(&[4]);
        let (y, _) = layer_norm(&t(&[1, 4], &[3., 3., 3., 3.]), &g, &b, LN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::full(&[2], 1.0f32);
        let b2 = Tensor::zeros(&[2]);
        let (y2, _) = layer_norm(&t(&[1, 2], &[1., -1.]), &g2, &b2, LN_EPS).unwrap();
        assert!((y2.data()[0] - 1.0).abs() < 1e-5 && (y2.data()[1] + 1.0).abs() < 1e-5);
        assert!(layer_norm(&t(&[1, 2], &[1., -1.]), &g2, &b2, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let (loss, grad) = cross_entropy_smoothed(&Tensor::<f64>::zeros(&[10]), 3, 0.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let err = cross_entropy_smoothed(&Tensor::<f32>::zeros(&[3]), 3, 0.1).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, size: 3, .. }));
    }

    #[test]
    fn cross_entropy_smoothing_targets() {
        // eps = 0.1, K = 4, all-zero logits: loss = ln 4 regardless of q
        let (loss, grad) = cross_entropy_smoothed(&Tensor::<f64>::zeros(&[4]), 0, 0.1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // p = 1/4, q_target = 0.925, q_other = 0.025
        assert!((grad.data()[0] - (0.25 - 0.925)).abs() < 1e-12);
        assert!((grad.data()[1] - (0.25 - 0.025)).abs() < 1e-12);
    }
}
