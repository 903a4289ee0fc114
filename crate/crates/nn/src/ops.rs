//! Stateless forward kernels. The autodiff graph calls these and keeps
//! whatever it needs for the backward pass.

use crate::tensor::{gemm, Tensor};
use crate::{shape_err, NnError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    check_finite(x, "gelu")?;
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx GELU(x) = Φ(x) + x·φ(x)
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Per-row statistics kept by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes over the last axis with `ε = 1e-5`, then applies gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_forward(x, gain, bias).map(|(t, _)| t)
}

pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if x.shape().is_empty() || d == 0 {
        return Err(shape_err("layer_norm", "last axis has length 0"));
    }
    if gain.numel() != d || bias.numel() != d {
        return Err(shape_err("layer_norm", format!("gain/bias must have {d} values")));
    }
    check_finite(x, "layer_norm")?;
    let rows = x.rows();
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let n = (row[j] - mean) * is;
            normalized[r * d + j] = n;
            out[r * d + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    check_finite(&out, "layer_norm")?;
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    check_finite(x, "softmax")?;
    let d = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean softmax cross-entropy of `logits[n, C]` against class indices.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let c = logits.cols();
    if logits.rows() != targets.len() {
        return Err(shape_err("softmax_cross_entropy", format!("{} rows vs {} targets", logits.rows(), targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(NnError::Invalid(format!("target class {bad} out of {c}")));
    }
    check_finite(logits, "softmax_cross_entropy")?;
    let loss =
        targets.iter().enumerate().map(|(i, &t)| -log_softmax_at(logits.row(i), t)).sum::<f64>() / targets.len() as f64;
    Ok(loss)
}

pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

/// `a[n,k] @ b[k,m]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(shape_err("matmul", format!("{:?} @ {:?}", a.shape(), b.shape())));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ(x) by composite Simpson quadrature of the normal density, independent of erf.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let a = -12.0;
        let h = (x - a) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(x);
        for i in 1..n {
            let t = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        s * h / 3.0
    }

    #[test]
    fn gelu_examples() {
        let t = |v: f64| gelu(&Tensor::scalar(v)).unwrap().data()[0];
        assert_eq!(t(0.0), 0.0);
        assert!((t(100.0) - 100.0).abs() < 1e-9);
        let oracle = 1.0 * normal_cdf_quadrature(1.0);
        assert!((oracle - 0.841345).abs() < 1e-5);
        assert!((t(1.0) - 0.841345).abs() < 1e-5);
        assert!((t(1.0) - oracle).abs() < 1e-9);
    }

    #[test]
    fn gelu_rejects_non_finite() {
        let x = Tensor::from_parts(vec![1], vec![f64::INFINITY]);
        assert_eq!(gelu(&x), Err(NnError::NonFinite("gelu")));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(layer_norm(&c, &ones, &zeros).unwrap().data(), &[0.0, 0.0]);

        // mean 2, population variance 1 -> (x-2)/sqrt(1+1e-5)
        let r = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let out = layer_norm(&r, &ones, &zeros).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.data()[0] + 1.0).abs() < 1e-4 && (out.data()[1] - 1.0).abs() < 1e-4);
        assert!((out.data()[1] - expect).abs() < 1e-12);

        let bias = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let out = layer_norm(&r, &Tensor::zeros(&[2]), &bias).unwrap();
        assert_eq!(out.data(), &[0.3, -0.7]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        for c in [2usize, 7, 20] {
            let logits = Tensor::full(&[3, c], 0.37);
            let loss = softmax_cross_entropy(&logits, &[0, c - 1, 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let mut v = vec![0.0; 10];
        v[3] = 2.0;
        v[7] = 2.0;
        assert_eq!(argmax(&v), 3);
        assert_eq!(argmax(&[0.0, 0.0, 1.0]), 2);
    }
}
