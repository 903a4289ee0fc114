use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::stream;
use crate::tensor::Tensor;

/// Entries drawn i.i.d. from `N(0, std²)`.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Orthogonal matrix of shape `[rows, cols]`.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise. Built from the
/// QR factorization of a Gaussian matrix with `R` forced to a positive
/// diagonal (the usual sign correction), which makes the result Haar-uniform
/// and a pure function of `seed`.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive dims");
    let mut rng = stream(seed, "orthogonal", 0);
    let (tall, thin) = if rows <= cols { (cols, rows) } else { (rows, cols) };
    // Column-major Gaussian [tall, thin]
    let mut q: Vec<Vec<f64>> = (0..thin)
        .map(|_| {
            (0..tall)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect()
        })
        .collect();
    // Gram-Schmidt with one re-orthogonalization pass. The normalizing
    // factor is ‖·‖ > 0, so this is the QR with positive diag(R).
    for j in 0..thin {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let (done, cur) = q.split_at_mut(j);
                for (c, p) in cur[0].iter_mut().zip(&done[i]) {
                    *c -= dot * p;
                }
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; rows * cols];
    for (c, col) in q.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            if rows <= cols {
                // W = Qᵀ
                data[c * cols + r] = v;
            } else {
                data[r * cols + c] = v;
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ‖W·Wᵀ − I‖∞ (or WᵀW when tall), by explicit triple loop.
    fn orthogonality_error(w: &Tensor) -> f64 {
        let (r, c) = (w.rows(), w.cols());
        let mut worst: f64 = 0.0;
        if r <= c {
            for i in 0..r {
                for j in 0..r {
                    let s: f64 = (0..c).map(|k| w.get2(i, k) * w.get2(j, k)).sum();
                    worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
        } else {
            for i in 0..c {
                for j in 0..c {
                    let s: f64 = (0..r).map(|k| w.get2(k, i) * w.get2(k, j)).sum();
                    worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn one_by_one_is_unit() {
        for s in 0..5 {
            let w = orthogonal_init(1, 1, s);
            assert!((w.data()[0].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn wide_and_tall_are_orthonormal() {
        assert!(orthogonality_error(&orthogonal_init(4, 8, 3)) < 1e-6);
        assert!(orthogonality_error(&orthogonal_init(64, 64, 3)) < 1e-12);
        assert!(orthogonality_error(&orthogonal_init(9, 5, 11)) < 1e-12);
    }

    #[test]
    fn deterministic_in_seed() {
        assert!(orthogonal_init(4, 8, 42).bit_eq(&orthogonal_init(4, 8, 42)));
        assert!(!orthogonal_init(4, 8, 42).bit_eq(&orthogonal_init(4, 8, 43)));
    }
}
