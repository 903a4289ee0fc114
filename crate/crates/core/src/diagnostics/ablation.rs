use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use xvqa_nn::rng::stream;
use xvqa_nn::Tensor;

use crate::model::{Example, VisualMode};
use crate::synthdata::VisualFeatures;
use crate::{CoreError, Result};

/// Input rewrite applied to a batch of examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Inputs unchanged.
    Identity,
    /// Text region replaced by a single '?'.
    QuestionMarkOnly,
    /// Feature and spatial vectors zeroed; the count token is kept.
    ZeroVisual,
    /// Object features resampled from per-image Gaussian moments; spatial
    /// vectors and count kept.
    GaussianVisual,
}

/// Statistics the Gaussian sampler matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianStats {
    /// Mean and standard deviation per feature dimension.
    #[default]
    PerDimension,
    /// Mean per dimension, one standard deviation pooled over all dimensions.
    ScalarStd,
}

/// Resamples every object's features independently from Normal(μ_d, s_d),
/// with μ and s (population) computed over the image's own objects.
pub fn gaussian_features(visual: &VisualFeatures, seed: u64, stats: GaussianStats) -> VisualFeatures {
    let mut rng = stream(seed, "gaussian_features", 0);
    VisualFeatures {
        features: resample(&visual.features, stats, &mut rng),
        spatial: visual.spatial.clone(),
        count: visual.count,
    }
}

fn resample(features: &Tensor, stats: GaussianStats, rng: &mut impl rand::Rng) -> Tensor {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 {
        return features.clone();
    }
    let (mean, std) = moments(features);
    let std = match stats {
        GaussianStats::PerDimension => std,
        GaussianStats::ScalarStd => {
            let data = features.data();
            let var = (0..n * d).map(|i| (data[i] - mean[i % d]).powi(2)).sum::<f64>() / (n * d) as f64;
            vec![var.sqrt(); d]
        }
    };
    let mut out = Tensor::zeros(&[n, d]);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        *v = mean[i % d] + std[i % d] * z;
    }
    out
}

/// Per-column mean and population standard deviation of a `[n, d]` tensor.
pub fn moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(t.row(r)) {
            *m += x / n as f64;
        }
    }
    for r in 0..n {
        for ((v, m), x) in var.iter_mut().zip(&mean).zip(t.row(r)) {
            *v += (x - m).powi(2) / n as f64;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Applies `mode` to each example. Rewrites are idempotent: an example that
/// already carries the rewrite is left alone. Gaussian draws are keyed by
/// question id, so one question gets the same features in every language.
pub fn apply_ablation(
    examples: &[Example],
    mode: AblationMode,
    seed: u64,
    stats: GaussianStats,
) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            match mode {
                AblationMode::Identity => {}
                AblationMode::QuestionMarkOnly => e.remove_text(),
                AblationMode::ZeroVisual => e.zero_visual(),
                AblationMode::GaussianVisual => {
                    if e.visual_mode == VisualMode::Zeroed {
                        return Err(CoreError::Config(format!("question {}: cannot resample zeroed features", e.qid)));
                    }
                    if e.visual_mode == VisualMode::Original {
                        let mut rng = stream(seed, &format!("gaussian/{}", e.qid), 0);
                        e.features = resample(&e.features, stats, &mut rng);
                        e.visual_mode = VisualMode::Gaussian;
                    }
                }
            }
            Ok(e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{QType, SPATIAL_DIM};

    fn visual(rows: Vec<Vec<f64>>) -> VisualFeatures {
        let n = rows.len();
        VisualFeatures {
            features: Tensor::from_rows(&rows).unwrap(),
            spatial: Tensor::full(&[n, SPATIAL_DIM], 0.3),
            count: n,
        }
    }

    #[test]
    fn single_object_returns_mean() {
        let v = visual(vec![vec![0.5, -1.25, 3.0]]);
        for stats in [GaussianStats::PerDimension, GaussianStats::ScalarStd] {
            let g = gaussian_features(&v, 9, stats);
            assert!(g.features.bit_eq(&v.features));
        }
    }

    #[test]
    fn seeded() {
        let v = visual(vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 0.5]]);
        let a = gaussian_features(&v, 4, GaussianStats::PerDimension);
        assert!(a.features.bit_eq(&gaussian_features(&v, 4, GaussianStats::PerDimension).features));
        assert!(!a.features.bit_eq(&gaussian_features(&v, 5, GaussianStats::PerDimension).features));
        assert!(a.spatial.bit_eq(&v.spatial));
    }

    #[test]
    fn idempotent() {
        let e = Example {
            qid: "s1-q0".into(),
            language: "src".into(),
            qtype: QType::Query,
            tokens: vec![40, 41, 42],
            features: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap(),
            spatial: Tensor::full(&[2, SPATIAL_DIM], 0.1),
            count: 2,
            answer: 3,
            text_removed: false,
            visual_mode: VisualMode::Original,
        };
        for mode in [
            AblationMode::Identity,
            AblationMode::QuestionMarkOnly,
            AblationMode::ZeroVisual,
            AblationMode::GaussianVisual,
        ] {
            let once = apply_ablation(std::slice::from_ref(&e), mode, 1, GaussianStats::PerDimension).unwrap();
            let twice = apply_ablation(&once, mode, 1, GaussianStats::PerDimension).unwrap();
            assert_eq!(once, twice, "{mode:?}");
        }
    }
}
