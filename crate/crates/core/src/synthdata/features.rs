use rand_distr::{Distribution, Normal};
use xvqa_nn::init::normal;
use xvqa_nn::rng::stream;
use xvqa_nn::Tensor;

use super::{Attr, Scene};

/// (x, y, w, h, w·h)
pub const SPATIAL_DIM: usize = 5;

/// One fixed random embedding table per attribute, shape `[values, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeEmbeddings {
    pub dim: usize,
    pub tables: Vec<Tensor>,
}

impl AttributeEmbeddings {
    pub fn new(seed: u64, dim: usize) -> Self {
        let tables = Attr::ALL
            .iter()
            .map(|a| normal(&[a.cardinality(), dim], 0.5, &mut stream(seed, "attr_embedding", a.index() as u64)))
            .collect();
        Self { dim, tables }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// `[objects, d_v]`
    pub features: Tensor,
    /// `[objects, SPATIAL_DIM]`
    pub spatial: Tensor,
    pub count: usize,
}

/// Per-object feature = sum of the object's attribute embeddings plus
/// Gaussian noise with standard deviation `sigma`. Deterministic in
/// `(scene, noise_seed)`.
pub fn featurize_scene(scene: &Scene, emb: &AttributeEmbeddings, sigma: f64, noise_seed: u64) -> VisualFeatures {
    let n = scene.objects.len();
    let d = emb.dim;
    let mut rng = stream(noise_seed, "feature_noise", scene.scene_id);
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut feats = Vec::with_capacity(n * d);
    let mut spatial = Vec::with_capacity(n * SPATIAL_DIM);
    for o in &scene.objects {
        for j in 0..d {
            let mut v: f64 = Attr::ALL.iter().map(|&a| emb.tables[a.index()].get2(o.get(a) as usize, j)).sum();
            if sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            feats.push(v);
        }
        let [x, y, w, h] = o.bbox;
        spatial.extend_from_slice(&[x, y, w, h, w * h]);
    }
    VisualFeatures {
        features: Tensor::new(vec![n, d], feats).expect("finite features"),
        spatial: Tensor::new(vec![n, SPATIAL_DIM], spatial).expect("finite spatial"),
        count: n,
    }
}
