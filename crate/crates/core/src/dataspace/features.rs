use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::BBox;
use super::scene::Scene;
use crate::error::{Result, VsdError};
use crate::numerics::Tensor;

/// Per-image region feature matrix `[n_regions, d_v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFeatures {
    pub features: Tensor,
}

impl RegionFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(VsdError::InvalidInput(format!(
                "region features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if let Some(i) = features.first_non_finite() {
            return Err(VsdError::NonFinite {
                index: i,
                context: "region features".into(),
            });
        }
        Ok(RegionFeatures { features })
    }

    pub fn n_regions(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn region(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Layout of the synthetic region features.
///
/// Each region vector is `[noun hash (noun_dim) | attribute hash (attr_dim) |
/// weighted bbox (4) | weighted depth | nearest depth | coverage | background]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Regions per side; the image is split into `grid * grid` cells.
    pub grid: usize,
    pub noun_dim: usize,
    pub attr_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            grid: 3,
            noun_dim: 16,
            attr_dim: 8,
        }
    }
}

impl FeatureConfig {
    pub fn n_regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn dim(&self) -> usize {
        self.noun_dim + self.attr_dim + 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.noun_dim == 0 {
            return Err(VsdError::Config(format!("invalid feature layout {self:?}")));
        }
        Ok(())
    }

    pub fn background_vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        v[self.dim() - 1] = 1.0;
        v
    }

    fn cell(&self, i: usize) -> BBox {
        let s = 1.0 / self.grid as f64;
        let (r, c) = (i / self.grid, i % self.grid);
        BBox {
            x_min: c as f64 * s,
            y_min: r as f64 * s,
            x_max: (c + 1) as f64 * s,
            y_max: (r + 1) as f64 * s,
        }
    }
}

/// Deterministic unit-norm embedding of `word`, derived from its SHA-256
/// digest so it is stable across platforms and runs.
pub fn hash_embedding(word: &str, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut block = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(word.as_bytes());
        h.update(block.to_le_bytes());
        let digest = h.finalize();
        for pair in digest.chunks(2) {
            if out.len() == dim {
                break;
            }
            let v = u16::from_le_bytes([pair[0], pair[1]]) as f64 / 65535.0;
            out.push(2.0 * v - 1.0);
        }
        block += 1;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Pools the scene's objects into a grid of region vectors. Objects
/// contribute to a region in proportion to the fraction of the region they
/// cover; a region no object touches gets the background vector.
pub fn render_region_features(scene: &Scene, config: &FeatureConfig) -> Result<RegionFeatures> {
    config.validate()?;
    let (nd, ad) = (config.noun_dim, config.attr_dim);
    let dim = config.dim();
    let nouns: Vec<Vec<f64>> = scene.objects.iter().map(|o| hash_embedding(&o.noun, nd)).collect();
    let attrs: Vec<Option<Vec<f64>>> = scene
        .objects
        .iter()
        .map(|o| o.attribute.as_ref().filter(|_| ad > 0).map(|a| hash_embedding(a, ad)))
        .collect();

    let mut data = Vec::with_capacity(config.n_regions() * dim);
    for r in 0..config.n_regions() {
        let cell = config.cell(r);
        let weights: Vec<(usize, f64)> = scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, o.bbox.intersection_area(&cell) / cell.area()))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        if weights.is_empty() {
            data.extend(config.background_vector());
            continue;
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut v = vec![0.0; dim];
        for &(i, w) in &weights {
            let o = &scene.objects[i];
            for (k, e) in nouns[i].iter().enumerate() {
                v[k] += w * e;
            }
            if let Some(a) = &attrs[i] {
                for (k, e) in a.iter().enumerate() {
                    v[nd + k] += w * e;
                }
            }
            for (k, c) in o.bbox.to_array().iter().enumerate() {
                v[nd + ad + k] += w * c / total;
            }
            v[nd + ad + 4] += w * o.depth / total;
        }
        v[nd + ad + 5] = weights
            .iter()
            .map(|&(i, _)| scene.objects[i].depth)
            .fold(f64::INFINITY, f64::min);
        v[nd + ad + 6] = total.min(1.0);
        data.extend(v);
    }
    RegionFeatures::new(Tensor::matrix(config.n_regions(), dim, data)?)
}
