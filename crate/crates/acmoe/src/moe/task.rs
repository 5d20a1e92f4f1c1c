//! Synthetic regression task with ground-truth expert structure: tokens
//! come from a Gaussian mixture whose components are tight on
//! component-specific feature subsets, and the regression target applies a
//! component-conditional linear map. A router that recovers the mixture
//! lets each expert specialize on one linear map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmTaskSpec {
    pub num_clusters: usize,
    pub dim: usize,
    pub out_dim: usize,
    /// Magnitude of cluster means along their tight features.
    pub mean_scale: f64,
    /// Mean magnitude on loose features, as a fraction of `mean_scale`.
    pub loose_mean_scale: f64,
    /// Fraction of features each cluster is tight on.
    pub tight_fraction: f64,
    /// Assign tight features in disjoint round-robin blocks instead of
    /// independent random subsets.
    pub disjoint_tight: bool,
    pub tight_sigma: f64,
    pub loose_sigma: f64,
    /// Additive noise on the regression target.
    pub target_noise: f64,
}

impl Default for GmmTaskSpec {
    fn default() -> Self {
        GmmTaskSpec {
            num_clusters: 8,
            dim: 16,
            out_dim: 16,
            mean_scale: 3.0,
            loose_mean_scale: 0.2,
            tight_fraction: 0.25,
            disjoint_tight: false,
            tight_sigma: 0.3,
            loose_sigma: 1.5,
            target_noise: 0.05,
        }
    }
}

impl GmmTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("task dimensions must be positive"));
        }
        if !(self.tight_fraction > 0.0 && self.tight_fraction <= 1.0) {
            return Err(Error::invalid("tight_fraction must be in (0, 1]"));
        }
        if self.tight_sigma <= 0.0 || self.loose_sigma <= 0.0 {
            return Err(Error::invalid("sigmas must be positive"));
        }
        Ok(())
    }
}

/// Sampled batch: inputs, targets, and the generating component per token.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub clusters: Vec<usize>,
}

/// Frozen task geometry: means, per-feature sigmas, and per-cluster maps.
#[derive(Debug, Clone)]
pub struct GmmTask {
    spec: GmmTaskSpec,
    means: Matrix,
    sigmas: Matrix,
    maps: Vec<Matrix>,
}

impl GmmTask {
    /// Deterministic geometry from the stream. Each cluster separates from
    /// the others mainly along its own tight features, matching the regime
    /// in which the transformed router has something to exploit.
    pub fn generate(spec: &GmmTaskSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let c = spec.num_clusters;
        let d = spec.dim;
        let tight_per_cluster = ((spec.tight_fraction * d as f64).round() as usize).clamp(1, d);

        let mut means = Matrix::zeros(c, d);
        let mut sigmas = Matrix::zeros(c, d);
        let mut maps = Vec::with_capacity(c);
        let block: Vec<usize> = (0..d).collect();
        for k in 0..c {
            // Tight feature subset: either a disjoint round-robin block or
            // a random shuffle per cluster.
            let tight: Vec<usize> = if spec.disjoint_tight {
                (0..tight_per_cluster).map(|t| block[(k * tight_per_cluster + t) % d]).collect()
            } else {
                let mut order: Vec<usize> = (0..d).collect();
                for i in (1..d).rev() {
                    let j = rng.next_usize(i + 1);
                    order.swap(i, j);
                }
                order[..tight_per_cluster].to_vec()
            };
            let tight = &tight[..];
            let srow = sigmas.row_mut(k);
            for q in 0..d {
                srow[q] = spec.loose_sigma;
            }
            for &q in tight {
                srow[q] = spec.tight_sigma;
            }
            let mrow = means.row_mut(k);
            for q in 0..d {
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                let mag = rng.next_range(0.8, 1.2);
                // Separation mass concentrates on the tight features.
                let scale = if tight.contains(&q) {
                    spec.mean_scale
                } else {
                    spec.loose_mean_scale * spec.mean_scale
                };
                mrow[q] = sign * mag * scale;
            }
            let mut map = Matrix::zeros(d, spec.out_dim);
            let scale = 1.0 / (d as f64).sqrt();
            for v in map.data_mut() {
                *v = rng.next_normal() * scale;
            }
            maps.push(map);
        }
        Ok(GmmTask { spec: spec.clone(), means, sigmas, maps })
    }

    pub fn spec(&self) -> &GmmTaskSpec {
        &self.spec
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Draws `n` tokens with their targets y = x A_c + noise.
    pub fn sample_batch(&self, rng: &mut RngStream, n: usize) -> TaskBatch {
        let d = self.spec.dim;
        let o = self.spec.out_dim;
        let c = self.spec.num_clusters;
        let mut inputs = Matrix::zeros(n, d);
        let mut targets = Matrix::zeros(n, o);
        let mut clusters = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.next_usize(c);
            clusters.push(k);
            let x = inputs.row_mut(i);
            for q in 0..d {
                x[q] = self.means.get(k, q) + self.sigmas.get(k, q) * rng.next_normal();
            }
            let map = &self.maps[k];
            let y = targets.row_mut(i);
            for out in 0..o {
                let mut v = 0.0;
                for q in 0..d {
                    v += inputs.get(i, q) * map.get(q, out);
                }
                y[out] = v + self.spec.target_noise * rng.next_normal();
            }
        }
        TaskBatch { inputs, targets, clusters }
    }
}

/// Adds iid Gaussian feature noise of the given sigma to a copy of `x`.
pub fn contaminate(x: &Matrix, sigma: f64, rng: &mut RngStream) -> Matrix {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        *v += sigma * rng.next_normal();
    }
    out
}
