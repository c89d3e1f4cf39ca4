use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::tensor::{checksum, SeededRng, Tensor};

/// Per-token linear map `d → p²` read out as one depth per patch pixel.
///
/// Depth is `d_min + (d_max − d_min) · σ(z)`, with `σ(z) = exp(−softplus(−z))`.
#[derive(Clone, Debug)]
pub struct DepthHead {
    pub weight: Tensor,
    pub bias: Tensor,
    patch: usize,
    depth_min: f64,
    depth_max: f64,
}

impl DepthHead {
    pub fn new(rng: &mut SeededRng, dim: usize, patch: usize, depth_min: f64, depth_max: f64) -> Result<Self> {
        let out = patch * patch;
        let bound = 1.0 / (dim as f64).sqrt();
        let weight = Tensor::param(rng.uniform_vec(out * dim, -bound, bound), &[out, dim])?;
        let bias = Tensor::param(vec![0.0; out], &[out])?;
        Self::from_parts(weight, bias, patch, depth_min, depth_max)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, patch: usize, depth_min: f64, depth_max: f64) -> Result<Self> {
        let out = patch * patch;
        if weight.shape().len() != 2 || weight.shape()[0] != out || bias.shape() != [out] {
            return Err(Error::Dimension {
                op: "DepthHead",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if !(depth_min > 0.0 && depth_min < depth_max) {
            return Err(Error::config("depth.depth_min", "need 0 < depth_min < depth_max"));
        }
        Ok(Self {
            weight,
            bias,
            patch,
            depth_min,
            depth_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn depth_range(&self) -> (f64, f64) {
        (self.depth_min, self.depth_max)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![("head.weight".into(), self.weight.clone()), ("head.bias".into(), self.bias.clone())]
    }

    pub fn checksum(&self) -> String {
        checksum([&self.weight, &self.bias])
    }

    /// Token states `[T, d]` to depths `[T, p²]` in patch layout.
    pub fn forward(&self, states: &Tensor) -> Result<Tensor> {
        let z = states.matmul_t(&self.weight)?.add_bias(&self.bias)?;
        let unit = z.neg().softplus().neg().exp();
        Ok(unit.scalar_mul(self.depth_max - self.depth_min).add_scalar(self.depth_min))
    }

    /// Dense depth per crop, `[N, H', W']` row-major.
    pub fn predict_crops(&self, encoder: &ImageEncoder, crops: &Tensor) -> Result<Vec<f64>> {
        let &[n, h, w, _] = crops.shape() else {
            return Err(Error::Dimension {
                op: "predict_crops",
                lhs: crops.shape().to_vec(),
                rhs: vec![4],
            });
        };
        let states = encoder.token_states(crops, None)?;
        let patches = self.forward(&states)?;
        let dense = from_patch_layout(&patches.data(), n, h, w, self.patch);
        Ok(dense)
    }
}

/// `[N, H, W]` maps to the `[N·T, p²]` order the head emits.
pub fn to_patch_layout(dense: &[f64], n: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dense.len());
    for ni in 0..n {
        for py in 0..h / p {
            for px in 0..w / p {
                for y in 0..p {
                    let base = (ni * h + py * p + y) * w + px * p;
                    out.extend_from_slice(&dense[base..base + p]);
                }
            }
        }
    }
    out
}

pub fn from_patch_layout(patches: &[f64], n: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; patches.len()];
    let mut k = 0;
    for ni in 0..n {
        for py in 0..h / p {
            for px in 0..w / p {
                for y in 0..p {
                    let base = (ni * h + py * p + y) * w + px * p;
                    out[base..base + p].copy_from_slice(&patches[k..k + p]);
                    k += p;
                }
            }
        }
    }
    out
}
