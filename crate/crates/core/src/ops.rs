//! Small numeric building blocks shared by the pipeline stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::io::FeatureMap;
use crate::{Error, Result};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag so that independent weight sets never
/// share a random stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place max-shifted softmax.
pub fn softmax_inplace(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A per-pixel affine map (a 1×1 convolution): `out = W·in + b`, with `W`
/// stored row-major as `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "linear {in_dim}->{out_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Identity on the shared channels, zero elsewhere.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        for i in 0..in_dim.min(out_dim) {
            l.weight[i * in_dim + i] = 1.0;
        }
        l
    }

    /// Gaussian weights with standard deviation `gain / sqrt(in_dim)`, zero bias.
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64, gain: f32) -> Self {
        let mut r = rng(seed);
        let weight = gaussian_vec(&mut r, in_dim * out_dim, gain / (in_dim as f32).sqrt());
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, o: usize) -> &[f32] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn apply_vec(&self, x: &[f32]) -> Vec<f32> {
        (0..self.out_dim)
            .map(|o| dot(self.row(o), x) + self.bias[o])
            .collect()
    }

    /// Applies the map at every cell of a channel-major feature map.
    pub fn apply(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels() != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects {} channels, map has {}",
                self.in_dim,
                input.channels()
            )));
        }
        let n = input.cells();
        let mut out = vec![0.0f32; self.out_dim * n];
        for o in 0..self.out_dim {
            let dst = &mut out[o * n..(o + 1) * n];
            dst.fill(self.bias[o]);
            for (i, &w) in self.row(o).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(input.plane(i)) {
                    *d += w * s;
                }
            }
        }
        FeatureMap::new(self.out_dim, input.height(), input.width(), input.stride(), out)
    }
}

/// Nearest-neighbour 2× upsampling cropped to `height × width` at `stride`.
pub fn upsample2(map: &FeatureMap, height: usize, width: usize, stride: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(map.channels(), height, width, stride);
    for c in 0..map.channels() {
        let src = map.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..height {
            let sy = (y / 2).min(map.height() - 1);
            for x in 0..width {
                let sx = (x / 2).min(map.width() - 1);
                dst[y * width + x] = src[sy * map.width() + sx];
            }
        }
    }
    out
}

/// 2×2 mean pooling; border windows average only the cells that exist.
pub fn downsample2(map: &FeatureMap, stride: usize) -> FeatureMap {
    let height = map.height().div_ceil(2);
    let width = map.width().div_ceil(2);
    let mut out = FeatureMap::zeros(map.channels(), height, width, stride);
    for c in 0..map.channels() {
        let src = map.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..height {
            for x in 0..width {
                let mut sum = 0.0;
                let mut count = 0;
                for sy in 2 * y..(2 * y + 2).min(map.height()) {
                    for sx in 2 * x..(2 * x + 2).min(map.width()) {
                        sum += src[sy * map.width() + sx];
                        count += 1;
                    }
                }
                dst[y * width + x] = sum / count as f32;
            }
        }
    }
    out
}

/// Elementwise sum `a + scale·b`.
pub fn add_scaled(a: &FeatureMap, b: &FeatureMap, scale: f32) -> Result<FeatureMap> {
    if a.channels() != b.channels() || !a.same_spatial(b) {
        return Err(Error::Shape(format!(
            "cannot add {}x{}x{} and {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + scale * y)
        .collect();
    FeatureMap::new(a.channels(), a.height(), a.width(), a.stride(), data)
}
