//! Training-free feature extractor producing a three-level pyramid.
//!
//! Each level holds, per cell: mean RGB, mean horizontal and vertical
//! luminance-gradient magnitudes, normalised cell-center coordinates scaled
//! by the position weight, then seeded unit-norm projections of those seven
//! base channels (plus a nonzero offset) up to the requested width.

use crate::io::{FeatureMap, FeaturePyramid, Grid, ImageFrame, LabelMask, STRIDES};
use crate::ops::{derive_seed, gaussian_vec, rng};
use crate::{Error, Result};

const BASE_CHANNELS: usize = 7;

/// Smallest level width: the base channels plus at least one projection.
pub const MIN_CHANNELS: usize = BASE_CHANNELS + 1;

// luminance weights in thousandths so that gradient sums stay integral
const LUMA: [u32; 3] = [299, 587, 114];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderSpec {
    pub channels: [usize; 3],
    pub seed: u64,
    pub include_position: bool,
    pub position_weight: f32,
    /// Multiplier applied to RGB and gradients after scaling to [0, 1].
    pub color_scale: f32,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            channels: [16, 24, 32],
            seed: 7,
            include_position: true,
            position_weight: 1.0,
            color_scale: 2.5,
        }
    }
}

impl EmbedderSpec {
    pub fn from_config(config: &crate::PipelineConfig) -> Self {
        Self {
            channels: config.channels,
            seed: config.embed_seed,
            include_position: config.position_weight != 0.0,
            position_weight: config.position_weight,
            color_scale: config.color_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < MIN_CHANNELS) {
            return Err(Error::Invalid(format!(
                "embedder levels need at least {MIN_CHANNELS} channels, got {:?}",
                self.channels
            )));
        }
        if !self.position_weight.is_finite() || !self.color_scale.is_finite() {
            return Err(Error::Invalid("embedder weights must be finite".into()));
        }
        Ok(())
    }
}

struct Projection {
    rows: Vec<[f32; BASE_CHANNELS]>,
    offsets: Vec<f32>,
}

impl Projection {
    fn seeded(count: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut rows = Vec::with_capacity(count);
        let mut offsets = Vec::with_capacity(count);
        for _ in 0..count {
            let v = gaussian_vec(&mut r, BASE_CHANNELS + 1, 1.0);
            let norm = v[..BASE_CHANNELS].iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            let mut row = [0.0; BASE_CHANNELS];
            for (dst, src) in row.iter_mut().zip(&v) {
                *dst = src / norm;
            }
            rows.push(row);
            // offset magnitude in [0.1, 0.5) keeps every feature vector nonzero
            let o = v[BASE_CHANNELS];
            offsets.push(o.signum() * (0.1 + 0.4 * (o.abs() / (1.0 + o.abs()))));
        }
        Self { rows, offsets }
    }
}

/// Integral per-pixel base quantities shared by all levels.
struct PixelBase {
    width: usize,
    height: usize,
    rgb: Vec<[u32; 3]>,
    grad: Vec<[u32; 2]>,
}

impl PixelBase {
    fn new(frame: &ImageFrame) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let luma: Vec<i64> = (0..w * h)
            .map(|i| {
                let p = frame.pixel(i % w, i / w);
                (0..3).map(|c| (p[c] as u32 * LUMA[c]) as i64).sum()
            })
            .collect();
        let mut rgb = Vec::with_capacity(w * h);
        let mut grad = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let p = frame.pixel(x, y);
                rgb.push([p[0] as u32, p[1] as u32, p[2] as u32]);
                // central differences with replicated borders
                let l = luma[y * w + x.saturating_sub(1)];
                let r = luma[y * w + (x + 1).min(w - 1)];
                let u = luma[y.saturating_sub(1) * w + x];
                let d = luma[(y + 1).min(h - 1) * w + x];
                grad.push([(r - l).unsigned_abs() as u32, (d - u).unsigned_abs() as u32]);
            }
        }
        Self {
            width: w,
            height: h,
            rgb,
            grad,
        }
    }
}

pub fn extract_pyramid(frame: &ImageFrame, spec: &EmbedderSpec) -> Result<FeaturePyramid> {
    spec.validate()?;
    let base = PixelBase::new(frame);
    let levels = [0, 1, 2].map(|i| extract_level(&base, spec, STRIDES[i], spec.channels[i]));
    FeaturePyramid::new(levels)
}

fn extract_level(base: &PixelBase, spec: &EmbedderSpec, stride: usize, channels: usize) -> FeatureMap {
    let (w, h) = (base.width, base.height);
    let (hs, ws) = (h.div_ceil(stride), w.div_ceil(stride));
    let cells = hs * ws;
    let projection = Projection::seeded(channels - BASE_CHANNELS, derive_seed(spec.seed, stride as u64));
    let color = spec.color_scale as f64 / 255.0;
    let gradient = spec.color_scale as f64 / (2.0 * 255.0 * 1000.0);
    let position = if spec.include_position {
        spec.position_weight as f64
    } else {
        0.0
    };

    let mut data = vec![0.0f32; channels * cells];
    for cy in 0..hs {
        let (y0, y1) = (cy * stride, ((cy + 1) * stride).min(h));
        for cx in 0..ws {
            let (x0, x1) = (cx * stride, ((cx + 1) * stride).min(w));
            let mut rgb = [0u64; 3];
            let mut grad = [0u64; 2];
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * w + x;
                    for c in 0..3 {
                        rgb[c] += base.rgb[i][c] as u64;
                    }
                    for c in 0..2 {
                        grad[c] += base.grad[i][c] as u64;
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let mut feat = [0.0f32; BASE_CHANNELS];
            for c in 0..3 {
                feat[c] = (rgb[c] as f64 / count * color) as f32;
            }
            for c in 0..2 {
                feat[3 + c] = (grad[c] as f64 / count * gradient) as f32;
            }
            feat[5] = (position * (x0 + x1) as f64 / (2.0 * w as f64)) as f32;
            feat[6] = (position * (y0 + y1) as f64 / (2.0 * h as f64)) as f32;

            let cell = cy * ws + cx;
            for (c, &v) in feat.iter().enumerate() {
                data[c * cells + cell] = v;
            }
            for (j, (row, offset)) in projection.rows.iter().zip(&projection.offsets).enumerate() {
                let v: f32 = row.iter().zip(&feat).map(|(a, b)| a * b).sum::<f32>() + offset;
                data[(BASE_CHANNELS + j) * cells + cell] = v;
            }
        }
    }
    FeatureMap::new(channels, hs, ws, stride, data).expect("embedder output is well formed")
}

/// Soft per-object occupancy at one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMasks {
    pub background: Grid,
    /// One map per requested object id, in the order given.
    pub objects: Vec<Grid>,
}

/// Fraction of each cell's pixels carrying each id.
pub fn downsample_mask(mask: &LabelMask, ids: &[u8], stride: usize) -> Result<SoftMasks> {
    if !STRIDES.contains(&stride) {
        return Err(Error::Invalid(format!("stride {stride} not in {STRIDES:?}")));
    }
    Ok(downsample_mask_any(mask, ids, stride))
}

pub(crate) fn downsample_mask_any(mask: &LabelMask, ids: &[u8], stride: usize) -> SoftMasks {
    let (w, h) = (mask.width(), mask.height());
    let (hs, ws) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut background = Grid::new(hs, ws, 0.0);
    let mut objects = vec![Grid::new(hs, ws, 0.0); ids.len()];
    let mut slot = [usize::MAX; 256];
    for (i, &id) in ids.iter().enumerate() {
        slot[id as usize] = i;
    }
    for cy in 0..hs {
        let (y0, y1) = (cy * stride, ((cy + 1) * stride).min(h));
        for cx in 0..ws {
            let (x0, x1) = (cx * stride, ((cx + 1) * stride).min(w));
            let mut counts = vec![0u32; ids.len()];
            let mut bg = 0u32;
            for y in y0..y1 {
                for x in x0..x1 {
                    let id = mask.get(x, y);
                    if id == 0 {
                        bg += 1;
                    } else if slot[id as usize] != usize::MAX {
                        counts[slot[id as usize]] += 1;
                    }
                }
            }
            let total = ((y1 - y0) * (x1 - x0)) as f32;
            background.set(cy, cx, bg as f32 / total);
            for (grid, &n) in objects.iter_mut().zip(&counts) {
                grid.set(cy, cx, n as f32 / total);
            }
        }
    }
    SoftMasks {
        background,
        objects,
    }
}
