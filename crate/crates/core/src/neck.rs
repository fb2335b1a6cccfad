//! Pyramid fusion necks, the stride-16 object context block and the evidence
//! decoder with soft aggregation.

use rayon::prelude::*;

use crate::io::{FeatureMap, FeaturePyramid, Grid, ProbMap, STRIDES};
use crate::matching::InstanceGate;
use crate::ops::{add_scaled, derive_seed, downsample2, rng, gaussian_vec, softmax_inplace, upsample2, Linear, dot};
use crate::{Error, Result};

/// Lateral 1×1 maps to the common neck width plus the top-down fusion weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnWeights {
    /// One lateral per stride (4, 8, 16).
    pub laterals: [Linear; 3],
    pub fusion: f32,
}

impl FpnWeights {
    /// Identity-padded laterals (truncating or zero-filling channels).
    pub fn identity(in_channels: [usize; 3], width: usize, fusion: f32) -> Self {
        Self {
            laterals: in_channels.map(|c| Linear::identity(c, width)),
            fusion,
        }
    }
}

fn lateral_level(level: &FeatureMap, lateral: &Linear) -> Result<FeatureMap> {
    lateral.apply(level)
}

/// Projects every level to the neck width without any cross-level fusion.
pub fn apply_laterals(pyr: &FeaturePyramid, weights: &FpnWeights) -> Result<FeaturePyramid> {
    let [a, b, c] = pyr.levels();
    FeaturePyramid::new([
        lateral_level(a, &weights.laterals[0])?,
        lateral_level(b, &weights.laterals[1])?,
        lateral_level(c, &weights.laterals[2])?,
    ])
}

/// Top-down path: `out16 = L(in16)`, `out8 = L(in8) + λ·up(out16)`,
/// `out4 = L(in4) + λ·up(out8)` with nearest-neighbour upsampling.
pub fn fpn_topdown(pyr: &FeaturePyramid, weights: &FpnWeights) -> Result<FeaturePyramid> {
    let lat = apply_laterals(pyr, weights)?.into_levels();
    let [l4, l8, l16] = lat;
    let out16 = l16;
    let up16 = upsample2(&out16, l8.height(), l8.width(), 8);
    let out8 = add_scaled(&l8, &up16, weights.fusion)?;
    let up8 = upsample2(&out8, l4.height(), l4.width(), 4);
    let out4 = add_scaled(&l4, &up8, weights.fusion)?;
    FeaturePyramid::new([out4, out8, out16])
}

/// Bottom-up path: `out4 = in4`, `out8 = in8 + μ·down(out4)`,
/// `out16 = in16 + μ·down(out8)` with 2×2 mean pooling.
pub fn pan_bottomup(pyr: &FeaturePyramid, fusion: f32) -> Result<FeaturePyramid> {
    let [in4, in8, in16] = pyr.levels();
    let out4 = in4.clone();
    let out8 = add_scaled(in8, &downsample2(&out4, 8), fusion)?;
    let out16 = add_scaled(in16, &downsample2(&out8, 16), fusion)?;
    FeaturePyramid::new([out4, out8, out16])
}

/// Query/key/value/output maps of the object context block.
#[derive(Clone, Debug, PartialEq)]
pub struct OcWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// Maps `[x, context]` (2C) back to C channels.
    pub output: Linear,
}

impl OcWeights {
    /// Shared seeded query/key projection, identity value, and an output
    /// that blends `(1 − blend)·x + blend·context`.
    pub fn seeded(channels: usize, key_channels: usize, seed: u64, gain: f32, blend: f32) -> Self {
        let query = Linear::seeded(channels, key_channels, derive_seed(seed, 11), gain);
        let key = query.clone();
        let value = Linear::identity(channels, channels);
        let mut output = Linear::zeros(2 * channels, channels);
        for c in 0..channels {
            output.weight[c * 2 * channels + c] = 1.0 - blend;
            output.weight[c * 2 * channels + channels + c] = blend;
        }
        Self {
            query,
            key,
            value,
            output,
        }
    }
}

fn oc_projections(feat: &FeatureMap, weights: &OcWeights) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    if weights.query.out_dim != weights.key.out_dim {
        return Err(Error::Shape("object context query and key widths differ".into()));
    }
    Ok((
        weights.query.apply(feat)?.to_cell_major(),
        weights.key.apply(feat)?.to_cell_major(),
        weights.value.apply(feat)?.to_cell_major(),
    ))
}

fn oc_row(q: &[f32], keys: &[f32], dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut row: Vec<f32> = keys.chunks_exact(dim).map(|k| dot(q, k) * scale).collect();
    softmax_inplace(&mut row);
    row
}

/// Attention matrix of the object context block, one row per cell.
pub fn object_context_attention(feat: &FeatureMap, weights: &OcWeights) -> Result<Vec<Vec<f32>>> {
    let (q, k, _) = oc_projections(feat, weights)?;
    let d = weights.query.out_dim;
    Ok((0..feat.cells())
        .into_par_iter()
        .map(|p| oc_row(&q[p * d..(p + 1) * d], &k, d))
        .collect())
}

/// Self-attention over all stride-16 cells: each cell gathers a context
/// vector from cells with similar embeddings, then `[x, context]` is mapped
/// back to the input width.
pub fn object_context(feat: &FeatureMap, weights: &OcWeights) -> Result<FeatureMap> {
    let c = feat.channels();
    if weights.output.in_dim != c + weights.value.out_dim || weights.output.out_dim != c {
        return Err(Error::Shape("object context output map does not fit".into()));
    }
    let (q, k, v) = oc_projections(feat, weights)?;
    let d = weights.query.out_dim;
    let cv = weights.value.out_dim;
    let n = feat.cells();
    let x = feat.to_cell_major();
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let a = oc_row(&q[p * d..(p + 1) * d], &k, d);
            let mut ctx = vec![0.0f32; cv];
            for (w, vals) in a.iter().zip(v.chunks_exact(cv)) {
                for (o, &s) in ctx.iter_mut().zip(vals) {
                    *o += w * s;
                }
            }
            let mut joined = x[p * c..(p + 1) * c].to_vec();
            joined.extend(ctx);
            weights.output.apply_vec(&joined)
        })
        .collect();
    let mut data = vec![0.0f32; c * n];
    for (p, row) in rows.iter().enumerate() {
        for (ch, &val) in row.iter().enumerate() {
            data[ch * n + p] = val;
        }
    }
    FeatureMap::new(c, feat.height(), feat.width(), feat.stride(), data)
}

/// Signed weights of the linear evidence decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderWeights {
    pub stm: f32,
    pub fg_global: f32,
    pub bg_global: f32,
    pub fg_local: f32,
    pub bg_local: f32,
    pub prev: f32,
    pub feat: f32,
    pub bias: f32,
}

impl Default for DecoderWeights {
    fn default() -> Self {
        Self {
            stm: 2.0,
            fg_global: 2.0,
            bg_global: 1.0,
            fg_local: 2.0,
            bg_local: 1.0,
            prev: 1.0,
            feat: 0.0,
            bias: -1.0,
        }
    }
}

impl DecoderWeights {
    pub const KEYS: [&'static str; 8] = [
        "w_stm",
        "w_fg_global",
        "w_bg_global",
        "w_fg_local",
        "w_bg_local",
        "w_prev",
        "w_feat",
        "decoder_bias",
    ];

    pub fn as_array(&self) -> [f32; 8] {
        [
            self.stm,
            self.fg_global,
            self.bg_global,
            self.fg_local,
            self.bg_local,
            self.prev,
            self.feat,
            self.bias,
        ]
    }

    pub fn from_array(a: [f32; 8]) -> Self {
        let [stm, fg_global, bg_global, fg_local, bg_local, prev, feat, bias] = a;
        Self {
            stm,
            fg_global,
            bg_global,
            fg_local,
            bg_local,
            prev,
            feat,
            bias,
        }
    }

    pub fn as_array_mut(&mut self) -> [&mut f32; 8] {
        [
            &mut self.stm,
            &mut self.fg_global,
            &mut self.bg_global,
            &mut self.fg_local,
            &mut self.bg_local,
            &mut self.prev,
            &mut self.feat,
            &mut self.bias,
        ]
    }
}

/// Seeded unit vector reducing gated neck features to a scalar.
pub fn readout_vector(channels: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(derive_seed(seed, 21));
    let v = gaussian_vec(&mut r, channels, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Aligned stride-16 evidence for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceStack {
    pub neck: FeatureMap,
    pub stm: Grid,
    pub fg_global: Grid,
    pub bg_global: Grid,
    pub fg_local: Grid,
    pub bg_local: Grid,
    pub prev: Grid,
}

impl EvidenceStack {
    /// Stack with neutral evidence (all distances 1, scores 0).
    pub fn neutral(neck: FeatureMap) -> Self {
        let (h, w) = (neck.height(), neck.width());
        Self {
            neck,
            stm: Grid::new(h, w, 0.0),
            fg_global: Grid::new(h, w, 1.0),
            bg_global: Grid::new(h, w, 1.0),
            fg_local: Grid::new(h, w, 1.0),
            bg_local: Grid::new(h, w, 1.0),
            prev: Grid::new(h, w, 0.0),
        }
    }

    fn grids(&self) -> [&Grid; 6] {
        [
            &self.stm,
            &self.fg_global,
            &self.bg_global,
            &self.fg_local,
            &self.bg_local,
            &self.prev,
        ]
    }
}

/// Per-cell object logit as a signed linear combination of the evidence.
pub fn decode_logits(
    stack: &EvidenceStack,
    gate: &InstanceGate,
    weights: &DecoderWeights,
    readout: &[f32],
) -> Result<Grid> {
    let (h, w) = (stack.neck.height(), stack.neck.width());
    if stack.grids().iter().any(|g| g.height() != h || g.width() != w) {
        return Err(Error::Shape("evidence stack is not aligned".into()));
    }
    if gate.gains.len() != stack.neck.channels() || readout.len() != stack.neck.channels() {
        return Err(Error::Shape("gate or readout width differs from neck".into()));
    }
    let n = h * w;
    let mut out = Grid::new(h, w, 0.0);
    for p in 0..n {
        let mut z = weights.bias
            + weights.stm * stack.stm.data()[p]
            - weights.fg_global * stack.fg_global.data()[p]
            + weights.bg_global * stack.bg_global.data()[p]
            - weights.fg_local * stack.fg_local.data()[p]
            + weights.bg_local * stack.bg_local.data()[p]
            + weights.prev * stack.prev.data()[p];
        if weights.feat != 0.0 {
            let mut s = 0.0;
            for c in 0..stack.neck.channels() {
                s += gate.gains[c] * stack.neck.plane(c)[p] * readout[c];
            }
            z += weights.feat * s;
        }
        out.data_mut()[p] = z;
    }
    Ok(out)
}

/// Bilinear upsampling of a stride-`stride` map to `height × width` pixels,
/// sampling at pixel centers.
pub fn upsample_logits(grid: &Grid, stride: usize, height: usize, width: usize) -> Grid {
    let taps = |dst: usize, src_len: usize| {
        let pos = ((dst as f64 + 0.5) / stride as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (pos - i0 as f64).clamp(0.0, 1.0) as f32)
    };
    let ys: Vec<_> = (0..height).map(|y| taps(y, grid.height())).collect();
    let xs: Vec<_> = (0..width).map(|x| taps(x, grid.width())).collect();
    let mut data = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bottom = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::from_vec(height, width, data).expect("sized by construction")
}

/// Softmax over `{background (logit 0)} ∪ objects` at every pixel.
pub fn softmax_with_background(logits: &[Grid], ids: &[u8]) -> Result<ProbMap> {
    if logits.len() != ids.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit maps for {} objects",
            logits.len(),
            ids.len()
        )));
    }
    let (h, w) = (logits[0].height(), logits[0].width());
    if logits.iter().any(|g| g.height() != h || g.width() != w) {
        return Err(Error::Shape("logit maps differ in size".into()));
    }
    let n = h * w;
    let k = ids.len() + 1;
    let mut probs = vec![0.0f32; k * n];
    let mut row = vec![0.0f32; k];
    for p in 0..n {
        row[0] = 0.0;
        for (o, g) in logits.iter().enumerate() {
            row[o + 1] = g.data()[p];
        }
        softmax_inplace(&mut row);
        for (c, &v) in row.iter().enumerate() {
            probs[c * n + p] = v;
        }
    }
    ProbMap::new(h, w, ids.to_vec(), probs)
}

/// Upsamples stride-16 object logits to full resolution and normalises
/// them against a zero background logit.
pub fn soft_aggregate(logits: &[Grid], ids: &[u8], height: usize, width: usize) -> Result<ProbMap> {
    let stride = STRIDES[2];
    let full: Vec<Grid> = logits
        .iter()
        .map(|g| upsample_logits(g, stride, height, width))
        .collect();
    softmax_with_background(&full, ids)
}
