//! Foreground/background pixel matching against the first frame (global) and
//! the previous frame (local window), plus the instance-level channel gate.

use crate::io::{FeatureMap, Grid, ImageFrame, LabelMask};
use crate::ops::{sigmoid, Linear};
use crate::{Error, Result};

/// Soft indicators at or above this value count as foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.5;

/// `1 − 2 / (1 + exp(‖p − q‖² + b))`, clamped to [0, 1].
pub fn pixel_distance(p: &[f32], q: &[f32], bias: f32) -> f32 {
    distance_from_sq(squared_distance(p, q), bias)
}

fn squared_distance(p: &[f32], q: &[f32]) -> f32 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn distance_from_sq(sq: f32, bias: f32) -> f32 {
    // 1 − 2/(1 + e^x) = tanh(x/2)
    let x = (sq as f64 + bias as f64) / 2.0;
    (x.tanh() as f32).clamp(0.0, 1.0)
}

/// Foreground and background nearest-neighbour distance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DistancePair {
    pub fg: Grid,
    pub bg: Grid,
}

/// The four matching maps of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMaps {
    pub fg_global: Grid,
    pub bg_global: Grid,
    pub fg_local: Grid,
    pub bg_local: Grid,
}

fn check(query: &FeatureMap, reference: &FeatureMap, indicator: &Grid) -> Result<()> {
    if query.channels() != reference.channels() {
        return Err(Error::Shape(format!(
            "query has {} channels, reference {}",
            query.channels(),
            reference.channels()
        )));
    }
    if reference.height() != indicator.height() || reference.width() != indicator.width() {
        return Err(Error::Shape("reference indicator does not match reference map".into()));
    }
    Ok(())
}

/// Shared kernel: for each query cell, the minimum squared distance to
/// foreground and background reference cells within Chebyshev `radius`
/// (`None` = whole map), converted to distances. Empty sets give 1.
fn nearest(
    query: &FeatureMap,
    reference: &FeatureMap,
    indicator: &Grid,
    radius: Option<usize>,
    bias: f32,
) -> Result<DistancePair> {
    check(query, reference, indicator)?;
    let q = query.to_cell_major();
    let r = reference.to_cell_major();
    let c = query.channels();
    let (qh, qw) = (query.height(), query.width());
    let (rh, rw) = (reference.height(), reference.width());
    let mut fg = Grid::new(qh, qw, 1.0);
    let mut bg = Grid::new(qh, qw, 1.0);
    for y in 0..qh {
        for x in 0..qw {
            let (ys, xs) = match radius {
                Some(rad) => (
                    y.saturating_sub(rad)..(y + rad + 1).min(rh),
                    x.saturating_sub(rad)..(x + rad + 1).min(rw),
                ),
                None => (0..rh, 0..rw),
            };
            let qv = &q[(y * qw + x) * c..(y * qw + x + 1) * c];
            let (mut best_fg, mut best_bg) = (f32::INFINITY, f32::INFINITY);
            for ry in ys {
                for rx in xs.clone() {
                    let cell = ry * rw + rx;
                    let sq = squared_distance(qv, &r[cell * c..(cell + 1) * c]);
                    if indicator.data()[cell] >= FOREGROUND_THRESHOLD {
                        best_fg = best_fg.min(sq);
                    } else {
                        best_bg = best_bg.min(sq);
                    }
                }
            }
            if best_fg.is_finite() {
                fg.set(y, x, distance_from_sq(best_fg, bias));
            }
            if best_bg.is_finite() {
                bg.set(y, x, distance_from_sq(best_bg, bias));
            }
        }
    }
    Ok(DistancePair { fg, bg })
}

/// Matching against every cell of the reference (first) frame.
pub fn match_global(
    query: &FeatureMap,
    reference: &FeatureMap,
    reference_indicator: &Grid,
    bias: f32,
) -> Result<DistancePair> {
    nearest(query, reference, reference_indicator, None, bias)
}

/// Matching against previous-frame cells within Chebyshev `radius`.
pub fn match_local(
    query: &FeatureMap,
    previous: &FeatureMap,
    previous_indicator: &Grid,
    radius: usize,
    bias: f32,
) -> Result<DistancePair> {
    nearest(query, previous, previous_indicator, Some(radius), bias)
}

/// Window sizes and scaling of [`pixel_refinement`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineParams {
    /// Chebyshev radius of the dense search, in pixels.
    pub radius: usize,
    /// Radius of the sparse (every second pixel) search used for pixels
    /// whose colour has no close match in the dense window.
    pub wide_radius: usize,
    /// Multiplier applied to RGB after scaling to [0, 1].
    pub color_scale: f32,
    pub bias: f32,
}

/// Squared colour distance above which a pixel counts as unmatched in the
/// dense window (distance 0.5 at zero bias).
const NOVEL_SQ: f32 = 1.0986123;

/// Full-resolution local matching on scaled RGB against the previous frame,
/// for every object at once. Returns `bg_local − fg_local` per object, a
/// signed boundary-refinement score in [−1, 1].
pub fn pixel_refinement(
    frame: &ImageFrame,
    previous: &ImageFrame,
    previous_mask: &LabelMask,
    ids: &[u8],
    params: RefineParams,
) -> Result<Vec<Grid>> {
    let (w, h) = (frame.width(), frame.height());
    if (previous.width(), previous.height()) != (w, h) || (previous_mask.width(), previous_mask.height()) != (w, h) {
        return Err(Error::Shape("refinement inputs differ in size".into()));
    }
    let k = ids.len() + 1;
    let mut slot = [0usize; 256];
    for (i, &id) in ids.iter().enumerate() {
        slot[id as usize] = i + 1;
    }
    let scale = params.color_scale / 255.0;
    let to_vec = |p: [u8; 3]| p.map(|v| v as f32 * scale);
    let prev: Vec<[f32; 3]> = (0..w * h).map(|i| to_vec(previous.pixel(i % w, i / w))).collect();
    let labels: Vec<usize> = previous_mask.ids().iter().map(|&id| slot[id as usize]).collect();
    let search = |pv: &[f32; 3], x: usize, y: usize, radius: usize, step: usize, mins: &mut [f32]| {
        mins.fill(f32::INFINITY);
        for ry in (y.saturating_sub(radius)..(y + radius + 1).min(h)).step_by(step) {
            for rx in (x.saturating_sub(radius)..(x + radius + 1).min(w)).step_by(step) {
                let i = ry * w + rx;
                let sq = squared_distance(pv, &prev[i]);
                let l = labels[i];
                if sq < mins[l] {
                    mins[l] = sq;
                }
            }
        }
    };

    let mut out = vec![Grid::new(h, w, 0.0); ids.len()];
    let mut mins = vec![f32::INFINITY; k];
    for y in 0..h {
        for x in 0..w {
            let pv = to_vec(frame.pixel(x, y));
            search(&pv, x, y, params.radius, 1, &mut mins);
            let best = mins.iter().cloned().fold(f32::INFINITY, f32::min);
            if best + params.bias > NOVEL_SQ && params.wide_radius > params.radius {
                search(&pv, x, y, params.wide_radius, 2, &mut mins);
            }
            for (o, grid) in out.iter_mut().enumerate() {
                let fg = mins[o + 1];
                let bg = mins
                    .iter()
                    .enumerate()
                    .filter(|&(l, _)| l != o + 1)
                    .map(|(_, &v)| v)
                    .fold(f32::INFINITY, f32::min);
                let d = |sq: f32| if sq.is_finite() { distance_from_sq(sq, params.bias) } else { 1.0 };
                grid.set(y, x, d(bg) - d(fg));
            }
        }
    }
    Ok(out)
}

/// Multiplicative per-channel gains in (0, 2).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGate {
    pub gains: Vec<f32>,
}

impl InstanceGate {
    pub fn identity(channels: usize) -> Self {
        Self {
            gains: vec![1.0; channels],
        }
    }

    pub fn apply(&self, features: &[f32]) -> Vec<f32> {
        features.iter().zip(&self.gains).map(|(f, g)| f * g).collect()
    }
}

/// Gate parameters: `gains = 2·σ(W·[fg_pool, bg_pool] + c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub linear: Linear,
}

impl GateWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            linear: Linear::zeros(2 * channels, channels),
        }
    }

    pub fn seeded(channels: usize, seed: u64, scale: f32) -> Self {
        if scale == 0.0 {
            return Self::zeros(channels);
        }
        Self {
            linear: Linear::seeded(2 * channels, channels, seed, scale),
        }
    }
}

/// Indicator-weighted mean of foreground cells and (1 − indicator)-weighted
/// mean of background cells; an empty side pools to the zero vector.
pub fn pool_foreground_background(features: &FeatureMap, indicator: &Grid) -> Result<(Vec<f32>, Vec<f32>)> {
    if features.height() != indicator.height() || features.width() != indicator.width() {
        return Err(Error::Shape("indicator does not match features".into()));
    }
    let m = indicator.data();
    let (wf, wb): (f64, f64) = m.iter().fold((0.0, 0.0), |(a, b), &v| (a + v as f64, b + (1.0 - v) as f64));
    let mut fg = vec![0.0f32; features.channels()];
    let mut bg = vec![0.0f32; features.channels()];
    for c in 0..features.channels() {
        let (mut sf, mut sb) = (0.0f64, 0.0f64);
        for (&e, &v) in features.plane(c).iter().zip(m) {
            sf += e as f64 * v as f64;
            sb += e as f64 * (1.0 - v) as f64;
        }
        if wf > 0.0 {
            fg[c] = (sf / wf) as f32;
        }
        if wb > 0.0 {
            bg[c] = (sb / wb) as f32;
        }
    }
    Ok((fg, bg))
}

pub fn instance_gate(first_frame: &FeatureMap, first_indicator: &Grid, weights: &GateWeights) -> Result<InstanceGate> {
    let (fg, bg) = pool_foreground_background(first_frame, first_indicator)?;
    let mut pooled = fg;
    pooled.extend(bg);
    if weights.linear.in_dim != pooled.len() {
        return Err(Error::Shape(format!(
            "gate expects {} inputs, pooled vector has {}",
            weights.linear.in_dim,
            pooled.len()
        )));
    }
    let gains = weights
        .linear
        .apply_vec(&pooled)
        .into_iter()
        // saturated sigmoids are pulled back inside the open interval
        .map(|z| (2.0 * sigmoid(z)).clamp(f32::MIN_POSITIVE, 2.0f32.next_down()))
        .collect();
    Ok(InstanceGate { gains })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(c, h, w, 16, data).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pixel_distance(&[0.3, -1.0], &[0.3, -1.0], 0.0), 0.0);
        let e = std::f64::consts::E;
        let d = pixel_distance(&[1.0], &[0.0], 0.0) as f64;
        assert!((d - (1.0 - 2.0 / (1.0 + e))).abs() < 1e-6);
        assert!((d - 0.4621).abs() < 1e-4);
        let far = pixel_distance(&[50f32.sqrt()], &[0.0], 0.0) as f64;
        assert!((1.0 - far).abs() < 1e-9);
    }

    #[test]
    fn distance_is_monotone() {
        let mut last = -1.0;
        for i in 0..100 {
            let d = pixel_distance(&[i as f32 * 0.05], &[0.0], 0.0);
            assert!(d >= last);
            last = d;
        }
    }

    #[test]
    fn self_match_is_zero_on_object() {
        let f = fmap(2, 2, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let ind = Grid::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.6]).unwrap();
        let m = match_global(&f, &f, &ind, 0.0).unwrap();
        assert_eq!(m.fg.get(0, 0), 0.0);
        assert_eq!(m.fg.get(1, 1), 0.0);
        assert_eq!(m.bg.get(0, 1), 0.0);
    }

    #[test]
    fn empty_reference_fills_one() {
        let f = fmap(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let ind = Grid::new(2, 2, 0.2);
        let m = match_global(&f, &f, &ind, 0.0).unwrap();
        assert!(m.fg.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_cell_reference_hand_minimum() {
        // reference: cell 0 = [0] (foreground), cell 1 = [2] (background)
        let reference = fmap(1, 1, 2, vec![0.0, 2.0]);
        let ind = Grid::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let query = fmap(1, 1, 1, vec![1.5]);
        let m = match_global(&query, &reference, &ind, 0.0).unwrap();
        let d = |sq: f64| 1.0 - 2.0 / (1.0 + sq.exp());
        assert!((m.fg.data()[0] as f64 - d(2.25)).abs() < 1e-6);
        assert!((m.bg.data()[0] as f64 - d(0.25)).abs() < 1e-6);
    }

    #[test]
    fn local_full_radius_equals_global() {
        let q = fmap(3, 4, 5, (0..60).map(|v| ((v * 37) % 11) as f32 * 0.3).collect());
        let r = fmap(3, 4, 5, (0..60).map(|v| ((v * 13) % 7) as f32 * 0.4).collect());
        let ind = Grid::from_vec(4, 5, (0..20).map(|v| (v % 3) as f32 * 0.4).collect()).unwrap();
        assert_eq!(match_local(&q, &r, &ind, 5, 0.0).unwrap(), match_global(&q, &r, &ind, 0.0).unwrap());
    }

    #[test]
    fn local_radius_zero_is_pointwise() {
        let q = fmap(1, 1, 3, vec![0.0, 1.0, 2.0]);
        let r = fmap(1, 1, 3, vec![0.5, 1.0, 3.0]);
        let ind = Grid::from_vec(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        let m = match_local(&q, &r, &ind, 0, 0.0).unwrap();
        assert_eq!(m.fg.data()[0], pixel_distance(&[0.0], &[0.5], 0.0));
        assert_eq!(m.fg.data()[2], 1.0);
    }

    #[test]
    fn moved_object_outside_window() {
        // object at columns 0..2 of the previous frame, query row of 8 cells
        let prev = fmap(1, 1, 8, vec![1.0; 8]);
        let ind = Grid::from_vec(1, 8, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = fmap(1, 1, 8, vec![1.0; 8]);
        let m = match_local(&q, &prev, &ind, 2, 0.0).unwrap();
        // cells whose window [x-2, x+2] misses columns 0 and 1
        let expect: Vec<f32> = (0..8).map(|x| if x >= 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(m.fg.data(), expect.as_slice());
    }

    #[test]
    fn gate_identity_at_zero_weights() {
        let f = fmap(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let ind = Grid::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let g = instance_gate(&f, &ind, &GateWeights::zeros(2)).unwrap();
        assert_eq!(g.gains, vec![1.0, 1.0]);
    }

    #[test]
    fn gate_hand_value_and_range() {
        // one channel: pooled concat = [1, 0]
        let f = fmap(1, 1, 2, vec![1.0, 0.0]);
        let ind = Grid::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let w = GateWeights {
            linear: Linear::new(2, 1, vec![1.0, 0.0], vec![0.0]).unwrap(),
        };
        let g = instance_gate(&f, &ind, &w).unwrap();
        assert!((g.gains[0] - 1.4621).abs() < 1e-4);

        let big = GateWeights::seeded(1, 3, 50.0);
        let g = instance_gate(&f, &ind, &big).unwrap();
        assert!(g.gains.iter().all(|&v| v > 0.0 && v < 2.0));
    }

    #[test]
    fn all_background_pools_zero_foreground() {
        let f = fmap(1, 1, 2, vec![3.0, 5.0]);
        let (fg, bg) = pool_foreground_background(&f, &Grid::new(1, 2, 0.0)).unwrap();
        assert_eq!(fg, vec![0.0]);
        assert_eq!(bg, vec![4.0]);
    }

    #[test]
    fn refinement_static_scene() {
        let mut frame = ImageFrame::filled(12, 12, [20, 20, 20]).unwrap();
        let mut mask = LabelMask::background(12, 12);
        for y in 3..7 {
            for x in 4..9 {
                frame.set_pixel(x, y, [200, 40, 40]);
                mask.set(x, y, 1);
            }
        }
        let params = RefineParams {
            radius: 2,
            wide_radius: 6,
            color_scale: 8.0,
            bias: 0.0,
        };
        let r = pixel_refinement(&frame, &frame, &mask, &[1], params).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                let v = r[0].get(y, x);
                if mask.get(x, y) == 1 {
                    assert!(v > 0.9, "({x},{y}) {v}");
                } else {
                    assert!(v < -0.9, "({x},{y}) {v}");
                }
            }
        }
    }

    #[test]
    fn refinement_wide_search_reaches_past_gap() {
        // object pixels reappear 5 px from the nearest labelled object pixel
        let mut prev = ImageFrame::filled(16, 16, [20, 20, 20]).unwrap();
        let mut frame = prev.clone();
        let mut mask = LabelMask::background(16, 16);
        for x in 0..16 {
            for y in 9..12 {
                prev.set_pixel(x, y, [200, 40, 40]);
                mask.set(x, y, 1);
                frame.set_pixel(x, y, [200, 40, 40]);
            }
            for y in 4..9 {
                prev.set_pixel(x, y, [90, 90, 90]);
            }
            frame.set_pixel(x, 4, [200, 40, 40]);
        }
        let narrow = RefineParams {
            radius: 2,
            wide_radius: 0,
            color_scale: 8.0,
            bias: 0.0,
        };
        let wide = RefineParams { wide_radius: 6, ..narrow };
        let a = pixel_refinement(&frame, &prev, &mask, &[1], narrow).unwrap();
        let b = pixel_refinement(&frame, &prev, &mask, &[1], wide).unwrap();
        assert!(a[0].get(4, 8).abs() < 0.1);
        assert!(b[0].get(4, 8) > 0.9);
    }
}
