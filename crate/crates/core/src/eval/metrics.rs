use crate::io::LabelMask;
use crate::{Error, Result};

/// Boundary tolerance as a fraction of the image diagonal.
pub const DEFAULT_TOLERANCE_FRACTION: f64 = 0.008;

fn check(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )))
    }
}

/// Intersection over union of one object's pixels; 1 when both are empty.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask, object: u8) -> Result<f64> {
    check(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.ids().iter().zip(gt.ids()) {
        let (a, b) = (a == object, b == object);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with at least one 4-neighbour outside the object; pixels
/// beyond the image border count as outside.
pub fn boundary_pixels(mask: &LabelMask, object: u8) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != object {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || mask.get(x - 1, y) != object
                || mask.get(x + 1, y) != object
                || mask.get(x, y - 1) != object
                || mask.get(x, y + 1) != object;
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

fn matched_fraction(from: &[(usize, usize)], to: &[(usize, usize)], w: usize, h: usize, radius: f64) -> f64 {
    let mut grid = vec![false; w * h];
    for &(x, y) in to {
        grid[y * w + x] = true;
    }
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let hits = from
        .iter()
        .filter(|&&(x, y)| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy) as f64) > r2 {
                        continue;
                    }
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h && grid[qy as usize * w + qx as usize] {
                        return true;
                    }
                }
            }
            false
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F-measure with a match radius of `tolerance · diagonal` pixels.
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, object: u8, tolerance: f64) -> Result<f64> {
    check(pred, gt)?;
    let bp = boundary_pixels(pred, object);
    let bg = boundary_pixels(gt, object);
    if bp.is_empty() && bg.is_empty() {
        return Ok(1.0);
    }
    if bp.is_empty() || bg.is_empty() {
        return Ok(0.0);
    }
    let (w, h) = (pred.width(), pred.height());
    let radius = tolerance * ((w * w + h * h) as f64).sqrt();
    let precision = matched_fraction(&bp, &bg, w, h, radius);
    let recall = matched_fraction(&bg, &bp, w, h, radius);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Default tolerance for an image: 0.8% of the diagonal, rounded up to a
/// whole pixel and at least one pixel, expressed as a diagonal fraction.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    let diag = ((width * width + height * height) as f64).sqrt();
    let px = (DEFAULT_TOLERANCE_FRACTION * diag).ceil().max(1.0);
    px / diag
}

/// `(mean J + mean F) / 2`.
pub fn overall_score(mean_j: f64, mean_f: f64) -> f64 {
    (mean_j + mean_f) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScores {
    pub object: u8,
    /// Indices of the scored frames.
    pub frames: Vec<usize>,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub objects: Vec<ObjectScores>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub overall: f64,
}

impl MetricsReport {
    /// Means over every object and frame entry.
    pub fn from_scores(objects: Vec<ObjectScores>) -> Result<Self> {
        let n: usize = objects.iter().map(|o| o.j.len()).sum();
        if objects.is_empty() || n == 0 {
            return Err(Error::Invalid("metrics need at least one object and frame".into()));
        }
        let mean_j = objects.iter().flat_map(|o| &o.j).sum::<f64>() / n as f64;
        let mean_f = objects.iter().flat_map(|o| &o.f).sum::<f64>() / n as f64;
        Ok(Self {
            objects,
            mean_j,
            mean_f,
            overall: overall_score(mean_j, mean_f),
        })
    }

    /// Pools several sequence reports by averaging all their entries.
    pub fn pooled(reports: &[MetricsReport]) -> Result<Self> {
        Self::from_scores(reports.iter().flat_map(|r| r.objects.clone()).collect())
    }
}

/// Scores frames `1..` (frame 0 is the given annotation). A single-frame
/// sequence is scored on frame 0.
pub fn evaluate_sequence(pred: &[LabelMask], gt: &[LabelMask], objects: &[u8]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    let frames: Vec<usize> = if gt.len() == 1 { vec![0] } else { (1..gt.len()).collect() };
    let tol = default_tolerance(gt[0].width(), gt[0].height());
    let mut scores = Vec::with_capacity(objects.len());
    for &o in objects {
        let mut s = ObjectScores {
            object: o,
            frames: frames.clone(),
            j: Vec::new(),
            f: Vec::new(),
        };
        for &t in &frames {
            s.j.push(jaccard(&pred[t], &gt[t], o).map_err(|e| e.at_frame(t))?);
            s.f.push(boundary_f(&pred[t], &gt[t], o, tol).map_err(|e| e.at_frame(t))?);
        }
        scores.push(s);
    }
    MetricsReport::from_scores(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> LabelMask {
        let mut m = LabelMask::background(w, h);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn jaccard_examples() {
        let a = rect_mask(3, 2, 0, 0, 2, 2);
        let b = rect_mask(3, 2, 1, 0, 2, 2);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        // intersection 2, union 6
        assert_eq!(jaccard(&a, &b, 1).unwrap(), 1.0 / 3.0);
        let c = rect_mask(4, 2, 0, 0, 2, 2);
        let d = rect_mask(4, 2, 2, 0, 2, 2);
        assert_eq!(jaccard(&c, &d, 1).unwrap(), 0.0);
        let empty = LabelMask::background(3, 2);
        assert_eq!(jaccard(&empty, &empty, 1).unwrap(), 1.0);
        assert!(jaccard(&a, &c, 1).is_err());
    }

    #[test]
    fn square_ring_boundary() {
        let m = rect_mask(5, 5, 1, 1, 3, 3);
        assert_eq!(boundary_pixels(&m, 1).len(), 8);
        let full = rect_mask(2, 2, 0, 0, 2, 2);
        assert_eq!(boundary_pixels(&full, 1).len(), 4);
    }

    #[test]
    fn offset_square_f() {
        let a = rect_mask(8, 8, 1, 2, 3, 3);
        let b = rect_mask(8, 8, 2, 2, 3, 3);
        let diag = 128f64.sqrt();
        assert_eq!(boundary_f(&a, &b, 1, 0.5 / diag).unwrap(), 0.5);
        assert_eq!(boundary_f(&a, &b, 1, 1.0 / diag).unwrap(), 1.0);
        assert_eq!(boundary_f(&a, &a, 1, 0.0).unwrap(), 1.0);
        let far = rect_mask(8, 8, 5, 5, 3, 3);
        let near = rect_mask(8, 8, 0, 0, 2, 2);
        assert_eq!(boundary_f(&near, &far, 1, 1.0 / diag).unwrap(), 0.0);
    }

    #[test]
    fn default_tolerance_is_whole_pixels() {
        let t = default_tolerance(128, 128);
        let diag = (2.0f64 * 128.0 * 128.0).sqrt();
        assert!((t * diag - 2.0).abs() < 1e-12);
        assert!((default_tolerance(10, 10) * 200f64.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overall_examples() {
        assert_eq!(overall_score(1.0, 1.0), 1.0);
        assert!((overall_score(0.8, 0.6) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_sequence() {
        let m = rect_mask(16, 16, 3, 3, 5, 4);
        let r = evaluate_sequence(&[m.clone(), m.clone(), m.clone()], &[m.clone(), m.clone(), m], &[1]).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.objects[0].frames, vec![1, 2]);
    }
}
