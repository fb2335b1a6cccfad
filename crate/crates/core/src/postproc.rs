//! Temporal connected-component filtering and small-object crop refinement.

use crate::io::{ImageFrame, LabelMask, ProbMap, Rect, MIN_SIDE};
use crate::{Error, Result};

/// A 4-connected region of one object id.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub object: u8,
    /// Pixel coordinates `(x, y)` in discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// Mean pixel coordinate `(x, y)`.
    pub centroid: (f64, f64),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn centroid(pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
    (sx / n, sy / n)
}

/// 4-connected components of `object`, ordered by their first pixel in
/// row-major order.
pub fn connected_components(mask: &LabelMask, object: u8) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let ids = mask.ids();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || ids[start] != object {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            let mut visit = |j: usize| {
                if !seen[j] && ids[j] == object {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(Component {
            object,
            centroid: centroid(&pixels),
            pixels,
        });
    }
    out
}

fn object_centroid(mask: &LabelMask, object: u8) -> Option<(f64, f64)> {
    let w = mask.width();
    let pixels: Vec<(usize, usize)> = mask
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == object)
        .map(|(i, _)| (i % w, i / w))
        .collect();
    (!pixels.is_empty()).then(|| centroid(&pixels))
}

/// Removes components whose centroid lies farther than `tau · diagonal` from
/// the object's centroid in `mask_prev`. When every component is that far,
/// only the nearest one is kept. Objects absent from `mask_prev` pass through.
pub fn temporal_filter(mask_t: &LabelMask, mask_prev: &LabelMask, tau: f64) -> Result<LabelMask> {
    if !mask_t.same_shape(mask_prev) {
        return Err(Error::Shape("temporal filter masks differ in size".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Invalid("temporal filter tau must be in (0,1]".into()));
    }
    let (w, h) = (mask_t.width() as f64, mask_t.height() as f64);
    let limit = tau * (w * w + h * h).sqrt();
    let mut out = mask_t.clone();
    for object in mask_t.object_ids() {
        let Some((px, py)) = object_centroid(mask_prev, object) else {
            continue;
        };
        let comps = connected_components(mask_t, object);
        let dist: Vec<f64> = comps
            .iter()
            .map(|c| ((c.centroid.0 - px).powi(2) + (c.centroid.1 - py).powi(2)).sqrt())
            .collect();
        let mut keep: Vec<bool> = dist.iter().map(|&d| d <= limit).collect();
        if !keep.iter().any(|&k| k) {
            let nearest = dist
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("object has at least one component");
            keep[nearest] = true;
        }
        for (c, k) in comps.iter().zip(keep) {
            if !k {
                for &(x, y) in &c.pixels {
                    out.set(x, y, 0);
                }
            }
        }
    }
    Ok(out)
}

/// What the refinement callback receives: an upscaled crop and the current
/// object-versus-rest probabilities on it.
#[derive(Clone, Debug)]
pub struct CropRequest {
    pub object: u8,
    /// Crop rectangle in original frame coordinates.
    pub rect: Rect,
    /// The cropped frame, upscaled ×2.
    pub frame: ImageFrame,
    /// Two-class map (background, `object`) on the upscaled crop.
    pub prob: ProbMap,
}

/// Crop rectangle used for refinement: the bounding box grown by
/// `margin · size` on every side, clamped to the image, with sides of at
/// least [`MIN_SIDE`] pixels where the image allows.
pub fn refine_rect(bbox: Rect, margin: f64, width: usize, height: usize) -> Option<Rect> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return None;
    }
    let grow = |start: usize, len: usize, limit: usize| {
        let pad = (margin * len as f64).ceil() as usize;
        let mut lo = start.saturating_sub(pad);
        let mut hi = (start + len + pad).min(limit);
        while hi - lo < MIN_SIDE {
            if lo > 0 {
                lo -= 1;
            }
            if hi - lo < MIN_SIDE && hi < limit {
                hi += 1;
            }
        }
        (lo, hi - lo)
    };
    let (x, cw) = grow(bbox.x, bbox.width, width);
    let (y, ch) = grow(bbox.y, bbox.height, height);
    Some(Rect {
        x,
        y,
        width: cw,
        height: ch,
    })
}

fn binary_crop(prob: &ProbMap, k: usize, rect: Rect, object: u8) -> Result<ProbMap> {
    let n = rect.width * rect.height;
    let mut data = vec![0.0f32; 2 * n];
    for y in 0..rect.height {
        for x in 0..rect.width {
            let p = prob.get(k, rect.y + y, rect.x + x);
            data[y * rect.width + x] = 1.0 - p;
            data[n + y * rect.width + x] = p;
        }
    }
    ProbMap::from_unnormalized(rect.height, rect.width, vec![object], data)
}

/// Re-segments a small object on a ×2 crop and pastes the result back.
///
/// Applies only when the object's argmax area is positive and below
/// `alpha · H · W`; otherwise the input is returned unchanged. A callback
/// returning `None` also leaves the input unchanged. Inside the crop the
/// object probability is replaced by the callback's result and the other
/// classes share the remainder in their previous proportions; outside the
/// crop the object's probability is zeroed and each pixel renormalised.
pub fn crop_refine(
    frame: &ImageFrame,
    prob: &ProbMap,
    object: u8,
    alpha: f64,
    margin: f64,
    resegment: &mut dyn FnMut(&CropRequest) -> Result<Option<ProbMap>>,
) -> Result<ProbMap> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid("small-object alpha must be in (0,1)".into()));
    }
    let (w, h) = (prob.width(), prob.height());
    if frame.width() != w || frame.height() != h {
        return Err(Error::Shape("frame and probability map differ in size".into()));
    }
    let k = prob
        .ids()
        .iter()
        .position(|&o| o == object)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Invalid(format!("object {object} not in probability map")))?;
    let mask = prob.argmax();
    let area = mask.area(object);
    if area == 0 || area as f64 >= alpha * (w * h) as f64 {
        return Ok(prob.clone());
    }
    let bbox = mask.bounding_box(object).expect("non-empty object");
    let Some(rect) = refine_rect(bbox, margin, w, h) else {
        return Ok(prob.clone());
    };
    let (uw, uh) = (rect.width * 2, rect.height * 2);
    let request = CropRequest {
        object,
        rect,
        frame: frame.crop_resized(rect, uw, uh)?,
        prob: binary_crop(prob, k, rect, object)?.resize_bilinear(uh, uw),
    };
    let Some(result) = resegment(&request)? else {
        return Ok(prob.clone());
    };
    if result.width() != uw || result.height() != uh || result.ids() != [object] {
        return Err(Error::Shape("refinement result does not match the crop".into()));
    }
    let refined = result.resize_bilinear(rect.height, rect.width);
    let n = w * h;
    let classes = prob.classes();
    let mut data = prob.probs().to_vec();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let inside = x >= rect.x && x < rect.x + rect.width && y >= rect.y && y < rect.y + rect.height;
            let q = if inside {
                refined.get(1, y - rect.y, x - rect.x)
            } else {
                0.0
            };
            let rest: f32 = (0..classes).filter(|&c| c != k).map(|c| data[c * n + p]).sum();
            if rest > 1e-12 {
                let scale = (1.0 - q) / rest;
                for c in (0..classes).filter(|&c| c != k) {
                    data[c * n + p] *= scale;
                }
            } else {
                data[p] = 1.0 - q;
            }
            data[k * n + p] = q;
        }
    }
    ProbMap::from_unnormalized(h, w, prob.ids().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let ids = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| if b == b'.' { 0 } else { b - b'0' }))
            .collect();
        LabelMask::new(w, h, ids).unwrap()
    }

    #[test]
    fn blob_2x2() {
        let m = mask_from(&["....", ".11.", ".11.", "...."]);
        let c = connected_components(&m, 1);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area(), 4);
        assert_eq!(c[0].centroid, (1.5, 1.5));
    }

    #[test]
    fn diagonal_pixels_split() {
        let m = mask_from(&["1.", ".1"]);
        let c = connected_components(&m, 1);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].pixels, vec![(0, 0)]);
        assert_eq!(c[1].pixels, vec![(1, 1)]);
    }

    #[test]
    fn l_shape_centroid() {
        let m = mask_from(&["1..", "1..", "111"]);
        let c = connected_components(&m, 1);
        assert_eq!(c.len(), 1);
        // (0,0) (0,1) (0,2) (1,2) (2,2)
        assert_eq!(c[0].centroid, (0.6, 1.4));
    }

    fn square(mask: &mut LabelMask, cx: usize, cy: usize, r: usize, id: u8) {
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                mask.set(x, y, id);
            }
        }
    }

    #[test]
    fn spurious_far_blob_removed() {
        let mut prev = LabelMask::background(100, 100);
        square(&mut prev, 30, 30, 3, 1);
        let mut cur = LabelMask::background(100, 100);
        square(&mut cur, 33, 30, 3, 1);
        square(&mut cur, 80, 30, 2, 1);
        let out = temporal_filter(&cur, &prev, 0.2).unwrap();
        assert_eq!(out.get(33, 30), 1);
        assert_eq!(out.get(80, 30), 0);
        assert_eq!(out.area(1), 49);
    }

    #[test]
    fn centred_component_kept() {
        let mut prev = LabelMask::background(20, 20);
        square(&mut prev, 10, 10, 2, 1);
        assert_eq!(temporal_filter(&prev, &prev, 0.01).unwrap(), prev);
    }

    #[test]
    fn nearest_kept_when_all_far() {
        let mut prev = LabelMask::background(100, 100);
        square(&mut prev, 10, 10, 1, 1);
        let mut cur = LabelMask::background(100, 100);
        square(&mut cur, 50, 10, 1, 1);
        square(&mut cur, 90, 90, 1, 1);
        let out = temporal_filter(&cur, &prev, 0.1).unwrap();
        assert_eq!(out.area(1), 9);
        assert_eq!(out.get(50, 10), 1);
    }

    #[test]
    fn absent_in_previous_passes() {
        let prev = LabelMask::background(10, 10);
        let mut cur = LabelMask::background(10, 10);
        square(&mut cur, 2, 2, 1, 1);
        square(&mut cur, 7, 7, 1, 1);
        assert_eq!(temporal_filter(&cur, &prev, 0.1).unwrap(), cur);
    }

    #[test]
    fn filter_errors() {
        let a = LabelMask::background(4, 4);
        let b = LabelMask::background(5, 4);
        assert!(temporal_filter(&a, &b, 0.2).is_err());
        assert!(temporal_filter(&a, &a, 0.0).is_err());
    }

    fn frame_with_square(size: usize, x0: usize, y0: usize, side: usize) -> (ImageFrame, LabelMask) {
        let mut f = ImageFrame::filled(size, size, [20, 20, 20]).unwrap();
        let mut m = LabelMask::background(size, size);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                f.set_pixel(x, y, [220, 40, 40]);
                m.set(x, y, 1);
            }
        }
        (f, m)
    }

    fn never(_: &CropRequest) -> Result<Option<ProbMap>> {
        panic!("callback must not run")
    }

    #[test]
    fn gate_closed_is_identity() {
        let (f, m) = frame_with_square(32, 4, 4, 20);
        let p = ProbMap::from_mask(&m, &[1]);
        let out = crop_refine(&f, &p, 1, 0.01, 0.5, &mut never).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn empty_object_unchanged() {
        let (f, _) = frame_with_square(32, 4, 4, 2);
        let p = ProbMap::from_mask(&LabelMask::background(32, 32), &[1]);
        assert_eq!(crop_refine(&f, &p, 1, 0.5, 0.5, &mut never).unwrap(), p);
    }

    #[test]
    fn identity_callback_keeps_iou() {
        let (f, gt) = frame_with_square(128, 60, 50, 6);
        let p = ProbMap::from_mask(&gt, &[1]);
        let mut calls = 0;
        let mut cb = |r: &CropRequest| {
            calls += 1;
            assert_eq!(r.frame.width(), r.rect.width * 2);
            Ok(Some(r.prob.clone()))
        };
        let out = crop_refine(&f, &p, 1, 0.01, 0.5, &mut cb).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(out.argmax(), gt);
    }

    #[test]
    fn other_objects_untouched() {
        let (f, mut m) = frame_with_square(64, 10, 10, 3);
        for x in 40..60 {
            m.set(x, 40, 2);
        }
        let p = ProbMap::from_mask(&m, &[1, 2]);
        let mut cb = |r: &CropRequest| Ok(Some(r.prob.clone()));
        let out = crop_refine(&f, &p, 1, 0.01, 0.5, &mut cb).unwrap();
        assert_eq!(out.class_plane(2), p.class_plane(2));
    }

    #[test]
    fn rect_has_minimum_side() {
        let r = refine_rect(Rect { x: 0, y: 0, width: 1, height: 1 }, 0.5, 64, 64).unwrap();
        assert!(r.width >= MIN_SIDE && r.height >= MIN_SIDE);
        assert_eq!((r.x, r.y), (0, 0));
    }
}
