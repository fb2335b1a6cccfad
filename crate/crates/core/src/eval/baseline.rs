use crate::io::{ImageFrame, LabelMask};
use crate::{Error, Result};

const LEVELS: usize = 16;
const CELLS: usize = LEVELS * LEVELS * LEVELS;

fn cell(c: [u8; 3]) -> usize {
    ((c[0] as usize >> 4) * LEVELS + (c[1] as usize >> 4)) * LEVELS + (c[2] as usize >> 4)
}

fn coords(i: usize) -> [i32; 3] {
    [(i / (LEVELS * LEVELS)) as i32, (i / LEVELS % LEVELS) as i32, (i % LEVELS) as i32]
}

/// Labels each pixel with the label of the nearest first-frame colour.
///
/// Colours are quantised to 4 bits per channel; each quantised colour seen
/// in the first frame takes its majority label, and every other colour
/// inherits the label of the nearest seen colour. Frame 0 is returned as
/// given.
pub fn nearest_color_baseline(frames: &[ImageFrame], first_mask: &LabelMask) -> Result<Vec<LabelMask>> {
    let first = frames.first().ok_or_else(|| Error::Invalid("no frames".into()))?;
    if first.width() != first_mask.width() || first.height() != first_mask.height() {
        return Err(Error::Shape("mask/frame size mismatch".into()));
    }
    let mut counts = vec![[0u32; 256]; CELLS];
    let mut present = vec![false; CELLS];
    for y in 0..first.height() {
        for x in 0..first.width() {
            let c = cell(first.pixel(x, y));
            counts[c][first_mask.get(x, y) as usize] += 1;
            present[c] = true;
        }
    }
    let majority: Vec<u8> = counts
        .iter()
        .map(|h| {
            let mut best = 0;
            for (i, &n) in h.iter().enumerate() {
                if n > h[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    let seen: Vec<usize> = (0..CELLS).filter(|&i| present[i]).collect();
    let lut: Vec<u8> = (0..CELLS)
        .map(|i| {
            let a = coords(i);
            let nearest = seen
                .iter()
                .min_by_key(|&&j| {
                    let b = coords(j);
                    (0..3).map(|k| (a[k] - b[k]).pow(2)).sum::<i32>()
                })
                .expect("first frame has pixels");
            majority[*nearest]
        })
        .collect();
    let mut out = Vec::with_capacity(frames.len());
    out.push(first_mask.clone());
    for f in &frames[1..] {
        if f.width() != first.width() || f.height() != first.height() {
            return Err(Error::Shape("frame size mismatch".into()));
        }
        let ids = f.rgb().chunks_exact(3).map(|p| lut[cell([p[0], p[1], p[2]])]).collect();
        out.push(LabelMask::new(f.width(), f.height(), ids)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colours_map_to_labels() {
        let mut f0 = ImageFrame::filled(8, 8, [0, 0, 0]).unwrap();
        f0.set_pixel(3, 0, [250, 10, 10]);
        let mut m0 = LabelMask::background(8, 8);
        m0.set(3, 0, 1);
        let mut f1 = ImageFrame::filled(8, 8, [5, 5, 5]).unwrap();
        f1.set_pixel(0, 0, [230, 30, 20]);
        let out = nearest_color_baseline(&[f0, f1], &m0).unwrap();
        assert_eq!(out[0], m0);
        assert_eq!(out[1].get(0, 0), 1);
        assert_eq!(out[1].area(1), 1);
    }
}
