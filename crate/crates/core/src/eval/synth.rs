use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::io::{ImageFrame, LabelMask};
use crate::ops::rng;
use crate::{Error, Result};

/// Minimum per-channel difference between any two object colours.
pub const MIN_COLOR_GAP: i32 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { radius: f64 },
    Rect { width: f64, height: f64 },
}

impl Shape {
    /// Half extents along x and y.
    pub fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { radius } => (radius, radius),
            Shape::Rect { width, height } => (width / 2.0, height / 2.0),
        }
    }

    /// Whether the pixel centre of `(x, y)` lies inside the shape centred at `c`.
    pub fn contains(&self, c: (f64, f64), x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - c.0;
        let dy = y as f64 + 0.5 - c.1;
        match *self {
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Rect { width, height } => dx.abs() <= width / 2.0 && dy.abs() <= height / 2.0,
        }
    }

    fn valid(&self) -> bool {
        let (a, b) = self.extent();
        a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0
    }
}

/// A moving shape. Objects carry ground-truth ids; distractors use the same
/// description but are labelled background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Centre at frame 0, in pixels.
    pub position: [f64; 2],
    /// Pixels per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Colour change per frame and channel.
    #[serde(default)]
    pub drift: [f64; 3],
}

/// Straight-line motion of the centre reflected at the canvas walls, with
/// `lo..=hi` the admissible range of the centre.
pub fn bounce(start: f64, velocity: f64, lo: f64, hi: f64, t: usize) -> f64 {
    if hi <= lo {
        return start;
    }
    let span = hi - lo;
    let raw = (start - lo + velocity * t as f64).rem_euclid(2.0 * span);
    lo + if raw > span { 2.0 * span - raw } else { raw }
}

impl SynthObject {
    pub fn center_at(&self, t: usize, width: usize, height: usize) -> (f64, f64) {
        let (ex, ey) = self.shape.extent();
        (
            bounce(self.position[0], self.velocity[0], ex, width as f64 - ex, t),
            bounce(self.position[1], self.velocity[1], ey, height as f64 - ey, t),
        )
    }

    pub fn color_at(&self, t: usize) -> [u8; 3] {
        let mut c = self.color;
        for (ch, d) in c.iter_mut().zip(self.drift) {
            *ch = (*ch as f64 + d * t as f64).round().clamp(0.0, 255.0) as u8;
        }
        c
    }
}

/// A shape painted over everything while `start_frame <= t < end_frame`,
/// moving in a straight line without bouncing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub shape: Shape,
    pub color: [u8; 3],
    pub position: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Occluder {
    pub fn center_at(&self, t: usize) -> Option<(f64, f64)> {
        (self.start_frame..self.end_frame).contains(&t).then(|| {
            let dt = (t - self.start_frame) as f64;
            (self.position[0] + self.velocity[0] * dt, self.position[1] + self.velocity[1] * dt)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: [u8; 3],
    /// Uniform noise amplitude added to every channel.
    #[serde(default)]
    pub noise: u8,
    pub objects: Vec<SynthObject>,
    #[serde(default)]
    pub distractors: Vec<SynthObject>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("synth spec: {m}")));
        if self.width < crate::io::MIN_SIDE || self.height < crate::io::MIN_SIDE {
            return bad(format!("canvas must be at least {0}x{0}", crate::io::MIN_SIDE));
        }
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if self.objects.is_empty() || self.objects.len() > 255 {
            return bad("object count must be in 1..=255".into());
        }
        let all = self.objects.iter().chain(&self.distractors);
        for (i, o) in all.enumerate() {
            if !o.shape.valid() {
                return bad(format!("shape {i} has a non-positive size"));
            }
            let (ex, ey) = o.shape.extent();
            let [x, y] = o.position;
            if x - ex < 0.0 || y - ey < 0.0 || x + ex > self.width as f64 || y + ey > self.height as f64 {
                return bad(format!("shape {i} is not inside the canvas at frame 0"));
            }
            if o.velocity.iter().chain(&o.drift).any(|v| !v.is_finite()) {
                return bad(format!("shape {i} has a non-finite velocity or drift"));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.color.iter().zip(b.color).any(|(&p, q)| (p as i32 - q as i32).abs() < MIN_COLOR_GAP) {
                    return bad(format!("object colours must differ by at least {MIN_COLOR_GAP} per channel"));
                }
            }
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if !o.shape.valid() || o.start_frame > o.end_frame {
                return bad(format!("occluder {i} is malformed"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub frames: Vec<ImageFrame>,
    pub masks: Vec<LabelMask>,
}

/// Renders the sequence. Later objects are drawn over earlier ones and
/// occluders over everything; masks record the visible object per pixel.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut r = rng(seed);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut rgb: Vec<[u8; 3]> = vec![spec.background; w * h];
        let mut ids = vec![0u8; w * h];
        let layers = spec
            .distractors
            .iter()
            .map(|d| (d, 0u8))
            .chain(spec.objects.iter().enumerate().map(|(i, o)| (o, i as u8 + 1)));
        for (o, id) in layers {
            let c = o.center_at(t, w, h);
            let color = o.color_at(t);
            paint(&o.shape, c, w, h, |p| {
                rgb[p] = color;
                ids[p] = id;
            });
        }
        for o in &spec.occluders {
            if let Some(c) = o.center_at(t) {
                paint(&o.shape, c, w, h, |p| {
                    rgb[p] = o.color;
                    ids[p] = 0;
                });
            }
        }
        let a = spec.noise as i16;
        let mut bytes = Vec::with_capacity(3 * w * h);
        for px in &rgb {
            for &ch in px {
                let n = if a > 0 { r.random_range(-a..=a) } else { 0 };
                bytes.push((ch as i16 + n).clamp(0, 255) as u8);
            }
        }
        frames.push(ImageFrame::new(w, h, bytes)?);
        masks.push(LabelMask::new(w, h, ids)?);
    }
    Ok(SynthOutput { frames, masks })
}

fn paint(shape: &Shape, c: (f64, f64), w: usize, h: usize, mut f: impl FnMut(usize)) {
    let (ex, ey) = shape.extent();
    let x0 = (c.0 - ex - 1.0).floor().max(0.0) as usize;
    let y0 = (c.1 - ey - 1.0).floor().max(0.0) as usize;
    let x1 = ((c.0 + ex + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((c.1 + ey + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(c, x, y) {
                f(y * w + x);
            }
        }
    }
}

/// A named sequence of a fixed suite with its generator seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub spec: SynthSpec,
    pub seed: u64,
}

fn disk(radius: f64) -> Shape {
    Shape::Disk { radius }
}

fn rect(width: f64, height: f64) -> Shape {
    Shape::Rect { width, height }
}

fn obj(shape: Shape, color: [u8; 3], position: [f64; 2], velocity: [f64; 2], drift: [f64; 3]) -> SynthObject {
    SynthObject {
        shape,
        color,
        position,
        velocity,
        drift,
    }
}

fn still(shape: Shape, color: [u8; 3], position: [f64; 2]) -> SynthObject {
    obj(shape, color, position, [0.0; 2], [0.0; 3])
}

fn bar(shape: Shape, position: [f64; 2], velocity: [f64; 2], start_frame: usize, end_frame: usize) -> Occluder {
    Occluder {
        shape,
        color: [90, 90, 90],
        position,
        velocity,
        start_frame,
        end_frame,
    }
}

fn canvas(noise: u8, objects: Vec<SynthObject>, distractors: Vec<SynthObject>, occluders: Vec<Occluder>) -> SynthSpec {
    SynthSpec {
        width: 128,
        height: 128,
        frames: 30,
        background: [24, 28, 36],
        noise,
        objects,
        distractors,
        occluders,
    }
}

const RED: [u8; 3] = [210, 60, 50];
const GREEN: [u8; 3] = [60, 200, 110];
const BLUE: [u8; 3] = [120, 110, 230];
const YELLOW: [u8; 3] = [230, 210, 60];

/// Eight 128×128, 30-frame sequences with motion, occlusion, colour drift,
/// same-coloured distractors and noise.
pub fn benchmark_suite() -> Vec<SuiteEntry> {
    vec![
        SuiteEntry {
            name: "drifting-disk",
            seed: 101,
            spec: canvas(
                6,
                vec![obj(disk(14.0), RED, [36.0, 40.0], [1.5, 1.0], [-2.0, 1.0, 2.5])],
                vec![still(disk(10.0), RED, [100.0, 100.0])],
                vec![],
            ),
        },
        SuiteEntry {
            name: "occluded-pair",
            seed: 202,
            spec: canvas(
                6,
                vec![
                    obj(disk(13.0), RED, [34.0, 64.0], [1.0, 0.0], [0.0; 3]),
                    obj(rect(24.0, 18.0), GREEN, [96.0, 40.0], [-0.5, 1.0], [1.5, -1.5, 0.0]),
                ],
                vec![],
                vec![bar(rect(10.0, 128.0), [-5.0, 64.0], [5.0, 0.0], 4, 30)],
            ),
        },
        SuiteEntry {
            name: "three-shapes",
            seed: 303,
            spec: canvas(
                8,
                vec![
                    obj(disk(12.0), RED, [28.0, 28.0], [2.0, 1.0], [0.0, 1.5, 1.5]),
                    obj(rect(22.0, 22.0), GREEN, [96.0, 30.0], [-1.0, 1.5], [1.5, -2.0, 0.0]),
                    obj(disk(11.0), BLUE, [64.0, 100.0], [1.0, -1.0], [2.0, 0.0, -2.0]),
                ],
                vec![still(rect(14.0, 14.0), GREEN, [20.0, 108.0])],
                vec![],
            ),
        },
        SuiteEntry {
            name: "wall-bounce",
            seed: 404,
            spec: canvas(
                6,
                vec![obj(disk(12.0), YELLOW, [100.0, 60.0], [3.0, 2.0], [-1.5, -2.5, 1.5])],
                vec![still(disk(8.0), YELLOW, [24.0, 24.0]), still(disk(8.0), YELLOW, [24.0, 104.0])],
                vec![],
            ),
        },
        SuiteEntry {
            name: "small-target",
            seed: 505,
            spec: canvas(
                4,
                vec![
                    obj(disk(5.0), RED, [40.0, 40.0], [1.0, 0.5], [0.0, 1.5, 1.5]),
                    obj(rect(30.0, 20.0), BLUE, [90.0, 90.0], [-0.5, -0.5], [0.0; 3]),
                ],
                vec![still(disk(5.0), RED, [100.0, 24.0])],
                vec![],
            ),
        },
        SuiteEntry {
            name: "noisy-pair",
            seed: 606,
            spec: canvas(
                16,
                vec![
                    obj(rect(26.0, 20.0), YELLOW, [40.0, 80.0], [1.0, -1.0], [-2.0, -1.0, 1.0]),
                    obj(disk(13.0), BLUE, [90.0, 40.0], [-1.0, 1.0], [1.5, 1.5, -1.0]),
                ],
                vec![still(disk(9.0), BLUE, [24.0, 24.0])],
                vec![],
            ),
        },
        SuiteEntry {
            name: "passing-occluder",
            seed: 707,
            spec: canvas(
                6,
                vec![obj(rect(28.0, 24.0), GREEN, [64.0, 64.0], [0.5, 0.5], [2.0, -2.0, 1.0])],
                vec![still(rect(12.0, 12.0), GREEN, [110.0, 18.0])],
                vec![bar(rect(128.0, 8.0), [64.0, 20.0], [0.0, 4.0], 2, 22)],
            ),
        },
        SuiteEntry {
            name: "crossing-paths",
            seed: 808,
            spec: canvas(
                8,
                vec![
                    obj(disk(12.0), RED, [24.0, 64.0], [2.5, 0.0], [0.0, 1.0, 2.0]),
                    obj(disk(12.0), GREEN, [104.0, 60.0], [-2.5, 0.0], [2.0, -1.0, 0.0]),
                ],
                vec![],
                vec![],
            ),
        },
    ]
}

/// Shorter sequences, disjoint from the benchmark, for fitting fusion weights.
pub fn training_suite() -> Vec<SuiteEntry> {
    let short = |mut s: SynthSpec| {
        s.frames = 16;
        s
    };
    vec![
        SuiteEntry {
            name: "train-pair",
            seed: 9001,
            spec: short(canvas(
                8,
                vec![
                    obj(disk(12.0), BLUE, [40.0, 90.0], [1.5, -1.0], [1.5, 1.0, -2.0]),
                    obj(rect(20.0, 26.0), RED, [90.0, 40.0], [-1.0, 1.5], [0.0, 2.0, 1.0]),
                ],
                vec![still(disk(8.0), RED, [20.0, 20.0])],
                vec![bar(rect(8.0, 128.0), [0.0, 64.0], [6.0, 0.0], 3, 16)],
            )),
        },
        SuiteEntry {
            name: "train-single",
            seed: 9002,
            spec: short(canvas(
                10,
                vec![obj(rect(24.0, 16.0), YELLOW, [64.0, 50.0], [2.0, 1.0], [-2.0, 0.0, 2.0])],
                vec![still(rect(10.0, 10.0), YELLOW, [110.0, 110.0])],
                vec![],
            )),
        },
    ]
}

/// Motionless, noise-free sequences: every frame equals the first.
pub fn static_suite() -> Vec<SuiteEntry> {
    let frozen = |mut s: SynthSpec| {
        for o in &mut s.objects {
            o.velocity = [0.0; 2];
            o.drift = [0.0; 3];
        }
        s.noise = 0;
        s.occluders.clear();
        s
    };
    vec![
        SuiteEntry {
            name: "static-disk",
            seed: 11,
            spec: frozen(benchmark_suite()[0].spec.clone()),
        },
        SuiteEntry {
            name: "static-three",
            seed: 12,
            spec: frozen(benchmark_suite()[2].spec.clone()),
        },
        SuiteEntry {
            name: "static-small",
            seed: 13,
            spec: frozen(benchmark_suite()[4].spec.clone()),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_disk(velocity: [f64; 2], noise: u8, frames: usize) -> SynthSpec {
        SynthSpec {
            width: 64,
            height: 64,
            frames,
            background: [0, 0, 0],
            noise,
            objects: vec![obj(disk(6.0), [200, 100, 50], [20.0, 30.0], velocity, [0.0; 3])],
            distractors: vec![],
            occluders: vec![],
        }
    }

    fn centroid(m: &LabelMask, id: u8) -> (f64, f64) {
        let mut s = (0.0, 0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) == id {
                    s = (s.0 + x as f64, s.1 + y as f64, s.2 + 1.0);
                }
            }
        }
        (s.0 / s.2, s.1 / s.2)
    }

    #[test]
    fn frozen_scene_repeats() {
        let out = synth_generate(&one_disk([0.0; 2], 0, 4), 1).unwrap();
        assert!(out.frames.windows(2).all(|w| w[0] == w[1]));
        assert!(out.masks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn constant_velocity_kinematics() {
        let out = synth_generate(&one_disk([2.0, 0.0], 0, 5), 1).unwrap();
        let a = centroid(&out.masks[0], 1);
        let b = centroid(&out.masks[4], 1);
        assert!((b.0 - a.0 - 8.0).abs() < 1e-9);
        assert!((b.1 - a.1).abs() < 1e-9);
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(5.0, 2.0, 0.0, 10.0, 3), 9.0);
        assert_eq!(bounce(5.0, 2.0, 0.0, 10.0, 4), 7.0);
        assert_eq!(bounce(5.0, -2.0, 0.0, 10.0, 4), 3.0);
    }

    #[test]
    fn occluder_dips_area() {
        let mut spec = one_disk([0.0; 2], 0, 12);
        spec.occluders.push(Occluder {
            shape: rect(4.0, 64.0),
            color: [9, 9, 9],
            position: [10.0, 32.0],
            velocity: [2.0, 0.0],
            start_frame: 0,
            end_frame: 12,
        });
        let out = synth_generate(&spec, 1).unwrap();
        let full = synth_generate(&one_disk([0.0; 2], 0, 1), 1).unwrap().masks[0].area(1);
        let areas: Vec<usize> = out.masks.iter().map(|m| m.area(1)).collect();
        assert_eq!(areas[0], full);
        assert!(areas.iter().any(|&a| a < full));
        assert_eq!(*areas.last().unwrap(), full);
    }

    #[test]
    fn noise_is_seeded() {
        let spec = one_disk([1.0, 1.0], 10, 3);
        assert_eq!(synth_generate(&spec, 9).unwrap(), synth_generate(&spec, 9).unwrap());
        assert_ne!(synth_generate(&spec, 9).unwrap().frames, synth_generate(&spec, 10).unwrap().frames);
    }

    #[test]
    fn spec_validation() {
        let mut s = one_disk([0.0; 2], 0, 2);
        s.objects[0].position = [2.0, 30.0];
        assert!(s.validate().is_err());
        let mut s = one_disk([0.0; 2], 0, 2);
        s.objects.push(obj(disk(3.0), [220, 130, 90], [50.0, 50.0], [0.0; 2], [0.0; 3]));
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        for e in benchmark_suite() {
            let text = e.spec.to_toml_string();
            assert_eq!(SynthSpec::from_toml_str(&text).unwrap(), e.spec);
        }
    }

    #[test]
    fn suites_are_valid() {
        assert_eq!(benchmark_suite().len(), 8);
        for e in benchmark_suite().iter().chain(&static_suite()) {
            e.spec.validate().unwrap();
            assert_eq!((e.spec.width, e.spec.height, e.spec.frames), (128, 128, 30));
        }
    }
}
