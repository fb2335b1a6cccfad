use crate::{Error, Result};

/// Pyramid strides, finest first.
pub const STRIDES: [usize; 3] = [4, 8, 16];

/// Smallest accepted frame side in pixels.
pub const MIN_SIDE: usize = 8;

/// An 8-bit RGB frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Invalid(format!(
                "frame {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self> {
        let rgb = color.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut rgb = vec![0u8; width * height * 3];
        for c in 0..3 {
            let plane: Vec<f32> = self.rgb.iter().skip(c).step_by(3).map(|&v| v as f32).collect();
            let grid = Grid::from_vec(self.height, self.width, plane)?;
            let up = grid.resize_bilinear(height, width);
            for (i, v) in up.data().iter().enumerate() {
                rgb[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Self::new(width, height, rgb)
    }

    /// Copies the pixels inside `rect`; the crop may be smaller than
    /// [`MIN_SIDE`] only if it is immediately resized.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        let mut rgb = Vec::with_capacity(rect.width * rect.height * 3);
        for y in rect.y..rect.y + rect.height {
            let row = (y * self.width + rect.x) * 3;
            rgb.extend_from_slice(&self.rgb[row..row + rect.width * 3]);
        }
        Self::new(rect.width, rect.height, rgb)
    }

    /// Crop followed by a bilinear resize, without the minimum-size check on
    /// the intermediate crop.
    pub fn crop_resized(&self, rect: Rect, width: usize, height: usize) -> Result<Self> {
        let mut rgb = vec![0u8; width * height * 3];
        for c in 0..3 {
            let mut plane = Vec::with_capacity(rect.width * rect.height);
            for y in rect.y..rect.y + rect.height {
                for x in rect.x..rect.x + rect.width {
                    plane.push(self.rgb[(y * self.width + x) * 3 + c] as f32);
                }
            }
            let grid = Grid::from_vec(rect.height, rect.width, plane)?;
            let up = grid.resize_bilinear(height, width);
            for (i, v) in up.data().iter().enumerate() {
                rgb[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Self::new(width, height, rgb)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Per-pixel object ids, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn area(&self, object: u8) -> usize {
        self.ids.iter().filter(|&&v| v == object).count()
    }

    /// Distinct nonzero ids in ascending order.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.ids {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Nearest-neighbour resize with pixel-center alignment.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                ids.push(self.get(sx, sy));
            }
        }
        Self { width, height, ids }
    }

    pub fn crop(&self, rect: Rect) -> Self {
        let mut ids = Vec::with_capacity(rect.width * rect.height);
        for y in rect.y..rect.y + rect.height {
            let row = y * self.width + rect.x;
            ids.extend_from_slice(&self.ids[row..row + rect.width]);
        }
        Self {
            width: rect.width,
            height: rect.height,
            ids,
        }
    }

    /// Bounding box of the pixels labelled `object`.
    pub fn bounding_box(&self, object: u8) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == object {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect {
            x: x0,
            y: y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        })
    }
}

fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// The tracked objects, fixed by the first-frame mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectSet {
    ids: Vec<u8>,
}

impl ObjectSet {
    pub fn new(mut ids: Vec<u8>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty object set".into()));
        }
        if ids.contains(&0) {
            return Err(Error::Invalid("object id 0 is reserved for background".into()));
        }
        let n = ids.len();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Invalid("duplicate object ids".into()));
        }
        Ok(Self { ids })
    }

    pub fn from_mask(mask: &LabelMask) -> Result<Self> {
        Self::new(mask.object_ids())
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u8) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }
}

/// A single-channel float map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, fill: f32) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Grid {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys: Vec<_> = (0..height)
            .map(|y| bilinear_taps(y, height, self.height))
            .collect();
        let xs: Vec<_> = (0..width)
            .map(|x| bilinear_taps(x, width, self.width))
            .collect();
        let mut data = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid { height, width, data }
    }
}

fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f32) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, (pos - i0 as f64).clamp(0.0, 1.0) as f32)
}

/// Channel-major feature map at one of the pyramid strides.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if !STRIDES.contains(&stride) {
            return Err(Error::Invalid(format!("stride {stride} not in {STRIDES:?}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite feature value {v}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.cells();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Feature vector of one cell, gathered across channels.
    pub fn vector(&self, cell: usize) -> Vec<f32> {
        let n = self.cells();
        (0..self.channels).map(|c| self.data[c * n + cell]).collect()
    }

    /// Cell-major copy (`cells × channels`), handy for dense dot products.
    pub fn to_cell_major(&self) -> Vec<f32> {
        let n = self.cells();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for (i, &v) in self.plane(c).iter().enumerate() {
                out[i * self.channels + c] = v;
            }
        }
        out
    }

    pub fn same_spatial(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> FeatureMap {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.get(c, y, x);
                    out.data[(c * self.height + y) * self.width + (self.width - 1 - x)] = v;
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> super::Tensor {
        super::Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("feature map dims match its data")
    }
}

/// Feature maps at strides 4, 8 and 16 of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [FeatureMap; 3]) -> Result<Self> {
        for (level, stride) in levels.iter().zip(STRIDES) {
            if level.stride() != stride {
                return Err(Error::Invalid(format!(
                    "pyramid level has stride {}, expected {stride}",
                    level.stride()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, stride: usize) -> &FeatureMap {
        &self.levels[level_index(stride)]
    }

    pub fn levels(&self) -> &[FeatureMap; 3] {
        &self.levels
    }

    pub fn into_levels(self) -> [FeatureMap; 3] {
        self.levels
    }

    pub fn flip_horizontal(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.clone().map(|l| l.flip_horizontal()),
        }
    }
}

fn level_index(stride: usize) -> usize {
    match stride {
        4 => 0,
        8 => 1,
        16 => 2,
        _ => panic!("no pyramid level at stride {stride}"),
    }
}

/// Per-pixel distribution over background (index 0) and the tracked objects.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    probs: Vec<f32>,
}

impl ProbMap {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    /// `probs` is class-major: `(ids.len() + 1) × height × width`.
    pub fn new(height: usize, width: usize, ids: Vec<u8>, probs: Vec<f32>) -> Result<Self> {
        let classes = ids.len() + 1;
        let n = height * width;
        if probs.len() != classes * n {
            return Err(Error::Shape(format!(
                "prob map {classes}x{height}x{width} needs {} values, got {}",
                classes * n,
                probs.len()
            )));
        }
        for p in 0..n {
            let mut sum = 0.0f64;
            for k in 0..classes {
                let v = probs[k * n + p];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Invalid(format!("probability {v} at pixel {p}")));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE as f64 {
                return Err(Error::Invalid(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            ids,
            probs,
        })
    }

    /// Builds a map from nonnegative per-class scores by normalising each pixel.
    pub fn from_unnormalized(
        height: usize,
        width: usize,
        ids: Vec<u8>,
        mut scores: Vec<f32>,
    ) -> Result<Self> {
        let classes = ids.len() + 1;
        let n = height * width;
        if scores.len() != classes * n {
            return Err(Error::Shape(format!(
                "prob map {classes}x{height}x{width} needs {} values, got {}",
                classes * n,
                scores.len()
            )));
        }
        for p in 0..n {
            let sum: f64 = (0..classes).map(|k| scores[k * n + p] as f64).sum();
            for k in 0..classes {
                let v = &mut scores[k * n + p];
                *v = if sum > 0.0 {
                    (*v as f64 / sum) as f32
                } else if k == 0 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        Self::new(height, width, ids, scores)
    }

    /// One-hot map of a label mask.
    pub fn from_mask(mask: &LabelMask, ids: &[u8]) -> Self {
        let n = mask.width() * mask.height();
        let mut probs = vec![0.0; (ids.len() + 1) * n];
        for (p, &id) in mask.ids().iter().enumerate() {
            let k = ids.iter().position(|&v| v == id).map_or(0, |i| i + 1);
            probs[k * n + p] = 1.0;
        }
        Self {
            height: mask.height(),
            width: mask.width(),
            ids: ids.to_vec(),
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn class_plane(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.probs[k * n..(k + 1) * n]
    }

    pub fn class_grid(&self, k: usize) -> Grid {
        Grid::from_vec(self.height, self.width, self.class_plane(k).to_vec())
            .expect("plane matches map size")
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f32 {
        self.probs[(k * self.height + y) * self.width + x]
    }

    pub fn same_layout(&self, other: &ProbMap) -> bool {
        self.height == other.height && self.width == other.width && self.ids == other.ids
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let n = self.height * self.width;
        let classes = self.classes();
        let ids = (0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..classes {
                    if self.probs[k * n + p] > self.probs[best * n + p] {
                        best = k;
                    }
                }
                if best == 0 {
                    0
                } else {
                    self.ids[best - 1]
                }
            })
            .collect();
        LabelMask::new(self.width, self.height, ids).expect("argmax matches map size")
    }

    pub fn flip_horizontal(&self) -> ProbMap {
        let planes = (0..self.classes())
            .flat_map(|k| self.class_grid(k).flip_horizontal().into_vec())
            .collect();
        ProbMap {
            height: self.height,
            width: self.width,
            ids: self.ids.clone(),
            probs: planes,
        }
    }

    /// Bilinear resize of every class plane followed by re-normalisation.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ProbMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let scores = (0..self.classes())
            .flat_map(|k| self.class_grid(k).resize_bilinear(height, width).into_vec())
            .map(|v| v.max(0.0))
            .collect();
        ProbMap::from_unnormalized(height, width, self.ids.clone(), scores)
            .expect("resized probabilities stay valid")
    }

    pub fn to_tensor(&self) -> super::Tensor {
        super::Tensor::new(
            vec![self.classes(), self.height, self.width],
            self.probs.clone(),
        )
        .expect("prob map dims match its data")
    }

}
