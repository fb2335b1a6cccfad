//! Foreground/background space-time memory.
//!
//! Past frames are encoded per object into key and value maps. Both mask
//! fusion schemes are available: multiplying the soft indicator into the
//! embedding (separate foreground and background branches), or a sigmoid
//! spatial prior computed from the embedding concatenated with the mask. The
//! last value channel always carries the soft object indicator, so the dense
//! read returns an attention-weighted object-evidence score in that channel.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::io::{FeatureMap, Grid, StmScheme, Tensor};
use crate::ops::{derive_seed, dot, sigmoid, softmax_inplace, Linear};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueMaps {
    keys: FeatureMap,
    values: FeatureMap,
}

impl KeyValueMaps {
    pub fn new(keys: FeatureMap, values: FeatureMap) -> Result<Self> {
        if !keys.same_spatial(&values) {
            return Err(Error::Shape("keys and values differ in spatial size".into()));
        }
        if values.channels() < 1 {
            return Err(Error::Shape("values need an indicator channel".into()));
        }
        let indicator = values.plane(values.channels() - 1);
        if indicator.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("indicator channel outside [0,1]".into()));
        }
        Ok(Self { keys, values })
    }

    pub fn keys(&self) -> &FeatureMap {
        &self.keys
    }

    pub fn values(&self) -> &FeatureMap {
        &self.values
    }

    pub fn key_channels(&self) -> usize {
        self.keys.channels()
    }

    pub fn value_channels(&self) -> usize {
        self.values.channels()
    }
}

/// Seeded 1×1 convolutions of the memory encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub key: Linear,
    /// Maps features to all value channels except the trailing indicator.
    pub value: Linear,
    /// Scheme-B prior over `[embedding, indicator]`, one output.
    pub prior: Linear,
}

impl ProjectionWeights {
    pub fn seeded(in_dim: usize, key_dim: usize, value_dim: usize, seed: u64, key_gain: f32) -> Self {
        let mut key = Linear::seeded(in_dim, key_dim, derive_seed(seed, 1), key_gain);
        let mut value = Linear::seeded(in_dim, value_dim - 1, derive_seed(seed, 2), 1.0);
        let mut prior = Linear::seeded(in_dim + 1, 1, derive_seed(seed, 3), 1.0);
        let mut r = crate::ops::rng(derive_seed(seed, 4));
        key.bias = crate::ops::gaussian_vec(&mut r, key_dim, 0.1);
        value.bias = crate::ops::gaussian_vec(&mut r, value_dim - 1, 0.1);
        // the prior should open where the object is
        prior.weight[in_dim] = prior.weight[in_dim].abs() + 2.0;
        Self { key, value, prior }
    }

    /// Identity key and value projections with a neutral prior.
    pub fn identity(in_dim: usize) -> Self {
        Self {
            key: Linear::identity(in_dim, in_dim),
            value: Linear::identity(in_dim, in_dim),
            prior: Linear::zeros(in_dim + 1, 1),
        }
    }

    pub fn value_channels(&self) -> usize {
        self.value.out_dim + 1
    }
}

fn check_indicator(embedding: &FeatureMap, indicator: &Grid) -> Result<()> {
    if embedding.height() != indicator.height() || embedding.width() != indicator.width() {
        return Err(Error::Shape(format!(
            "indicator {}x{} vs embedding {}x{}",
            indicator.height(),
            indicator.width(),
            embedding.height(),
            embedding.width()
        )));
    }
    Ok(())
}

/// Scheme A: `fg = e ⊙ m`, `bg = e ⊙ (1 − m)`, broadcast over channels.
pub fn separate_scheme_a(embedding: &FeatureMap, indicator: &Grid) -> Result<(FeatureMap, FeatureMap)> {
    check_indicator(embedding, indicator)?;
    let mut fg = embedding.clone();
    let mut bg = embedding.clone();
    let m = indicator.data();
    for c in 0..embedding.channels() {
        let src = embedding.plane(c);
        for (p, f) in fg.plane_mut(c).iter_mut().enumerate() {
            *f = src[p] * m[p];
        }
        for (p, b) in bg.plane_mut(c).iter_mut().enumerate() {
            *b = complement(src[p], src[p] * m[p]);
        }
    }
    Ok((fg, bg))
}

/// `e − f`, nudged by an ulp when needed so that `f + (e − f)` rounds back
/// to exactly `e`.
fn complement(e: f32, f: f32) -> f32 {
    let mut b = e - f;
    for _ in 0..4 {
        let sum = f + b;
        if sum == e {
            break;
        }
        b = if sum < e { b.next_up() } else { b.next_down() };
    }
    b
}

/// Scheme B: `prior = σ(w·[e, m] + b)`, modulated features `e ⊙ prior`.
pub fn spatial_prior_scheme_b(
    embedding: &FeatureMap,
    indicator: &Grid,
    weights: &ProjectionWeights,
) -> Result<(Grid, FeatureMap)> {
    check_indicator(embedding, indicator)?;
    let c = embedding.channels();
    if weights.prior.in_dim != c + 1 || weights.prior.out_dim != 1 {
        return Err(Error::Shape(format!(
            "prior expects {} inputs, embedding has {c} channels",
            weights.prior.in_dim - 1
        )));
    }
    let n = embedding.cells();
    let w = weights.prior.row(0);
    let mut prior = Grid::new(embedding.height(), embedding.width(), 0.0);
    for p in 0..n {
        let mut z = weights.prior.bias[0] + w[c] * indicator.data()[p];
        for ch in 0..c {
            z += w[ch] * embedding.plane(ch)[p];
        }
        prior.data_mut()[p] = sigmoid(z);
    }
    let mut modulated = embedding.clone();
    for ch in 0..c {
        for (v, &g) in modulated.plane_mut(ch).iter_mut().zip(prior.data()) {
            *v *= g;
        }
    }
    Ok((prior, modulated))
}

/// Key and value maps from separated branches: both projections act on
/// `fg + bg`; the indicator is appended as the last value channel.
pub fn project_key_value(
    fg: &FeatureMap,
    bg: &FeatureMap,
    indicator: &Grid,
    weights: &ProjectionWeights,
) -> Result<KeyValueMaps> {
    let merged = crate::ops::add_scaled(fg, bg, 1.0)?;
    project_features(&merged, indicator, weights)
}

/// Key and value maps of already fused features.
pub fn project_features(
    features: &FeatureMap,
    indicator: &Grid,
    weights: &ProjectionWeights,
) -> Result<KeyValueMaps> {
    check_indicator(features, indicator)?;
    let keys = weights.key.apply(features)?;
    let projected = weights.value.apply(features)?;
    let n = features.cells();
    let mut data = projected.data().to_vec();
    data.extend(indicator.data().iter().map(|v| v.clamp(0.0, 1.0)));
    let values = FeatureMap::new(
        weights.value_channels(),
        features.height(),
        features.width(),
        features.stride(),
        data,
    )?;
    debug_assert_eq!(values.cells(), n);
    KeyValueMaps::new(keys, values)
}

/// Encodes one frame for one object under the selected fusion scheme.
pub fn encode(
    embedding: &FeatureMap,
    indicator: &Grid,
    scheme: StmScheme,
    weights: &ProjectionWeights,
) -> Result<KeyValueMaps> {
    match scheme {
        StmScheme::Separate => {
            let (fg, bg) = separate_scheme_a(embedding, indicator)?;
            project_key_value(&fg, &bg, indicator, weights)
        }
        StmScheme::SpatialPrior => {
            let (_, modulated) = spatial_prior_scheme_b(embedding, indicator, weights)?;
            project_features(&modulated, indicator, weights)
        }
    }
}

/// Per-object time-indexed key/value store.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    interval: usize,
    entries: BTreeMap<u8, Vec<(usize, KeyValueMaps)>>,
    last_write: BTreeMap<u8, usize>,
}

impl MemoryBank {
    pub fn new(interval: usize) -> Result<Self> {
        if interval < 1 {
            return Err(Error::Invalid("memory interval must be at least 1".into()));
        }
        Ok(Self {
            interval,
            entries: BTreeMap::new(),
            last_write: BTreeMap::new(),
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    /// Offers frame `frame_idx` to the bank; returns whether it was stored.
    /// Frame 0 and multiples of the interval are kept.
    pub fn write(&mut self, frame_idx: usize, maps: KeyValueMaps, object: u8) -> Result<bool> {
        if let Some(&last) = self.last_write.get(&object) {
            if frame_idx <= last {
                return Err(Error::OutOfOrder {
                    object,
                    frame: frame_idx,
                    last,
                });
            }
        }
        let stored = self.entries.entry(object).or_default();
        if let Some((_, first)) = stored.first() {
            if first.keys().channels() != maps.keys().channels()
                || first.values().channels() != maps.values().channels()
                || !first.keys().same_spatial(maps.keys())
            {
                return Err(Error::Shape("memory entry layout differs from the bank".into()));
            }
        }
        self.last_write.insert(object, frame_idx);
        if frame_idx % self.interval == 0 {
            stored.push((frame_idx, maps));
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn frames(&self, object: u8) -> Vec<usize> {
        self.entries
            .get(&object)
            .map(|v| v.iter().map(|(t, _)| *t).collect())
            .unwrap_or_default()
    }

    pub fn entries(&self, object: u8) -> &[(usize, KeyValueMaps)] {
        self.entries.get(&object).map_or(&[], Vec::as_slice)
    }

    /// Stacked keys `[T, C_k, H, W]` and values `[T, C_v, H, W]` for dumping.
    pub fn export(&self, object: u8) -> Option<(Tensor, Tensor)> {
        let entries = self.entries(object);
        let (_, first) = entries.first()?;
        let (k, v) = (first.keys(), first.values());
        let keys = entries.iter().flat_map(|(_, m)| m.keys().data().iter().copied()).collect();
        let values = entries.iter().flat_map(|(_, m)| m.values().data().iter().copied()).collect();
        Some((
            Tensor::new(vec![entries.len(), k.channels(), k.height(), k.width()], keys).ok()?,
            Tensor::new(vec![entries.len(), v.channels(), v.height(), v.width()], values).ok()?,
        ))
    }
}

/// Memory contents flattened to position-major key and value matrices.
struct Flattened {
    keys: Vec<f32>,
    values: Vec<f32>,
    positions: usize,
    key_dim: usize,
    value_dim: usize,
}

fn flatten(query: &KeyValueMaps, bank: &MemoryBank, object: u8) -> Result<Flattened> {
    let entries = bank.entries(object);
    if entries.is_empty() {
        return Err(Error::EmptyBank(object));
    }
    let key_dim = query.key_channels();
    let value_dim = entries[0].1.value_channels();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut positions = 0;
    for (_, maps) in entries {
        if maps.key_channels() != key_dim {
            return Err(Error::Shape(format!(
                "query keys have {key_dim} channels, memory has {}",
                maps.key_channels()
            )));
        }
        keys.extend(maps.keys().to_cell_major());
        values.extend(maps.values().to_cell_major());
        positions += maps.keys().cells();
    }
    Ok(Flattened {
        keys,
        values,
        positions,
        key_dim,
        value_dim,
    })
}

/// Softmax attention of every query cell over every stored memory position,
/// one row per query cell.
pub fn attention_rows(query: &KeyValueMaps, bank: &MemoryBank, object: u8) -> Result<Vec<Vec<f32>>> {
    let mem = flatten(query, bank, object)?;
    let q = query.keys().to_cell_major();
    Ok((0..query.keys().cells())
        .into_par_iter()
        .map(|p| attention_row(&q[p * mem.key_dim..(p + 1) * mem.key_dim], &mem))
        .collect())
}

fn attention_row(qk: &[f32], mem: &Flattened) -> Vec<f32> {
    let scale = 1.0 / (mem.key_dim as f32).sqrt();
    let mut row: Vec<f32> = mem
        .keys
        .chunks_exact(mem.key_dim)
        .map(|mk| dot(qk, mk) * scale)
        .collect();
    softmax_inplace(&mut row);
    row
}

/// Dense space-time read: for each query cell, the softmax-weighted sum of
/// all stored values. The last output channel is the object-evidence score.
pub fn memory_read(query: &KeyValueMaps, bank: &MemoryBank, object: u8) -> Result<FeatureMap> {
    let mem = flatten(query, bank, object)?;
    let q = query.keys().to_cell_major();
    let n = query.keys().cells();
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let a = attention_row(&q[p * mem.key_dim..(p + 1) * mem.key_dim], &mem);
            let mut out = vec![0.0f32; mem.value_dim];
            for (w, v) in a.iter().zip(mem.values.chunks_exact(mem.value_dim)) {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
            out
        })
        .collect();
    let mut data = vec![0.0f32; mem.value_dim * n];
    for (p, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[c * n + p] = v;
        }
    }
    debug_assert!(mem.positions > 0);
    FeatureMap::new(
        mem.value_dim,
        query.keys().height(),
        query.keys().width(),
        query.keys().stride(),
        data,
    )
}

/// Reference read with plain nested loops and f64 accumulation.
pub fn memory_read_bruteforce(query: &KeyValueMaps, bank: &MemoryBank, object: u8) -> Result<FeatureMap> {
    let entries = bank.entries(object);
    if entries.is_empty() {
        return Err(Error::EmptyBank(object));
    }
    let qk = query.keys();
    let ck = qk.channels();
    let cv = entries[0].1.value_channels();
    let scale = 1.0 / (ck as f64).sqrt();
    let n = qk.cells();
    let mut out = vec![0.0f32; cv * n];
    for p in 0..n {
        let mut logits = Vec::new();
        for (_, maps) in entries {
            let mk = maps.keys();
            if mk.channels() != ck {
                return Err(Error::Shape("memory key width differs from query".into()));
            }
            for q in 0..mk.cells() {
                let mut s = 0.0f64;
                for c in 0..ck {
                    s += qk.plane(c)[p] as f64 * mk.plane(c)[q] as f64;
                }
                logits.push(s * scale);
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = vec![0.0f64; cv];
        let mut j = 0;
        for (_, maps) in entries {
            let mv = maps.values();
            for q in 0..mv.cells() {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += weights[j] / total * mv.plane(c)[q] as f64;
                }
                j += 1;
            }
        }
        for (c, a) in acc.iter().enumerate() {
            out[c * n + p] = *a as f32;
        }
    }
    FeatureMap::new(cv, qk.height(), qk.width(), qk.stride(), out)
}
