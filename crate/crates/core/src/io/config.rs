//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored, unknown or repeated keys are
//! rejected, absent keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::neck::DecoderWeights;
use crate::{Error, Result};

/// Mask fusion scheme of the foreground/background memory encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StmScheme {
    /// Indicator multiplied into the embedding (separate FG and BG branches).
    Separate,
    /// Sigmoid spatial prior from the embedding concatenated with the mask.
    SpatialPrior,
}

impl StmScheme {
    fn as_str(self) -> &'static str {
        match self {
            StmScheme::Separate => "a",
            StmScheme::SpatialPrior => "b",
        }
    }
}

impl FromStr for StmScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "a" | "A" => Ok(StmScheme::Separate),
            "b" | "B" => Ok(StmScheme::SpatialPrior),
            _ => Err("must be `a` or `b`".into()),
        }
    }
}

/// Every toggle and threshold of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Embedder channels at strides 4, 8 and 16.
    pub channels: [usize; 3],
    pub embed_seed: u64,
    pub position_weight: f32,
    pub color_scale: f32,

    pub neck_channels: usize,
    pub fpn_fusion: f32,
    pub pan_fusion: f32,
    pub oc_key_channels: usize,
    pub oc_gain: f32,
    pub oc_blend: f32,

    pub stm_scheme: StmScheme,
    pub key_channels: usize,
    /// Total value channels, the last one being the object indicator.
    pub value_channels: usize,
    pub key_gain: f32,
    pub memory_interval: usize,

    pub match_bias: f32,
    pub local_radius: usize,
    pub gate_scale: f32,

    pub refine_weight: f32,
    pub refine_radius: usize,
    pub refine_wide_radius: usize,
    pub refine_color_scale: f32,

    pub decoder: DecoderWeights,

    pub temporal_tau: f32,
    pub small_area_alpha: f32,
    pub crop_margin: f32,

    pub scales: Vec<f32>,
    pub flip: bool,

    pub stm: bool,
    pub matching: bool,
    pub fpn: bool,
    pub pan: bool,
    pub oc: bool,
    pub postproc: bool,
    pub ensemble: bool,

    pub ensemble_weights: Vec<f32>,
    pub ensemble_bias: f32,

    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channels: [16, 24, 32],
            embed_seed: 7,
            position_weight: 1.0,
            color_scale: 2.5,

            neck_channels: 32,
            fpn_fusion: 0.5,
            pan_fusion: 0.5,
            oc_key_channels: 16,
            oc_gain: 1.0,
            oc_blend: 0.5,

            stm_scheme: StmScheme::Separate,
            key_channels: 16,
            value_channels: 16,
            key_gain: 1.0,
            memory_interval: 5,

            match_bias: 0.0,
            local_radius: 4,
            gate_scale: 0.0,

            refine_weight: 8.0,
            refine_radius: 4,
            refine_wide_radius: 12,
            refine_color_scale: 8.0,

            decoder: DecoderWeights::default(),

            temporal_tau: 0.2,
            small_area_alpha: 0.005,
            crop_margin: 0.5,

            scales: vec![1.0],
            flip: false,

            stm: true,
            matching: true,
            fpn: true,
            pan: true,
            oc: true,
            postproc: true,
            ensemble: false,

            ensemble_weights: vec![1.0 / 3.0; 3],
            ensemble_bias: 0.0,

            seed: 1,
        }
    }
}

/// Number of base-model variants fused by the ensemble.
pub const ENSEMBLE_VARIANTS: usize = 3;

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(key: &str, range: &str) -> Error {
            Error::Config(format!("{key} must be in {range}"))
        }
        for (key, c) in ["channels_s4", "channels_s8", "channels_s16"]
            .iter()
            .zip(self.channels)
        {
            if c < crate::embedder::MIN_CHANNELS {
                return Err(bad(key, "[8,inf)"));
            }
        }
        if self.neck_channels < 1 {
            return Err(bad("neck_channels", "[1,inf)"));
        }
        if self.oc_key_channels < 1 {
            return Err(bad("oc_key_channels", "[1,inf)"));
        }
        if !(0.0..=1.0).contains(&self.oc_blend) {
            return Err(bad("oc_blend", "[0,1]"));
        }
        if self.key_channels < 1 {
            return Err(bad("key_channels", "[1,inf)"));
        }
        if self.value_channels < 2 {
            return Err(bad("value_channels", "[2,inf)"));
        }
        if self.memory_interval < 1 {
            return Err(bad("memory_interval", "[1,inf)"));
        }
        if !(self.temporal_tau > 0.0 && self.temporal_tau <= 1.0) {
            return Err(bad("temporal_tau", "(0,1]"));
        }
        if !(self.small_area_alpha > 0.0 && self.small_area_alpha < 1.0) {
            return Err(bad("small_area_alpha", "(0,1)"));
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return Err(bad("crop_margin", "[0,inf)"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(bad("scales", "(0,inf) with at least one entry"));
        }
        if self.ensemble_weights.len() != ENSEMBLE_VARIANTS {
            return Err(Error::Config(format!(
                "ensemble_weights must have {ENSEMBLE_VARIANTS} entries"
            )));
        }
        let floats = [
            ("position_weight", self.position_weight),
            ("color_scale", self.color_scale),
            ("fpn_fusion", self.fpn_fusion),
            ("pan_fusion", self.pan_fusion),
            ("oc_gain", self.oc_gain),
            ("key_gain", self.key_gain),
            ("match_bias", self.match_bias),
            ("gate_scale", self.gate_scale),
            ("refine_weight", self.refine_weight),
            ("refine_color_scale", self.refine_color_scale),
            ("ensemble_bias", self.ensemble_bias),
        ];
        for (key, v) in floats {
            if !v.is_finite() {
                return Err(bad(key, "finite reals"));
            }
        }
        if self.decoder.as_array().iter().any(|v| !v.is_finite())
            || self.ensemble_weights.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config("weights must be finite".into()));
        }
        Ok(())
    }

    /// Serialises every key; [`parse_config_str`] inverts it exactly.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("channels_s4", self.channels[0].to_string());
        put("channels_s8", self.channels[1].to_string());
        put("channels_s16", self.channels[2].to_string());
        put("embed_seed", self.embed_seed.to_string());
        put("position_weight", self.position_weight.to_string());
        put("color_scale", self.color_scale.to_string());
        put("neck_channels", self.neck_channels.to_string());
        put("fpn_fusion", self.fpn_fusion.to_string());
        put("pan_fusion", self.pan_fusion.to_string());
        put("oc_key_channels", self.oc_key_channels.to_string());
        put("oc_gain", self.oc_gain.to_string());
        put("oc_blend", self.oc_blend.to_string());
        put("stm_scheme", self.stm_scheme.as_str().to_string());
        put("key_channels", self.key_channels.to_string());
        put("value_channels", self.value_channels.to_string());
        put("key_gain", self.key_gain.to_string());
        put("memory_interval", self.memory_interval.to_string());
        put("match_bias", self.match_bias.to_string());
        put("local_radius", self.local_radius.to_string());
        put("gate_scale", self.gate_scale.to_string());
        put("refine_weight", self.refine_weight.to_string());
        put("refine_radius", self.refine_radius.to_string());
        put("refine_wide_radius", self.refine_wide_radius.to_string());
        put("refine_color_scale", self.refine_color_scale.to_string());
        for (k, v) in DecoderWeights::KEYS.iter().zip(self.decoder.as_array()) {
            put(k, v.to_string());
        }
        put("temporal_tau", self.temporal_tau.to_string());
        put("small_area_alpha", self.small_area_alpha.to_string());
        put("crop_margin", self.crop_margin.to_string());
        put("scales", join(&self.scales));
        put("flip", self.flip.to_string());
        put("stm", self.stm.to_string());
        put("matching", self.matching.to_string());
        put("fpn", self.fpn.to_string());
        put("pan", self.pan.to_string());
        put("oc", self.oc.to_string());
        put("postproc", self.postproc.to_string());
        put("ensemble", self.ensemble.to_string());
        put("ensemble_weights", join(&self.ensemble_weights));
        put("ensemble_bias", self.ensemble_bias.to_string());
        put("seed", self.seed.to_string());
        s
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "channels_s4" => self.channels[0] = num(value)?,
            "channels_s8" => self.channels[1] = num(value)?,
            "channels_s16" => self.channels[2] = num(value)?,
            "embed_seed" => self.embed_seed = num(value)?,
            "position_weight" => self.position_weight = num(value)?,
            "color_scale" => self.color_scale = num(value)?,
            "neck_channels" => self.neck_channels = num(value)?,
            "fpn_fusion" => self.fpn_fusion = num(value)?,
            "pan_fusion" => self.pan_fusion = num(value)?,
            "oc_key_channels" => self.oc_key_channels = num(value)?,
            "oc_gain" => self.oc_gain = num(value)?,
            "oc_blend" => self.oc_blend = num(value)?,
            "stm_scheme" => self.stm_scheme = value.parse()?,
            "key_channels" => self.key_channels = num(value)?,
            "value_channels" => self.value_channels = num(value)?,
            "key_gain" => self.key_gain = num(value)?,
            "memory_interval" => self.memory_interval = num(value)?,
            "match_bias" => self.match_bias = num(value)?,
            "local_radius" => self.local_radius = num(value)?,
            "gate_scale" => self.gate_scale = num(value)?,
            "refine_weight" => self.refine_weight = num(value)?,
            "refine_radius" => self.refine_radius = num(value)?,
            "refine_wide_radius" => self.refine_wide_radius = num(value)?,
            "refine_color_scale" => self.refine_color_scale = num(value)?,
            "temporal_tau" => self.temporal_tau = num(value)?,
            "small_area_alpha" => self.small_area_alpha = num(value)?,
            "crop_margin" => self.crop_margin = num(value)?,
            "scales" => self.scales = list(value)?,
            "flip" => self.flip = flag(value)?,
            "stm" => self.stm = flag(value)?,
            "matching" => self.matching = flag(value)?,
            "fpn" => self.fpn = flag(value)?,
            "pan" => self.pan = flag(value)?,
            "oc" => self.oc = flag(value)?,
            "postproc" => self.postproc = flag(value)?,
            "ensemble" => self.ensemble = flag(value)?,
            "ensemble_weights" => self.ensemble_weights = list(value)?,
            "ensemble_bias" => self.ensemble_bias = num(value)?,
            "seed" => self.seed = num(value)?,
            _ => match DecoderWeights::KEYS.iter().position(|&k| k == key) {
                Some(i) => *self.decoder.as_array_mut()[i] = num(value)?,
                None => return Err(format!("unknown key `{key}`")),
            },
        }
        Ok(())
    }
}

fn join(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}`"))
}

fn list(value: &str) -> std::result::Result<Vec<f32>, String> {
    value.split(',').map(|v| num(v.trim())).collect()
}

fn flag(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("cannot parse `{value}` as a flag")),
    }
}

pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
        config
            .set(key, value)
            .map_err(|m| Error::Config(format!("line {}: {key}: {m}", lineno + 1)))?;
    }
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
