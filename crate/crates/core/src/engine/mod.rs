//! Frame-by-frame orchestration: feature extraction, necks, memory and
//! matching evidence, decoding, test-time augmentation, variant fusion and
//! post-processing, plus the ablation harness.

mod ablation;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::embedder::{downsample_mask, extract_pyramid, EmbedderSpec};
use crate::ensemble::{ensemble_apply, EnsembleModel};
use crate::io::{FeatureMap, Grid, ImageFrame, LabelMask, ObjectSet, PipelineConfig, ProbMap, StmScheme, Tensor, MIN_SIDE};
use crate::matching::{instance_gate, match_global, match_local, pixel_refinement, GateWeights, InstanceGate, RefineParams};
use crate::neck::{
    apply_laterals, decode_logits, fpn_topdown, object_context, pan_bottomup, readout_vector,
    softmax_with_background, upsample_logits, DecoderWeights, EvidenceStack, FpnWeights, OcWeights,
};
use crate::ops::derive_seed;
use crate::postproc::{crop_refine, temporal_filter, CropRequest};
use crate::stm::{encode, memory_read, MemoryBank, ProjectionWeights};
use crate::{Error, Result};

pub use ablation::{
    ablation_configs, format_ablation, run_ablation, run_suite, train_ensemble, AblationRow, SuiteScores,
    AUGMENT_SCALES,
};

const DECODE_STRIDE: usize = 16;

/// Named intermediate tensors of one frame, from the first branch of the
/// first variant.
pub type FrameTrace = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Capture traces for frames `1..trace_frames`.
    pub trace_frames: usize,
    /// Keep every variant's probabilities before fusion.
    pub keep_variant_probs: bool,
}

#[derive(Clone, Debug)]
pub struct SeqResult {
    pub masks: Vec<LabelMask>,
    pub probs: Vec<ProbMap>,
    /// Wall time per frame in seconds.
    pub frame_times: Vec<f64>,
    pub config: PipelineConfig,
    /// One trace per frame below `RunOptions::trace_frames` (frame 0 empty).
    pub traces: Vec<FrameTrace>,
    /// Per frame, the outputs of each variant (empty unless requested).
    pub variant_probs: Vec<Vec<ProbMap>>,
}

/// Seeded weights shared by every frame of a run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    embed: EmbedderSpec,
    fpn: FpnWeights,
    oc: OcWeights,
    proj: ProjectionWeights,
    gate: GateWeights,
    readout: Vec<f32>,
}

struct Branch {
    flip: bool,
    width: usize,
    height: usize,
    first_feat: FeatureMap,
    first_ind: Vec<Grid>,
    gates: Vec<InstanceGate>,
    prev_feat: FeatureMap,
    prev_ind: Vec<Grid>,
    bank: MemoryBank,
}

struct Variant {
    config: PipelineConfig,
    branches: Vec<Branch>,
}

/// Per-sequence state carried between frames.
pub struct SequenceState {
    objects: ObjectSet,
    frame_idx: usize,
    variants: Vec<Variant>,
    prev_frame: ImageFrame,
    prev_mask: LabelMask,
}

impl SequenceState {
    pub fn objects(&self) -> &ObjectSet {
        &self.objects
    }

    /// Index of the last processed frame.
    pub fn frame_index(&self) -> usize {
        self.frame_idx
    }

    /// Post-processed mask of the last processed frame.
    pub fn previous_mask(&self) -> &LabelMask {
        &self.prev_mask
    }

    /// Frames stored in the memory of the first branch of the first variant.
    pub fn memory_frames(&self, object: u8) -> Vec<usize> {
        self.variants[0].branches[0].bank.frames(object)
    }
}

struct BranchStep {
    feat: FeatureMap,
    prob: ProbMap,
}

/// Output of one processed frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub mask: LabelMask,
    pub prob: ProbMap,
    pub variant_probs: Vec<ProbMap>,
    pub trace: FrameTrace,
}

fn record(trace: &mut Option<&mut FrameTrace>, name: &str, tensor: impl FnOnce() -> Tensor) {
    if let Some(t) = trace.as_deref_mut() {
        t.insert(name.to_string(), tensor());
    }
}

fn grids_tensor(grids: &[Grid]) -> Tensor {
    let (h, w) = grids.first().map_or((0, 0), |g| (g.height(), g.width()));
    let data = grids.iter().flat_map(|g| g.data().iter().copied()).collect();
    Tensor::new(vec![grids.len(), h, w], data).expect("grids share a shape")
}

fn mask_tensor(mask: &LabelMask) -> Tensor {
    let data = mask.ids().iter().map(|&v| v as f32).collect();
    Tensor::new(vec![mask.height(), mask.width()], data).expect("mask dims")
}

fn effective_decoder(config: &PipelineConfig) -> DecoderWeights {
    let mut w = config.decoder;
    if !config.stm {
        w.stm = 0.0;
    }
    if !config.matching {
        w.fg_global = 0.0;
        w.bg_global = 0.0;
        w.fg_local = 0.0;
        w.bg_local = 0.0;
        w.prev = 0.0;
    }
    w
}

/// Configurations of the fused variants: the configured pipeline alone, or
/// with the ensemble on, both memory schemes plus a matching-only model.
pub fn variant_configs(config: &PipelineConfig) -> Vec<PipelineConfig> {
    if !config.ensemble {
        return vec![config.clone()];
    }
    let a = PipelineConfig {
        stm: true,
        stm_scheme: StmScheme::Separate,
        ..config.clone()
    };
    let b = PipelineConfig {
        stm: true,
        stm_scheme: StmScheme::SpatialPrior,
        ..config.clone()
    };
    let m = PipelineConfig {
        stm: false,
        ..config.clone()
    };
    vec![a, b, m]
}

fn branch_size(scale: f32, width: usize, height: usize) -> (usize, usize) {
    let s = |v: usize| ((v as f32 * scale).round() as usize).max(MIN_SIDE);
    (s(width), s(height))
}

fn to_branch_frame(frame: &ImageFrame, w: usize, h: usize, flip: bool) -> Result<ImageFrame> {
    let f = if (w, h) == (frame.width(), frame.height()) {
        frame.clone()
    } else {
        frame.resize_bilinear(w, h)?
    };
    Ok(if flip { f.flip_horizontal() } else { f })
}

fn to_branch_mask(mask: &LabelMask, w: usize, h: usize, flip: bool) -> LabelMask {
    let m = if (w, h) == (mask.width(), mask.height()) {
        mask.clone()
    } else {
        mask.resize_nearest(w, h)
    };
    if flip {
        m.flip_horizontal()
    } else {
        m
    }
}

fn from_branch_prob(prob: ProbMap, flip: bool, w: usize, h: usize) -> ProbMap {
    let p = if flip { prob.flip_horizontal() } else { prob };
    if (p.width(), p.height()) == (w, h) {
        p
    } else {
        p.resize_bilinear(h, w)
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let embed = EmbedderSpec::from_config(&config);
        embed.validate()?;
        let cn = config.neck_channels;
        let seed = config.seed;
        Ok(Self {
            embed,
            fpn: FpnWeights::identity(config.channels, cn, config.fpn_fusion),
            oc: OcWeights::seeded(cn, config.oc_key_channels, derive_seed(seed, 31), config.oc_gain, config.oc_blend),
            proj: ProjectionWeights::seeded(
                cn,
                config.key_channels,
                config.value_channels,
                derive_seed(seed, 41),
                config.key_gain,
            ),
            gate: GateWeights::seeded(cn, derive_seed(seed, 51), config.gate_scale),
            readout: readout_vector(cn, seed),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Stride-16 features after the necks enabled in `config`.
    fn features(&self, config: &PipelineConfig, frame: &ImageFrame, mut trace: Option<&mut FrameTrace>) -> Result<FeatureMap> {
        let pyr = extract_pyramid(frame, &self.embed)?;
        for l in pyr.levels() {
            record(&mut trace, &format!("pyramid/s{}", l.stride()), || l.to_tensor());
        }
        let mut p = if config.fpn {
            fpn_topdown(&pyr, &self.fpn)?
        } else {
            apply_laterals(&pyr, &self.fpn)?
        };
        for l in p.levels() {
            record(&mut trace, &format!("fpn/s{}", l.stride()), || l.to_tensor());
        }
        if config.pan {
            p = pan_bottomup(&p, config.pan_fusion)?;
        }
        for l in p.levels() {
            record(&mut trace, &format!("pan/s{}", l.stride()), || l.to_tensor());
        }
        let f16 = p.into_levels()[2].clone();
        let out = if config.oc { object_context(&f16, &self.oc)? } else { f16 };
        record(&mut trace, "oc", || out.to_tensor());
        Ok(out)
    }

    fn new_branch(
        &self,
        config: &PipelineConfig,
        ids: &[u8],
        frame: &ImageFrame,
        mask: &LabelMask,
        scale: f32,
        flip: bool,
    ) -> Result<Branch> {
        let (w, h) = branch_size(scale, frame.width(), frame.height());
        let frame_b = to_branch_frame(frame, w, h, flip)?;
        let mask_b = to_branch_mask(mask, w, h, flip);
        let feat = self.features(config, &frame_b, None)?;
        let ind = downsample_mask(&mask_b, ids, DECODE_STRIDE)?.objects;
        let gates = ind
            .iter()
            .map(|m| instance_gate(&feat, m, &self.gate))
            .collect::<Result<Vec<_>>>()?;
        let mut bank = MemoryBank::new(config.memory_interval)?;
        if config.stm {
            for (m, &id) in ind.iter().zip(ids) {
                bank.write(0, encode(&feat, m, config.stm_scheme, &self.proj)?, id)?;
            }
        }
        Ok(Branch {
            flip,
            width: w,
            height: h,
            first_feat: feat.clone(),
            first_ind: ind.clone(),
            gates,
            prev_feat: feat,
            prev_ind: ind,
            bank,
        })
    }

    /// Initialises the state from the annotated first frame.
    pub fn start(&self, frame: &ImageFrame, first_mask: &LabelMask) -> Result<SequenceState> {
        if frame.width() != first_mask.width() || frame.height() != first_mask.height() {
            return Err(Error::Shape("mask/frame size mismatch".into()));
        }
        let objects = ObjectSet::from_mask(first_mask)?;
        let ids = objects.ids().to_vec();
        let mut variants = Vec::new();
        for config in variant_configs(&self.config) {
            let combos: Vec<(f32, bool)> = config
                .scales
                .iter()
                .flat_map(|&s| {
                    let flips: &[bool] = if config.flip { &[false, true] } else { &[false] };
                    flips.iter().map(move |&f| (s, f))
                })
                .collect();
            let branches = combos
                .par_iter()
                .map(|&(s, f)| self.new_branch(&config, &ids, frame, first_mask, s, f))
                .collect::<Result<Vec<_>>>()?;
            variants.push(Variant { config, branches });
        }
        Ok(SequenceState {
            objects,
            frame_idx: 0,
            variants,
            prev_frame: frame.clone(),
            prev_mask: first_mask.clone(),
        })
    }

    fn infer_branch(
        &self,
        config: &PipelineConfig,
        branch: &Branch,
        ids: &[u8],
        frame: &ImageFrame,
        refine: Option<&[Grid]>,
        mut trace: Option<&mut FrameTrace>,
    ) -> Result<BranchStep> {
        let frame_b = to_branch_frame(frame, branch.width, branch.height, branch.flip)?;
        let feat = self.features(config, &frame_b, trace.as_deref_mut())?;
        let weights = effective_decoder(config);
        let stacks = ids
            .par_iter()
            .enumerate()
            .map(|(o, &id)| {
                let mut stack = EvidenceStack::neutral(feat.clone());
                if config.stm {
                    let query = encode(&feat, &branch.prev_ind[o], config.stm_scheme, &self.proj)?;
                    let read = memory_read(&query, &branch.bank, id)?;
                    let last = read.channels() - 1;
                    stack.stm = Grid::from_vec(read.height(), read.width(), read.plane(last).to_vec())?;
                }
                if config.matching {
                    let g = match_global(&feat, &branch.first_feat, &branch.first_ind[o], config.match_bias)?;
                    let l = match_local(&feat, &branch.prev_feat, &branch.prev_ind[o], config.local_radius, config.match_bias)?;
                    stack.fg_global = g.fg;
                    stack.bg_global = g.bg;
                    stack.fg_local = l.fg;
                    stack.bg_local = l.bg;
                    stack.prev = branch.prev_ind[o].clone();
                }
                let logits = decode_logits(&stack, &branch.gates[o], &weights, &self.readout)?;
                Ok((stack, logits))
            })
            .collect::<Result<Vec<_>>>()?;
        record(&mut trace, "stm", || grids_tensor(&stacks.iter().map(|(s, _)| s.stm.clone()).collect::<Vec<_>>()));
        record(&mut trace, "matching", || {
            grids_tensor(
                &stacks
                    .iter()
                    .flat_map(|(s, _)| [s.fg_global.clone(), s.bg_global.clone(), s.fg_local.clone(), s.bg_local.clone(), s.prev.clone()])
                    .collect::<Vec<_>>(),
            )
        });
        let mut full: Vec<Grid> = stacks
            .iter()
            .map(|(_, z)| upsample_logits(z, DECODE_STRIDE, branch.height, branch.width))
            .collect();
        if let Some(refine) = refine {
            let refine: Vec<Grid> = refine
                .iter()
                .map(|r| {
                    let g = r.resize_bilinear(branch.height, branch.width);
                    if branch.flip {
                        g.flip_horizontal()
                    } else {
                        g
                    }
                })
                .collect();
            record(&mut trace, "refine", || grids_tensor(&refine));
            for (z, r) in full.iter_mut().zip(&refine) {
                for (a, &b) in z.data_mut().iter_mut().zip(r.data()) {
                    *a += config.refine_weight * b;
                }
            }
        }
        record(&mut trace, "logits", || grids_tensor(&full));
        let prob = softmax_with_background(&full, ids)?;
        Ok(BranchStep { feat, prob })
    }

    fn infer_variant(
        &self,
        variant: &Variant,
        ids: &[u8],
        frame: &ImageFrame,
        refine: Option<&[Grid]>,
        trace: Option<&mut FrameTrace>,
    ) -> Result<(ProbMap, Vec<BranchStep>)> {
        let mut trace = trace;
        let mut steps = Vec::with_capacity(variant.branches.len());
        // the traced branch runs alone so the rest can borrow nothing mutable
        steps.push(self.infer_branch(&variant.config, &variant.branches[0], ids, frame, refine, trace.take())?);
        let rest = variant.branches[1..]
            .par_iter()
            .map(|b| self.infer_branch(&variant.config, b, ids, frame, refine, None))
            .collect::<Result<Vec<_>>>()?;
        steps.extend(rest);
        let (w, h) = (frame.width(), frame.height());
        let mut acc = vec![0.0f32; (ids.len() + 1) * w * h];
        for (b, s) in variant.branches.iter().zip(&steps) {
            let p = from_branch_prob(s.prob.clone(), b.flip, w, h);
            for (a, &v) in acc.iter_mut().zip(p.probs()) {
                *a += v;
            }
        }
        let inv = 1.0 / steps.len() as f32;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok((ProbMap::from_unnormalized(h, w, ids.to_vec(), acc)?, steps))
    }

    /// Colour refinement at native resolution against the previous frame;
    /// every branch resamples it into its own coordinates.
    fn refinement(&self, state: &SequenceState, frame: &ImageFrame) -> Result<Option<Vec<Grid>>> {
        let c = &self.config;
        if !c.matching || c.refine_weight == 0.0 {
            return Ok(None);
        }
        pixel_refinement(
            frame,
            &state.prev_frame,
            &state.prev_mask,
            state.objects.ids(),
            RefineParams {
                radius: c.refine_radius,
                wide_radius: c.refine_wide_radius,
                color_scale: c.refine_color_scale,
                bias: c.match_bias,
            },
        )
        .map(Some)
    }

    fn ensemble_model(&self) -> EnsembleModel {
        EnsembleModel::with_weights(
            self.config.ensemble_weights.iter().map(|&v| v as f64).collect(),
            self.config.ensemble_bias as f64,
        )
    }

    /// Probabilities for `frame` averaged over every scale and flip branch
    /// (and fused across variants when the ensemble is on), without
    /// post-processing or state updates.
    pub fn augment_infer(&self, state: &SequenceState, frame: &ImageFrame) -> Result<ProbMap> {
        let ids = state.objects.ids();
        let refine = self.refinement(state, frame)?;
        let probs = state
            .variants
            .iter()
            .map(|v| self.infer_variant(v, ids, frame, refine.as_deref(), None).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(probs)
    }

    fn fuse(&self, mut probs: Vec<ProbMap>) -> Result<ProbMap> {
        if self.config.ensemble {
            ensemble_apply(&probs, &self.ensemble_model())
        } else {
            Ok(probs.remove(0))
        }
    }

    fn refine_small_objects(&self, state: &SequenceState, frame: &ImageFrame, prob: ProbMap) -> Result<ProbMap> {
        let mut prob = prob;
        for &id in state.objects.ids() {
            let mut cb = |req: &CropRequest| self.resegment(state, req);
            prob = crop_refine(
                frame,
                &prob,
                id,
                self.config.small_area_alpha as f64,
                self.config.crop_margin as f64,
                &mut cb,
            )?;
        }
        Ok(prob)
    }

    /// Two-frame run on the enlarged crop: the previous frame seeded with the
    /// object's previous mask, then the current crop.
    fn resegment(&self, state: &SequenceState, req: &CropRequest) -> Result<Option<ProbMap>> {
        let (w, h) = (req.frame.width(), req.frame.height());
        let prev = state.prev_frame.crop_resized(req.rect, w, h)?;
        let mut seed = state.prev_mask.crop(req.rect).resize_nearest(w, h);
        for v in seed.ids_mut() {
            if *v != req.object {
                *v = 0;
            }
        }
        if seed.area(req.object) == 0 {
            return Ok(None);
        }
        let sub = PipelineConfig {
            postproc: false,
            ensemble: false,
            flip: false,
            scales: vec![1.0],
            ..self.config.clone()
        };
        let result = Pipeline::new(sub)?.run(&[prev, req.frame.clone()], &seed, &RunOptions::default())?;
        Ok(result.probs.into_iter().nth(1))
    }

    /// Processes the next frame and advances the state.
    pub fn step(&self, state: &mut SequenceState, frame: &ImageFrame, traced: bool) -> Result<FrameOutput> {
        if frame.width() != state.prev_frame.width() || frame.height() != state.prev_frame.height() {
            return Err(Error::Shape("frame size differs from the first frame".into()));
        }
        let t = state.frame_idx + 1;
        let ids = state.objects.ids().to_vec();
        let mut trace = FrameTrace::new();
        let refine = self.refinement(state, frame)?;
        let mut variant_probs = Vec::with_capacity(state.variants.len());
        let mut variant_steps = Vec::with_capacity(state.variants.len());
        for (i, v) in state.variants.iter().enumerate() {
            let tr = (traced && i == 0).then_some(&mut trace);
            let (p, steps) = self.infer_variant(v, &ids, frame, refine.as_deref(), tr)?;
            variant_probs.push(p);
            variant_steps.push(steps);
        }
        let fused = self.fuse(variant_probs.clone())?;
        if traced {
            trace.insert("probs".into(), fused.to_tensor());
        }
        let (prob, mask) = if self.config.postproc {
            let raw = fused.argmax();
            if traced {
                trace.insert("mask_raw".into(), mask_tensor(&raw));
            }
            let prob = self.refine_small_objects(state, frame, fused)?;
            let mask = temporal_filter(&prob.argmax(), &state.prev_mask, self.config.temporal_tau as f64)?;
            (prob, mask)
        } else {
            let mask = fused.argmax();
            if traced {
                trace.insert("mask_raw".into(), mask_tensor(&mask));
            }
            (fused, mask)
        };
        if traced {
            trace.insert("mask".into(), mask_tensor(&mask));
        }
        for (v, steps) in state.variants.iter_mut().zip(variant_steps) {
            let config = &v.config;
            let proj = &self.proj;
            v.branches
                .par_iter_mut()
                .zip(steps)
                .map(|(b, s)| -> Result<()> {
                    let mask_b = to_branch_mask(&mask, b.width, b.height, b.flip);
                    let ind = downsample_mask(&mask_b, &ids, DECODE_STRIDE)?.objects;
                    if config.stm && t % b.bank.interval() == 0 {
                        for (m, &id) in ind.iter().zip(&ids) {
                            b.bank.write(t, encode(&s.feat, m, config.stm_scheme, proj)?, id)?;
                        }
                    }
                    b.prev_feat = s.feat;
                    b.prev_ind = ind;
                    Ok(())
                })
                .collect::<Result<Vec<_>>>()?;
        }
        state.frame_idx = t;
        state.prev_frame = frame.clone();
        state.prev_mask = mask.clone();
        Ok(FrameOutput {
            mask,
            prob,
            variant_probs,
            trace,
        })
    }

    /// Runs a whole sequence; frame 0 reproduces `first_mask`.
    pub fn run(&self, frames: &[ImageFrame], first_mask: &LabelMask, options: &RunOptions) -> Result<SeqResult> {
        let first = frames.first().ok_or_else(|| Error::Invalid("sequence has no frames".into()))?;
        let start = Instant::now();
        let mut state = self.start(first, first_mask).map_err(|e| e.at_frame(0))?;
        let ids = state.objects.ids().to_vec();
        let mut out = SeqResult {
            masks: vec![first_mask.clone()],
            probs: vec![ProbMap::from_mask(first_mask, &ids)],
            frame_times: vec![start.elapsed().as_secs_f64()],
            config: self.config.clone(),
            traces: Vec::new(),
            variant_probs: Vec::new(),
        };
        if options.trace_frames > 0 {
            out.traces.push(FrameTrace::new());
        }
        if options.keep_variant_probs {
            out.variant_probs.push(Vec::new());
        }
        for (t, frame) in frames.iter().enumerate().skip(1) {
            let start = Instant::now();
            let traced = t < options.trace_frames;
            let step = self.step(&mut state, frame, traced).map_err(|e| e.at_frame(t))?;
            out.frame_times.push(start.elapsed().as_secs_f64());
            out.masks.push(step.mask);
            out.probs.push(step.prob);
            if traced {
                out.traces.push(step.trace);
            }
            if options.keep_variant_probs {
                out.variant_probs.push(step.variant_probs);
            }
        }
        Ok(out)
    }
}

/// Runs the pipeline over `frames` with the annotation of frame 0.
pub fn run_sequence(frames: &[ImageFrame], first_mask: &LabelMask, config: &PipelineConfig) -> Result<SeqResult> {
    Pipeline::new(config.clone())?.run(frames, first_mask, &RunOptions::default())
}
