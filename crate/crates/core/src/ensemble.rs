//! Per-pixel fusion of probability maps from several pipeline variants and a
//! full-batch gradient-descent trainer for the fusion weights.

use rayon::prelude::*;

use crate::io::{LabelMask, ProbMap, Tensor};
use crate::{Error, Result};

/// Lower clamp applied to log-probabilities.
pub const LOG_CLAMP: f64 = 20.0;

/// Shared per-model weights and an object-class bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl EnsembleModel {
    pub fn uniform(models: usize) -> Self {
        Self {
            weights: vec![1.0 / models.max(1) as f64; models],
            bias: 0.0,
            learning_rate: 0.5,
            iterations: 200,
        }
    }

    pub fn with_weights(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            weights,
            bias,
            ..Self::uniform(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Invalid("ensemble needs at least one model".into()));
        }
        if self.weights.iter().chain([&self.bias]).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("ensemble weights must be finite".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Invalid("ensemble learning rate must be positive".into()));
        }
        Ok(())
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    fn with_params(&self, p: &[f64]) -> Self {
        let (w, b) = p.split_at(p.len() - 1);
        Self {
            weights: w.to_vec(),
            bias: b[0],
            ..self.clone()
        }
    }

    /// `[w_1 .. w_M, b]` as a one-dimensional tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.params().into_iter().map(|v| v as f32).collect::<Vec<_>>();
        Tensor::new(vec![data.len()], data).expect("length matches dims")
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        if tensor.dims().len() != 1 || tensor.dims()[0] < 2 {
            return Err(Error::Tensor("ensemble tensor must be 1-D with at least 2 entries".into()));
        }
        let p: Vec<f64> = tensor.data().iter().map(|&v| v as f64).collect();
        let model = Self::uniform(0).with_params(&p);
        model.validate()?;
        Ok(model)
    }
}

fn log_prob(p: f32) -> f64 {
    (p as f64).ln().max(-LOG_CLAMP)
}

fn check_inputs(maps: &[ProbMap], model: &EnsembleModel) -> Result<()> {
    model.validate()?;
    if maps.len() != model.weights.len() {
        return Err(Error::Shape(format!(
            "{} probability maps for {} ensemble weights",
            maps.len(),
            model.weights.len()
        )));
    }
    if maps.iter().any(|m| !m.same_layout(&maps[0])) {
        return Err(Error::Shape("ensemble inputs differ in shape or objects".into()));
    }
    Ok(())
}

/// Fused scores of class `k` at pixel `p`. Terms are summed in sorted order
/// so the result does not depend on the order of the model list.
fn fused_score(maps: &[ProbMap], model: &EnsembleModel, k: usize, p: usize) -> f64 {
    let mut terms: Vec<f64> = maps
        .iter()
        .zip(&model.weights)
        .map(|(m, w)| w * log_prob(m.class_plane(k)[p]))
        .collect();
    terms.sort_by(f64::total_cmp);
    let mut z = terms.into_iter().sum::<f64>();
    if k > 0 {
        z += model.bias;
    }
    z
}

fn softmax64(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn fused_pixel(maps: &[ProbMap], model: &EnsembleModel, p: usize) -> Vec<f64> {
    let mut z: Vec<f64> = (0..maps[0].classes()).map(|k| fused_score(maps, model, k, p)).collect();
    softmax64(&mut z);
    z
}

/// Fuses `M` probability maps: the score of class `k` is
/// `Σ_m w_m·ln p_m,k + b·[k is an object]`, normalised by a softmax over
/// all classes.
pub fn ensemble_apply(maps: &[ProbMap], model: &EnsembleModel) -> Result<ProbMap> {
    check_inputs(maps, model)?;
    let (h, w) = (maps[0].height(), maps[0].width());
    let n = h * w;
    let k = maps[0].classes();
    let pixels: Vec<Vec<f64>> = (0..n).into_par_iter().map(|p| fused_pixel(maps, model, p)).collect();
    let mut probs = vec![0.0f32; k * n];
    for (p, q) in pixels.iter().enumerate() {
        for (c, &v) in q.iter().enumerate() {
            probs[c * n + p] = v as f32;
        }
    }
    ProbMap::from_unnormalized(h, w, maps[0].ids().to_vec(), probs)
}

/// Arithmetic mean of the inputs, renormalised.
pub fn mean_probability(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::Invalid("no probability maps".into()))?;
    if maps.iter().any(|m| !m.same_layout(first)) {
        return Err(Error::Shape("probability maps differ in shape or objects".into()));
    }
    let mut acc = vec![0.0f32; first.probs().len()];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.probs()) {
            *a += v;
        }
    }
    let inv = 1.0 / maps.len() as f32;
    acc.iter_mut().for_each(|v| *v *= inv);
    ProbMap::from_unnormalized(first.height(), first.width(), first.ids().to_vec(), acc)
}

/// One labelled training frame: the variant outputs and the ground truth.
#[derive(Clone, Debug)]
pub struct TrainingFrame {
    pub maps: Vec<ProbMap>,
    pub gt: LabelMask,
}

fn labels(frame: &TrainingFrame) -> Result<Vec<usize>> {
    let m = &frame.maps[0];
    if frame.gt.width() != m.width() || frame.gt.height() != m.height() {
        return Err(Error::Shape("ground truth and probability maps differ in size".into()));
    }
    frame
        .gt
        .ids()
        .iter()
        .map(|&id| {
            if id == 0 {
                Ok(0)
            } else {
                m.ids()
                    .iter()
                    .position(|&o| o == id)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Shape(format!("ground truth object {id} has no probability channel")))
            }
        })
        .collect()
}

struct Prepared {
    frames: Vec<(Vec<ProbMap>, Vec<usize>)>,
    pixels: usize,
    degenerate: bool,
}

fn prepare(frames: &[TrainingFrame], model: &EnsembleModel) -> Result<Prepared> {
    if frames.is_empty() {
        return Err(Error::Invalid("ensemble training needs at least one labelled frame".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut seen: Option<usize> = None;
    let mut degenerate = true;
    let mut pixels = 0;
    for f in frames {
        check_inputs(&f.maps, model)?;
        let y = labels(f)?;
        for &c in &y {
            match seen {
                None => seen = Some(c),
                Some(s) if s != c => degenerate = false,
                _ => {}
            }
        }
        pixels += y.len();
        out.push((f.maps.clone(), y));
    }
    Ok(Prepared {
        frames: out,
        pixels,
        degenerate,
    })
}

/// Mean pixel-wise cross-entropy and its gradient with respect to
/// `[w_1 .. w_M, b]`.
fn loss_and_gradient(data: &Prepared, model: &EnsembleModel) -> (f64, Vec<f64>) {
    let m = model.weights.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m + 1];
    for (maps, y) in &data.frames {
        let classes = maps[0].classes();
        for (p, &label) in y.iter().enumerate() {
            let q = fused_pixel(maps, model, p);
            loss -= q[label].max(f64::MIN_POSITIVE).ln();
            for k in 0..classes {
                let d = q[k] - if k == label { 1.0 } else { 0.0 };
                for (g, map) in grad.iter_mut().zip(maps) {
                    *g += d * log_prob(map.class_plane(k)[p]);
                }
                if k > 0 {
                    grad[m] += d;
                }
            }
        }
    }
    let n = data.pixels as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean cross-entropy of the fused prediction against the ground truth.
pub fn ensemble_loss(frames: &[TrainingFrame], model: &EnsembleModel) -> Result<f64> {
    Ok(loss_and_gradient(&prepare(frames, model)?, model).0)
}

/// Analytic gradient of [`ensemble_loss`] with respect to `[w_1 .. w_M, b]`.
pub fn ensemble_gradient(frames: &[TrainingFrame], model: &EnsembleModel) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(&prepare(frames, model)?, model).1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub model: EnsembleModel,
    /// Loss before the first step followed by the loss after every accepted step.
    pub loss_trace: Vec<f64>,
    /// Set when every ground-truth pixel carries the same class.
    pub degenerate_gt: bool,
}

const MAX_HALVINGS: usize = 40;

/// Full-batch gradient descent; a step that would raise the loss is retried
/// with half the step size, so the trace never increases.
pub fn ensemble_train(frames: &[TrainingFrame], model: &EnsembleModel) -> Result<TrainResult> {
    let data = prepare(frames, model)?;
    let mut current = model.clone();
    let (mut loss, mut grad) = loss_and_gradient(&data, &current);
    let mut trace = vec![loss];
    let mut lr = model.learning_rate;
    'outer: for _ in 0..model.iterations {
        let params = current.params();
        for _ in 0..MAX_HALVINGS {
            let next: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
            let candidate = current.with_params(&next);
            let (l, g) = loss_and_gradient(&data, &candidate);
            if l <= loss {
                current = candidate;
                loss = l;
                grad = g;
                trace.push(loss);
                continue 'outer;
            }
            lr *= 0.5;
        }
        break;
    }
    current.learning_rate = model.learning_rate;
    Ok(TrainResult {
        model: current,
        loss_trace: trace,
        degenerate_gt: data.degenerate,
    })
}
