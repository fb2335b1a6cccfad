use std::fmt::Write as _;

use rayon::prelude::*;

use super::{Pipeline, RunOptions, SeqResult};
use crate::ensemble::{ensemble_train, EnsembleModel, TrainingFrame};
use crate::eval::{evaluate_sequence, format_table, synth_generate, MetricsReport, SuiteEntry};
use crate::io::{LabelMask, PipelineConfig};
use crate::Result;

/// Scales used by the augmentation row when the base config has only one.
pub const AUGMENT_SCALES: [f32; 2] = [1.0, 1.25];

/// Frames after the first that enter ensemble training, every `n`-th.
const TRAIN_FRAME_STEP: usize = 3;

/// The component stack, one configuration per row.
pub fn ablation_configs(base: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    let baseline = PipelineConfig {
        stm: false,
        matching: true,
        fpn: false,
        pan: false,
        oc: false,
        postproc: false,
        ensemble: false,
        flip: false,
        scales: vec![1.0],
        ..base.clone()
    };
    let fpn = PipelineConfig { fpn: true, ..baseline.clone() };
    let pan = PipelineConfig { pan: true, ..fpn.clone() };
    let oc = PipelineConfig { oc: true, ..pan.clone() };
    let aug = PipelineConfig {
        flip: true,
        scales: if base.scales.len() > 1 { base.scales.clone() } else { AUGMENT_SCALES.to_vec() },
        ..oc.clone()
    };
    let post = PipelineConfig { postproc: true, ..baseline.clone() };
    let ens = PipelineConfig {
        stm: true,
        ensemble: true,
        ..aug.clone()
    };
    let last = PipelineConfig { postproc: true, ..ens.clone() };
    vec![
        ("Baseline", baseline),
        ("+FPN", fpn),
        ("+PAN", pan),
        ("+OCNet", oc),
        ("+Flip and multi-scale", aug),
        ("+Post-processing", post),
        ("STM + ensemble modeling", ens),
        ("Final (STM + ensemble modeling + post-processing)", last),
    ]
}

/// Metrics of one configuration over a suite.
#[derive(Clone, Debug)]
pub struct SuiteScores {
    pub names: Vec<&'static str>,
    pub reports: Vec<MetricsReport>,
    pub masks: Vec<Vec<LabelMask>>,
    /// Mean of the per-sequence Overall scores.
    pub overall: f64,
    /// Wall time of the whole suite in seconds.
    pub seconds: f64,
}

fn run_entry(pipeline: &Pipeline, entry: &SuiteEntry, options: &RunOptions) -> Result<(SeqResult, Vec<LabelMask>)> {
    let data = synth_generate(&entry.spec, entry.seed)?;
    let result = pipeline.run(&data.frames, &data.masks[0], options)?;
    Ok((result, data.masks))
}

/// Runs `config` on every sequence of `suite`.
pub fn run_suite(config: &PipelineConfig, suite: &[SuiteEntry]) -> Result<SuiteScores> {
    let start = std::time::Instant::now();
    let pipeline = Pipeline::new(config.clone())?;
    let runs = suite
        .par_iter()
        .map(|e| {
            let (result, gt) = run_entry(&pipeline, e, &RunOptions::default())?;
            let ids = gt[0].object_ids();
            let report = evaluate_sequence(&result.masks, &gt, &ids)?;
            Ok((report, result.masks))
        })
        .collect::<Result<Vec<_>>>()?;
    let (reports, masks): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let overall = reports.iter().map(|r: &MetricsReport| r.overall).sum::<f64>() / reports.len() as f64;
    Ok(SuiteScores {
        names: suite.iter().map(|e| e.name).collect(),
        reports,
        masks,
        overall,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fits the variant fusion weights on the outputs of `config` over `train`.
pub fn train_ensemble(config: &PipelineConfig, train: &[SuiteEntry]) -> Result<EnsembleModel> {
    let pipeline = Pipeline::new(PipelineConfig {
        ensemble: true,
        ..config.clone()
    })?;
    let options = RunOptions {
        trace_frames: 0,
        keep_variant_probs: true,
    };
    let frames = train
        .par_iter()
        .map(|e| {
            let (result, gt) = run_entry(&pipeline, e, &options)?;
            Ok(result
                .variant_probs
                .into_iter()
                .zip(gt)
                .enumerate()
                .skip(1)
                .step_by(TRAIN_FRAME_STEP)
                .map(|(_, (maps, gt))| TrainingFrame { maps, gt })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let init = EnsembleModel::with_weights(
        config.ensemble_weights.iter().map(|&v| v as f64).collect(),
        config.ensemble_bias as f64,
    );
    let init = EnsembleModel {
        iterations: 60,
        ..init
    };
    Ok(ensemble_train(&frames, &init)?.model)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: PipelineConfig,
    pub scores: SuiteScores,
    /// Overall minus the baseline row's Overall.
    pub delta: f64,
}

/// Runs every row of [`ablation_configs`] on `suite`. With `train`, rows
/// that use the ensemble get fusion weights fitted on those sequences.
pub fn run_ablation(base: &PipelineConfig, suite: &[SuiteEntry], train: Option<&[SuiteEntry]>) -> Result<Vec<AblationRow>> {
    let mut configs = ablation_configs(base);
    if let Some(train) = train {
        let (_, ens) = configs
            .iter()
            .find(|(_, c)| c.ensemble)
            .expect("stack has an ensemble row");
        let model = train_ensemble(ens, train)?;
        for (_, c) in configs.iter_mut().filter(|(_, c)| c.ensemble) {
            c.ensemble_weights = model.weights.iter().map(|&v| v as f32).collect();
            c.ensemble_bias = model.bias as f32;
        }
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(configs.len());
    for (name, config) in configs {
        let scores = run_suite(&config, suite)?;
        let delta = rows.first().map_or(0.0, |b| scores.overall - b.scores.overall);
        rows.push(AblationRow {
            name,
            config,
            scores,
            delta,
        });
    }
    Ok(rows)
}

/// Table with Overall in percent and the delta to the baseline row,
/// followed by `key = value` lines.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let table: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.name.to_string(),
                format!("{:.1}", r.scores.overall * 100.0),
                if i == 0 { "-".into() } else { format!("{:+.1}", r.delta * 100.0) },
            ]
        })
        .collect();
    let mut out = format_table(&["Baseline and components", "Overall", "Delta"], &table);
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(out, "row{i}.name = {}", r.name);
        let _ = writeln!(out, "row{i}.overall = {:.6}", r.scores.overall);
        let _ = writeln!(out, "row{i}.delta = {:.6}", r.delta);
    }
    out
}
