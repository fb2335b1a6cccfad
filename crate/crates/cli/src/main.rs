use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use camvos::engine::{format_ablation, run_ablation, run_sequence, train_ensemble};
use camvos::ensemble::{ensemble_apply, EnsembleModel};
use camvos::eval::{
    benchmark_suite, evaluate_sequence, format_metrics, static_suite, synth_generate, training_suite, SuiteEntry,
    SynthSpec,
};
use camvos::io::{
    list_files, load_sequence, parse_config, read_pgm, read_tensor, write_pgm, write_ppm, write_tensor,
};
use camvos::{PipelineConfig, ProbMap};

#[derive(Parser, Debug)]
#[command(name = "camvos", version, about = "Semi-supervised video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a sequence from its first-frame mask.
    Run {
        /// Directory of PPM frames, read in lexicographic order.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        first_mask: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Output subdirectory name; defaults to the frame directory name, or
        /// its parent's when the directory is called `frames`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a synthetic sequence (frames/*.ppm, gt/*.pgm).
    Synth {
        #[arg(long, conflicts_with = "suite", required_unless_present = "suite")]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every sequence of a built-in suite instead of one spec.
        #[arg(long)]
        suite: Option<Suite>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component stack on the synthetic suite and print the table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the configured fusion weights instead of fitting them.
        #[arg(long)]
        no_train: bool,
        #[arg(long, value_enum, default_value = "benchmark")]
        suite: Suite,
    },
    /// Fit fusion weights on the training suite and save them as CAMT.
    EnsembleTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse the probability maps of several `run` outputs.
    EnsembleApply {
        #[arg(long)]
        model: PathBuf,
        /// `run` output directories, one per model, in weight order.
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Benchmark,
    Static,
    Training,
}

impl Suite {
    fn entries(self) -> Vec<SuiteEntry> {
        match self {
            Suite::Benchmark => benchmark_suite(),
            Suite::Static => static_suite(),
            Suite::Training => training_suite(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind=data message={:?}", format!("{e:#}"));
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(parse_config(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn frame_name(t: usize) -> String {
    format!("{t:05}")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            frames,
            first_mask,
            config,
            out,
            name,
        } => {
            let config = load_config(config.as_deref())?;
            let seq = load_sequence(&frames, &first_mask)?;
            let name = name.unwrap_or_else(|| sequence_name(&frames));
            let result = run_sequence(&seq.frames, &seq.first_mask, &config)?;
            let dir = out.join(&name);
            let probs = dir.join("probs");
            create_dir(&probs)?;
            for (t, (mask, prob)) in result.masks.iter().zip(&result.probs).enumerate() {
                write_pgm(dir.join(format!("{}.pgm", frame_name(t))), mask)?;
                write_tensor(probs.join(format!("{}.camt", frame_name(t))), &prob.to_tensor())?;
            }
            let mut report = String::new();
            for (t, s) in result.frame_times.iter().enumerate() {
                report.push_str(&format!("frame{t}.seconds = {s:.6}\n"));
            }
            report.push_str(&format!("frames = {}\n", result.masks.len()));
            report.push_str(&format!("total_seconds = {:.6}\n", result.frame_times.iter().sum::<f64>()));
            fs::write(dir.join("report.txt"), report).context("writing report.txt")?;
            println!("wrote {} frames to {}", result.masks.len(), dir.display());
        }
        Command::Eval { pred, gt, report } => {
            let gt_files = list_files(&gt, "pgm")?;
            if gt_files.is_empty() {
                bail!("{}: no .pgm masks found", gt.display());
            }
            let mut pred_masks = Vec::with_capacity(gt_files.len());
            let mut gt_masks = Vec::with_capacity(gt_files.len());
            for g in &gt_files {
                let p = pred.join(g.file_name().expect("listed files have names"));
                if !p.is_file() {
                    bail!("{}: missing prediction for {}", p.display(), g.display());
                }
                pred_masks.push(read_pgm(&p)?);
                gt_masks.push(read_pgm(g)?);
            }
            let objects = gt_masks[0].object_ids();
            if objects.is_empty() {
                bail!("{}: first ground-truth mask has no objects", gt_files[0].display());
            }
            let metrics = evaluate_sequence(&pred_masks, &gt_masks, &objects)?;
            let text = format_metrics(&metrics);
            if let Some(path) = report {
                fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{text}");
        }
        Command::Synth { spec, seed, suite, out } => {
            if let Some(suite) = suite {
                for e in suite.entries() {
                    write_synth(&e.spec, e.seed, &out.join(e.name))?;
                }
            } else {
                let path = spec.expect("clap requires --spec without --suite");
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let spec = SynthSpec::from_toml_str(&text).with_context(|| path.display().to_string())?;
                write_synth(&spec, seed, &out)?;
            }
        }
        Command::Ablate {
            config,
            out,
            no_train,
            suite,
        } => {
            let base = load_config(config.as_deref())?;
            let train = training_suite();
            let rows = run_ablation(&base, &suite.entries(), (!no_train).then_some(&train[..]))?;
            let text = format_ablation(&rows);
            if let Some(path) = out {
                fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{text}");
        }
        Command::EnsembleTrain { config, out } => {
            let config = load_config(config.as_deref())?;
            let model = train_ensemble(&config, &training_suite())?;
            write_tensor(&out, &model.to_tensor())?;
            let w: Vec<String> = model.weights.iter().map(|w| format!("{w:.6}")).collect();
            println!("weights = {}", w.join(", "));
            println!("bias = {:.6}", model.bias);
        }
        Command::EnsembleApply { model, inputs, out } => {
            let model = EnsembleModel::from_tensor(&read_tensor(&model)?)?;
            if model.weights.len() != inputs.len() {
                bail!("model has {} weights but {} inputs were given", model.weights.len(), inputs.len());
            }
            let first = read_pgm(inputs[0].join(format!("{}.pgm", frame_name(0))))?;
            let ids = first.object_ids();
            let frames = list_files(&inputs[0].join("probs"), "camt")?;
            if frames.is_empty() {
                bail!("{}: no probability maps found", inputs[0].join("probs").display());
            }
            let probs_out = out.join("probs");
            create_dir(&probs_out)?;
            for f in &frames {
                let file = f.file_name().expect("listed files have names");
                let maps = inputs
                    .iter()
                    .map(|dir| read_prob(&dir.join("probs").join(file), &ids))
                    .collect::<Result<Vec<_>>>()?;
                let fused = ensemble_apply(&maps, &model)?;
                let stem = Path::new(file).with_extension("");
                write_tensor(probs_out.join(file), &fused.to_tensor())?;
                write_pgm(out.join(stem.with_extension("pgm")), &fused.argmax())?;
            }
            println!("fused {} frames into {}", frames.len(), out.display());
        }
    }
    Ok(())
}

fn sequence_name(frames: &Path) -> String {
    let path = frames.canonicalize().unwrap_or_else(|_| frames.to_path_buf());
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned());
    match name(&path) {
        Some(n) if n == "frames" => path.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => "seq".into(),
    }
}

fn read_prob(path: &Path, ids: &[u8]) -> Result<ProbMap> {
    let t = read_tensor(path)?;
    let &[k, h, w] = t.dims() else {
        bail!("{}: expected a 3-d probability tensor, got {:?}", path.display(), t.dims());
    };
    if k != ids.len() + 1 {
        bail!("{}: {k} classes but the first mask has {} objects", path.display(), ids.len());
    }
    ProbMap::new(h, w, ids.to_vec(), t.into_data()).with_context(|| path.display().to_string())
}

fn write_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    let data = synth_generate(spec, seed)?;
    let (frames, gt) = (out.join("frames"), out.join("gt"));
    create_dir(&frames)?;
    create_dir(&gt)?;
    for (t, (f, m)) in data.frames.iter().zip(&data.masks).enumerate() {
        write_ppm(frames.join(format!("{}.ppm", frame_name(t))), f)?;
        write_pgm(gt.join(format!("{}.pgm", frame_name(t))), m)?;
    }
    Ok(())
}

