use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsfmicro::data::synth::export_dataset;
use tsfmicro::data::{load_manifest, synthesize_dataset, DatasetIndex, TaskName, TaskSpec};
use tsfmicro::eval::loso::train_fold;
use tsfmicro::eval::{confusion, gradcam, overlay, run_loso, uar, uf1, RunConfig};
use tsfmicro::train::gradcheck::full_suite;
use tsfmicro::train::trainer::predict;
use tsfmicro::train::{Checkpoint, PreparedData};
use tsfmicro::{Error, FusionMode, Result};

/// Largest relative error the gradient suite tolerates.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "tsfmicro", version, about = "Dual-stream micro-expression recognizer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `key = value` file); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and augmentation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the fusion mode: temporal, spatial, early, t2s, s2t or late.
    #[arg(long, global = true)]
    mode: Option<FusionMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG frames plus manifest.csv).
    Synth {
        /// Destination directory; defaults to `<output_dir>/synth`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every subject but one and report held-out accuracy.
    Train {
        /// Held-out subject; defaults to the last one in sorted order.
        #[arg(long)]
        holdout: Option<String>,
    },
    /// Full leave-one-subject-out protocol.
    Loso,
    /// Score a checkpoint on every sample of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's `manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Export a Grad-CAM heatmap and overlay for one sample.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset position of the sample.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        target: Option<usize>,
        /// Defaults to the config's `manifest`, then to synthetic data.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory; defaults to `<output_dir>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and fusion mode.
    Gradcheck {
        /// Coordinates sampled per parameter tensor in the model checks.
        #[arg(long, default_value_t = 8)]
        per_param: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    Ok(cfg)
}

/// The manifest when one is configured, otherwise synthetic data for a
/// `synthetic-K` task.
fn load_dataset(cfg: &RunConfig, manifest: Option<&Path>) -> Result<DatasetIndex> {
    if let Some(path) = manifest.or(cfg.manifest.as_deref()) {
        return load_manifest(path, &TaskSpec::new(cfg.task));
    }
    match cfg.task {
        TaskName::Synthetic(k) => synthesize_dataset(cfg.synth.subjects, cfg.synth.per_subject, k, cfg.synth.image_size, cfg.train.seed),
        task => Err(Error::Config(format!("task `{task}` needs a `manifest`"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_checkpoint(path: &Path, mode: Option<FusionMode>) -> Result<Checkpoint<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    match mode {
        Some(m) if m != ckpt.meta.mode => Err(Error::Checkpoint(format!(
            "{} holds `{}` weights, not `{m}`",
            path.display(),
            ckpt.meta.mode
        ))),
        _ => Ok(ckpt),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { out } => {
            let TaskName::Synthetic(k) = cfg.task else {
                return Err(Error::Config(format!("synth needs a synthetic-K task, not `{}`", cfg.task)));
            };
            let index = synthesize_dataset(cfg.synth.subjects, cfg.synth.per_subject, k, cfg.synth.image_size, cfg.train.seed)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("synth"));
            let manifest = export_dataset(&index, &dir)?;
            println!("{} samples -> {}", index.len(), manifest.display());
        }
        Command::Train { holdout } => {
            let index = load_dataset(&cfg, None)?;
            let subjects = index.subjects();
            let held = match holdout {
                Some(s) if subjects.contains(&s) => s,
                Some(s) => return Err(Error::Data(format!("no subject `{s}` in the dataset"))),
                None => subjects.last().cloned().ok_or_else(|| Error::Data("empty dataset".into()))?,
            };
            let (test, train): (Vec<usize>, Vec<usize>) = (0..index.len()).partition(|&i| index.samples[i].subject_id == held);
            if train.is_empty() {
                return Err(Error::Data("training split is empty".into()));
            }
            create_dir(&cfg.output_dir)?;
            let data = PreparedData::new(&index, &cfg.preprocess)?;
            let log = cfg.output_dir.join("train.log.jsonl");
            let (model, ckpt) = train_fold::<f32>(&cfg, &data, 0, &train, Some(&log))?;
            let path = cfg.output_dir.join("train.ckpt");
            ckpt.save(&path)?;
            let preds = predict(&model, &data, &test, cfg.train.batch_size)?;
            let hits = preds.iter().zip(&test).filter(|&(&p, &i)| p == data.labels[i]).count();
            println!("held-out {held}: {hits}/{} correct; checkpoint {}", test.len(), path.display());
        }
        Command::Loso => {
            let index = load_dataset(&cfg, None)?;
            let report = run_loso::<f32>(&index, &cfg, Some(&cfg.output_dir), |_, _, _, _| Ok(()))?;
            println!(
                "{} {}: acc {:.4} uf1 {:.4} uar {:.4} over {} folds; report {}",
                report.task,
                report.mode,
                report.acc,
                report.uf1,
                report.uar,
                report.folds.len(),
                cfg.output_dir.join("report.json").display()
            );
        }
        Command::Eval { checkpoint, manifest } => {
            let ckpt = load_checkpoint(&checkpoint, cli.common.mode)?;
            let mut run_cfg = cfg.clone();
            run_cfg.task = ckpt.meta.task.parse()?;
            run_cfg.preprocess = ckpt.meta.preprocess.clone();
            let index = load_dataset(&run_cfg, manifest.as_deref())?;
            let model = ckpt.model()?;
            let data = PreparedData::new(&index, &run_cfg.preprocess)?;
            let all: Vec<usize> = (0..index.len()).collect();
            let preds = predict(&model, &data, &all, cfg.train.batch_size)?;
            let m = confusion(&preds, &index.labels, index.task.num_classes())?;
            let summary = serde_json::json!({
                "task": ckpt.meta.task,
                "mode": ckpt.meta.mode,
                "n": index.len(),
                "confusion": m,
                "acc": m.acc(),
                "uf1": uf1(&m),
                "uar": uar(&m),
            });
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?);
        }
        Command::Gradcam {
            checkpoint,
            index: at,
            target,
            manifest,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint, cli.common.mode)?;
            let mut run_cfg = cfg.clone();
            run_cfg.task = ckpt.meta.task.parse()?;
            run_cfg.preprocess = ckpt.meta.preprocess.clone();
            let index = load_dataset(&run_cfg, manifest.as_deref())?;
            if at >= index.len() {
                return Err(Error::Data(format!("sample {at} out of range ({} samples)", index.len())));
            }
            let model = ckpt.model()?;
            let data = PreparedData::new(&index, &run_cfg.preprocess)?;
            let (diff, onset) = data.batch::<f32>(&[at], None)?;
            let target = match target {
                Some(t) => t,
                None => predict(&model, &data, &[at], 1)?[0],
            };
            let heat = gradcam(&model, &diff, &onset, target)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            create_dir(&dir)?;
            let stem = &index.samples[at].clip_id;
            let heat_path = dir.join(format!("{stem}_cam{target}.png"));
            heat.full.save_png(&heat_path)?;
            let ov_path = dir.join(format!("{stem}_cam{target}_overlay.png"));
            overlay(&data.onsets[at], &heat.full, 0.45)?.save_png(&ov_path)?;
            let (x, y) = heat.peak();
            println!("class {target}: peak at ({x}, {y}); wrote {} and {}", heat_path.display(), ov_path.display());
        }
        Command::Gradcheck { per_param } => {
            let seed = cli.common.seed.unwrap_or(0);
            let reports = full_suite(seed, per_param)?;
            let mut failed = 0;
            for r in &reports {
                let ok = r.passes(GRADCHECK_TOL);
                failed += usize::from(!ok);
                println!("{} {r}", if ok { "ok  " } else { "FAIL" });
            }
            if failed > 0 {
                eprintln!("{failed} gradient checks exceed {GRADCHECK_TOL:e}");
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} checks within {GRADCHECK_TOL:e}", reports.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
