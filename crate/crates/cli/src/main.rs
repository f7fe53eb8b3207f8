use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use dsanet::datamodel::{load_manifest, synthesize_dataset, DatasetManifest, SynthSpec, MANIFEST_FILE, TEST_MANIFEST_FILE};
use dsanet::diff::FdOptions;
use dsanet::inference::{evaluate, write_evaluation};
use dsanet::report::{parse_score_csv, render_svg};
use dsanet::training::{gradcheck, load_videos, restore, train, RunConfig, CONFIG_FILE};
use dsanet::{Error, Result};

#[derive(Parser)]
#[command(name = "dsanet", version, about = "Weakly-supervised video anomaly detection on frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write per-epoch checkpoints and a loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the config's beta.
        #[arg(long)]
        beta: Option<f64>,
        /// Defaults to the config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate the training manifest instead of the test manifest.
        #[arg(long)]
        train_split: bool,
        /// Defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients of every objective against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Entries checked per parameter (all when omitted).
        #[arg(long)]
        entries: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a score track with ground-truth segments shaded.
    Report {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the score file name without its `_det.csv` suffix.
        #[arg(long)]
        video: Option<String>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, `key=value` with a JSON value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        cfg.apply_env()?;
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
            cfg.set(k, v)?;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_owned())
        } else {
            Error::Io {
                path: path.to_owned(),
                source: e,
            }
        }
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn eval_manifest(data: &Path, train_split: bool) -> Result<DatasetManifest> {
    let test = data.join(TEST_MANIFEST_FILE);
    if data.is_dir() && !train_split && test.exists() {
        load_manifest(&test)
    } else if data.is_dir() {
        load_manifest(&data.join(MANIFEST_FILE))
    } else {
        load_manifest(data)
    }
}

fn dim_of(manifest: &DatasetManifest) -> Result<usize> {
    manifest
        .videos
        .first()
        .map(|v| v.dim)
        .ok_or_else(|| Error::Config("manifest lists no videos".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let text = read(&spec)?;
            let spec: SynthSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad synth spec: {e}")))?;
            let mut spec = spec;
            if let Ok(s) = std::env::var(dsanet::training::SEED_ENV) {
                spec.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {s:?}")))?;
            }
            let ds = synthesize_dataset(&spec, &out)?;
            log::info!("wrote {} videos to {}", ds.features.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let manifest = load_manifest(&data)?;
            let videos = load_videos::<f32>(&manifest)?;
            let outcome = train(&videos, &manifest.classes, &cfg, Some(&out))?;
            if let Some(last) = outcome.reports.last() {
                log::info!("finished epoch {}: L_total={:.6}", last.epoch, last.total);
            }
            if let Some(p) = outcome.checkpoints.last() {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            beta,
            config,
            train_split,
            out,
        } => {
            let run_dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
            let cfg = RunConfig::load(&config.unwrap_or_else(|| run_dir.join(CONFIG_FILE)))?;
            let beta = beta.unwrap_or(cfg.beta);
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::BetaOutOfRange(beta));
            }
            let manifest = eval_manifest(&data, train_split)?;
            let (model, store) = restore::<f32>(&cfg, dim_of(&manifest)?, &manifest.classes, &checkpoint)?;
            let videos = load_videos::<f32>(&manifest)?;
            let ev = evaluate(&model, &store, &videos, beta, &cfg.inference)?;
            let out = out.unwrap_or_else(|| run_dir.join("eval"));
            write_evaluation(&out, &ev)?;
            println!("{}", serde_json::to_string_pretty(&ev.result).expect("EvalResult serializes"));
        }
        Command::Gradcheck {
            config,
            tol,
            entries,
            out,
        } => {
            let cfg = config.resolve()?;
            let opts = FdOptions {
                tol,
                max_entries_per_param: entries,
                seed: cfg.seed,
                ..FdOptions::default()
            };
            let report = gradcheck(&cfg, &opts)?;
            let json = report.to_json();
            match out {
                Some(p) => write(&p, &json)?,
                None => print!("{json}"),
            }
            if !report.passed() {
                return Err(Error::NonFiniteResult("gradient check"));
            }
        }
        Command::Report { scores, gt, out, video } => {
            let s = parse_score_csv(&read(&scores)?)?;
            let manifest = load_manifest(&gt)?;
            let id = match video {
                Some(v) => v,
                None => scores
                    .file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.trim_end_matches(".csv").trim_end_matches("_det").to_owned())
                    .unwrap_or_default(),
            };
            let rec = manifest
                .videos
                .iter()
                .find(|v| v.id == id)
                .ok_or_else(|| Error::Config(format!("video `{id}` not in {}", gt.display())))?;
            write(&out, &render_svg(&s, &rec.gt_segments, &id))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
