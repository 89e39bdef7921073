use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geomatch::benchgen::PairManifest;
use geomatch::matcher::InferenceMode;
use geomatch::pose::AlignMetric;
use geomatch::ViewTransform;
use geomatch_cli::pipeline::{self, Predictions};
use geomatch_cli::store::{read_json, write_bytes, write_stamped};
use geomatch_cli::{render, CliError, Context, Result, RunConfig};

#[derive(Parser)]
#[command(name = "geomatch", version, about = "Geometry-aware semantic correspondence over dense feature maps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Inputs shared by every subcommand; each overrides the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// COCO keypoint annotations.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Feature directory (manifest.json plus <id>__<variant>.npy).
    #[arg(long, global = true)]
    features: Option<PathBuf>,
    /// Directory of per-category subgroup schemas.
    #[arg(long, global = true)]
    schemas: Option<PathBuf>,
    /// Post-processor checkpoint applied before matching.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus with features and masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Build benchmark pair manifests from an annotation corpus.
    BuildBenchmark {
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict target locations for every pair of a manifest.
    Match {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Align the source pose before matching.
        #[arg(long)]
        align: bool,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Choose the source pose variant closest to each target.
    Align {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated, identity first.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Score predictions against a manifest.
    Evaluate {
        manifest: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, conflicts_with = "no_geo_split")]
        geo_split: bool,
        #[arg(long)]
        no_geo_split: bool,
        /// Also write the scores as a CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write a bar chart of the overall scores.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train the post-processor on a training manifest.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict the pose label of an image by template voting.
    PredictPose {
        image: u64,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for (slot, flag) in [
        (&mut cfg.dataset, &common.dataset),
        (&mut cfg.features, &common.features),
        (&mut cfg.schemas, &common.schemas),
        (&mut cfg.model, &common.model),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    Ok(cfg)
}

fn manifest(path: &Path) -> Result<PairManifest> {
    read_json(path)
}

fn parse_metric(s: &str) -> Result<AlignMetric> {
    Ok(AlignMetric::parse(s)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth {
            out,
            images,
            grid,
            channels,
        } => {
            let s = &mut cfg.synth;
            s.images = images.unwrap_or(s.images);
            s.grid = grid.unwrap_or(s.grid);
            s.channels = channels.unwrap_or(s.channels);
            let ctx = Context::new(cfg)?;
            let corpus = pipeline::synth(&ctx, &out)?;
            eprintln!("wrote {} images to {}", corpus.corpus.images.len(), out.display());
        }
        Command::BuildBenchmark { out } => {
            let ctx = Context::new(cfg)?;
            let bench = pipeline::benchmark(&ctx)?;
            let paths = pipeline::write_benchmark(&ctx, &bench, &out)?;
            for (p, m) in paths.iter().zip(&bench.manifests) {
                eprintln!("{}: {} pairs", p.display(), m.pairs.len());
            }
        }
        Command::Match {
            manifest: m,
            out,
            mode,
            window,
            temperature,
            align,
            metric,
        } => {
            let inf = &mut cfg.inference;
            if let Some(mode) = mode {
                inf.mode = InferenceMode::parse(&mode)?;
            }
            inf.window_size = window.unwrap_or(inf.window_size);
            inf.temperature = temperature.unwrap_or(inf.temperature);
            cfg.alignment.enabled |= align;
            if let Some(m) = metric {
                cfg.alignment.metric = parse_metric(&m)?;
            }
            let ctx = Context::new(cfg)?;
            let preds = pipeline::predict(&ctx, &manifest(&m)?)?;
            write_stamped(&out, &ctx.stamp, &preds)?;
        }
        Command::Align {
            manifest: m,
            out,
            variants,
            metric,
        } => {
            if let Some(vs) = variants {
                cfg.alignment.variants = vs
                    .iter()
                    .map(|v| ViewTransform::parse(v.trim()))
                    .collect::<geomatch::Result<_>>()?;
            }
            if let Some(m) = metric {
                cfg.alignment.metric = parse_metric(&m)?;
            }
            let ctx = Context::new(cfg)?;
            let aligned = pipeline::align(&ctx, &manifest(&m)?)?;
            write_stamped(&out, &ctx.stamp, &aligned)?;
        }
        Command::Evaluate {
            manifest: m,
            preds,
            out,
            alpha,
            geo_split,
            no_geo_split,
            csv,
            plot,
        } => {
            if let Some(a) = alpha {
                cfg.eval.alphas = a;
            }
            let split = match (geo_split, no_geo_split) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            let ctx = Context::new(cfg)?;
            let p: Predictions = read_json(&preds)?;
            let report = pipeline::evaluate_predictions(&ctx, &manifest(&m)?, &p, split)?;
            write_stamped(&out, &ctx.stamp, &report)?;
            if let Some(c) = csv {
                write_bytes(&c, &render::report_csv(&report, &ctx.stamp))?;
            }
            if let Some(s) = plot {
                write_bytes(&s, render::pck_svg(&report, &ctx.stamp).as_bytes())?;
            }
            for t in &report.pck {
                eprintln!("PCK@{}: {:.4}", t.alpha, t.per_point);
            }
        }
        Command::Train { manifest: m, out, steps } => {
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            let ctx = Context::new(cfg)?;
            let pairs = pipeline::training_pairs(&ctx, &manifest(&m)?)?;
            let ckpt = out.join("checkpoints");
            let every = ctx.config.train.checkpoint_every > 0;
            if every {
                std::fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
            }
            let outcome = pipeline::train_model(&ctx, &pairs, every.then_some(ckpt.as_path()))?;
            let model_path = out.join("model.gmck");
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            outcome.model.save(&model_path)?;
            write_bytes(&out.join("loss.csv"), &render::trace_csv(&outcome.trace, &ctx.stamp))?;
            write_bytes(&out.join("loss.svg"), render::loss_svg(&outcome.trace, &ctx.stamp).as_bytes())?;
            let summary = serde_json::json!({
                "pairs": pairs.len(),
                "steps": outcome.trace.len(),
                "final_loss": outcome.trace.last().map(|r| r.total),
                "block_means": geomatch::trainer::window_means(&outcome.trace, 500),
                "model": "model.gmck",
                "checkpoints": outcome
                    .checkpoints
                    .iter()
                    .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                    .collect::<Vec<_>>(),
                "train": ctx.config.train,
            });
            write_stamped(&out.join("train.json"), &ctx.stamp, &summary)?;
        }
        Command::PredictPose { image, templates, out } => {
            let ctx = Context::new(cfg)?;
            let sets = pipeline::load_templates(&templates)?;
            let pose = pipeline::pose(&ctx, image, &sets)?;
            write_stamped(&out, &ctx.stamp, &pose)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = geomatch_cli::configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
