use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use reform_core::bench::{bench_catalog, run_benchmark};
use reform_core::config::Config;
use reform_core::dataset::write_dataset;
use reform_core::encoder::{encode_objective, encode_optimize, EncodeResult};
use reform_core::image::Image;
use reform_core::pipeline::{run_stage, ModelSet, Stage};
use reform_core::reformulator::{reformulate, AttributeTarget};
use reform_core::stylegan::LatentCode;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "reform", version, about = "Query reformulation through a GAN latent space")]
struct Cli {
    /// JSON config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "models")]
    models_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic catalog as PNGs plus manifest.json.
    Dataset {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Products per listing; must divide `n`.
        #[arg(long, default_value_t = 2)]
        variants: usize,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    TrainGan,
    TrainPerceptual,
    TrainEncoder,
    TrainClassifier,
    /// Invert an image into a latent code.
    Encode {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Optimize)]
        mode: Mode,
        #[arg(long, default_value = "encoded")]
        out: PathBuf,
    },
    /// Edit a code toward attribute targets.
    Reformulate {
        /// Code file written by `encode` or `reformulate`.
        #[arg(long)]
        code: PathBuf,
        /// `name=y` with y in (0, 1); repeatable.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        #[arg(long)]
        anchor: Option<f64>,
        #[arg(long, default_value = "reformulated")]
        out: PathBuf,
    },
    /// Render the image of a code file.
    Generate {
        #[arg(long)]
        code: PathBuf,
        #[arg(long, default_value = "generated.png")]
        out: PathBuf,
    },
    /// Run the ONDCG benchmark and write its report.
    Bench {
        #[arg(long, default_value = "ondcg_report.json")]
        out: PathBuf,
    },
    /// Serve the HTTP API on $PORT (default 8080).
    Serve,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Optimize,
    Fast,
}

/// What `encode` and `reformulate` write; `generate` reads `code` back.
#[derive(Serialize, Deserialize)]
struct CodeFile {
    code: LatentCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps_used: Option<usize>,
    #[serde(default)]
    attributes: BTreeMap<String, f32>,
    seed: u64,
    config: serde_json::Value,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_code(path: &Path) -> anyhow::Result<LatentCode> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CodeFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(file.code)
}

fn parse_target(s: &str) -> anyhow::Result<(String, f32)> {
    let (name, y) = s.split_once('=').with_context(|| format!("target '{s}' is not name=y"))?;
    let y: f32 = y.trim().parse().with_context(|| format!("target '{s}' has a non-numeric value"))?;
    if !(y > 0.0 && y < 1.0) {
        bail!("target '{s}' must lie strictly between 0 and 1");
    }
    Ok((name.trim().to_string(), y))
}

fn attributes(models: &ModelSet, code: &LatentCode) -> anyhow::Result<BTreeMap<String, f32>> {
    let out = models.classifier.predict(code)?;
    Ok(models.classifier.names.iter().cloned().zip(out).collect())
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    tracing::info!(seed = cfg.seed, fingerprint = %cfg.fingerprint(), config = %serde_json::to_string(&cfg)?, "effective config");
    let cfg_json = serde_json::to_value(&cfg)?;
    let dir = &cli.models_dir;
    match cli.command {
        Command::Dataset { n, variants, out } => {
            let manifest = write_dataset(&out, cfg.seed, n, variants, cfg.image_size)?;
            let meta = serde_json::json!({ "n": n, "variants": variants, "seed": cfg.seed, "config": cfg_json });
            write_json(&out.join("dataset.json"), &meta)?;
            tracing::info!(images = manifest.len(), out = %out.display(), "dataset written");
        }
        Command::TrainGan => run_stage(Stage::Gan, &cfg, dir)?,
        Command::TrainPerceptual => run_stage(Stage::Perceptual, &cfg, dir)?,
        Command::TrainEncoder => run_stage(Stage::Encoder, &cfg, dir)?,
        Command::TrainClassifier => run_stage(Stage::Classifier, &cfg, dir)?,
        Command::Encode { image, mode, out } => {
            let models = ModelSet::load(dir)?;
            let x = Image::load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            let ecfg = cfg.encode_config();
            let res: EncodeResult = match mode {
                Mode::Optimize => encode_optimize(&x, models.models(), &ecfg, None)?,
                Mode::Fast => {
                    let enc = models.encoder.as_ref().context("fast mode needs a trained encoder; run train-encoder")?;
                    encode_objective(&x, &enc.encode_fast(&x)?, models.models(), &ecfg)?
                }
            };
            let recon = models.models().render(&res.code)?;
            std::fs::create_dir_all(&out)?;
            recon.save_png(out.join("reconstruction.png"))?;
            let file = CodeFile {
                attributes: attributes(&models, &res.code)?,
                code: res.code,
                loss: Some(res.final_loss),
                converged: None,
                steps_used: Some(res.steps_used),
                seed: cfg.seed,
                config: cfg_json,
            };
            write_json(&out.join("code.json"), &file)?;
            tracing::info!(loss = res.final_loss, out = %out.display(), "encoded");
        }
        Command::Reformulate { code, targets, anchor, out } => {
            let models = ModelSet::load(dir)?;
            let z0 = read_code(&code)?;
            let pairs = targets.iter().map(|t| parse_target(t)).collect::<anyhow::Result<Vec<_>>>()?;
            let target = AttributeTarget::from_pairs(&models.classifier.names, &pairs)?;
            let anchor = anchor.unwrap_or(cfg.reform.lambda_anchor);
            if !(anchor >= 0.0 && anchor.is_finite()) {
                bail!("--anchor must be a non-negative number");
            }
            let edit = reformulate(&z0, &models.classifier, &target, &cfg.reform.optimizer, anchor)?;
            std::fs::create_dir_all(&out)?;
            models.models().render(&edit.code)?.save_png(out.join("image.png"))?;
            let file = CodeFile {
                attributes: attributes(&models, &edit.code)?,
                code: edit.code,
                loss: None,
                converged: Some(edit.converged),
                steps_used: Some(edit.steps_used),
                seed: cfg.seed,
                config: cfg_json,
            };
            write_json(&out.join("code.json"), &file)?;
            tracing::info!(converged = edit.converged, steps = edit.steps_used, out = %out.display(), "reformulated");
        }
        Command::Generate { code, out } => {
            let models = ModelSet::load(dir)?;
            let img = models.models().render(&read_code(&code)?)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            img.save_png(&out)?;
            tracing::info!(out = %out.display(), "generated");
        }
        Command::Bench { out } => {
            let models = ModelSet::load(dir)?;
            let bcfg = cfg.bench_config();
            let catalog = bench_catalog(&bcfg, models.image_size())?;
            let mut report = run_benchmark(&catalog, models.bench_models(), &bcfg, models.hashes.clone())?;
            report.config = cfg_json;
            write_json(&out, &report)?;
            tracing::info!(
                mean = report.aggregate.mean,
                control_mean = report.control_aggregate.mean,
                p = report.sign_test_vs_control.p_value,
                out = %out.display(),
                "bench finished"
            );
        }
        Command::Serve => {
            let port = reform_service::port_from_env().map_err(anyhow::Error::msg)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(reform_service::run(dir, &cfg, port))?;
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    if matches!(cli.command, Command::Serve) {
        tracing_subscriber::fmt().json().with_env_filter(filter).init();
    } else {
        let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
        tracing_subscriber::fmt().with_writer(std::io::stderr).with_ansi(ansi).with_env_filter(filter).init();
    }
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
