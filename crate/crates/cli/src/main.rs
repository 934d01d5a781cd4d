use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use radiotwin_core::metrics::ClipRange;
use radiotwin_core::pipeline::{self, FieldChoice, Layout, RunConfig, SamplingMode};
use radiotwin_core::Vec3;

/// Calibrate a ray-traced digital twin's surface materials from sparse channel measurements.
#[derive(Parser)]
#[command(name = "radiotwin", version)]
struct Cli {
    /// Run configuration (TOML or JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a builtin demo scene as JSON.
    GenScene {
        /// shoebox, partitioned or two-material-wall.
        #[arg(long, default_value = "shoebox")]
        name: String,
        /// Subdivide faces into squares of about this size (m).
        #[arg(long)]
        cell: Option<f64>,
        /// Destination file; defaults to `<out>/scene.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Simulate the reference channel over the evaluation grid.
    SimulateTruth(TxArg),
    /// Pick sparse measurement cells from the truth dataset.
    Sample {
        #[arg(long)]
        mode: Option<SamplingMode>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Build the Bayesian channel map from the samples.
    BuildBcm,
    /// Train the material field against the channel map.
    Calibrate {
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Predict the channel over the grid with the calibrated field.
    Predict {
        #[command(flatten)]
        tx: TxArg,
        /// Use the untrained neutral field instead of the checkpoint.
        #[arg(long)]
        neutral: bool,
    },
    /// Score a prediction against the truth for the same Tx.
    Evaluate {
        #[command(flatten)]
        tx: TxArg,
        /// Evaluate the neutral-field prediction.
        #[arg(long)]
        neutral: bool,
    },
    /// Render a dataset's gain map as PGM with CSV and JSON sidecars.
    ExportMap {
        /// Dataset stem, e.g. `<out>/prediction`.
        #[arg(long)]
        stem: PathBuf,
        /// Destination directory; defaults to `<out>`.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Display range `lo,hi` in dB, or `auto`.
        #[arg(long, allow_hyphen_values = true)]
        clip: Option<String>,
    },
    /// All stages for the configured Tx.
    Run,
}

#[derive(Args)]
struct TxArg {
    /// Transmitter `x,y,z` in metres; defaults to the configured Tx.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    tx: Option<Vec3>,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got '{s}'")),
    }
}

fn parse_clip(s: &str) -> Result<ClipRange> {
    if s == "auto" {
        return Ok(ClipRange::Auto);
    }
    let (lo, hi) = s.split_once(',').ok_or_else(|| anyhow!("clip must be 'lo,hi' or 'auto'"))?;
    let (lo_db, hi_db): (f64, f64) = (lo.trim().parse()?, hi.trim().parse()?);
    if !(lo_db < hi_db) {
        bail!("clip needs lo < hi, got {lo_db} and {hi_db}");
    }
    Ok(ClipRange::Fixed { lo_db, hi_db })
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn field(neutral: bool) -> FieldChoice {
    if neutral {
        FieldChoice::Neutral
    } else {
        FieldChoice::Calibrated
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, out) = load_config(&cli)?;
    match cli.command {
        Command::GenScene { name, cell, output } => {
            let path = output.unwrap_or_else(|| out.join("scene.json"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            pipeline::stage_gen_scene(&name, cell, &path)?;
            println!("{}", path.display());
        }
        Command::SimulateTruth(TxArg { tx }) => {
            let stem = pipeline::stage_simulate_truth(&cfg, &out, tx)?;
            println!("{}", stem.display());
        }
        Command::Sample { mode, m } => {
            cfg.sampling.mode = mode.unwrap_or(cfg.sampling.mode);
            cfg.sampling.m = m.unwrap_or(cfg.sampling.m);
            cfg.validate()?;
            pipeline::stage_sample(&cfg, &out)?;
        }
        Command::BuildBcm => pipeline::stage_build_bcm(&cfg, &out)?,
        Command::Calibrate { iterations } => {
            cfg.train.iterations = iterations.unwrap_or(cfg.train.iterations);
            pipeline::stage_calibrate(&cfg, &out)?;
        }
        Command::Predict { tx, neutral } => {
            let stem = pipeline::stage_predict(&cfg, &out, tx.tx, field(neutral))?;
            println!("{}", stem.display());
        }
        Command::Evaluate { tx, neutral } => {
            let lay = Layout::new(&out)?;
            let tag = pipeline::tx_tag(tx.tx);
            let truth = lay.truth(tag.as_deref());
            let ptag = if neutral {
                Some(tag.as_ref().map_or("neutral".into(), |t| format!("neutral_{t}")))
            } else {
                tag.clone()
            };
            let pred = lay.prediction(ptag.as_deref());
            let metrics = lay.metrics(ptag.as_deref());
            let rep = pipeline::stage_evaluate(&cfg, &out, &truth, &pred, &metrics)?;
            print_json(&rep)?;
        }
        Command::ExportMap { stem, dir, clip } => {
            let clip = clip.as_deref().map(parse_clip).transpose()?.unwrap_or_default();
            let dir = dir.unwrap_or_else(|| out.clone());
            pipeline::stage_export_map(&cfg, &stem, &dir, clip)?;
        }
        Command::Run => {
            let rep = pipeline::run_all(&cfg, &out)?;
            print_json(&rep)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
