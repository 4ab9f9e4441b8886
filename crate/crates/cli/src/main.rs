//! `fedklpr` command line: run experiments from a config file, inspect
//! sparse-model messages, and summarize finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedklpr::agg::ClientReport;
use fedklpr::config::ExperimentConfig;
use fedklpr::fed::{run_experiment_with, RoundObserver};
use fedklpr::params::ParamVector;
use fedklpr::report::{parse_rounds_csv, render_decisions, render_rounds_csv, render_summary};
use fedklpr::wire::{decode, encode, SparseModelMessage};

const SEED_ENV: &str = "FEDKLPR_SEED";

#[derive(Parser)]
#[command(
    name = "fedklpr",
    version,
    about = "Deterministic federated-learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment from a config file and write the run logs.
    Run {
        /// Path to the TOML config. Omit with --print-defaults.
        config: Option<PathBuf>,
        /// Output directory for rounds.csv, summary.txt, decisions.log and
        /// the final-round upload messages.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the default config as TOML and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Decode a sparse-model message file and print its layout.
    Inspect { message: PathBuf },
    /// Summarize a finished run directory.
    Report { dir: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            out,
            print_defaults,
        } => cmd_run(config, out, print_defaults),
        Cmd::Inspect { message } => cmd_inspect(&message),
        Cmd::Report { dir } => cmd_report(&dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed.parse::<u64>().with_context(|| {
            format!("{SEED_ENV} must be an unsigned 64-bit integer, got {seed:?}")
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Captures the final round's uploads so they can be written out for
/// `inspect`.
struct CaptureLastRound {
    reports: Vec<ClientReport>,
    round: usize,
}

impl RoundObserver for CaptureLastRound {
    fn on_round(
        &mut self,
        round: usize,
        reports: &[ClientReport],
        _weights: &[f64],
        _global: &ParamVector,
    ) {
        self.reports = reports.to_vec();
        self.round = round;
    }
}

fn cmd_run(config: Option<PathBuf>, out: Option<PathBuf>, print_defaults: bool) -> Result<()> {
    if print_defaults {
        print!("{}", toml::to_string_pretty(&ExperimentConfig::default())?);
        return Ok(());
    }
    let config = config.context("missing <CONFIG> argument (or use --print-defaults)")?;
    let out = out.context("missing --out <DIR>")?;
    let cfg = load_config(&config)?;

    let mut capture = CaptureLastRound {
        reports: Vec::new(),
        round: 0,
    };
    let output = run_experiment_with(&cfg, &mut capture)?;

    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    fs::write(out.join("config.toml"), toml::to_string_pretty(&cfg)?)?;
    let csv = render_rounds_csv(&output.records);
    fs::write(out.join("rounds.csv"), &csv)?;
    fs::write(out.join("decisions.log"), render_decisions(&output.records))?;
    let rows = parse_rounds_csv(&csv)?;
    fs::write(out.join("summary.txt"), render_summary(&cfg, &rows)?)?;
    for report in &capture.reports {
        let msg = SparseModelMessage::from_report(report, capture.round as u16)?;
        let name = format!("message_client_{}.fklp", report.client_id);
        fs::write(out.join(name), encode(&msg))?;
    }
    println!(
        "wrote {} rounds x {} clients to {}",
        output.records.len(),
        cfg.clients,
        out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read message file {}", path.display()))?;
    let msg = match decode(&bytes) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("decode error [{}]: {e}", e.code());
            std::process::exit(1);
        }
    };
    println!(
        "client_id={} round={} pruning_ratio={:.6} klaw_raw={:.6} layers={}",
        msg.client_id,
        msg.round,
        msg.pruning_ratio,
        msg.klaw_raw,
        msg.layers.len()
    );
    for l in &msg.layers {
        let n = l.bits.len();
        let kept = l.values.len();
        let sparsity = if n == 0 {
            0.0
        } else {
            100.0 * (n - kept) as f64 / n as f64
        };
        println!(
            "  {} shape={:?} coords={} kept={} sparsity={:.2}%",
            l.name, l.shape, n, kept, sparsity
        );
    }
    println!("total_bytes={}", bytes.len());
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let cfg_path = dir.join("config.toml");
    let csv_path = dir.join("rounds.csv");
    if !cfg_path.exists() || !csv_path.exists() {
        bail!(
            "run outputs missing: expected {} and {}",
            cfg_path.display(),
            csv_path.display()
        );
    }
    let cfg: ExperimentConfig = toml::from_str(&fs::read_to_string(&cfg_path)?)
        .with_context(|| format!("invalid config {}", cfg_path.display()))?;
    let rows = parse_rounds_csv(&fs::read_to_string(&csv_path)?)?;
    print!("{}", render_summary(&cfg, &rows)?);
    Ok(())
}
