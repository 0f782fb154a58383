use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdnet::config::{DataSection, TrainConfig};
use cdnet::data::load_dir;
use cdnet::error::{Error, Result};
use cdnet::eval::{evaluate, predict};
use cdnet::network::Network;
use cdnet::synth::SyntheticSpec;
use cdnet::train::{datasets, train};
use cdnet_core::gradsuite;

#[derive(Parser)]
#[command(name = "cdnet", version, about = "Bi-temporal change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset tree (defaults to its validation split).
    Eval {
        #[arg(long = "ckpt", alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Predict a change mask for one image pair.
    Predict {
        #[arg(long = "ckpt", alias = "checkpoint")]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the change probability as an 8-bit image.
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        /// Only checks whose name contains this string.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOL)]
        tol: f64,
        #[arg(long)]
        list: bool,
    },
    /// Write synthetic pairs as `{A,B,label}/<id>.png`.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "n", alias = "count", default_value_t = 64)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        /// JSON generator settings; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output, quiet } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let outcome = train(&cfg, !quiet)?;
            println!("checkpoint {}", outcome.checkpoint.display());
            if let Some(m) = outcome.metrics {
                println!("{}", serde_json::to_string(&m)?);
            }
        }
        Command::Eval { checkpoint, data, batch_size } => {
            let net = Network::load(&checkpoint)?;
            let samples = match data {
                Some(dir) => load_dir(&dir)?,
                None => match &net.config.data {
                    DataSection::Dir { val: None, .. } => return Err(Error::Config("no --data and no validation split configured".into())),
                    _ => datasets(&net.config)?.1,
                },
            };
            if samples.is_empty() {
                return Err(Error::Config("no pairs to evaluate".into()));
            }
            println!("{}", serde_json::to_string(&evaluate(&net, &samples, batch_size)?)?);
        }
        Command::Predict { checkpoint, a, b, out, prob } => {
            let net = Network::load(&checkpoint)?;
            let frac = predict(&net, &a, &b, &out, prob.as_deref())?;
            println!("changed_fraction {frac:.6}");
        }
        Command::Gradcheck { op, tol, list } => {
            if list {
                for n in gradsuite::names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let mut failed = 0;
            for o in gradsuite::run(op.as_deref(), tol)? {
                let ok = o.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{} {:<24} checked {:>4} max_rel {:.3e} ({:.2?})",
                    if ok { "PASS" } else { "FAIL" },
                    o.name,
                    o.report.checked,
                    o.report.max_rel_error,
                    o.elapsed
                );
                for f in o.report.failures.iter().take(5) {
                    println!(
                        "    {}[{}]: analytic {:.6e} numeric {:.6e}",
                        f.param.as_deref().unwrap_or("input"),
                        f.index,
                        f.analytic,
                        f.numeric
                    );
                }
            }
            if failed > 0 {
                return Err(Error::Config(format!("{failed} gradient checks failed")));
            }
        }
        Command::MakeSynthetic { out, count, start, spec } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            let ids = spec.write(&out, start, count)?;
            println!("wrote {} pairs to {}", ids.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
