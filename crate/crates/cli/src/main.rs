//! sobolev-forge: build, audit and evaluate compiled approximators and run
//! the rate, manifold, risk and adversarial studies.

// `!(a <= b)` is used on purpose so NaN fails a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;
mod studies;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sobolev_forge::algebra::compile_scalar;
use sobolev_forge::calculus::build_trapezoid;
use sobolev_forge::io::{resnet_from_json, resnet_to_json};
use sobolev_forge::targets::registry;
use sobolev_forge::taylor::{build_euclidean, EuclideanParams, TaylorMode};
use sobolev_forge::{audit_class, ForgeError};

use config::StudyConfig;
use output::{write_atomic, write_json};
use studies::Check;

#[derive(Parser)]
#[command(
    name = "sobolev-forge",
    version,
    about = "Compile smooth functions into ReLU ConvResNets and measure Sobolev-norm accuracy"
)]
struct Cli {
    /// Study configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the configuration's, else "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "SOBOLEV_FORGE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Euclidean approximator and save its network.
    Build {
        #[arg(long)]
        target: String,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        alpha: usize,
        #[arg(long)]
        mt: usize,
        #[arg(long)]
        jt: usize,
        #[arg(long, default_value = "classical")]
        mode: String,
    },
    /// Evaluate a saved network at points given as comma-separated lists.
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long = "point", required = true)]
        points: Vec<String>,
    },
    /// Architecture class of a saved network (or of a config's network).
    Audit {
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Euclidean error-rate study.
    RateStudy,
    /// Manifold error-rate study.
    ManifoldStudy,
    /// Empirical residual study.
    RiskStudy,
    /// Adversarial-gap study.
    AdvStudy,
    /// Network serialization.
    NetIo {
        #[command(subcommand)]
        action: NetIo,
    },
}

#[derive(Subcommand)]
enum NetIo {
    /// Save the bump network psi(3N(x - m/N)).
    SavePsi {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
    },
    /// Reload a network, re-save it and compare outputs at 100 points.
    Check { path: PathBuf },
}

/// Bad configuration or parameters: exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<ForgeError>() {
        Some(ForgeError::Parameter(_) | ForgeError::Precondition(_)) => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli, expected: &str) -> Result<StudyConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config is required for this subcommand".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let cfg = StudyConfig::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    if cfg.kind() != expected {
        return Err(ConfigError(format!(
            "config kind is \"{}\", this subcommand needs \"{expected}\"",
            cfg.kind()
        ))
        .into());
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&StudyConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn report(checks: &[Check]) -> Result<bool> {
    for c in checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn parse_point(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| ConfigError(format!("bad coordinate \"{t}\": {e}")).into())
        })
        .collect()
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Build {
            target,
            dim,
            alpha,
            mt,
            jt,
            mode,
        } => {
            let mode = match mode.as_str() {
                "classical" => TaylorMode::Classical,
                "averaged" => TaylorMode::Averaged,
                other => return Err(ConfigError(format!("unknown mode \"{other}\"")).into()),
            };
            let f = registry(target, *dim, *alpha)?;
            let approx = build_euclidean(
                &f,
                &EuclideanParams {
                    mode,
                    ..EuclideanParams::new(*mt, *jt)
                },
            )?;
            let out = out_dir(cli, None);
            let net = approx.network.as_ref().context("build produced no network")?;
            write_atomic(&out.join("network.json"), resnet_to_json(net)?.as_bytes())?;
            write_json(
                &out.join("build.json"),
                &serde_json::json!({ "target": target, "record": approx.record, "audit": approx.audit }),
            )?;
            println!("{}", serde_json::to_string(&approx.record)?);
            Ok(true)
        }
        Command::Eval { net, points } => {
            let model = studies::load_network(net)?;
            let values = points
                .iter()
                .map(|p| Ok(model.forward(&parse_point(p)?)?))
                .collect::<Result<Vec<f64>>>()?;
            println!("{}", serde_json::to_string(&values)?);
            Ok(true)
        }
        Command::Audit { net } => {
            let out = out_dir(cli, None);
            let params = match (net, &cli.config) {
                (Some(path), _) => {
                    let p = audit_class(&studies::load_network(path)?);
                    write_json(&out.join("audit.json"), &p)?;
                    p
                }
                (None, Some(_)) => {
                    let cfg = load_config(cli, "audit")?;
                    let StudyConfig::Audit(a) = &cfg else { unreachable!() };
                    studies::audit(a, &out_dir(cli, Some(&cfg)))?
                }
                (None, None) => return Err(ConfigError("audit needs --net or --config".into()).into()),
            };
            println!("{}", serde_json::to_string(&params)?);
            Ok(true)
        }
        Command::RateStudy => {
            let cfg = load_config(cli, "euclidean-rate")?;
            let StudyConfig::EuclideanRate(c) = &cfg else {
                unreachable!()
            };
            let seed = cli.seed.or(cfg.seed()).unwrap_or(0);
            report(&studies::euclidean_rate(c, seed, &out_dir(cli, Some(&cfg)))?)
        }
        Command::ManifoldStudy => {
            let cfg = load_config(cli, "manifold-rate")?;
            let StudyConfig::ManifoldRate(c) = &cfg else {
                unreachable!()
            };
            let seed = cli.seed.or(cfg.seed()).unwrap_or(0);
            report(&studies::manifold_rate(c, seed, &out_dir(cli, Some(&cfg)))?)
        }
        Command::RiskStudy => {
            let cfg = load_config(cli, "risk")?;
            let StudyConfig::Risk(c) = &cfg else { unreachable!() };
            let seed = cli.seed.or(cfg.seed()).unwrap_or(c.risk.seed);
            report(&studies::risk_study(c, seed, &out_dir(cli, Some(&cfg)))?)
        }
        Command::AdvStudy => {
            let cfg = load_config(cli, "adversarial")?;
            let StudyConfig::Adversarial(c) = &cfg else {
                unreachable!()
            };
            let seed = cli.seed.or(cfg.seed()).unwrap_or(c.risk.seed);
            report(&studies::adversarial_study(c, seed, &out_dir(cli, Some(&cfg)))?)
        }
        Command::NetIo { action } => match action {
            NetIo::SavePsi { m, n } => {
                let net = compile_scalar(&build_trapezoid(*m, *n)?)?;
                let path = out_dir(cli, None).join("psi.json");
                write_atomic(&path, resnet_to_json(&net)?.as_bytes())?;
                println!("{}", path.display());
                Ok(true)
            }
            NetIo::Check { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let model = resnet_from_json(&text)?;
                let again = resnet_from_json(&resnet_to_json(&model)?)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
                let mut worst = 0.0f64;
                for _ in 0..100 {
                    let x: Vec<f64> = (0..model.input_dim).map(|_| rng.gen::<f64>()).collect();
                    let (a, b) = (model.forward(&x)?, again.forward(&x)?);
                    if a.to_bits() != b.to_bits() {
                        worst = worst.max((a - b).abs().max(f64::MIN_POSITIVE));
                    }
                }
                if worst > 0.0 || again != model {
                    bail!("roundtrip changed the network (max |diff| = {worst:e})");
                }
                println!("{{\"roundtrip\":\"bit-exact\",\"points\":100}}");
                Ok(true)
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more acceptance checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
