use std::path::PathBuf;
use std::process::ExitCode;

use attrimap::attribution::{Method, SmoothConfig};
use attrimap::commands::{cmd_compare, cmd_evaluate, cmd_explain, ClassChoice, CompareArgs, EvaluateArgs, ExplainArgs};
use attrimap::evaluation::{PerturbationSchedule, Protocol, ScoreKind};
use attrimap::fixtures::{generate_fixture, FixtureSpec};
use attrimap::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Attention attribution maps and faithfulness benchmarks for Vision Transformers.
#[derive(Parser)]
#[command(name = "attrimap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image with one method and write a heatmap overlay and per-patch CSV.
    Explain(ExplainCmd),
    /// Run the perturbation benchmark over a dataset manifest.
    Evaluate(EvaluateCmd),
    /// Render all six methods side by side for one image.
    Compare(CompareCmd),
    /// Write the deterministic tiny model, synthetic dataset and golden outputs.
    #[command(hide = true)]
    Fixture(FixtureCmd),
}

#[derive(Args)]
struct Smoothing {
    /// SmoothGrad sample count.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Noise standard deviation as a fraction of the input value range.
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Seed for SmoothGrad noise and the random control.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Integrated Gradients path steps.
    #[arg(long, default_value_t = 32)]
    ig_steps: usize,
}

impl Smoothing {
    fn config(&self) -> SmoothConfig {
        SmoothConfig {
            samples: self.samples,
            sigma_fraction: self.sigma,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct ExplainCmd {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// One of rawatt, attgrad, attin, genericatt, attig, snna, snna-deterministic, random.
    #[arg(long, default_value = "snna")]
    method: Method,
    /// Class index, or "predicted".
    #[arg(long, default_value = "predicted")]
    class: ClassChoice,
    #[command(flatten)]
    smoothing: Smoothing,
    /// Also write the normalized mask as a grayscale PNG.
    #[arg(long)]
    save_mask: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "rawatt,attgrad,attin,genericatt,attig,snna,random")]
    methods: Vec<Method>,
    /// Comma-separated protocols: pixel-mask, token-mask, attention-mask.
    #[arg(long, value_delimiter = ',', default_value = "pixel-mask,token-mask,attention-mask")]
    protocols: Vec<Protocol>,
    /// Comma-separated masking fractions in (0, 1], strictly increasing (default 0.02..0.20).
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// multilabel-accuracy or target-class-probability.
    #[arg(long, default_value = "multilabel-accuracy")]
    score: ScoreKind,
    #[command(flatten)]
    smoothing: Smoothing,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareCmd {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "predicted")]
    class: ClassChoice,
    #[command(flatten)]
    smoothing: Smoothing,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FixtureCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = FixtureSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = FixtureSpec::default().samples)]
    samples: usize,
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("ATTRIMAP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Usage(format!("ATTRIMAP_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Explain(c) => {
            let out = cmd_explain(&ExplainArgs {
                image: c.image,
                weights: c.weights,
                method: c.method,
                class: c.class,
                smooth: c.smoothing.config(),
                ig_steps: c.smoothing.ig_steps,
                save_mask: c.save_mask,
                out: c.out,
            })?;
            println!("{}", out.png.display());
            println!("{}", out.csv.display());
        }
        Command::Evaluate(c) => {
            let fractions = c.fractions.unwrap_or_else(|| PerturbationSchedule::default().fractions);
            let reports = cmd_evaluate(&EvaluateArgs {
                dataset: c.dataset,
                weights: c.weights,
                methods: c.methods,
                protocols: c.protocols,
                fractions,
                score: c.score,
                seed: c.smoothing.seed,
                smooth: c.smoothing.config(),
                ig_steps: c.smoothing.ig_steps,
                threads: threads_from_env()?,
                out: c.out,
            })?;
            println!("method,protocol,aupc,logodd");
            for r in reports {
                println!("{},{},{:.6},{:.6}", r.method, r.protocol, r.aupc, r.logodd);
            }
        }
        Command::Compare(c) => {
            let out = cmd_compare(&CompareArgs {
                image: c.image,
                weights: c.weights,
                class: c.class,
                smooth: c.smoothing.config(),
                ig_steps: c.smoothing.ig_steps,
                out: c.out,
            })?;
            println!("{}", out.png.display());
        }
        Command::Fixture(c) => {
            let spec = FixtureSpec {
                seed: c.seed,
                samples: c.samples,
                ..Default::default()
            };
            generate_fixture(&spec, &c.out)?;
            println!("{}", c.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
