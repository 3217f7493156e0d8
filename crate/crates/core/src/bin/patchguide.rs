use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use patchguide::config::{Backend, LoadedConfig, Overrides};
use patchguide::generator::PromptKind;
use patchguide::pipeline::{self, Pipeline};

#[derive(Parser)]
#[command(name = "patchguide", version, about = "Mine repair patterns and generate pattern-guided vulnerability fixes")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "patchguide.toml")]
    config: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Matcher backend: remote, retrieval or mock (gold guidance).
    #[arg(long, global = true)]
    backend: Option<Backend>,
    /// Prompt mode: base, cwe_prefix, few_shot_random, few_shot_rag or guided.
    #[arg(long, global = true)]
    mode: Option<PromptKind>,
    /// Guidance candidates per instance.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Samples per guidance (guided) or per temperature.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate datasets into pairs.jsonl.
    Ingest,
    /// Extract repair patterns from every usable pair.
    Extract,
    /// Produce top-k guidance for the evaluation split.
    Match,
    /// Sample patch candidates.
    Generate,
    /// Score candidates with Exact Match.
    Evaluate,
    /// Compare two eval_report.json files.
    Report {
        current: PathBuf,
        baseline: PathBuf,
    },
    /// Run ingest through evaluate.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { current, baseline } = &cli.command {
        print!("{}", pipeline::report(current, baseline)?);
        return Ok(());
    }
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        backend: cli.backend,
        mode: cli.mode,
        k: cli.k,
        samples: cli.samples,
    };
    let loaded = LoadedConfig::load(&cli.config, &overrides)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    let p = Pipeline::new(loaded);
    match cli.command {
        Command::Ingest => ingest(&p),
        Command::Extract => extract(&p),
        Command::Match => match_stage(&p),
        Command::Generate => generate(&p),
        Command::Evaluate => evaluate(&p),
        Command::Run => {
            ingest(&p)?;
            extract(&p)?;
            if p.config().config.generation.mode == PromptKind::Guided {
                match_stage(&p)?;
            }
            generate(&p)?;
            evaluate(&p)
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn ingest(p: &Pipeline) -> Result<()> {
    let s = p.ingest()?;
    println!(
        "ingest: {} pairs ({} train, {} valid, {} test), {} invalid",
        s.pairs, s.train, s.valid, s.test, s.invalid
    );
    Ok(())
}

fn extract(p: &Pipeline) -> Result<()> {
    let s = p.extract()?;
    println!(
        "extract: {} pairs, {} patterns, {} discarded, inventory v{}",
        s.pairs, s.accepted, s.discarded, s.inventory_version
    );
    Ok(())
}

fn match_stage(p: &Pipeline) -> Result<()> {
    let s = p.match_guidance()?;
    println!("match: {}/{} instances have guidance", s.with_guidance, s.instances);
    if let Some(full) = &s.full {
        println!(
            "match: precision@{k} {:.2}%, recall@{k} {:.2}% over {} gold patterns",
            100.0 * full.precision_at_k,
            100.0 * full.recall_at_k,
            full.n,
            k = full.k
        );
    }
    Ok(())
}

fn generate(p: &Pipeline) -> Result<()> {
    let m = p.generate()?;
    println!(
        "generate: {} candidates from {}/{} samples",
        m.candidates, m.received_samples, m.requested_samples
    );
    Ok(())
}

fn evaluate(p: &Pipeline) -> Result<()> {
    let report = p.evaluate()?;
    print!("{}", report.to_table());
    Ok(())
}
