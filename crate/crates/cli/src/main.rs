use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rlls_core::exbmdp::ExbmdpTargets;
use rlls_core::harness::{
    emit_metrics, generate_bundle, median_by_eps, oracle_summary, run_experiment, run_sweep, ExperimentConfig, Format,
    OracleSummary, RunReport,
};
use rlls_core::instances::twochain;
use rlls_core::TabularMdp;

#[derive(Parser)]
#[command(name = "rlls", version, about = "Local-simulator RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an ExBMDP instance (targets JSON via --config).
    Gen(Common),
    /// Exact values and coefficients of an instance (MDP JSON via --config, twochain if omitted).
    Oracle(Common),
    /// Run one experiment from a config file.
    Run(Common),
    /// Run an eps x seed sweep from a config file.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutFormat>,
    /// Multiplier applied to the sample counts.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(c) => gen(&c),
        Command::Oracle(c) => oracle(&c),
        Command::Run(c) => run(&c),
        Command::Sweep(c) => sweep(&c),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gen(c: &Common) -> Result<()> {
    let targets = match &c.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ExbmdpTargets::new(3, 3, 2, 2),
    };
    if matches!(c.format, Some(OutFormat::Csv)) {
        bail!("gen only writes JSON");
    }
    let bundle = generate_bundle(c.seed.unwrap_or(0), &targets)?;
    write_or_print(c.out.as_deref(), &(serde_json::to_string_pretty(&bundle)? + "\n"))
}

fn oracle_csv(s: &OracleSummary) -> String {
    let mut text = String::from("layer,states,c_cov,c_push\n");
    for h in 0..s.horizon {
        text += &format!("{},{},{},{}\n", h + 1, s.states_per_layer[h], s.c_cov_per_layer[h], s.c_push_per_layer[h]);
    }
    text
}

fn oracle(c: &Common) -> Result<()> {
    let mdp = match &c.config {
        Some(p) => TabularMdp::from_json(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => twochain(),
    };
    let s = oracle_summary(&mdp);
    let text = match c.format.unwrap_or(OutFormat::Json) {
        OutFormat::Json => serde_json::to_string_pretty(&s)? + "\n",
        OutFormat::Csv => oracle_csv(&s),
    };
    write_or_print(c.out.as_deref(), &text)
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let Some(path) = &c.config else {
        bail!("--config is required");
    };
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = c.scale {
        cfg.scale.scale = scale;
    }
    if let Some(f) = c.format {
        cfg.format = f.into();
    }
    if let Some(out) = &c.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summary_line(r: &RunReport) -> String {
    format!(
        "{:?} seed={} eps={} J*={:.6} J={:.6} subopt={:.6} episodes={} transitions={} resets={}",
        r.algorithm,
        r.seed,
        r.eps,
        r.j_star,
        r.j_output,
        r.suboptimality,
        r.ledger.episodes_started,
        r.ledger.transitions_sampled,
        r.ledger.resets
    )
}

fn run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let report = run_experiment(&cfg)?;
    match &cfg.output {
        Some(p) => emit_metrics(&report, p, cfg.format)?,
        None if cfg.format == Format::Json => write_or_print(None, &(serde_json::to_string_pretty(&report)? + "\n"))?,
        None => {}
    }
    eprintln!("{}", summary_line(&report));
    Ok(())
}

fn sweep_csv(reports: &[RunReport]) -> String {
    let mut text = String::from("eps,seed,j_star,j_output,suboptimality,episodes,transitions,resets\n");
    for r in reports {
        text += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.eps,
            r.seed,
            r.j_star,
            r.j_output,
            r.suboptimality,
            r.ledger.episodes_started,
            r.ledger.transitions_sampled,
            r.ledger.resets
        );
    }
    text
}

fn sweep(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if c.seed.is_some() && cfg.seeds.is_empty() {
        cfg.seeds = vec![cfg.seed];
    }
    let reports = run_sweep(&cfg)?;
    let text = match cfg.format {
        Format::Csv => sweep_csv(&reports),
        Format::Json => serde_json::to_string_pretty(&reports)? + "\n",
    };
    write_or_print(cfg.output.as_deref(), &text)?;
    for (eps, med) in median_by_eps(&reports) {
        eprintln!("eps={eps} median_subopt={med:.6}");
    }
    Ok(())
}
