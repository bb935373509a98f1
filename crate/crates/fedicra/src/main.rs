use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedicra::config::{ExperimentConfig, ModeName};
use fedicra::executor::Executor;
use fedicra::{dataset, runner};
use fedicra_core::oracle;

#[derive(Parser)]
#[command(name = "fedicra", version, about = "Personalized weakly-supervised federated segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train every round, write the run directory.
    Run(RunArgs),
    /// Run a brute-force oracle suite (grad, mst, treefilter, crf, metrics).
    Oracle {
        suite: String,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Write the configured synthetic sites as PGM files plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate the final models of a run directory.
    Eval {
        /// Run directory written by `run`.
        dir: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModeName>,
    #[arg(long)]
    no_aa: bool,
    #[arg(long)]
    no_scr: bool,
    #[arg(long)]
    no_mstree: bool,
    #[arg(long)]
    no_gcrf: bool,
    #[arg(long)]
    rounds: Option<usize>,
    /// Site-parallel worker threads (1 = sequential, 0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    // overrides apply before resolution so a new mode re-derives unpinned flags
    let mut cfg = ExperimentConfig::load_unresolved(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(r) = args.rounds {
        cfg.train.rounds = r;
    }
    if let Some(t) = args.threads {
        cfg.train.threads = t;
    }
    for (off, slot) in [
        (args.no_aa, &mut cfg.ablation.aa),
        (args.no_scr, &mut cfg.ablation.scr),
        (args.no_mstree, &mut cfg.ablation.mstree),
        (args.no_gcrf, &mut cfg.ablation.gcrf),
    ] {
        if off {
            *slot = Some(false);
        }
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let exec = Executor::new(cfg.train.threads)?;
    let res = runner::run(&cfg, &exec)?;
    for s in &res.summary.sites {
        println!("site {} ({}): dsc {:.4} hd95 {:.3}", s.site, s.annotation, s.dsc, s.hd95);
    }
    println!(
        "{} average: dsc {:.4} hd95 {:.3} -> {}",
        res.summary.method,
        res.summary.average.dsc,
        res.summary.average.hd95,
        res.dir.display()
    );
    Ok(())
}

fn oracle_cmd(suite: &str, seed: u64) -> Result<bool> {
    let cases = oracle::run_suite(suite, seed)?;
    let mut ok = true;
    for c in &cases {
        println!(
            "{} {} error {:.3e} tol {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance
        );
        ok &= c.passed;
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    println!("{}: {} cases, {} failed", suite, cases.len(), failed);
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Oracle { suite, seed } => oracle_cmd(&suite, seed),
        Command::GenData { config, seed, out } => (|| {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let exec = Executor::new(cfg.train.threads)?;
            let sites = runner::generate(&cfg.site_specs(), &exec)?;
            dataset::dump(&out, &sites).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} sites to {}", sites.len(), out.display());
            Ok(true)
        })(),
        Command::Eval { dir, threads } => (|| {
            let exec = Executor::new(threads.unwrap_or(1))?;
            let s = runner::evaluate_run(&dir, &exec)?;
            for site in &s.sites {
                println!("site {}: dsc {:.4} hd95 {:.3}", site.site, site.dsc, site.hd95);
            }
            println!("average: dsc {:.4} hd95 {:.3}", s.average.dsc, s.average.hd95);
            Ok(true)
        })(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
