use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpnash::cournot::verify_monotonicity_cournot;
use dpnash::game::{check_strict_monotonicity, estimate_lipschitz};
use dpnash::harness::{
    compare_algorithms, load_config, prepare, read_records, run_experiment, summarize, ExperimentConfig, Metric,
    RunOptions,
};
use dpnash::network::{contraction_threshold, spectral_gap};

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "dpnash", version, about = "Differentially-private distributed Nash equilibrium seeking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write trajectories, ledgers and a summary.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute summary.csv from the records of an output directory.
    Summarize { dir: PathBuf },
    /// Run several configs on the same game, graph and seeds and tabulate them.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "equilibrium-gap")]
        metric: MetricArg,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check schedules, graph and game assumptions without running.
    Validate { config: PathBuf },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Use seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    EquilibriumGap,
    ConsensusError,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(n) = self.seeds {
            cfg.run.seeds = None;
            cfg.run.seed_count = Some(n);
        }
        if let Some(n) = self.iters {
            cfg.run.iterations = n;
        }
        if let Some(o) = &self.out {
            cfg.output.directory = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.run.jobs = Some(j);
        }
    }
}

fn load(path: &Path, overrides: &Overrides, report: bool) -> Result<ExperimentConfig, ExitCode> {
    match load_config(path) {
        Ok(loaded) => {
            for w in loaded.warnings.iter().filter(|_| report) {
                eprintln!("warning: {}: {w}", path.display());
            }
            let mut cfg = loaded.config;
            overrides.apply(&mut cfg);
            if let Err(e) = cfg.validate() {
                eprintln!("error: {}: {e}", path.display());
                return Err(ExitCode::from(EXIT_CONFIG_ERROR));
            }
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            Err(ExitCode::from(EXIT_CONFIG_ERROR))
        }
    }
}

fn cmd_run(path: &Path, overrides: &Overrides) -> ExitCode {
    let cfg = match load(path, overrides, true) {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run_experiment(&cfg, &RunOptions { jobs: cfg.run.jobs }) {
        Ok(records) => {
            let failed: Vec<_> = records.iter().filter(|r| !r.succeeded()).collect();
            for r in &failed {
                eprintln!("run {} (seed {}) failed: {}", r.run_id, r.seed, r.failure.as_deref().unwrap_or(""));
            }
            println!(
                "{} runs, {} failed, output in {}",
                records.len(),
                failed.len(),
                cfg.output.directory.display()
            );
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUN_FAILURE)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG_ERROR)
        }
    }
}

fn cmd_summarize(dir: &Path) -> ExitCode {
    let result = read_records(&dir.join("records.csv")).and_then(|records| {
        let s = summarize(&records)?;
        s.write_csv(&dir.join("summary.csv"))?;
        Ok(s)
    });
    match result {
        Ok(s) => {
            println!("{} iterations summarized into {}", s.rows.len(), dir.join("summary.csv").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUN_FAILURE)
        }
    }
}

fn cmd_compare(paths: &[PathBuf], metric: MetricArg, overrides: &Overrides) -> ExitCode {
    let mut configs = Vec::new();
    for p in paths {
        match load(p, overrides, true) {
            Ok(c) => configs.push(c),
            Err(code) => return code,
        }
    }
    let metric = match metric {
        MetricArg::EquilibriumGap => Metric::EquilibriumGap,
        MetricArg::ConsensusError => Metric::ConsensusError,
    };
    let out = overrides.out.clone().unwrap_or_else(|| PathBuf::from("compare_out"));
    let table = match compare_algorithms(&configs, metric, &RunOptions { jobs: overrides.jobs }) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG_ERROR);
        }
    };
    let written = std::fs::create_dir_all(&out)
        .map_err(|e| dpnash::Error::InvalidArgument(e.to_string()))
        .and_then(|_| table.write_csv(&out.join("comparison.csv")))
        .and_then(|_| table.write_eps_csv(&out.join("eps_spent.csv")));
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_RUN_FAILURE);
    }
    for g in &table.groups {
        let last = g.stats.last().map(|s| s.median).unwrap_or(f64::NAN);
        println!("{:<24} final median {}: {last:.6e}  eps spent: {:.6}", g.label, metric.name(), g.eps_spent);
    }
    if table.groups.iter().any(|g| g.failures > 0) {
        ExitCode::from(EXIT_RUN_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_validate(path: &Path) -> ExitCode {
    let cfg = match load(path, &Overrides::default(), false) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let p = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG_ERROR);
        }
    };
    let gamma = cfg.algorithm.gamma_schedule(&cfg.schedules.gamma);
    println!("players {}  dimension {}", p.game.num_players(), p.game.dim());
    if let Some(inst) = &p.instance {
        let r = verify_monotonicity_cournot(inst);
        println!("jacobian min eigenvalue {:.6} ({})", r.min_eigenvalue, pass(r.pass));
    }
    match check_strict_monotonicity(&p.game, 0, 200, 0.0) {
        Ok(r) => println!("sampled monotonicity {:.6} over {} pairs ({})", r.worst_normalized, r.pairs, pass(r.pass)),
        Err(e) => println!("sampled monotonicity: {e}"),
    }
    if let Ok(l) = estimate_lipschitz(&p.game, 0, 200) {
        println!("aggregate Lipschitz estimate {l:.6}");
    }
    match spectral_gap(&p.coupling) {
        Ok(s) => println!("|rho_2| {:.6}  |rho_m| {:.6}", s.rho2_abs, s.rho_m_abs),
        Err(e) => println!("spectrum: {e}"),
    }
    match contraction_threshold(&p.coupling, &gamma) {
        Ok(k) => println!("contraction from k = {k}"),
        Err(e) => println!("contraction threshold: {e}"),
    }
    if let Some(nu) = &p.nu {
        println!("noise schedule {nu:?}");
    }
    if p.warnings.is_empty() {
        println!("schedule conditions: all pass");
    }
    for w in &p.warnings {
        println!("warning: {w}");
    }
    ExitCode::SUCCESS
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides),
        Command::Summarize { dir } => cmd_summarize(dir),
        Command::Compare {
            configs,
            metric,
            overrides,
        } => cmd_compare(configs, *metric, overrides),
        Command::Validate { config } => cmd_validate(config),
    }
}
