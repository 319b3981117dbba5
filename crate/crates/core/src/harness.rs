//! Experiment configs, Monte Carlo runs and CSV output.
//!
//! A config fixes one game instance and one graph. Every seed then gets its
//! own initial point, sharing noise and oracle noise, drawn from streams keyed
//! by `(master_seed, seed)`, so results do not depend on worker scheduling.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml          serialized config (its sha256 is the config hash)
//! instance.toml        market instance, when the game is a Cournot market
//! x_star.csv           reference equilibrium: player, coord, value
//! edges.csv            coupling weights: i, j, weight
//! trajectories/run_NNNN.csv
//! ledgers/run_NNNN.csv
//! records.csv          one line per run
//! summary.csv          per-iteration statistics across runs
//! ```
//!
//! Summary variances use the unbiased `n - 1` denominator; one run gives 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cournot::{build_cournot, solve_centralized, CostModel, CournotInstance, Participation, SymmetricMarket};
use crate::csvio::fmt_float;
use crate::error::{Error, Result};
use crate::game::{DecisionProfile, GameSpec};
use crate::network::{build_weights, Adjacency, WeightMatrix, WeightRule};
use crate::privacy::{geometric_noise_for_budget, run_budget_bound, LaplaceNoiseSource, PrivacyLedger};
use crate::rng;
use crate::schedule::{check_convergence_conditions, check_noise_condition, check_stochastic_condition, PolySchedule};
use crate::solver::{run, AlgorithmVariant, GradientOracle, RunOutput, RunSpec, TrajectoryMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub game: GameSource,
    pub graph: GraphConfig,
    pub algorithm: AlgorithmVariant,
    pub schedules: Schedules,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory that relative paths in the config are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GameSource {
    Cournot {
        seed: u64,
        firms: usize,
        markets: usize,
        #[serde(default = "default_density")]
        density: f64,
        #[serde(default)]
        cost_model: CostModel,
    },
    Instance {
        path: PathBuf,
    },
    Symmetric(SymmetricMarket),
}

fn default_density() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    #[serde(flatten)]
    pub topology: Topology,
    #[serde(default)]
    pub weights: WeightRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Random {
        seed: u64,
        #[serde(default = "default_extra_edges")]
        extra_edge_prob: f64,
    },
    Edges {
        edges: Vec<(usize, usize)>,
    },
    Ring,
    Path,
    Complete,
}

fn default_extra_edges() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    pub lambda: PolySchedule,
    pub gamma: PolySchedule,
    /// Gradient-oracle noise; absent means exact gradients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<OracleNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleNoise {
    Named(NamedOracleNoise),
    Schedule(PolySchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedOracleNoise {
    /// Unit variance per coordinate.
    UnitVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default = "default_c_bar")]
    pub c_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<PolySchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_target: Option<EpsTarget>,
    /// Shape that an `eps_target` scales; defaults to `1 + 0.1 k^0.2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_shape: Option<PolySchedule>,
}

fn default_c_bar() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsTarget {
    Value(f64),
    /// The budget a run with these schedules would spend.
    MatchOf { lambda: PolySchedule, nu: PolySchedule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_count: Option<u64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

fn default_record_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub directory: PathBuf,
    #[serde(default = "default_true")]
    pub emit_ledger: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_out(),
            emit_ledger: true,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

/// Default noise shape for an epsilon target.
pub fn default_nu_shape() -> PolySchedule {
    PolySchedule::monomial(0.1, 0.2, 1.0)
}

impl RunConfig {
    pub fn resolved_seeds(&self) -> Vec<u64> {
        match (&self.seeds, self.seed_count) {
            (Some(s), _) => s.clone(),
            (None, Some(n)) => (0..n).collect(),
            (None, None) => Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    /// Hex sha256 of [`Self::to_toml_string`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algorithm.name().to_string())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Structural checks; schedule conditions are reported by [`Self::condition_warnings`].
    pub fn validate(&self) -> Result<()> {
        let seeds = self.run.resolved_seeds();
        if self.run.seeds.is_some() && self.run.seed_count.is_some() {
            return Err(Error::invalid("run: give either seeds or seed_count, not both"));
        }
        if seeds.is_empty() {
            return Err(Error::invalid("run: seeds must be a non-empty list (or seed_count > 0)"));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::invalid("run: seeds must be distinct"));
        }
        if self.run.record_every == 0 {
            return Err(Error::invalid("run: record_every must be positive"));
        }
        if self.run.jobs == Some(0) {
            return Err(Error::invalid("run: jobs must be positive"));
        }
        self.schedules.lambda.validate()?;
        self.schedules.gamma.validate()?;
        if let Some(OracleNoise::Schedule(mu)) = &self.schedules.mu {
            mu.validate()?;
        }
        if let AlgorithmVariant::BaselineGeometric { lambda0, q } = self.algorithm {
            if !(lambda0 > 0.0) || !(q > 0.0 && q < 1.0) {
                return Err(Error::invalid("algorithm: baseline_geometric needs lambda0 > 0 and q in (0, 1)"));
            }
        }
        if let Some(p) = &self.privacy {
            if !(p.c_bar > 0.0 && p.c_bar.is_finite()) {
                return Err(Error::invalid("privacy: c_bar must be positive"));
            }
            match (&p.nu, &p.eps_target) {
                (Some(_), Some(_)) => return Err(Error::invalid("privacy: eps_target and nu are mutually exclusive")),
                (None, None) => return Err(Error::invalid("privacy: give either nu or eps_target")),
                (Some(nu), None) => nu.validate()?,
                (None, Some(EpsTarget::Value(e))) if !(*e > 0.0 && e.is_finite()) => {
                    return Err(Error::invalid("privacy: eps_target must be positive"))
                }
                (None, Some(EpsTarget::MatchOf { lambda, nu })) => {
                    lambda.validate()?;
                    nu.validate()?;
                }
                _ => {}
            }
            if p.nu.is_some() && p.nu_shape.is_some() {
                return Err(Error::invalid("privacy: nu_shape only applies to eps_target"));
            }
        }
        if let GameSource::Cournot { density, firms, markets, .. } = &self.game {
            if *firms == 0 || *markets == 0 {
                return Err(Error::invalid("game: firms and markets must be positive"));
            }
            if !(*density > 0.0 && *density <= 1.0) {
                return Err(Error::invalid("game: density must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Failed summability conditions for the effective schedules.
    pub fn condition_warnings(&self) -> Result<Vec<String>> {
        let lambda = self.algorithm.lambda_schedule(&self.schedules.lambda);
        let gamma = self.algorithm.gamma_schedule(&self.schedules.gamma);
        let mut reports = Vec::new();
        if self.algorithm == AlgorithmVariant::DpWeakening {
            reports.push(("convergence", check_convergence_conditions(&lambda, &gamma)));
            if let Some(nu) = self.noise_schedule()? {
                reports.push(("noise", check_noise_condition(&gamma, &nu)));
            }
        }
        if let Some(OracleNoise::Schedule(mu)) = &self.schedules.mu {
            reports.push(("stochastic", check_stochastic_condition(&lambda, mu)));
        }
        let mut out = Vec::new();
        for (name, s) in [("lambda", &lambda), ("gamma", &gamma)] {
            if s.first_index() > 0 {
                out.push(format!("{name} schedule is undefined at k = 0; runs will fail"));
            }
        }
        for (kind, r) in reports {
            for c in &r.checks {
                if !c.pass {
                    out.push(format!("{kind} condition violated: {}", c.name));
                }
                if let Some(w) = &c.warning {
                    out.push(w.clone());
                }
            }
        }
        Ok(out)
    }

    /// Effective Laplace scale schedule, if the run shares noisy estimates.
    pub fn noise_schedule(&self) -> Result<Option<PolySchedule>> {
        let Some(p) = &self.privacy else { return Ok(None) };
        if let Some(nu) = &p.nu {
            return Ok(Some(nu.clone()));
        }
        let eps = match p.eps_target.as_ref().expect("validated") {
            EpsTarget::Value(e) => *e,
            EpsTarget::MatchOf { lambda, nu } => run_budget_bound(lambda, nu, p.c_bar)?,
        };
        match self.algorithm {
            AlgorithmVariant::BaselineGeometric { lambda0, q } => Ok(Some(PolySchedule::constant(
                geometric_noise_for_budget(lambda0, q, p.c_bar, eps)?,
            ))),
            _ => {
                // scale the shape so that the whole run, k = 0 included, spends eps
                let shape = p.nu_shape.clone().unwrap_or_else(default_nu_shape);
                let unit = run_budget_bound(&self.schedules.lambda, &shape, p.c_bar)?;
                Ok(Some(shape.scaled(unit / eps)))
            }
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(Error),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

pub fn parse_config(text: &str) -> std::result::Result<LoadedConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    config.validate().map_err(ConfigError::Invalid)?;
    let warnings = config.condition_warnings().map_err(ConfigError::Invalid)?;
    Ok(LoadedConfig { config, warnings })
}

pub fn load_config(path: &Path) -> std::result::Result<LoadedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let mut loaded = parse_config(&text)?;
    loaded.config.base_dir = path.parent().map(Path::to_path_buf);
    Ok(loaded)
}

/// Everything shared by the runs of one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub instance: Option<CournotInstance>,
    pub game: GameSpec,
    pub adjacency: Adjacency,
    pub coupling: WeightMatrix,
    pub x_star: DecisionProfile,
    pub nu: Option<PolySchedule>,
    pub config_hash: String,
    pub warnings: Vec<String>,
}

pub const X_STAR_TOL: f64 = 1e-9;
pub const X_STAR_MAX_ITERS: usize = 5_000_000;

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let instance = match &config.game {
        GameSource::Cournot {
            seed,
            firms,
            markets,
            density,
            cost_model,
        } => build_cournot(*seed, *firms, *markets, &Participation::Density(*density), *cost_model)?,
        GameSource::Instance { path } => CournotInstance::load(&config.resolve(path))?,
        GameSource::Symmetric(p) => p.instance()?,
    };
    let game = instance.to_game()?;
    let m = game.num_players();
    let adjacency = match &config.graph.topology {
        Topology::Random { seed, extra_edge_prob } => Adjacency::random_connected(m, *extra_edge_prob, *seed)?,
        Topology::Edges { edges } => Adjacency::from_edges(m, edges)?,
        Topology::Ring => Adjacency::ring(m)?,
        Topology::Path => Adjacency::path(m)?,
        Topology::Complete => Adjacency::complete(m)?,
    };
    let coupling = build_weights(&adjacency, config.graph.weights)?;
    let x_star = solve_centralized(&game, X_STAR_TOL, X_STAR_MAX_ITERS)?;
    let nu = config.noise_schedule()?;
    let warnings = config.condition_warnings()?;
    Ok(Prepared {
        config: config.clone(),
        instance: Some(instance),
        game,
        adjacency,
        coupling,
        x_star,
        nu,
        config_hash: config.hash()?,
        warnings,
    })
}

/// Seeds of one run, all derived from `(master_seed, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub noise: u64,
    pub oracle: u64,
}

pub fn run_seeds(master_seed: u64, seed: u64) -> RunSeeds {
    RunSeeds {
        init: rng::mix(master_seed, rng::domain::INIT, seed, 0),
        noise: rng::mix(master_seed, rng::domain::PRIVACY_NOISE, seed, 0),
        oracle: rng::mix(master_seed, rng::domain::ORACLE_NOISE, seed, 0),
    }
}

impl Prepared {
    /// Executes one run in memory.
    pub fn execute(&self, seed: u64) -> Result<RunOutput> {
        let cfg = &self.config;
        let s = run_seeds(cfg.run.master_seed, seed);
        let noise = match &self.nu {
            Some(nu) => Some(LaplaceNoiseSource::new(nu.clone(), self.game.dim(), s.noise)?),
            None => None,
        };
        let ledger = match (&self.nu, &cfg.privacy) {
            (Some(nu), Some(p)) => Some(PrivacyLedger::for_schedules(
                p.c_bar,
                &cfg.algorithm.lambda_schedule(&cfg.schedules.lambda),
                nu,
            )?),
            _ => None,
        };
        let oracle = match &cfg.schedules.mu {
            None => GradientOracle::Exact,
            Some(OracleNoise::Named(NamedOracleNoise::UnitVariance)) => GradientOracle::unit_gaussian(self.game.dim(), s.oracle),
            Some(OracleNoise::Schedule(mu)) => GradientOracle::AdditiveGaussian { mu: mu.clone(), seed: s.oracle },
        };
        run(RunSpec {
            game: &self.game,
            coupling: &self.coupling,
            variant: cfg.algorithm,
            lambda: cfg.schedules.lambda.clone(),
            gamma: cfg.schedules.gamma.clone(),
            noise,
            oracle,
            iterations: cfg.run.iterations,
            record_every: cfg.run.record_every,
            reference: Some(&self.x_star),
            ledger,
            init_seed: s.init,
        })
    }

    /// Executes every seed on `jobs` workers (all cores when `None`); results
    /// come back in seed order.
    pub fn execute_all(&self, jobs: Option<usize>) -> Result<Vec<(u64, Result<RunOutput>)>> {
        let seeds = self.config.run.resolved_seeds();
        let work = || seeds.par_iter().map(|&s| (s, self.execute(s))).collect::<Vec<_>>();
        match jobs.or(self.config.run.jobs) {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
                Ok(pool.install(work))
            }
            None => Ok(work()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalMetrics {
    pub k: u64,
    pub equilibrium_gap: f64,
    pub consensus_error: f64,
    pub conservation_residual: f64,
    pub eps_spent: f64,
}

impl FinalMetrics {
    fn of(m: &TrajectoryMetrics) -> Option<Self> {
        let i = m.len().checked_sub(1)?;
        Some(Self {
            k: m.iterations[i],
            equilibrium_gap: m.equilibrium_gap[i],
            consensus_error: m.consensus_error[i],
            conservation_residual: m.conservation_residual[i],
            eps_spent: m.eps_spent[i],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub config_hash: String,
    /// `None` on success, the error message otherwise.
    pub failure: Option<String>,
    pub final_metrics: Option<FinalMetrics>,
    pub trajectory: Option<PathBuf>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

pub const TRAJECTORY_HEADER: [&str; 6] = [
    "run_id",
    "k",
    "equilibrium_gap",
    "consensus_error",
    "conservation_residual",
    "eps_spent",
];

pub fn write_trajectory_csv(path: &Path, run_id: usize, m: &TrajectoryMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(TRAJECTORY_HEADER).map_err(io_err(path))?;
    for i in 0..m.len() {
        w.write_record([
            run_id.to_string(),
            m.iterations[i].to_string(),
            fmt_float(m.equilibrium_gap[i]),
            fmt_float(m.consensus_error[i]),
            fmt_float(m.conservation_residual[i]),
            fmt_float(m.eps_spent[i]),
        ])
        .map_err(io_err(path))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Reads a trajectory file back; `decision_sum_norm` is not stored and stays empty.
pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryMetrics> {
    let mut r = csv::Reader::from_path(path).map_err(io_err(path))?;
    let header = r.headers().map_err(io_err(path))?.clone();
    if header.iter().ne(TRAJECTORY_HEADER) {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let mut m = TrajectoryMetrics::default();
    for row in r.records() {
        let row = row.map_err(io_err(path))?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|e| Error::invalid(format!("{}: column {i}: {e}", path.display())))
        };
        m.iterations
            .push(row[1].parse().map_err(|e| Error::invalid(format!("{}: k: {e}", path.display())))?);
        m.equilibrium_gap.push(num(2)?);
        m.consensus_error.push(num(3)?);
        m.conservation_residual.push(num(4)?);
        m.eps_spent.push(num(5)?);
    }
    Ok(m)
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::invalid(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
}

/// Builds instance, graph and reference point, executes every seed and
/// writes the output directory. Failed runs are recorded, not fatal.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunRecord>> {
    let prepared = prepare(config)?;
    let out = config.resolve(&config.output.directory);
    create_dir(&out.join("trajectories"))?;
    if config.output.emit_ledger && prepared.nu.is_some() {
        create_dir(&out.join("ledgers"))?;
    }
    write_text(&out.join("config.toml"), &config.to_toml_string()?)?;
    if let Some(inst) = &prepared.instance {
        inst.save(&out.join("instance.toml"))?;
    }
    write_x_star(&out.join("x_star.csv"), &prepared.x_star)?;
    write_edges(&out.join("edges.csv"), &prepared.coupling)?;

    let results = prepared.execute_all(opts.jobs)?;
    let records: Vec<RunRecord> = results
        .into_par_iter()
        .enumerate()
        .map(|(run_id, (seed, res))| {
            let mut rec = RunRecord {
                run_id,
                seed,
                config_hash: prepared.config_hash.clone(),
                failure: None,
                final_metrics: None,
                trajectory: None,
            };
            let written = res.and_then(|o| {
                let path = out.join("trajectories").join(format!("run_{run_id:04}.csv"));
                write_trajectory_csv(&path, run_id, &o.metrics)?;
                if let (true, Some(l)) = (config.output.emit_ledger, &o.ledger) {
                    let lp = out.join("ledgers").join(format!("run_{run_id:04}.csv"));
                    let f = fs::File::create(&lp).map_err(io_err(&lp))?;
                    l.write_csv(f).map_err(io_err(&lp))?;
                }
                Ok((path, FinalMetrics::of(&o.metrics)))
            });
            match written {
                Ok((path, fm)) => {
                    rec.trajectory = Some(path);
                    rec.final_metrics = fm;
                }
                Err(e) => rec.failure = Some(e.to_string()),
            }
            rec
        })
        .collect();
    write_records(&out.join("records.csv"), &records)?;
    if records.iter().any(RunRecord::succeeded) {
        let summary = summarize(&records)?;
        summary.write_csv(&out.join("summary.csv"))?;
    }
    Ok(records)
}

fn write_x_star(path: &Path, x: &DecisionProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(["player", "coord", "value"]).map_err(io_err(path))?;
    for i in 0..x.num_players() {
        for (c, v) in x.block(i).iter().enumerate() {
            w.write_record([i.to_string(), c.to_string(), fmt_float(*v)]).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_edges(path: &Path, l: &WeightMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(["i", "j", "weight"]).map_err(io_err(path))?;
    for i in 0..l.size() {
        for &(j, wij) in l.neighbors(i) {
            if i < j {
                w.write_record([i.to_string(), j.to_string(), fmt_float(wij)]).map_err(io_err(path))?;
            }
        }
    }
    w.flush().map_err(io_err(path))
}

const RECORD_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "config_hash",
    "status",
    "final_k",
    "equilibrium_gap",
    "consensus_error",
    "conservation_residual",
    "eps_spent",
    "trajectory",
];

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(RECORD_HEADER).map_err(io_err(path))?;
    for r in records {
        let f = r.final_metrics;
        let num = |g: fn(&FinalMetrics) -> f64| f.as_ref().map(|f| fmt_float(g(f))).unwrap_or_default();
        // store the trajectory relative to records.csv so the directory can move
        let traj = r
            .trajectory
            .as_ref()
            .map(|p| {
                let dir = path.parent().unwrap_or(Path::new(""));
                p.strip_prefix(dir).unwrap_or(p).display().to_string()
            })
            .unwrap_or_default();
        w.write_record([
            r.run_id.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.failure.clone().map_or("ok".to_string(), |e| format!("failed: {e}")),
            f.map(|f| f.k.to_string()).unwrap_or_default(),
            num(|f| f.equilibrium_gap),
            num(|f| f.consensus_error),
            num(|f| f.conservation_residual),
            num(|f| f.eps_spent),
            traj,
        ])
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut r = csv::Reader::from_path(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(io_err(path))?;
        let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
        let parse_f = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| bad(RECORD_HEADER[i])) };
        let failure = match &row[3] {
            "ok" => None,
            s => Some(s.strip_prefix("failed: ").unwrap_or(s).to_string()),
        };
        let final_metrics = if row[4].is_empty() {
            None
        } else {
            Some(FinalMetrics {
                k: row[4].parse().map_err(|_| bad("final_k"))?,
                equilibrium_gap: parse_f(5)?,
                consensus_error: parse_f(6)?,
                conservation_residual: parse_f(7)?,
                eps_spent: parse_f(8)?,
            })
        };
        out.push(RunRecord {
            run_id: row[0].parse().map_err(|_| bad("run_id"))?,
            seed: row[1].parse().map_err(|_| bad("seed"))?,
            config_hash: row[2].to_string(),
            failure,
            final_metrics,
            trajectory: (!row[9].is_empty()).then(|| dir.join(&row[9])),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    /// Unbiased sample variance; 0 for a single value.
    pub variance: f64,
}

pub fn stats(values: &[f64]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::invalid("statistics of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[h]
    } else {
        0.5 * (sorted[h - 1] + sorted[h])
    };
    Ok(Stats { mean, median, variance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EquilibriumGap,
    ConsensusError,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::EquilibriumGap => "equilibrium_gap",
            Metric::ConsensusError => "consensus_error",
        }
    }

    fn values<'a>(&self, m: &'a TrajectoryMetrics) -> &'a [f64] {
        match self {
            Metric::EquilibriumGap => &m.equilibrium_gap,
            Metric::ConsensusError => &m.consensus_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub k: u64,
    pub runs: usize,
    pub gap: Stats,
    pub consensus: Stats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, k: u64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
        w.write_record([
            "k",
            "runs",
            "gap_mean",
            "gap_median",
            "gap_variance",
            "consensus_mean",
            "consensus_median",
            "consensus_variance",
        ])
        .map_err(io_err(path))?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.runs.to_string(),
                fmt_float(r.gap.mean),
                fmt_float(r.gap.median),
                fmt_float(r.gap.variance),
                fmt_float(r.consensus.mean),
                fmt_float(r.consensus.median),
                fmt_float(r.consensus.variance),
            ])
            .map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Per-iteration statistics over trajectories; an iteration is summarised
/// over the runs that recorded it.
pub fn summarize_metrics(runs: &[&TrajectoryMetrics]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::invalid("nothing to summarize"));
    }
    let mut by_k: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for m in runs {
        for i in 0..m.len() {
            let e = by_k.entry(m.iterations[i]).or_default();
            e.0.push(m.equilibrium_gap[i]);
            e.1.push(m.consensus_error[i]);
        }
    }
    let rows = by_k
        .into_iter()
        .map(|(k, (g, c))| {
            Ok(SummaryRow {
                k,
                runs: g.len(),
                gap: stats(&g)?,
                consensus: stats(&c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary { rows })
}

/// Summary over the trajectory files of the successful records.
pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    let metrics = records
        .iter()
        .filter(|r| r.succeeded())
        .filter_map(|r| r.trajectory.as_deref())
        .map(read_trajectory_csv)
        .collect::<Result<Vec<_>>>()?;
    summarize_metrics(&metrics.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonGroup {
    pub label: String,
    pub stats: Vec<Stats>,
    /// Mean over seeds of the final cumulative epsilon.
    pub eps_spent: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub metric: Metric,
    pub iterations: Vec<u64>,
    pub groups: Vec<ComparisonGroup>,
}

impl ComparisonTable {
    pub fn group(&self, label: &str) -> Option<&ComparisonGroup> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
        let mut header = vec!["k".to_string()];
        for g in &self.groups {
            for s in ["mean", "median", "variance"] {
                header.push(format!("{}_{}_{s}", g.label, self.metric.name()));
            }
        }
        w.write_record(&header).map_err(io_err(path))?;
        for (i, k) in self.iterations.iter().enumerate() {
            let mut row = vec![k.to_string()];
            for g in &self.groups {
                let s = g.stats[i];
                row.extend([fmt_float(s.mean), fmt_float(s.median), fmt_float(s.variance)]);
            }
            w.write_record(&row).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn write_eps_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
        w.write_record(["algorithm", "eps_spent", "failures"]).map_err(io_err(path))?;
        for g in &self.groups {
            w.write_record([g.label.clone(), fmt_float(g.eps_spent), g.failures.to_string()])
                .map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Runs each config in memory and tabulates `metric` per algorithm. Configs
/// must agree on game, graph, seeds and recording grid, and carry distinct labels.
pub fn compare_algorithms(configs: &[ExperimentConfig], metric: Metric, opts: &RunOptions) -> Result<ComparisonTable> {
    let first = configs.first().ok_or_else(|| Error::invalid("no configs to compare"))?;
    for c in &configs[1..] {
        let same = c.game == first.game
            && c.base_dir == first.base_dir
            && c.graph == first.graph
            && c.run.resolved_seeds() == first.run.resolved_seeds()
            && c.run.master_seed == first.run.master_seed
            && c.run.iterations == first.run.iterations
            && c.run.record_every == first.run.record_every;
        if !same {
            return Err(Error::invalid(format!(
                "config '{}' differs from '{}' in game, graph, seeds or recording",
                c.name(),
                first.name()
            )));
        }
    }
    let mut labels: Vec<String> = configs.iter().map(ExperimentConfig::name).collect();
    labels.sort();
    labels.dedup();
    if labels.len() != configs.len() {
        return Err(Error::invalid("compared configs need distinct labels"));
    }

    let mut iterations: Option<Vec<u64>> = None;
    let mut groups = Vec::new();
    for c in configs {
        let prepared = prepare(c)?;
        let results = prepared.execute_all(opts.jobs)?;
        let failures = results.iter().filter(|(_, r)| r.is_err()).count();
        let ok: Vec<RunOutput> = results.into_iter().filter_map(|(_, r)| r.ok()).collect();
        if ok.is_empty() {
            return Err(Error::invalid(format!("every run of '{}' failed", c.name())));
        }
        let grid = ok[0].metrics.iterations.clone();
        let mut stats_k = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let vals: Vec<f64> = ok.iter().map(|o| metric.values(&o.metrics)[i]).collect();
            stats_k.push(stats(&vals)?);
        }
        let eps: Vec<f64> = ok.iter().map(|o| o.metrics.eps_spent.last().copied().unwrap_or(0.0)).collect();
        match &iterations {
            None => iterations = Some(grid),
            Some(g) if *g != grid => return Err(Error::invalid("recording grids differ")),
            _ => {}
        }
        groups.push(ComparisonGroup {
            label: c.name(),
            stats: stats_k,
            eps_spent: stats(&eps)?.mean,
            failures,
        });
    }
    Ok(ComparisonTable {
        metric,
        iterations: iterations.unwrap_or_default(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_FIRM: &str = r#"
[game]
source = "symmetric"
firms = 2
cost_quadratic = 1.0
cost_linear = 0.0
price_slope = 1.0
price_intercept = 10.0
capacity = 10.0

[graph]
kind = "path"

[algorithm]
kind = "dp_weakening"

[schedules]
lambda = { form = "rational", a = 0.1, b = 0.1, p = 1.0 }
gamma = { form = "rational", a = 1.0, b = 0.1, p = 0.9 }

[run]
iterations = 50
record_every = 10
seeds = [1, 2, 3]
"#;

    #[test]
    fn stats_examples() {
        let s = stats(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.variance), (2.0, 2.0, 2.0));
        let one = stats(&[4.0]).unwrap();
        assert_eq!((one.mean, one.variance), (4.0, 0.0));
        assert!(stats(&[]).is_err());
    }

    #[test]
    fn parses_and_round_trips() {
        let loaded = parse_config(TWO_FIRM).unwrap();
        assert!(loaded.warnings.is_empty(), "{:?}", loaded.warnings);
        let text = loaded.config.to_toml_string().unwrap();
        let again = parse_config(&text).unwrap().config;
        assert_eq!(again, loaded.config);
        assert_eq!(again.hash().unwrap(), loaded.config.hash().unwrap());
    }

    #[test]
    fn fast_gamma_loads_with_warning() {
        let text = TWO_FIRM.replace("a = 1.0, b = 0.1, p = 0.9", "a = 1.0, b = 0.1, p = 1.0");
        let loaded = parse_config(&text).unwrap();
        assert!(loaded.warnings.iter().any(|w| w.contains("lambda^2/gamma")), "{:?}", loaded.warnings);
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            parse_config(&TWO_FIRM.replace("seeds = [1, 2, 3]", "")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config(&TWO_FIRM.replace("seeds = [1, 2, 3]", "seeds = []")),
            Err(ConfigError::Invalid(_))
        ));
        let both = format!(
            "{TWO_FIRM}\n[privacy]\nc_bar = 1.0\neps_target = 1.0\nnu = {{ form = \"rational\", a = 1.0 }}\n"
        );
        let err = parse_config(&both).unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"), "{err}");
        let bad = TWO_FIRM.replace("iterations = 50", "iterations = \"many\"");
        let err = parse_config(&bad).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn eps_target_scales_shape_to_run_budget() {
        let text = format!("{TWO_FIRM}\n[privacy]\nc_bar = 1.0\neps_target = 2.0\n");
        let cfg = parse_config(&text).unwrap().config;
        let nu = cfg.noise_schedule().unwrap().unwrap();
        let spent = run_budget_bound(&cfg.schedules.lambda, &nu, 1.0).unwrap();
        assert!((spent - 2.0).abs() < 1e-6, "{spent}");
    }

    #[test]
    fn zero_iterations_gives_initial_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(TWO_FIRM).unwrap().config;
        cfg.run.iterations = 0;
        cfg.run.seeds = Some(vec![5]);
        cfg.output.directory = dir.path().to_path_buf();
        let recs = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(recs.len(), 1);
        let m = read_trajectory_csv(recs[0].trajectory.as_ref().unwrap()).unwrap();
        assert_eq!(m.iterations, vec![0]);
    }
}
