//! Iteration engines.
//!
//! One synchronous round, for every player `i` from the pre-round snapshot:
//!
//! ```text
//! x_i+ = P_{K_i}[ x_i - lambda_k F_i(x_i, v_i) ]
//! v_i+ = v_i + gamma_k sum_j L_ij ((v_j + z_j) - (v_i + z_i)) + x_i+ - x_i
//! ```
//!
//! `z_j` is the Laplace noise player `j` adds to the estimate it shares. Player
//! `i` uses its own perturbed value in the coupling term, so the noise cancels
//! pairwise in `sum_i v_i` and `sum_i v_i = sum_i x_i` holds at every round.
//! The two baselines are the same round with `gamma_k = 1` (persistent
//! coupling), and additionally `lambda_k = lambda0 q^k` for the geometric one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{l2_distance, DecisionProfile, GameSpec};
use crate::network::WeightMatrix;
use crate::privacy::{LaplaceNoiseSource, PrivacyLedger};
use crate::rng;
use crate::schedule::{check_convergence_conditions, PolySchedule};

/// Decisions `x_i` and average estimates `v_i` of all players at round `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    x: Vec<f64>,
    v: Vec<f64>,
    m: usize,
    d: usize,
    k: u64,
}

impl SolverState {
    /// `x_i` uniform in `K_i` from the stream `(seed, i)`, and `v_i = x_i`.
    pub fn init(game: &GameSpec, seed: u64) -> Self {
        let m = game.num_players();
        let d = game.dim();
        let mut x = Vec::with_capacity(m * d);
        for (i, p) in game.players().iter().enumerate() {
            let mut s = rng::stream(seed, rng::domain::INIT, i as u64, 0);
            x.extend(p.feasible.sample(&mut s));
        }
        Self { v: x.clone(), x, m, d, k: 0 }
    }

    /// Starts from given decisions with `v_i = x_i`.
    pub fn from_decisions(game: &GameSpec, x: Vec<Vec<f64>>) -> Result<Self> {
        let v = x.clone();
        Self::from_parts(game, x, v, 0)
    }

    pub fn from_parts(game: &GameSpec, x: Vec<Vec<f64>>, v: Vec<Vec<f64>>, k: u64) -> Result<Self> {
        let m = game.num_players();
        let d = game.dim();
        if x.len() != m || v.len() != m || x.iter().chain(&v).any(|b| b.len() != d) {
            return Err(Error::invalid(format!("state blocks must be {m} vectors of length {d}")));
        }
        Ok(Self { x: x.concat(), v: v.concat(), m, d, k })
    }

    pub fn num_players(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn v(&self, i: usize) -> &[f64] {
        &self.v[i * self.d..(i + 1) * self.d]
    }

    pub fn v_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.v[i * self.d..(i + 1) * self.d]
    }

    pub fn decisions(&self) -> DecisionProfile {
        DecisionProfile::new(self.x.clone(), self.d).expect("state shape is valid")
    }

    fn block_sum(&self, flat: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for b in flat.chunks(self.d) {
            s.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        }
        s
    }

    pub fn is_feasible(&self, game: &GameSpec, tol: f64) -> bool {
        (0..self.m).all(|i| game.player(i).feasible.contains(self.x(i), tol))
    }
}

/// `sum_i ||v_i - v_bar||^2`.
pub fn consensus_error(state: &SolverState) -> f64 {
    let mean: Vec<f64> = state.block_sum(&state.v).iter().map(|s| s / state.m as f64).collect();
    (0..state.m)
        .map(|i| state.v(i).iter().zip(&mean).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
        .sum()
}

/// `||sum_i v_i - sum_i x_i||`.
pub fn conservation_residual(state: &SolverState) -> f64 {
    l2_distance(&state.block_sum(&state.v), &state.block_sum(&state.x))
}

/// `||sum_i x_i||`, the scale the conservation tolerance is relative to.
pub fn decision_sum_norm(state: &SolverState) -> f64 {
    state.block_sum(&state.x).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Source of the pseudo-gradients players feed into their decision update.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GradientOracle {
    /// `F_i(x_i, u)` verbatim.
    #[default]
    Exact,
    /// `F_i(x_i, u) + eta`, with `eta` zero-mean Gaussian of per-coordinate
    /// variance `mu_k^2 / d`, so that `E||eta||^2 = mu_k^2`.
    AdditiveGaussian { mu: PolySchedule, seed: u64 },
}

impl GradientOracle {
    /// Unit variance in every coordinate: `mu = sqrt(d)`.
    pub fn unit_gaussian(dim: usize, seed: u64) -> Self {
        GradientOracle::AdditiveGaussian {
            mu: PolySchedule::constant((dim as f64).sqrt()),
            seed,
        }
    }

    fn perturb(&self, player: usize, k: u64, g: &mut [f64]) -> Result<()> {
        match self {
            GradientOracle::Exact => Ok(()),
            GradientOracle::AdditiveGaussian { mu, seed } => {
                let std = mu.eval(k)? / (g.len() as f64).sqrt();
                let mut s = rng::stream(*seed, rng::domain::ORACLE_NOISE, player as u64, k);
                for v in g.iter_mut() {
                    let z: f64 = s.sample(StandardNormal);
                    *v += std * z;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmVariant {
    /// Diminishing coupling `gamma_k` with the configured stepsize.
    DpWeakening,
    /// Persistent coupling `gamma_k = 1`, same stepsize and noise.
    BaselineFixed,
    /// Persistent coupling with summable stepsize `lambda0 q^k`.
    BaselineGeometric { lambda0: f64, q: f64 },
}

impl AlgorithmVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmVariant::DpWeakening => "dp_weakening",
            AlgorithmVariant::BaselineFixed => "baseline_fixed",
            AlgorithmVariant::BaselineGeometric { .. } => "baseline_geometric",
        }
    }

    /// Effective stepsize schedule.
    pub fn lambda_schedule(&self, lambda: &PolySchedule) -> PolySchedule {
        match *self {
            AlgorithmVariant::BaselineGeometric { lambda0, q } => PolySchedule::geometric(lambda0, q),
            _ => lambda.clone(),
        }
    }

    /// Effective coupling schedule.
    pub fn gamma_schedule(&self, gamma: &PolySchedule) -> PolySchedule {
        match self {
            AlgorithmVariant::DpWeakening => gamma.clone(),
            _ => PolySchedule::constant(1.0),
        }
    }
}

/// One synchronous round. `noise` is the stacked `[z_1; ...; z_m]` or `None`.
pub fn step(
    state: &SolverState,
    game: &GameSpec,
    coupling: &WeightMatrix,
    lambda_k: f64,
    gamma_k: f64,
    noise: Option<&[f64]>,
    oracle: &GradientOracle,
) -> Result<SolverState> {
    let (m, d) = (state.m, state.d);
    if game.num_players() != m || game.dim() != d || coupling.size() != m {
        return Err(Error::invalid("state, game and coupling matrix disagree on shape"));
    }
    if let Some(z) = noise {
        if z.len() != m * d {
            return Err(Error::invalid(format!("noise has length {}, expected {}", z.len(), m * d)));
        }
    }
    let k = state.k;
    let scale = game.aggregate_scale();
    let mut x_next = state.x.clone();
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in 0..m {
        u.iter_mut().zip(state.v(i)).for_each(|(o, v)| *o = scale * v);
        let player = game.player(i);
        player.field.eval_into(state.x(i), &u, &mut g);
        oracle.perturb(i, k, &mut g)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { player: i, iteration: k as usize });
        }
        let xi = &mut x_next[i * d..(i + 1) * d];
        xi.iter_mut().zip(&g).for_each(|(x, gr)| *x -= lambda_k * gr);
        player.feasible.project_in_place(xi);
    }

    // shared values w_j = v_j + z_j
    let shared: Vec<f64> = match noise {
        Some(z) => state.v.iter().zip(z).map(|(v, n)| v + n).collect(),
        None => state.v.clone(),
    };
    let mut v_next = state.v.clone();
    let mut acc = vec![0.0; d];
    for i in 0..m {
        acc.fill(0.0);
        let wi = &shared[i * d..(i + 1) * d];
        for &(j, lij) in coupling.neighbors(i) {
            let wj = &shared[j * d..(j + 1) * d];
            for c in 0..d {
                acc[c] += lij * (wj[c] - wi[c]);
            }
        }
        let vi = &mut v_next[i * d..(i + 1) * d];
        let xi_old = &state.x[i * d..(i + 1) * d];
        let xi_new = &x_next[i * d..(i + 1) * d];
        for c in 0..d {
            vi[c] += gamma_k * acc[c] + (xi_new[c] - xi_old[c]);
        }
    }
    Ok(SolverState { x: x_next, v: v_next, m, d, k: k + 1 })
}

/// Round with persistent coupling `gamma = 1`.
pub fn baseline_step_fixed(
    state: &SolverState,
    game: &GameSpec,
    coupling: &WeightMatrix,
    lambda_k: f64,
    noise: Option<&[f64]>,
    oracle: &GradientOracle,
) -> Result<SolverState> {
    step(state, game, coupling, lambda_k, 1.0, noise, oracle)
}

/// Round with persistent coupling and stepsize `lambda0 q^k`, `k` the state's round index.
#[allow(clippy::too_many_arguments)]
pub fn baseline_step_geometric(
    state: &SolverState,
    game: &GameSpec,
    coupling: &WeightMatrix,
    lambda0: f64,
    q: f64,
    noise: Option<&[f64]>,
    oracle: &GradientOracle,
) -> Result<SolverState> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("geometric ratio {q} must lie in (0, 1)")));
    }
    let lambda_k = lambda0 * q.powf(state.k as f64);
    step(state, game, coupling, lambda_k, 1.0, noise, oracle)
}

/// Metrics recorded along a trajectory; all lists share one length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryMetrics {
    pub iterations: Vec<u64>,
    /// `||x^k - x*||`; NaN without a reference point.
    pub equilibrium_gap: Vec<f64>,
    pub consensus_error: Vec<f64>,
    pub conservation_residual: Vec<f64>,
    /// `||sum_i x_i^k||` at each record.
    pub decision_sum_norm: Vec<f64>,
    pub eps_spent: Vec<f64>,
}

impl TrajectoryMetrics {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Gap recorded at iteration `k`, if recorded.
    pub fn gap_at(&self, k: u64) -> Option<f64> {
        self.iterations.iter().position(|&i| i == k).map(|p| self.equilibrium_gap[p])
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.equilibrium_gap.last().copied()
    }

    fn record(&mut self, state: &SolverState, reference: Option<&DecisionProfile>, eps: f64) {
        self.iterations.push(state.k);
        self.equilibrium_gap.push(reference.map_or(f64::NAN, |r| l2_distance(&state.x, r.stacked())));
        self.consensus_error.push(consensus_error(state));
        self.conservation_residual.push(conservation_residual(state));
        self.decision_sum_norm.push(decision_sum_norm(state));
        self.eps_spent.push(eps);
    }
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub game: &'a GameSpec,
    pub coupling: &'a WeightMatrix,
    pub variant: AlgorithmVariant,
    pub lambda: PolySchedule,
    pub gamma: PolySchedule,
    pub noise: Option<LaplaceNoiseSource>,
    pub oracle: GradientOracle,
    pub iterations: u64,
    pub record_every: u64,
    pub reference: Option<&'a DecisionProfile>,
    /// Updated every round when present; requires `noise`.
    pub ledger: Option<PrivacyLedger>,
    /// Seed of the initial decisions.
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: TrajectoryMetrics,
    pub ledger: Option<PrivacyLedger>,
    pub final_state: SolverState,
    /// Schedule conditions that failed; the run proceeds regardless.
    pub warnings: Vec<String>,
}

pub const DEFAULT_RECORD_EVERY: u64 = 100;

/// Runs `iterations` rounds from a random feasible start, recording metrics at
/// round 0, every `record_every` rounds and at the final round.
pub fn run(spec: RunSpec<'_>) -> Result<RunOutput> {
    let RunSpec {
        game,
        coupling,
        variant,
        lambda,
        gamma,
        noise,
        oracle,
        iterations,
        record_every,
        reference,
        mut ledger,
        init_seed,
    } = spec;
    let m = game.num_players();
    let d = game.dim();
    if coupling.size() != m {
        return Err(Error::invalid(format!("coupling matrix is {0}x{0}, game has {m} players", coupling.size())));
    }
    if let Some(r) = reference {
        if r.num_players() != m || r.dim() != d {
            return Err(Error::invalid("reference profile shape does not match the game"));
        }
    }
    if let Some(n) = &noise {
        if n.dim() != d {
            return Err(Error::invalid("noise dimension does not match the game"));
        }
    }
    if ledger.is_some() && noise.is_none() {
        return Err(Error::invalid("a privacy ledger needs a noise source"));
    }
    if record_every == 0 {
        return Err(Error::invalid("record_every must be positive"));
    }
    let lambda = variant.lambda_schedule(&lambda);
    let gamma = variant.gamma_schedule(&gamma);
    lambda.validate()?;
    gamma.validate()?;
    for (name, s) in [("lambda", &lambda), ("gamma", &gamma)] {
        if s.first_index() > 0 {
            return Err(Error::invalid(format!("{name} schedule must be defined from round 0")));
        }
    }
    if let Some(n) = &noise {
        if n.nu().first_index() > 0 {
            return Err(Error::invalid("noise schedule must be defined from round 0"));
        }
    }

    let mut warnings = Vec::new();
    if variant == AlgorithmVariant::DpWeakening {
        let report = check_convergence_conditions(&lambda, &gamma);
        warnings.extend(report.failures().map(|c| format!("convergence condition violated: {}", c.name)));
    }

    let mut state = SolverState::init(game, init_seed);
    let mut metrics = TrajectoryMetrics::default();
    let eps = |l: &Option<PrivacyLedger>| l.as_ref().map_or(0.0, PrivacyLedger::cumulative_eps);
    metrics.record(&state, reference, eps(&ledger));

    let mut zeta = vec![0.0; m * d];
    for k in 0..iterations {
        let lambda_k = lambda.eval(k)?;
        let gamma_k = gamma.eval(k)?;
        let noise_slice = match &noise {
            Some(src) => {
                for i in 0..m {
                    src.sample(i, k, &mut zeta[i * d..(i + 1) * d])?;
                }
                Some(zeta.as_slice())
            }
            None => None,
        };
        state = step(&state, game, coupling, lambda_k, gamma_k, noise_slice, &oracle)?;
        if let (Some(l), Some(src)) = (ledger.as_mut(), &noise) {
            l.record(k, lambda_k, src.nu().eval(k)?)?;
        }
        if state.k.is_multiple_of(record_every) || state.k == iterations {
            metrics.record(&state, reference, eps(&ledger));
        }
    }
    Ok(RunOutput {
        metrics,
        ledger,
        final_state: state,
        warnings,
    })
}
