//! Networked Nash-Cournot market game and analytic oracles.
//!
//! Firm `i` supplies `x_i[j]` units to market `j` at cost
//! `c_i(x_i) = x_i^T Q_i x_i + q_i^T x_i` and sells at the linear inverse-demand
//! price `P_bar - Xi S`, where `S = B x` is the total supply per market.
//! Decisions live in a common `N`-dimensional space; markets a firm does not
//! enter are pinned by a `[0, 0]` box, so `S = sum_i x_i = m x_bar`. The
//! players only see their running average estimate `u`, and the pseudo-gradient
//! reconstructs the supply as `m u`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AggregateConvention, DecisionProfile, FeasibleBox, GameSpec, Player, PseudoGradientField};
use crate::rng;
use crate::schedule::PolySchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CournotInstance {
    pub firms: usize,
    pub markets: usize,
    /// `participation[i][j]`: firm `i` sells in market `j`.
    pub participation: Vec<Vec<bool>>,
    /// Per-firm capacities, one per market.
    pub capacity: Vec<Vec<f64>>,
    /// Per-firm `N x N` cost matrices, row-major rows.
    pub cost_quadratic: Vec<Vec<Vec<f64>>>,
    pub cost_linear: Vec<Vec<f64>>,
    pub price_intercept: Vec<f64>,
    pub price_slope: Vec<f64>,
}

/// How the participation matrix of a generated instance is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Explicit(Vec<Vec<bool>>),
    /// Each firm enters each market with this probability; empty rows and
    /// columns are then patched with one random entry each.
    Density(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// `Q_i = nu I`, `nu ~ U[1, 10]`.
    #[default]
    ScaledIdentity,
    /// `Q_i = nu I + G G^T / N` with `G` entries `U[-1, 1]`.
    RandomPd,
}

/// Draws a market instance. Per firm, in order: `N` capacities `U[8, 10]`,
/// one `nu ~ U[1, 10]` (then `N^2` entries of `G` for [`CostModel::RandomPd`]),
/// `N` linear costs `U[1, 2]`. Then per market: `P_bar_j ~ U[10, 20]` and
/// `chi_j ~ U[1, 3]`. Generated participation is drawn first, row by row,
/// from a separate stream.
pub fn build_cournot(seed: u64, firms: usize, markets: usize, participation: &Participation, cost: CostModel) -> Result<CournotInstance> {
    if firms == 0 || markets == 0 {
        return Err(Error::invalid("need at least one firm and one market"));
    }
    let participation = match participation {
        Participation::Explicit(p) => p.clone(),
        Participation::Density(rho) => generate_participation(seed, firms, markets, *rho)?,
    };
    let mut s = rng::stream(seed, rng::domain::INSTANCE, 0, 0);
    let mut capacity = Vec::with_capacity(firms);
    let mut cost_quadratic = Vec::with_capacity(firms);
    let mut cost_linear = Vec::with_capacity(firms);
    for _ in 0..firms {
        capacity.push((0..markets).map(|_| s.random_range(8.0..=10.0)).collect());
        let nu: f64 = s.random_range(1.0..=10.0);
        let mut q = vec![vec![0.0; markets]; markets];
        if cost == CostModel::RandomPd {
            let g: Vec<f64> = (0..markets * markets).map(|_| s.random_range(-1.0..=1.0)).collect();
            for (r, row) in q.iter_mut().enumerate() {
                for (c, e) in row.iter_mut().enumerate() {
                    *e = (0..markets).map(|t| g[r * markets + t] * g[c * markets + t]).sum::<f64>() / markets as f64;
                }
            }
        }
        for (r, row) in q.iter_mut().enumerate() {
            row[r] += nu;
        }
        cost_quadratic.push(q);
        cost_linear.push((0..markets).map(|_| s.random_range(1.0..=2.0)).collect());
    }
    let mut price_intercept = Vec::with_capacity(markets);
    let mut price_slope = Vec::with_capacity(markets);
    for _ in 0..markets {
        price_intercept.push(s.random_range(10.0..=20.0));
        price_slope.push(s.random_range(1.0..=3.0));
    }
    let inst = CournotInstance {
        firms,
        markets,
        participation,
        capacity,
        cost_quadratic,
        cost_linear,
        price_intercept,
        price_slope,
    };
    inst.validate()?;
    Ok(inst)
}

fn generate_participation(seed: u64, firms: usize, markets: usize, density: f64) -> Result<Vec<Vec<bool>>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("participation density {density} must lie in (0, 1]")));
    }
    let mut s = rng::stream(seed, rng::domain::INSTANCE, 1, 0);
    let mut p: Vec<Vec<bool>> = (0..firms).map(|_| (0..markets).map(|_| s.random_bool(density)).collect()).collect();
    for row in p.iter_mut() {
        if !row.iter().any(|&b| b) {
            row[s.random_range(0..markets)] = true;
        }
    }
    for j in 0..markets {
        if !p.iter().any(|row| row[j]) {
            p[s.random_range(0..firms)][j] = true;
        }
    }
    Ok(p)
}

/// Parameters of a single-market game with identical firms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricMarket {
    pub firms: usize,
    pub cost_quadratic: f64,
    pub cost_linear: f64,
    pub price_slope: f64,
    pub price_intercept: f64,
    pub capacity: f64,
}

impl SymmetricMarket {
    /// The two-firm market `Q = 1, q = 0, chi = 1, P_bar = 10`, capacity 10.
    pub fn two_firm() -> Self {
        Self {
            firms: 2,
            cost_quadratic: 1.0,
            cost_linear: 0.0,
            price_slope: 1.0,
            price_intercept: 10.0,
            capacity: 10.0,
        }
    }

    pub fn monopoly() -> Self {
        Self { firms: 1, ..Self::two_firm() }
    }

    pub fn instance(&self) -> Result<CournotInstance> {
        let m = self.firms;
        let inst = CournotInstance {
            firms: m,
            markets: 1,
            participation: vec![vec![true]; m],
            capacity: vec![vec![self.capacity]; m],
            cost_quadratic: vec![vec![vec![self.cost_quadratic]]; m],
            cost_linear: vec![vec![self.cost_linear]; m],
            price_intercept: vec![self.price_intercept],
            price_slope: vec![self.price_slope],
        };
        inst.validate()?;
        Ok(inst)
    }
}

/// `x* = (P_bar - q) / (2Q + chi + chi m)`; a result outside `[0, capacity]`
/// means the interior formula does not describe the equilibrium.
pub fn closed_form_symmetric(p: &SymmetricMarket) -> Result<f64> {
    let denom = 2.0 * p.cost_quadratic + p.price_slope + p.price_slope * p.firms as f64;
    if !(denom > 0.0) {
        return Err(Error::invalid("2Q + chi (1 + m) must be positive"));
    }
    let x = (p.price_intercept - p.cost_linear) / denom;
    if x < 0.0 || x > p.capacity {
        return Err(Error::BoundaryCase(format!("interior solution {x} lies outside [0, {}]", p.capacity)));
    }
    Ok(x)
}

impl CournotInstance {
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.firms, self.markets);
        if m == 0 || n == 0 {
            return Err(Error::invalid("need at least one firm and one market"));
        }
        let rows_ok = |v: &Vec<Vec<f64>>| v.len() == m && v.iter().all(|r| r.len() == n);
        if self.participation.len() != m
            || self.participation.iter().any(|r| r.len() != n)
            || !rows_ok(&self.capacity)
            || !rows_ok(&self.cost_linear)
            || self.cost_quadratic.len() != m
            || self.cost_quadratic.iter().any(|q| !rows_ok_n(q, n))
            || self.price_intercept.len() != n
            || self.price_slope.len() != n
        {
            return Err(Error::invalid(format!("instance arrays do not match {m} firms and {n} markets")));
        }
        if let Some(i) = self.participation.iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::invalid(format!("firm {i} participates in no market")));
        }
        if let Some(j) = (0..n).find(|&j| !self.participation.iter().any(|r| r[j])) {
            return Err(Error::invalid(format!("market {j} has no firm")));
        }
        let all = self
            .capacity
            .iter()
            .chain(&self.cost_linear)
            .flatten()
            .chain(self.cost_quadratic.iter().flatten().flatten())
            .chain(&self.price_intercept)
            .chain(&self.price_slope);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::invalid("instance contains non-finite values"));
        }
        if self.capacity.iter().flatten().any(|&c| c < 0.0) {
            return Err(Error::invalid("capacities must be nonnegative"));
        }
        if let Some(j) = self.price_slope.iter().position(|&c| c < 0.0) {
            return Err(Error::invalid(format!("price slope of market {j} is negative")));
        }
        for (i, q) in self.cost_quadratic.iter().enumerate() {
            let mat = DMatrix::from_fn(n, n, |r, c| q[r][c]);
            if (&mat - mat.transpose()).abs().max() > 1e-12 * (1.0 + mat.abs().max()) {
                return Err(Error::invalid(format!("Q_{i} is not symmetric")));
            }
            if mat.cholesky().is_none() {
                return Err(Error::invalid(format!("Q_{i} is not positive definite")));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize instance: {e}")))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let inst: Self = toml::from_str(s).map_err(|e| Error::invalid(format!("cannot parse instance: {e}")))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// Box of firm `i`: `[0, C_i[j]]` where it participates, `[0, 0]` elsewhere.
    pub fn feasible_box(&self, i: usize) -> Result<FeasibleBox> {
        let upper = self.capacity[i]
            .iter()
            .zip(&self.participation[i])
            .map(|(&c, &p)| if p { c } else { 0.0 })
            .collect();
        FeasibleBox::new(vec![0.0; self.markets], upper)
    }

    /// Game over average estimates; each field applies `S = m u` itself.
    pub fn to_game(&self) -> Result<GameSpec> {
        self.validate()?;
        let shared = Arc::new(self.clone());
        let players = (0..self.firms)
            .map(|i| {
                let inst = Arc::clone(&shared);
                Ok(Player {
                    feasible: self.feasible_box(i)?,
                    field: PseudoGradientField::new(self.markets, move |x, u, out| gradient_into(&inst, i, x, u, out)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GameSpec::new(players, AggregateConvention::Average)
    }
}

fn rows_ok_n(q: &[Vec<f64>], n: usize) -> bool {
    q.len() == n && q.iter().all(|r| r.len() == n)
}

fn gradient_into(inst: &CournotInstance, i: usize, x: &[f64], u: &[f64], out: &mut [f64]) {
    let m = inst.firms as f64;
    let q = &inst.cost_quadratic[i];
    for j in 0..inst.markets {
        let mut g = 2.0 * q[j].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + inst.cost_linear[i][j];
        if inst.participation[i][j] {
            let chi = inst.price_slope[j];
            g += chi * x[j] - (inst.price_intercept[j] - chi * m * u[j]);
        }
        out[j] = g;
    }
}

/// `F_i = 2 Q_i x_i + q_i + B_i Xi B_i x_i - B_i (P_bar - Xi m u)`.
pub fn cournot_pseudo_gradient(inst: &CournotInstance, i: usize, x_i: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if i >= inst.firms {
        return Err(Error::invalid(format!("firm {i} out of range")));
    }
    if x_i.len() != inst.markets || u.len() != inst.markets {
        return Err(Error::invalid(format!("expected vectors of length {}", inst.markets)));
    }
    let mut out = vec![0.0; inst.markets];
    gradient_into(inst, i, x_i, u, &mut out);
    Ok(out)
}

/// `f_i(x) = x_i^T Q_i x_i + q_i^T x_i - (P_bar - Xi B x)^T B_i x_i`.
pub fn cournot_cost(inst: &CournotInstance, i: usize, x: &DecisionProfile) -> Result<f64> {
    if x.num_players() != inst.firms || x.dim() != inst.markets {
        return Err(Error::invalid("profile shape does not match the instance"));
    }
    let xi = x.block(i);
    let n = inst.markets;
    let mut supply = vec![0.0; n];
    for k in 0..inst.firms {
        for (j, s) in supply.iter_mut().enumerate() {
            if inst.participation[k][j] {
                *s += x.block(k)[j];
            }
        }
    }
    let q = &inst.cost_quadratic[i];
    let mut f = 0.0;
    for j in 0..n {
        f += xi[j] * q[j].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + inst.cost_linear[i][j] * xi[j];
        if inst.participation[i][j] {
            f -= (inst.price_intercept[j] - inst.price_slope[j] * supply[j]) * xi[j];
        }
    }
    Ok(f)
}

/// Exact Jacobian of the stacked pseudo-gradient, `mN x mN`.
pub fn cournot_jacobian(inst: &CournotInstance) -> DMatrix<f64> {
    let (m, n) = (inst.firms, inst.markets);
    let mut jac = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for r in 0..n {
            for c in 0..n {
                jac[(i * n + r, i * n + c)] = 2.0 * inst.cost_quadratic[i][r][c];
            }
        }
        for k in 0..m {
            for j in 0..n {
                if inst.participation[i][j] && inst.participation[k][j] {
                    let w = if i == k { 2.0 } else { 1.0 };
                    jac[(i * n + j, k * n + j)] += w * inst.price_slope[j];
                }
            }
        }
    }
    jac
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    /// Smallest eigenvalue of `(J + J^T) / 2`.
    pub min_eigenvalue: f64,
    pub pass: bool,
}

pub fn verify_monotonicity_cournot(inst: &CournotInstance) -> JacobianReport {
    let jac = cournot_jacobian(inst);
    let sym = (&jac + jac.transpose()) * 0.5;
    let min = SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    JacobianReport {
        min_eigenvalue: min,
        pass: min > 0.0,
    }
}

/// Step rule of the centralized iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    /// `alpha_k` from a schedule.
    Schedule(PolySchedule),
    /// Starts at `initial` and halves whenever the residual fails to drop
    /// over a block of `CHECK_EVERY` rounds.
    Halving { initial: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedOptions {
    pub step: StepRule,
    /// Fixed step of the natural-map residual used as the stopping test.
    pub probe_step: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CentralizedOptions {
    fn default() -> Self {
        Self {
            step: StepRule::Halving { initial: 1.0 },
            probe_step: 1.0,
            tol: 1e-9,
            max_iters: 2_000_000,
        }
    }
}

const CHECK_EVERY: usize = 64;

/// `||x - P_K[x - a phi(x)]||`.
pub fn fixed_point_residual(game: &GameSpec, x: &DecisionProfile, probe_step: f64) -> Result<f64> {
    let phi = game.evaluate_phi(x)?;
    let moved: Vec<f64> = x.stacked().iter().zip(&phi).map(|(a, g)| a - probe_step * g).collect();
    let projected = game.project_profile(&DecisionProfile::new(moved, x.dim())?)?;
    Ok(projected.distance(x))
}

/// Centralized projected pseudo-gradient iteration from the box midpoint,
/// with the true average in every evaluation.
pub fn solve_centralized(game: &GameSpec, tol: f64, max_iters: usize) -> Result<DecisionProfile> {
    solve_centralized_with(game, &CentralizedOptions { tol, max_iters, ..Default::default() })
}

pub fn solve_centralized_with(game: &GameSpec, opts: &CentralizedOptions) -> Result<DecisionProfile> {
    if !(opts.tol > 0.0) || !(opts.probe_step > 0.0) {
        return Err(Error::invalid("tol and probe_step must be positive"));
    }
    let mut alpha = match &opts.step {
        StepRule::Schedule(s) => {
            s.validate()?;
            f64::NAN
        }
        StepRule::Halving { initial } if *initial > 0.0 => *initial,
        StepRule::Halving { .. } => return Err(Error::invalid("initial step must be positive")),
    };
    let d = game.dim();
    let mid: Vec<f64> = game
        .players()
        .iter()
        .flat_map(|p| p.feasible.lower().iter().zip(p.feasible.upper()).map(|(l, u)| 0.5 * (l + u)).collect::<Vec<_>>())
        .collect();
    let mut x = DecisionProfile::new(mid, d)?;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iters {
        if it % CHECK_EVERY == 0 {
            let r = fixed_point_residual(game, &x, opts.probe_step)?;
            if r <= opts.tol {
                return Ok(x);
            }
            if r >= residual {
                alpha *= 0.5;
            }
            residual = r;
        }
        let a = match &opts.step {
            StepRule::Schedule(s) => s.eval(s.first_index() + it as u64)?,
            StepRule::Halving { .. } => alpha,
        };
        let phi = game.evaluate_phi(&x)?;
        let moved: Vec<f64> = x.stacked().iter().zip(&phi).map(|(v, g)| v - a * g).collect();
        x = game.project_profile(&DecisionProfile::new(moved, d)?)?;
    }
    residual = fixed_point_residual(game, &x, opts.probe_step)?;
    if residual <= opts.tol {
        return Ok(x);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        residual,
    })
}
