//! Laplace noise, sensitivity and privacy-budget accounting.
//!
//! At iteration `k` a single player's payoff change can move the iterate by at
//! most `delta_k = 2 lambda_k C` in l1 norm, where `C` bounds the l1 norm of
//! every pseudo-gradient. Masking the shared estimates with `Lap(nu_k)` noise
//! costs `delta_k / nu_k` of budget, so the run is epsilon-DP with
//! `epsilon = sum_k 2 C lambda_k / nu_k`, finite when `lambda_k / nu_k` is
//! summable.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::csvio::fmt_float;
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::rng;
use crate::schedule::{series_value, DecidedBy, PolySchedule, SeriesTerm};
use crate::solver::SolverState;

/// Fills `out` with i.i.d. `Lap(nu)` draws by inverse CDF:
/// `x = -nu sign(u) ln(1 - 2|u|)` with `u` uniform on `(-1/2, 1/2)`.
pub fn sample_laplace<R: Rng + ?Sized>(nu: f64, out: &mut [f64], rng: &mut R) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::invalid(format!("Laplace scale {nu} must be positive and finite")));
    }
    for o in out.iter_mut() {
        *o = nu * standard_laplace(rng);
    }
    Ok(())
}

/// One `Lap(1)` draw.
#[inline]
pub fn standard_laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u != -0.5 {
            return -u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// Per-player, per-iteration Laplace noise with scale schedule `nu`.
#[derive(Debug, Clone)]
pub struct LaplaceNoiseSource {
    nu: PolySchedule,
    dim: usize,
    master_seed: u64,
}

impl LaplaceNoiseSource {
    pub fn new(nu: PolySchedule, dim: usize, master_seed: u64) -> Result<Self> {
        nu.validate()?;
        Ok(Self { nu, dim, master_seed })
    }

    pub fn nu(&self) -> &PolySchedule {
        &self.nu
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Draws `zeta_i^k` into `out`. The stream depends only on
    /// `(master_seed, player, k)`.
    pub fn sample(&self, player: usize, k: u64, out: &mut [f64]) -> Result<()> {
        let nu = self.nu.eval(k)?;
        let mut s = rng::stream(self.master_seed, rng::domain::PRIVACY_NOISE, player as u64, k);
        sample_laplace(nu, out, &mut s)
    }
}

/// `2 lambda_k C`: l1 sensitivity of one iteration.
pub fn sensitivity_bound(lambda_k: f64, c_bar: f64) -> f64 {
    2.0 * lambda_k * c_bar
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub k: u64,
    pub lambda: f64,
    pub nu: f64,
    pub delta: f64,
    pub increment: f64,
    pub cumulative_eps: f64,
}

/// Model of the budget not yet spent, used for the ledger's tail bound.
#[derive(Debug, Clone, PartialEq)]
enum TailModel {
    None,
    Series(SeriesTerm),
    /// `sum_{k > K} coeff q^k`.
    Geometric { coeff: f64, q: f64 },
}

/// Running privacy account of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    c_bar: f64,
    entries: Vec<LedgerEntry>,
    cumulative_eps: f64,
    tail: TailModel,
}

impl PrivacyLedger {
    pub fn new(c_bar: f64) -> Result<Self> {
        if !(c_bar > 0.0 && c_bar.is_finite()) {
            return Err(Error::invalid(format!("gradient bound C = {c_bar} must be positive")));
        }
        Ok(Self {
            c_bar,
            entries: Vec::new(),
            cumulative_eps: 0.0,
            tail: TailModel::None,
        })
    }

    /// Ledger that can also bound the budget remaining after the last entry.
    pub fn for_schedules(c_bar: f64, lambda: &PolySchedule, nu: &PolySchedule) -> Result<Self> {
        let mut l = Self::new(c_bar)?;
        l.tail = match (lambda, constant_value(nu)) {
            (PolySchedule::Geometric { a, q }, Some(nu_c)) => TailModel::Geometric {
                coeff: 2.0 * c_bar * a / nu_c,
                q: *q,
            },
            _ => TailModel::Series(budget_term(lambda, nu, c_bar)),
        };
        Ok(l)
    }

    pub fn c_bar(&self) -> f64 {
        self.c_bar
    }

    /// Records iteration `k` and returns its increment `2 lambda C / nu`.
    pub fn record(&mut self, k: u64, lambda: f64, nu: f64) -> Result<f64> {
        if !(nu > 0.0) || !(lambda >= 0.0) {
            return Err(Error::invalid(format!("ledger entry with lambda {lambda}, nu {nu}")));
        }
        let delta = sensitivity_bound(lambda, self.c_bar);
        let increment = delta / nu;
        self.cumulative_eps += increment;
        self.entries.push(LedgerEntry {
            k,
            lambda,
            nu,
            delta,
            increment,
            cumulative_eps: self.cumulative_eps,
        });
        Ok(increment)
    }

    pub fn cumulative_eps(&self) -> f64 {
        self.cumulative_eps
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Upper bound on the budget of all iterations after the last entry.
    pub fn tail_bound(&self) -> f64 {
        let last = self.entries.last().map(|e| e.k).unwrap_or(0);
        match &self.tail {
            TailModel::None => f64::INFINITY,
            TailModel::Series(t) => t.tail_upper_bound(last),
            TailModel::Geometric { coeff, q } => coeff * q.powf(last as f64 + 1.0) / (1.0 - q),
        }
    }

    /// CSV with header `k,lambda,nu,delta,increment,cumulative_eps`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "lambda", "nu", "delta", "increment", "cumulative_eps"])?;
        for e in &self.entries {
            wr.write_record([
                e.k.to_string(),
                fmt_float(e.lambda),
                fmt_float(e.nu),
                fmt_float(e.delta),
                fmt_float(e.increment),
                fmt_float(e.cumulative_eps),
            ])?;
        }
        wr.flush()
    }
}

fn constant_value(s: &PolySchedule) -> Option<f64> {
    match *s {
        PolySchedule::Rational { a, b: 0.0, .. } => Some(a),
        PolySchedule::Rational { a, b, p: 0.0 } => Some(a / (1.0 + b)),
        PolySchedule::Monomial { a, c, p } if a == 0.0 || p == 0.0 => Some(a + c),
        _ => None,
    }
}

fn budget_term(lambda: &PolySchedule, nu: &PolySchedule, c_bar: f64) -> SeriesTerm {
    SeriesTerm::new().times(lambda, 1.0).times(nu, -1.0).scaled(2.0 * c_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetReport {
    /// `sum_{k=1}^{horizon} 2 C lambda_k / nu_k`.
    pub partial: f64,
    /// Upper bound on the remaining terms; infinite when the series diverges.
    pub tail_bound: f64,
    pub finite: bool,
    pub decided_by: DecidedBy,
}

impl BudgetReport {
    pub fn total_bound(&self) -> f64 {
        self.partial + self.tail_bound
    }
}

/// Budget of iterations `1..=horizon` plus a bound on everything after.
pub fn cumulative_budget(lambda: &PolySchedule, nu: &PolySchedule, c_bar: f64, horizon: u64) -> Result<BudgetReport> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    lambda.validate()?;
    nu.validate()?;
    let term = budget_term(lambda, nu, c_bar);
    let partial = term.partial_sum(1, horizon);
    if let (PolySchedule::Geometric { a, q }, Some(nu_c)) = (lambda, constant_value(nu)) {
        let finite = *q < 1.0;
        let tail_bound = if finite {
            2.0 * c_bar * a / nu_c * q.powf(horizon as f64 + 1.0) / (1.0 - q)
        } else {
            f64::INFINITY
        };
        return Ok(BudgetReport {
            partial,
            tail_bound,
            finite,
            decided_by: DecidedBy::ClosedForm,
        });
    }
    let v = term.verdict();
    let tail_bound = if v.converges { term.tail_upper_bound(horizon) } else { f64::INFINITY };
    Ok(BudgetReport {
        partial,
        tail_bound,
        finite: v.converges,
        decided_by: v.decided_by,
    })
}

/// Infinite-horizon budget of a run whose first step uses index 0: the
/// `k = 0` term (when the schedules are defined there) plus every later term.
pub fn run_budget_bound(lambda: &PolySchedule, nu: &PolySchedule, c_bar: f64) -> Result<f64> {
    let head = if lambda.first_index() == 0 && nu.first_index() == 0 {
        sensitivity_bound(lambda.eval(0)?, c_bar) / nu.eval(0)?
    } else {
        0.0
    };
    if let (PolySchedule::Geometric { .. }, Some(_)) = (lambda, constant_value(nu)) {
        let r = cumulative_budget(lambda, nu, c_bar, 1)?;
        return Ok(head + r.total_bound());
    }
    let term = budget_term(lambda, nu, c_bar);
    Ok(head + series_value(&term, 1e-9, 1 << 27)?.upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Calibrated noise schedule `nu = (2 C phi / eps) nu'`.
    pub nu: PolySchedule,
    /// `phi = sum_{k>=1} lambda_k / nu'_k` (upper estimate).
    pub phi: f64,
    /// `2 C phi / eps`.
    pub scale: f64,
}

/// Scales the noise shape `nu_prime` so that the infinite-horizon budget
/// `sum_{k>=1} 2 C lambda_k / nu_k` does not exceed `eps_target`.
///
/// `phi` is bracketed to 1e-9 by partial sum plus integral tail and its upper
/// end is used, so the guarantee holds despite truncation.
pub fn calibrate_noise(lambda: &PolySchedule, nu_prime: &PolySchedule, eps_target: f64, c_bar: f64) -> Result<Calibration> {
    if !(eps_target > 0.0 && eps_target.is_finite()) {
        return Err(Error::Calibration(format!("target epsilon {eps_target} must be positive")));
    }
    if !(c_bar > 0.0 && c_bar.is_finite()) {
        return Err(Error::Calibration(format!("gradient bound {c_bar} must be positive")));
    }
    lambda.validate()?;
    nu_prime.validate()?;
    let ratio = SeriesTerm::new().times(lambda, 1.0).times(nu_prime, -1.0);
    let phi = series_value(&ratio, 1e-9, 1 << 27)?.upper;
    let scale = 2.0 * c_bar * phi / eps_target;
    Ok(Calibration {
        nu: nu_prime.scaled(scale),
        phi,
        scale,
    })
}

/// Constant Laplace scale for a geometric stepsize `lambda0 q^k` (from
/// `k = 0`) so that the infinite-horizon budget equals `eps`.
pub fn geometric_noise_for_budget(lambda0: f64, q: f64, c_bar: f64, eps: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Calibration(format!("geometric ratio {q} must lie in (0, 1)")));
    }
    if !(eps > 0.0) || !(lambda0 > 0.0) {
        return Err(Error::Calibration("lambda0 and eps must be positive".into()));
    }
    Ok(2.0 * c_bar * lambda0 / ((1.0 - q) * eps))
}

/// Scales `g` down to l1 norm `c_bar` when it exceeds it.
pub fn clip_l1(g: &mut [f64], c_bar: f64) {
    let n: f64 = g.iter().map(|v| v.abs()).sum();
    if n > c_bar {
        let s = c_bar / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityProbe {
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Runs one decision update from the same state under two adjacent games with
/// pseudo-gradients clipped to l1 norm `c_bar`, and compares the l1 distance
/// of the results with `2 lambda_k c_bar`.
///
/// Games are adjacent when they share boxes, dimension and convention and
/// every player other than `differing_player` uses the same evaluator handle.
pub fn one_step_sensitivity_probe(
    game_a: &GameSpec,
    game_b: &GameSpec,
    differing_player: usize,
    state: &SolverState,
    lambda_k: f64,
    c_bar: f64,
) -> Result<SensitivityProbe> {
    let m = game_a.num_players();
    let d = game_a.dim();
    if game_b.num_players() != m || game_b.dim() != d || game_a.convention() != game_b.convention() {
        return Err(Error::invalid("games differ in shape"));
    }
    if differing_player >= m {
        return Err(Error::invalid(format!("player {differing_player} out of range")));
    }
    for i in 0..m {
        let (pa, pb) = (game_a.player(i), game_b.player(i));
        if pa.feasible != pb.feasible {
            return Err(Error::invalid(format!("games differ in the feasible set of player {i}")));
        }
        if i != differing_player && !pa.field.same_evaluator(&pb.field) {
            return Err(Error::invalid(format!("games differ in player {i}, not only in {differing_player}")));
        }
    }
    if state.num_players() != m || state.dim() != d {
        return Err(Error::invalid("state shape does not match the games"));
    }
    if !(lambda_k >= 0.0) || !(c_bar > 0.0) {
        return Err(Error::invalid("lambda must be nonnegative and c_bar positive"));
    }

    let scale = game_a.aggregate_scale();
    let mut u = vec![0.0; d];
    let mut ga = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut measured = 0.0;
    for i in 0..m {
        let x = state.x(i);
        u.iter_mut().zip(state.v(i)).for_each(|(o, v)| *o = scale * v);
        game_a.player(i).field.eval_into(x, &u, &mut ga);
        game_b.player(i).field.eval_into(x, &u, &mut gb);
        clip_l1(&mut ga, c_bar);
        clip_l1(&mut gb, c_bar);
        let mut xa: Vec<f64> = x.iter().zip(&ga).map(|(xi, g)| xi - lambda_k * g).collect();
        let mut xb: Vec<f64> = x.iter().zip(&gb).map(|(xi, g)| xi - lambda_k * g).collect();
        game_a.player(i).feasible.project_in_place(&mut xa);
        game_a.player(i).feasible.project_in_place(&mut xb);
        measured += xa.iter().zip(&xb).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    let bound = sensitivity_bound(lambda_k, c_bar);
    Ok(SensitivityProbe {
        measured,
        bound,
        pass: measured <= bound + 1e-12,
    })
}
