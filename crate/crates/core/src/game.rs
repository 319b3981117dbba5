//! Aggregative game primitives.
//!
//! A game is a list of players, each owning an axis-aligned box `K_i` and a
//! pseudo-gradient field `F_i(x_i, u)` where `u` is the aggregate seen by the
//! player. The stacked map evaluated at the true aggregate is
//! `phi(x) = [F_1(x_1, u(x)); ...; F_m(x_m, u(x))]`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Axis-aligned box `[lower, upper]` in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl FeasibleBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::invalid("box must have dimension at least 1"));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("box bound {j} is not finite")));
            }
            if lo > hi {
                return Err(Error::invalid(format!("box coordinate {j}: lower {lo} > upper {hi}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The box `[lo, hi]^d`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Euclidean projection onto the box (coordinate-wise clamp).
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, box has {}",
                point.len(),
                self.dim()
            )));
        }
        let mut out = point.to_vec();
        self.project_in_place(&mut out);
        Ok(out)
    }

    /// Clamps `point` in place. The caller guarantees matching dimension.
    pub fn project_in_place(&self, point: &mut [f64]) {
        debug_assert_eq!(point.len(), self.dim());
        for ((p, lo), hi) in point.iter_mut().zip(&self.lower).zip(&self.upper) {
            *p = p.clamp(*lo, *hi);
        }
    }

    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((p, lo), hi)| *p >= lo - tol && *p <= hi + tol)
    }

    /// Draws a point uniformly from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| if lo == hi { *lo } else { rng.random_range(*lo..=*hi) })
            .collect()
    }
}

type FieldFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// A player's pseudo-gradient `F_i(x_i, u)`.
///
/// The evaluator writes its result into the output slice, which has the same
/// dimension as `x_i` and `u`. Evaluators must be re-entrant.
#[derive(Clone)]
pub struct PseudoGradientField {
    dim: usize,
    eval: Arc<FieldFn>,
}

impl fmt::Debug for PseudoGradientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PseudoGradientField")
            .field("dim", &self.dim)
            .field("eval", &Arc::as_ptr(&self.eval))
            .finish()
    }
}

impl PseudoGradientField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim, eval: Arc::new(eval) }
    }

    /// Field of the form `F(x, u) = A x + B u + c` with row-major `d x d` matrices.
    pub fn affine(dim: usize, own: Vec<f64>, aggregate: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        if own.len() != dim * dim || aggregate.len() != dim * dim || offset.len() != dim {
            return Err(Error::invalid("affine field coefficients have wrong shapes"));
        }
        Ok(Self::new(dim, move |x, u, out| {
            for r in 0..dim {
                let row = r * dim;
                let mut acc = offset[r];
                for c in 0..dim {
                    acc += own[row + c] * x[c] + aggregate[row + c] * u[c];
                }
                out[r] = acc;
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.eval)(x, u, out)
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim || u.len() != self.dim {
            return Err(Error::invalid(format!(
                "field of dimension {} evaluated at inputs of length {} and {}",
                self.dim,
                x.len(),
                u.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, u, &mut out);
        Ok(out)
    }

    /// True when both handles share one evaluator.
    pub fn same_evaluator(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.eval, &other.eval)
    }
}

/// What the evaluators receive as their aggregate argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateConvention {
    /// `u = (1/m) sum_i x_i`
    #[default]
    Average,
    /// `u = sum_i x_i`
    MTimesAverage,
}

#[derive(Debug, Clone)]
pub struct Player {
    pub feasible: FeasibleBox,
    pub field: PseudoGradientField,
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    players: Vec<Player>,
    dim: usize,
    convention: AggregateConvention,
}

impl GameSpec {
    pub fn new(players: Vec<Player>, convention: AggregateConvention) -> Result<Self> {
        let first = players.first().ok_or_else(|| Error::invalid("a game needs at least one player"))?;
        let dim = first.feasible.dim();
        for (i, p) in players.iter().enumerate() {
            if p.feasible.dim() != dim || p.field.dim() != dim {
                return Err(Error::invalid(format!(
                    "player {i} has box dimension {} and field dimension {}, expected {dim}",
                    p.feasible.dim(),
                    p.field.dim()
                )));
            }
        }
        Ok(Self { players, dim, convention })
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn convention(&self) -> AggregateConvention {
        self.convention
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn player(&self, i: usize) -> &Player {
        &self.players[i]
    }

    /// Scale applied to an average before it is handed to an evaluator.
    pub fn aggregate_scale(&self) -> f64 {
        match self.convention {
            AggregateConvention::Average => 1.0,
            AggregateConvention::MTimesAverage => self.players.len() as f64,
        }
    }

    /// Evaluator input for a given average decision.
    pub fn aggregate_input(&self, average: &[f64]) -> Vec<f64> {
        let s = self.aggregate_scale();
        average.iter().map(|a| a * s).collect()
    }

    /// Returns a copy of the game with player `i`'s field replaced.
    pub fn with_field(&self, i: usize, field: PseudoGradientField) -> Result<Self> {
        if i >= self.players.len() {
            return Err(Error::invalid(format!("player index {i} out of range")));
        }
        let mut players = self.players.clone();
        players[i].field = field;
        Self::new(players, self.convention)
    }

    /// The stacked pseudo-gradient `phi(x) = F(x, u(x))`, players evaluated in order.
    pub fn evaluate_phi(&self, x: &DecisionProfile) -> Result<Vec<f64>> {
        let d = self.dim;
        let m = self.players.len();
        if x.dim() != d || x.num_players() != m {
            return Err(Error::invalid(format!(
                "profile has {} blocks of dimension {}, game has {m} of {d}",
                x.num_players(),
                x.dim()
            )));
        }
        let u = self.aggregate_input(&x.average());
        let mut out = vec![0.0; m * d];
        for (i, p) in self.players.iter().enumerate() {
            let block = &mut out[i * d..(i + 1) * d];
            p.field.eval_into(x.block(i), &u, block);
            if block.iter().any(|g| !g.is_finite()) {
                return Err(Error::NumericalDomain(format!("player {i} returned a non-finite pseudo-gradient")));
            }
        }
        Ok(out)
    }

    /// Uniform draw from `K = K_1 x ... x K_m`.
    pub fn sample_profile<R: Rng + ?Sized>(&self, rng: &mut R) -> DecisionProfile {
        let mut stacked = Vec::with_capacity(self.players.len() * self.dim);
        for p in &self.players {
            stacked.extend(p.feasible.sample(rng));
        }
        DecisionProfile { stacked, dim: self.dim }
    }

    /// Projects every block of `x` onto its box.
    pub fn project_profile(&self, x: &DecisionProfile) -> Result<DecisionProfile> {
        if x.dim() != self.dim || x.num_players() != self.num_players() {
            return Err(Error::invalid("profile shape does not match the game"));
        }
        let mut out = x.clone();
        for (i, p) in self.players.iter().enumerate() {
            p.feasible.project_in_place(out.block_mut(i));
        }
        Ok(out)
    }
}

/// Stacked decision vector `[x_1; ...; x_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionProfile {
    stacked: Vec<f64>,
    dim: usize,
}

impl DecisionProfile {
    pub fn new(stacked: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || stacked.is_empty() || !stacked.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "stacked length {} is not a positive multiple of {dim}",
                stacked.len()
            )));
        }
        Ok(Self { stacked, dim })
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let dim = blocks.first().map(Vec::len).unwrap_or(0);
        if blocks.iter().any(|b| b.len() != dim) {
            return Err(Error::invalid("blocks have unequal dimensions"));
        }
        Self::new(blocks.concat(), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_players(&self) -> usize {
        self.stacked.len() / self.dim
    }

    pub fn stacked(&self) -> &[f64] {
        &self.stacked
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.stacked[i * self.dim..(i + 1) * self.dim]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.stacked[i * self.dim..(i + 1) * self.dim]
    }

    pub fn average(&self) -> Vec<f64> {
        let m = self.num_players() as f64;
        let mut avg = vec![0.0; self.dim];
        for i in 0..self.num_players() {
            for (a, x) in avg.iter_mut().zip(self.block(i)) {
                *a += x;
            }
        }
        avg.iter_mut().for_each(|a| *a /= m);
        avg
    }

    pub fn is_feasible(&self, game: &GameSpec, tol: f64) -> bool {
        self.num_players() == game.num_players()
            && (0..self.num_players()).all(|i| game.player(i).feasible.contains(self.block(i), tol))
    }

    pub fn distance(&self, other: &Self) -> f64 {
        l2_distance(&self.stacked, &other.stacked)
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub pass: bool,
    /// Minimum of `(phi(x) - phi(x'))^T (x - x') / ||x - x'||^2` over the probed pairs.
    pub worst_normalized: f64,
    pub pairs: usize,
}

/// Sampling probe for strict monotonicity of `phi` over `K`.
///
/// A pair passes when its inner product exceeds `tol * ||x - x'||^2`.
/// Boundary activity at the equilibrium is not interpreted.
pub fn check_strict_monotonicity(game: &GameSpec, seed: u64, pair_count: usize, tol: f64) -> Result<MonotonicityReport> {
    if pair_count == 0 {
        return Err(Error::invalid("pair_count must be at least 1"));
    }
    let mut rng = rng::stream(seed, rng::domain::PROBE, 0, 0);
    let mut worst = f64::INFINITY;
    let mut pass = true;
    let mut probed = 0;
    let mut attempts = 0;
    while probed < pair_count && attempts < 100 * pair_count {
        attempts += 1;
        let x = game.sample_profile(&mut rng);
        let y = game.sample_profile(&mut rng);
        let diff: Vec<f64> = x.stacked().iter().zip(y.stacked()).map(|(a, b)| a - b).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        if sq == 0.0 {
            continue;
        }
        let px = game.evaluate_phi(&x)?;
        let py = game.evaluate_phi(&y)?;
        let inner: f64 = px.iter().zip(&py).zip(&diff).map(|((a, b), d)| (a - b) * d).sum();
        if inner <= tol * sq {
            pass = false;
        }
        worst = worst.min(inner / sq);
        probed += 1;
    }
    if probed == 0 {
        return Err(Error::invalid("feasible set is a single point; no distinct pairs exist"));
    }
    Ok(MonotonicityReport { pass, worst_normalized: worst, pairs: probed })
}

/// Sampled lower bound on the Lipschitz constant of each `F_i` in its
/// aggregate argument, maximised over players and samples.
pub fn estimate_lipschitz(game: &GameSpec, seed: u64, sample_count: usize) -> Result<f64> {
    if sample_count < 2 {
        return Err(Error::invalid("sample_count must be at least 2"));
    }
    let mut rng = rng::stream(seed, rng::domain::PROBE, 1, 0);
    let d = game.dim();
    let mut best = 0.0_f64;
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];
    for _ in 0..sample_count {
        let u1 = game.aggregate_input(&game.sample_profile(&mut rng).average());
        let mut u2 = game.aggregate_input(&game.sample_profile(&mut rng).average());
        let mut du = l2_distance(&u1, &u2);
        let mut retries = 0;
        while du == 0.0 && retries < 16 {
            u2 = game.aggregate_input(&game.sample_profile(&mut rng).average());
            du = l2_distance(&u1, &u2);
            retries += 1;
        }
        if du == 0.0 {
            continue;
        }
        for p in game.players() {
            let x = p.feasible.sample(&mut rng);
            p.field.eval_into(&x, &u1, &mut g1);
            p.field.eval_into(&x, &u2, &mut g2);
            let dg = l2_distance(&g1, &g2);
            if !dg.is_finite() {
                return Err(Error::NumericalDomain("non-finite pseudo-gradient during Lipschitz probe".into()));
            }
            best = best.max(dg / du);
        }
    }
    Ok(best)
}
