//! Stepsize, weakening-factor and noise-scale sequences.
//!
//! Polynomial forms decay (or grow) like a power of `k`, which makes every
//! summability question that the convergence and privacy guarantees need
//! decidable by the p-series rule: `sum k^e` is finite iff `e < -1`. Geometric
//! and tabulated sequences are accepted for simulation, but their verdicts come
//! from a numeric partial-sum heuristic and carry a warning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolySchedule {
    /// `a / (1 + b k^p)`, defined for `k >= 0`.
    Rational {
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        p: f64,
    },
    /// `a k^p + c`; with `p < 0` it is defined for `k >= 1` only.
    Monomial {
        a: f64,
        #[serde(default)]
        c: f64,
        p: f64,
    },
    /// `a q^k`.
    Geometric { a: f64, q: f64 },
    /// Explicit values; the last entry repeats beyond the end.
    Table { values: Vec<f64> },
}

impl PolySchedule {
    pub fn rational(a: f64, b: f64, p: f64) -> Self {
        PolySchedule::Rational { a, b, p }
    }

    pub fn monomial(a: f64, p: f64, c: f64) -> Self {
        PolySchedule::Monomial { a, c, p }
    }

    pub fn constant(a: f64) -> Self {
        PolySchedule::Rational { a, b: 0.0, p: 0.0 }
    }

    pub fn geometric(a: f64, q: f64) -> Self {
        PolySchedule::Geometric { a, q }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("schedule parameter {name} = {v} must be finite and nonnegative")))
            }
        };
        match *self {
            PolySchedule::Rational { a, b, p } => {
                finite_nonneg("a", a)?;
                finite_nonneg("b", b)?;
                if !p.is_finite() {
                    return Err(Error::invalid("schedule exponent p must be finite"));
                }
            }
            PolySchedule::Monomial { a, c, p } => {
                finite_nonneg("a", a)?;
                finite_nonneg("c", c)?;
                if !p.is_finite() {
                    return Err(Error::invalid("schedule exponent p must be finite"));
                }
            }
            PolySchedule::Geometric { a, q } => {
                finite_nonneg("a", a)?;
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::invalid(format!("geometric ratio q = {q} must lie in (0, 1]")));
                }
            }
            PolySchedule::Table { ref values } => {
                if values.is_empty() {
                    return Err(Error::invalid("table schedule needs at least one value"));
                }
                for v in values {
                    finite_nonneg("table value", *v)?;
                }
            }
        }
        Ok(())
    }

    /// Smallest index at which the sequence is defined.
    pub fn first_index(&self) -> u64 {
        match *self {
            PolySchedule::Monomial { p, .. } if p < 0.0 => 1,
            _ => 0,
        }
    }

    /// Exact evaluation at index `k`.
    pub fn eval(&self, k: u64) -> Result<f64> {
        if k < self.first_index() {
            return Err(Error::invalid(format!("schedule {self:?} is undefined at k = {k}")));
        }
        Ok(self.value(k as f64))
    }

    /// Evaluation at a real argument without the domain check.
    pub(crate) fn value(&self, k: f64) -> f64 {
        match *self {
            PolySchedule::Rational { a, b, p } => {
                if b == 0.0 {
                    a
                } else {
                    a / (1.0 + b * k.powf(p))
                }
            }
            PolySchedule::Monomial { a, c, p } => {
                if a == 0.0 {
                    c
                } else {
                    a * k.powf(p) + c
                }
            }
            PolySchedule::Geometric { a, q } => a * q.powf(k),
            PolySchedule::Table { ref values } => {
                let idx = (k.max(0.0) as usize).min(values.len() - 1);
                values[idx]
            }
        }
    }

    /// Exponent `e` with `s(k) ~ const * k^e`; `None` for non-polynomial forms.
    /// An identically zero sequence reports `-inf`.
    pub fn asymptotic_exponent(&self) -> Option<f64> {
        match *self {
            PolySchedule::Rational { a, b, p } => Some(if a == 0.0 {
                f64::NEG_INFINITY
            } else if b > 0.0 && p > 0.0 {
                -p
            } else {
                0.0
            }),
            PolySchedule::Monomial { a, c, p } => Some(if a == 0.0 {
                if c > 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else if p > 0.0 {
                p
            } else if p < 0.0 {
                if c > 0.0 {
                    0.0
                } else {
                    p
                }
            } else {
                0.0
            }),
            PolySchedule::Geometric { .. } | PolySchedule::Table { .. } => None,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        self.asymptotic_exponent().is_some()
    }

    /// `lim_{x -> inf} s(x) x^{-e}` for polynomial forms.
    fn envelope_limit(&self) -> Option<f64> {
        let e = self.asymptotic_exponent()?;
        Some(match *self {
            PolySchedule::Rational { a, b, p } => {
                if a == 0.0 {
                    0.0
                } else if b > 0.0 && p > 0.0 {
                    a / b
                } else if b == 0.0 || p < 0.0 {
                    a
                } else {
                    a / (1.0 + b)
                }
            }
            PolySchedule::Monomial { a, c, p } => {
                if a == 0.0 {
                    c
                } else if p > 0.0 {
                    a
                } else if p < 0.0 {
                    if e == 0.0 {
                        c
                    } else {
                        a
                    }
                } else {
                    a + c
                }
            }
            _ => unreachable!(),
        })
    }

    /// Smallest `x0` such that `w ln s(x)` is convex on `[x0, inf)`, when known.
    pub(crate) fn log_convex_from(&self, w: f64) -> Option<f64> {
        // ln(1 + b x^p) is concave for p <= 1 and from ((p-1)/b)^(1/p) on for p > 1
        let concave_from = |b: f64, p: f64| if p <= 1.0 { 0.0 } else { ((p - 1.0) / b).powf(1.0 / p) };
        if w == 0.0 {
            return Some(0.0);
        }
        match *self {
            PolySchedule::Rational { a, b, p } => {
                if a > 0.0 && (b == 0.0 || p == 0.0) {
                    Some(0.0)
                } else if a > 0.0 && b > 0.0 && p > 0.0 && w > 0.0 {
                    Some(concave_from(b, p))
                } else {
                    None
                }
            }
            PolySchedule::Monomial { a, c, p } => {
                if a == 0.0 || p == 0.0 {
                    (a + c > 0.0).then_some(0.0)
                } else if a > 0.0 && p > 0.0 && w < 0.0 {
                    Some(if c == 0.0 { 0.0 } else { concave_from(a / c, p) })
                } else if a > 0.0 && p < 0.0 && c == 0.0 && w > 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// True when the sequence is non-increasing in `k`.
    pub fn is_non_increasing(&self) -> bool {
        match *self {
            PolySchedule::Rational { a, b, p } => a == 0.0 || b == 0.0 || p >= 0.0,
            PolySchedule::Monomial { a, p, .. } => a == 0.0 || p <= 0.0,
            PolySchedule::Geometric { q, .. } => q <= 1.0,
            PolySchedule::Table { ref values } => values.windows(2).all(|w| w[1] <= w[0]),
        }
    }

    /// The same form multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            PolySchedule::Rational { a, b, p } => PolySchedule::Rational { a: a * factor, b, p },
            PolySchedule::Monomial { a, c, p } => PolySchedule::Monomial { a: a * factor, c: c * factor, p },
            PolySchedule::Geometric { a, q } => PolySchedule::Geometric { a: a * factor, q },
            PolySchedule::Table { ref values } => PolySchedule::Table {
                values: values.iter().map(|v| v * factor).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    ExponentRule,
    /// Exact closed form (geometric stepsize over constant noise).
    ClosedForm,
    NumericHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SummabilityClass {
    pub sum_diverges: bool,
    pub square_summable: bool,
    pub decided_by: DecidedBy,
}

pub fn classify(s: &PolySchedule) -> SummabilityClass {
    let sum = SeriesTerm::new().times(s, 1.0).verdict();
    let sq = SeriesTerm::new().times(s, 2.0).verdict();
    let decided_by = if sum.decided_by == DecidedBy::ExponentRule && sq.decided_by == DecidedBy::ExponentRule {
        DecidedBy::ExponentRule
    } else {
        DecidedBy::NumericHeuristic
    };
    SummabilityClass {
        sum_diverges: !sum.converges,
        square_summable: sq.converges,
        decided_by,
    }
}

/// A series term `scale * prod_i s_i(k)^{pow_i}` built from schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTerm {
    factors: Vec<(PolySchedule, f64)>,
    scale: f64,
}

impl Default for SeriesTerm {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub converges: bool,
    pub exponent: Option<f64>,
    pub decided_by: DecidedBy,
}

/// Horizons of the numeric heuristic.
const HEURISTIC_HORIZON: u64 = 200_000;

impl SeriesTerm {
    pub fn new() -> Self {
        Self { factors: Vec::new(), scale: 1.0 }
    }

    pub fn times(mut self, s: &PolySchedule, power: f64) -> Self {
        self.factors.push((s.clone(), power));
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        self
    }

    pub fn first_index(&self) -> u64 {
        self.factors.iter().map(|(s, _)| s.first_index()).max().unwrap_or(0)
    }

    pub fn value(&self, k: f64) -> f64 {
        self.factors
            .iter()
            .fold(self.scale, |acc, (s, pw)| acc * s.value(k).powf(*pw))
    }

    /// Combined exponent when every factor is polynomial.
    pub fn exponent(&self) -> Option<f64> {
        let mut e = 0.0;
        for (s, pw) in &self.factors {
            let se = s.asymptotic_exponent()?;
            let contrib = if se == f64::NEG_INFINITY {
                if *pw > 0.0 {
                    f64::NEG_INFINITY
                } else {
                    // division by an identically zero sequence
                    return None;
                }
            } else {
                se * pw
            };
            e += contrib;
        }
        Some(e)
    }

    /// Finite-sum verdict. The boundary exponent `-1` is divergent.
    pub fn verdict(&self) -> Verdict {
        match self.exponent() {
            Some(e) => Verdict {
                converges: e < -1.0,
                exponent: Some(e),
                decided_by: DecidedBy::ExponentRule,
            },
            None => {
                let n = HEURISTIC_HORIZON;
                let first = self.partial_sum(self.first_index().max(1), n);
                let second = self.partial_sum(n + 1, 2 * n);
                let converges = second.is_finite() && second <= 1e-6 * first.abs().max(1.0);
                Verdict {
                    converges,
                    exponent: None,
                    decided_by: DecidedBy::NumericHeuristic,
                }
            }
        }
    }

    /// `sum_{k=from}^{to} term(k)` (inclusive), summed in increasing `k`.
    pub fn partial_sum(&self, from: u64, to: u64) -> f64 {
        (from..=to).map(|k| self.value(k as f64)).sum()
    }

    /// Upper bound on `sum_{k > horizon} term(k)`. Infinite when the series
    /// is not decided convergent by the exponent rule.
    ///
    /// When the term is log-convex on `[horizon, inf)` the midpoint comparison
    /// `term(k) <= int_{k-1/2}^{k+1/2} term` applies; otherwise the bound comes
    /// from a power envelope.
    pub fn tail_upper_bound(&self, horizon: u64) -> f64 {
        let env = match self.envelope(horizon as f64) {
            Some((e, c_hi, _)) if e < -1.0 => c_hi * (horizon.max(1) as f64).powf(e + 1.0) / (-e - 1.0),
            _ => return f64::INFINITY,
        };
        match self.convex_tail_integral(horizon as f64 + 0.5) {
            Some((_, hi)) if self.log_convex_on(horizon) => hi.min(env),
            _ => env,
        }
    }

    /// Lower bound on `sum_{k > horizon} term(k)`, from the trapezoid
    /// comparison when the term is log-convex there and from the envelope otherwise.
    pub fn tail_lower_bound(&self, horizon: u64) -> f64 {
        let env = match self.envelope(horizon as f64 + 1.0) {
            Some((e, _, c_lo)) if e < -1.0 => c_lo * ((horizon + 1) as f64).powf(e + 1.0) / (-e - 1.0),
            Some(_) => return f64::INFINITY,
            None => 0.0,
        };
        match self.convex_tail_integral(horizon as f64) {
            Some((lo, _)) if self.log_convex_on(horizon) => env.max(lo - 0.5 * self.value(horizon as f64)),
            _ => env,
        }
    }

    /// Whether every factor `s^w` has a convex logarithm on `[horizon, inf)`.
    /// A log-convex term tending to zero is convex and decreasing there.
    fn log_convex_on(&self, horizon: u64) -> bool {
        let h = horizon.max(self.first_index()).max(1) as f64;
        self.factors
            .iter()
            .all(|(s, w)| s.log_convex_from(*w).is_some_and(|x0| h >= x0))
    }

    /// Bracket on `int_from^inf term(x) dx`: Gauss-Legendre panels in
    /// `x = from e^t`, then the envelope bounds for what lies beyond.
    fn convex_tail_integral(&self, from: f64) -> Option<(f64, f64)> {
        let from = from.max(1.0);
        let (e, _, _) = self.envelope(from)?;
        if e >= -1.0 {
            return None;
        }
        const WIDTH: f64 = 0.25;
        const T_MAX: f64 = 690.0;
        let (nodes, weights) = gauss_legendre();
        let mut acc = 0.0;
        let mut t = 0.0;
        loop {
            let mut panel = 0.0;
            for (z, w) in nodes.iter().zip(weights) {
                let x = from * (t + 0.5 * WIDTH * (z + 1.0)).exp();
                panel += w * self.value(x) * x;
            }
            acc += 0.5 * WIDTH * panel;
            t += WIDTH;
            let x = from * t.exp();
            let (e, c_hi, c_lo) = self.envelope(x)?;
            let rest_hi = c_hi * x.powf(e + 1.0) / (-e - 1.0);
            if rest_hi <= 1e-17 * acc.max(1e-300) || t >= T_MAX {
                let rest_lo = c_lo * x.powf(e + 1.0) / (-e - 1.0);
                return Some((acc * (1.0 - 1e-13) + rest_lo, acc * (1.0 + 1e-13) + rest_hi));
            }
        }
    }

    /// `(e, c_hi, c_lo)` with `c_lo x^e <= term(x) <= c_hi x^e` for `x >= from`.
    ///
    /// Each factor's ratio `s(x) x^{-e_s}` is monotone for these forms, so its
    /// range over `[from, inf)` is spanned by the value at `from` and the limit.
    fn envelope(&self, from: f64) -> Option<(f64, f64, f64)> {
        let e = self.exponent()?;
        if !e.is_finite() {
            return None;
        }
        let h = from.max(self.first_index() as f64).max(1.0);
        let mut hi = self.scale;
        let mut lo = self.scale;
        for (s, pw) in &self.factors {
            let se = s.asymptotic_exponent()?;
            let at_h = (s.value(h) * h.powf(-se)).powf(*pw);
            let at_inf = s.envelope_limit()?.powf(*pw);
            hi *= at_h.max(at_inf);
            lo *= at_h.min(at_inf);
        }
        Some((e, hi, lo))
    }
}

/// 20-point Gauss-Legendre rule on `[-1, 1]`.
fn gauss_legendre() -> &'static ([f64; 20], [f64; 20]) {
    static RULE: std::sync::OnceLock<([f64; 20], [f64; 20])> = std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        const N: usize = 20;
        let mut x = [0.0; N];
        let mut w = [0.0; N];
        for i in 0..N {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (N as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=N {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = N as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-15 {
                    x[i] = z;
                    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                    break;
                }
            }
        }
        (x, w)
    })
}

/// Partial sum plus tail estimate of a convergent series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub partial: f64,
    pub horizon: u64,
    /// `partial + tail_upper`, never below the true value.
    pub upper: f64,
    /// `partial + tail_lower`, never above the true value.
    pub lower: f64,
}

impl SeriesValue {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Evaluates `sum_{k >= first} term(k)` to absolute accuracy `abs_tol` by
/// extending the partial sum until the integral bracket on the tail is narrow
/// enough (or `max_horizon` is reached).
pub fn series_value(term: &SeriesTerm, abs_tol: f64, max_horizon: u64) -> Result<SeriesValue> {
    let v = term.verdict();
    if !v.converges || v.decided_by != DecidedBy::ExponentRule {
        return Err(Error::Calibration(format!(
            "series is not provably summable (exponent {:?})",
            v.exponent
        )));
    }
    let start = term.first_index().max(1);
    let mut horizon = 1024u64.max(start);
    let mut partial = term.partial_sum(start, horizon);
    loop {
        let upper = partial + term.tail_upper_bound(horizon);
        let lower = partial + term.tail_lower_bound(horizon);
        if upper - lower <= abs_tol || horizon >= max_horizon {
            return Ok(SeriesValue { partial, horizon, upper, lower });
        }
        let next = (horizon * 2).min(max_horizon);
        partial += term.partial_sum(horizon + 1, next);
        horizon = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    Diverges,
    Converges,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub requirement: Requirement,
    pub exponent: Option<f64>,
    pub pass: bool,
    pub decided_by: DecidedBy,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, requirement: Requirement, term: SeriesTerm) {
        let v = term.verdict();
        let pass = match requirement {
            Requirement::Diverges => !v.converges,
            Requirement::Converges => v.converges,
        };
        let warning = (v.decided_by == DecidedBy::NumericHeuristic)
            .then(|| format!("{name}: non-polynomial schedule, verdict is a numeric heuristic"));
        self.checks.push(ConditionCheck {
            name: name.to_string(),
            requirement,
            exponent: v.exponent,
            pass,
            decided_by: v.decided_by,
            warning,
        });
    }
}

pub const SUM_GAMMA: &str = "sum gamma diverges";
pub const SUM_LAMBDA: &str = "sum lambda diverges";
pub const SUM_GAMMA_SQ: &str = "sum gamma^2 converges";
pub const SUM_LAMBDA_SQ_OVER_GAMMA: &str = "sum lambda^2/gamma converges";
pub const SUM_GAMMA_SQ_SIGMA_SQ: &str = "sum gamma^2 sigma^2 converges";
pub const SUM_LAMBDA_MU_SQ: &str = "sum (lambda mu)^2 converges";

/// The four stepsize / weakening-factor conditions for exact convergence.
pub fn check_convergence_conditions(lambda: &PolySchedule, gamma: &PolySchedule) -> ConditionReport {
    let mut r = ConditionReport::default();
    r.push(SUM_GAMMA, Requirement::Diverges, SeriesTerm::new().times(gamma, 1.0));
    r.push(SUM_LAMBDA, Requirement::Diverges, SeriesTerm::new().times(lambda, 1.0));
    r.push(SUM_GAMMA_SQ, Requirement::Converges, SeriesTerm::new().times(gamma, 2.0));
    r.push(
        SUM_LAMBDA_SQ_OVER_GAMMA,
        Requirement::Converges,
        SeriesTerm::new().times(lambda, 2.0).times(gamma, -1.0),
    );
    r
}

/// Attenuated sharing noise must be square summable: `sum (gamma sigma)^2 < inf`.
pub fn check_noise_condition(gamma: &PolySchedule, sigma: &PolySchedule) -> ConditionReport {
    let mut r = ConditionReport::default();
    r.push(
        SUM_GAMMA_SQ_SIGMA_SQ,
        Requirement::Converges,
        SeriesTerm::new().times(gamma, 2.0).times(sigma, 2.0),
    );
    r
}

/// Gradient-noise condition for the stochastic variant: `sum (lambda mu)^2 < inf`.
pub fn check_stochastic_condition(lambda: &PolySchedule, mu: &PolySchedule) -> ConditionReport {
    let mut r = ConditionReport::default();
    r.push(
        SUM_LAMBDA_MU_SQ,
        Requirement::Converges,
        SeriesTerm::new().times(lambda, 2.0).times(mu, 2.0),
    );
    r
}
