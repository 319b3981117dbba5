//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test --release --test acceptance`.

use std::path::PathBuf;
use std::time::Instant;

use dpnash::cournot::{
    build_cournot, closed_form_symmetric, cournot_cost, cournot_pseudo_gradient, solve_centralized, CostModel,
    Participation, SymmetricMarket,
};
use dpnash::game::{AggregateConvention, DecisionProfile, FeasibleBox, GameSpec, Player, PseudoGradientField};
use dpnash::harness::{compare_algorithms, load_config, prepare, ExperimentConfig, Metric, RunOptions};
use dpnash::privacy::{calibrate_noise, cumulative_budget, one_step_sensitivity_probe, run_budget_bound, sample_laplace};
use dpnash::schedule::{check_convergence_conditions, series_value, Requirement, SeriesTerm};
use dpnash::solver::{run, AlgorithmVariant, GradientOracle, RunSpec, SolverState};
use dpnash::{network, PolySchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())).config
}

fn lambda_v() -> PolySchedule {
    PolySchedule::rational(0.1, 0.1, 1.0)
}

fn gamma_v() -> PolySchedule {
    PolySchedule::rational(1.0, 0.1, 0.9)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let p = prepare(&config("cournot_dp.toml")).unwrap();
    let mut worst = 0.0_f64;
    let mut records = 0;
    let mut failures = 0;
    for (_, r) in p.execute_all(None).unwrap() {
        let m = r.unwrap().metrics;
        for i in 0..m.len() {
            let ratio = m.conservation_residual[i] / (1.0 + m.decision_sum_norm[i]);
            worst = worst.max(ratio);
            records += 1;
        }
        failures += (m.iterations.last() != Some(&20_000)) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-8 && failures == 0 && secs < 120.0,
        detail: format!("max residual/(1+|sum x|) = {worst:.3e} over {records} records, {secs:.1} s"),
    }
}

fn oracle_equivalence() -> Outcome {
    let inst = SymmetricMarket::two_firm().instance().unwrap();
    let game = inst.to_game().unwrap();
    let closed = closed_form_symmetric(&SymmetricMarket::two_firm()).unwrap();
    let central = solve_centralized(&game, 1e-9, 1_000_000).unwrap();
    let central_err = central.stacked().iter().map(|v| (v - 2.0).abs()).fold(0.0, f64::max);
    let l = network::build_weights(&network::Adjacency::path(2).unwrap(), dpnash::WeightRule::Uniform { w: 0.5 }).unwrap();
    let out = run(RunSpec {
        game: &game,
        coupling: &l,
        variant: AlgorithmVariant::DpWeakening,
        lambda: lambda_v(),
        gamma: gamma_v(),
        noise: None,
        oracle: GradientOracle::Exact,
        iterations: 10_000,
        record_every: 10_000,
        reference: None,
        ledger: None,
        init_seed: 7,
    })
    .unwrap();
    let x = out.final_state.decisions();
    let run_err = x.stacked().iter().map(|v| (v - 2.0).abs()).fold(0.0, f64::max);
    Outcome {
        pass: closed == 2.0 && central_err <= 1e-6 && run_err <= 1e-3,
        detail: format!("closed form {closed}, centralized err {central_err:.2e}, algorithm err {run_err:.2e}"),
    }
}

fn convergence_shape(name: &str, fraction: f64) -> Outcome {
    let p = prepare(&config(name)).unwrap();
    let runs: Vec<_> = p.execute_all(None).unwrap().into_iter().map(|(_, r)| r.unwrap().metrics).collect();
    let at = |k: u64| median(&mut runs.iter().map(|m| m.gap_at(k).unwrap()).collect::<Vec<_>>());
    let (g0, g1k, gend) = (at(0), at(1_000), at(20_000));
    Outcome {
        pass: gend < fraction * g0 && gend < g1k,
        detail: format!(
            "median gap k=0 {g0:.4}, k=1e3 {g1k:.4}, k=2e4 {gend:.4} ({:.2}% of initial, limit {:.0}%)",
            100.0 * gend / g0,
            100.0 * fraction
        ),
    }
}

fn accountant() -> Outcome {
    let lambda = PolySchedule::monomial(1.0, -1.0, 0.0);
    let shape = PolySchedule::monomial(1.0, 0.3, 0.0);
    let phi = series_value(&SeriesTerm::new().times(&PolySchedule::monomial(1.0, -1.3, 0.0), 1.0), 1e-9, 1 << 27).unwrap();
    let mut pass = (phi.upper - 3.93).abs() <= 0.01;
    let mut detail = format!("phi = {:.8}", phi.upper);
    for eps in [0.5, 1.0, 10.0] {
        let c = calibrate_noise(&lambda, &shape, eps, 1.0).unwrap();
        let b = cumulative_budget(&lambda, &c.nu, 1.0, 1_000_000).unwrap();
        let total = b.partial + b.tail_bound;
        pass &= b.partial <= eps && (total - eps).abs() <= 1e-3;
        detail += &format!("; eps {eps}: partial {:.6}, total {:.9}", b.partial, total);
    }
    Outcome { pass, detail }
}

fn random_affine_field(rng: &mut ChaCha8Rng, d: usize) -> PseudoGradientField {
    let mut mat = |scale: f64| (0..d * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
    let own = mat(3.0);
    let agg = mat(3.0);
    let offset = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
    PseudoGradientField::affine(d, own, agg, offset).unwrap()
}

fn sensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut failures = 0;
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..6);
        let d = rng.random_range(1..5);
        let players: Vec<Player> = (0..m)
            .map(|_| {
                let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..0.0)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..10.0)).collect();
                Player {
                    feasible: FeasibleBox::new(lo, hi).unwrap(),
                    field: random_affine_field(&mut rng, d),
                }
            })
            .collect();
        let a = GameSpec::new(players, AggregateConvention::Average).unwrap();
        let i = rng.random_range(0..m);
        let b = a.with_field(i, random_affine_field(&mut rng, d)).unwrap();
        let x: Vec<Vec<f64>> = a.players().iter().map(|p| p.feasible.sample(&mut rng)).collect();
        let state = SolverState::from_decisions(&a, x).unwrap();
        let lambda = rng.random_range(0.0..2.0);
        let c_bar = rng.random_range(0.1..10.0);
        let probe = one_step_sensitivity_probe(&a, &b, i, &state, lambda, c_bar).unwrap();
        failures += (!probe.pass) as usize;
        if probe.bound > 0.0 {
            worst = worst.max(probe.measured / probe.bound);
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{failures} failures in 1000 pairs, max measured/bound {worst:.4}"),
    }
}

fn laplace_cdf(x: f64, nu: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / nu).exp()
    } else {
        1.0 - 0.5 * (-x / nu).exp()
    }
}

fn sampler() -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (j, nu) in [0.5, 1.0, 5.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + j as u64);
        let n = 100_000;
        let mut xs = vec![0.0; n];
        sample_laplace(nu, &mut xs, &mut rng).unwrap();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = laplace_cdf(x, nu);
                (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
            })
            .fold(0.0, f64::max);
        let crit = 1.6276 / (n as f64).sqrt();
        let mut big = vec![0.0; 1_000_000];
        sample_laplace(nu, &mut big, &mut rng).unwrap();
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        let var = big.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (big.len() - 1) as f64;
        let rel = var / (2.0 * nu * nu) - 1.0;
        pass &= d < crit && rel.abs() <= 0.025;
        detail.push(format!("nu {nu}: KS {d:.5} (crit {crit:.5}), var/2nu^2-1 {rel:+.4}"));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
    }
}

fn comparison() -> Outcome {
    let dp = config("cournot_dp.toml");
    let fixed = config("cournot_fixed.toml");
    let geo = config("cournot_geometric.toml");
    let table = compare_algorithms(&[dp.clone(), fixed, geo.clone()], Metric::EquilibriumGap, &RunOptions::default()).unwrap();
    let last = |label: &str| table.group(label).unwrap().stats.last().unwrap().median;
    let (g_dp, g_fixed, g_geo) = (last("dp_weakening"), last("baseline_fixed"), last("baseline_geometric"));
    let budget = |c: &ExperimentConfig| {
        let nu = c.noise_schedule().unwrap().unwrap();
        let lambda = c.algorithm.lambda_schedule(&c.schedules.lambda);
        run_budget_bound(&lambda, &nu, c.privacy.as_ref().unwrap().c_bar).unwrap()
    };
    let (e_dp, e_geo) = (budget(&dp), budget(&geo));
    let matched = (e_dp - e_geo).abs() <= 1e-6 * e_dp;
    Outcome {
        pass: matched && g_dp < g_geo && g_dp < g_fixed,
        detail: format!(
            "final median gap dp {g_dp:.4}, fixed {g_fixed:.4}, geometric {g_geo:.4}; total eps dp {e_dp:.6}, geometric {e_geo:.6}"
        ),
    }
}

/// Exponent of `a_k` estimated from the last two dyadic block sums below `n`.
fn block_exponent(term: &SeriesTerm, n: u64) -> f64 {
    let j = 63 - n.leading_zeros() as u64;
    let block = |j: u64| term.partial_sum(1 << (j - 1), (1 << j) - 1);
    (block(j) / block(j - 1)).log2() - 1.0
}

fn validator() -> Outcome {
    let cases = [
        ("gamma ~ k^-0.9", gamma_v(), true),
        ("gamma ~ k^-1", PolySchedule::rational(1.0, 0.1, 1.0), false),
        ("gamma ~ k^-0.4", PolySchedule::rational(1.0, 0.1, 0.4), false),
    ];
    let lambda = lambda_v();
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, gamma, want) in cases {
        let r = check_convergence_conditions(&lambda, &gamma);
        let terms = [
            SeriesTerm::new().times(&gamma, 1.0),
            SeriesTerm::new().times(&lambda, 1.0),
            SeriesTerm::new().times(&gamma, 2.0),
            SeriesTerm::new().times(&lambda, 2.0).times(&gamma, -1.0),
        ];
        let mut confirmed = true;
        for (check, term) in r.checks.iter().zip(&terms) {
            // a numeric exponent below -1 - 0.02 counts as convergent
            let numeric_converges = block_exponent(term, 1_000_000) < -1.02;
            let wants_convergence = check.requirement == Requirement::Converges;
            confirmed &= check.pass == (numeric_converges == wants_convergence);
        }
        pass &= r.all_pass() == want && confirmed;
        detail.push(format!(
            "{name}: {} (numeric {})",
            if r.all_pass() { "pass" } else { "fail" },
            if confirmed { "agrees" } else { "DISAGREES" }
        ));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
    }
}

fn gradient_fidelity() -> Outcome {
    let mut worst = 0.0_f64;
    let mut points = 0;
    for seed in 0..10 {
        let inst = build_cournot(seed, 20, 7, &Participation::Density(0.4), CostModel::ScaledIdentity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for _ in 0..10 {
            let blocks: Vec<Vec<f64>> = (0..inst.firms)
                .map(|i| {
                    (0..inst.markets)
                        .map(|j| {
                            if inst.participation[i][j] {
                                rng.random_range(0.05..0.95) * inst.capacity[i][j]
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let x = DecisionProfile::from_blocks(&blocks).unwrap();
            let u = x.average();
            for i in 0..inst.firms {
                let f = cournot_pseudo_gradient(&inst, i, x.block(i), &u).unwrap();
                for (j, &fj) in f.iter().enumerate() {
                    let h = 1e-4;
                    let mut plus = x.clone();
                    plus.block_mut(i)[j] += h;
                    let mut minus = x.clone();
                    minus.block_mut(i)[j] -= h;
                    let fd = (cournot_cost(&inst, i, &plus).unwrap() - cournot_cost(&inst, i, &minus).unwrap()) / (2.0 * h);
                    let rel = (fj - fd).abs() / fj.abs().max(fd.abs()).max(1.0);
                    worst = worst.max(rel);
                }
            }
            points += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max relative error {worst:.2e} over {points} points in 10 instances"),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 conservation invariant", conservation),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 convergence under sharing noise", || convergence_shape("cournot_dp.toml", 0.10)),
        ("4 stochastic variant", || convergence_shape("cournot_stochastic.toml", 0.15)),
        ("5 privacy accountant", accountant),
        ("6 sensitivity bound", sensitivity),
        ("7 Laplace sampler", sampler),
        ("8 comparative accuracy", comparison),
        ("9 schedule validator", validator),
        ("10 gradient fidelity", gradient_fidelity),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let o = f();
        println!(
            "{} criterion {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += (!o.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
