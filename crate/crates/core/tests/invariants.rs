use std::fs;
use std::path::PathBuf;

use dpnash::cournot::{
    build_cournot, closed_form_symmetric, cournot_jacobian, fixed_point_residual, solve_centralized, verify_monotonicity_cournot,
    CostModel, Participation, SymmetricMarket,
};
use dpnash::game::{check_strict_monotonicity, AggregateConvention, DecisionProfile, FeasibleBox, GameSpec, Player, PseudoGradientField};
use dpnash::harness::{
    load_config, parse_config, prepare, read_records, read_trajectory_csv, run_experiment, summarize, summarize_metrics,
    ExperimentConfig, RunOptions,
};
use dpnash::network::{build_weights, Adjacency};
use dpnash::solver::{conservation_residual, decision_sum_norm, run, step, AlgorithmVariant, GradientOracle, RunSpec, SolverState};
use dpnash::{PolySchedule, WeightRule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    load_config(&path).unwrap().config
}

fn small(mut cfg: ExperimentConfig, dir: &std::path::Path) -> ExperimentConfig {
    cfg.run.iterations = 300;
    cfg.run.record_every = 50;
    cfg.run.seeds = None;
    cfg.run.seed_count = Some(4);
    cfg.output.directory = dir.to_path_buf();
    cfg
}

fn random_game(rng: &mut ChaCha8Rng, m: usize, d: usize) -> GameSpec {
    let players = (0..m)
        .map(|_| {
            let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..5.0)).collect();
            let own: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 2.0 } else { 0.0 }).collect();
            let agg: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let off: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            Player {
                feasible: FeasibleBox::new(lo, hi).unwrap(),
                field: PseudoGradientField::affine(d, own, agg, off).unwrap(),
            }
        })
        .collect();
    GameSpec::new(players, AggregateConvention::Average).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sum_of_estimates_tracks_sum_of_decisions(
        seed in any::<u64>(),
        m in 2usize..8,
        d in 1usize..4,
        noise_scale in 0.0f64..1e3,
        steps in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let game = random_game(&mut rng, m, d);
        let l = build_weights(&Adjacency::random_connected(m, 0.3, seed).unwrap(), WeightRule::Metropolis).unwrap();
        let mut s = SolverState::init(&game, seed);
        for k in 0..steps {
            let z: Vec<f64> = (0..m * d).map(|_| noise_scale * rng.random_range(-1.0..1.0)).collect();
            let gamma = rng.random_range(0.0..1.0);
            s = step(&s, &game, &l, 0.1 / (1.0 + k as f64), gamma, Some(&z), &GradientOracle::Exact).unwrap();
            let scale = 1.0 + decision_sum_norm(&s) + noise_scale * (m * d) as f64;
            prop_assert!(conservation_residual(&s) <= 1e-12 * scale);
            prop_assert!(s.is_feasible(&game, 0.0));
        }
    }

    #[test]
    fn symmetric_markets_match_closed_form(
        firms in 1usize..6,
        q in 0.5f64..3.0,
        lin in 0.0f64..2.0,
        chi in 0.5f64..3.0,
        p_bar in 5.0f64..20.0,
    ) {
        let p = SymmetricMarket { firms, cost_quadratic: q, cost_linear: lin, price_slope: chi, price_intercept: p_bar, capacity: 100.0 };
        let want = closed_form_symmetric(&p).unwrap();
        let tol = 1e-9;
        let x = solve_centralized(&p.instance().unwrap().to_game().unwrap(), tol, 2_000_000).unwrap();
        for v in x.stacked() {
            prop_assert!((v - want).abs() <= 10.0 * tol * (1.0 + 2.0 * q + chi * (1.0 + firms as f64)), "{} vs {}", v, want);
        }
    }
}

#[test]
fn centralized_solution_is_a_fixed_point() {
    for seed in 0..3 {
        let inst = build_cournot(seed, 20, 7, &Participation::Density(0.4), CostModel::ScaledIdentity).unwrap();
        let game = inst.to_game().unwrap();
        let x = solve_centralized(&game, 1e-9, 5_000_000).unwrap();
        assert!(fixed_point_residual(&game, &x, 1.0).unwrap() <= 1e-9);
        assert!(x.is_feasible(&game, 0.0));
    }
}

#[test]
fn exact_jacobian_matches_finite_differences_and_monotonicity() {
    for (seed, cost) in [(0, CostModel::ScaledIdentity), (1, CostModel::RandomPd), (2, CostModel::ScaledIdentity)] {
        let inst = build_cournot(seed, 6, 3, &Participation::Density(0.5), cost).unwrap();
        let game = inst.to_game().unwrap();
        let jac = cournot_jacobian(&inst);
        let n = game.num_players() * game.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = game.sample_profile(&mut rng);
        let h = 1e-5;
        // pinned coordinates never move, so only free ones are compared
        let free: Vec<usize> = (0..n).filter(|&c| inst.participation[c / inst.markets][c % inst.markets]).collect();
        for &c in &free {
            let mut plus = x.stacked().to_vec();
            plus[c] += h;
            let mut minus = x.stacked().to_vec();
            minus[c] -= h;
            let fp = game.evaluate_phi(&DecisionProfile::new(plus, game.dim()).unwrap()).unwrap();
            let fm = game.evaluate_phi(&DecisionProfile::new(minus, game.dim()).unwrap()).unwrap();
            for &r in &free {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - jac[(r, c)]).abs() < 1e-6, "entry ({r}, {c}): {fd} vs {}", jac[(r, c)]);
            }
        }
        let exact = verify_monotonicity_cournot(&inst);
        let sampled = check_strict_monotonicity(&game, seed, 300, 0.0).unwrap();
        assert!(exact.pass && sampled.pass);
        // the sampled ratio is a Rayleigh quotient of the symmetric part
        assert!(sampled.worst_normalized >= exact.min_eigenvalue - 1e-9);
    }
}

#[test]
fn noise_free_weakening_with_unit_gamma_equals_fixed_baseline() {
    let cfg = config("cournot_dp.toml");
    let p = prepare(&cfg).unwrap();
    let go = |variant, gamma| {
        run(RunSpec {
            game: &p.game,
            coupling: &p.coupling,
            variant,
            lambda: cfg.schedules.lambda.clone(),
            gamma,
            noise: None,
            oracle: GradientOracle::Exact,
            iterations: 500,
            record_every: 50,
            reference: Some(&p.x_star),
            ledger: None,
            init_seed: 3,
        })
        .unwrap()
        .metrics
    };
    let a = go(AlgorithmVariant::DpWeakening, PolySchedule::constant(1.0));
    let b = go(AlgorithmVariant::BaselineFixed, cfg.schedules.gamma.clone());
    assert_eq!(a, b);
}

#[test]
fn outputs_are_deterministic_and_independent_of_workers() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = small(config("cournot_dp.toml"), d1.path());
    let b = small(config("cournot_dp.toml"), d2.path());
    run_experiment(&a, &RunOptions { jobs: Some(1) }).unwrap();
    run_experiment(&b, &RunOptions { jobs: Some(3) }).unwrap();
    for f in ["summary.csv", "x_star.csv", "edges.csv", "instance.toml", "trajectories/run_0002.csv", "ledgers/run_0001.csv"] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn csv_round_trip_and_summary_cross_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(config("cournot_stochastic.toml"), dir.path());
    let records = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let prepared = prepare(&cfg).unwrap();
    let mut in_memory = Vec::new();
    for r in &records {
        let mut m = prepared.execute(r.seed).unwrap().metrics;
        let back = read_trajectory_csv(r.trajectory.as_ref().unwrap()).unwrap();
        m.decision_sum_norm.clear();
        assert_eq!(back, m);
        in_memory.push(m);
    }
    let recomputed = summarize_metrics(&in_memory.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(summarize(&records).unwrap(), recomputed);
    assert_eq!(read_records(&dir.path().join("records.csv")).unwrap(), records);
}

#[test]
fn config_hash_matches_written_config() {
    use sha2::{Digest, Sha256};
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(config("cournot_geometric.toml"), dir.path());
    let records = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let bytes = fs::read(dir.path().join("config.toml")).unwrap();
    let digest = hex::encode(Sha256::digest(&bytes));
    assert!(records.iter().all(|r| r.config_hash == digest));
    let reparsed = parse_config(std::str::from_utf8(&bytes).unwrap()).unwrap().config;
    assert_eq!(reparsed.hash().unwrap(), digest);
}

#[test]
fn ledger_total_matches_trajectory_epsilon() {
    let cfg = config("cournot_dp.toml");
    let p = prepare(&cfg).unwrap();
    let out = p.execute(4).unwrap();
    let ledger = out.ledger.unwrap();
    assert_eq!(ledger.entries().len() as u64, cfg.run.iterations);
    assert_eq!(*out.metrics.eps_spent.last().unwrap(), ledger.cumulative_eps());
    assert!(out.metrics.eps_spent.windows(2).all(|w| w[0] <= w[1]));
    // spent plus the remaining tail bound stays within the infinite-horizon budget
    let total = dpnash::privacy::run_budget_bound(&cfg.schedules.lambda, p.nu.as_ref().unwrap(), 1.0).unwrap();
    assert!(ledger.cumulative_eps() + ledger.tail_bound() <= total + 1e-9);
    assert!(ledger.cumulative_eps() + ledger.tail_bound() >= total - 1e-6);
}
