use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rjhmc_tree::data::{Dataset, Targets, Task};
use rjhmc_tree::model::{log_posterior, sample_params, PriorConfig, Split, SplitRule, TreeParams, Variant};
use rjhmc_tree::nuts::NutsConfig;
use rjhmc_tree::rjsampler::*;
use rjhmc_tree::topology::TreeTopology;
use rjhmc_tree::transforms::logit;

fn config(variant: Variant, moves: MoveProbs) -> SamplerConfig {
    SamplerConfig {
        variant,
        moves,
        burnin_moves: None,
        k: 1,
        n_burnin: 0,
        h_init: 0.05,
        h_final: 0.05,
        warmup: 30,
        nuts: NutsConfig::default(),
        max_internal: None,
        prior_only: false,
    }
}

fn classification(x: Vec<f64>, n_x: usize, y: Vec<usize>, m: usize) -> Dataset<f64> {
    Dataset::from_normalized(x, n_x, Targets::Labels { y, n_classes: m }).unwrap()
}

fn split(tau: f64, rule: SplitRule<f64>) -> Split<f64> {
    Split { tau_unc: logit(tau), rule }
}

#[test]
fn stay_keeps_the_tree() {
    let prior = PriorConfig::new(0.45, 2.0, 2, 2);
    let topo = TreeTopology::root_only().grow(TreeTopology::root_only().root()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = sample_params(&topo, &prior, Variant::Df, Task::Classification, &mut rng);
    let moves = MoveProbs { grow: 0.0, prune: 0.0, stay: 1.0 };
    for _ in 0..20 {
        let (t, p, prop) =
            propose_topology(&topo, &params, &moves, &prior, Variant::Df, Task::Classification, None, &mut rng);
        assert_eq!(t, topo);
        assert_eq!(p, params);
        assert_eq!(prop.kind, Move::Stay);
        assert_eq!(prop.log_proposal_ratio, 0.0);
    }
}

#[test]
fn grow_from_root_ratio_is_n_x() {
    // p_prune * 1 / (p_grow * 1 * 1 * 1/2) = 2
    let prior = PriorConfig::new(0.45, 2.0, 2, 2);
    let topo = TreeTopology::root_only();
    let params = TreeParams::default();
    let moves = MoveProbs::default();
    let (t, p, prop) =
        grow_move(&topo, &params, topo.root(), split(0.3, SplitRule::Index(1)), None, &moves, &prior);
    assert!((prop.log_proposal_ratio - 2f64.ln()).abs() < 1e-15);
    let (back_t, back_p, back) = prune_move(&t, &p, topo.root(), &moves, &prior);
    assert_eq!(back.log_proposal_ratio, -prop.log_proposal_ratio);
    assert_eq!(back_p, params);
    assert!(back_t.is_isomorphic(&topo));
}

#[test]
fn prune_on_root_only_is_stay() {
    let prior = PriorConfig::new(0.45, 2.0, 2, 2);
    let topo = TreeTopology::root_only();
    let moves = MoveProbs { grow: 0.0, prune: 1.0, stay: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, _, prop) = propose_topology(
        &topo,
        &TreeParams::default(),
        &moves,
        &prior,
        Variant::Df,
        Task::Classification,
        None,
        &mut rng,
    );
    assert_eq!(prop.kind, Move::Stay);
    assert_eq!(prop.log_proposal_ratio, 0.0);
}

#[test]
fn regression_grow_carries_leaf_mean_left() {
    let prior = PriorConfig::new(0.45, 2.0, 1, 0);
    let root = TreeTopology::root_only();
    let mut params = TreeParams::default();
    params.leaf_mu.insert(root.root(), 1.5);
    params.sigma_unc = Some(0.0);
    let (t, p, prop) =
        grow_move(&root, &params, root.root(), split(0.5, SplitRule::Index(0)), Some(-0.7), &MoveProbs::default(), &prior);
    let (l, r) = t.node(root.root()).unwrap().children().unwrap();
    assert_eq!(p.leaf_mu[&l], 1.5);
    assert_eq!(p.leaf_mu[&r], -0.7);
    // the mean draw contributes its prior density to the ratio
    let expected = (0.35f64.ln() - 0.0) - (0.35f64.ln() - 0.0 + prior.log_prior_mu(-0.7) + prior.log_prior_rule(&SplitRule::Index(0)));
    assert!((prop.log_proposal_ratio - expected).abs() < 1e-14);
    let (_, back, prune) = prune_move(&t, &p, root.root(), &MoveProbs::default(), &prior);
    assert_eq!(back, params);
    assert_eq!(prune.u_mu, Some(-0.7));
}

#[test]
fn max_internal_caps_growth() {
    let prior = PriorConfig::new(0.95, 0.0, 1, 2);
    let moves = MoveProbs { grow: 1.0, prune: 0.0, stay: 0.0 };
    let topo = TreeTopology::root_only().grow(TreeTopology::root_only().root()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = sample_params(&topo, &prior, Variant::Df, Task::Classification, &mut rng);
    let (_, _, prop) =
        propose_topology(&topo, &params, &moves, &prior, Variant::Df, Task::Classification, Some(1), &mut rng);
    assert_eq!(prop.kind, Move::Stay);
}

#[test]
fn full_acceptance_matches_term_by_term_sum() {
    // 3-leaf tree shrinking to a 2-leaf tree
    let data = classification(vec![0.1, 0.2, 0.45, 0.6, 0.9, 0.95], 1, vec![0, 0, 1, 1, 0, 1], 2);
    let prior = PriorConfig::new(0.45, 2.0, 1, 2);
    let root = TreeTopology::root_only();
    let t2 = root.grow(root.root()).unwrap();
    let (_, right) = t2.node(root.root()).unwrap().children().unwrap();
    let t3 = t2.grow(right).unwrap();
    let mut p3 = TreeParams::default();
    p3.splits.insert(root.root(), split(0.4, SplitRule::Index(0)));
    p3.splits.insert(right, split(0.8, SplitRule::Index(0)));
    let mut p3b = p3.clone();
    p3b.splits.get_mut(&right).unwrap().tau_unc = logit(0.75);
    let (t2b, p2b, prop) = prune_move(&t3, &p3b, right, &MoveProbs::default(), &prior);
    let mut p2_star = p2b.clone();
    p2_star.splits.get_mut(&root.root()).unwrap().tau_unc = logit(0.5);

    let h = 0.1;
    let lp = |t: &TreeTopology, p: &TreeParams<f64>| log_posterior(&data, t, p, &prior, h, false);
    let (x, x1, x2, xs) = (lp(&t3, &p3), lp(&t3, &p3b), lp(&t2b, &p2b), lp(&t2b, &p2_star));
    let got = log_accept_full(x, xs, [x, x1, x2, xs], prop.log_proposal_ratio);

    // pi_n(x*) pi*_n(x'') pi*_m(x) q_nm / (pi_m(x) pi*_n(x*) pi*_m(x') q_mn), pi* = pi
    let q_nm_over_q_mn = {
        // reverse grow of the pruned node: pick 1 of 2 leaves, draw tau (density 1) and kappa (mass 1)
        let forward = 0.35f64.ln() - (1f64).ln(); // prune: 1 prunable node in t3
        let reverse = 0.35f64.ln() - (2f64).ln();
        reverse - forward
    };
    let expected = (xs + x2 + x + q_nm_over_q_mn) - (x + xs + x1);
    assert!((got - expected.min(0.0)).abs() < 1e-12, "{got} vs {expected}");
    assert!((prop.log_proposal_ratio - q_nm_over_q_mn).abs() < 1e-15);
}

#[test]
fn acceptance_helpers_clamp_and_cancel() {
    assert_eq!(log_accept_burnin(-10.0, -1.0, 0.0), 0.0);
    assert_eq!(log_accept_burnin(-3.0, -3.0, 0.0), 0.0);
    assert_eq!(log_accept_full(-2.0, -2.0, [-2.0; 4], 0.0), 0.0);
    // stay with pi* = pi: x'' = x', so every intermediate term cancels
    let (x, x1, xs) = (-5.0, -7.5, -9.0);
    assert_eq!(log_accept_full(x, xs, [x, x1, x1, xs], 0.0), 0.0);
    // both rules agree when the intermediate terms cancel pairwise
    let a = log_accept_full(x, xs, [1.0, 2.0, 2.0, 1.0], 0.3);
    assert!((a - log_accept_burnin(x, xs, 0.3)).abs() < 1e-15);
    for v in [-1e300, -50.0, 0.0, 50.0] {
        let a = log_accept_full(v, -v, [v, -v, v, -v], v);
        assert!(!a.is_nan() && a <= 0.0);
    }
}

#[test]
fn stay_only_root_classification_chain_is_constant() {
    let data = classification(vec![0.1, 0.5, 0.9], 1, vec![0, 1, 0], 2);
    let prior = PriorConfig::new(0.45, 2.0, 1, 2);
    let cfg = config(Variant::Df, MoveProbs { grow: 0.0, prune: 0.0, stay: 1.0 });
    let samples = run_chain(&data, &prior, cfg, 30, ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(samples.len(), 30);
    for s in &samples {
        assert!(s.accepted);
        assert_eq!(s.n_leaves, 1);
        assert_eq!(s.topo, TreeTopology::root_only());
        assert_eq!(s.logpost, samples[0].logpost);
    }
}

#[test]
fn rejection_restores_state_and_keys_match() {
    let x: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
    let y: Vec<f64> = x.iter().map(|&v| if v < 0.5 { -1.0 } else { 1.0 }).collect();
    let data = Dataset::from_normalized(x, 1, Targets::Real(y)).unwrap();
    let prior = PriorConfig::new(0.9, 0.5, 1, 0);
    let mut cfg = config(Variant::Dfi, MoveProbs::default());
    cfg.n_burnin = 10;
    let mut chain = Chain::new(&data, &prior, cfg, ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (mut saw_reject, mut saw_accept) = (false, false);
    for _ in 0..60 {
        let before = chain.state().clone();
        let s = chain.step().unwrap();
        let after = chain.state();
        if s.accepted {
            saw_accept = true;
        } else {
            saw_reject = true;
            assert_eq!(&before, after);
        }
        after.params.check(&after.topo, Variant::Dfi, Task::Regression, 1).unwrap();
        let fresh = log_posterior(&data, &after.topo, &after.params, &prior, 0.05, false);
        assert!((fresh - after.logpost).abs() < 1e-10);
        assert!(after.adapt.step_size > 0.0);
    }
    assert!(saw_reject && saw_accept);
}

#[test]
fn index_sweep_prefers_the_separating_dimension() {
    // dimension 0 separates the classes, dimension 1 is noise
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..40 {
        let c = i % 2;
        x.push(if c == 0 { 0.1 + 0.3 * (i as f64 / 40.0) } else { 0.6 + 0.3 * (i as f64 / 40.0) });
        x.push(rand::Rng::random::<f64>(&mut rng));
        y.push(c);
    }
    let data = classification(x, 2, y, 2);
    let prior = PriorConfig::new(0.45, 2.0, 2, 2);
    let root = TreeTopology::root_only();
    let topo = root.grow(root.root()).unwrap();
    let mut params = TreeParams::default();
    params.splits.insert(root.root(), split(0.5, SplitRule::Index(1)));
    let state = TreeState { topo, params, logpost: 0.0, adapt: Default::default() };
    let mut cfg = config(Variant::Df, MoveProbs { grow: 0.0, prune: 0.0, stay: 1.0 });
    cfg.h_init = 0.01;
    cfg.h_final = 0.01;
    let mut chain = Chain::from_state(&data, &prior, cfg, state, ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut hits = 0;
    let n = 300;
    for _ in 0..n {
        let s = chain.step().unwrap();
        if s.params.splits[&root.root()].rule == SplitRule::Index(0) {
            hits += 1;
        }
    }
    assert!(hits as f64 / n as f64 > 0.9, "{hits}/{n}");
}

#[test]
fn same_seed_same_chain() {
    let data = classification(vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.2, 0.8, 0.4], 2, vec![0, 1, 1, 0], 2);
    let prior = PriorConfig::new(0.6, 1.0, 2, 2);
    let mut cfg = config(Variant::Dfi, MoveProbs::default());
    cfg.n_burnin = 5;
    let a = run_chain(&data, &prior, cfg.clone(), 25, ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = run_chain(&data, &prior, cfg, 25, ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
