use rjhmc_tree::data::{Dataset, Targets, Task};
use rjhmc_tree::metrics::*;
use rjhmc_tree::model::{PriorConfig, Split, SplitRule, TreeParams};
use rjhmc_tree::rjsampler::{ChainSample, Move};
use rjhmc_tree::transforms::logit;
use rjhmc_tree::{NodeId, TreeTopology};

fn stump() -> (TreeTopology, NodeId, NodeId) {
    let t = TreeTopology::root_only().grow(NodeId(0)).unwrap();
    let (l, r) = t.node(t.root()).unwrap().children().unwrap();
    (t, l, r)
}

fn regression_params(l: NodeId, r: NodeId, mu: (f64, f64)) -> TreeParams<f64> {
    let mut p = TreeParams::default();
    p.splits.insert(NodeId(0), Split { tau_unc: logit(0.5), rule: SplitRule::Index(0) });
    p.leaf_mu.insert(l, mu.0);
    p.leaf_mu.insert(r, mu.1);
    p.sigma_unc = Some(0.1f64.ln());
    p
}

fn sample(i: usize, burnin: bool, accepted: bool, topo: &TreeTopology, params: &TreeParams<f64>) -> ChainSample {
    ChainSample {
        iteration: i,
        burnin,
        kind: Move::Stay,
        accepted,
        logpost: 0.0,
        n_leaves: topo.n_leaves(),
        topo: topo.clone(),
        params: params.clone(),
        step_size: 0.1,
        n_leapfrog: 1,
        divergences: 0,
    }
}

fn regression_data() -> Dataset<f64> {
    Dataset::from_normalized(vec![0.1, 0.2, 0.8, 0.9], 1, Targets::Real(vec![1.0, 1.0, 3.0, 3.0])).unwrap()
}

#[test]
fn hard_routing_predicts_leaf_means() {
    let (t, l, r) = stump();
    let p = regression_params(l, r, (1.0, 3.0));
    let data = regression_data();
    let prior = PriorConfig::new(0.45, 2.0, 1, 0);
    let pred = predict_tree(&t, &p, &data, &prior, 0.01, Routing::Hard, &data);
    match &pred {
        Predictions::Real { mean, var } => {
            assert_eq!(mean, &vec![1.0, 1.0, 3.0, 3.0]);
            assert!(var.iter().all(|v| (v - 0.01).abs() < 1e-12));
        }
        other => panic!("{other:?}"),
    }
    assert!(pred.metric(&data).abs() < 1e-12);
}

#[test]
fn ensemble_averages_trees() {
    let (t, l, r) = stump();
    let a = regression_params(l, r, (1.0, 3.0));
    let b = regression_params(l, r, (0.0, 2.0));
    let data = regression_data();
    let prior = PriorConfig::new(0.45, 2.0, 1, 0);
    let pred = posterior_predict([(&t, &a), (&t, &b)], &data, &prior, 1e-3, Routing::Hard, &data).unwrap();
    let Predictions::Real { mean, var } = pred else { panic!() };
    assert_eq!(mean, vec![0.5, 0.5, 2.5, 2.5]);
    // sigma^2 plus the spread of the two tree means
    assert!(var.iter().all(|v| (v - (0.01 + 0.25)).abs() < 1e-12));
}

#[test]
fn classification_leaf_probabilities_and_accuracy() {
    let (t, _, _) = stump();
    let mut p = TreeParams::default();
    p.splits.insert(NodeId(0), Split { tau_unc: logit(0.5), rule: SplitRule::Index(0) });
    let data =
        Dataset::from_normalized(vec![0.1, 0.2, 0.3, 0.9], 1, Targets::Labels { y: vec![0, 0, 1, 1], n_classes: 2 })
            .unwrap();
    let prior = PriorConfig::new(0.45, 2.0, 1, 2);
    let pred = predict_tree(&t, &p, &data, &prior, 1e-3, Routing::Hard, &data);
    let Predictions::Class { probs, .. } = &pred else { panic!() };
    // left leaf saw classes (2, 1): posterior mean (3/5, 2/5)
    assert!((probs[0] - 0.6).abs() < 1e-12 && (probs[1] - 0.4).abs() < 1e-12);
    assert!((probs[6] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(pred.argmax(2), Some(0));
    assert!((pred.metric(&data) - 0.75).abs() < 1e-12);
}

#[test]
fn chain_metrics_use_post_burnin_samples() {
    let (t, l, r) = stump();
    let good = regression_params(l, r, (1.0, 3.0));
    let bad = regression_params(l, r, (0.0, 0.0));
    let root = TreeTopology::root_only();
    let mut root_params = TreeParams::default();
    root_params.leaf_mu.insert(NodeId(0), 2.0);
    root_params.sigma_unc = Some(0.0);
    let data = regression_data();
    let prior = PriorConfig::new(0.45, 2.0, 1, 0);
    let samples = vec![
        sample(0, true, false, &root, &root_params),
        sample(1, true, true, &t, &bad),
        sample(2, false, true, &t, &good),
        sample(3, false, false, &t, &good),
    ];
    let m = chain_metrics(&samples, &data, &data, &prior, 1e-3, Routing::Hard).unwrap();
    assert_eq!(m.n_samples, 2);
    assert!(m.test_metric.abs() < 1e-12);
    assert_eq!(m.ave_leaves, 2.0);
    assert_eq!(m.acceptance_rate, 50.0);
    let none = chain_metrics(&samples[..2], &data, &data, &prior, 1e-3, Routing::Hard);
    assert!(matches!(none, Err(MetricsError::NoPostBurnin)));
}

#[test]
fn acceptance_rate_bounds() {
    let (t, l, r) = stump();
    let p = regression_params(l, r, (0.0, 0.0));
    let rejected: Vec<ChainSample> = (0..5).map(|i| sample(i, false, false, &t, &p)).collect();
    assert_eq!(acceptance_rate(&rejected), 0.0);
    let accepted: Vec<ChainSample> = (0..5).map(|i| sample(i, false, true, &t, &p)).collect();
    assert_eq!(acceptance_rate(&accepted), 100.0);
}

#[test]
fn summary_mean_and_sd() {
    let s = MeanSd::of(&[1.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
    assert!(summarize(Task::Regression, Vec::new()).is_err());
}
