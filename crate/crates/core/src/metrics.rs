//! Posterior predictive evaluation and chain summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Targets, Task};
use crate::model::{branch_probs, PriorConfig, TreeParams};
use crate::rjsampler::ChainSample;
use crate::topology::TreeTopology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples to average")]
    NoSamples,
    #[error("no post-burn-in samples")]
    NoPostBurnin,
    #[error("datasets disagree: {0}")]
    Mismatch(String),
}

/// How inputs are routed when predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// Soft splits at the sampler's final sharpness.
    #[default]
    Soft,
    /// Every input follows a single path: right when its split statistic
    /// exceeds the threshold, left otherwise.
    Hard,
}

/// Predictions for a batch of inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Predictions {
    /// Row-major class probabilities, `n_classes` per input.
    Class { probs: Vec<f64>, n_classes: usize },
    /// Predictive mean and variance (including the noise variance).
    Real { mean: Vec<f64>, var: Vec<f64> },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Class { probs, n_classes } => probs.len() / n_classes,
            Predictions::Real { mean, .. } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class with the largest probability, lowest index on ties.
    pub fn argmax(&self, i: usize) -> Option<usize> {
        match self {
            Predictions::Class { probs, n_classes } => {
                let row = &probs[i * n_classes..(i + 1) * n_classes];
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                Some(best)
            }
            Predictions::Real { .. } => None,
        }
    }

    /// Accuracy (classification) or mean squared error (regression).
    pub fn metric(&self, data: &Dataset<f64>) -> f64 {
        assert_eq!(self.len(), data.len(), "one prediction per row");
        match (self, data.targets()) {
            (Predictions::Class { .. }, Targets::Labels { y, .. }) => {
                let hits = y.iter().enumerate().filter(|(i, &c)| self.argmax(*i) == Some(c)).count();
                hits as f64 / y.len() as f64
            }
            (Predictions::Real { mean, .. }, Targets::Real(y)) => {
                mean.iter().zip(y).map(|(m, t)| (m - t) * (m - t)).sum::<f64>() / y.len() as f64
            }
            _ => panic!("prediction kind does not match the dataset task"),
        }
    }
}

/// Path probabilities of every row of `data` (row-major, leaves ascending).
pub fn routing_weights(
    data: &Dataset<f64>,
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    h: f64,
    routing: Routing,
) -> Vec<f64> {
    let order = topo.preorder();
    let leaves = topo.leaves();
    let n_x = data.n_x();
    let weights: Vec<(crate::topology::NodeId, Vec<f64>, f64)> = topo
        .internal_nodes()
        .into_iter()
        .map(|id| (id, params.splits[&id].weights(n_x), params.splits[&id].tau()))
        .collect();
    let split_of = |id| weights.iter().find(|w| w.0 == id).expect("split for internal node");
    let mut out = Vec::with_capacity(data.len() * leaves.len());
    let mut reach = std::collections::BTreeMap::new();
    for i in 0..data.len() {
        let x = data.row(i);
        reach.clear();
        reach.insert(topo.root(), 1.0);
        for &id in &order {
            let p = reach[&id];
            if let Some((l, r)) = topo.node(id).unwrap().children() {
                let (_, w, tau) = split_of(id);
                let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                let (pr, pl) = match routing {
                    Routing::Soft => branch_probs(s, *tau, h),
                    Routing::Hard if s > *tau => (1.0, 0.0),
                    Routing::Hard => (0.0, 1.0),
                };
                reach.insert(l, p * pl);
                reach.insert(r, p * pr);
            }
        }
        out.extend(leaves.iter().map(|id| reach[id]));
    }
    out
}

/// Predictions of one tree. Classification leaves use the posterior mean
/// of their class proportions given the (soft) training counts.
pub fn predict_tree(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    train: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    h: f64,
    routing: Routing,
    inputs: &Dataset<f64>,
) -> Predictions {
    let n_leaf = topo.n_leaves();
    let phi = routing_weights(inputs, topo, params, h, routing);
    match train.targets() {
        Targets::Labels { y, n_classes } => {
            let m = *n_classes;
            let train_phi = routing_weights(train, topo, params, h, routing);
            let mut counts = vec![0.0; n_leaf * m];
            for (i, &c) in y.iter().enumerate() {
                for k in 0..n_leaf {
                    counts[k * m + c] += train_phi[i * n_leaf + k];
                }
            }
            let a_tot: f64 = prior.class_alpha.iter().sum();
            let mut leaf_probs = vec![0.0; n_leaf * m];
            for k in 0..n_leaf {
                let total: f64 = counts[k * m..(k + 1) * m].iter().sum::<f64>() + a_tot;
                for c in 0..m {
                    leaf_probs[k * m + c] = (counts[k * m + c] + prior.class_alpha[c]) / total;
                }
            }
            let mut probs = vec![0.0; inputs.len() * m];
            for i in 0..inputs.len() {
                for k in 0..n_leaf {
                    let w = phi[i * n_leaf + k];
                    for c in 0..m {
                        probs[i * m + c] += w * leaf_probs[k * m + c];
                    }
                }
            }
            Predictions::Class { probs, n_classes: m }
        }
        Targets::Real(_) => {
            let mu: Vec<f64> = topo.leaves().iter().map(|id| params.leaf_mu[id]).collect();
            let s2 = params.sigma().expect("regression tree has sigma").powi(2);
            let mut mean = Vec::with_capacity(inputs.len());
            let mut var = Vec::with_capacity(inputs.len());
            for i in 0..inputs.len() {
                let w = &phi[i * n_leaf..(i + 1) * n_leaf];
                let m1: f64 = w.iter().zip(&mu).map(|(a, b)| a * b).sum();
                let m2: f64 = w.iter().zip(&mu).map(|(a, b)| a * b * b).sum();
                mean.push(m1);
                var.push(s2 + (m2 - m1 * m1).max(0.0));
            }
            Predictions::Real { mean, var }
        }
    }
}

/// Monte Carlo average of the predictions of `trees`.
pub fn posterior_predict<'s>(
    trees: impl IntoIterator<Item = (&'s TreeTopology, &'s TreeParams<f64>)>,
    train: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    h: f64,
    routing: Routing,
    inputs: &Dataset<f64>,
) -> Result<Predictions, MetricsError> {
    let mut acc: Option<Predictions> = None;
    let mut n = 0usize;
    for (topo, params) in trees {
        let p = predict_tree(topo, params, train, prior, h, routing, inputs);
        n += 1;
        acc = Some(match (acc, p) {
            (None, Predictions::Real { mean, var }) => {
                // second moments are accumulated in `var` until the end
                let var = var.iter().zip(&mean).map(|(v, m)| v + m * m).collect();
                Predictions::Real { mean, var }
            }
            (None, p) => p,
            (Some(Predictions::Class { mut probs, n_classes }), Predictions::Class { probs: q, .. }) => {
                probs.iter_mut().zip(&q).for_each(|(a, b)| *a += b);
                Predictions::Class { probs, n_classes }
            }
            (Some(Predictions::Real { mut mean, mut var }), Predictions::Real { mean: m, var: v }) => {
                for i in 0..mean.len() {
                    mean[i] += m[i];
                    var[i] += v[i] + m[i] * m[i];
                }
                Predictions::Real { mean, var }
            }
            _ => unreachable!("all trees share the training task"),
        });
    }
    let nf = n as f64;
    match acc.ok_or(MetricsError::NoSamples)? {
        Predictions::Class { probs, n_classes } => {
            Ok(Predictions::Class { probs: probs.into_iter().map(|p| p / nf).collect(), n_classes })
        }
        Predictions::Real { mean, var } => {
            let mean: Vec<f64> = mean.into_iter().map(|m| m / nf).collect();
            let var = var.into_iter().zip(&mean).map(|(s, m)| (s / nf - m * m).max(0.0)).collect();
            Ok(Predictions::Real { mean, var })
        }
    }
}

/// Summary of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    /// Mean over post-burn-in samples of each sample's own metric; this is
    /// the figure comparable to published per-chain results.
    pub train_metric: f64,
    pub test_metric: f64,
    /// Metric of the averaged (ensemble) prediction.
    pub train_metric_ensemble: f64,
    pub test_metric_ensemble: f64,
    pub ave_leaves: f64,
    /// Percentage of accepted proposals over the whole chain.
    pub acceptance_rate: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `accuracy` or `mse`.
    pub metric: String,
    pub chains: Vec<ChainMetrics>,
    pub train_metric: MeanSd,
    pub test_metric: MeanSd,
    pub train_metric_ensemble: MeanSd,
    pub test_metric_ensemble: MeanSd,
    pub ave_leaves: MeanSd,
    pub acceptance_rate: MeanSd,
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::Regression => "mse",
    }
}

/// Percentage of accepted proposals.
pub fn acceptance_rate(samples: &[ChainSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    100.0 * samples.iter().filter(|s| s.accepted).count() as f64 / samples.len() as f64
}

/// Metrics of one chain; burn-in samples only count towards acceptance.
pub fn chain_metrics(
    samples: &[ChainSample],
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    h: f64,
    routing: Routing,
) -> Result<ChainMetrics, MetricsError> {
    if train.task() != test.task() || train.n_x() != test.n_x() {
        return Err(MetricsError::Mismatch("train and test differ in task or input width".into()));
    }
    let post: Vec<&ChainSample> = samples.iter().filter(|s| !s.burnin).collect();
    if post.is_empty() {
        return Err(MetricsError::NoPostBurnin);
    }
    let n = post.len() as f64;
    let mut train_sum = 0.0;
    let mut test_sum = 0.0;
    let mut cache: Option<(&ChainSample, f64, f64)> = None;
    for s in &post {
        // rejected iterations repeat the previous tree
        let (tr, te) = match cache {
            Some((prev, tr, te)) if prev.topo == s.topo && prev.params == s.params => (tr, te),
            _ => {
                let tr = predict_tree(&s.topo, &s.params, train, prior, h, routing, train).metric(train);
                let te = predict_tree(&s.topo, &s.params, train, prior, h, routing, test).metric(test);
                (tr, te)
            }
        };
        cache = Some((s, tr, te));
        train_sum += tr;
        test_sum += te;
    }
    let trees = || post.iter().map(|s| (&s.topo, &s.params));
    let train_ens = posterior_predict(trees(), train, prior, h, routing, train)?.metric(train);
    let test_ens = posterior_predict(trees(), train, prior, h, routing, test)?.metric(test);
    Ok(ChainMetrics {
        train_metric: train_sum / n,
        test_metric: test_sum / n,
        train_metric_ensemble: train_ens,
        test_metric_ensemble: test_ens,
        ave_leaves: post.iter().map(|s| s.n_leaves as f64).sum::<f64>() / n,
        acceptance_rate: acceptance_rate(samples),
        n_samples: post.len(),
    })
}

/// Report over independent chains.
pub fn compute_report(
    chains: &[Vec<ChainSample>],
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    h: f64,
    routing: Routing,
) -> Result<MetricsReport, MetricsError> {
    let per: Vec<ChainMetrics> =
        chains.iter().map(|c| chain_metrics(c, train, test, prior, h, routing)).collect::<Result<_, _>>()?;
    summarize(train.task(), per)
}

/// Across-chain mean and standard deviation of per-chain metrics.
pub fn summarize(task: Task, chains: Vec<ChainMetrics>) -> Result<MetricsReport, MetricsError> {
    if chains.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let col = |f: fn(&ChainMetrics) -> f64| MeanSd::of(&chains.iter().map(f).collect::<Vec<_>>());
    Ok(MetricsReport {
        metric: metric_name(task).to_string(),
        train_metric: col(|c| c.train_metric),
        test_metric: col(|c| c.test_metric),
        train_metric_ensemble: col(|c| c.train_metric_ensemble),
        test_metric_ensemble: col(|c| c.test_metric_ensemble),
        ave_leaves: col(|c| c.ave_leaves),
        acceptance_rate: col(|c| c.acceptance_rate),
        chains,
    })
}
