//! Soft decision trees: path probabilities, likelihoods, priors and the
//! unconstrained log-posterior with its analytical gradient.
//!
//! Each internal node routes a point to its right child with probability
//! `psi = logistic((s - tau) / h)`, where `s` is either one input coordinate
//! (`Variant::Df`) or a simplex-weighted combination of all of them
//! (`Variant::Dfi`). The probability of reaching leaf `k` is the product of
//! the branch probabilities along its path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Targets, Task};
use crate::scalar::Scalar;
use crate::special::{digamma, ln_gamma};
use crate::topology::{NodeId, TreeTopology};
use crate::transforms::{
    logistic, logistic_log_jacobian, logit, stickbreak_constrain, stickbreak_unconstrain, StickBreaking,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Discrete split dimension per internal node.
    #[serde(rename = "hmc-df")]
    Df,
    /// Simplex over input dimensions per internal node.
    #[serde(rename = "hmc-dfi")]
    Dfi,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Df => "hmc-df",
            Variant::Dfi => "hmc-dfi",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hmc-df" => Ok(Variant::Df),
            "hmc-dfi" => Ok(Variant::Dfi),
            _ => Err(format!("unknown method {s:?}; expected hmc-df or hmc-dfi")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameters do not match topology: {0}")]
    KeyMismatch(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("split sharpness must be positive, got {0}")]
    InvalidSharpness(f64),
}

/// Which input combination an internal node thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule<S> {
    /// Zero-based input dimension.
    Index(usize),
    /// Unconstrained stick-breaking coordinates (length `n_x - 1`).
    Simplex(Vec<S>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split<S> {
    pub tau_unc: S,
    pub rule: SplitRule<S>,
}

impl<S: Scalar> Split<S> {
    pub fn tau(&self) -> S {
        logistic(self.tau_unc)
    }

    /// Simplex weights for a DFI split, or the one-hot vector of a DF split.
    pub fn weights(&self, n_x: usize) -> Vec<S> {
        match &self.rule {
            SplitRule::Index(k) => {
                let mut w = vec![S::zero(); n_x];
                w[*k] = S::one();
                w
            }
            SplitRule::Simplex(u) => stickbreak_constrain(u).simplex,
        }
    }
}

/// Continuous and discrete parameters of one tree, stored in the
/// coordinates the sampler moves in (`tau` and `sigma` unconstrained).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TreeParams<S> {
    pub splits: BTreeMap<NodeId, Split<S>>,
    /// Leaf means (regression only).
    pub leaf_mu: BTreeMap<NodeId, S>,
    /// `ln sigma` (regression only).
    pub sigma_unc: Option<S>,
}

impl<S: Scalar> TreeParams<S> {
    pub fn sigma(&self) -> Option<S> {
        self.sigma_unc.map(|s| s.exp())
    }

    pub fn tau(&self, id: NodeId) -> Option<S> {
        self.splits.get(&id).map(Split::tau)
    }

    /// Check that keys match the topology and rule kinds match the variant.
    pub fn check(&self, topo: &TreeTopology, variant: Variant, task: Task, n_x: usize) -> Result<(), ModelError> {
        let internal = topo.internal_nodes();
        if !self.splits.keys().copied().eq(internal.iter().copied()) {
            return Err(ModelError::KeyMismatch(format!(
                "split keys {:?} vs internal nodes {:?}",
                self.splits.keys().collect::<Vec<_>>(),
                internal
            )));
        }
        for (id, s) in &self.splits {
            let ok = match (&s.rule, variant) {
                (SplitRule::Index(k), Variant::Df) => *k < n_x,
                (SplitRule::Simplex(u), Variant::Dfi) => u.len() + 1 == n_x,
                _ => false,
            };
            if !ok {
                return Err(ModelError::KeyMismatch(format!("rule at {id} does not fit {variant:?} with n_x={n_x}")));
            }
        }
        match task {
            Task::Regression => {
                let leaves = topo.leaves();
                if !self.leaf_mu.keys().copied().eq(leaves.iter().copied()) {
                    return Err(ModelError::KeyMismatch("leaf means do not match leaves".into()));
                }
                if self.sigma_unc.is_none() {
                    return Err(ModelError::KeyMismatch("regression tree without sigma".into()));
                }
            }
            Task::Classification => {
                if !self.leaf_mu.is_empty() || self.sigma_unc.is_some() {
                    return Err(ModelError::KeyMismatch("classification tree carries leaf parameters".into()));
                }
            }
        }
        Ok(())
    }
}

/// Prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig<S> {
    /// Base split probability of the topology prior, in `(0, 1)`.
    pub alpha_split: S,
    /// Depth penalty of the topology prior, `>= 0`.
    pub beta_split: S,
    /// Dirichlet concentration per class.
    pub class_alpha: Vec<S>,
    pub mu_mean: S,
    /// Variance of the normal prior on leaf means.
    pub mu_var: S,
    /// Inverse-gamma shape and scale for sigma.
    pub sigma_shape: S,
    pub sigma_scale: S,
    /// Categorical probabilities over split dimensions (DF).
    pub index_probs: Vec<S>,
    /// Dirichlet concentration over split dimensions (DFI).
    pub simplex_alpha: Vec<S>,
}

impl<S: Scalar> PriorConfig<S> {
    /// Default priors: uniform split dimension, `Dir(1)` simplexes and class
    /// counts, `N(0, 1)` leaf means, `IG(3/2, 3/2)` noise.
    pub fn new(alpha_split: S, beta_split: S, n_x: usize, n_classes: usize) -> Self {
        let px = S::one() / S::from_usize_lossy(n_x);
        PriorConfig {
            alpha_split,
            beta_split,
            class_alpha: vec![S::one(); n_classes],
            mu_mean: S::zero(),
            mu_var: S::one(),
            sigma_shape: S::c(1.5),
            sigma_scale: S::c(1.5),
            index_probs: vec![px; n_x],
            simplex_alpha: vec![S::one(); n_x],
        }
    }

    pub fn validate(&self, n_x: usize, task: Task, n_classes: usize) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidPrior(m.to_string()));
        if !(self.alpha_split > S::zero() && self.alpha_split < S::one()) {
            return bad("alpha_split must lie in (0, 1)");
        }
        if !(self.beta_split >= S::zero()) {
            return bad("beta_split must be non-negative");
        }
        if self.index_probs.len() != n_x || self.simplex_alpha.len() != n_x {
            return bad("index_probs and simplex_alpha need one entry per input dimension");
        }
        let total: S = self.index_probs.iter().copied().sum();
        if self.index_probs.iter().any(|&p| !(p >= S::zero())) || (total - S::one()).abs() > S::c(1e-9) {
            return bad("index_probs must be a probability vector");
        }
        if self.simplex_alpha.iter().any(|&a| !(a > S::zero())) {
            return bad("simplex_alpha must be positive");
        }
        match task {
            Task::Classification => {
                if self.class_alpha.len() != n_classes || self.class_alpha.iter().any(|&a| !(a > S::zero())) {
                    return bad("class_alpha needs one positive entry per class");
                }
            }
            Task::Regression => {
                if !(self.mu_var > S::zero() && self.sigma_shape > S::zero() && self.sigma_scale > S::zero()) {
                    return bad("mu_var, sigma_shape and sigma_scale must be positive");
                }
            }
        }
        Ok(())
    }

    /// Probability that a node at `depth` (root = 0) splits.
    pub fn p_split(&self, depth: usize) -> S {
        self.alpha_split * (S::one() + S::from_usize_lossy(depth)).powf(-self.beta_split)
    }

    pub fn log_prior_topology(&self, topo: &TreeTopology) -> S {
        topo.nodes()
            .map(|n| {
                let p = self.p_split(n.depth);
                if n.is_leaf() {
                    (-p).ln_1p()
                } else {
                    p.ln()
                }
            })
            .sum()
    }

    /// Log prior mass of a split dimension or density of a simplex.
    pub fn log_prior_rule(&self, rule: &SplitRule<S>) -> S {
        match rule {
            SplitRule::Index(k) => self.index_probs[*k].ln(),
            SplitRule::Simplex(u) => self.log_dirichlet(&stickbreak_constrain(u).simplex),
        }
    }

    pub fn log_dirichlet(&self, w: &[S]) -> S {
        let a0: S = self.simplex_alpha.iter().copied().sum();
        let mut lp = ln_gamma(a0);
        for (&a, &x) in self.simplex_alpha.iter().zip(w) {
            lp += (a - S::one()) * x.ln() - ln_gamma(a);
        }
        lp
    }

    pub fn log_prior_mu(&self, mu: S) -> S {
        let d = mu - self.mu_mean;
        -S::c(0.5) * (S::c(std::f64::consts::TAU) * self.mu_var).ln() - d * d / (S::c(2.0) * self.mu_var)
    }

    pub fn log_prior_sigma(&self, sigma: S) -> S {
        let (a, b) = (self.sigma_shape, self.sigma_scale);
        a * b.ln() - ln_gamma(a) - (a + S::one()) * sigma.ln() - b / sigma
    }

    /// Log prior of the whole tree with all parameters in constrained space.
    /// The threshold prior is `Beta(1, 1)` and contributes nothing.
    pub fn log_prior(&self, topo: &TreeTopology, params: &TreeParams<S>) -> S {
        let mut lp = self.log_prior_topology(topo);
        for s in params.splits.values() {
            lp += self.log_prior_rule(&s.rule);
        }
        for &mu in params.leaf_mu.values() {
            lp += self.log_prior_mu(mu);
        }
        if let Some(sigma) = params.sigma() {
            lp += self.log_prior_sigma(sigma);
        }
        lp
    }
}

/// Prior draws used for initialisation and reversible-jump dimension matching.
/// Draws are made in `f64` and converted.
pub fn sample_split<S: Scalar, R: Rng + ?Sized>(
    prior: &PriorConfig<S>,
    variant: Variant,
    rng: &mut R,
) -> Split<S> {
    let tau: f64 = rng.sample(rand_distr::Open01);
    let rule = match variant {
        Variant::Df => {
            let probs: Vec<f64> = prior.index_probs.iter().map(|p| p.to_f64().unwrap()).collect();
            let dist = rand_distr::weighted::WeightedIndex::new(&probs).expect("valid index probabilities");
            SplitRule::Index(dist.sample(rng))
        }
        Variant::Dfi => SplitRule::Simplex(sample_simplex_unc(&prior.simplex_alpha, rng)),
    };
    Split { tau_unc: logit(S::c(tau)), rule }
}

/// Dirichlet draw, returned in unconstrained stick-breaking coordinates.
/// Draws with a component too close to the boundary to invert are redrawn.
pub fn sample_simplex_unc<S: Scalar, R: Rng + ?Sized>(alpha: &[S], rng: &mut R) -> Vec<S> {
    if alpha.len() < 2 {
        return Vec::new();
    }
    loop {
        let g: Vec<f64> = alpha
            .iter()
            .map(|a| Gamma::new(a.to_f64().unwrap(), 1.0).unwrap().sample(rng))
            .collect();
        let total: f64 = g.iter().sum();
        let w: Vec<S> = g.iter().map(|v| S::c(v / total)).collect();
        if let Ok(u) = stickbreak_unconstrain(&w) {
            return u;
        }
    }
}

pub fn sample_mu<S: Scalar, R: Rng + ?Sized>(prior: &PriorConfig<S>, rng: &mut R) -> S {
    let sd = prior.mu_var.to_f64().unwrap().sqrt();
    S::c(Normal::new(prior.mu_mean.to_f64().unwrap(), sd).unwrap().sample(rng))
}

pub fn sample_sigma<S: Scalar, R: Rng + ?Sized>(prior: &PriorConfig<S>, rng: &mut R) -> S {
    let shape = prior.sigma_shape.to_f64().unwrap();
    let scale = prior.sigma_scale.to_f64().unwrap();
    let g: f64 = Gamma::new(shape, 1.0 / scale).unwrap().sample(rng);
    S::c(1.0 / g)
}

/// Parameters for `topo` drawn from the prior.
pub fn sample_params<S: Scalar, R: Rng + ?Sized>(
    topo: &TreeTopology,
    prior: &PriorConfig<S>,
    variant: Variant,
    task: Task,
    rng: &mut R,
) -> TreeParams<S> {
    let mut params = TreeParams::default();
    for id in topo.internal_nodes() {
        params.splits.insert(id, sample_split(prior, variant, rng));
    }
    if task == Task::Regression {
        for id in topo.leaves() {
            params.leaf_mu.insert(id, sample_mu(prior, rng));
        }
        params.sigma_unc = Some(sample_sigma(prior, rng).ln());
    }
    params
}

/// Beyond this scaled distance from the threshold, `e^-|a|` is below half
/// an ulp of 1 and routing is treated as hard, which lets whole subtrees be
/// skipped.
pub const SATURATE: f64 = 37.0;

/// Branch probability of stepping right, and of stepping left, for split
/// statistic `s` against threshold `tau`.
#[inline]
pub fn branch_probs<S: Scalar>(s: S, tau: S, h: S) -> (S, S) {
    let a = (s - tau) / h;
    if a.abs() > S::c(SATURATE) {
        return if a > S::zero() { (S::one(), S::zero()) } else { (S::zero(), S::one()) };
    }
    let e = (-a.abs()).exp();
    let big = (S::one() + e).recip();
    let small = e * big;
    if a >= S::zero() {
        (big, small)
    } else {
        (small, big)
    }
}

/// `psi` for input row `x` at a split.
pub fn psi<S: Scalar>(x: &[S], split: &Split<S>, h: S) -> S {
    let s = match &split.rule {
        SplitRule::Index(k) => x[*k],
        SplitRule::Simplex(u) => dot(x, &stickbreak_constrain(u).simplex),
    };
    branch_probs(s, split.tau(), h).0
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Path probabilities, one row per datapoint and one column per leaf
/// (leaves in ascending id order).
#[derive(Debug, Clone)]
pub struct LeafWeights<S> {
    pub leaves: Vec<NodeId>,
    pub phi: Vec<S>,
}

impl<S: Scalar> LeafWeights<S> {
    pub fn row(&self, i: usize) -> &[S] {
        let k = self.leaves.len();
        &self.phi[i * k..(i + 1) * k]
    }

    pub fn n_rows(&self) -> usize {
        self.phi.len() / self.leaves.len()
    }
}

/// Coordinate identity within the unconstrained position vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoordKey {
    Tau(NodeId),
    Delta(NodeId, usize),
    Mu(NodeId),
    Sigma,
}

impl CoordKey {
    /// Coordinates of the same family share adaptation defaults.
    pub fn family(&self) -> usize {
        match self {
            CoordKey::Tau(_) => 0,
            CoordKey::Delta(..) => 1,
            CoordKey::Mu(_) => 2,
            CoordKey::Sigma => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    Index(usize),
    /// Index among the simplex-valued splits.
    Simplex { slot: usize },
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Internal { internal: usize, rule: Rule, left: usize, right: usize },
    Leaf { leaf: usize },
}

/// A tree flattened into pre-order slots, with parameter positions resolved.
#[derive(Debug, Clone)]
struct Compiled {
    slots: Vec<Slot>,
    internals: Vec<NodeId>,
    leaves: Vec<NodeId>,
    n_simplex: usize,
}

impl Compiled {
    fn new<S: Scalar>(topo: &TreeTopology, params: &TreeParams<S>) -> Self {
        let internals = topo.internal_nodes();
        let leaves = topo.leaves();
        let order = topo.preorder();
        let slot_of: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(s, &id)| (id, s)).collect();
        let int_idx: BTreeMap<NodeId, usize> = internals.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let leaf_idx: BTreeMap<NodeId, usize> = leaves.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let simplex_idx: BTreeMap<NodeId, usize> = internals
            .iter()
            .filter(|id| matches!(params.splits[id].rule, SplitRule::Simplex(_)))
            .enumerate()
            .map(|(j, &id)| (id, j))
            .collect();
        let mut slots = Vec::with_capacity(order.len());
        for &id in &order {
            let rec = topo.node(id).expect("pre-order id exists");
            match rec.children() {
                Some((l, r)) => {
                    let internal = int_idx[&id];
                    let rule = match &params.splits[&id].rule {
                        SplitRule::Index(k) => Rule::Index(*k),
                        SplitRule::Simplex(_) => Rule::Simplex { slot: simplex_idx[&id] },
                    };
                    slots.push(Slot::Internal { internal, rule, left: slot_of[&l], right: slot_of[&r] });
                }
                None => slots.push(Slot::Leaf { leaf: leaf_idx[&id] }),
            }
        }
        let n_simplex = simplex_idx.len();
        Compiled { slots, internals, leaves, n_simplex }
    }
}

/// Log-density pieces at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<S> {
    pub loglik: S,
    pub logprior: S,
    /// Log-Jacobian of the map from unconstrained to constrained coordinates.
    pub logjac: S,
}

impl<S: Scalar> Evaluation<S> {
    /// Log-posterior in constrained space.
    pub fn constrained(&self) -> S {
        self.loglik + self.logprior
    }

    /// Log-density of the unconstrained coordinates (the HMC target).
    pub fn unconstrained(&self) -> S {
        self.loglik + self.logprior + self.logjac
    }
}

/// Log-posterior of one topology with its discrete split dimensions held
/// fixed, as a function of the unconstrained continuous coordinates.
///
/// Position layout: thresholds of the internal nodes (ascending id), then
/// stick-breaking coordinates per internal node (DFI), then leaf means
/// (ascending id), then `ln sigma` (regression).
#[derive(Debug, Clone)]
pub struct Posterior<'a, S: Scalar> {
    data: &'a Dataset<S>,
    prior: &'a PriorConfig<S>,
    topo: &'a TreeTopology,
    h: S,
    /// When false the likelihood is dropped and the prior is the target.
    use_likelihood: bool,
    compiled: Compiled,
    /// Log prior terms that do not depend on the position.
    fixed_logprior: S,
    keys: Vec<CoordKey>,
    task: Task,
    n_mu: usize,
}

/// Scratch buffers reused across evaluations.
#[derive(Debug, Default, Clone)]
pub struct Workspace<S> {
    psi: Vec<S>,
    reach: Vec<S>,
    phi: Vec<S>,
    value: Vec<S>,
    stats: Vec<S>,
    /// Rows with at least one non-saturated branch on a reached path.
    soft_rows: Vec<usize>,
}

impl<'a, S: Scalar> Posterior<'a, S> {
    /// `params` supplies the discrete split dimensions and the rule kind of
    /// each node; its continuous values are ignored by the evaluators.
    pub fn new(
        data: &'a Dataset<S>,
        topo: &'a TreeTopology,
        params: &TreeParams<S>,
        prior: &'a PriorConfig<S>,
        h: S,
    ) -> Self {
        let n_x = data.n_x();
        let compiled = Compiled::new(topo, params);
        let task = data.task();
        let mut keys = Vec::new();
        for &id in &compiled.internals {
            keys.push(CoordKey::Tau(id));
        }
        for (&id, s) in &params.splits {
            if let SplitRule::Simplex(_) = s.rule {
                keys.extend((0..n_x - 1).map(|d| CoordKey::Delta(id, d)));
            }
        }
        let mut n_mu = 0;
        if task == Task::Regression {
            for &id in &compiled.leaves {
                keys.push(CoordKey::Mu(id));
            }
            n_mu = compiled.leaves.len();
            keys.push(CoordKey::Sigma);
        }
        let mut fixed_logprior = prior.log_prior_topology(topo);
        for s in params.splits.values() {
            if let SplitRule::Index(k) = s.rule {
                fixed_logprior += prior.index_probs[k].ln();
            }
        }
        Posterior {
            data,
            prior,
            topo,
            h,
            use_likelihood: true,
            compiled,
            fixed_logprior,
            keys,
            task,
            n_mu,
        }
    }

    /// Drop the likelihood so that the prior is the target.
    pub fn prior_only(mut self, yes: bool) -> Self {
        self.use_likelihood = !yes;
        self
    }

    pub fn dim(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[CoordKey] {
        &self.keys
    }

    pub fn h(&self) -> S {
        self.h
    }

    pub fn set_h(&mut self, h: S) {
        self.h = h;
    }

    pub fn topology(&self) -> &TreeTopology {
        self.topo
    }

    fn n_x(&self) -> usize {
        self.data.n_x()
    }

    /// Pack the continuous parameters into a position vector.
    pub fn position(&self, params: &TreeParams<S>) -> Vec<S> {
        let mut u = Vec::with_capacity(self.dim());
        for id in &self.compiled.internals {
            u.push(params.splits[id].tau_unc);
        }
        for id in &self.compiled.internals {
            if let SplitRule::Simplex(v) = &params.splits[id].rule {
                u.extend_from_slice(v);
            }
        }
        if self.task == Task::Regression {
            for id in &self.compiled.leaves {
                u.push(params.leaf_mu[id]);
            }
            u.push(params.sigma_unc.expect("regression tree has sigma"));
        }
        u
    }

    /// Write a position vector back into `params`.
    pub fn unpack(&self, u: &[S], params: &mut TreeParams<S>) {
        assert_eq!(u.len(), self.dim());
        let n_int = self.compiled.internals.len();
        let width = self.n_x().saturating_sub(1);
        let mut off = n_int;
        for (i, id) in self.compiled.internals.iter().enumerate() {
            let split = params.splits.get_mut(id).expect("split for internal node");
            split.tau_unc = u[i];
            if let SplitRule::Simplex(v) = &mut split.rule {
                v.copy_from_slice(&u[off..off + width]);
                off += width;
            }
        }
        if self.task == Task::Regression {
            let off = n_int + self.compiled.n_simplex * width;
            for (k, id) in self.compiled.leaves.iter().enumerate() {
                params.leaf_mu.insert(*id, u[off + k]);
            }
            params.sigma_unc = Some(u[off + self.n_mu]);
        }
    }

    fn decode(&self, u: &[S]) -> Decoded<S> {
        let n_int = self.compiled.internals.len();
        let width = self.n_x().saturating_sub(1);
        let tau: Vec<S> = u[..n_int].iter().map(|&t| logistic(t)).collect();
        let mut sticks = Vec::with_capacity(self.compiled.n_simplex);
        for i in 0..self.compiled.n_simplex {
            let off = n_int + i * width;
            sticks.push(stickbreak_constrain(&u[off..off + width]));
        }
        let off = n_int + self.compiled.n_simplex * width;
        let (mu, sigma) = if self.task == Task::Regression {
            (u[off..off + self.n_mu].to_vec(), u[off + self.n_mu].exp())
        } else {
            (Vec::new(), S::one())
        };
        Decoded { tau, sticks, mu, sigma }
    }

    fn prior_and_jacobian(&self, u: &[S], dec: &Decoded<S>) -> (S, S) {
        let n_int = self.compiled.internals.len();
        let mut logprior = self.fixed_logprior;
        let mut logjac = S::zero();
        for &t in &u[..n_int] {
            logjac += logistic_log_jacobian(t);
        }
        for sb in &dec.sticks {
            logprior += self.prior.log_dirichlet(&sb.simplex);
            logjac += sb.log_abs_det_jacobian();
        }
        if self.task == Task::Regression {
            for &m in &dec.mu {
                logprior += self.prior.log_prior_mu(m);
            }
            logprior += self.prior.log_prior_sigma(dec.sigma);
            logjac += u[u.len() - 1];
        }
        (logprior, logjac)
    }

    /// Forward pass: branch and reach probabilities for every datapoint.
    fn forward(&self, dec: &Decoded<S>, ws: &mut Workspace<S>) {
        let n = self.data.len();
        let n_slots = self.compiled.slots.len();
        let n_leaf = self.compiled.leaves.len();
        let n_int = self.compiled.internals.len();
        ws.psi.resize(n * n_int, S::zero());
        ws.reach.resize(n * n_slots, S::zero());
        ws.reach.fill(S::zero());
        ws.phi.resize(n * n_leaf, S::zero());
        ws.phi.fill(S::zero());
        let inv_h = self.h.recip();
        let saturate = S::c(SATURATE);
        ws.soft_rows.clear();
        let mut stack = Vec::with_capacity(n_slots);
        for i in 0..n {
            let mut soft = false;
            let x = self.data.row(i);
            let reach = &mut ws.reach[i * n_slots..(i + 1) * n_slots];
            let psi = &mut ws.psi[i * n_int..(i + 1) * n_int];
            let phi = &mut ws.phi[i * n_leaf..(i + 1) * n_leaf];
            reach[0] = S::one();
            // depth-first over reachable slots only
            stack.push(0);
            while let Some(s) = stack.pop() {
                let p = reach[s];
                match self.compiled.slots[s] {
                    Slot::Internal { internal, rule, left, right } => {
                        let stat = match rule {
                            Rule::Index(k) => x[k],
                            Rule::Simplex { slot, .. } => dot(x, &dec.sticks[slot].simplex),
                        };
                        let a = (stat - dec.tau[internal]) * inv_h;
                        if a > saturate {
                            psi[internal] = S::one();
                            reach[right] = p;
                            stack.push(right);
                        } else if a < -saturate {
                            psi[internal] = S::zero();
                            reach[left] = p;
                            stack.push(left);
                        } else {
                            soft = true;
                            let e = (-a.abs()).exp();
                            let big = (S::one() + e).recip();
                            let small = e * big;
                            let (r, l) = if a >= S::zero() { (big, small) } else { (small, big) };
                            psi[internal] = r;
                            reach[right] = p * r;
                            reach[left] = p * l;
                            stack.push(right);
                            stack.push(left);
                        }
                    }
                    Slot::Leaf { leaf } => phi[leaf] = p,
                }
            }
            if soft {
                ws.soft_rows.push(i);
            }
        }
    }

    /// Log-likelihood from the forward pass; leaves per-leaf statistics in
    /// `ws.stats` for the backward pass.
    fn likelihood(&self, dec: &Decoded<S>, ws: &mut Workspace<S>) -> S {
        if !self.use_likelihood {
            return S::zero();
        }
        let n = self.data.len();
        let n_leaf = self.compiled.leaves.len();
        match self.data.targets() {
            Targets::Real(y) => {
                // stats[i] = residual sum for datapoint i
                ws.stats.clear();
                let mut ss = S::zero();
                for (i, &yi) in y.iter().enumerate() {
                    let phi = &ws.phi[i * n_leaf..(i + 1) * n_leaf];
                    let r = phi.iter().zip(&dec.mu).fold(S::zero(), |acc, (&p, &m)| acc + p * (m - yi));
                    ws.stats.push(r);
                    ss += r * r;
                }
                let var = dec.sigma * dec.sigma;
                -S::c(0.5) * S::from_usize_lossy(n) * (S::c(std::f64::consts::TAU) * var).ln()
                    - ss / (S::c(2.0) * var)
            }
            Targets::Labels { y, n_classes } => {
                let m = *n_classes;
                // stats layout: per leaf, [class soft counts (m)..., total]
                ws.stats.clear();
                ws.stats.resize(n_leaf * (m + 1), S::zero());
                for (i, &c) in y.iter().enumerate() {
                    let phi = &ws.phi[i * n_leaf..(i + 1) * n_leaf];
                    for (k, &p) in phi.iter().enumerate() {
                        ws.stats[k * (m + 1) + c] += p;
                        ws.stats[k * (m + 1) + m] += p;
                    }
                }
                let alpha = &self.prior.class_alpha;
                let a_tot: S = alpha.iter().copied().sum();
                let lg_a_tot = ln_gamma(a_tot);
                let lg_alpha: S = alpha.iter().map(|&a| ln_gamma(a)).sum();
                let mut ll = S::zero();
                for k in 0..n_leaf {
                    let st = &ws.stats[k * (m + 1)..(k + 1) * (m + 1)];
                    ll += lg_a_tot - ln_gamma(st[m] + a_tot) - lg_alpha;
                    for (cls, &a) in alpha.iter().enumerate() {
                        ll += ln_gamma(st[cls] + a);
                    }
                }
                ll
            }
        }
    }

    /// Log-density pieces at position `u`.
    pub fn evaluate(&self, u: &[S], ws: &mut Workspace<S>) -> Evaluation<S> {
        let dec = self.decode(u);
        let (logprior, logjac) = self.prior_and_jacobian(u, &dec);
        let loglik = if self.use_likelihood {
            self.forward(&dec, ws);
            self.likelihood(&dec, ws)
        } else {
            S::zero()
        };
        Evaluation { loglik, logprior, logjac }
    }

    /// Log-density pieces and the gradient of the unconstrained log-density
    /// (likelihood + prior + log-Jacobian) at `u`.
    pub fn evaluate_with_grad(&self, u: &[S], grad: &mut [S], ws: &mut Workspace<S>) -> Evaluation<S> {
        assert_eq!(grad.len(), self.dim());
        grad.iter_mut().for_each(|g| *g = S::zero());
        let dec = self.decode(u);
        let (logprior, logjac) = self.prior_and_jacobian(u, &dec);
        let n_int = self.compiled.internals.len();
        let n_x = self.n_x();
        let width = n_x.saturating_sub(1);
        // gradients with respect to constrained tau and simplex weights
        let mut g_tau = vec![S::zero(); n_int];
        let mut g_w = vec![S::zero(); self.compiled.n_simplex * n_x];
        let mut g_mu = vec![S::zero(); self.n_mu];
        let mut g_sigma = S::zero();

        let loglik = if self.use_likelihood {
            self.forward(&dec, ws);
            let ll = self.likelihood(&dec, ws);
            self.backward(&dec, ws, &mut g_tau, &mut g_w, &mut g_mu, &mut g_sigma);
            ll
        } else {
            S::zero()
        };

        for i in 0..n_int {
            let t = dec.tau[i];
            grad[i] = g_tau[i] * t * (S::one() - t) + S::one() - S::c(2.0) * t;
        }
        for (j, sb) in dec.sticks.iter().enumerate() {
            let cot: Vec<S> = (0..n_x)
                .map(|d| g_w[j * n_x + d] + (self.prior.simplex_alpha[d] - S::one()) / sb.simplex[d])
                .collect();
            let du = sb.vjp_with_log_jacobian(&cot);
            let off = n_int + j * width;
            grad[off..off + width].copy_from_slice(&du);
        }
        if self.task == Task::Regression {
            let off = n_int + self.compiled.n_simplex * width;
            for k in 0..self.n_mu {
                grad[off + k] = g_mu[k] - (dec.mu[k] - self.prior.mu_mean) / self.prior.mu_var;
            }
            let sigma = dec.sigma;
            let (a, b) = (self.prior.sigma_shape, self.prior.sigma_scale);
            // chain through sigma = exp(u): d/du = sigma * d/dsigma, plus Jacobian 1
            grad[off + self.n_mu] = g_sigma * sigma - (a + S::one()) + b / sigma + S::one();
        }
        Evaluation { loglik, logprior, logjac }
    }

    /// Reverse pass accumulating likelihood gradients with respect to the
    /// constrained thresholds, simplex weights, leaf means and sigma.
    fn backward(
        &self,
        dec: &Decoded<S>,
        ws: &mut Workspace<S>,
        g_tau: &mut [S],
        g_w: &mut [S],
        g_mu: &mut [S],
        g_sigma: &mut S,
    ) {
        let n = self.data.len();
        let n_slots = self.compiled.slots.len();
        let n_leaf = self.compiled.leaves.len();
        let n_int = self.compiled.internals.len();
        let n_x = self.n_x();
        let inv_h = self.h.recip();

        // per-datapoint, per-leaf adjoint dL/dphi_ik, computed on the fly
        enum Adj<'b, S> {
            Reg { resid: &'b [S], mu: &'b [S], y: &'b [S], inv_var: S },
            Cls { leaf_term: Vec<S>, class_term: Vec<S>, m: usize, y: &'b [usize] },
        }
        let adj = match self.data.targets() {
            Targets::Real(y) => {
                let inv_var = (dec.sigma * dec.sigma).recip();
                let ss: S = ws.stats.iter().map(|&r| r * r).sum();
                *g_sigma = -S::from_usize_lossy(n) / dec.sigma + ss * inv_var / dec.sigma;
                for i in 0..n {
                    let r = ws.stats[i];
                    for k in 0..n_leaf {
                        g_mu[k] -= r * ws.phi[i * n_leaf + k] * inv_var;
                    }
                }
                Adj::Reg { resid: &ws.stats, mu: &dec.mu, y, inv_var }
            }
            Targets::Labels { y, n_classes } => {
                let m = *n_classes;
                let alpha = &self.prior.class_alpha;
                let a_tot: S = alpha.iter().copied().sum();
                let mut leaf_term = Vec::with_capacity(n_leaf);
                let mut class_term = Vec::with_capacity(n_leaf * m);
                for k in 0..n_leaf {
                    let st = &ws.stats[k * (m + 1)..(k + 1) * (m + 1)];
                    leaf_term.push(-digamma(st[m] + a_tot));
                    for (c, &a) in alpha.iter().enumerate() {
                        class_term.push(digamma(st[c] + a));
                    }
                }
                Adj::Cls { leaf_term, class_term, m, y }
            }
        };

        let mut value = std::mem::take(&mut ws.value);
        value.clear();
        value.resize(n_slots, S::zero());
        // saturated branches have zero derivative, so only soft rows contribute
        for &i in &ws.soft_rows {
            let x = self.data.row(i);
            let reach = &ws.reach[i * n_slots..(i + 1) * n_slots];
            let psi = &ws.psi[i * n_int..(i + 1) * n_int];
            for s in (0..n_slots).rev() {
                match self.compiled.slots[s] {
                    Slot::Leaf { leaf } => {
                        value[s] = match &adj {
                            Adj::Reg { resid, mu, y, inv_var } => -resid[i] * (mu[leaf] - y[i]) * *inv_var,
                            Adj::Cls { leaf_term, class_term, m, y } => leaf_term[leaf] + class_term[leaf * m + y[i]],
                        };
                    }
                    Slot::Internal { internal, rule, left, right } => {
                        let p = reach[s];
                        if p == S::zero() {
                            value[s] = S::zero();
                            continue;
                        }
                        let r = psi[internal];
                        let (vr, vl) = (value[right], value[left]);
                        value[s] = r * vr + (S::one() - r) * vl;
                        // dL/dpsi * dpsi/da * da/dstat, with da/dtau = -da/dstat
                        let d_stat = p * (vr - vl) * r * (reach[left] / p) * inv_h;
                        g_tau[internal] -= d_stat;
                        if let Rule::Simplex { slot, .. } = rule {
                            for d in 0..n_x {
                                g_w[slot * n_x + d] += d_stat * x[d];
                            }
                        }
                    }
                }
            }
        }
        ws.value = value;
    }

    /// Path probabilities for every datapoint of the bound dataset.
    pub fn leaf_weights(&self, u: &[S]) -> LeafWeights<S> {
        let dec = self.decode(u);
        let mut ws = Workspace::default();
        self.forward(&dec, &mut ws);
        LeafWeights { leaves: self.compiled.leaves.clone(), phi: ws.phi }
    }
}

struct Decoded<S> {
    tau: Vec<S>,
    sticks: Vec<StickBreaking<S>>,
    mu: Vec<S>,
    sigma: S,
}

/// Path probabilities of input row `x` for every leaf (ascending id).
pub fn leaf_weights_row<S: Scalar>(x: &[S], topo: &TreeTopology, params: &TreeParams<S>, h: S) -> Vec<(NodeId, S)> {
    let mut reach: BTreeMap<NodeId, S> = BTreeMap::new();
    let mut out = Vec::with_capacity(topo.n_leaves());
    for id in topo.preorder() {
        let p = if id == topo.root() { S::one() } else { reach[&id] };
        match topo.node(id).expect("pre-order id exists").children() {
            Some((l, r)) => {
                let split = &params.splits[&id];
                let stat = match &split.rule {
                    SplitRule::Index(k) => x[*k],
                    SplitRule::Simplex(u) => dot(x, &stickbreak_constrain(u).simplex),
                };
                let (pr, pl) = branch_probs(stat, split.tau(), h);
                reach.insert(r, p * pr);
                reach.insert(l, p * pl);
            }
            None => out.push((id, p)),
        }
    }
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Path probabilities for every datapoint of `data`.
pub fn leaf_weights<S: Scalar>(data: &Dataset<S>, topo: &TreeTopology, params: &TreeParams<S>, h: S) -> LeafWeights<S> {
    let mut phi = Vec::with_capacity(data.len() * topo.n_leaves());
    for i in 0..data.len() {
        phi.extend(leaf_weights_row(data.row(i), topo, params, h).into_iter().map(|(_, p)| p));
    }
    LeafWeights { leaves: topo.leaves(), phi }
}

/// Soft Dirichlet-multinomial log-likelihood of a classification tree.
pub fn loglik_classification<S: Scalar>(
    data: &Dataset<S>,
    topo: &TreeTopology,
    params: &TreeParams<S>,
    h: S,
    prior: &PriorConfig<S>,
) -> S {
    let post = Posterior::new(data, topo, params, prior, h);
    let u = post.position(params);
    post.evaluate(&u, &mut Workspace::default()).loglik
}

/// Soft Gaussian log-likelihood of a regression tree.
pub fn loglik_regression<S: Scalar>(data: &Dataset<S>, topo: &TreeTopology, params: &TreeParams<S>, h: S) -> S {
    let n_x = data.n_x();
    let prior = PriorConfig::new(S::c(0.5), S::zero(), n_x, 0);
    let post = Posterior::new(data, topo, params, &prior, h);
    let u = post.position(params);
    post.evaluate(&u, &mut Workspace::default()).loglik
}

/// Constrained-space log-posterior `log p(D | T) + log p(T)`.
pub fn log_posterior<S: Scalar>(
    data: &Dataset<S>,
    topo: &TreeTopology,
    params: &TreeParams<S>,
    prior: &PriorConfig<S>,
    h: S,
    prior_only: bool,
) -> S {
    let post = Posterior::new(data, topo, params, prior, h).prior_only(prior_only);
    let u = post.position(params);
    post.evaluate(&u, &mut Workspace::default()).constrained()
}
