//! The transdimensional kernel: an HMC block in the current dimension, a
//! grow/prune/stay proposal with dimension matching from the prior, an HMC
//! block in the proposed dimension, and an accept/reject step.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::model::{
    sample_mu, sample_params, sample_split, CoordKey, Posterior, PriorConfig, Split, SplitRule, TreeParams, Variant,
    Workspace,
};
use crate::nuts::{nuts_step, warmup, Adaptation, HmcState, NutsConfig, NutsError, SharpnessSchedule};
use crate::topology::{NodeId, TreeTopology};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nuts(#[from] NutsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Grow,
    Prune,
    Stay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveProbs {
    pub grow: f64,
    pub prune: f64,
    pub stay: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        MoveProbs { grow: 0.35, prune: 0.35, stay: 0.3 }
    }
}

impl MoveProbs {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let p = [self.grow, self.prune, self.stay];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(SamplerError::Config(format!("move probabilities {p:?} must lie in [0, 1] and sum to 1")));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Move {
        let u: f64 = rng.random();
        if u < self.grow {
            Move::Grow
        } else if u < self.grow + self.prune {
            Move::Prune
        } else {
            Move::Stay
        }
    }
}

/// Settings of the transdimensional sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub variant: Variant,
    /// Move probabilities after burn-in.
    pub moves: MoveProbs,
    /// Move probabilities during burn-in; defaults to `moves`.
    #[serde(default)]
    pub burnin_moves: Option<MoveProbs>,
    /// NUTS transitions per HMC block.
    pub k: usize,
    pub n_burnin: usize,
    pub h_init: f64,
    pub h_final: f64,
    /// Warm-up transitions run whenever a new topology needs adapting
    /// during burn-in.
    pub warmup: usize,
    pub nuts: NutsConfig,
    /// Largest number of internal nodes; grow moves beyond it become stay.
    #[serde(default)]
    pub max_internal: Option<usize>,
    /// Replace the likelihood by a constant, so the chain targets the prior.
    #[serde(default)]
    pub prior_only: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        self.moves.validate()?;
        if let Some(m) = &self.burnin_moves {
            m.validate()?;
        }
        if self.k == 0 {
            return Err(SamplerError::Config("k must be at least 1".into()));
        }
        if !(self.h_init > 0.0 && self.h_final > 0.0) {
            return Err(SamplerError::Config("split sharpness must be positive".into()));
        }
        if self.warmup < 20 {
            return Err(SamplerError::Config("warm-up needs at least 20 transitions".into()));
        }
        Ok(())
    }

    fn moves_at(&self, iteration: usize) -> &MoveProbs {
        match &self.burnin_moves {
            Some(m) if iteration < self.n_burnin => m,
            _ => &self.moves,
        }
    }
}

/// Step size and per-coordinate inverse metric, keyed so that values carry
/// across topology changes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptState {
    pub step_size: f64,
    pub inv_mass: BTreeMap<CoordKey, f64>,
}

impl AdaptState {
    /// Dense metric for `keys`; unseen coordinates take the median of their
    /// family (or 1 when the family has no values yet).
    fn dense(&self, keys: &[CoordKey]) -> Adaptation {
        let mut fam: [Vec<f64>; 4] = Default::default();
        for (k, &v) in &self.inv_mass {
            fam[k.family()].push(v);
        }
        let medians: Vec<f64> = fam
            .iter_mut()
            .map(|v| {
                if v.is_empty() {
                    1.0
                } else {
                    v.sort_by(f64::total_cmp);
                    v[v.len() / 2]
                }
            })
            .collect();
        let inv_mass = keys.iter().map(|k| self.inv_mass.get(k).copied().unwrap_or(medians[k.family()])).collect();
        let step_size = if self.step_size > 0.0 { self.step_size } else { 0.1 };
        Adaptation { step_size, inv_mass }
    }

    fn store(&mut self, keys: &[CoordKey], adapt: &Adaptation) {
        self.step_size = adapt.step_size;
        self.inv_mass = keys.iter().copied().zip(adapt.inv_mass.iter().copied()).collect();
    }
}

/// One tree with its parameters, log-posterior and sampler adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeState {
    pub topo: TreeTopology,
    pub params: TreeParams<f64>,
    /// Constrained-space log-posterior at the final split sharpness.
    pub logpost: f64,
    pub adapt: AdaptState,
}

impl TreeState {
    pub fn n_leaves(&self) -> usize {
        self.topo.n_leaves()
    }
}

/// Auxiliary values of a grow or prune move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RjProposal {
    pub kind: Move,
    pub edited_node: Option<NodeId>,
    /// Threshold of the added or removed split.
    pub u_tau: Option<f64>,
    pub u_rule: Option<SplitRule<f64>>,
    /// Leaf mean added or removed (regression).
    pub u_mu: Option<f64>,
    pub log_proposal_ratio: f64,
}

impl RjProposal {
    fn stay() -> Self {
        RjProposal { kind: Move::Stay, edited_node: None, u_tau: None, u_rule: None, u_mu: None, log_proposal_ratio: 0.0 }
    }
}

/// Log proposal ratio `log q(reverse) - log q(forward)` of growing a tree
/// with `n_leaves` leaves into one with `n_prunable_after` prunable nodes;
/// `log_aux` is the prior log-density of the auxiliary draws.
pub fn grow_log_ratio(p_grow: f64, p_prune: f64, n_leaves: usize, n_prunable_after: usize, log_aux: f64) -> f64 {
    (p_prune.ln() - (n_prunable_after as f64).ln()) - (p_grow.ln() - (n_leaves as f64).ln() + log_aux)
}

/// Prior log-density of auxiliary draws; the threshold prior is uniform.
pub fn log_aux_density(prior: &PriorConfig<f64>, rule: &SplitRule<f64>, mu: Option<f64>) -> f64 {
    prior.log_prior_rule(rule) + mu.map_or(0.0, |m| prior.log_prior_mu(m))
}

/// Grow `leaf` with the given split and (regression) new right-leaf mean.
/// The left child inherits the leaf's mean.
pub fn apply_grow(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    leaf: NodeId,
    split: Split<f64>,
    mu: Option<f64>,
) -> (TreeTopology, TreeParams<f64>) {
    let new_topo = topo.grow(leaf).expect("grow target is a leaf");
    let (l, r) = new_topo.node(leaf).unwrap().children().unwrap();
    let mut p = params.clone();
    p.splits.insert(leaf, split);
    if let Some(old) = p.leaf_mu.remove(&leaf) {
        p.leaf_mu.insert(l, old);
        p.leaf_mu.insert(r, mu.expect("regression grow needs a leaf mean"));
    }
    (new_topo, p)
}

/// Prune `node`, returning the new tree, the removed split and the removed
/// right-leaf mean. The node inherits its left child's mean.
pub fn apply_prune(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    node: NodeId,
) -> (TreeTopology, TreeParams<f64>, Split<f64>, Option<f64>) {
    let (l, r) = topo.node(node).unwrap().children().expect("prune target is internal");
    let new_topo = topo.prune(node).expect("prune target has leaf children");
    let mut p = params.clone();
    let split = p.splits.remove(&node).expect("split at pruned node");
    let mut removed_mu = None;
    if let Some(left_mu) = p.leaf_mu.remove(&l) {
        removed_mu = p.leaf_mu.remove(&r);
        p.leaf_mu.insert(node, left_mu);
    }
    (new_topo, p, split, removed_mu)
}

/// Grow `leaf` with the given draws and compute the move's log proposal ratio.
pub fn grow_move(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    leaf: NodeId,
    split: Split<f64>,
    mu: Option<f64>,
    moves: &MoveProbs,
    prior: &PriorConfig<f64>,
) -> (TreeTopology, TreeParams<f64>, RjProposal) {
    let log_aux = log_aux_density(prior, &split.rule, mu);
    let u_tau = split.tau();
    let u_rule = split.rule.clone();
    let (new_topo, new_params) = apply_grow(topo, params, leaf, split, mu);
    let ratio = grow_log_ratio(moves.grow, moves.prune, topo.n_leaves(), new_topo.prunable_count(), log_aux);
    let prop = RjProposal {
        kind: Move::Grow,
        edited_node: Some(leaf),
        u_tau: Some(u_tau),
        u_rule: Some(u_rule),
        u_mu: mu,
        log_proposal_ratio: ratio,
    };
    (new_topo, new_params, prop)
}

/// Prune `node` and compute the move's log proposal ratio.
pub fn prune_move(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    node: NodeId,
    moves: &MoveProbs,
    prior: &PriorConfig<f64>,
) -> (TreeTopology, TreeParams<f64>, RjProposal) {
    let (new_topo, new_params, split, mu) = apply_prune(topo, params, node);
    let log_aux = log_aux_density(prior, &split.rule, mu);
    let ratio = -grow_log_ratio(moves.grow, moves.prune, new_topo.n_leaves(), topo.prunable_count(), log_aux);
    let prop = RjProposal {
        kind: Move::Prune,
        edited_node: Some(node),
        u_tau: Some(split.tau()),
        u_rule: Some(split.rule),
        u_mu: mu,
        log_proposal_ratio: ratio,
    };
    (new_topo, new_params, prop)
}

/// Draw a grow, prune or stay move and build the proposed tree.
#[allow(clippy::too_many_arguments)]
pub fn propose_topology<R: Rng + ?Sized>(
    topo: &TreeTopology,
    params: &TreeParams<f64>,
    moves: &MoveProbs,
    prior: &PriorConfig<f64>,
    variant: Variant,
    task: Task,
    max_internal: Option<usize>,
    rng: &mut R,
) -> (TreeTopology, TreeParams<f64>, RjProposal) {
    match moves.draw(rng) {
        Move::Grow if max_internal.is_none_or(|m| topo.n_internal() < m) => {
            let leaf = *topo.leaves().choose(rng).expect("tree has a leaf");
            let split = sample_split(prior, variant, rng);
            let mu = (task == Task::Regression).then(|| sample_mu(prior, rng));
            grow_move(topo, params, leaf, split, mu, moves, prior)
        }
        Move::Prune if topo.n_internal() > 0 => {
            let node = *topo.prunable_nodes().choose(rng).expect("non-root tree has a prunable node");
            prune_move(topo, params, node, moves, prior)
        }
        _ => (topo.clone(), params.clone(), RjProposal::stay()),
    }
}

/// Log of the full acceptance probability. `log_target_*` are `pi` at the
/// initial and final states; `log_inter_*` are the intermediate density at
/// the initial state, after the first block, after the jump, and at the
/// final state.
pub fn log_accept_full(
    log_target_initial: f64,
    log_target_final: f64,
    log_inter: [f64; 4],
    log_proposal_ratio: f64,
) -> f64 {
    let [x, x1, x2, x_star] = log_inter;
    let num = log_target_final + x2 + x + log_proposal_ratio;
    let den = log_target_initial + x_star + x1;
    (num - den).min(0.0)
}

/// Log acceptance probability used during burn-in.
pub fn log_accept_burnin(log_target_initial: f64, log_target_final: f64, log_proposal_ratio: f64) -> f64 {
    (log_target_final + log_proposal_ratio - log_target_initial).min(0.0)
}

/// Diagnostics of one HMC block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub warmed_up: bool,
    pub n_leapfrog: usize,
    pub divergences: usize,
    pub kappa_accepts: usize,
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub iteration: usize,
    pub burnin: bool,
    #[serde(rename = "move")]
    pub kind: Move,
    pub accepted: bool,
    pub logpost: f64,
    pub n_leaves: usize,
    pub topo: TreeTopology,
    pub params: TreeParams<f64>,
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub divergences: usize,
}

/// A single chain of the transdimensional sampler.
pub struct Chain<'a, R> {
    data: &'a Dataset<f64>,
    prior: &'a PriorConfig<f64>,
    cfg: SamplerConfig,
    state: TreeState,
    iteration: usize,
    rng: R,
    ws: Workspace<f64>,
}

impl<'a, R: Rng> Chain<'a, R> {
    /// Start from the root-only tree with parameters drawn from the prior.
    pub fn new(
        data: &'a Dataset<f64>,
        prior: &'a PriorConfig<f64>,
        cfg: SamplerConfig,
        mut rng: R,
    ) -> Result<Self, SamplerError> {
        cfg.validate()?;
        prior.validate(data.n_x(), data.task(), data.n_classes())?;
        let topo = TreeTopology::root_only();
        let params = sample_params(&topo, prior, cfg.variant, data.task(), &mut rng);
        let state = TreeState { topo, params, logpost: 0.0, adapt: AdaptState::default() };
        Self::from_state(data, prior, cfg, state, rng)
    }

    /// Start from a given tree; its adaptation is used as is.
    pub fn from_state(
        data: &'a Dataset<f64>,
        prior: &'a PriorConfig<f64>,
        cfg: SamplerConfig,
        mut state: TreeState,
        rng: R,
    ) -> Result<Self, SamplerError> {
        cfg.validate()?;
        state.params.check(&state.topo, cfg.variant, data.task(), data.n_x())?;
        let mut chain = Chain { data, prior, cfg, state: state.clone(), iteration: 0, rng, ws: Workspace::default() };
        state.logpost = chain.log_target(&state.topo, &state.params);
        chain.state = state;
        Ok(chain)
    }

    pub fn state(&self) -> &TreeState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn posterior<'b>(&self, topo: &'b TreeTopology, params: &TreeParams<f64>, h: f64) -> Posterior<'b, f64>
    where
        'a: 'b,
    {
        Posterior::new(self.data, topo, params, self.prior, h).prior_only(self.cfg.prior_only)
    }

    /// Constrained log-posterior at the final sharpness.
    pub fn log_target(&mut self, topo: &TreeTopology, params: &TreeParams<f64>) -> f64 {
        let post = self.posterior(topo, params, self.cfg.h_final);
        let u = post.position(params);
        post.evaluate(&u, &mut self.ws).constrained()
    }

    /// Metropolis sweep over split dimensions in random order (DF only).
    fn kappa_sweep(&mut self, topo: &TreeTopology, params: &mut TreeParams<f64>) -> usize {
        let n_x = self.data.n_x();
        let mut order = topo.internal_nodes();
        if self.cfg.variant != Variant::Df || n_x < 2 || order.is_empty() {
            return 0;
        }
        order.shuffle(&mut self.rng);
        let mut current = self.log_target(topo, params);
        let mut accepts = 0;
        for id in order {
            let proposal = self.rng.random_range(0..n_x);
            let old = params.splits[&id].rule.clone();
            if old == SplitRule::Index(proposal) {
                accepts += 1;
                continue;
            }
            params.splits.get_mut(&id).unwrap().rule = SplitRule::Index(proposal);
            let cand = self.log_target(topo, params);
            if self.rng.random::<f64>().ln() < cand - current {
                current = cand;
                accepts += 1;
            } else {
                params.splits.get_mut(&id).unwrap().rule = old;
            }
        }
        accepts
    }

    /// Split-dimension sweep (DF), optional warm-up, then `k` NUTS
    /// transitions at the final sharpness.
    pub fn hmc_block(
        &mut self,
        topo: &TreeTopology,
        params: &mut TreeParams<f64>,
        adapt: &mut AdaptState,
        adapt_now: bool,
    ) -> Result<BlockStats, SamplerError> {
        let mut stats = BlockStats { kappa_accepts: self.kappa_sweep(topo, params), ..Default::default() };
        let data = self.data;
        let prior = self.prior;
        let prior_only = self.cfg.prior_only;
        let mut post = Posterior::new(data, topo, params, prior, self.cfg.h_final).prior_only(prior_only);
        if post.dim() == 0 {
            return Ok(stats);
        }
        let keys = post.keys().to_vec();
        let mut dense = adapt.dense(&keys);
        let mut ws = Workspace::default();
        let mut state = HmcState::new(post.position(params), &mut |q: &[f64], g: &mut [f64]| {
            post.evaluate_with_grad(q, g, &mut ws).unconstrained()
        });

        if adapt_now {
            let sched = SharpnessSchedule::constant(self.cfg.h_final);
            let sched = SharpnessSchedule { h_init: self.cfg.h_init, ..sched };
            let mut warm_post = post.clone();
            let ws_rng = &mut self.rng;
            let w = warmup(
                &mut state,
                &mut dense,
                self.cfg.warmup,
                Some(sched),
                &self.cfg.nuts,
                &mut |h: f64, q: &[f64], g: &mut [f64]| {
                    warm_post.set_h(h);
                    warm_post.evaluate_with_grad(q, g, &mut ws).unconstrained()
                },
                ws_rng,
            )?;
            stats.warmed_up = true;
            stats.n_leapfrog += w.n_leapfrog;
            stats.divergences += w.divergences;
            adapt.store(&keys, &dense);
        }

        post.set_h(self.cfg.h_final);
        let mut f = |q: &[f64], g: &mut [f64]| post.evaluate_with_grad(q, g, &mut ws).unconstrained();
        for _ in 0..self.cfg.k {
            let (next, diag) = nuts_step(&state, dense.step_size, &dense.inv_mass, &self.cfg.nuts, &mut f, &mut self.rng);
            state = next;
            stats.n_leapfrog += diag.n_leapfrog;
            stats.divergences += diag.divergent as usize;
        }
        post.unpack(&state.position, params);
        if !adapt_now {
            for (k, &v) in keys.iter().zip(&dense.inv_mass) {
                adapt.inv_mass.entry(*k).or_insert(v);
            }
        }
        Ok(stats)
    }

    /// Run one iteration and return its record.
    pub fn step(&mut self) -> Result<ChainSample, SamplerError> {
        let i = self.iteration;
        let burnin = i < self.cfg.n_burnin;
        let task = self.data.task();

        if i == 0 && self.state.adapt.step_size == 0.0 {
            let topo = self.state.topo.clone();
            let mut params = self.state.params.clone();
            let mut adapt = self.state.adapt.clone();
            self.hmc_block(&topo, &mut params, &mut adapt, true)?;
            if adapt.step_size == 0.0 {
                adapt.step_size = 0.1;
            }
            self.state.logpost = self.log_target(&topo, &params);
            self.state.params = params;
            self.state.adapt = adapt;
        }

        let initial = self.state.clone();
        let mut topo = initial.topo.clone();
        let mut params = initial.params.clone();
        let mut adapt = initial.adapt.clone();

        let s1 = self.hmc_block(&topo, &mut params, &mut adapt, false)?;
        let inter_x1 = self.log_target(&topo, &params);

        let moves = *self.cfg.moves_at(i);
        let (new_topo, new_params, prop) = propose_topology(
            &topo,
            &params,
            &moves,
            self.prior,
            self.cfg.variant,
            task,
            self.cfg.max_internal,
            &mut self.rng,
        );
        topo = new_topo;
        params = new_params;
        let inter_x2 = self.log_target(&topo, &params);

        let changed = prop.kind != Move::Stay;
        let s2 = self.hmc_block(&topo, &mut params, &mut adapt, burnin && changed)?;
        let final_logpost = self.log_target(&topo, &params);

        let log_alpha = if burnin {
            log_accept_burnin(initial.logpost, final_logpost, prop.log_proposal_ratio)
        } else {
            log_accept_full(
                initial.logpost,
                final_logpost,
                [initial.logpost, inter_x1, inter_x2, final_logpost],
                prop.log_proposal_ratio,
            )
        };
        let accepted = log_alpha >= 0.0 || self.rng.random::<f64>().ln() < log_alpha;
        if accepted {
            self.state = TreeState { topo, params, logpost: final_logpost, adapt };
        }
        self.iteration += 1;
        Ok(ChainSample {
            iteration: i,
            burnin,
            kind: prop.kind,
            accepted,
            logpost: self.state.logpost,
            n_leaves: self.state.n_leaves(),
            topo: self.state.topo.clone(),
            params: self.state.params.clone(),
            step_size: self.state.adapt.step_size,
            n_leapfrog: s1.n_leapfrog + s2.n_leapfrog,
            divergences: s1.divergences + s2.divergences,
        })
    }

    /// Run `n` iterations, passing each record to `sink`.
    pub fn run(&mut self, n: usize, mut sink: impl FnMut(&ChainSample)) -> Result<(), SamplerError> {
        for _ in 0..n {
            let s = self.step()?;
            sink(&s);
        }
        Ok(())
    }
}

/// Run a chain from the root-only tree and collect every record.
pub fn run_chain<R: Rng>(
    data: &Dataset<f64>,
    prior: &PriorConfig<f64>,
    cfg: SamplerConfig,
    n: usize,
    rng: R,
) -> Result<Vec<ChainSample>, SamplerError> {
    let mut chain = Chain::new(data, prior, cfg, rng)?;
    let mut out = Vec::with_capacity(n);
    chain.run(n, |s| out.push(s.clone()))?;
    Ok(out)
}
