//! No-U-Turn sampler with a diagonal metric, dual-averaging step size
//! adaptation and windowed variance adaptation.
//!
//! The transition is the multinomial variant with biased progressive
//! sampling between subtrees and the generalised U-turn criterion, including
//! the extra checks across the boundary of merged subtrees.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::log_add_exp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NutsError {
    #[error("log density is not finite at the initial position")]
    NonFiniteStart,
    #[error("warm-up of {0} iterations is too short (need at least 20)")]
    WarmupTooShort(usize),
    #[error("step size search left the range [1e-12, 1e7]")]
    StepSizeSearch,
}

/// Sampler controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NutsConfig {
    /// Largest subtree has `2^max_depth` leapfrog steps; `0` is a single
    /// leapfrog step with a Metropolis correction.
    pub max_depth: usize,
    pub max_delta_h: f64,
    pub target_accept: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            max_depth: 9,
            max_delta_h: 1000.0,
            target_accept: 0.8,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            init_buffer: 75,
            term_buffer: 50,
            base_window: 25,
        }
    }
}

/// Position with its cached log density and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcState {
    pub position: Vec<f64>,
    pub logpost: f64,
    pub grad: Vec<f64>,
}

impl HmcState {
    pub fn new(position: Vec<f64>, f: &mut impl FnMut(&[f64], &mut [f64]) -> f64) -> Self {
        let mut grad = vec![0.0; position.len()];
        let logpost = f(&position, &mut grad);
        HmcState { position, logpost, grad }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    fn is_finite(&self) -> bool {
        self.logpost.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutsDiagnostics {
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub accept_stat: f64,
    pub energy: f64,
}

/// One velocity-Verlet step. The returned state may carry a non-finite
/// log density or gradient; callers treat that as a divergence.
pub fn leapfrog(
    state: &HmcState,
    momentum: &[f64],
    eps: f64,
    inv_mass: &[f64],
    f: &mut impl FnMut(&[f64], &mut [f64]) -> f64,
) -> (HmcState, Vec<f64>) {
    let mut p: Vec<f64> = momentum.iter().zip(&state.grad).map(|(&p, &g)| p + 0.5 * eps * g).collect();
    let q: Vec<f64> = state
        .position
        .iter()
        .zip(&p)
        .zip(inv_mass)
        .map(|((&q, &p), &m)| q + eps * m * p)
        .collect();
    let mut grad = vec![0.0; q.len()];
    let logpost = f(&q, &mut grad);
    for (pi, &g) in p.iter_mut().zip(&grad) {
        *pi += 0.5 * eps * g;
    }
    (HmcState { position: q, logpost, grad }, p)
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(&p, &m)| p * p * m).sum::<f64>()
}

fn hamiltonian(state: &HmcState, p: &[f64], inv_mass: &[f64]) -> f64 {
    let h = -state.logpost + kinetic(p, inv_mass);
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

fn sample_momentum<R: Rng + ?Sized>(inv_mass: &[f64], rng: &mut R) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            z / m.sqrt()
        })
        .collect()
}

fn sharp(p: &[f64], inv_mass: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_mass).map(|(&p, &m)| p * m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Endpoint data of a subtree, in the direction of integration.
struct Subtree {
    /// Multinomial draw from the subtree.
    propose: HmcState,
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
    log_sum_weight: f64,
}

struct Trajectory<'a, F, R: ?Sized> {
    f: &'a mut F,
    rng: &'a mut R,
    inv_mass: &'a [f64],
    eps: f64,
    h0: f64,
    max_delta_h: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<F, R> Trajectory<'_, F, R>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    /// Build a subtree of `2^depth` steps starting from `(z, p)` in the
    /// direction of the sign of `self.eps`. Returns the end point and the
    /// subtree, or `None` if it diverged or turned back on itself.
    fn build(&mut self, depth: usize, z: HmcState, p: Vec<f64>) -> (HmcState, Vec<f64>, Option<Subtree>) {
        if depth == 0 {
            let (z1, p1) = leapfrog(&z, &p, self.eps, self.inv_mass, self.f);
            self.n_leapfrog += 1;
            let h = if z1.is_finite() { hamiltonian(&z1, &p1, self.inv_mass) } else { f64::INFINITY };
            if h - self.h0 > self.max_delta_h {
                self.divergent = true;
            }
            let log_w = self.h0 - h;
            self.sum_metro_prob += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            if self.divergent {
                return (z1, p1, None);
            }
            let ps = sharp(&p1, self.inv_mass);
            let sub = Subtree {
                propose: z1.clone(),
                p_sharp_beg: ps.clone(),
                p_sharp_end: ps,
                p_beg: p1.clone(),
                p_end: p1.clone(),
                rho: p1.clone(),
                log_sum_weight: log_w,
            };
            return (z1, p1, Some(sub));
        }

        let (z, p, init) = self.build(depth - 1, z, p);
        let Some(init) = init else { return (z, p, None) };
        let (z, p, fin) = self.build(depth - 1, z, p);
        let Some(fin) = fin else { return (z, p, None) };

        let log_sum_weight = log_add_exp(init.log_sum_weight, fin.log_sum_weight);
        let propose = if fin.log_sum_weight > log_sum_weight
            || self.rng.random::<f64>() < (fin.log_sum_weight - log_sum_weight).exp()
        {
            fin.propose
        } else {
            init.propose
        };
        let rho = add(&init.rho, &fin.rho);
        let mut ok = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        ok &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &add(&init.rho, &fin.p_beg));
        ok &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &add(&fin.rho, &init.p_end));
        if !ok {
            return (z, p, None);
        }
        let sub = Subtree {
            propose,
            p_sharp_beg: init.p_sharp_beg,
            p_sharp_end: fin.p_sharp_end,
            p_beg: init.p_beg,
            p_end: fin.p_end,
            rho,
            log_sum_weight,
        };
        (z, p, Some(sub))
    }
}

/// One NUTS transition from `state` with step size `eps` and diagonal
/// inverse metric `inv_mass` (the target's variance scale).
pub fn nuts_step<F, R>(
    state: &HmcState,
    eps: f64,
    inv_mass: &[f64],
    cfg: &NutsConfig,
    f: &mut F,
    rng: &mut R,
) -> (HmcState, NutsDiagnostics)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    let p0 = sample_momentum(inv_mass, rng);
    let h0 = hamiltonian(state, &p0, inv_mass);
    if state.dim() == 0 {
        let diag = NutsDiagnostics { tree_depth: 0, n_leapfrog: 0, divergent: false, accept_stat: 1.0, energy: h0 };
        return (state.clone(), diag);
    }

    // trajectory ends: states to continue from, and end momenta for the
    // U-turn checks
    let ps0 = sharp(&p0, inv_mass);
    let (mut z_bck, mut p_bck) = (state.clone(), p0.clone());
    let (mut z_fwd, mut p_fwd) = (state.clone(), p0.clone());
    let (mut ps_bck, mut ps_fwd) = (ps0.clone(), ps0);
    let mut rho = p0;
    let mut sample = state.clone();
    let mut log_sum_weight = 0.0;

    let mut traj = Trajectory {
        f,
        rng,
        inv_mass,
        eps,
        h0,
        max_delta_h: cfg.max_delta_h,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    let mut tree_depth = 0;
    for depth in 0..=cfg.max_depth {
        let forward = traj.rng.random::<f64>() > 0.5;
        let (old_p_fwd, old_p_bck) = (p_fwd.clone(), p_bck.clone());
        let sub = if forward {
            traj.eps = eps.abs();
            let (z, p, sub) = traj.build(depth, z_fwd.clone(), p_fwd.clone());
            z_fwd = z;
            p_fwd = p;
            sub
        } else {
            traj.eps = -eps.abs();
            let (z, p, sub) = traj.build(depth, z_bck.clone(), p_bck.clone());
            z_bck = z;
            p_bck = p;
            sub
        };
        let Some(sub) = sub else { break };
        tree_depth = depth;

        if sub.log_sum_weight > log_sum_weight
            || traj.rng.random::<f64>() < (sub.log_sum_weight - log_sum_weight).exp()
        {
            sample = sub.propose;
        }
        log_sum_weight = log_add_exp(log_sum_weight, sub.log_sum_weight);

        // `sub.*_beg` is adjacent to the old trajectory, `sub.*_end` is the new far end
        let total = add(&rho, &sub.rho);
        let ok = if forward {
            no_u_turn(&ps_bck, &sub.p_sharp_end, &total)
                && no_u_turn(&ps_bck, &sub.p_sharp_beg, &add(&rho, &sub.p_beg))
                && no_u_turn(&ps_fwd, &sub.p_sharp_end, &add(&sub.rho, &old_p_fwd))
        } else {
            no_u_turn(&sub.p_sharp_end, &ps_fwd, &total)
                && no_u_turn(&sub.p_sharp_beg, &ps_fwd, &add(&rho, &sub.p_beg))
                && no_u_turn(&sub.p_sharp_end, &ps_bck, &add(&sub.rho, &old_p_bck))
        };
        rho = total;
        if forward {
            ps_fwd = sub.p_sharp_end;
        } else {
            ps_bck = sub.p_sharp_end;
        }
        if !ok {
            break;
        }
    }

    let accept_stat = if traj.n_leapfrog > 0 { traj.sum_metro_prob / traj.n_leapfrog as f64 } else { 0.0 };
    let diag = NutsDiagnostics {
        tree_depth,
        n_leapfrog: traj.n_leapfrog,
        divergent: traj.divergent,
        accept_stat,
        energy: -sample.logpost,
    };
    (sample, diag)
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
pub fn init_stepsize<F, R>(
    state: &HmcState,
    eps: f64,
    inv_mass: &[f64],
    f: &mut F,
    rng: &mut R,
) -> Result<f64, NutsError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    if state.dim() == 0 {
        return Ok(eps);
    }
    let mut eps = eps;
    let mut trial = |eps: f64, rng: &mut R| {
        let p = sample_momentum(inv_mass, rng);
        let h0 = hamiltonian(state, &p, inv_mass);
        let (z, p1) = leapfrog(state, &p, eps, inv_mass, f);
        let h = if z.is_finite() { hamiltonian(&z, &p1, inv_mass) } else { f64::INFINITY };
        h0 - h
    };
    let threshold = 0.8f64.ln();
    let up = trial(eps, rng) > threshold;
    for _ in 0..200 {
        let dh = trial(eps, rng);
        if up && !(dh > threshold) || !up && !(dh < threshold) {
            return Ok(eps);
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
        if !(1e-12..=1e7).contains(&eps) {
            return Err(NutsError::StepSizeSearch);
        }
    }
    Ok(eps)
}

/// Dual-averaging step size adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(eps: f64, cfg: &NutsConfig) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            target: cfg.target_accept,
            gamma: cfg.gamma,
            t0: cfg.t0,
            kappa: cfg.kappa,
        }
    }

    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Update with one acceptance statistic; returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Final step size: the averaged iterate.
    pub fn finalize(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warm-up window layout: an initial fast window, doubling slow windows
/// for variance estimation, and a terminal fast window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub num_warmup: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
}

impl WindowLayout {
    pub fn new(num_warmup: usize, cfg: &NutsConfig) -> Result<Self, NutsError> {
        if num_warmup < 20 {
            return Err(NutsError::WarmupTooShort(num_warmup));
        }
        let mut w = WindowLayout {
            num_warmup,
            init_buffer: cfg.init_buffer,
            term_buffer: cfg.term_buffer,
            base_window: cfg.base_window,
        };
        if cfg.init_buffer + cfg.base_window + cfg.term_buffer > num_warmup {
            w.init_buffer = (0.15 * num_warmup as f64) as usize;
            w.term_buffer = (0.1 * num_warmup as f64) as usize;
            w.base_window = num_warmup - (w.init_buffer + w.term_buffer);
        }
        Ok(w)
    }

    /// End of the initial fast window (`w_1`).
    pub fn w1(&self) -> usize {
        self.init_buffer
    }

    /// Start of the terminal fast window (`w_{-2}`).
    pub fn w_minus2(&self) -> usize {
        self.num_warmup - self.term_buffer
    }

    /// Last iteration of each slow window, in order.
    pub fn slow_window_ends(&self) -> Vec<usize> {
        let last = self.num_warmup - self.term_buffer - 1;
        let mut size = self.base_window;
        let mut next = self.init_buffer + size - 1;
        let mut ends = Vec::new();
        loop {
            ends.push(next);
            if next >= last {
                break;
            }
            size *= 2;
            next += size;
            if next != last && next + 2 * size >= self.num_warmup - self.term_buffer {
                next = last;
            }
        }
        ends
    }
}

/// Split-sharpness annealing across warm-up iterations.
///
/// `h_init` before `w_1`, then `h_init + j (h_final - h_init) / l_w` up to
/// `w_{-2} - c`, and `h_final` afterwards, with `l_w = w_{-2} - w_1 + c`.
/// The offset `c` is 100 when the slow phase spans at least 200 iterations
/// and half the slow phase otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessSchedule {
    pub h_init: f64,
    pub h_final: f64,
    pub w1: usize,
    pub w_minus2: usize,
    pub offset: usize,
}

impl SharpnessSchedule {
    pub fn new(h_init: f64, h_final: f64, layout: &WindowLayout) -> Self {
        let w1 = layout.w1();
        let w_minus2 = layout.w_minus2();
        let span = w_minus2.saturating_sub(w1);
        let offset = if span >= 200 { 100 } else { span / 2 };
        SharpnessSchedule { h_init, h_final, w1, w_minus2, offset }
    }

    pub fn constant(h: f64) -> Self {
        SharpnessSchedule { h_init: h, h_final: h, w1: 0, w_minus2: 0, offset: 0 }
    }

    pub fn span(&self) -> usize {
        self.w_minus2 - self.w1 + self.offset
    }

    pub fn h_at(&self, j: usize) -> f64 {
        if j < self.w1 {
            self.h_init
        } else if j + self.offset <= self.w_minus2 {
            self.h_init + j as f64 * (self.h_final - self.h_init) / self.span() as f64
        } else {
            self.h_final
        }
    }
}

/// Running mean and variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }
}

/// Adapted sampler settings for one parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

impl Adaptation {
    pub fn unit(dim: usize) -> Self {
        Adaptation { step_size: 0.1, inv_mass: vec![1.0; dim] }
    }
}

/// Summary of a warm-up run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupStats {
    pub iterations: usize,
    pub mean_accept: f64,
    pub divergences: usize,
    pub n_leapfrog: usize,
}

/// Adapt step size and diagonal metric over `num_warmup` NUTS transitions.
///
/// `f(h, q, grad)` evaluates the target at split sharpness `h`; the
/// sharpness follows `sched` and is fixed within each transition.
/// On return `state` is evaluated at `sched.h_final`.
#[allow(clippy::too_many_arguments)]
pub fn warmup<F, R>(
    state: &mut HmcState,
    adapt: &mut Adaptation,
    num_warmup: usize,
    sched: Option<SharpnessSchedule>,
    cfg: &NutsConfig,
    f: &mut F,
    rng: &mut R,
) -> Result<WarmupStats, NutsError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    let layout = WindowLayout::new(num_warmup, cfg)?;
    let dim = state.dim();
    let mut stats = WarmupStats { iterations: num_warmup, ..Default::default() };
    if dim == 0 {
        return Ok(stats);
    }
    let sched = sched.map(|s| SharpnessSchedule::new(s.h_init, s.h_final, &layout));
    let h_at = |j: usize| sched.map(|s| s.h_at(j)).unwrap_or(f64::NAN);
    let mut current_h = h_at(0);
    *state = HmcState::new(std::mem::take(&mut state.position), &mut |q: &[f64], g: &mut [f64]| f(current_h, q, g));
    if !state.is_finite() {
        return Err(NutsError::NonFiniteStart);
    }

    let mut eps = init_stepsize(state, adapt.step_size, &adapt.inv_mass, &mut |q: &[f64], g: &mut [f64]| f(current_h, q, g), rng)?;
    let mut da = DualAveraging::new(eps, cfg);
    let ends = layout.slow_window_ends();
    let mut window = Welford::new(dim);
    let mut accept_sum = 0.0;

    for j in 0..num_warmup {
        let h = h_at(j);
        if h.to_bits() != current_h.to_bits() {
            current_h = h;
            *state = HmcState::new(std::mem::take(&mut state.position), &mut |q: &[f64], g: &mut [f64]| f(current_h, q, g));
        }
        let (next, diag) = nuts_step(state, eps, &adapt.inv_mass, cfg, &mut |q: &[f64], g: &mut [f64]| f(current_h, q, g), rng);
        *state = next;
        accept_sum += diag.accept_stat;
        stats.divergences += diag.divergent as usize;
        stats.n_leapfrog += diag.n_leapfrog;
        eps = da.learn(diag.accept_stat);

        if j >= layout.init_buffer && j < layout.w_minus2() {
            window.add(&state.position);
        }
        if ends.contains(&j) {
            let n = window.count() as f64;
            adapt.inv_mass = window
                .variance()
                .into_iter()
                .map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0)))
                .collect();
            window = Welford::new(dim);
            eps = init_stepsize(state, eps, &adapt.inv_mass, &mut |q: &[f64], g: &mut [f64]| f(current_h, q, g), rng)?;
            da.restart(eps);
        }
    }
    adapt.step_size = da.finalize();
    stats.mean_accept = accept_sum / num_warmup as f64;
    if let Some(s) = sched {
        if current_h.to_bits() != s.h_final.to_bits() {
            let h = s.h_final;
            *state = HmcState::new(std::mem::take(&mut state.position), &mut |q: &[f64], g: &mut [f64]| f(h, q, g));
        }
    }
    Ok(stats)
}
