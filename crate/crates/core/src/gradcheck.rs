//! Finite-difference verification of the analytical log-posterior gradient.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{Dataset, Targets, Task};
use crate::model::{sample_params, CoordKey, Posterior, PriorConfig, TreeParams, Variant, Workspace};
use crate::topology::TreeTopology;

/// A randomly generated model/data pair.
#[derive(Debug, Clone)]
pub struct Instance {
    pub data: Dataset<f64>,
    pub topo: TreeTopology,
    pub params: TreeParams<f64>,
    pub prior: PriorConfig<f64>,
    pub h: f64,
}

/// Grow a uniformly chosen leaf `n` times starting from the root.
pub fn random_topology<R: Rng + ?Sized>(n: usize, rng: &mut R) -> TreeTopology {
    let mut topo = TreeTopology::root_only();
    for _ in 0..n {
        let leaf = *topo.leaves().choose(rng).expect("a tree always has a leaf");
        topo = topo.grow(leaf).expect("growing a leaf");
    }
    topo
}

/// Random instance with `n` internal nodes, `n_x` inputs and `n_rows`
/// datapoints. Classification uses `n_classes` labels.
pub fn random_instance<R: Rng + ?Sized>(
    variant: Variant,
    task: Task,
    n: usize,
    n_x: usize,
    n_classes: usize,
    n_rows: usize,
    rng: &mut R,
) -> Instance {
    let x: Vec<f64> = (0..n_rows * n_x).map(|_| rng.random::<f64>()).collect();
    let targets = match task {
        Task::Classification => Targets::Labels {
            y: (0..n_rows).map(|_| rng.random_range(0..n_classes)).collect(),
            n_classes,
        },
        Task::Regression => Targets::Real(
            (0..n_rows)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    1.0 + 2.0 * z
                })
                .collect(),
        ),
    };
    let data = Dataset::from_normalized(x, n_x, targets).expect("valid random dataset");
    let topo = random_topology(n, rng);
    let mut prior = PriorConfig::new(0.45, 2.0, n_x, if task == Task::Classification { n_classes } else { 0 });
    if task == Task::Classification {
        prior.class_alpha = (0..n_classes).map(|_| rng.random_range(0.5..2.0)).collect();
    } else {
        prior.mu_mean = rng.random_range(-1.0..1.0);
        prior.mu_var = rng.random_range(0.5..3.0);
    }
    prior.simplex_alpha = (0..n_x).map(|_| rng.random_range(0.7..2.0)).collect();
    let mut params = sample_params(&topo, &prior, variant, task, rng);
    for s in params.splits.values_mut() {
        s.tau_unc = rng.random_range(-2.0..2.0);
    }
    if let Some(s) = params.sigma_unc.as_mut() {
        *s = rng.random_range(-1.0..0.7);
    }
    let h = rng.random_range(0.05..0.5);
    Instance { data, topo, params, prior, h }
}

/// Richardson-extrapolated central difference of `f` along coordinate `j`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, u: &[f64], j: usize, step: f64) -> f64 {
    let mut v = u.to_vec();
    let mut d = |e: f64| {
        v[j] = u[j] + e;
        let fp = f(&v);
        v[j] = u[j] - e;
        let fm = f(&v);
        v[j] = u[j];
        (fp - fm) / (2.0 * e)
    };
    let coarse = d(step);
    let fine = d(step / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, 1e-3)`,
/// so that a threshold of `1e-5` also accepts absolute errors below `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub key: CoordKey,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare `grad` against finite differences of `f` at `u`.
pub fn check_coordinates(
    keys: &[CoordKey],
    mut f: impl FnMut(&[f64]) -> f64,
    grad: &[f64],
    u: &[f64],
) -> Vec<CoordCheck> {
    keys.iter()
        .enumerate()
        .map(|(j, &key)| {
            let numeric = central_difference(&mut f, u, j, 1e-4);
            CoordCheck { key, analytic: grad[j], numeric, rel_error: relative_error(grad[j], numeric) }
        })
        .collect()
}

/// Gradient check of one instance's unconstrained log-posterior.
pub fn check_instance(inst: &Instance) -> Vec<CoordCheck> {
    let post = Posterior::new(&inst.data, &inst.topo, &inst.params, &inst.prior, inst.h);
    let u = post.position(&inst.params);
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; post.dim()];
    post.evaluate_with_grad(&u, &mut grad, &mut ws);
    check_coordinates(post.keys(), |v| post.evaluate(v, &mut ws).unconstrained(), &grad, &u)
}

/// Worst error per coordinate family for one variant and task.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub variant: Variant,
    pub task: Task,
    pub family: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
}

pub const FAMILY_NAMES: [&str; 4] = ["tau", "delta", "mu", "sigma"];

/// Run `trials` random instances for every variant and task.
pub fn run(trials: usize, seed: u64, max_internal: usize) -> Vec<FamilyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for variant in [Variant::Df, Variant::Dfi] {
        for task in [Task::Classification, Task::Regression] {
            let mut worst = [0.0f64; 4];
            let mut counts = [0usize; 4];
            for _ in 0..trials {
                let n = rng.random_range(0..=max_internal);
                let n_x = rng.random_range(1..=4);
                let m = rng.random_range(2..=3);
                let rows = rng.random_range(1..=50);
                let inst = random_instance(variant, task, n, n_x, m, rows, &mut rng);
                for c in check_instance(&inst) {
                    let f = c.key.family();
                    worst[f] = worst[f].max(c.rel_error);
                    counts[f] += 1;
                }
            }
            for f in 0..4 {
                if counts[f] > 0 {
                    out.push(FamilyReport {
                        variant,
                        task,
                        family: FAMILY_NAMES[f],
                        coords: counts[f],
                        max_rel_error: worst[f],
                    });
                }
            }
        }
    }
    out
}
