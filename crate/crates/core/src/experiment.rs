//! Multi-restart runs: chain traces, metric traces, report and manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, LoadedData, RunConfig};
use crate::data::{DatasetManifest, Task};
use crate::metrics::{self, ChainMetrics, MetricsError, MetricsReport, Routing};
use crate::model::{PriorConfig, SplitRule, TreeParams};
use crate::rjsampler::{Chain, ChainSample, SamplerError};
use crate::topology::{NodeId, TreeTopology};
use crate::transforms::stickbreak_constrain;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {source}")]
    Trace { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

/// Split of one internal node in constrained coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedSplit {
    pub node: NodeId,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

/// Tree parameters in constrained coordinates, for readers of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedParams {
    pub splits: Vec<ConstrainedSplit>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub leaf_mu: Vec<(NodeId, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl ConstrainedParams {
    pub fn of(params: &TreeParams<f64>) -> Self {
        let splits = params
            .splits
            .iter()
            .map(|(&node, s)| {
                let (index, weights) = match &s.rule {
                    SplitRule::Index(k) => (Some(*k), None),
                    SplitRule::Simplex(u) => (None, Some(stickbreak_constrain(u).simplex)),
                };
                ConstrainedSplit { node, tau: s.tau(), index, weights }
            })
            .collect();
        ConstrainedParams {
            splits,
            leaf_mu: params.leaf_mu.iter().map(|(&k, &v)| (k, v)).collect(),
            sigma: params.sigma(),
        }
    }
}

/// One line of a chain trace. `sample` holds the exact sampler state;
/// `constrained` repeats its parameters on their natural scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample: ChainSample,
    pub constrained: ConstrainedParams,
}

/// Appends trace records, one JSON object per line.
pub struct TraceWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, RunError> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(TraceWriter { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    pub fn write(&mut self, s: &ChainSample) -> Result<(), RunError> {
        let rec = TraceRecord { sample: s.clone(), constrained: ConstrainedParams::of(&s.params) };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), RunError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Parse a trace file back into samples.
pub fn read_trace(path: &Path) -> Result<Vec<ChainSample>, RunError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|source| RunError::Trace { path: path.display().to_string(), line: i + 1, source })?;
        out.push(rec.sample);
    }
    Ok(out)
}

/// Per-iteration metric trace: the test metric of each iteration's tree.
pub fn write_metric_trace(
    path: &Path,
    samples: &[ChainSample],
    data: &LoadedData,
    prior: &PriorConfig<f64>,
    h: f64,
) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let name = format!("test_{}", metrics::metric_name(data.train.task()));
    let write_err = |e: csv::Error| RunError::Io { path: path.display().to_string(), source: std::io::Error::other(e) };
    w.write_record(["iteration", name.as_str(), "n_leaves", "logpost", "accepted"]).map_err(write_err)?;
    let mut last: Option<(&TreeTopology, &TreeParams<f64>, f64)> = None;
    for s in samples {
        let m = match last {
            Some((t, p, m)) if *t == s.topo && *p == s.params => m,
            _ => metrics::predict_tree(&s.topo, &s.params, &data.train, prior, h, Routing::Soft, &data.test)
                .metric(&data.test),
        };
        last = Some((&s.topo, &s.params, m));
        w.write_record([
            s.iteration.to_string(),
            m.to_string(),
            s.n_leaves.to_string(),
            s.logpost.to_string(),
            s.accepted.to_string(),
        ])
        .map_err(write_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Outcome of one restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub restart: usize,
    pub seed: u64,
    pub trace: String,
    pub metric_trace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ChainMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub profile: String,
    pub task: Task,
    /// `test_metric` (per-sample mean) is the figure comparable to
    /// published per-chain results; `test_metric_ensemble` scores the
    /// averaged prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<MetricsReport>,
    pub chains: Vec<ChainOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub library_version: String,
    pub config: RunConfig,
    pub data: Vec<DatasetManifest>,
    pub chains: Vec<ChainOutcome>,
}

/// Run one restart: stream its trace, then score it.
pub fn run_restart(
    cfg: &RunConfig,
    data: &LoadedData,
    prior: &PriorConfig<f64>,
    restart: usize,
    out: &Path,
) -> Result<(Vec<ChainSample>, ChainMetrics), RunError> {
    let trace_path = out.join(trace_name(restart));
    let mut writer = TraceWriter::create(&trace_path)?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.chain_seed(restart));
    let mut chain = Chain::new(&data.train, prior, cfg.sampler(), rng)?;
    let mut samples = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let s = chain.step()?;
        writer.write(&s)?;
        log::debug!("restart {restart} iteration {} n_leaves {} accepted {}", s.iteration, s.n_leaves, s.accepted);
        samples.push(s);
    }
    writer.finish()?;
    write_metric_trace(&out.join(metric_trace_name(restart)), &samples, data, prior, cfg.h_final)?;
    let m = metrics::chain_metrics(&samples, &data.train, &data.test, prior, cfg.h_final, Routing::Soft)?;
    Ok((samples, m))
}

fn trace_name(r: usize) -> String {
    format!("chain_{r:02}.jsonl")
}

fn metric_trace_name(r: usize) -> String {
    format!("chain_{r:02}_metrics.csv")
}

/// Run every restart (up to `cfg.jobs` at once), then write the report and
/// manifest. Failed restarts are recorded and do not stop the others.
pub fn run(cfg: &RunConfig, base: &Path) -> Result<RunReport, RunError> {
    let data = cfg.data.load(cfg.data_seed, base)?;
    let prior = cfg.prior_for(data.train.n_x(), data.train.n_classes())?;
    prior.validate(data.train.n_x(), data.train.task(), data.train.n_classes()).map_err(SamplerError::from)?;
    let out = base.join(&cfg.out);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ChainMetrics, String>>>> = Mutex::new(vec![None; cfg.restarts]);
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(cfg.restarts) {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= cfg.restarts {
                    break;
                }
                log::info!("restart {r} (seed {}) started", cfg.chain_seed(r));
                let res = run_restart(cfg, &data, &prior, r, &out).map(|(_, m)| m).map_err(|e| e.to_string());
                match &res {
                    Ok(m) => log::info!("restart {r} done: test metric {:.5}, {:.2} leaves", m.test_metric, m.ave_leaves),
                    Err(e) => log::error!("restart {r} failed: {e}"),
                }
                results.lock().unwrap()[r] = Some(res);
            });
        }
    });

    let mut chains = Vec::with_capacity(cfg.restarts);
    let mut good = Vec::new();
    for (r, res) in results.into_inner().unwrap().into_iter().enumerate() {
        let res = res.expect("every restart ran");
        let (metrics, error) = match res {
            Ok(m) => {
                good.push(m.clone());
                (Some(m), None)
            }
            Err(e) => (None, Some(e)),
        };
        chains.push(ChainOutcome {
            restart: r,
            seed: cfg.chain_seed(r),
            trace: trace_name(r),
            metric_trace: metric_trace_name(r),
            metrics,
            error,
        });
    }
    let mut notes = Vec::new();
    let summary = match metrics::summarize(data.train.task(), good) {
        Ok(s) => Some(s),
        Err(e) => {
            notes.push(format!("no summary: {e}"));
            None
        }
    };
    let report = RunReport {
        method: cfg.method.name().to_string(),
        profile: cfg.profile.clone(),
        task: data.train.task(),
        summary,
        chains: chains.clone(),
        notes,
    };
    write_json(&out.join("report.json"), &report)?;
    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        data: data.manifests.clone(),
        chains,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
