//! Deterministic parallel ensembles.
//!
//! Paths are independent work items keyed by `(seed, path id)`; results are
//! collected in path-id order, so the summary is a pure function of the
//! configuration and seed whatever the worker count or scheduling.

pub mod output;
pub mod philox;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::integrate::{simulate_path, NoiseSource, Observer, SchemeSpec, StepView};
use crate::lilstat::{v_ensemble, LilAccumulator, LilCheckpoint, VEstimate};
use crate::model::{Model, TestFunction};

pub use philox::{gaussian_draw, gaussian_fill, StreamKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("config fingerprints differ ({0} vs {1})")]
    FingerprintMismatch(String, String),
    #[error("path id {0} appears in both summaries")]
    OverlappingPaths(u64),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("ensemble configuration error: {0}")]
    Config(String),
}

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "ERGOLIL_WORKERS";
/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "ERGOLIL_OUT_DIR";

/// Worker count from the environment, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&w| w > 0)
}

/// Runs `work(id)` for every path id on `workers` threads and returns the
/// results in id order.
///
/// With `fail_fast`, paths with ids above the smallest failing id are skipped
/// and dropped, which keeps the returned prefix independent of scheduling.
pub fn run_paths<T, E, F>(
    ids: std::ops::Range<u64>,
    workers: usize,
    fail_fast: bool,
    work: F,
) -> Result<Vec<(u64, Result<T, E>)>, McError>
where
    T: Send,
    E: Send,
    F: Fn(u64) -> Result<T, E> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| McError::Pool(e.to_string()))?;
    let first_failure = AtomicU64::new(u64::MAX);
    let results: Vec<Option<(u64, Result<T, E>)>> = pool.install(|| {
        ids.into_par_iter()
            .map(|id| {
                if fail_fast && id > first_failure.load(Ordering::SeqCst) {
                    return None;
                }
                let r = work(id);
                if fail_fast && r.is_err() {
                    first_failure.fetch_min(id, Ordering::SeqCst);
                }
                Some((id, r))
            })
            .collect()
    });
    let cut = first_failure.load(Ordering::SeqCst);
    Ok(results.into_iter().flatten().filter(|(id, _)| !fail_fast || *id <= cut).collect())
}

/// One recorded state sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    pub n: u64,
    pub t: f64,
    pub state: Vec<f64>,
}

/// Result of one successful path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub path_id: u64,
    pub lil: Vec<LilCheckpoint>,
    pub states: Vec<StateSample>,
    /// `S_T`.
    pub final_s: f64,
    /// `T = t_{n_max}`.
    pub final_t: f64,
    pub final_state: Vec<f64>,
    pub run_max: Option<f64>,
    pub run_min: Option<f64>,
    pub nonmonotone: bool,
    /// Wall-clock time; informational only and never serialised.
    pub runtime: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathFailure {
    pub path_id: u64,
    pub step: u64,
    pub message: String,
}

/// What every path of an ensemble does.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub model: Model,
    pub scheme: SchemeSpec,
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
    pub f: TestFunction,
    pub mu: f64,
    /// Centre by the running mean instead of `mu` (biases `v̂²` down).
    pub self_center: bool,
    pub seed: u64,
    pub paths: u64,
    pub first_path: u64,
    /// Geometric checkpoint log of the statistic: first time and ratio.
    pub lil_first: f64,
    pub lil_ratio: f64,
    /// Running extrema of the statistic only count `t ≥ window_start`.
    pub window_start: f64,
    /// Step indices at which the state is recorded.
    pub state_checkpoints: Vec<u64>,
    /// Paths whose noise turns to NaN at the given step (failure injection).
    pub inject_failures: Vec<(u64, u64)>,
    /// Canonical text identifying the configuration; hashed into the fingerprint.
    pub description: String,
}

impl EnsembleSpec {
    pub fn new(model: Model, scheme: SchemeSpec, grid: TimeGrid, x0: Vec<f64>, f: TestFunction, seed: u64, paths: u64) -> Self {
        let mu = f.mean_or_zero();
        let description = format!("{model:?}|{scheme:?}|{:?}|{}|{x0:?}|{f:?}", grid.spec(), grid.n_max());
        Self {
            model,
            scheme,
            grid,
            x0,
            f,
            mu,
            self_center: false,
            seed,
            paths,
            first_path: 0,
            lil_first: 1.0,
            lil_ratio: 1.2,
            window_start: 0.0,
            state_checkpoints: Vec::new(),
            inject_failures: Vec::new(),
            description,
        }
    }

    /// SHA-256 of the description and seed.
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&format!("{}|seed={}", self.description, self.seed))
    }
}

pub fn config_fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Observer feeding the time-average accumulator and recording states.
pub struct LilPathObserver<'a> {
    pub f: &'a TestFunction,
    pub acc: LilAccumulator,
    state_checkpoints: Vec<u64>,
}

impl<'a> LilPathObserver<'a> {
    pub fn new(f: &'a TestFunction, acc: LilAccumulator, state_checkpoints: Vec<u64>) -> Self {
        Self { f, acc, state_checkpoints }
    }
}

impl Observer for LilPathObserver<'_> {
    fn checkpoints(&self) -> &[u64] {
        &self.state_checkpoints
    }

    fn on_step(&mut self, view: &StepView<'_>) {
        // Non-finite states stop the path in the integrator before this point.
        let _ = self.acc.update(view.tau, self.f.eval(view.state));
    }
}

/// Aggregated ensemble output.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub fingerprint: String,
    pub records: Vec<PathRecord>,
    pub failures: Vec<PathFailure>,
    pub estimates: Vec<VEstimate>,
}

impl EnsembleSummary {
    pub fn empty(fingerprint: impl Into<String>) -> Self {
        Self { fingerprint: fingerprint.into(), records: Vec::new(), failures: Vec::new(), estimates: Vec::new() }
    }

    /// `(S_T, T)` of every successful path.
    pub fn finals(&self) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (r.final_s, r.final_t)).collect()
    }

    fn recompute(&mut self) {
        self.records.sort_by_key(|r| r.path_id);
        self.failures.sort_by_key(|f| f.path_id);
        self.estimates = v_ensemble(&self.finals()).into_iter().collect();
    }
}

/// Simulates one path of the ensemble.
pub fn run_single_path(spec: &EnsembleSpec, path_id: u64) -> Result<PathRecord, PathFailure> {
    let start = Instant::now();
    let mut noise = NoiseSource::counter(spec.seed, path_id);
    if let Some(&(_, step)) = spec.inject_failures.iter().find(|(p, _)| *p == path_id) {
        noise = NoiseSource::FailAt { at_step: step, inner: Box::new(noise) };
    }
    let acc = if spec.self_center { LilAccumulator::self_centering() } else { LilAccumulator::new(spec.mu) };
    let acc = acc
        .with_checkpoints(spec.lil_first, spec.lil_ratio)
        .with_window_start(spec.window_start);
    let mut obs = LilPathObserver::new(&spec.f, acc, spec.state_checkpoints.clone());
    let outcome = simulate_path(&spec.model, &spec.scheme, &spec.grid, &spec.x0, &noise, &mut [&mut obs])
        .map_err(|e| PathFailure { path_id, step: e.n, message: e.to_string() })?;
    let states = outcome.records.into_iter().map(|r| StateSample { n: r.n, t: r.t, state: r.values }).collect();
    Ok(PathRecord {
        path_id,
        lil: obs.acc.checkpoints().to_vec(),
        states,
        final_s: obs.acc.s(),
        final_t: outcome.last.t,
        final_state: outcome.last.state,
        run_max: obs.acc.run_max(),
        run_min: obs.acc.run_min(),
        nonmonotone: outcome.nonmonotone,
        runtime: start.elapsed(),
    })
}

/// Simulates all paths of `spec` on `workers` threads.
pub fn run_ensemble(spec: &EnsembleSpec, workers: usize, fail_fast: bool) -> Result<EnsembleSummary, McError> {
    if spec.paths == 0 {
        return Err(McError::Config("at least one path is required".into()));
    }
    let ids = spec.first_path..spec.first_path + spec.paths;
    let results = run_paths(ids, workers, fail_fast, |id| run_single_path(spec, id))?;
    let mut summary = EnsembleSummary::empty(spec.fingerprint());
    for (_, r) in results {
        match r {
            Ok(rec) => summary.records.push(rec),
            Err(fail) => summary.failures.push(fail),
        }
    }
    summary.recompute();
    Ok(summary)
}

/// Union of two summaries of the same configuration over disjoint paths.
pub fn merge_summaries(a: &EnsembleSummary, b: &EnsembleSummary) -> Result<EnsembleSummary, McError> {
    if a.fingerprint != b.fingerprint {
        return Err(McError::FingerprintMismatch(a.fingerprint.clone(), b.fingerprint.clone()));
    }
    let ids_a: std::collections::BTreeSet<u64> =
        a.records.iter().map(|r| r.path_id).chain(a.failures.iter().map(|f| f.path_id)).collect();
    for id in b.records.iter().map(|r| r.path_id).chain(b.failures.iter().map(|f| f.path_id)) {
        if ids_a.contains(&id) {
            return Err(McError::OverlappingPaths(id));
        }
    }
    let mut out = EnsembleSummary::empty(a.fingerprint.clone());
    out.records = a.records.iter().chain(&b.records).cloned().collect();
    out.failures = a.failures.iter().chain(&b.failures).cloned().collect();
    out.recompute();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, StepSpec};
    use crate::model::SodeModel;

    fn spec(paths: u64) -> EnsembleSpec {
        let model = Model::Sode(SodeModel::ornstein_uhlenbeck(1.0, 1.0).unwrap());
        let grid = build_grid(StepSpec::harmonic(), 2000).unwrap();
        let mut s = EnsembleSpec::new(model, SchemeSpec::bem(), grid, vec![0.0], TestFunction::identity(), 77, paths);
        s.state_checkpoints = vec![10, 1000];
        s
    }

    fn strip_runtime(mut s: EnsembleSummary) -> EnsembleSummary {
        s.records.iter_mut().for_each(|r| r.runtime = Duration::ZERO);
        s
    }

    #[test]
    fn record_count_and_worker_independence() {
        let sp = spec(6);
        let one = strip_runtime(run_ensemble(&sp, 1, false).unwrap());
        let four = strip_runtime(run_ensemble(&sp, 4, false).unwrap());
        assert_eq!(one.records.len(), 6);
        assert_eq!(one, four);
        assert_eq!(one.records[0].states.len(), 2);
        assert_eq!(spec(2).paths, run_ensemble(&spec(2), 2, false).unwrap().records.len() as u64);
    }

    #[test]
    fn failures_are_recorded() {
        let mut sp = spec(2);
        sp.first_path = 2;
        sp.inject_failures = vec![(3, 5)];
        let s = run_ensemble(&sp, 2, false).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.failures.len(), 1);
        assert_eq!(s.failures[0].path_id, 3);
        assert_eq!(s.failures[0].step, 5);
    }

    #[test]
    fn fail_fast_is_deterministic() {
        let mut sp = spec(12);
        sp.inject_failures = vec![(4, 3), (9, 3)];
        let a = strip_runtime(run_ensemble(&sp, 1, true).unwrap());
        let b = strip_runtime(run_ensemble(&sp, 3, true).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.failures.len(), 1);
    }

    #[test]
    fn merge_contract() {
        let mut sa = spec(3);
        let a = run_ensemble(&sa, 1, false).unwrap();
        sa.first_path = 3;
        let b = run_ensemble(&sa, 1, false).unwrap();
        let ab = merge_summaries(&a, &b).unwrap();
        let ba = merge_summaries(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.records.len(), 6);
        let whole = run_ensemble(&spec(6), 2, false).unwrap();
        assert_eq!(strip_runtime(ab.clone()).records, strip_runtime(whole).records);
        let empty = EnsembleSummary::empty(a.fingerprint.clone());
        assert_eq!(merge_summaries(&a, &empty).unwrap(), a);
        assert!(matches!(merge_summaries(&a, &a), Err(McError::OverlappingPaths(0))));
        let other = EnsembleSummary::empty("different");
        assert!(matches!(merge_summaries(&a, &other), Err(McError::FingerprintMismatch(..))));
    }

    #[test]
    fn merge_is_associative() {
        let mut sp = spec(2);
        let parts: Vec<EnsembleSummary> = (0..3)
            .map(|i| {
                sp.first_path = 2 * i;
                run_ensemble(&sp, 1, false).unwrap()
            })
            .collect();
        let left = merge_summaries(&merge_summaries(&parts[0], &parts[1]).unwrap(), &parts[2]).unwrap();
        let right = merge_summaries(&parts[0], &merge_summaries(&parts[1], &parts[2]).unwrap()).unwrap();
        assert_eq!(left, right);
    }
}
