//! Weighted time averages, the LIL-normalised fluctuation statistic and
//! estimators of the limit constant `v`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use std::f64::consts::E;

/// Smallest time at which the LIL normalisation is used.
pub const LIL_TIME_FLOOR: f64 = E + 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LilError {
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("LIL normalisation undefined at t = {0} (needs t > e)")]
    Domain(f64),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("paths end at different horizons ({0} vs {1})")]
    MismatchedHorizon(f64, f64),
}

/// `S / √(2 t log log t)`.
pub fn lil_statistic(s: f64, t: f64) -> Result<f64, LilError> {
    if !(t > LIL_TIME_FLOOR) {
        return Err(LilError::Domain(t));
    }
    Ok(s / (2.0 * t * t.ln().ln()).sqrt())
}

/// One row of the checkpoint log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LilCheckpoint {
    pub t: f64,
    pub s: f64,
    /// `None` while `t ≤ e`.
    pub stat: Option<f64>,
    pub run_max: Option<f64>,
    pub run_min: Option<f64>,
}

/// Sequential accumulator of `S = Σ τ_k (f(Y_{t_k}) − μ(f))`.
///
/// Running extrema of the statistic are tracked step by step from the first
/// step with `t` past both `e` and the configured window start.
#[derive(Debug, Clone)]
pub struct LilAccumulator {
    mu: f64,
    centered: bool,
    s: f64,
    s_comp: f64,
    t: f64,
    t_comp: f64,
    steps: u64,
    window_start: f64,
    run_max: Option<f64>,
    run_min: Option<f64>,
    next_checkpoint: f64,
    ratio: f64,
    log: Vec<LilCheckpoint>,
    // Running mean of f for the self-centring option.
    raw_sum: f64,
}

impl LilAccumulator {
    /// Accumulator centred at the supplied `μ(f)`, with geometric checkpoints
    /// (ratio 1.2, starting at `t = 1`).
    pub fn new(mu: f64) -> Self {
        Self {
            mu,
            centered: true,
            s: 0.0,
            s_comp: 0.0,
            t: 0.0,
            t_comp: 0.0,
            steps: 0,
            window_start: 0.0,
            run_max: None,
            run_min: None,
            next_checkpoint: 1.0,
            ratio: 1.2,
            log: Vec::new(),
            raw_sum: 0.0,
        }
    }

    /// Accumulator without a known mean. `S` is then reported against the
    /// running mean, which biases variance estimates downward.
    pub fn self_centering() -> Self {
        Self { centered: false, ..Self::new(0.0) }
    }

    /// Checkpoints at `first, first·ratio, first·ratio², ...`.
    pub fn with_checkpoints(mut self, first: f64, ratio: f64) -> Self {
        assert!(first > 0.0 && ratio > 1.0, "checkpoints need first > 0 and ratio > 1");
        self.next_checkpoint = first;
        self.ratio = ratio;
        self
    }

    /// Disables the checkpoint log.
    pub fn without_checkpoints(mut self) -> Self {
        self.next_checkpoint = f64::INFINITY;
        self
    }

    /// Running extrema only consider times `t ≥ start`.
    pub fn with_window_start(mut self, start: f64) -> Self {
        self.window_start = start;
        self
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn t(&self) -> f64 {
        self.t + self.t_comp
    }

    /// Current `S`.
    pub fn s(&self) -> f64 {
        if self.centered {
            self.s + self.s_comp
        } else {
            self.raw_sum - self.t() * self.running_mean()
        }
    }

    fn running_mean(&self) -> f64 {
        let t = self.t();
        if t > 0.0 {
            self.raw_sum / t
        } else {
            0.0
        }
    }

    pub fn run_max(&self) -> Option<f64> {
        self.run_max
    }

    pub fn run_min(&self) -> Option<f64> {
        self.run_min
    }

    pub fn checkpoints(&self) -> &[LilCheckpoint] {
        &self.log
    }

    /// Current statistic, if `t > e`.
    pub fn statistic(&self) -> Option<f64> {
        lil_statistic(self.s(), self.t()).ok()
    }

    /// Absorbs one step: `S += τ (f − μ)`, `t += τ`.
    pub fn update(&mut self, tau: f64, f_val: f64) -> Result<(), LilError> {
        if !f_val.is_finite() {
            return Err(LilError::NonFinite(format!("f = {f_val} at step {}", self.steps + 1)));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(LilError::Usage(format!("step must be positive, got {tau}")));
        }
        neumaier_add(&mut self.t, &mut self.t_comp, tau);
        if self.centered {
            neumaier_add(&mut self.s, &mut self.s_comp, tau * (f_val - self.mu));
        } else {
            self.raw_sum += tau * f_val;
        }
        self.steps += 1;
        let t = self.t();
        let in_window = t > LIL_TIME_FLOOR && t >= self.window_start;
        let stat = if in_window || t >= self.next_checkpoint { self.statistic() } else { None };
        if in_window {
            let v = stat.expect("t > e");
            self.run_max = Some(self.run_max.map_or(v, |m| m.max(v)));
            self.run_min = Some(self.run_min.map_or(v, |m| m.min(v)));
        }
        if t >= self.next_checkpoint {
            self.log.push(LilCheckpoint { t, s: self.s(), stat, run_max: self.run_max, run_min: self.run_min });
            while self.next_checkpoint <= t {
                self.next_checkpoint *= self.ratio;
            }
        }
        Ok(())
    }

    /// Accumulators are sequential; merging two is not defined.
    pub fn merge(&self, _other: &LilAccumulator) -> Result<LilAccumulator, LilError> {
        Err(LilError::Usage("time-average accumulators are sequential and cannot be merged".into()))
    }
}

fn neumaier_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VMethod {
    ExactLinear,
    BatchMeans,
    Ensemble,
}

impl VMethod {
    pub fn name(&self) -> &'static str {
        match self {
            VMethod::ExactLinear => "exact_linear",
            VMethod::BatchMeans => "batch_means",
            VMethod::Ensemble => "ensemble",
        }
    }
}

/// Estimate of `v²` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VEstimate {
    pub method: VMethod,
    pub v2: f64,
    pub stderr: f64,
    /// Number of blocks (batch means) or paths (ensemble).
    pub count: usize,
}

impl VEstimate {
    pub fn v(&self) -> f64 {
        self.v2.sqrt()
    }
}

/// `v = σ / a` for `f(x) = x` under `dX = −aX dt + σ dW`.
pub fn v_exact_linear(a: f64, sigma: f64) -> Result<VEstimate, LilError> {
    if !(a > 0.0) {
        return Err(LilError::Usage(format!("mean reversion rate must be positive, got {a}")));
    }
    let v = sigma / a;
    Ok(VEstimate { method: VMethod::ExactLinear, v2: v * v, stderr: 0.0, count: 0 })
}

/// Options for [`v_batch_means`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMeansOptions {
    /// Block length in time units; `None` means `√T`.
    pub block_length: Option<f64>,
    /// Centre at the overall mean instead of the supplied `μ(f)`.
    pub self_center: bool,
}

impl Default for BatchMeansOptions {
    fn default() -> Self {
        Self { block_length: None, self_center: false }
    }
}

/// Batch-means estimate from a stream of `(τ_k, f(Y_{t_k}))`.
///
/// A block closes at the first step where the cumulative time reaches the
/// next multiple of `L`; the trailing partial block is dropped.
pub fn v_batch_means(increments: &[(f64, f64)], mu: f64, opts: BatchMeansOptions) -> Result<VEstimate, LilError> {
    let total: f64 = increments.iter().map(|(tau, _)| tau).sum();
    let l = opts.block_length.unwrap_or(total.sqrt());
    if !(l > 0.0) || !l.is_finite() {
        return Err(LilError::Usage(format!("block length must be positive, got {l}")));
    }
    let centre = if opts.self_center {
        increments.iter().map(|(tau, f)| tau * f).sum::<f64>() / total
    } else {
        mu
    };
    let mut stream = BlockSums::new(l, centre)?;
    for &(tau, f) in increments {
        stream.push(tau, f)?;
    }
    stream.estimate()
}

/// Streaming block sums `B_i = Σ_{block} τ_k (f_k − μ)` over blocks of
/// length `L`; a block closes at the first step where the cumulative time
/// reaches the next multiple of `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSums {
    block_length: f64,
    mu: f64,
    blocks: Vec<f64>,
    acc: f64,
    t: f64,
}

impl BlockSums {
    pub fn new(block_length: f64, mu: f64) -> Result<Self, LilError> {
        if !(block_length > 0.0) || !block_length.is_finite() {
            return Err(LilError::Usage(format!("block length must be positive, got {block_length}")));
        }
        Ok(Self { block_length, mu, blocks: Vec::new(), acc: 0.0, t: 0.0 })
    }

    pub fn push(&mut self, tau: f64, f: f64) -> Result<(), LilError> {
        if !f.is_finite() {
            return Err(LilError::NonFinite(format!("f = {f}")));
        }
        self.acc += tau * (f - self.mu);
        self.t += tau;
        if self.t >= (self.blocks.len() + 1) as f64 * self.block_length * (1.0 - 1e-12) {
            self.blocks.push(self.acc);
            self.acc = 0.0;
        }
        Ok(())
    }

    /// Completed block sums.
    pub fn blocks(&self) -> &[f64] {
        &self.blocks
    }

    pub fn estimate(&self) -> Result<VEstimate, LilError> {
        v_from_block_sums(&self.blocks, self.block_length)
    }
}

/// `v̂² = sample variance of the block sums / L`.
pub fn v_from_block_sums(blocks: &[f64], block_length: f64) -> Result<VEstimate, LilError> {
    let n = blocks.len();
    if n < 2 {
        return Err(LilError::InsufficientData(format!("batch means needs at least 2 complete blocks, got {n}")));
    }
    let v2 = sample_variance(blocks) / block_length;
    let stderr = (2.0 / (n as f64 - 1.0)).sqrt() * v2;
    Ok(VEstimate { method: VMethod::BatchMeans, v2, stderr, count: n })
}

/// Sample variance of `S_T` across paths divided by the common `T`.
pub fn v_ensemble(finals: &[(f64, f64)]) -> Result<VEstimate, LilError> {
    let n = finals.len();
    if n < 2 {
        return Err(LilError::InsufficientData(format!("ensemble estimate needs at least 2 paths, got {n}")));
    }
    let t = finals[0].1;
    for &(_, ti) in finals {
        if (ti - t).abs() > 1e-12 * t.abs().max(1.0) {
            return Err(LilError::MismatchedHorizon(t, ti));
        }
    }
    let s: Vec<f64> = finals.iter().map(|(s, _)| *s).collect();
    let v2 = sample_variance(&s) / t;
    let stderr = (2.0 / (n as f64 - 1.0)).sqrt() * v2;
    Ok(VEstimate { method: VMethod::Ensemble, v2, stderr, count: n })
}

/// Unbiased sample variance (`n − 1` denominator).
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub ks: f64,
    pub p_value: f64,
    pub pass: bool,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov test of already standardised samples
/// against `N(0, 1)` at the 1% level.
pub fn normality_check(samples: &[f64]) -> Result<NormalityResult, LilError> {
    let n = samples.len();
    if n < 50 {
        return Err(LilError::InsufficientData(format!("normality check needs at least 50 samples, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(LilError::NonFinite("sample".into()));
    }
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(LilError::Degenerate("all samples are equal".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = normal.cdf(x);
        d = d.max((i as f64 + 1.0) / nf - c).max(c - i as f64 / nf);
    }
    let p = kolmogorov_p_value(d, n);
    Ok(NormalityResult { ks: d, p_value: p, pass: p >= 0.01, n })
}

/// Standardises `S_T / (v √T)` and runs [`normality_check`].
pub fn normality_check_finals(finals: &[(f64, f64)], v: f64) -> Result<NormalityResult, LilError> {
    let z: Vec<f64> = finals.iter().map(|(s, t)| s / (v * t.sqrt())).collect();
    normality_check(&z)
}

/// Asymptotic p-value with Stephens' small-sample correction.
fn kolmogorov_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powi(j as i32 - 1) * (-2.0 * j * j * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}
