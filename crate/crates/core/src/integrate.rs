//! Time-stepping schemes and single-path simulation.
//!
//! * `bem`: drift-implicit (backward) Euler–Maruyama for SODEs
//! * `exp_euler`: exponential Euler for the spectral SPDE
//! * `exact_ou`: exact Gaussian transition of the linear model (an oracle)
//! * `em_baseline`: explicit Euler–Maruyama, kept as a negative control
//!
//! The draw consumed between `t_{n−1}` and `t_n` is `ΔW_{n−1} ~ N(0, τ_n I)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::mc::philox::{gaussian_fill, StreamKey, AUX_COUNTER_BIT};
use crate::model::{Model, ModelError, Nonlinearity, SodeModel, SpectralSpdeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("implicit solve did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("non-finite state: {0}")]
    NonFinite(String),
    #[error("scheme {scheme} cannot integrate this model: {reason}")]
    Unsupported { scheme: &'static str, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A step failure annotated with the step index at which it happened.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("step {n}: {source}")]
pub struct SimulationError {
    pub n: u64,
    #[source]
    pub source: StepError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Bem,
    ExpEuler,
    ExactOu,
    EmBaseline,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Bem => "bem",
            SchemeKind::ExpEuler => "exp_euler",
            SchemeKind::ExactOu => "exact_ou",
            SchemeKind::EmBaseline => "em_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bem" => Some(SchemeKind::Bem),
            "exp_euler" => Some(SchemeKind::ExpEuler),
            "exact_ou" => Some(SchemeKind::ExactOu),
            "em_baseline" => Some(SchemeKind::EmBaseline),
            _ => None,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind) -> Self {
        Self { kind, newton_tol: 1e-12, newton_max_iter: 50 }
    }

    pub fn bem() -> Self {
        Self::new(SchemeKind::Bem)
    }

    pub fn exp_euler() -> Self {
        Self::new(SchemeKind::ExpEuler)
    }

    pub fn exact_ou() -> Self {
        Self::new(SchemeKind::ExactOu)
    }

    pub fn em_baseline() -> Self {
        Self::new(SchemeKind::EmBaseline)
    }

    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(StepError::Model(ModelError::Config(format!(
                "implicit solver needs tolerance > 0 and at least one iteration (got {}, {})",
                self.newton_tol, self.newton_max_iter
            ))));
        }
        Ok(())
    }
}

/// Diagnostics of one implicit solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖y′ − τ b(y′) − rhs‖ / (1 + ‖rhs‖)`.
    pub residual: f64,
    /// Set when a nonpositive derivative of `y ↦ y − τ b(y)` was met, i.e. the
    /// drift is not monotone there and the root reached may not be unique.
    pub nonmonotone: bool,
}

/// One BEM step: the solution `y′` of `y′ − τ b(y′) = y + σ(y) ΔW`.
pub fn bem_step(model: &SodeModel, y: &[f64], tau: f64, dw: &[f64], spec: &SchemeSpec) -> Result<Vec<f64>, StepError> {
    let mut out = vec![0.0; model.dim];
    let mut ws = BemWorkspace::new(model.dim);
    bem_step_into(model, y, tau, dw, spec, &mut out, &mut ws)?;
    Ok(out)
}

/// Scratch buffers for [`bem_step_into`].
#[derive(Debug, Clone)]
pub struct BemWorkspace {
    rhs: Vec<f64>,
    g: Vec<f64>,
    trial: Vec<f64>,
    g_trial: Vec<f64>,
    delta: Vec<f64>,
    jac: Vec<f64>,
    scratch: Vec<f64>,
}

impl BemWorkspace {
    pub fn new(d: usize) -> Self {
        Self {
            rhs: vec![0.0; d],
            g: vec![0.0; d],
            trial: vec![0.0; d],
            g_trial: vec![0.0; d],
            delta: vec![0.0; d],
            jac: vec![0.0; d * d],
            scratch: vec![0.0; d],
        }
    }
}

pub fn bem_step_into(
    model: &SodeModel,
    y: &[f64],
    tau: f64,
    dw: &[f64],
    spec: &SchemeSpec,
    out: &mut [f64],
    ws: &mut BemWorkspace,
) -> Result<SolveReport, StepError> {
    model.apply_diffusion(y, dw, &mut ws.rhs);
    for (r, v) in ws.rhs.iter_mut().zip(y) {
        *r += v;
    }
    if let Some(lin) = model.linear {
        let scale = 1.0 / (1.0 + lin.a * tau);
        for (o, r) in out.iter_mut().zip(&ws.rhs) {
            *o = r * scale;
        }
        return Ok(SolveReport::default());
    }
    if model.dim == 1 {
        scalar_implicit_solve(model, tau, ws.rhs[0], spec, out)
    } else {
        newton_implicit_solve(model, tau, spec, out, ws)
    }
}

fn drift_scalar(model: &SodeModel, z: f64) -> f64 {
    let mut o = [0.0];
    (model.drift)(&[z], &mut o);
    o[0]
}

fn drift_derivative_scalar(model: &SodeModel, z: f64) -> f64 {
    match &model.drift_jacobian {
        Some(jac) => {
            let mut o = [0.0];
            jac(&[z], &mut o);
            o[0]
        }
        None => {
            let h = f64::EPSILON.cbrt() * (1.0 + z.abs());
            (drift_scalar(model, z + h) - drift_scalar(model, z - h)) / (2.0 * h)
        }
    }
}

/// Newton's method on `g(z) = z − τ b(z) − rhs`, safeguarded by bisection
/// once a sign change has been bracketed.
fn scalar_implicit_solve(
    model: &SodeModel,
    tau: f64,
    rhs: f64,
    spec: &SchemeSpec,
    out: &mut [f64],
) -> Result<SolveReport, StepError> {
    let scale = 1.0 + rhs.abs();
    let g = |z: f64| z - tau * drift_scalar(model, z) - rhs;
    let mut report = SolveReport::default();
    let mut z = rhs;
    let mut gz = g(z);
    // Most recent points with negative and positive residual; once both are
    // known they bracket a root.
    let mut neg: Option<f64> = None;
    let mut pos: Option<f64> = None;
    for it in 1..=spec.newton_max_iter {
        if !gz.is_finite() {
            return Err(StepError::NonFinite(format!("implicit residual at z = {z}")));
        }
        report.iterations = it - 1;
        report.residual = gz.abs() / scale;
        if report.residual <= spec.newton_tol {
            out[0] = z;
            return Ok(report);
        }
        if gz < 0.0 {
            neg = Some(z);
        } else {
            pos = Some(z);
        }
        let dg = 1.0 - tau * drift_derivative_scalar(model, z);
        if dg <= 0.0 {
            report.nonmonotone = true;
        }
        let newton = if dg != 0.0 && dg.is_finite() { Some(z - gz / dg) } else { None };
        let bracket = match (neg, pos) {
            (Some(a), Some(b)) => Some((a.min(b), a.max(b))),
            _ => None,
        };
        let bracketed = bracket.is_some();
        let next = match (newton, bracket) {
            (Some(cand), Some((lo, hi))) if cand > lo && cand < hi => cand,
            (_, Some((lo, hi))) => 0.5 * (lo + hi),
            (Some(cand), None) => cand,
            // No bracket yet and no usable Newton step: march outwards,
            // assuming the residual increases.
            (None, None) => {
                let step = gz.abs().max(1.0);
                if gz < 0.0 {
                    z + step
                } else {
                    z - step
                }
            }
        };
        // Damp an unbracketed Newton step that makes the residual worse.
        let mut cand = next;
        let mut g_cand = g(cand);
        if !bracketed {
            let mut damp = 0;
            while !(g_cand.is_finite() && (g_cand.abs() < gz.abs() || g_cand.signum() != gz.signum())) && damp < 60 {
                cand = z + 0.5 * (cand - z);
                g_cand = g(cand);
                damp += 1;
            }
        }
        z = cand;
        gz = g_cand;
    }
    report.iterations = spec.newton_max_iter;
    report.residual = gz.abs() / scale;
    if report.residual <= spec.newton_tol {
        out[0] = z;
        return Ok(report);
    }
    Err(StepError::NoConvergence { residual: report.residual, iterations: spec.newton_max_iter })
}

fn residual_into(model: &SodeModel, tau: f64, z: &[f64], rhs: &[f64], out: &mut [f64]) {
    (model.drift)(z, out);
    for i in 0..z.len() {
        out[i] = z[i] - tau * out[i] - rhs[i];
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton iteration for the multi-dimensional implicit equation.
fn newton_implicit_solve(
    model: &SodeModel,
    tau: f64,
    spec: &SchemeSpec,
    out: &mut [f64],
    ws: &mut BemWorkspace,
) -> Result<SolveReport, StepError> {
    let d = model.dim;
    let scale = 1.0 + norm(&ws.rhs);
    let mut report = SolveReport::default();
    out.copy_from_slice(&ws.rhs);
    residual_into(model, tau, out, &ws.rhs, &mut ws.g);
    for it in 0..spec.newton_max_iter {
        let gn = norm(&ws.g);
        if !gn.is_finite() {
            return Err(StepError::NonFinite("implicit residual".into()));
        }
        report.iterations = it;
        report.residual = gn / scale;
        if report.residual <= spec.newton_tol {
            return Ok(report);
        }
        drift_jacobian_into(model, out, &mut ws.jac, &mut ws.scratch, &mut ws.trial, &mut ws.g_trial);
        // Newton matrix I − τ Db.
        for i in 0..d {
            for j in 0..d {
                ws.jac[i * d + j] = if i == j { 1.0 } else { 0.0 } - tau * ws.jac[i * d + j];
            }
        }
        for (dl, g) in ws.delta.iter_mut().zip(&ws.g) {
            *dl = -g;
        }
        if !solve_linear_in_place(&mut ws.jac, &mut ws.delta, d) {
            report.nonmonotone = true;
            return Err(StepError::NoConvergence { residual: report.residual, iterations: it });
        }
        let mut lambda = 1.0;
        loop {
            for i in 0..d {
                ws.trial[i] = out[i] + lambda * ws.delta[i];
            }
            residual_into(model, tau, &ws.trial, &ws.rhs, &mut ws.g_trial);
            let gt = norm(&ws.g_trial);
            if gt < gn || lambda < 1e-10 {
                break;
            }
            lambda *= 0.5;
        }
        out.copy_from_slice(&ws.trial);
        ws.g.copy_from_slice(&ws.g_trial);
    }
    report.residual = norm(&ws.g) / scale;
    report.iterations = spec.newton_max_iter;
    if report.residual <= spec.newton_tol {
        Ok(report)
    } else {
        Err(StepError::NoConvergence { residual: report.residual, iterations: spec.newton_max_iter })
    }
}

fn drift_jacobian_into(model: &SodeModel, z: &[f64], jac: &mut [f64], plus: &mut [f64], zp: &mut [f64], minus: &mut [f64]) {
    let d = z.len();
    if let Some(j) = &model.drift_jacobian {
        j(z, jac);
        return;
    }
    zp.copy_from_slice(z);
    for k in 0..d {
        let h = f64::EPSILON.cbrt() * (1.0 + z[k].abs());
        zp[k] = z[k] + h;
        (model.drift)(zp, plus);
        zp[k] = z[k] - h;
        (model.drift)(zp, minus);
        zp[k] = z[k];
        for i in 0..d {
            jac[i * d + k] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
}

/// Gaussian elimination with partial pivoting; `false` if singular.
fn solve_linear_in_place(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if a[piv * n + col].abs() < 1e-300 {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * b[k];
        }
        b[row] = s / a[row * n + row];
    }
    true
}

/// One explicit Euler–Maruyama step `y + b(y) τ + σ(y) ΔW`.
pub fn em_step(model: &SodeModel, y: &[f64], tau: f64, dw: &[f64]) -> Vec<f64> {
    let mut drift = vec![0.0; model.dim];
    let mut noise = vec![0.0; model.dim];
    (model.drift)(y, &mut drift);
    model.apply_diffusion(y, dw, &mut noise);
    y.iter().zip(&drift).zip(&noise).map(|((v, b), s)| v + b * tau + s).collect()
}

/// Fills `out[j−1] = e^{−λ_j τ}` for `j = 1..=J`.
pub fn semigroup_factors(tau: f64, out: &mut [f64]) {
    let c = std::f64::consts::PI * std::f64::consts::PI * tau;
    for (j, o) in out.iter_mut().enumerate() {
        let jj = (j + 1) as f64;
        *o = (-jj * jj * c).exp();
    }
}

/// One exponential Euler step `e^{−λ_j τ}(y_j + F(y)_j τ + ΔW_j)`.
pub fn exp_euler_step(model: &SpectralSpdeModel, y: &[f64], tau: f64, dw: &[f64]) -> Result<Vec<f64>, StepError> {
    let j = model.modes;
    if y.len() != j || dw.len() != j {
        return Err(ModelError::Dimension { expected: j, got: y.len().min(dw.len()) }.into());
    }
    let mut decay = vec![0.0; j];
    let mut f = vec![0.0; j];
    let mut out = vec![0.0; j];
    exp_euler_step_into(model, y, tau, dw, &mut decay, &mut f, &mut out)?;
    Ok(out)
}

fn exp_euler_step_into(
    model: &SpectralSpdeModel,
    y: &[f64],
    tau: f64,
    dw: &[f64],
    decay: &mut [f64],
    f: &mut [f64],
    out: &mut [f64],
) -> Result<(), StepError> {
    semigroup_factors(tau, decay);
    model.apply_nonlinearity(y, f)?;
    for i in 0..y.len() {
        let v = decay[i] * (y[i] + f[i] * tau + dw[i]);
        if !v.is_finite() {
            return Err(StepError::NonFinite(format!("mode {} became {v}", i + 1)));
        }
        out[i] = v;
    }
    Ok(())
}

/// Exact transition of `dX = −a X dt + σ dW` over time `τ` driven by the
/// standard normal `ξ`.
pub fn exact_ou_step(a: f64, sigma: f64, y: f64, tau: f64, xi: f64) -> f64 {
    y * (-a * tau).exp() + sigma * ou_noise_variance(a, tau).sqrt() * xi
}

/// `∫_0^τ e^{−2a(τ−s)} ds = (1 − e^{−2aτ}) / (2a)`.
pub fn ou_noise_variance(a: f64, tau: f64) -> f64 {
    -(-2.0 * a * tau).exp_m1() / (2.0 * a)
}

/// Jointly Gaussian `(ΔW, I)` with `ΔW = W(τ)` and `I = ∫_0^τ e^{−a(τ−s)} dW(s)`,
/// built from two independent standard normals.
///
/// The exact step is `e^{−aτ} y + σ I`; the BEM step on the same path uses `ΔW`.
pub fn ou_coupled_increments(a: f64, tau: f64, xi1: f64, xi2: f64) -> (f64, f64) {
    let x = a * tau;
    let cov = -(-x).exp_m1() / a;
    // Conditional variance of I given ΔW, a·Var = x³/12 − x⁴/12 + 17x⁵/360 − ...
    let cond_var = if x < 1e-3 {
        (x * x * x / 12.0) * (1.0 - x + 17.0 * x * x / 30.0) / a
    } else {
        (ou_noise_variance(a, tau) - cov * cov / tau).max(0.0)
    };
    let dw = tau.sqrt() * xi1;
    (dw, cov / tau * dw + cond_var.sqrt() * xi2)
}

/// Source of the standard normals driving a path.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Counter-based stream keyed by `(seed, path, step)`.
    Counter { seed: u64, path: u64 },
    /// All draws zero (deterministic dynamics).
    Zero,
    /// Wraps another source and returns NaN from step `at_step` on; used to
    /// exercise error handling.
    FailAt { at_step: u64, inner: Box<NoiseSource> },
}

impl NoiseSource {
    pub fn counter(seed: u64, path: u64) -> Self {
        NoiseSource::Counter { seed, path }
    }

    /// Standard normals for the step ending at index `n`.
    pub fn fill(&self, n: u64, out: &mut [f64]) {
        match self {
            NoiseSource::Counter { seed, path } => gaussian_fill(StreamKey::new(*seed, *path, n), out),
            NoiseSource::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            NoiseSource::FailAt { at_step, inner } => {
                if n >= *at_step {
                    out.iter_mut().for_each(|v| *v = f64::NAN);
                } else {
                    inner.fill(n, out);
                }
            }
        }
    }

    /// Auxiliary normals for step `n`, independent of [`NoiseSource::fill`].
    pub fn fill_aux(&self, n: u64, out: &mut [f64]) {
        match self {
            NoiseSource::Counter { seed, path } => gaussian_fill(StreamKey::new(*seed, *path, n | AUX_COUNTER_BIT), out),
            NoiseSource::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            NoiseSource::FailAt { at_step, inner } => {
                if n >= *at_step {
                    out.iter_mut().for_each(|v| *v = f64::NAN);
                } else {
                    inner.fill_aux(n, out);
                }
            }
        }
    }
}

/// What an observer sees after each step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub n: u64,
    pub t: f64,
    /// Step just taken, `τ_n = t_n − t_{n−1}`.
    pub tau: f64,
    /// `Y_{t_n}`.
    pub state: &'a [f64],
    /// `ΔW_{n−1}` (scaled increment) consumed by this step.
    pub noise: &'a [f64],
}

/// Per-path observer notified after every step and at its checkpoints.
pub trait Observer {
    /// Increasing step indices at which [`Observer::record`] is called.
    fn checkpoints(&self) -> &[u64] {
        &[]
    }

    /// Called once with the initial state at `n = 0`.
    fn on_start(&mut self, _x: &[f64]) {}

    /// Called after every step.
    fn on_step(&mut self, _view: &StepView<'_>) {}

    /// Values stored at a checkpoint; the state itself by default.
    fn record(&mut self, view: &StepView<'_>) -> Vec<f64> {
        view.state.to_vec()
    }
}

/// Observer that records the state at fixed checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointObserver {
    pub checkpoints: Vec<u64>,
}

impl CheckpointObserver {
    pub fn new(checkpoints: Vec<u64>) -> Self {
        Self { checkpoints }
    }
}

impl Observer for CheckpointObserver {
    fn checkpoints(&self) -> &[u64] {
        &self.checkpoints
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub observer: usize,
    pub n: u64,
    pub t: f64,
    pub values: Vec<f64>,
}

/// Position of a path: state, step index and grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub state: Vec<f64>,
    pub n: u64,
    pub t: f64,
    pub noise: NoiseSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub records: Vec<ObservationRecord>,
    pub last: PathState,
    /// Largest implicit-solve residual seen (0 for explicit schemes).
    pub max_residual: f64,
    /// Any implicit solve met a non-monotone drift.
    pub nonmonotone: bool,
}

/// Stateful single-step integrator for one (model, scheme) pair.
pub struct Stepper<'m> {
    model: &'m Model,
    spec: SchemeSpec,
    bem: BemWorkspace,
    next: Vec<f64>,
    decay: Vec<f64>,
    nonlin: Vec<f64>,
    noise_scale: Vec<f64>,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m Model, spec: SchemeSpec) -> Result<Self, StepError> {
        spec.validate()?;
        let unsupported = |reason: &str| StepError::Unsupported { scheme: spec.kind.name(), reason: reason.into() };
        match (spec.kind, model) {
            (SchemeKind::Bem | SchemeKind::EmBaseline, Model::Sode(_)) => {}
            (SchemeKind::ExactOu, Model::Sode(m)) if m.linear.is_some() => {}
            (SchemeKind::ExactOu, _) => return Err(unsupported("exact transitions exist only for the linear model")),
            (SchemeKind::ExpEuler, Model::Spde(_)) => {}
            (SchemeKind::ExpEuler, _) => return Err(unsupported("exponential Euler needs a spectral SPDE model")),
            (_, Model::Spde(_)) => return Err(unsupported("SPDE models are integrated with exp_euler")),
        }
        let d = model.state_dim();
        let noise_scale = match model {
            Model::Spde(m) => (1..=m.modes).map(|j| m.q_weight(j).sqrt()).collect(),
            Model::Sode(m) => vec![1.0; m.noise_dim],
        };
        Ok(Self {
            model,
            spec,
            bem: BemWorkspace::new(d),
            next: vec![0.0; d],
            decay: vec![0.0; d],
            nonlin: vec![0.0; d],
            noise_scale,
        })
    }

    /// Turns standard normals into the increment `ΔW` of a step of length `τ`.
    pub fn scale_noise(&self, tau: f64, xi: &[f64], dw: &mut [f64]) {
        let s = tau.sqrt();
        for ((d, x), q) in dw.iter_mut().zip(xi).zip(&self.noise_scale) {
            *d = s * q * x;
        }
    }

    /// Advances `y` in place over a step of length `τ`; `xi` are the raw
    /// standard normals and `dw` their scaled increments.
    pub fn step(&mut self, y: &mut [f64], tau: f64, xi: &[f64], dw: &[f64]) -> Result<SolveReport, StepError> {
        let mut report = SolveReport::default();
        match (self.spec.kind, self.model) {
            (SchemeKind::Bem, Model::Sode(m)) => {
                report = bem_step_into(m, y, tau, dw, &self.spec, &mut self.next, &mut self.bem)?;
            }
            (SchemeKind::EmBaseline, Model::Sode(m)) => {
                (m.drift)(y, &mut self.nonlin);
                m.apply_diffusion(y, dw, &mut self.decay);
                for i in 0..y.len() {
                    self.next[i] = y[i] + self.nonlin[i] * tau + self.decay[i];
                }
            }
            (SchemeKind::ExactOu, Model::Sode(m)) => {
                let lin = m.linear.expect("checked at construction");
                self.next[0] = exact_ou_step(lin.a, lin.sigma, y[0], tau, xi[0]);
            }
            (SchemeKind::ExpEuler, Model::Spde(m)) => {
                exp_euler_step_into(m, y, tau, dw, &mut self.decay, &mut self.nonlin, &mut self.next)?;
            }
            _ => unreachable!("scheme/model pairing checked at construction"),
        }
        if let Some(bad) = self.next.iter().find(|v| !v.is_finite()) {
            return Err(StepError::NonFinite(format!("state component became {bad}")));
        }
        y.copy_from_slice(&self.next);
        Ok(report)
    }
}

/// Simulates one path over the whole grid, notifying observers.
pub fn simulate_path(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    x: &[f64],
    noise: &NoiseSource,
    observers: &mut [&mut dyn Observer],
) -> Result<PathOutcome, SimulationError> {
    let at0 = |source: StepError| SimulationError { n: 0, source };
    if x.len() != model.state_dim() {
        return Err(at0(ModelError::Dimension { expected: model.state_dim(), got: x.len() }.into()));
    }
    if let Model::Spde(m) = model {
        if matches!(m.nonlinearity, Nonlinearity::Nemytskii(_)) && x.iter().any(|v| !v.is_finite()) {
            return Err(at0(StepError::NonFinite("initial state".into())));
        }
    }
    let mut stepper = Stepper::new(model, *scheme).map_err(at0)?;
    let mut cursors = vec![0usize; observers.len()];
    for obs in observers.iter() {
        if obs.checkpoints().windows(2).any(|w| w[0] >= w[1]) {
            return Err(at0(StepError::Model(ModelError::Config("observer checkpoints must be strictly increasing".into()))));
        }
    }
    for obs in observers.iter_mut() {
        obs.on_start(x);
    }
    let mut y = x.to_vec();
    let mut xi = vec![0.0; model.noise_dim()];
    let mut dw = vec![0.0; model.noise_dim()];
    let mut records = Vec::new();
    let mut max_residual: f64 = 0.0;
    let mut nonmonotone = false;
    let mut last_t = 0.0;
    for point in grid.iter() {
        noise.fill(point.n, &mut xi);
        stepper.scale_noise(point.tau, &xi, &mut dw);
        let report = stepper
            .step(&mut y, point.tau, &xi, &dw)
            .map_err(|source| SimulationError { n: point.n, source })?;
        max_residual = max_residual.max(report.residual);
        nonmonotone |= report.nonmonotone;
        last_t = point.t;
        let view = StepView { n: point.n, t: point.t, tau: point.tau, state: &y, noise: &dw };
        for (i, obs) in observers.iter_mut().enumerate() {
            obs.on_step(&view);
            let cps = obs.checkpoints();
            if cursors[i] < cps.len() && cps[cursors[i]] == point.n {
                cursors[i] += 1;
                let values = obs.record(&view);
                records.push(ObservationRecord { observer: i, n: point.n, t: point.t, values });
            }
        }
    }
    Ok(PathOutcome {
        records,
        last: PathState { state: y, n: grid.n_max(), t: last_t, noise: noise.clone() },
        max_residual,
        nonmonotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, StepSpec};
    use crate::model::{Diffusion, NoiseLaw, PointwiseMap, SodeConstants};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn ou(a: f64, s: f64) -> SodeModel {
        SodeModel::ornstein_uhlenbeck(a, s).unwrap()
    }

    fn pure_cubic(jacobian: bool) -> SodeModel {
        SodeModel {
            name: "minus_cube".into(),
            dim: 1,
            noise_dim: 1,
            drift: Arc::new(|y: &[f64], o: &mut [f64]| o[0] = -y[0] * y[0] * y[0]),
            drift_jacobian: if jacobian {
                Some(Arc::new(|y: &[f64], o: &mut [f64]| o[0] = -3.0 * y[0] * y[0]))
            } else {
                None
            },
            diffusion: Diffusion::Constant(vec![1.0]),
            constants: SodeConstants { c1: 0.0, c2: 1.0, c3: 0.0, c4: 1.5, qbar: 3.0, c6: 1.0 },
            linear: None,
        }
    }

    #[test]
    fn bem_linear_examples() {
        let spec = SchemeSpec::bem();
        assert_relative_eq!(bem_step(&ou(1.0, 1.0), &[1.0], 0.5, &[0.0], &spec).unwrap()[0], 2.0 / 3.0);
        assert_relative_eq!(bem_step(&ou(1.0, 1.0), &[1.0], 0.5, &[0.3], &spec).unwrap()[0], 1.3 / 1.5, epsilon = 1e-15);
    }

    #[test]
    fn bem_cubic_root() {
        let spec = SchemeSpec::bem();
        for jac in [true, false] {
            let m = pure_cubic(jac);
            let y = bem_step(&m, &[1.5], 1.0, &[0.5], &spec).unwrap()[0];
            assert!((y - 1.0).abs() < 1e-11, "{y}");
            let y = bem_step(&m, &[-40.0], 1.0, &[0.0], &spec).unwrap()[0];
            assert!((y + y * y * y + 40.0).abs() < 1e-10 * 41.0);
        }
    }

    #[test]
    fn bem_nonmonotone_flag() {
        // b(y) = y³ − 3y is not monotone; y − τ b(y) has a negative slope near 0.
        let m = SodeModel {
            drift: Arc::new(|y: &[f64], o: &mut [f64]| o[0] = y[0] * y[0] * y[0] - 3.0 * y[0]),
            drift_jacobian: Some(Arc::new(|y: &[f64], o: &mut [f64]| o[0] = 3.0 * y[0] * y[0] - 3.0)),
            ..pure_cubic(true)
        };
        let mut out = [0.0];
        let mut ws = BemWorkspace::new(1);
        let r = bem_step_into(&m, &[-1.9], 1.0, &[0.0], &SchemeSpec::bem(), &mut out, &mut ws).unwrap();
        assert!(r.nonmonotone);
        assert!((4.0 * out[0] - out[0].powi(3) + 1.9).abs() < 1e-10);
    }

    #[test]
    fn bem_reports_no_convergence() {
        let spec = SchemeSpec { newton_max_iter: 1, ..SchemeSpec::bem() };
        match bem_step(&pure_cubic(true), &[5.0], 1.0, &[0.0], &spec) {
            Err(StepError::NoConvergence { iterations, .. }) => assert_eq!(iterations, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bem_multidimensional_newton() {
        // Decoupled cubic drift in 2D; each coordinate solves y + y³ = rhs.
        let m = SodeModel {
            dim: 2,
            noise_dim: 2,
            drift: Arc::new(|y: &[f64], o: &mut [f64]| {
                o[0] = -y[0] * y[0] * y[0] - 0.1 * y[1];
                o[1] = -y[1] * y[1] * y[1] + 0.1 * y[0];
            }),
            drift_jacobian: None,
            diffusion: Diffusion::Constant(vec![1.0, 0.0, 0.0, 1.0]),
            ..pure_cubic(false)
        };
        let y = bem_step(&m, &[2.0, -1.0], 1.0, &[0.0, 0.0], &SchemeSpec::bem()).unwrap();
        let g0 = y[0] + y[0].powi(3) + 0.1 * y[1] - 2.0;
        let g1 = y[1] + y[1].powi(3) - 0.1 * y[0] + 1.0;
        assert!(g0.abs() < 1e-11 && g1.abs() < 1e-11);
    }

    #[test]
    fn exp_euler_examples() {
        let m = SpectralSpdeModel::new(1, 1.0, NoiseLaw::White, Nonlinearity::Zero).unwrap();
        assert_relative_eq!(exp_euler_step(&m, &[1.0], 0.1, &[0.0]).unwrap()[0], (-PI * PI / 10.0).exp(), epsilon = 1e-15);
        assert_relative_eq!(exp_euler_step(&m, &[1.0], 0.1, &[0.0]).unwrap()[0], 0.372708, epsilon = 1e-6);
        assert_eq!(exp_euler_step(&m, &[0.7], 0.0, &[0.0]).unwrap()[0], 0.7);
        let lin = SpectralSpdeModel::new(1, 1.0, NoiseLaw::White, Nonlinearity::Linear { slope: 2.0 }).unwrap();
        assert_relative_eq!(exp_euler_step(&lin, &[1.0], 0.1, &[0.0]).unwrap()[0], 0.447250, epsilon = 1e-6);
        let bad = SpectralSpdeModel::new(
            2,
            1.0,
            NoiseLaw::White,
            Nonlinearity::Nemytskii(PointwiseMap::new("inf", |_| f64::INFINITY, 1.0)),
        )
        .unwrap();
        assert!(exp_euler_step(&bad, &[1.0, 0.0], 0.1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn semigroup_decay_matches_exponentials() {
        let m = SpectralSpdeModel::new(64, 1.0, NoiseLaw::Power { exponent: 2.0 }, Nonlinearity::Zero).unwrap();
        let y: Vec<f64> = (0..64).map(|j| 1.0 + j as f64).collect();
        for tau in [1e-6, 1e-4, 1e-3] {
            let out = exp_euler_step(&m, &y, tau, &[0.0; 64]).unwrap();
            for j in 1..=64 {
                let want = y[j - 1] * (-m.eigenvalue(j) * tau).exp();
                assert!((out[j - 1] - want).abs() <= 1e-13 * want.abs() + 1e-300, "j {j} tau {tau}");
            }
        }
    }

    #[test]
    fn exact_ou_examples() {
        assert_relative_eq!(exact_ou_step(1.0, 1.0, 2.0, 2f64.ln(), 0.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(ou_noise_variance(1.0, 2f64.ln()).sqrt(), 0.375f64.sqrt(), epsilon = 1e-15);
        assert!(exact_ou_step(1.0, 1.0, 2.0, 50.0, 0.0).abs() < 1e-20);
    }

    #[test]
    fn exact_ou_preserves_stationary_law() {
        let (a, s, tau): (f64, f64, f64) = (1.3, 0.8, 0.37);
        let sd = s / (2.0 * a).sqrt();
        let n = 200_000u64;
        let mut sum2 = 0.0;
        let src = NoiseSource::counter(11, 0);
        let mut z = [0.0; 2];
        for i in 0..n {
            src.fill(i, &mut z);
            let y = exact_ou_step(a, s, sd * z[0], tau, z[1]);
            sum2 += y * y;
        }
        let var = sum2 / n as f64;
        let target = sd * sd;
        assert!((var - target).abs() < 3.0 * target * (2.0 / n as f64).sqrt() * 1.5, "{var} vs {target}");
    }

    #[test]
    fn coupled_increment_moments() {
        for (a, tau) in [(2.0, 1e-5), (1.0, 0.3), (0.5, 2.0)] {
            let n = 100_000u64;
            let src = NoiseSource::counter(5, 1);
            let (mut sww, mut sii, mut swi) = (0.0, 0.0, 0.0);
            let mut z = [0.0; 2];
            for i in 0..n {
                src.fill(i, &mut z);
                let (w, ii) = ou_coupled_increments(a, tau, z[0], z[1]);
                sww += w * w;
                sii += ii * ii;
                swi += w * ii;
            }
            let nf = n as f64;
            let var_i = ou_noise_variance(a, tau);
            let cov = (1.0 - (-a * tau).exp()) / a;
            assert!((sww / nf / tau - 1.0).abs() < 0.02);
            assert!((sii / nf / var_i - 1.0).abs() < 0.02);
            assert!((swi / nf / cov - 1.0).abs() < 0.02);
        }
        // Small-x series agrees with the direct formula at the switch point.
        let (a, tau) = (1.0, 1.0001e-3);
        let x = a * tau;
        let direct = ou_noise_variance(a, tau) - ((1.0 - (-x).exp()) / a).powi(2) / tau;
        let series = (x * x * x / 12.0) * (1.0 - x + 17.0 * x * x / 30.0) / a;
        assert!((direct - series).abs() < 1e-6 * series);
    }

    #[test]
    fn simulate_zero_noise_telescopes() {
        let model = Model::Sode(ou(1.0, 1.0));
        let grid = build_grid(StepSpec::harmonic(), 3).unwrap();
        let out = simulate_path(&model, &SchemeSpec::bem(), &grid, &[1.0], &NoiseSource::Zero, &mut []).unwrap();
        assert_relative_eq!(out.last.state[0], 0.25, epsilon = 1e-15);
        assert_eq!(out.last.t.to_bits(), grid.time(3).to_bits());
    }

    #[test]
    fn simulate_records_and_determinism() {
        let model = Model::Sode(ou(1.0, 1.0));
        let grid = build_grid(StepSpec::harmonic(), 200).unwrap();
        let run = || {
            let mut a = CheckpointObserver::new(vec![10, 100]);
            let mut b = CheckpointObserver::new(vec![10, 100]);
            simulate_path(&model, &SchemeSpec::bem(), &grid, &[0.5], &NoiseSource::counter(3, 4), &mut [&mut a, &mut b])
                .unwrap()
        };
        let r1 = run();
        let r2 = run();
        assert_eq!(r1.records.iter().filter(|r| r.observer == 0).count(), 2);
        assert_eq!(r1.records.iter().filter(|r| r.observer == 1).count(), 2);
        assert_eq!(r1, r2);
        for rec in &r1.records {
            assert_eq!(rec.t.to_bits(), grid.time(rec.n).to_bits());
        }
    }

    #[test]
    fn simulate_annotates_failures() {
        let model = Model::Sode(ou(1.0, 1.0));
        let grid = build_grid(StepSpec::harmonic(), 50).unwrap();
        let noise = NoiseSource::FailAt { at_step: 17, inner: Box::new(NoiseSource::counter(1, 1)) };
        let err = simulate_path(&model, &SchemeSpec::bem(), &grid, &[0.0], &noise, &mut []).unwrap_err();
        assert_eq!(err.n, 17);
        assert!(matches!(err.source, StepError::NonFinite(_)));
    }

    #[test]
    fn scheme_model_pairing() {
        let spde = Model::Spde(SpectralSpdeModel::new(4, 1.0, NoiseLaw::White, Nonlinearity::Zero).unwrap());
        let cubic = Model::Sode(SodeModel::cubic(1.0, 1.0).unwrap());
        assert!(Stepper::new(&spde, SchemeSpec::bem()).is_err());
        assert!(Stepper::new(&cubic, SchemeSpec::exact_ou()).is_err());
        assert!(Stepper::new(&cubic, SchemeSpec::exp_euler()).is_err());
        assert!(Stepper::new(&cubic, SchemeSpec { newton_tol: 0.0, ..SchemeSpec::bem() }).is_err());
    }

    #[test]
    fn synchronous_coupling_contracts_exactly() {
        let model = Model::Sode(ou(1.0, 1.0));
        let grid = build_grid(StepSpec::harmonic(), 500).unwrap();
        let noise = NoiseSource::counter(9, 2);
        let a = simulate_path(&model, &SchemeSpec::bem(), &grid, &[3.0], &noise, &mut []).unwrap();
        let b = simulate_path(&model, &SchemeSpec::bem(), &grid, &[1.0], &noise, &mut []).unwrap();
        let diff = a.last.state[0] - b.last.state[0];
        assert_relative_eq!(diff, 2.0 / 501.0, max_relative = 1e-10);
    }
}
