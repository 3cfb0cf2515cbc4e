//! Martingale decomposition of weighted time averages.
//!
//! For a recorded path `Y_0 = x, Y_1, ..., Y_n` on the grid write
//!
//! * `S_k = Σ_{i≤k} τ_i (f(Y_i) − μ)`,
//! * `W_k(y) = Σ_{i>k} τ_i (P_{k,i} f(y) − μ)` with `P_{k,i} f(y) = E[f(Y_i) | Y_k = y]`,
//! * `M_k = S_k + W_k(Y_k) − W_0(x)` (a martingale with increments `Z_k`),
//! * `ℛ_k = W_0(x) − W_k(Y_k)`.
//!
//! Along the quasi-uniform subsequence, `S_k = R_k + M̃_{k̃} + R̃_{k̃}` with
//! `R_k = S_k − S_{n(k̃)}`, `M̃_{k̃} = M_{n(k̃)}` and `R̃_{k̃} = ℛ_{n(k̃)}`.
//!
//! For the linear model with `f(x) = x`, `μ = 0` everything is explicit:
//! `Σ_{i≥k} τ_i P_{k,i} y = y A_k` with
//! `A_k = Σ_{i≥k} τ_i ∏_{j=k+1}^{i} (1 + aτ_j)^{-1}`. Because
//! `aτ_i ∏_{j≤i}(1+aτ_j)^{-1}` telescopes, `A_k = τ_k + 1/a` whenever the
//! steps are not summable. Otherwise `W_k` is estimated by nested Monte Carlo.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{quasi_uniform_index, tilde_of, GridError, QuasiUniformIndex, TimeGrid};
use crate::integrate::{simulate_path, NoiseSource, Observer, SchemeSpec, SimulationError, StepError, StepView, Stepper};
use crate::model::{Model, TestFunction, TestFunctionKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MartingaleError {
    #[error("index {k} lies beyond the truncation horizon {horizon}")]
    Horizon { k: u64, horizon: u64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("closed-form ledger needs {0}")]
    NotLinear(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// How the conditional expectations `W_k(Y_k)` are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LedgerMode {
    /// Exact tail coefficients for the linear model.
    ClosedFormLinear,
    /// Inner Monte Carlo paths from every recorded `Y_k`, `k ≤ eval_up_to`,
    /// truncated at the end of the grid.
    NestedMc { inner_paths: usize, eval_up_to: u64, seed: u64 },
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// One row of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub k: u64,
    pub t_k: f64,
    pub k_tilde: u64,
    /// `R_k = S_k − S_{n(k̃)}`.
    pub r: f64,
    /// `M̃_{k̃}`.
    pub m_tilde: f64,
    /// `R̃_{k̃}`.
    pub r_tilde: f64,
    /// `S_k`.
    pub s: f64,
    /// `Z_k`.
    pub z: f64,
    /// `|R + M̃ + R̃ − S_k|`.
    pub residual: f64,
}

struct Recorder {
    ys: Vec<Vec<f64>>,
    dws: Vec<Vec<f64>>,
}

impl Observer for Recorder {
    fn on_start(&mut self, x: &[f64]) {
        self.ys.push(x.to_vec());
        self.dws.push(Vec::new());
    }

    fn on_step(&mut self, view: &StepView<'_>) {
        self.ys.push(view.state.to_vec());
        self.dws.push(view.noise.to_vec());
    }
}

/// A recorded path together with its martingale decomposition.
pub struct MartingaleLedger<'a> {
    grid: &'a TimeGrid,
    index: QuasiUniformIndex,
    f: &'a TestFunction,
    mu: f64,
    mode: LedgerMode,
    /// `Y_k`, `k = 0..=n`.
    ys: Vec<Vec<f64>>,
    /// `ΔW_{k−1}` consumed by step `k` (empty at `k = 0`).
    dws: Vec<Vec<f64>>,
    /// `A_k` (closed-form mode).
    a_coef: Vec<f64>,
    /// `W_k(Y_k)` for `k` where it is available.
    w: Vec<f64>,
    /// Standard errors of `W_k(Y_k)` (zero in closed-form mode).
    w_stderr: Vec<f64>,
    /// Prefix sums `S_k`.
    s: Vec<f64>,
    /// `Z_k` (`Z_0 = 0`).
    z: Vec<f64>,
    /// Prefix sums `M_k = Σ_{j≤k} Z_j`.
    m: Vec<f64>,
    /// Linear rate `a` (closed-form mode).
    rate: f64,
}

impl<'a> MartingaleLedger<'a> {
    /// Simulates one path over the whole grid and builds its ledger.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        model: &'a Model,
        scheme: &SchemeSpec,
        grid: &'a TimeGrid,
        f: &'a TestFunction,
        mu: f64,
        x: &[f64],
        noise: &NoiseSource,
        mode: LedgerMode,
    ) -> Result<Self, MartingaleError> {
        let k_max = grid.horizon().floor().max(1.0) as u64;
        let index = quasi_uniform_index(grid, k_max)?;
        if let LedgerMode::ClosedFormLinear = mode {
            closed_form_requirements(model, f, mu)?;
            if !grid.spec().sum_diverges() {
                return Err(MartingaleError::NotLinear("non-summable steps".into()));
            }
        }
        let mut rec = Recorder { ys: Vec::new(), dws: Vec::new() };
        simulate_path(model, scheme, grid, x, noise, &mut [&mut rec])?;
        let n = grid.n_max() as usize;
        let mut s = vec![0.0; n + 1];
        let mut s_acc = crate::grid::CompensatedSum::new();
        for k in 1..=n {
            s_acc.add(grid.step(k as u64) * (f.eval(&rec.ys[k]) - mu));
            s[k] = s_acc.value();
        }
        let mut ledger = Self {
            grid,
            index,
            f,
            mu,
            mode,
            ys: rec.ys,
            dws: rec.dws,
            a_coef: Vec::new(),
            w: Vec::new(),
            w_stderr: Vec::new(),
            s,
            z: Vec::new(),
            m: Vec::new(),
            rate: 0.0,
        };
        match mode {
            LedgerMode::ClosedFormLinear => ledger.fill_closed_form(model),
            LedgerMode::NestedMc { inner_paths, eval_up_to, seed } => {
                ledger.fill_nested(model, scheme, inner_paths, eval_up_to, seed, noise)?
            }
        }
        Ok(ledger)
    }

    fn fill_closed_form(&mut self, model: &Model) {
        let lin = model.linear().expect("checked");
        let a = lin.a;
        self.rate = a;
        let n = self.grid.n_max() as usize;
        // Backward recurrence A_{k−1} = τ_{k−1} + A_k / (1 + aτ_k), seeded with
        // the exact value at the horizon.
        let mut coef = vec![0.0; n + 1];
        coef[n] = self.grid.step(n as u64) + 1.0 / a;
        for k in (1..=n).rev() {
            coef[k - 1] = self.grid.step(k as u64 - 1) + coef[k] / (1.0 + a * self.grid.step(k as u64));
        }
        let mut w = vec![0.0; n + 1];
        let mut z = vec![0.0; n + 1];
        let mut m = vec![0.0; n + 1];
        let mut m_acc = crate::grid::CompensatedSum::new();
        for k in 0..=n {
            w[k] = self.ys[k][0] * (coef[k] - self.grid.step(k as u64));
            if k > 0 {
                let tau = self.grid.step(k as u64);
                z[k] = lin.sigma * coef[k] * self.dws[k][0] / (1.0 + a * tau);
                m_acc.add(z[k]);
                m[k] = m_acc.value();
            }
        }
        self.a_coef = coef;
        self.w_stderr = vec![0.0; n + 1];
        self.w = w;
        self.z = z;
        self.m = m;
    }

    fn fill_nested(
        &mut self,
        model: &Model,
        scheme: &SchemeSpec,
        inner_paths: usize,
        eval_up_to: u64,
        seed: u64,
        outer: &NoiseSource,
    ) -> Result<(), MartingaleError> {
        if inner_paths == 0 {
            return Err(MartingaleError::Usage("nested Monte Carlo needs at least one inner path".into()));
        }
        let horizon = self.grid.n_max();
        if eval_up_to >= horizon {
            return Err(MartingaleError::Horizon { k: eval_up_to, horizon });
        }
        let outer_id = match outer {
            NoiseSource::Counter { path, .. } => *path,
            _ => 0,
        };
        let len = eval_up_to as usize + 1;
        let mut w = vec![0.0; len];
        let mut w_se = vec![0.0; len];
        for k in 0..len {
            let est = tail_sum_nested(
                model,
                scheme,
                self.grid,
                self.f,
                self.mu,
                k as u64,
                &self.ys[k],
                inner_paths,
                seed,
                outer_id,
            )?;
            w[k] = est.mean;
            w_se[k] = est.stderr;
        }
        let mut z = vec![0.0; len];
        let mut m = vec![0.0; len];
        for k in 1..len {
            let tau = self.grid.step(k as u64);
            z[k] = tau * (self.f.eval(&self.ys[k]) - self.mu) + w[k] - w[k - 1];
            m[k] = m[k - 1] + z[k];
        }
        self.w = w;
        self.w_stderr = w_se;
        self.z = z;
        self.m = m;
        Ok(())
    }

    pub fn mode(&self) -> LedgerMode {
        self.mode
    }

    pub fn index(&self) -> &QuasiUniformIndex {
        &self.index
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid
    }

    /// Largest `k` for which `Z_k` and the decomposition are available.
    pub fn evaluated_up_to(&self) -> u64 {
        (self.z.len() - 1) as u64
    }

    /// Recorded `Y_k`.
    pub fn state(&self, k: u64) -> &[f64] {
        &self.ys[k as usize]
    }

    /// Recorded `ΔW_{k−1}` (the increment consumed by step `k`).
    pub fn increment(&self, k: u64) -> &[f64] {
        &self.dws[k as usize]
    }

    /// `S_k`.
    pub fn partial_sum(&self, k: u64) -> f64 {
        self.s[k as usize]
    }

    /// `W_k(Y_k)` with its standard error.
    pub fn tail_value(&self, k: u64) -> Result<McEstimate, MartingaleError> {
        self.check(k)?;
        Ok(McEstimate { mean: self.w[k as usize], stderr: self.w_stderr[k as usize] })
    }

    /// `A_k` (closed-form mode).
    pub fn tail_coefficient(&self, k: u64) -> Result<f64, MartingaleError> {
        if self.a_coef.is_empty() {
            return Err(MartingaleError::NotLinear("the closed-form mode".into()));
        }
        self.check(k)?;
        Ok(self.a_coef[k as usize])
    }

    /// Mass of the tail beyond the horizon `I`, `Σ_{i>I} τ_i P_{k,i}`, which
    /// the horizon seed of the recurrence includes exactly (closed-form mode).
    pub fn tail_mass_beyond_horizon(&self, k: u64) -> Result<f64, MartingaleError> {
        self.check(k)?;
        let mut prod = 1.0;
        for j in k + 1..=self.grid.n_max() {
            prod /= 1.0 + self.rate * self.grid.step(j);
        }
        Ok(prod / self.rate)
    }

    /// Shape of the truncation error of the nested estimate at `k`,
    /// `max(τ_I^{γα}, e^{−rate·γ(t_I − t_k)})` with `I = n_max`. Reported
    /// only; the constant in front is unknown.
    pub fn truncation_heuristic(&self, k: u64, gamma: f64, alpha: f64, rate: f64) -> Result<f64, MartingaleError> {
        self.check(k)?;
        let i = self.grid.n_max();
        let a = self.grid.step(i).powf(gamma * alpha);
        let b = (-rate * gamma * (self.grid.time(i) - self.grid.time(k))).exp();
        Ok(a.max(b))
    }

    /// `Σ_{i≥k} τ_i E[Y_i | Y_k = x] = x A_k` for the linear model.
    pub fn tail_weighted_mean_linear(&self, k: u64, x: f64) -> Result<f64, MartingaleError> {
        Ok(x * self.tail_coefficient(k)?)
    }

    fn check(&self, k: u64) -> Result<(), MartingaleError> {
        let horizon = self.evaluated_up_to();
        if k > horizon {
            Err(MartingaleError::Horizon { k, horizon })
        } else {
            Ok(())
        }
    }

    /// `Z_k`.
    pub fn martingale_increment(&self, k: u64) -> Result<f64, MartingaleError> {
        if k == 0 {
            return Err(MartingaleError::Usage("martingale increments start at k = 1".into()));
        }
        self.check(k)?;
        Ok(self.z[k as usize])
    }

    /// `M_k = Σ_{j≤k} Z_j`.
    pub fn martingale(&self, k: u64) -> Result<f64, MartingaleError> {
        self.check(k)?;
        Ok(self.m[k as usize])
    }

    /// `Z̃_k = Σ_{j=n(k−1)+1}^{n(k)} Z_j = M_{n(k)} − M_{n(k−1)}`.
    pub fn block_increment(&self, k: u64) -> Result<f64, MartingaleError> {
        if k == 0 || k > self.index.k_max() {
            return Err(MartingaleError::Horizon { k, horizon: self.index.k_max() });
        }
        let hi = self.index.n_of(k);
        let lo = self.index.n_of(k - 1);
        self.check(hi)?;
        Ok(self.z[lo as usize + 1..=hi as usize].iter().sum())
    }

    /// `R_k`, `M̃_{k̃}` and `R̃_{k̃}` at grid index `k`.
    pub fn decomposition(&self, k: u64) -> Result<Decomposition, MartingaleError> {
        self.check(k)?;
        let kt = tilde_of(&self.index, self.grid, k)?;
        let nk = self.index.n_of(kt);
        let s = self.s[k as usize];
        let r = s - self.s[nk as usize];
        let m_tilde = self.m[nk as usize];
        let r_tilde = self.w[0] - self.w[nk as usize];
        let z = if k == 0 { 0.0 } else { self.z[k as usize] };
        let residual = (r + m_tilde + r_tilde - s).abs();
        Ok(Decomposition { k, t_k: self.grid.time(k), k_tilde: kt, r, m_tilde, r_tilde, s, z, residual })
    }

    /// `(1/t̃_N) Σ_{k≤N} Z̃_k²`.
    pub fn qv_average(&self, n_blocks: u64) -> Result<f64, MartingaleError> {
        if n_blocks == 0 {
            return Err(MartingaleError::Usage("qv_average needs N ≥ 1".into()));
        }
        let mut sum = 0.0;
        for k in 1..=n_blocks {
            let zt = self.block_increment(k)?;
            sum += zt * zt;
        }
        Ok(sum / self.index.tilde_time(n_blocks))
    }

    /// `M̃_0, ..., M̃_N` and `t̃_0, ..., t̃_N`.
    pub fn subsequence_martingale(&self, n_blocks: u64) -> Result<(Vec<f64>, Vec<f64>), MartingaleError> {
        if n_blocks > self.index.k_max() {
            return Err(MartingaleError::Horizon { k: n_blocks, horizon: self.index.k_max() });
        }
        let mut m = Vec::with_capacity(n_blocks as usize + 1);
        let mut t = Vec::with_capacity(n_blocks as usize + 1);
        for k in 0..=n_blocks {
            let nk = self.index.n_of(k);
            self.check(nk)?;
            m.push(self.m[nk as usize]);
            t.push(self.index.tilde_time(k));
        }
        Ok((m, t))
    }

    /// `|R̃_{k̃}| / √t̃_{k̃}`.
    pub fn scaled_subsequence_remainder(&self, kt: u64) -> Result<f64, MartingaleError> {
        let nk = self.index.n_of(kt);
        self.check(nk)?;
        Ok((self.w[0] - self.w[nk as usize]).abs() / self.index.tilde_time(kt).sqrt())
    }
}

fn closed_form_requirements(model: &Model, f: &TestFunction, mu: f64) -> Result<(), MartingaleError> {
    if model.linear().is_none() {
        return Err(MartingaleError::NotLinear("the linear model".into()));
    }
    if !matches!(f.kind, TestFunctionKind::Identity | TestFunctionKind::Coordinate(0)) {
        return Err(MartingaleError::NotLinear("f = identity".into()));
    }
    if mu != 0.0 {
        return Err(MartingaleError::NotLinear(format!("μ(f) = 0, got {mu}")));
    }
    Ok(())
}

/// Inner-path noise: keyed by the outer path and the inner index, with the
/// grid step as counter, so estimates at different `k` share their draws.
fn inner_noise(seed: u64, outer_path: u64, inner: u64) -> NoiseSource {
    let path = outer_path.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ inner.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    NoiseSource::counter(seed ^ 0x6E65_7374_6564_0000, path)
}

/// Nested Monte Carlo estimate of `P_{m,n} f(x)`.
#[allow(clippy::too_many_arguments)]
pub fn ptf_nested_mc(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    f: &TestFunction,
    m: u64,
    n: u64,
    x: &[f64],
    inner_paths: usize,
    seed: u64,
    outer_path: u64,
) -> Result<McEstimate, MartingaleError> {
    if n < m {
        return Err(MartingaleError::Usage(format!("need n ≥ m, got m = {m}, n = {n}")));
    }
    if inner_paths == 0 {
        return Err(MartingaleError::Usage("at least one inner path is required".into()));
    }
    if n > grid.n_max() {
        return Err(MartingaleError::Horizon { k: n, horizon: grid.n_max() });
    }
    if n == m {
        return Ok(McEstimate { mean: f.eval(x), stderr: 0.0 });
    }
    let mut stepper = Stepper::new(model, *scheme)?;
    let mut vals = Vec::with_capacity(inner_paths);
    let mut xi = vec![0.0; model.noise_dim()];
    let mut dw = vec![0.0; model.noise_dim()];
    for j in 0..inner_paths {
        let noise = inner_noise(seed, outer_path, j as u64);
        let mut y = x.to_vec();
        for i in m + 1..=n {
            let tau = grid.step(i);
            noise.fill(i, &mut xi);
            stepper.scale_noise(tau, &xi, &mut dw);
            stepper.step(&mut y, tau, &xi, &dw).map_err(|source| SimulationError { n: i, source })?;
        }
        vals.push(f.eval(&y));
    }
    Ok(mean_and_stderr(&vals))
}

/// `W_k(x) ≈ Σ_{i=k+1}^{I} τ_i (P̂_{k,i} f(x) − μ)` with `I = n_max`.
#[allow(clippy::too_many_arguments)]
fn tail_sum_nested(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    f: &TestFunction,
    mu: f64,
    k: u64,
    x: &[f64],
    inner_paths: usize,
    seed: u64,
    outer_path: u64,
) -> Result<McEstimate, MartingaleError> {
    let mut stepper = Stepper::new(model, *scheme)?;
    let mut xi = vec![0.0; model.noise_dim()];
    let mut dw = vec![0.0; model.noise_dim()];
    let mut vals = Vec::with_capacity(inner_paths);
    for j in 0..inner_paths {
        let noise = inner_noise(seed, outer_path, j as u64);
        let mut y = x.to_vec();
        let mut acc = 0.0;
        for i in k + 1..=grid.n_max() {
            let tau = grid.step(i);
            noise.fill(i, &mut xi);
            stepper.scale_noise(tau, &xi, &mut dw);
            stepper.step(&mut y, tau, &xi, &dw).map_err(|source| SimulationError { n: i, source })?;
            acc += tau * (f.eval(&y) - mu);
        }
        vals.push(acc);
    }
    Ok(mean_and_stderr(&vals))
}

fn mean_and_stderr(vals: &[f64]) -> McEstimate {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return McEstimate { mean, stderr: 0.0 };
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    McEstimate { mean, stderr: (var / n).sqrt() }
}

/// Strassen functional `Λ_N(t)`: the subsequence martingale on the clock
/// `t̃_k / t̃_N`, interpolated linearly and normalised by
/// `√(2 v̂² t̃_N log log(v̂² t̃_N))`.
pub fn strassen_functional(m_tilde: &[f64], t_tilde: &[f64], v_hat: f64, n: usize, t: f64) -> Result<f64, MartingaleError> {
    if !(v_hat > 0.0) {
        return Err(MartingaleError::Domain(format!("v̂ must be positive, got {v_hat}")));
    }
    if n == 0 || n >= m_tilde.len() || n >= t_tilde.len() {
        return Err(MartingaleError::Usage(format!("N = {n} outside the available series")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(MartingaleError::Domain(format!("t must lie in [0, 1], got {t}")));
    }
    let scale = v_hat * v_hat * t_tilde[n];
    if !(scale > std::f64::consts::E) {
        return Err(MartingaleError::Domain(format!("log log(v̂² t̃_N) needs v̂² t̃_N > e, got {scale}")));
    }
    let norm = (2.0 * scale * scale.ln().ln()).sqrt();
    let target = t * t_tilde[n];
    // t̃_0 = 0 anchors Λ_N(0) = M̃_0 = 0.
    let mut k = 0;
    while k + 1 < n && t_tilde[k + 1] < target {
        k += 1;
    }
    let (t0, t1) = (t_tilde[k], t_tilde[k + 1]);
    let frac = if t1 > t0 { ((target - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
    Ok((m_tilde[k] + frac * (m_tilde[k + 1] - m_tilde[k])) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, StepSpec};
    use crate::model::SodeModel;
    use approx::assert_relative_eq;

    fn ou(a: f64, sigma: f64) -> Model {
        Model::Sode(SodeModel::ornstein_uhlenbeck(a, sigma).unwrap())
    }

    #[test]
    fn tail_coefficients_telescope() {
        let model = ou(1.0, 1.0);
        let grid = build_grid(StepSpec::harmonic(), 200).unwrap();
        let f = TestFunction::identity();
        let l = MartingaleLedger::record(&model, &SchemeSpec::bem(), &grid, &f, 0.0, &[0.3], &NoiseSource::Zero, LedgerMode::ClosedFormLinear)
            .unwrap();
        assert_relative_eq!(l.tail_weighted_mean_linear(2, 1.0).unwrap(), 1.5, epsilon = 1e-12);
        assert_relative_eq!(l.tail_weighted_mean_linear(1, 1.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(l.tail_weighted_mean_linear(5, 0.0).unwrap(), 0.0);
        assert!(matches!(l.tail_weighted_mean_linear(201, 1.0), Err(MartingaleError::Horizon { .. })));
        // Independent route: a long direct partial sum of τ_i ∏ (1 + τ_j)^{-1}.
        let long = build_grid(StepSpec::harmonic(), 2_000_000).unwrap();
        let k = 5u64;
        let (mut sum, mut prod) = (long.step(k), 1.0);
        for i in k + 1..=long.n_max() {
            prod /= 1.0 + long.step(i);
            sum += long.step(i) * prod;
        }
        // The truncated sum misses the tail mass prod ≈ 6/2e6.
        assert!((sum + prod - l.tail_coefficient(k).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn increments_are_brownian_for_unit_rate() {
        let model = ou(1.0, 1.0);
        let grid = build_grid(StepSpec::harmonic(), 3000).unwrap();
        let f = TestFunction::identity();
        let l = MartingaleLedger::record(
            &model,
            &SchemeSpec::bem(),
            &grid,
            &f,
            0.0,
            &[0.0],
            &NoiseSource::counter(1, 1),
            LedgerMode::ClosedFormLinear,
        )
        .unwrap();
        for k in 1..=3000 {
            let z = l.martingale_increment(k).unwrap();
            let dw = l.increment(k)[0];
            assert!((z - dw).abs() <= 1e-10 * dw.abs(), "k {k}");
            // Second route: Z_k = τ_k f(Y_k) + W_k(Y_k) − W_{k−1}(Y_{k−1}).
            let split = grid.step(k) * l.state(k)[0] + l.tail_value(k).unwrap().mean - l.tail_value(k - 1).unwrap().mean;
            assert!((z - split).abs() < 1e-12 * (1.0 + z.abs()));
        }
        for k in [1, 7, 100, 2999, 3000] {
            let d = l.decomposition(k).unwrap();
            assert!(d.residual <= 1e-10 * (1.0 + d.s.abs()));
        }
        let nk = l.index().n_of(4);
        assert_eq!(l.decomposition(nk).unwrap().r, 0.0);
    }

    #[test]
    fn zero_noise_from_origin_is_all_zero() {
        let model = ou(1.0, 1.0);
        let grid = build_grid(StepSpec::harmonic(), 100).unwrap();
        let f = TestFunction::identity();
        let l = MartingaleLedger::record(&model, &SchemeSpec::bem(), &grid, &f, 0.0, &[0.0], &NoiseSource::Zero, LedgerMode::ClosedFormLinear)
            .unwrap();
        let d = l.decomposition(50).unwrap();
        assert_eq!((d.r, d.m_tilde, d.r_tilde), (0.0, 0.0, 0.0));
        assert_eq!(l.qv_average(3).unwrap(), 0.0);
        assert!(l.qv_average(0).is_err());
    }

    #[test]
    fn closed_form_requires_linear_identity() {
        let grid = build_grid(StepSpec::harmonic(), 50).unwrap();
        let cubic = Model::Sode(SodeModel::cubic(1.0, 1.0).unwrap());
        let f = TestFunction::identity();
        let r = MartingaleLedger::record(&cubic, &SchemeSpec::bem(), &grid, &f, 0.0, &[0.0], &NoiseSource::Zero, LedgerMode::ClosedFormLinear);
        assert!(matches!(r, Err(MartingaleError::NotLinear(_))));
        let model = ou(1.0, 1.0);
        let r = MartingaleLedger::record(&model, &SchemeSpec::bem(), &grid, &f, 0.5, &[0.0], &NoiseSource::Zero, LedgerMode::ClosedFormLinear);
        assert!(r.is_err());
    }

    #[test]
    fn nested_mc_conditional_mean() {
        let model = ou(1.0, 1.0);
        let grid = build_grid(StepSpec::harmonic(), 60).unwrap();
        let f = TestFunction::identity();
        let scheme = SchemeSpec::bem();
        let same = ptf_nested_mc(&model, &scheme, &grid, &f, 7, 7, &[0.4], 10, 1, 0).unwrap();
        assert_eq!((same.mean, same.stderr), (0.4, 0.0));
        for (m, n) in [(0, 10), (5, 40), (20, 60)] {
            let est = ptf_nested_mc(&model, &scheme, &grid, &f, m, n, &[1.5], 4000, 3, 9).unwrap();
            let exact: f64 = 1.5 * (m + 1..=n).map(|j| 1.0 / (1.0 + grid.step(j))).product::<f64>();
            assert!((est.mean - exact).abs() <= 4.0 * est.stderr, "{m} {n}: {est:?} vs {exact}");
        }
        let still = ou(1.0, 0.0);
        let est = ptf_nested_mc(&still, &scheme, &grid, &f, 3, 30, &[2.0], 3, 1, 0).unwrap();
        let exact: f64 = 2.0 * (4..=30).map(|j| 1.0 / (1.0 + grid.step(j))).product::<f64>();
        assert_relative_eq!(est.mean, exact, epsilon = 1e-14);
    }

    #[test]
    fn nested_mode_matches_closed_form() {
        let model = ou(1.0, 1.0);
        let grid = build_grid(StepSpec::harmonic(), 400).unwrap();
        let f = TestFunction::identity();
        let scheme = SchemeSpec::bem();
        let noise = NoiseSource::counter(2, 5);
        let exact = MartingaleLedger::record(&model, &scheme, &grid, &f, 0.0, &[0.8], &noise, LedgerMode::ClosedFormLinear).unwrap();
        let nested = MartingaleLedger::record(
            &model,
            &scheme,
            &grid,
            &f,
            0.0,
            &[0.8],
            &noise,
            LedgerMode::NestedMc { inner_paths: 400, eval_up_to: 12, seed: 4 },
        )
        .unwrap();
        for k in 0..=12 {
            let e = exact.tail_value(k).unwrap().mean;
            let est = nested.tail_value(k).unwrap();
            // Truncation at I = 400 drops a term of size |y| P_{k,I}/a ≲ 0.01.
            assert!((e - est.mean).abs() <= 4.0 * est.stderr + 0.02, "k {k}: {e} vs {est:?}");
        }
        let d = nested.decomposition(12).unwrap();
        assert!(d.residual < 1e-12 * (1.0 + d.s.abs()));
        assert!(nested.decomposition(13).is_err());
    }

    #[test]
    fn strassen_examples() {
        let t: Vec<f64> = (0..=20).map(|k| k as f64).collect();
        let zeros = vec![0.0; 21];
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(strassen_functional(&zeros, &t, 1.0, 20, s).unwrap(), 0.0);
        }
        let m: Vec<f64> = t.iter().map(|&x| if x > std::f64::consts::E { (2.0 * x * x.ln().ln()).sqrt() } else { 0.0 }).collect();
        assert_relative_eq!(strassen_functional(&m, &t, 1.0, 20, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(strassen_functional(&m, &t, 1.0, 20, 0.0).unwrap(), 0.0);
        assert!(strassen_functional(&m, &t, 1.0, 2, 1.0).is_err());
        assert!(strassen_functional(&m, &t, 0.0, 20, 1.0).is_err());
        // Midpoint between clock nodes interpolates linearly.
        let lin: Vec<f64> = t.clone();
        let norm = (2.0 * 20.0 * 20f64.ln().ln()).sqrt();
        assert_relative_eq!(strassen_functional(&lin, &t, 1.0, 20, 0.525).unwrap(), 10.5 / norm, epsilon = 1e-14);
    }
}
