//! Model descriptions: dissipative SODEs, spectral stochastic heat equations,
//! the test-function classes `C_{p,γ}` and the quasi-metric `d_{p,γ}`.
//!
//! States are flat `f64` vectors in both cases: `d` coordinates for an SODE,
//! `J` sine coefficients for the spectral SPDE.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// `out = b(y)`. Callbacks must be re-entrant.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `out` = row-major matrix evaluated at `y`. Callbacks must be re-entrant.
pub type MatrixField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type StateFunctional = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Diffusion {
    /// Row-major `d × m` matrix.
    Constant(Vec<f64>),
    /// Row-major `d × m` matrix as a function of the state.
    StateDependent(MatrixField),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::StateDependent(_) => f.write_str("StateDependent(..)"),
        }
    }
}

/// Declared dissipativity and growth constants of an SODE.
///
/// * `c1`: Lipschitz constant of σ (Hilbert–Schmidt norm)
/// * `c2`: bound on ‖σ‖_HS
/// * `c3`: one-sided Lipschitz constant of the drift
/// * `c4`, `qbar`: polynomial growth of the drift's local Lipschitz constant
/// * `c6`: free weight in the Lyapunov bound, `c6 ≥ 1 + c3 τ̄` is what the
///   moment argument uses
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SodeConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub qbar: f64,
    pub c6: f64,
}

impl SodeConstants {
    /// `c5 = 2 c3 − 15 c1²`.
    pub fn c5(&self) -> f64 {
        2.0 * self.c3 - 15.0 * self.c1 * self.c1
    }

    /// `c7 = |b(0)|² / c3 + c6 c2²`.
    pub fn c7(&self, drift_at_zero_sq: f64) -> f64 {
        drift_at_zero_sq / self.c3 + self.c6 * self.c2 * self.c2
    }

    /// `c8 = c5 / (1 + c5 τ̄)`, the certified contraction rate of BEM.
    pub fn c8(&self, tau_bar: f64) -> f64 {
        let c5 = self.c5();
        c5 / (1.0 + c5 * tau_bar)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("c4", self.c4), ("c6", self.c6)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.qbar >= 1.0) {
            return Err(ModelError::Config(format!("qbar must be at least 1, got {}", self.qbar)));
        }
        if !(self.c3 > 7.5 * self.c1 * self.c1) {
            return Err(ModelError::Config(format!(
                "c3 = {} must exceed (15/2) c1² = {}",
                self.c3,
                7.5 * self.c1 * self.c1
            )));
        }
        if self.c5() > 13.0 {
            return Err(ModelError::Config(format!("c5 = 2 c3 − 15 c1² = {} must not exceed 13", self.c5())));
        }
        Ok(())
    }
}

/// Parameters of the scalar linear model `dX = −a X dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub a: f64,
    pub sigma: f64,
}

impl LinearParams {
    /// Stationary variance `σ² / (2a)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.a)
    }
}

/// `dX = b(X) dt + σ(X) dW` in `R^d` driven by an `m`-dimensional Brownian motion.
#[derive(Clone)]
pub struct SodeModel {
    pub name: String,
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: VectorField,
    /// Row-major `d × d` Jacobian of the drift, when available.
    pub drift_jacobian: Option<MatrixField>,
    pub diffusion: Diffusion,
    pub constants: SodeConstants,
    /// Set when `b(x) = −a x` and σ is a constant scalar.
    pub linear: Option<LinearParams>,
}

impl fmt::Debug for SodeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SodeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("diffusion", &self.diffusion)
            .field("constants", &self.constants)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

impl SodeModel {
    /// Scalar Ornstein–Uhlenbeck model `dX = −a X dt + σ dW`.
    pub fn ornstein_uhlenbeck(a: f64, sigma: f64) -> Result<Self, ModelError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ModelError::Config(format!("linear model needs a > 0, got {a}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(ModelError::Config(format!("sigma must be finite and nonnegative, got {sigma}")));
        }
        let constants = SodeConstants { c1: 0.0, c2: sigma.abs(), c3: a, c4: a, qbar: 1.0, c6: 1.0 + a };
        let model = Self {
            name: "ou".into(),
            dim: 1,
            noise_dim: 1,
            drift: Arc::new(move |y: &[f64], out: &mut [f64]| out[0] = -a * y[0]),
            drift_jacobian: Some(Arc::new(move |_: &[f64], out: &mut [f64]| out[0] = -a)),
            diffusion: Diffusion::Constant(vec![sigma]),
            constants,
            linear: Some(LinearParams { a, sigma }),
        };
        model.validate()?;
        Ok(model)
    }

    /// Scalar model with drift `b(x) = −a x − x³` and constant noise.
    pub fn cubic(a: f64, sigma: f64) -> Result<Self, ModelError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ModelError::Config(format!("cubic model needs a > 0, got {a}")));
        }
        let constants = SodeConstants { c1: 0.0, c2: sigma.abs(), c3: a, c4: a.max(1.5), qbar: 3.0, c6: 1.0 + a };
        let model = Self {
            name: "cubic".into(),
            dim: 1,
            noise_dim: 1,
            drift: Arc::new(move |y: &[f64], out: &mut [f64]| out[0] = -a * y[0] - y[0] * y[0] * y[0]),
            drift_jacobian: Some(Arc::new(move |y: &[f64], out: &mut [f64]| out[0] = -a - 3.0 * y[0] * y[0])),
            diffusion: Diffusion::Constant(vec![sigma]),
            constants,
            linear: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// General scalar model from a drift and optional derivative.
    pub fn scalar(
        name: impl Into<String>,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: Option<ScalarMap>,
        diffusion: Diffusion,
        constants: SodeConstants,
    ) -> Result<Self, ModelError> {
        let drift_jacobian: Option<MatrixField> =
            derivative.map(|d| Arc::new(move |y: &[f64], out: &mut [f64]| out[0] = d(y[0])) as MatrixField);
        let model = Self {
            name: name.into(),
            dim: 1,
            noise_dim: 1,
            drift: Arc::new(move |y: &[f64], out: &mut [f64]| out[0] = drift(y[0])),
            drift_jacobian,
            diffusion,
            constants,
            linear: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.noise_dim == 0 {
            return Err(ModelError::Config("state and noise dimensions must be positive".into()));
        }
        if let Diffusion::Constant(m) = &self.diffusion {
            if m.len() != self.dim * self.noise_dim {
                return Err(ModelError::Dimension { expected: self.dim * self.noise_dim, got: m.len() });
            }
        }
        if let Some(lin) = self.linear {
            if !(lin.a > 0.0) {
                return Err(ModelError::Config(format!("linear flag requires a > 0, got {}", lin.a)));
            }
        }
        self.constants.validate()
    }

    pub fn c5(&self) -> f64 {
        self.constants.c5()
    }

    pub fn c7(&self) -> f64 {
        let zero = vec![0.0; self.dim];
        let mut b0 = vec![0.0; self.dim];
        (self.drift)(&zero, &mut b0);
        self.constants.c7(b0.iter().map(|v| v * v).sum())
    }

    pub fn c8(&self, tau_bar: f64) -> f64 {
        self.constants.c8(tau_bar)
    }

    /// `out = σ(y) dw`.
    pub fn apply_diffusion(&self, y: &[f64], dw: &[f64], out: &mut [f64]) {
        let m = self.noise_dim;
        let mut eval;
        let mat: &[f64] = match &self.diffusion {
            Diffusion::Constant(mat) => mat,
            Diffusion::StateDependent(f) => {
                eval = vec![0.0; self.dim * m];
                f(y, &mut eval);
                &eval
            }
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o = mat[i * m..(i + 1) * m].iter().zip(dw).map(|(s, w)| s * w).sum();
        }
    }
}

/// Either kind of model; both evolve a flat state vector.
#[derive(Debug, Clone)]
pub enum Model {
    Sode(SodeModel),
    Spde(SpectralSpdeModel),
}

impl Model {
    pub fn state_dim(&self) -> usize {
        match self {
            Model::Sode(m) => m.dim,
            Model::Spde(m) => m.modes,
        }
    }

    /// Number of standard normals consumed per step.
    pub fn noise_dim(&self) -> usize {
        match self {
            Model::Sode(m) => m.noise_dim,
            Model::Spde(m) => m.modes,
        }
    }

    pub fn linear(&self) -> Option<LinearParams> {
        match self {
            Model::Sode(m) => m.linear,
            Model::Spde(_) => None,
        }
    }
}

impl From<SodeModel> for Model {
    fn from(m: SodeModel) -> Self {
        Model::Sode(m)
    }
}

impl From<SpectralSpdeModel> for Model {
    fn from(m: SpectralSpdeModel) -> Self {
        Model::Spde(m)
    }
}

/// Law of the covariance weights `q_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLaw {
    /// `q_j = j^{-s}`.
    Power { exponent: f64 },
    /// `q_j = 1`.
    White,
}

impl NoiseLaw {
    pub fn weight(&self, j: usize) -> f64 {
        match *self {
            NoiseLaw::Power { exponent } => (j as f64).powf(-exponent),
            NoiseLaw::White => 1.0,
        }
    }

    /// Decay exponent `s` of `q_j = j^{-s}` (0 for white noise).
    pub fn decay(&self) -> f64 {
        match *self {
            NoiseLaw::Power { exponent } => exponent,
            NoiseLaw::White => 0.0,
        }
    }
}

/// Pointwise map `φ` with a declared Lipschitz constant.
#[derive(Clone)]
pub struct PointwiseMap {
    pub name: String,
    pub map: ScalarMap,
    pub lipschitz: f64,
}

impl fmt::Debug for PointwiseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PointwiseMap").field("name", &self.name).field("lipschitz", &self.lipschitz).finish()
    }
}

impl PointwiseMap {
    pub fn new(name: impl Into<String>, map: impl Fn(f64) -> f64 + Send + Sync + 'static, lipschitz: f64) -> Self {
        Self { name: name.into(), map: Arc::new(map), lipschitz }
    }

    /// Built-in maps by name: `sin`, `tanh`.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sin" => Some(Self::new("sin", f64::sin, 1.0)),
            "tanh" => Some(Self::new("tanh", f64::tanh, 1.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Nonlinearity {
    Zero,
    /// `F(u) = slope · u`, acting mode by mode.
    Linear { slope: f64 },
    /// `F(u)(x) = φ(u(x))`.
    Nemytskii(PointwiseMap),
}

impl Nonlinearity {
    /// Lipschitz constant of `F` on `L²`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear { slope } => slope.abs(),
            Nonlinearity::Nemytskii(phi) => phi.lipschitz,
        }
    }
}

/// Stochastic heat equation `dX = (ΔX + F(X)) dt + dW^Q` on `(0, 1)` with
/// Dirichlet conditions, truncated to the first `J` sine modes
/// `e_j(x) = √2 sin(jπx)`, `λ_j = j²π²`.
#[derive(Debug, Clone)]
pub struct SpectralSpdeModel {
    pub modes: usize,
    pub beta1: f64,
    pub noise: NoiseLaw,
    pub nonlinearity: Nonlinearity,
    /// One-sided constant of `F`; must stay below `λ_1`.
    pub c9: f64,
    mesh: usize,
    /// `√2 sin(jπ x_i)` for interior mesh points, row-major `(mesh − 1) × J`.
    sine_table: Arc<Vec<f64>>,
}

/// Default quadrature mesh for a given mode count.
pub fn default_mesh(modes: usize) -> usize {
    (4 * modes).max(1 << 10)
}

impl SpectralSpdeModel {
    pub fn new(modes: usize, beta1: f64, noise: NoiseLaw, nonlinearity: Nonlinearity) -> Result<Self, ModelError> {
        Self::with_mesh(modes, beta1, noise, nonlinearity, default_mesh(modes))
    }

    pub fn with_mesh(
        modes: usize,
        beta1: f64,
        noise: NoiseLaw,
        nonlinearity: Nonlinearity,
        mesh: usize,
    ) -> Result<Self, ModelError> {
        if modes == 0 {
            return Err(ModelError::Config("mode count must be at least 1".into()));
        }
        if !(beta1 > 0.0 && beta1 <= 1.0) {
            return Err(ModelError::Config(format!("beta1 must lie in (0, 1], got {beta1}")));
        }
        if let NoiseLaw::Power { exponent } = noise {
            if !exponent.is_finite() {
                return Err(ModelError::Config(format!("noise exponent must be finite, got {exponent}")));
            }
        }
        if mesh <= modes {
            return Err(ModelError::Config(format!("mesh {mesh} must exceed the mode count {modes}")));
        }
        let c9 = match &nonlinearity {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear { slope } => *slope,
            Nonlinearity::Nemytskii(phi) => phi.lipschitz,
        };
        if c9 >= PI * PI {
            return Err(ModelError::Config(format!("one-sided constant {c9} must be below λ₁ = π² ≈ 9.8696")));
        }
        let table = if matches!(nonlinearity, Nonlinearity::Nemytskii(_)) {
            let mut t = Vec::with_capacity((mesh - 1) * modes);
            for i in 1..mesh {
                let x = i as f64 / mesh as f64;
                for j in 1..=modes {
                    t.push(2f64.sqrt() * (j as f64 * PI * x).sin());
                }
            }
            t
        } else {
            Vec::new()
        };
        Ok(Self { modes, beta1, noise, nonlinearity, c9, mesh, sine_table: Arc::new(table) })
    }

    pub fn mesh(&self) -> usize {
        self.mesh
    }

    /// `λ_j = j²π²` for `j = 1..=J`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        let j = j as f64;
        j * j * PI * PI
    }

    pub fn q_weight(&self, j: usize) -> f64 {
        self.noise.weight(j)
    }

    /// Stationary variance `q_j / (2 λ_j)` of mode `j` when `F = 0`.
    pub fn stationary_variance(&self, j: usize) -> f64 {
        self.q_weight(j) / (2.0 * self.eigenvalue(j))
    }

    /// `out = F(y)` in mode coordinates.
    pub fn apply_nonlinearity(&self, y: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        match &self.nonlinearity {
            Nonlinearity::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Nonlinearity::Linear { slope } => out.iter_mut().zip(y).for_each(|(o, v)| *o = slope * v),
            Nonlinearity::Nemytskii(_) => {
                let r = nemytskii_apply(self, y)?;
                out.copy_from_slice(&r);
            }
        }
        Ok(())
    }
}

/// Verdict of the trace condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceVerdict {
    Finite,
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceNorm {
    /// `Σ_{j≤J} λ_j^{β₁−1} q_j`.
    pub partial: f64,
    /// Integral-test bound on the remaining tail (infinite when divergent).
    pub tail: f64,
    pub verdict: TraceVerdict,
}

impl TraceNorm {
    pub fn value(&self) -> f64 {
        self.partial + self.tail
    }
}

/// Trace quantity `Σ_j λ_j^{β₁−1} q_j`: partial sum over the model's modes
/// plus an integral-test bound on the tail.
pub fn q_trace_norm(model: &SpectralSpdeModel) -> TraceNorm {
    let e = model.beta1 - 1.0;
    let partial: f64 = (1..=model.modes).map(|j| model.eigenvalue(j).powf(e) * model.q_weight(j)).sum();
    // λ_j^{β₁−1} q_j = π^{2e} j^{2e − s}; the terms decrease, so the tail
    // beyond J is bounded by the integral from J.
    let exponent = 2.0 * e - model.noise.decay();
    if exponent >= -1.0 {
        return TraceNorm { partial, tail: f64::INFINITY, verdict: TraceVerdict::Infinite };
    }
    let big_j = model.modes as f64;
    let tail = PI.powf(2.0 * e) * big_j.powf(exponent + 1.0) / (-exponent - 1.0);
    TraceNorm { partial, tail, verdict: TraceVerdict::Finite }
}

/// Applies a Nemytskii map in mode coordinates: synthesises `u(x)` on the
/// quadrature mesh, applies `φ` pointwise and projects back on the first `J`
/// sine modes with the trapezoid rule.
pub fn nemytskii_apply(model: &SpectralSpdeModel, coeffs: &[f64]) -> Result<Vec<f64>, ModelError> {
    let phi = match &model.nonlinearity {
        Nonlinearity::Nemytskii(phi) => phi,
        _ => return Err(ModelError::Config("nonlinearity is not a Nemytskii map".into())),
    };
    let j_max = model.modes;
    if coeffs.len() != j_max {
        return Err(ModelError::Dimension { expected: j_max, got: coeffs.len() });
    }
    let h = 1.0 / model.mesh as f64;
    let mut out = vec![0.0; j_max];
    for row in model.sine_table.chunks_exact(j_max) {
        let u: f64 = row.iter().zip(coeffs).map(|(s, c)| s * c).sum();
        let v = (phi.map)(u);
        if !v.is_finite() {
            return Err(ModelError::NonFinite(format!("φ({u}) = {v}")));
        }
        for (o, s) in out.iter_mut().zip(row) {
            *o += v * s;
        }
    }
    out.iter_mut().for_each(|o| *o *= h);
    Ok(out)
}

#[derive(Clone)]
pub enum TestFunctionKind {
    /// `f(u) = u_0` (the identity on scalar states).
    Identity,
    /// `f(u) = u_i`.
    Coordinate(usize),
    /// `f(u) = tanh(⟨w, u⟩)`.
    Tanh(Vec<f64>),
    /// `f(u) = min(‖u‖², cap)`.
    CappedSquaredNorm(f64),
    Custom(StateFunctional),
}

impl fmt::Debug for TestFunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("Identity"),
            Self::Coordinate(i) => f.debug_tuple("Coordinate").field(i).finish(),
            Self::Tanh(w) => f.debug_tuple("Tanh").field(w).finish(),
            Self::CappedSquaredNorm(c) => f.debug_tuple("CappedSquaredNorm").field(c).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Observable `f ∈ C_{p,γ}` with optional known mean and LIL constant.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub kind: TestFunctionKind,
    pub p: f64,
    pub gamma: f64,
    pub exact_mean: Option<f64>,
    pub exact_v: Option<f64>,
}

impl TestFunction {
    pub fn new(kind: TestFunctionKind, p: f64, gamma: f64) -> Result<Self, ModelError> {
        check_class(p, gamma)?;
        Ok(Self { kind, p, gamma, exact_mean: None, exact_v: None })
    }

    /// Identity, class `(2, 1)`.
    pub fn identity() -> Self {
        Self { kind: TestFunctionKind::Identity, p: 2.0, gamma: 1.0, exact_mean: None, exact_v: None }
    }

    /// Coordinate projection, class `(2, 1)`.
    pub fn coordinate(i: usize) -> Self {
        Self { kind: TestFunctionKind::Coordinate(i), p: 2.0, gamma: 1.0, exact_mean: None, exact_v: None }
    }

    /// `tanh(⟨w, u⟩)`, class `(1, 1)`.
    pub fn tanh(w: Vec<f64>) -> Self {
        Self { kind: TestFunctionKind::Tanh(w), p: 1.0, gamma: 1.0, exact_mean: None, exact_v: None }
    }

    /// `min(‖u‖², cap)`, class `(1, 1)`.
    pub fn capped_squared_norm(cap: f64) -> Self {
        Self { kind: TestFunctionKind::CappedSquaredNorm(cap), p: 1.0, gamma: 1.0, exact_mean: None, exact_v: None }
    }

    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, p: f64, gamma: f64) -> Result<Self, ModelError> {
        Self::new(TestFunctionKind::Custom(Arc::new(f)), p, gamma)
    }

    pub fn with_exact_mean(mut self, mu: f64) -> Self {
        self.exact_mean = Some(mu);
        self
    }

    pub fn with_exact_v(mut self, v: f64) -> Self {
        self.exact_v = Some(v);
        self
    }

    /// Same function, audited against another class `(p, γ)`.
    pub fn with_class(mut self, p: f64, gamma: f64) -> Result<Self, ModelError> {
        check_class(p, gamma)?;
        self.p = p;
        self.gamma = gamma;
        Ok(self)
    }

    #[inline]
    pub fn eval(&self, u: &[f64]) -> f64 {
        match &self.kind {
            TestFunctionKind::Identity => u[0],
            TestFunctionKind::Coordinate(i) => u[*i],
            TestFunctionKind::Tanh(w) => w.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().tanh(),
            TestFunctionKind::CappedSquaredNorm(cap) => u.iter().map(|v| v * v).sum::<f64>().min(*cap),
            TestFunctionKind::Custom(f) => f(u),
        }
    }

    /// `μ(f)` if known, else 0.
    pub fn mean_or_zero(&self) -> f64 {
        self.exact_mean.unwrap_or(0.0)
    }
}

fn check_class(p: f64, gamma: f64) -> Result<(), ModelError> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(ModelError::Config(format!("p must be at least 1, got {p}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(ModelError::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `d_{p,γ}(u1, u2) = (1 ∧ ‖u1 − u2‖^γ)(1 + ‖u1‖^p + ‖u2‖^p)^{1/2}`.
pub fn quasi_metric(u1: &[f64], u2: &[f64], p: f64, gamma: f64) -> Result<f64, ModelError> {
    if u1.len() != u2.len() {
        return Err(ModelError::Dimension { expected: u1.len(), got: u2.len() });
    }
    check_class(p, gamma)?;
    let diff = u1.iter().zip(u2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let weight = (1.0 + (norm(u1).powf(p) + norm(u2).powf(p))).sqrt();
    Ok(diff.powf(gamma).min(1.0) * weight)
}

/// Lower bound on `‖f‖_{p,γ}` from sampled points.
///
/// Draws `n_pairs + 1` states and adds the largest growth ratio
/// `|f(u)| / (1 + ‖u‖^{p/2})` to the largest Hölder ratio
/// `|f(u_i) − f(u_{i+1})| / d_{p,γ}(u_i, u_{i+1})` over consecutive draws.
pub fn holder_norm_estimate(
    f: &TestFunction,
    mut sampler: impl FnMut() -> Vec<f64>,
    n_pairs: usize,
) -> Result<f64, ModelError> {
    if n_pairs == 0 {
        return Err(ModelError::Config("n_pairs must be at least 1".into()));
    }
    let mut draw = || {
        let u = sampler();
        if u.iter().all(|v| v.is_finite()) {
            Ok(u)
        } else {
            Err(ModelError::NonFinite(format!("sampler produced {u:?}")))
        }
    };
    let growth = |u: &[f64], fu: f64| fu.abs() / (1.0 + norm(u).powf(f.p / 2.0));
    let mut prev = draw()?;
    let mut f_prev = f.eval(&prev);
    let mut best_point = growth(&prev, f_prev);
    let mut best_pair: f64 = 0.0;
    for _ in 0..n_pairs {
        let u = draw()?;
        let fu = f.eval(&u);
        best_point = best_point.max(growth(&u, fu));
        let d = quasi_metric(&prev, &u, f.p, f.gamma)?;
        if d > 0.0 {
            best_pair = best_pair.max((fu - f_prev).abs() / d);
        }
        prev = u;
        f_prev = fu;
    }
    Ok(best_point + best_pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn quasi_metric_examples() {
        assert_eq!(quasi_metric(&[0.3, -1.0], &[0.3, -1.0], 2.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(quasi_metric(&[0.0], &[1.0], 2.0, 1.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(quasi_metric(&[0.0], &[4.0], 2.0, 0.5).unwrap(), 17f64.sqrt(), epsilon = 1e-14);
        assert!(matches!(quasi_metric(&[0.0], &[1.0, 2.0], 2.0, 1.0), Err(ModelError::Dimension { .. })));
    }

    #[test]
    fn derived_constants() {
        let ou = SodeModel::ornstein_uhlenbeck(1.0, 1.0).unwrap();
        assert_eq!(ou.c5(), 2.0);
        assert_relative_eq!(ou.c8(1.0), 2.0 / 3.0);
        assert_eq!(ou.c7(), 2.0);
        assert!(SodeModel::ornstein_uhlenbeck(0.0, 1.0).is_err());
        assert!(SodeModel::ornstein_uhlenbeck(7.0, 1.0).is_err()); // c5 = 14 > 13
        let bad = SodeConstants { c1: 1.0, c2: 1.0, c3: 7.0, c4: 1.0, qbar: 1.0, c6: 1.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn holder_estimates() {
        let mut rng_state = 0u64;
        let mut sampler = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vec![((rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 8.0]
        };
        let zero = TestFunction::custom(|_| 0.0, 2.0, 1.0).unwrap();
        assert_eq!(holder_norm_estimate(&zero, &mut sampler, 100).unwrap(), 0.0);
        let one = TestFunction::custom(|_| 1.0, 2.0, 1.0).unwrap();
        let est = holder_norm_estimate(&one, || vec![0.0], 5).unwrap();
        assert_eq!(est, 1.0);
        let id = holder_norm_estimate(&TestFunction::identity(), &mut sampler, 2000).unwrap();
        assert!((1.0..=1.0 + 2f64.sqrt()).contains(&id), "{id}");
        assert!(holder_norm_estimate(&TestFunction::identity(), || vec![f64::NAN], 3).is_err());
    }

    #[test]
    fn trace_norm_examples() {
        let basel = SpectralSpdeModel::new(20_000, 1.0, NoiseLaw::Power { exponent: 2.0 }, Nonlinearity::Zero).unwrap();
        let tr = q_trace_norm(&basel);
        assert_eq!(tr.verdict, TraceVerdict::Finite);
        assert_relative_eq!(tr.value(), PI * PI / 6.0, epsilon = 1e-7);
        let white = SpectralSpdeModel::new(8, 0.25, NoiseLaw::White, Nonlinearity::Zero).unwrap();
        assert_eq!(q_trace_norm(&white).verdict, TraceVerdict::Finite);
        let rough = SpectralSpdeModel::new(8, 0.75, NoiseLaw::White, Nonlinearity::Zero).unwrap();
        assert_eq!(q_trace_norm(&rough).verdict, TraceVerdict::Infinite);
    }

    fn nem(modes: usize, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> SpectralSpdeModel {
        let phi = PointwiseMap::new("test", f, 0.0);
        SpectralSpdeModel::new(modes, 1.0, NoiseLaw::White, Nonlinearity::Nemytskii(phi)).unwrap()
    }

    #[test]
    fn nemytskii_examples() {
        let coeffs: Vec<f64> = (0..16).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let doubled = nemytskii_apply(&nem(16, |v| 2.0 * v), &coeffs).unwrap();
        for (d, c) in doubled.iter().zip(&coeffs) {
            assert!((d - 2.0 * c).abs() < 1e-12);
        }
        assert!(nemytskii_apply(&nem(16, |_| 0.0), &coeffs).unwrap().iter().all(|&v| v == 0.0));
        let mut e1 = vec![0.0; 4];
        e1[0] = 1.0;
        let sq = nemytskii_apply(&nem(4, |v| v * v), &e1).unwrap();
        assert_relative_eq!(sq[0], 8.0 * 2f64.sqrt() / (3.0 * PI), epsilon = 1e-5);
        assert!(nemytskii_apply(&nem(4, |v| v), &[1.0]).is_err());
        assert!(nemytskii_apply(&nem(4, |_| f64::NAN), &e1).is_err());
    }

    #[test]
    fn rejects_bad_spde() {
        assert!(SpectralSpdeModel::new(0, 1.0, NoiseLaw::White, Nonlinearity::Zero).is_err());
        assert!(SpectralSpdeModel::new(4, 0.0, NoiseLaw::White, Nonlinearity::Zero).is_err());
        assert!(SpectralSpdeModel::new(4, 1.0, NoiseLaw::White, Nonlinearity::Linear { slope: 10.0 }).is_err());
    }

    proptest! {
        #[test]
        fn quasi_metric_symmetric(a in prop::collection::vec(-5.0f64..5.0, 3), b in prop::collection::vec(-5.0f64..5.0, 3),
                                  p in 1.0f64..4.0, g in 0.01f64..1.0) {
            let d1 = quasi_metric(&a, &b, p, g).unwrap();
            let d2 = quasi_metric(&b, &a, p, g).unwrap();
            prop_assert_eq!(d1, d2);
            prop_assert_eq!(d1 == 0.0, a == b);
        }

        #[test]
        fn nemytskii_linear_map_is_linear(x in prop::collection::vec(-3.0f64..3.0, 32), y in prop::collection::vec(-3.0f64..3.0, 32),
                                          s in -4.0f64..4.0) {
            let phi = PointwiseMap::new("lin", |v| 1.5 * v, 1.5);
            let model = SpectralSpdeModel::with_mesh(32, 1.0, NoiseLaw::White, Nonlinearity::Nemytskii(phi), 1 << 12).unwrap();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
            let fx = nemytskii_apply(&model, &x).unwrap();
            let fy = nemytskii_apply(&model, &y).unwrap();
            let fxy = nemytskii_apply(&model, &xy).unwrap();
            for j in 0..32 {
                prop_assert!((fxy[j] - fx[j] - s * fy[j]).abs() < 1e-10);
            }
        }

        #[test]
        fn trace_partial_sums_nondecreasing(s in 0.0f64..3.0, beta in 0.05f64..1.0, j in 1usize..200) {
            let a = SpectralSpdeModel::new(j, beta, NoiseLaw::Power { exponent: s }, Nonlinearity::Zero).unwrap();
            let b = SpectralSpdeModel::new(j + 1, beta, NoiseLaw::Power { exponent: s }, Nonlinearity::Zero).unwrap();
            prop_assert!(q_trace_norm(&b).partial >= q_trace_norm(&a).partial);
        }

        // Raising p by itself can push the growth ratio up for states inside
        // the unit ball; the inclusion C_{p1,γ} ⊂ C_{p2,γ} holds with
        // ‖f‖_{p2,γ} ≤ 2‖f‖_{p1,γ}, and with no factor once every sample has
        // norm at least one.
        #[test]
        fn holder_estimate_nesting(seed in 0u64..1000, p1 in 1.0f64..3.0, dp in 0.0f64..3.0) {
            let mk = |lo: f64| {
                let mut st = seed;
                move || {
                    st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let r = (st >> 11) as f64 / (1u64 << 53) as f64;
                    vec![if r < 0.5 { -lo - 6.0 * r } else { lo + 6.0 * (r - 0.5) }]
                }
            };
            let f = TestFunction::custom(|u| (2.0 * u[0]).sin() + u[0], 1.0, 1.0).unwrap();
            let f1 = f.clone().with_class(p1, 0.7).unwrap();
            let f2 = f.with_class(p1 + dp, 0.7).unwrap();
            let e1 = holder_norm_estimate(&f1, mk(0.0), 200).unwrap();
            let e2 = holder_norm_estimate(&f2, mk(0.0), 200).unwrap();
            prop_assert!(e2 <= 2.0 * e1 + 1e-12);
            let e1 = holder_norm_estimate(&f1, mk(1.0), 200).unwrap();
            let e2 = holder_norm_estimate(&f2, mk(1.0), 200).unwrap();
            prop_assert!(e2 <= e1 + 1e-12);
        }
    }
}
