//! Command-line front end: INI configuration, validation and the
//! `simulate`, `estimate-v`, `verify`, `decompose` and `lil-curve` pipelines.
//!
//! A configuration is a list of `key = value` lines grouped in `[section]`s;
//! `#` starts a comment. Keys may also be written fully dotted
//! (`model.kind = ou`) outside any section.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::assume::{
    check_exponent_constraints, check_step_conditions, largest_feasible_gamma, geometric_checkpoints, ConditionReport,
    ConstraintContext, DecayLaw, ExponentParams, StepConditionInputs, Verdict,
};
use crate::grid::{build_grid_blocked, quasi_uniform_index, StepKind, StepSpec, TimeGrid};
use crate::integrate::{simulate_path, NoiseSource, Observer, SchemeKind, SchemeSpec, StepView};
use crate::lilstat::{v_ensemble, v_exact_linear, BlockSums, VEstimate};
use crate::martingale::{strassen_functional, LedgerMode, MartingaleLedger};
use crate::mc::output::{csv_num, estimate_json, json_string, lil_curve_csv, num_opt, summary_json, write_atomic, Num};
use crate::mc::{run_ensemble, workers_from_env, EnsembleSpec, EnsembleSummary, OUT_DIR_ENV};
use crate::model::{Model, NoiseLaw, Nonlinearity, PointwiseMap, SodeModel, SpectralSpdeModel, TestFunction};

/// One problem found in a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(key) = &self.key {
            write!(f, "{key}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Every violation found while parsing, not just the first.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem{}):", self.diagnostics.len(), if self.diagnostics.len() == 1 { "" } else { "s" })?;
        for d in &self.diagnostics {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "grid.kind",
    "grid.theta",
    "grid.scale",
    "grid.cap",
    "grid.n_steps",
    "grid.block",
    "model.kind",
    "model.a",
    "model.sigma",
    "model.drift",
    "model.c1",
    "model.c2",
    "model.c3",
    "model.c4",
    "model.c6",
    "model.c9",
    "model.qbar",
    "spde.modes",
    "spde.beta1",
    "spde.q_law",
    "spde.F",
    "spde.mesh",
    "scheme.kind",
    "scheme.newton_tol",
    "scheme.newton_max_iter",
    "f.kind",
    "f.index",
    "f.weights",
    "f.cap",
    "f.p",
    "f.gamma",
    "f.mu_exact",
    "f.v_exact",
    "stats.block_length",
    "stats.self_center",
    "stats.window_start",
    "stats.k_max",
    "mc.paths",
    "mc.first_path",
    "mc.x0",
    "output.lil_first",
    "output.lil_ratio",
    "output.state_checkpoints",
    "output.decompose_rows",
    "martingale.mode",
    "martingale.inner_paths",
    "martingale.eval_up_to",
    "martingale.step_budget",
    "martingale.n_blocks",
    "verify.context",
    "verify.r",
    "verify.r_tilde",
    "verify.q",
    "verify.q_tilde",
    "verify.beta",
    "verify.kappa",
    "verify.gamma1",
    "verify.l",
    "verify.l_tilde",
    "verify.alpha",
    "verify.rho_rate",
    "verify.rho_tau_rate",
    "verify.horizon",
];

fn suggestion(key: &str) -> Option<&'static str> {
    KNOWN_KEYS
        .iter()
        .map(|k| (strsim::levenshtein(key, k), *k))
        .filter(|(d, _)| *d <= 3)
        .min()
        .map(|(_, k)| k)
}

/// `key → (value, line)` after the syntax pass.
fn parse_lines(text: &str, diags: &mut Vec<Diagnostic>) -> BTreeMap<String, (String, usize)> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) if !name.trim().is_empty() && !name.contains(['[', ']', '=']) => section = name.trim().to_string(),
                _ => diags.push(Diagnostic { line: Some(line_no), key: None, message: format!("malformed section header `{line}`") }),
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            diags.push(Diagnostic { line: Some(line_no), key: None, message: format!("expected `key = value`, found `{line}`") });
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            diags.push(Diagnostic { line: Some(line_no), key: None, message: format!("invalid key `{k}`") });
            continue;
        }
        let full = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if !KNOWN_KEYS.contains(&full.as_str()) {
            let hint = suggestion(&full).map(|s| format!("; did you mean `{s}`?")).unwrap_or_default();
            diags.push(Diagnostic { line: Some(line_no), key: Some(full), message: format!("unknown key{hint}") });
            continue;
        }
        if let Some((_, first)) = out.get(&full) {
            diags.push(Diagnostic { line: Some(line_no), key: Some(full), message: format!("duplicate key, first set on line {first}") });
            continue;
        }
        out.insert(full, (v.to_string(), line_no));
    }
    out
}

struct Reader<'a> {
    raw: &'a BTreeMap<String, (String, usize)>,
    diags: &'a mut Vec<Diagnostic>,
}

impl Reader<'_> {
    fn err(&mut self, key: &str, message: String) {
        let line = self.raw.get(key).map(|(_, l)| *l);
        self.diags.push(Diagnostic { line, key: Some(key.to_string()), message });
    }

    fn has(&self, key: &str) -> bool {
        self.raw.contains_key(key)
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(|(v, _)| v.as_str())
    }

    fn missing(&mut self, key: &str) {
        self.diags.push(Diagnostic { line: None, key: Some(key.to_string()), message: "required key is missing".into() });
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let v = self.text(key)?.to_string();
        match v.parse::<T>() {
            Ok(x) => Some(x),
            Err(_) => {
                self.err(key, format!("expected {what}, found `{v}`"));
                None
            }
        }
    }

    fn f64_opt(&mut self, key: &str) -> Option<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if x.is_finite() {
            Some(x)
        } else {
            self.err(key, format!("must be finite, found {x}"));
            None
        }
    }

    /// Optional number checked against a range description.
    fn f64_in(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        match self.f64_opt(key) {
            Some(x) if ok(x) => x,
            Some(x) => {
                self.err(key, format!("{x} is outside the allowed range {range}"));
                default
            }
            None => default,
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> u64 {
        self.parse(key, "a nonnegative integer").unwrap_or(default)
    }

    fn bool_or(&mut self, key: &str, default: bool) -> bool {
        match self.text(key) {
            None => default,
            Some("true" | "yes" | "1") => true,
            Some("false" | "no" | "0") => false,
            Some(v) => {
                let v = v.to_string();
                self.err(key, format!("expected true or false, found `{v}`"));
                default
            }
        }
    }

    fn list_f64(&mut self, key: &str) -> Option<Vec<f64>> {
        let v = self.text(key)?.to_string();
        let parsed: Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(xs) if xs.iter().all(|x| x.is_finite()) && !xs.is_empty() => Some(xs),
            _ => {
                self.err(key, format!("expected a comma-separated list of finite numbers, found `{v}`"));
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ou,
    Sode,
    Spde,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Ou => "ou",
            ModelKind::Sode => "sode",
            ModelKind::Spde => "spde",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub spec: StepSpec,
    pub n_steps: u64,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub a: f64,
    pub sigma: f64,
    pub drift: String,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub c6: Option<f64>,
    pub qbar: Option<f64>,
    pub c9: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearitySpec {
    Zero,
    Linear(f64),
    Nemytskii(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdeConfig {
    pub modes: usize,
    pub beta1: f64,
    pub q_law: NoiseLaw,
    pub nonlinearity: NonlinearitySpec,
    pub mesh: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FKind {
    Identity,
    Coordinate,
    Tanh,
    CappedSquaredNorm,
}

impl FKind {
    fn name(&self) -> &'static str {
        match self {
            FKind::Identity => "identity",
            FKind::Coordinate => "coordinate",
            FKind::Tanh => "tanh",
            FKind::CappedSquaredNorm => "capped_squared_norm",
        }
    }

    fn default_class(&self) -> (f64, f64) {
        match self {
            FKind::Identity | FKind::Coordinate => (2.0, 1.0),
            FKind::Tanh | FKind::CappedSquaredNorm => (1.0, 1.0),
        }
    }

    /// Odd functions, whose mean vanishes under every built-in (symmetric) model.
    fn is_odd(&self) -> bool {
        !matches!(self, FKind::CappedSquaredNorm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FConfig {
    pub kind: FKind,
    pub index: usize,
    pub weights: Vec<f64>,
    pub cap: f64,
    pub p: f64,
    pub gamma: f64,
    pub mu_exact: Option<f64>,
    pub v_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsConfig {
    pub block_length: Option<f64>,
    pub self_center: bool,
    pub window_start: f64,
    pub k_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub paths: u64,
    pub first_path: u64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub lil_first: f64,
    pub lil_ratio: f64,
    pub state_checkpoints: usize,
    pub decompose_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerChoice {
    Auto,
    ClosedForm,
    Nested,
}

impl LedgerChoice {
    fn name(&self) -> &'static str {
        match self {
            LedgerChoice::Auto => "auto",
            LedgerChoice::ClosedForm => "closed_form",
            LedgerChoice::Nested => "nested",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleConfig {
    pub mode: LedgerChoice,
    pub inner_paths: usize,
    pub eval_up_to: u64,
    /// Refuse nested runs needing more inner steps than this.
    pub step_budget: u64,
    pub n_blocks: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub context: ConstraintContext,
    pub exponents: ExponentParams,
    pub rho_rate: f64,
    pub rho_tau_rate: f64,
    pub horizon: u64,
}

/// A fully validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub spde: SpdeConfig,
    pub scheme: SchemeSpec,
    pub f: FConfig,
    pub stats: StatsConfig,
    pub mc: McConfig,
    pub output: OutputConfig,
    pub martingale: MartingaleConfig,
    pub verify: VerifyConfig,
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut diags = Vec::new();
    let raw = parse_lines(text, &mut diags);
    let mut r = Reader { raw: &raw, diags: &mut diags };
    for key in ["seed", "model.kind", "grid.kind", "grid.n_steps"] {
        if !r.has(key) {
            r.missing(key);
        }
    }
    let seed = r.u64_or("seed", 0);

    // grid
    let n_steps = r.u64_or("grid.n_steps", 1);
    if r.has("grid.n_steps") && n_steps == 0 {
        r.err("grid.n_steps", "must be at least 1".into());
    }
    let theta = r.f64_in("grid.theta", 1.0, |t| t > 0.0 && t <= 1.0, "(0, 1]");
    let kind = match r.text("grid.kind") {
        None | Some("harmonic") => StepKind::Harmonic,
        Some("power") => {
            if !r.has("grid.theta") {
                r.err("grid.kind", "power steps need grid.theta".into());
            }
            StepKind::Power { theta }
        }
        Some("constant") => StepKind::Constant,
        Some(other) => {
            let other = other.to_string();
            r.err("grid.kind", format!("expected harmonic, power or constant, found `{other}`"));
            StepKind::Harmonic
        }
    };
    let scale = r.f64_in("grid.scale", if kind == StepKind::Constant { 0.01 } else { 1.0 }, |s| s > 0.0, "(0, ∞)");
    let cap = r.f64_in("grid.cap", if kind == StepKind::Constant { scale } else { 1.0 }, |s| s > 0.0, "(0, ∞)");
    let block = r.u64_or("grid.block", 1 << 20).max(1) as usize;
    let grid = GridConfig { spec: StepSpec { kind, scale, cap }, n_steps, block };

    // model
    let model_kind = match r.text("model.kind") {
        None | Some("ou") => ModelKind::Ou,
        Some("sode") => ModelKind::Sode,
        Some("spde") => ModelKind::Spde,
        Some(other) => {
            let other = other.to_string();
            r.err("model.kind", format!("expected ou, sode or spde, found `{other}`"));
            ModelKind::Ou
        }
    };
    let a = r.f64_in("model.a", 1.0, |a| a > 0.0, "(0, ∞)");
    let sigma = r.f64_in("model.sigma", 1.0, |s| s >= 0.0, "[0, ∞)");
    let drift = r.text("model.drift").unwrap_or("cubic").to_string();
    if drift != "cubic" {
        r.err("model.drift", format!("expected cubic, found `{drift}`"));
    }
    let nonneg = |r: &mut Reader, k: &str| {
        let v = r.f64_opt(k);
        if let Some(x) = v {
            if x < 0.0 {
                r.err(k, format!("{x} is outside the allowed range [0, ∞)"));
            }
        }
        v
    };
    let model = ModelConfig {
        kind: model_kind,
        a,
        sigma,
        drift,
        c1: nonneg(&mut r, "model.c1"),
        c2: nonneg(&mut r, "model.c2"),
        c3: nonneg(&mut r, "model.c3"),
        c4: nonneg(&mut r, "model.c4"),
        c6: nonneg(&mut r, "model.c6"),
        qbar: nonneg(&mut r, "model.qbar"),
        c9: r.f64_opt("model.c9"),
    };

    // spde
    let modes = r.u64_or("spde.modes", 64) as usize;
    if modes == 0 {
        r.err("spde.modes", "must be at least 1".into());
    }
    let beta1 = r.f64_in("spde.beta1", 1.0, |b| b > 0.0 && b <= 1.0, "(0, 1]");
    let q_law = match r.text("spde.q_law").unwrap_or("power:2").to_string() {
        s if s == "white" => NoiseLaw::White,
        s => match s.strip_prefix("power:").map(|e| e.trim().parse::<f64>()) {
            Some(Ok(e)) if e.is_finite() => NoiseLaw::Power { exponent: e },
            _ => {
                r.err("spde.q_law", format!("expected `white` or `power:<exponent>`, found `{s}`"));
                NoiseLaw::Power { exponent: 2.0 }
            }
        },
    };
    let nonlinearity = match r.text("spde.F").unwrap_or("zero").to_string() {
        s if s == "zero" => NonlinearitySpec::Zero,
        s if s.starts_with("linear:") => match s["linear:".len()..].trim().parse::<f64>() {
            Ok(v) if v.is_finite() => NonlinearitySpec::Linear(v),
            _ => {
                r.err("spde.F", format!("expected `linear:<slope>`, found `{s}`"));
                NonlinearitySpec::Zero
            }
        },
        s if s.starts_with("nemytskii:") => {
            let name = s["nemytskii:".len()..].trim().to_string();
            if PointwiseMap::by_name(&name).is_none() {
                r.err("spde.F", format!("unknown pointwise map `{name}`; built-ins are sin and tanh"));
            }
            NonlinearitySpec::Nemytskii(name)
        }
        s => {
            r.err("spde.F", format!("expected zero, linear:<slope> or nemytskii:<name>, found `{s}`"));
            NonlinearitySpec::Zero
        }
    };
    let mesh = r.parse::<usize>("spde.mesh", "a positive integer");
    let spde = SpdeConfig { modes, beta1, q_law, nonlinearity, mesh };

    // scheme
    let default_scheme = if model_kind == ModelKind::Spde { SchemeKind::ExpEuler } else { SchemeKind::Bem };
    let scheme_kind = match r.text("scheme.kind") {
        None => default_scheme,
        Some(s) => match SchemeKind::parse(s) {
            Some(k) => k,
            None => {
                let s = s.to_string();
                r.err("scheme.kind", format!("expected bem, exp_euler, exact_ou or em_baseline, found `{s}`"));
                default_scheme
            }
        },
    };
    let newton_tol = r.f64_in("scheme.newton_tol", 1e-12, |t| t > 0.0, "(0, ∞)");
    let newton_max_iter = r.u64_or("scheme.newton_max_iter", 50) as usize;
    if newton_max_iter == 0 {
        r.err("scheme.newton_max_iter", "must be at least 1".into());
    }
    let scheme = SchemeSpec { kind: scheme_kind, newton_tol, newton_max_iter };
    let pairing_ok = match (model_kind, scheme_kind) {
        (ModelKind::Spde, SchemeKind::ExpEuler) => true,
        (ModelKind::Spde, _) | (_, SchemeKind::ExpEuler) => false,
        (ModelKind::Sode, SchemeKind::ExactOu) => false,
        _ => true,
    };
    if !pairing_ok {
        r.err("scheme.kind", format!("scheme {} cannot integrate model {}", scheme_kind.name(), model_kind.name()));
    }

    // f
    let f_kind = match r.text("f.kind").unwrap_or("identity") {
        "identity" => FKind::Identity,
        "coordinate" => FKind::Coordinate,
        "tanh" => FKind::Tanh,
        "capped_squared_norm" => FKind::CappedSquaredNorm,
        other => {
            let other = other.to_string();
            r.err("f.kind", format!("expected identity, coordinate, tanh or capped_squared_norm, found `{other}`"));
            FKind::Identity
        }
    };
    let state_dim = if model_kind == ModelKind::Spde { modes.max(1) } else { 1 };
    let index = r.u64_or("f.index", 0) as usize;
    if index >= state_dim {
        r.err("f.index", format!("{index} is outside the allowed range [0, {}]", state_dim - 1));
    }
    let weights = r.list_f64("f.weights").unwrap_or_else(|| {
        let mut w = vec![0.0; state_dim];
        w[0] = 1.0;
        w
    });
    if weights.len() != state_dim {
        r.err("f.weights", format!("needs {state_dim} entries, found {}", weights.len()));
    }
    let f_cap = r.f64_in("f.cap", 1.0, |c| c > 0.0, "(0, ∞)");
    let (p0, g0) = f_kind.default_class();
    let p = r.f64_in("f.p", p0, |p| p >= 1.0, "[1, ∞)");
    let gamma = r.f64_in("f.gamma", g0, |g| g > 0.0 && g <= 1.0, "(0, 1]");
    let mu_exact = r.f64_opt("f.mu_exact");
    let v_exact = r.f64_in("f.v_exact", 0.0, |v| v > 0.0, "(0, ∞)");
    let v_exact = r.has("f.v_exact").then_some(v_exact);
    let f = FConfig { kind: f_kind, index, weights, cap: f_cap, p, gamma, mu_exact, v_exact };

    // stats
    let block_length = r.has("stats.block_length").then(|| r.f64_in("stats.block_length", 1.0, |l| l > 0.0, "(0, ∞)"));
    let self_center = r.bool_or("stats.self_center", false);
    let window_start = r.f64_in("stats.window_start", 0.0, |w| w >= 0.0, "[0, ∞)");
    let k_max = r.parse::<u64>("stats.k_max", "a nonnegative integer");
    if mu_exact.is_none() && !f_kind.is_odd() && !self_center {
        r.err("f.mu_exact", format!("f.kind = {} has no known mean: set f.mu_exact or stats.self_center = true", f_kind.name()));
    }
    let stats = StatsConfig { block_length, self_center, window_start, k_max };

    // mc
    let paths = r.u64_or("mc.paths", 1);
    if paths == 0 {
        r.err("mc.paths", "must be at least 1".into());
    }
    let first_path = r.u64_or("mc.first_path", 0);
    let x0 = r.list_f64("mc.x0").unwrap_or_else(|| vec![0.0; state_dim]);
    if x0.len() != state_dim {
        r.err("mc.x0", format!("needs {state_dim} entries, found {}", x0.len()));
    }
    let mc = McConfig { paths, first_path, x0 };

    // output
    let lil_first = r.f64_in("output.lil_first", 1.0, |x| x > 0.0, "(0, ∞)");
    let lil_ratio = r.f64_in("output.lil_ratio", 1.2, |x| x > 1.0, "(1, ∞)");
    let state_checkpoints = r.u64_or("output.state_checkpoints", 0) as usize;
    let decompose_rows = r.u64_or("output.decompose_rows", 200) as usize;
    let output = OutputConfig { lil_first, lil_ratio, state_checkpoints, decompose_rows };

    // martingale
    let mode = match r.text("martingale.mode").unwrap_or("auto") {
        "auto" => LedgerChoice::Auto,
        "closed_form" => LedgerChoice::ClosedForm,
        "nested" => LedgerChoice::Nested,
        other => {
            let other = other.to_string();
            r.err("martingale.mode", format!("expected auto, closed_form or nested, found `{other}`"));
            LedgerChoice::Auto
        }
    };
    let inner_paths = r.u64_or("martingale.inner_paths", 100) as usize;
    if inner_paths == 0 {
        r.err("martingale.inner_paths", "must be at least 1".into());
    }
    let eval_up_to = r.u64_or("martingale.eval_up_to", n_steps.saturating_sub(1).min(1000));
    if eval_up_to >= n_steps {
        r.err("martingale.eval_up_to", format!("{eval_up_to} is outside the allowed range [0, {}]", n_steps.saturating_sub(1)));
    }
    let step_budget = r.u64_or("martingale.step_budget", 200_000_000);
    let n_blocks = r.parse::<u64>("martingale.n_blocks", "a positive integer");
    if n_blocks == Some(0) {
        r.err("martingale.n_blocks", "must be at least 1".into());
    }
    let martingale = MartingaleConfig { mode, inner_paths, eval_up_to, step_budget, n_blocks };

    // verify
    let context_text = r.text("verify.context").unwrap_or("thm3_1").to_string();
    let context = ConstraintContext::parse(&context_text).unwrap_or_else(|| {
        r.err("verify.context", format!("expected prop2_2, thm3_1, prop4_3 or prop4_4, found `{context_text}`"));
        ConstraintContext::Thm3_1
    });
    let vr = r.f64_opt("verify.r").unwrap_or(100.0);
    let vq = r.f64_opt("verify.q").unwrap_or(100.0);
    let default_l = match model_kind {
        ModelKind::Sode => model.qbar.unwrap_or(3.0),
        _ => 1.0,
    };
    let exponents = ExponentParams {
        r: vr,
        r_tilde: r.f64_opt("verify.r_tilde").unwrap_or(1.0),
        q: vq,
        q_tilde: r.f64_opt("verify.q_tilde").unwrap_or(1.0),
        beta: r.f64_opt("verify.beta").unwrap_or(0.0),
        kappa: r.f64_opt("verify.kappa").unwrap_or(0.0),
        gamma1: r.f64_opt("verify.gamma1").unwrap_or(gamma.min(1.0)),
        gamma,
        l: r.f64_opt("verify.l").unwrap_or(default_l),
        l_tilde: r.f64_opt("verify.l_tilde").unwrap_or(0.5),
        alpha: r.f64_opt("verify.alpha").unwrap_or(1.0),
        p,
    };
    if let Err(e) = exponents.validate() {
        r.err("verify", e.to_string());
    }
    if context == ConstraintContext::Thm3_1 && p > vr.min(vq / 4.0) {
        r.err("f.p", format!("p = {p} must satisfy p ≤ r ∧ q/4 = {} for verify.context = thm3_1", vr.min(vq / 4.0)));
    }
    let (rho_default, rho_tau_default) = default_rates(&model, &spde, &grid.spec);
    let rho_rate = r.f64_in("verify.rho_rate", rho_default, |x| x > 0.0, "(0, ∞)");
    let rho_tau_rate = r.f64_in("verify.rho_tau_rate", rho_tau_default, |x| x > 0.0, "(0, ∞)");
    let horizon = r.u64_or("verify.horizon", n_steps.clamp(2, 1_000_000));
    if horizon < 2 {
        r.err("verify.horizon", "must be at least 2".into());
    }
    let verify = VerifyConfig { context, exponents, rho_rate, rho_tau_rate, horizon };

    let cfg = RunConfig { seed, grid, model, spde, scheme, f, stats, mc, output, martingale, verify };
    if diags.is_empty() {
        // Cross-field checks that need the built objects.
        if let Err(e) = cfg.build_model() {
            diags.push(Diagnostic { line: None, key: Some("model".into()), message: e });
        }
        if let Err(e) = cfg.grid.spec.validate() {
            diags.push(Diagnostic { line: None, key: Some("grid".into()), message: e.to_string() });
        }
        if let Some(k) = cfg.stats.k_max {
            if diags.is_empty() {
                match cfg.build_grid().map_err(|e| e.to_string()).and_then(|g| quasi_uniform_index(&g, k).map_err(|e| e.to_string())) {
                    Ok(_) => {}
                    Err(e) => diags.push(Diagnostic {
                        line: raw.get("stats.k_max").map(|(_, l)| *l),
                        key: Some("stats.k_max".into()),
                        message: format!("horizon unreachable: {e}"),
                    }),
                }
            }
        }
    }
    if diags.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { diagnostics: diags })
    }
}

/// Contraction rates of the exact process and of the scheme: `c5/2` and
/// `c8/2` for SODEs, `λ₁ − c9` for the heat equation.
fn default_rates(model: &ModelConfig, spde: &SpdeConfig, steps: &StepSpec) -> (f64, f64) {
    match model.kind {
        ModelKind::Spde => {
            let c9 = match &spde.nonlinearity {
                NonlinearitySpec::Zero => 0.0,
                NonlinearitySpec::Linear(s) => *s,
                NonlinearitySpec::Nemytskii(_) => 1.0,
            };
            let rate = (std::f64::consts::PI.powi(2) - model.c9.unwrap_or(c9)).max(1e-6);
            (rate, rate)
        }
        _ => {
            let c1 = model.c1.unwrap_or(0.0);
            let c3 = model.c3.unwrap_or(model.a);
            let c5 = (2.0 * c3 - 15.0 * c1 * c1).max(1e-6);
            let tau_bar = steps.tau_bar();
            (c5 / 2.0, c5 / (1.0 + c5 * tau_bar) / 2.0)
        }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

impl RunConfig {
    /// The configuration as INI text with every default written out.
    /// Parsing the result gives back an identical `RunConfig`.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let g = &self.grid;
        let _ = writeln!(s, "\n[grid]");
        let kind = match g.spec.kind {
            StepKind::Harmonic => "harmonic",
            StepKind::Power { .. } => "power",
            StepKind::Constant => "constant",
        };
        let _ = writeln!(s, "kind = {kind}");
        if let StepKind::Power { theta } = g.spec.kind {
            let _ = writeln!(s, "theta = {}", fmt_f(theta));
        }
        let _ = writeln!(s, "scale = {}\ncap = {}\nn_steps = {}\nblock = {}", fmt_f(g.spec.scale), fmt_f(g.spec.cap), g.n_steps, g.block);
        let m = &self.model;
        let _ = writeln!(s, "\n[model]\nkind = {}\na = {}\nsigma = {}\ndrift = {}", m.kind.name(), fmt_f(m.a), fmt_f(m.sigma), m.drift);
        for (k, v) in [("c1", m.c1), ("c2", m.c2), ("c3", m.c3), ("c4", m.c4), ("c6", m.c6), ("qbar", m.qbar), ("c9", m.c9)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {}", fmt_f(v));
            }
        }
        let sp = &self.spde;
        let q_law = match sp.q_law {
            NoiseLaw::White => "white".to_string(),
            NoiseLaw::Power { exponent } => format!("power:{}", fmt_f(exponent)),
        };
        let nl = match &sp.nonlinearity {
            NonlinearitySpec::Zero => "zero".to_string(),
            NonlinearitySpec::Linear(v) => format!("linear:{}", fmt_f(*v)),
            NonlinearitySpec::Nemytskii(n) => format!("nemytskii:{n}"),
        };
        let _ = writeln!(s, "\n[spde]\nmodes = {}\nbeta1 = {}\nq_law = {q_law}\nF = {nl}", sp.modes, fmt_f(sp.beta1));
        if let Some(mesh) = sp.mesh {
            let _ = writeln!(s, "mesh = {mesh}");
        }
        let sc = &self.scheme;
        let _ = writeln!(s, "\n[scheme]\nkind = {}\nnewton_tol = {}\nnewton_max_iter = {}", sc.kind.name(), fmt_f(sc.newton_tol), sc.newton_max_iter);
        let f = &self.f;
        let list = |v: &[f64]| v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            s,
            "\n[f]\nkind = {}\nindex = {}\nweights = {}\ncap = {}\np = {}\ngamma = {}",
            f.kind.name(),
            f.index,
            list(&f.weights),
            fmt_f(f.cap),
            fmt_f(f.p),
            fmt_f(f.gamma)
        );
        if let Some(mu) = f.mu_exact {
            let _ = writeln!(s, "mu_exact = {}", fmt_f(mu));
        }
        if let Some(v) = f.v_exact {
            let _ = writeln!(s, "v_exact = {}", fmt_f(v));
        }
        let st = &self.stats;
        let _ = writeln!(s, "\n[stats]\nself_center = {}\nwindow_start = {}", st.self_center, fmt_f(st.window_start));
        if let Some(l) = st.block_length {
            let _ = writeln!(s, "block_length = {}", fmt_f(l));
        }
        if let Some(k) = st.k_max {
            let _ = writeln!(s, "k_max = {k}");
        }
        let _ = writeln!(s, "\n[mc]\npaths = {}\nfirst_path = {}\nx0 = {}", self.mc.paths, self.mc.first_path, list(&self.mc.x0));
        let o = &self.output;
        let _ = writeln!(
            s,
            "\n[output]\nlil_first = {}\nlil_ratio = {}\nstate_checkpoints = {}\ndecompose_rows = {}",
            fmt_f(o.lil_first),
            fmt_f(o.lil_ratio),
            o.state_checkpoints,
            o.decompose_rows
        );
        let mg = &self.martingale;
        let _ = writeln!(
            s,
            "\n[martingale]\nmode = {}\ninner_paths = {}\neval_up_to = {}\nstep_budget = {}",
            mg.mode.name(),
            mg.inner_paths,
            mg.eval_up_to,
            mg.step_budget
        );
        if let Some(n) = mg.n_blocks {
            let _ = writeln!(s, "n_blocks = {n}");
        }
        let v = &self.verify;
        let e = &v.exponents;
        let _ = writeln!(
            s,
            "\n[verify]\ncontext = {}\nr = {}\nr_tilde = {}\nq = {}\nq_tilde = {}\nbeta = {}\nkappa = {}\ngamma1 = {}\nl = {}\nl_tilde = {}\nalpha = {}\nrho_rate = {}\nrho_tau_rate = {}\nhorizon = {}",
            v.context.name(),
            fmt_f(e.r),
            fmt_f(e.r_tilde),
            fmt_f(e.q),
            fmt_f(e.q_tilde),
            fmt_f(e.beta),
            fmt_f(e.kappa),
            fmt_f(e.gamma1),
            fmt_f(e.l),
            fmt_f(e.l_tilde),
            fmt_f(e.alpha),
            fmt_f(v.rho_rate),
            fmt_f(v.rho_tau_rate),
            v.horizon
        );
        s
    }

    pub fn build_model(&self) -> Result<Model, String> {
        let m = &self.model;
        match m.kind {
            ModelKind::Ou => SodeModel::ornstein_uhlenbeck(m.a, m.sigma).map(Model::Sode).map_err(|e| e.to_string()),
            ModelKind::Sode => {
                let mut sode = SodeModel::cubic(m.a, m.sigma).map_err(|e| e.to_string())?;
                let c = &mut sode.constants;
                for (slot, v) in [(&mut c.c1, m.c1), (&mut c.c2, m.c2), (&mut c.c3, m.c3), (&mut c.c4, m.c4), (&mut c.c6, m.c6), (&mut c.qbar, m.qbar)] {
                    if let Some(v) = v {
                        *slot = v;
                    }
                }
                sode.validate().map_err(|e| e.to_string())?;
                Ok(Model::Sode(sode))
            }
            ModelKind::Spde => {
                let sp = &self.spde;
                let nl = match &sp.nonlinearity {
                    NonlinearitySpec::Zero => Nonlinearity::Zero,
                    NonlinearitySpec::Linear(s) => Nonlinearity::Linear { slope: *s },
                    NonlinearitySpec::Nemytskii(name) => {
                        Nonlinearity::Nemytskii(PointwiseMap::by_name(name).ok_or_else(|| format!("unknown pointwise map `{name}`"))?)
                    }
                };
                let mesh = sp.mesh.unwrap_or_else(|| crate::model::default_mesh(sp.modes));
                let model = SpectralSpdeModel::with_mesh(sp.modes, sp.beta1, sp.q_law, nl, mesh).map_err(|e| e.to_string())?;
                if let Some(c9) = m.c9 {
                    if c9 < model.c9 {
                        return Err(format!("declared c9 = {c9} is below the one-sided constant {} of F", model.c9));
                    }
                    if c9 >= std::f64::consts::PI.powi(2) {
                        return Err(format!("declared c9 = {c9} must be below λ₁ = π²"));
                    }
                }
                Ok(Model::Spde(model))
            }
        }
    }

    pub fn build_grid(&self) -> Result<TimeGrid, crate::grid::GridError> {
        build_grid_blocked(self.grid.spec, self.grid.n_steps, self.grid.block)
    }

    pub fn build_f(&self) -> TestFunction {
        let f = &self.f;
        let base = match f.kind {
            FKind::Identity => TestFunction::identity(),
            FKind::Coordinate => TestFunction::coordinate(f.index),
            FKind::Tanh => TestFunction::tanh(f.weights.clone()),
            FKind::CappedSquaredNorm => TestFunction::capped_squared_norm(f.cap),
        };
        let mut t = TestFunction { kind: base.kind, p: f.p, gamma: f.gamma, exact_mean: Some(self.mu()), exact_v: None };
        if let Some(v) = self.exact_v() {
            t = t.with_exact_v(v);
        }
        t
    }

    /// `μ(f)`: declared, or zero for odd `f` under the symmetric built-in models.
    pub fn mu(&self) -> f64 {
        self.f.mu_exact.unwrap_or(0.0)
    }

    /// Whether the closed-form martingale ledger applies.
    pub fn closed_form_applies(&self) -> bool {
        self.model.kind == ModelKind::Ou
            && (self.f.kind == FKind::Identity || (self.f.kind == FKind::Coordinate && self.f.index == 0))
            && self.mu() == 0.0
    }

    /// Known LIL constant: `σ/a` for the identity on the linear model, else declared.
    pub fn exact_v(&self) -> Option<f64> {
        if self.closed_form_applies() {
            Some(self.model.sigma / self.model.a)
        } else {
            self.f.v_exact
        }
    }

    fn ensemble_spec(&self, model: Model, grid: TimeGrid, description: &str) -> EnsembleSpec {
        let mut spec = EnsembleSpec::new(model, self.scheme, grid, self.mc.x0.clone(), self.build_f(), self.seed, self.mc.paths);
        spec.mu = self.mu();
        spec.self_center = self.stats.self_center;
        spec.first_path = self.mc.first_path;
        spec.lil_first = self.output.lil_first;
        spec.lil_ratio = self.output.lil_ratio;
        spec.window_start = self.stats.window_start;
        spec.description = description.to_string();
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate paths and record the LIL statistic and states.
    Simulate,
    /// Estimate the fluctuation constant v.
    EstimateV,
    /// Check exponent inequalities and step-size conditions.
    Verify,
    /// Martingale decomposition of one path.
    Decompose,
    /// Checkpointed LIL statistic with running extrema.
    LilCurve,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::EstimateV => "estimate-v",
            Command::Verify => "verify",
            Command::Decompose => "decompose",
            Command::LilCurve => "lil-curve",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ergolil", version, about = "Long-time simulation and LIL diagnostics for ergodic SDEs and SPDEs")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Stop scheduling paths after the first failure.
    #[arg(long, global = true)]
    fail_fast: bool,
}

/// Runtime options that never change results.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub fail_fast: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// What a subcommand produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Text for standard output.
    pub report: String,
    /// Exit status: 0, or 1 when a checked condition failed.
    pub status: i32,
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write(out: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let p = out.join(name);
    write_atomic(&p, contents.as_bytes()).map_err(|e| runtime(format!("writing {}: {e}", p.display())))?;
    files.push(p);
    Ok(())
}

/// Runs `command` on a validated configuration, writing artifacts to `opts.out`.
pub fn dispatch(cfg: &RunConfig, command: Command, opts: &RunOptions) -> Result<Outcome, CliError> {
    let resolved = cfg.to_ini();
    let fingerprint = crate::mc::config_fingerprint(&resolved);
    let mut out = Outcome::default();
    std::fs::create_dir_all(&opts.out).map_err(|e| runtime(format!("creating {}: {e}", opts.out.display())))?;
    write(&opts.out, "config.resolved.ini", &resolved, &mut out.files)?;
    let model = cfg.build_model().map_err(CliError::Validation)?;
    let grid = cfg.build_grid().map_err(|e| CliError::Validation(e.to_string()))?;
    match command {
        Command::Simulate | Command::LilCurve => {
            let mut spec = cfg.ensemble_spec(model, grid, &resolved);
            if command == Command::Simulate && cfg.output.state_checkpoints > 0 {
                spec.state_checkpoints = geometric_checkpoints(0, cfg.grid.n_steps, cfg.output.state_checkpoints);
            }
            let summary = run_ensemble(&spec, opts.workers, opts.fail_fast).map_err(runtime)?;
            write(&opts.out, "paths.csv", &lil_curve_csv(&summary), &mut out.files)?;
            if command == Command::Simulate && !spec.state_checkpoints.is_empty() {
                write(&opts.out, "states.csv", &states_csv(&summary), &mut out.files)?;
            }
            let extra = json!({
                "subcommand": command.name(),
                "mu": Num(spec.mu),
                "window_start": Num(cfg.stats.window_start),
                "v_exact": num_opt(cfg.exact_v()),
            });
            write(&opts.out, "summary.json", &json_string(&summary_json(&summary, Some(extra))), &mut out.files)?;
            out.report = format!("{}: {} paths ok, {} failed\n", command.name(), summary.records.len(), summary.failures.len());
            fail_on_paths(&summary)?;
        }
        Command::EstimateV => {
            let spec = cfg.ensemble_spec(model, grid, &resolved);
            let summary = run_ensemble(&spec, opts.workers, opts.fail_fast).map_err(runtime)?;
            let mut estimates: Vec<VEstimate> = Vec::new();
            let mut notes: Vec<String> = Vec::new();
            if cfg.closed_form_applies() {
                estimates.push(v_exact_linear(cfg.model.a, cfg.model.sigma).map_err(runtime)?);
            }
            match batch_means_first_path(cfg, &spec) {
                Ok(e) => estimates.push(e),
                Err(e) => notes.push(format!("batch_means: {e}")),
            }
            if summary.records.len() >= 2 {
                estimates.push(v_ensemble(&summary.finals()).map_err(runtime)?);
            } else {
                notes.push("ensemble: needs at least 2 paths".into());
            }
            let doc = json!({
                "subcommand": command.name(),
                "fingerprint": fingerprint,
                "paths_ok": summary.records.len(),
                "paths_failed": summary.failures.len(),
                "estimates": estimates.iter().map(estimate_json).collect::<Vec<_>>(),
                "notes": notes,
            });
            write(&opts.out, "summary.json", &json_string(&doc), &mut out.files)?;
            for e in &estimates {
                let _ = writeln!(out.report, "{:<13} v² = {:.6}  v = {:.6}  stderr = {:.6}", e.method.name(), e.v2, e.v(), e.stderr);
            }
            fail_on_paths(&summary)?;
        }
        Command::Verify => {
            let report = verify_report(cfg)?;
            let gamma_star = largest_feasible_gamma(&cfg.verify.exponents, cfg.verify.context);
            let doc = json!({
                "subcommand": command.name(),
                "fingerprint": fingerprint,
                "context": cfg.verify.context.name(),
                "all_pass": report.all_pass(),
                "report": report.entries.iter().map(|e| json!({
                    "condition": e.condition,
                    "verdict": e.verdict.name(),
                    "witness": Num(e.witness),
                    "detail": e.detail,
                })).collect::<Vec<_>>(),
                "largest_feasible_gamma": num_opt(gamma_star),
                "largest_feasible_gamma_note": "grid search in steps of 0.05 over [γ₁, 1]; a heuristic, not part of the theorem",
            });
            write(&opts.out, "summary.json", &json_string(&doc), &mut out.files)?;
            out.report = report.table();
            if report.entries.iter().any(|e| e.verdict == Verdict::Fail) {
                out.status = 1;
            }
        }
        Command::Decompose => {
            let (csv, doc) = decompose(cfg, &model, &grid, &fingerprint)?;
            write(&opts.out, "decompose.csv", &csv, &mut out.files)?;
            write(&opts.out, "summary.json", &json_string(&doc), &mut out.files)?;
            let _ = writeln!(out.report, "decompose: qv_average = {}", doc["qv_average"]);
        }
    }
    Ok(out)
}

fn fail_on_paths(summary: &EnsembleSummary) -> Result<(), CliError> {
    match summary.failures.first() {
        None => Ok(()),
        Some(f) => Err(CliError::Runtime(format!(
            "{} path(s) failed; first: path {} at step {}: {}",
            summary.failures.len(),
            f.path_id,
            f.step,
            f.message
        ))),
    }
}

fn states_csv(summary: &EnsembleSummary) -> String {
    let dim = summary.records.iter().flat_map(|r| r.states.first()).map(|s| s.state.len()).next().unwrap_or(0);
    let mut out = String::from("path_id,n,t");
    for j in 0..dim {
        let _ = write!(out, ",y{j}");
    }
    out.push('\n');
    for r in &summary.records {
        for s in &r.states {
            let _ = write!(out, "{},{},{}", r.path_id, s.n, csv_num(Some(s.t)));
            for v in &s.state {
                let _ = write!(out, ",{}", csv_num(Some(*v)));
            }
            out.push('\n');
        }
    }
    out
}

struct BlockObserver<'a> {
    f: &'a TestFunction,
    sums: BlockSums,
    error: Option<String>,
}

impl Observer for BlockObserver<'_> {
    fn on_step(&mut self, view: &StepView<'_>) {
        if self.error.is_none() {
            if let Err(e) = self.sums.push(view.tau, self.f.eval(view.state)) {
                self.error = Some(e.to_string());
            }
        }
    }
}

/// Batch means over the first path of the ensemble.
fn batch_means_first_path(cfg: &RunConfig, spec: &EnsembleSpec) -> Result<VEstimate, String> {
    let horizon = spec.grid.horizon();
    let l = cfg.stats.block_length.unwrap_or(horizon.sqrt());
    let sums = BlockSums::new(l, spec.mu).map_err(|e| e.to_string())?;
    let mut obs = BlockObserver { f: &spec.f, sums, error: None };
    let noise = NoiseSource::counter(spec.seed, spec.first_path);
    simulate_path(&spec.model, &spec.scheme, &spec.grid, &spec.x0, &noise, &mut [&mut obs]).map_err(|e| e.to_string())?;
    if let Some(e) = obs.error {
        return Err(e);
    }
    obs.sums.estimate().map_err(|e| e.to_string())
}

/// Exponent inequalities of the configured context followed by conditions (i)-(iv).
pub fn verify_report(cfg: &RunConfig) -> Result<ConditionReport, CliError> {
    let v = &cfg.verify;
    let mut report = check_exponent_constraints(&v.exponents, v.context).map_err(|e| CliError::Validation(e.to_string()))?;
    let inputs = StepConditionInputs {
        gamma: v.exponents.gamma,
        alpha: v.exponents.alpha,
        l_tilde: v.exponents.l_tilde,
        rho: DecayLaw::Exponential { rate: v.rho_rate },
        rho_tau: DecayLaw::Exponential { rate: v.rho_tau_rate },
        horizon: v.horizon,
    };
    report.extend(check_step_conditions(&cfg.grid.spec, &inputs).map_err(|e| CliError::Validation(e.to_string()))?);
    Ok(report)
}

const STRASSEN_CAVEAT: &str = "Λ_N uses the clock t̃_k/t̃_N and the normalisation v̂² t̃_N in place of the martingale's own quadratic variation; it is a diagnostic, not a limit.";

fn decompose(cfg: &RunConfig, model: &Model, grid: &TimeGrid, fingerprint: &str) -> Result<(String, serde_json::Value), CliError> {
    let f = cfg.build_f();
    let mg = &cfg.martingale;
    let closed = match mg.mode {
        LedgerChoice::ClosedForm => {
            if !cfg.closed_form_applies() {
                return Err(CliError::Validation("martingale.mode = closed_form needs model.kind = ou, f = identity and μ(f) = 0".into()));
            }
            true
        }
        LedgerChoice::Nested => false,
        LedgerChoice::Auto => cfg.closed_form_applies(),
    };
    let mode = if closed {
        LedgerMode::ClosedFormLinear
    } else {
        let n = grid.n_max();
        let e = mg.eval_up_to.min(n - 1);
        let cost = (mg.inner_paths as u128) * ((0..=e as u128).map(|k| n as u128 - k).sum::<u128>());
        if cost > mg.step_budget as u128 {
            return Err(CliError::Validation(format!(
                "nested Monte Carlo would take {cost} inner steps, above martingale.step_budget = {}; lower martingale.eval_up_to, martingale.inner_paths or grid.n_steps",
                mg.step_budget
            )));
        }
        LedgerMode::NestedMc { inner_paths: mg.inner_paths, eval_up_to: e, seed: cfg.seed }
    };
    let noise = NoiseSource::counter(cfg.seed, cfg.mc.first_path);
    let ledger = MartingaleLedger::record(model, &cfg.scheme, grid, &f, cfg.mu(), &cfg.mc.x0, &noise, mode).map_err(runtime)?;
    let last = ledger.evaluated_up_to();
    let index = ledger.index();
    // Largest block count whose end lies inside the evaluated range.
    let mut n_avail = 0;
    while n_avail < index.k_max() && index.n_of(n_avail + 1) <= last {
        n_avail += 1;
    }
    let n_blocks = match mg.n_blocks {
        Some(n) if n > n_avail => {
            return Err(CliError::Validation(format!("martingale.n_blocks = {n} exceeds the {n_avail} blocks available")));
        }
        Some(n) => n,
        None => n_avail,
    };
    let mut rows: Vec<u64> = geometric_checkpoints(0, last, cfg.output.decompose_rows);
    rows.extend((1..=n_blocks).map(|k| index.n_of(k)).filter(|&n| n >= 1));
    rows.sort_unstable();
    rows.dedup();
    let mut csv = String::from("k,t_k,R,Mtilde,Rtilde,Z,reconstruction_residual\n");
    let mut max_residual = 0.0f64;
    for &k in &rows {
        let d = ledger.decomposition(k).map_err(runtime)?;
        max_residual = max_residual.max(d.residual);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            k,
            csv_num(Some(d.t_k)),
            csv_num(Some(d.r)),
            csv_num(Some(d.m_tilde)),
            csv_num(Some(d.r_tilde)),
            csv_num(Some(d.z)),
            csv_num(Some(d.residual))
        );
    }
    let qv = if n_blocks >= 1 { Some(ledger.qv_average(n_blocks).map_err(runtime)?) } else { None };
    let (v_hat, v_source) = match cfg.exact_v() {
        Some(v) => (Some(v), "exact"),
        None => (qv.map(f64::sqrt), "qv_average"),
    };
    let mut lambda = Vec::new();
    let mut lambda_note = serde_json::Value::Null;
    if let (Some(v), true) = (v_hat, n_blocks >= 1) {
        let (m, t) = ledger.subsequence_martingale(n_blocks).map_err(runtime)?;
        for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
            match strassen_functional(&m, &t, v, n_blocks as usize, s) {
                Ok(x) => lambda.push(json!({"t": Num(s), "value": Num(x)})),
                Err(e) => {
                    lambda_note = json!(e.to_string());
                    lambda.clear();
                    break;
                }
            }
        }
    }
    let mode_name = if closed { "closed_form_linear" } else { "nested_mc" };
    let doc = json!({
        "subcommand": "decompose",
        "fingerprint": fingerprint,
        "mode": mode_name,
        "path_id": cfg.mc.first_path,
        "evaluated_up_to": last,
        "n_blocks": n_blocks,
        "qv_average": num_opt(qv),
        "v_hat": num_opt(v_hat),
        "v_hat_source": v_source,
        "max_reconstruction_residual": Num(max_residual),
        "strassen": lambda,
        "strassen_error": lambda_note,
        "caveat": STRASSEN_CAVEAT,
    });
    Ok((csv, doc))
}

/// Entry point of the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Some(config_path) = args.config.as_ref() else {
        eprintln!("error: --config PATH is required");
        return 1;
    };
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", config_path.display());
            return 1;
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let workers = args.workers.or_else(workers_from_env).unwrap_or(1).max(1);
    let opts = RunOptions { out, workers, fail_fast: args.fail_fast };
    match dispatch(&cfg, args.command, &opts) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            outcome.status
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
