//! Checks of the exponent inequalities and step-size conditions behind the
//! LIL for numerical schemes, and Monte Carlo audits of the moment,
//! contraction and strong-order assumptions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{StepKind, StepSpec, TimeGrid};
use crate::integrate::{ou_coupled_increments, NoiseSource, SchemeKind, SchemeSpec, StepError, Stepper};
use crate::mc::{run_paths, McError};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssumeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Mc(#[from] McError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Undecided,
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Undecided => "undecided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub condition: String,
    pub verdict: Verdict,
    /// Left-hand side of an inequality, or the numeric sum certifying a condition.
    pub witness: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.verdict == Verdict::Pass)
    }

    pub fn get(&self, condition: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.condition == condition)
    }

    pub fn verdict(&self, condition: &str) -> Option<Verdict> {
        self.get(condition).map(|e| e.verdict)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionEntry> {
        self.entries.iter().filter(|e| e.verdict == Verdict::Fail)
    }

    pub fn extend(&mut self, other: ConditionReport) {
        self.entries.extend(other.entries);
    }

    /// Plain-text table, one row per condition.
    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.condition.chars().count()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<width$}  {:<9}  {:>14}  detail\n", "condition", "verdict", "witness");
        for e in &self.entries {
            out.push_str(&format!("{:<width$}  {:<9}  {:>14.6e}  {}\n", e.condition, e.verdict.name(), e.witness, e.detail));
        }
        out
    }

    fn inequality(&mut self, name: &str, lhs: f64, rhs: f64, text: &str) {
        let verdict = if lhs <= rhs { Verdict::Pass } else { Verdict::Fail };
        let rel = if verdict == Verdict::Pass { "≤" } else { ">" };
        self.entries.push(ConditionEntry {
            condition: name.to_string(),
            verdict,
            witness: lhs,
            detail: format!("{text}: {lhs} {rel} {rhs}"),
        });
    }
}

/// Exponents of the moment, contraction, continuity and class assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentParams {
    pub r: f64,
    pub r_tilde: f64,
    pub q: f64,
    pub q_tilde: f64,
    pub beta: f64,
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma: f64,
    pub l: f64,
    pub l_tilde: f64,
    pub alpha: f64,
    pub p: f64,
}

impl ExponentParams {
    /// The dissipative SODE setting: `r̃ = q̃ = 1`, `β = κ = 0`,
    /// `γ = γ₁ = 1`, `l̃ = 1/2`, `α = 1`, `p = 1`.
    pub fn sode(r: f64, q: f64, l: f64) -> Self {
        Self {
            r,
            r_tilde: 1.0,
            q,
            q_tilde: 1.0,
            beta: 0.0,
            kappa: 0.0,
            gamma1: 1.0,
            gamma: 1.0,
            l,
            l_tilde: 0.5,
            alpha: 1.0,
            p: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), AssumeError> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        let all = [
            self.r, self.r_tilde, self.q, self.q_tilde, self.beta, self.kappa, self.gamma1, self.gamma, self.l, self.l_tilde, self.alpha, self.p,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(AssumeError::Config("exponents must be finite".into()));
        }
        need(self.r >= 2.0, format!("r must be ≥ 2, got {}", self.r));
        need(self.r_tilde >= 1.0, format!("r̃ must be ≥ 1, got {}", self.r_tilde));
        need(self.q >= 2.0, format!("q must be ≥ 2, got {}", self.q));
        need(self.q_tilde >= 1.0, format!("q̃ must be ≥ 1, got {}", self.q_tilde));
        need((0.0..=self.r - 1.0).contains(&self.beta), format!("β must lie in [0, r−1] = [0, {}], got {}", self.r - 1.0, self.beta));
        need((0.0..=self.q - 1.0).contains(&self.kappa), format!("κ must lie in [0, q−1] = [0, {}], got {}", self.q - 1.0, self.kappa));
        need(self.gamma1 > 0.0 && self.gamma1 <= 1.0, format!("γ₁ must lie in (0, 1], got {}", self.gamma1));
        need(self.gamma >= self.gamma1 && self.gamma <= 1.0, format!("γ must lie in [γ₁, 1] = [{}, 1], got {}", self.gamma1, self.gamma));
        need((0.0..=self.r).contains(&self.l), format!("l must lie in [0, r] = [0, {}], got {}", self.r, self.l));
        need(self.l_tilde > 0.0 && self.l_tilde <= 1.0, format!("l̃ must lie in (0, 1], got {}", self.l_tilde));
        need(self.alpha >= 0.0, format!("α must be ≥ 0, got {}", self.alpha));
        need(self.p >= 1.0, format!("p must be ≥ 1, got {}", self.p));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(AssumeError::Config(bad.join("; ")))
        }
    }

    /// `d̃ = (1+β) ∨ r̃ ∨ q̃`.
    pub fn d_tilde(&self) -> f64 {
        (1.0 + self.beta).max(self.r_tilde).max(self.q_tilde)
    }

    /// `p̃_F = p/2 + p q̃/2 + γ (d̃ ∨ κ)`.
    pub fn p_tilde_f(&self) -> f64 {
        self.p / 2.0 + self.p * self.q_tilde / 2.0 + self.gamma * self.d_tilde().max(self.kappa)
    }

    /// `p̄ = [(p/2 + γ)(r̃ ∨ q̃)] ∨ [(p/2 + lγ) r̃]`.
    pub fn p_bar(&self) -> f64 {
        let a = (self.p / 2.0 + self.gamma) * self.r_tilde.max(self.q_tilde);
        let b = (self.p / 2.0 + self.l * self.gamma) * self.r_tilde;
        a.max(b)
    }
}

/// Which inequality list to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintContext {
    /// LIL of the exact process.
    Prop2_2,
    /// LIL of the numerical approximation.
    Thm3_1,
    /// Square moments of the martingale differences.
    Prop4_3,
    /// Almost sure limit of the quadratic variation, with `c = 2`.
    Prop4_4,
}

impl ConstraintContext {
    pub const ALL: [ConstraintContext; 4] = [Self::Prop2_2, Self::Thm3_1, Self::Prop4_3, Self::Prop4_4];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Prop2_2 => "prop2_2",
            Self::Thm3_1 => "thm3_1",
            Self::Prop4_3 => "prop4_3",
            Self::Prop4_4 => "prop4_4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Moment order `c` in the almost sure quadratic-variation bound.
pub const QV_MOMENT_ORDER: f64 = 2.0;

/// Evaluates every inequality of `context`; pure in `params`.
pub fn check_exponent_constraints(params: &ExponentParams, context: ConstraintContext) -> Result<ConditionReport, AssumeError> {
    params.validate()?;
    let ExponentParams { r, r_tilde, q, q_tilde, beta, gamma1, gamma, p, .. } = *params;
    let d = params.d_tilde();
    let pf = params.p_tilde_f();
    let pbar = params.p_bar();
    let mut rep = ConditionReport::default();
    let second = |rep: &mut ConditionReport| {
        rep.inequality("p/2(1+r̃) + (1+β)γ₁ ≤ r", p / 2.0 * (1.0 + r_tilde) + (1.0 + beta) * gamma1, r, "moment budget of the exact process");
    };
    let pbar_line = |rep: &mut ConditionReport| {
        rep.inequality("p/2 + p̄ ≤ r", p / 2.0 + pbar, r, "time-continuity budget");
    };
    let pf_line = |rep: &mut ConditionReport| {
        rep.inequality("p̃_F ≤ r ∧ q", pf, r.min(q), "moments of the Poisson-equation solution");
    };
    match context {
        ConstraintContext::Prop2_2 => {
            rep.inequality("2pr̃ + 4(1+β)γ₁ ≤ r", 2.0 * p * r_tilde + 4.0 * (1.0 + beta) * gamma1, r, "first moment budget");
            rep.inequality(
                "2r̃(pr̃ + (2+3β)γ₁) ≤ r",
                2.0 * r_tilde * (p * r_tilde + (2.0 + 3.0 * beta) * gamma1),
                r,
                "second moment budget",
            );
        }
        ConstraintContext::Thm3_1 => {
            rep.inequality("p ≤ r ∧ q/4", p, r.min(q / 4.0), "range of p");
            second(&mut rep);
            rep.inequality("4pq̃ + 8d̃γ ≤ q", 4.0 * p * q_tilde + 8.0 * d * gamma, q, "numerical moment budget");
            pbar_line(&mut rep);
            pf_line(&mut rep);
            rep.inequality("2q̃p̃_F + 4d̃γ ≤ q", 2.0 * q_tilde * pf + 4.0 * d * gamma, q, "fourth-moment budget of the differences");
        }
        ConstraintContext::Prop4_3 => {
            rep.inequality("p ≤ r ∧ q", p, r.min(q), "range of p");
            second(&mut rep);
            rep.inequality("pq̃ + 2d̃γ ≤ q", p * q_tilde + 2.0 * d * gamma, q, "square-moment budget");
            pf_line(&mut rep);
            pbar_line(&mut rep);
        }
        ConstraintContext::Prop4_4 => {
            let c = QV_MOMENT_ORDER;
            rep.inequality("p ≤ r ∧ q", p, r.min(q), "range of p");
            second(&mut rep);
            rep.inequality("4c(pq̃/2 + d̃γ) ≤ q", 4.0 * c * (p * q_tilde / 2.0 + d * gamma), q, "moment of order 4c, c = 2");
            pbar_line(&mut rep);
            pf_line(&mut rep);
            rep.inequality("2c(p̃_F q̃/2 + d̃γ) ≤ q", 2.0 * c * (pf * q_tilde / 2.0 + d * gamma), q, "moment of order 2c, c = 2");
        }
    }
    Ok(rep)
}

/// Largest `γ ∈ [γ₁, 1]` on the grid of multiples of 0.05 (plus `γ₁` itself)
/// for which every inequality of `context` holds. A search heuristic only.
pub fn largest_feasible_gamma(params: &ExponentParams, context: ConstraintContext) -> Option<f64> {
    let mut candidates: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).filter(|g| *g >= params.gamma1 && *g <= 1.0).collect();
    candidates.push(params.gamma1);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.into_iter().find(|&g| {
        let trial = ExponentParams { gamma: g, ..*params };
        check_exponent_constraints(&trial, context).map(|r| r.all_pass()).unwrap_or(false)
    })
}

/// Decay law of a contraction function `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DecayLaw {
    /// `ρ(t) = e^{−rate·t}`.
    Exponential { rate: f64 },
    /// `ρ(t) = (1+t)^{−exponent}`.
    Power { exponent: f64 },
}

impl DecayLaw {
    fn validate(&self) -> Result<(), AssumeError> {
        let v = match self {
            DecayLaw::Exponential { rate } => *rate,
            DecayLaw::Power { exponent } => *exponent,
        };
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(AssumeError::Config(format!("decay parameter must be positive, got {v}")))
        }
    }
}

/// Inputs of the step-size conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConditionInputs {
    pub gamma: f64,
    pub alpha: f64,
    pub l_tilde: f64,
    pub rho: DecayLaw,
    pub rho_tau: DecayLaw,
    /// Number of steps summed numerically before the tail bound takes over.
    pub horizon: u64,
}

/// `Σ_{k>H} (c k^{−θ})^e ≤ c^e H^{1−θe}/(θe − 1)` for `θe > 1`.
fn power_tail(spec: &StepSpec, e: f64, h: u64) -> f64 {
    let theta = spec.decay_exponent();
    let s = theta * e;
    if theta == 0.0 || s <= 1.0 {
        return f64::INFINITY;
    }
    // The cap only lowers terms.
    spec.scale.powf(e) * (h as f64).powf(1.0 - s) / (s - 1.0)
}

/// Theorem conditions (i)-(iv) on the step sequence.
pub fn check_step_conditions(spec: &StepSpec, inp: &StepConditionInputs) -> Result<ConditionReport, AssumeError> {
    spec.validate().map_err(|e| AssumeError::Config(e.to_string()))?;
    inp.rho.validate()?;
    inp.rho_tau.validate()?;
    let StepConditionInputs { gamma, alpha, l_tilde, horizon, .. } = *inp;
    if !(gamma > 0.0 && gamma <= 1.0) || !(alpha >= 0.0) || !(l_tilde > 0.0 && l_tilde <= 1.0) {
        return Err(AssumeError::Config(format!("need γ ∈ (0, 1], α ≥ 0, l̃ ∈ (0, 1]; got γ = {gamma}, α = {alpha}, l̃ = {l_tilde}")));
    }
    if horizon < 2 {
        return Err(AssumeError::Config(format!("horizon must be ≥ 2, got {horizon}")));
    }
    let h = horizon as usize;
    let steps: Vec<f64> = (0..=horizon).map(|k| spec.step(k)).collect();
    let theta = spec.decay_exponent();
    let mut rep = ConditionReport::default();

    // (i)
    let e1 = 1.0 + gamma * alpha;
    let partial: f64 = steps[1..].iter().map(|t| t.powf(e1)).sum();
    let tail = power_tail(spec, e1, horizon);
    let (verdict, detail) = match spec.kind {
        StepKind::Constant => (Verdict::Fail, format!("constant steps: Σ τ^{e1} grows linearly (partial sum {partial} at {horizon})")),
        _ if theta * e1 > 1.0 => (Verdict::Pass, format!("p-series exponent θ(1+γα) = {} > 1; partial sum {partial} plus tail ≤ {tail}", theta * e1)),
        _ => (Verdict::Fail, format!("p-series exponent θ(1+γα) = {} ≤ 1: Σ τ_k^(1+γα) diverges", theta * e1)),
    };
    rep.entries.push(ConditionEntry { condition: "(i)".into(), verdict, witness: partial + tail, detail });

    // (ii) and (iii)
    for (name, law) in [("(ii)", inp.rho), ("(iii)", inp.rho_tau)] {
        rep.entries.push(tail_weighted_condition(name, &steps, gamma, law));
    }

    // (iv)
    let e_lil = 1.0 + l_tilde * gamma;
    let monotone = spec.is_nonincreasing();
    let t_h: f64 = steps[1..].iter().sum();
    let witness;
    let inner_exp;
    if monotone {
        inner_exp = e1.min(e_lil);
        // suffix[k] = Σ_{i=k}^{H} τ_i^e
        let mut suffix = vec![0.0; h + 2];
        for k in (1..=h).rev() {
            suffix[k] = suffix[k + 1] + steps[k].powf(inner_exp);
        }
        let tail = power_tail(spec, inner_exp, horizon);
        let total: f64 = (2..=h).map(|k| steps[k - 1] * (suffix[k - 1] + tail)).sum();
        witness = total / t_h;
    } else {
        inner_exp = e1.min(e_lil);
        let mut s1 = vec![0.0; h + 2];
        let mut s2 = vec![0.0; h + 2];
        for k in (1..h).rev() {
            s1[k] = s1[k + 1] + steps[k].powf(gamma * alpha) * steps[k + 1];
        }
        for k in (1..=h).rev() {
            s2[k] = s2[k + 1] + steps[k].powf(e_lil);
        }
        let (t1, t2) = (power_tail(spec, e1, horizon - 1), power_tail(spec, e_lil, horizon));
        let total: f64 = (2..=h).map(|k| steps[k - 1] * (s1[k - 1] + t1 + s2[k] + t2)).sum();
        witness = total / t_h;
    }
    let form = if monotone { "monotone form, exponent (1+γα) ∧ (1+l̃γ)" } else { "full double sum" };
    let (verdict, detail) = match spec.kind {
        StepKind::Constant => (Verdict::Fail, format!("{form}: constant steps make the inner sums infinite")),
        _ if theta * inner_exp > 1.0 => (
            Verdict::Pass,
            format!("{form}: inner exponent θ·{inner_exp} = {} > 1, averaged sum {witness} at t = {t_h}", theta * inner_exp),
        ),
        _ => (Verdict::Fail, format!("{form}: inner exponent θ·{inner_exp} = {} ≤ 1, inner sums diverge", theta * inner_exp)),
    };
    rep.entries.push(ConditionEntry { condition: "(iv)".into(), verdict, witness, detail });
    Ok(rep)
}

/// `sup_{k≤H} Σ_{i≥k} τ_i ρ(t_i − t_k)^γ` from the numeric partial sums plus
/// an integral tail bound. Terms are bounded by `∫_{t_{i−1}}^{t_i} ρ(t − t_k)^γ dt`
/// because `ρ` is nonincreasing.
fn tail_weighted_condition(name: &str, steps: &[f64], gamma: f64, law: DecayLaw) -> ConditionEntry {
    let h = steps.len() - 1;
    let mut times = vec![0.0; h + 1];
    for k in 1..=h {
        times[k] = times[k - 1] + steps[k];
    }
    match law {
        DecayLaw::Exponential { rate } => {
            let c = rate * gamma;
            // g[k] = Σ_{i=k}^{H} τ_i e^{−c(t_i − t_k)}
            let mut g = vec![0.0; h + 2];
            let mut sup = 0.0f64;
            for k in (1..=h).rev() {
                g[k] = steps[k] + (-c * steps.get(k + 1).copied().unwrap_or(0.0)).exp() * g[k + 1];
                let bound = g[k] + (-c * (times[h] - times[k])).exp() / c;
                sup = sup.max(bound);
            }
            let cert = steps[1] + 1.0 / c;
            ConditionEntry {
                condition: name.into(),
                verdict: Verdict::Pass,
                witness: sup,
                detail: format!("exponential ρ with rate·γ = {c}: sup of partial sum plus tail = {sup}; every k is bounded by τ̄ + 1/(rate·γ) = {cert}"),
            }
        }
        DecayLaw::Power { exponent } => {
            let s = exponent * gamma;
            let mut sup = 0.0f64;
            // Direct O(H²) sums are too slow; check a geometric set of k.
            let mut k = 1usize;
            while k <= h {
                let mut sum = 0.0;
                for i in k..=h {
                    sum += steps[i] * (1.0 + times[i] - times[k]).powf(-s);
                }
                let tail = if s > 1.0 { (1.0 + times[h] - times[k]).powf(1.0 - s) / (s - 1.0) } else { f64::INFINITY };
                sup = sup.max(sum + tail);
                k = (k * 2).max(k + 1);
            }
            if s > 1.0 {
                ConditionEntry {
                    condition: name.into(),
                    verdict: Verdict::Pass,
                    witness: sup,
                    detail: format!("power ρ with exponent·γ = {s} > 1: bounded by τ̄ + 1/(exponent·γ − 1)"),
                }
            } else {
                let partial = (1..=h).map(|i| steps[i] * (1.0 + times[i] - times[1]).powf(-s)).sum::<f64>();
                ConditionEntry {
                    condition: name.into(),
                    verdict: Verdict::Undecided,
                    witness: partial,
                    detail: format!("power ρ with exponent·γ = {s} ≤ 1: no tail certificate; partial sum from k = 1 is {partial}"),
                }
            }
        }
    }
}

/// Monte Carlo settings shared by the audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditSettings {
    pub paths: u64,
    pub seed: u64,
    pub workers: usize,
}

/// About `count` geometrically spaced indices in `(lo, hi]`, always including `hi`.
pub fn geometric_checkpoints(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    let mut out = Vec::new();
    if hi <= lo || count == 0 {
        return out;
    }
    let span = (hi - lo) as f64;
    for i in 1..=count {
        let n = lo + (span.powf(i as f64 / count as f64)).round() as u64;
        let n = n.clamp(lo + 1, hi);
        if out.last() != Some(&n) {
            out.push(n);
        }
    }
    if out.last() != Some(&hi) {
        out.push(hi);
    }
    out
}

/// Runs one path from `x` at index `m` to `checkpoints.last()`, calling `visit`
/// at each checkpoint with the state.
fn run_from(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    x: &[f64],
    m: u64,
    checkpoints: &[u64],
    noise: &NoiseSource,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<(), StepError> {
    let mut stepper = Stepper::new(model, *scheme)?;
    let mut y = x.to_vec();
    let mut xi = vec![0.0; model.noise_dim()];
    let mut dw = vec![0.0; model.noise_dim()];
    let mut next = 0;
    let end = checkpoints.last().copied().unwrap_or(m);
    for n in m + 1..=end {
        let tau = grid.step(n);
        noise.fill(n, &mut xi);
        stepper.scale_noise(tau, &xi, &mut dw);
        stepper.step(&mut y, tau, &xi, &dw)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(StepError::NonFinite(format!("state at step {n}")));
        }
        if checkpoints.get(next) == Some(&n) {
            visit(next, &y);
            next += 1;
        }
    }
    Ok(())
}

fn norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderMoments {
    pub order: f64,
    /// `max_k` of the estimated `E‖Y_{t_m,t_k}‖^order`.
    pub sup: f64,
    pub stderr: f64,
    pub argmax_n: u64,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentScan {
    pub checkpoints: Vec<u64>,
    pub orders: Vec<OrderMoments>,
    /// Some path produced a non-finite state or a failed step.
    pub diverged: bool,
    pub diverged_paths: u64,
}

/// Estimates `sup_{k>m} E‖Y^{x}_{t_m,t_k}‖^order` over geometric checkpoints up to `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn moment_scan(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    x: &[f64],
    orders: &[f64],
    m: u64,
    horizon: u64,
    settings: &AuditSettings,
) -> Result<MomentScan, AssumeError> {
    if orders.is_empty() || orders.iter().any(|o| !(*o > 0.0)) {
        return Err(AssumeError::Config("moment orders must be positive".into()));
    }
    if horizon <= m || horizon > grid.n_max() {
        return Err(AssumeError::Config(format!("need m < horizon ≤ {}, got m = {m}, horizon = {horizon}", grid.n_max())));
    }
    let cps = geometric_checkpoints(m, horizon, 40);
    let nc = cps.len();
    let results = run_paths(0..settings.paths, settings.workers, false, |path| {
        let mut norms = vec![0.0; nc];
        run_from(model, scheme, grid, x, m, &cps, &NoiseSource::counter(settings.seed, path), |i, y| norms[i] = norm(y))?;
        Ok::<_, StepError>(norms)
    })?;
    let mut diverged_paths = 0;
    let mut sums = vec![vec![(0.0, 0.0); nc]; orders.len()];
    let mut ok = 0u64;
    for (_, r) in &results {
        match r {
            Ok(norms) => {
                ok += 1;
                for (oi, &o) in orders.iter().enumerate() {
                    for (ci, &nv) in norms.iter().enumerate() {
                        let v = nv.powf(o);
                        sums[oi][ci].0 += v;
                        sums[oi][ci].1 += v * v;
                    }
                }
            }
            Err(_) => diverged_paths += 1,
        }
    }
    let mut out = Vec::new();
    for (oi, &order) in orders.iter().enumerate() {
        let mut means = Vec::with_capacity(nc);
        let mut ses = Vec::with_capacity(nc);
        for &(s, s2) in &sums[oi] {
            if ok == 0 || diverged_paths > 0 {
                means.push(f64::INFINITY);
                ses.push(f64::NAN);
                continue;
            }
            let n = ok as f64;
            let mean = s / n;
            let var = if ok > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            means.push(mean);
            ses.push((var / n).sqrt());
        }
        let (imax, sup) = means.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        out.push(OrderMoments { order, sup, stderr: ses[imax], argmax_n: cps[imax], means, stderrs: ses });
    }
    Ok(MomentScan { checkpoints: cps, orders: out, diverged: diverged_paths > 0, diverged_paths })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    pub checkpoints: Vec<u64>,
    /// `t_n − t_m`.
    pub elapsed: Vec<f64>,
    /// `E‖Y^x_{t_m,t_n} − Y^y_{t_m,t_n}‖²`.
    pub mean_sq: Vec<f64>,
    /// Fitted decay rate of the mean square difference.
    pub rate: f64,
    /// `rate / 2`, the exponent of `ρ^τ`.
    pub rho_exponent: f64,
}

/// Synchronous coupling of the paths from `x` and `y`; least-squares fit of
/// `log E‖ΔY‖²` against elapsed time.
#[allow(clippy::too_many_arguments)]
pub fn contraction_fit(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    x: &[f64],
    y: &[f64],
    m: u64,
    horizon: u64,
    settings: &AuditSettings,
) -> Result<ContractionFit, AssumeError> {
    if x == y {
        return Err(AssumeError::Degenerate("x = y gives identically zero differences".into()));
    }
    if horizon <= m || horizon > grid.n_max() {
        return Err(AssumeError::Config(format!("need m < horizon ≤ {}, got m = {m}, horizon = {horizon}", grid.n_max())));
    }
    let cps = geometric_checkpoints(m, horizon, 40);
    let nc = cps.len();
    let results = run_paths(0..settings.paths, settings.workers, false, |path| {
        let noise = NoiseSource::counter(settings.seed, path);
        let mut a = vec![Vec::new(); nc];
        run_from(model, scheme, grid, x, m, &cps, &noise, |i, s| a[i] = s.to_vec())?;
        let mut d = vec![0.0; nc];
        run_from(model, scheme, grid, y, m, &cps, &noise, |i, s| d[i] = s.iter().zip(&a[i]).map(|(u, v)| (u - v) * (u - v)).sum())?;
        Ok::<_, StepError>(d)
    })?;
    let mut mean_sq = vec![0.0; nc];
    for (_, r) in &results {
        let d = r.as_ref().map_err(|e| AssumeError::Step(e.clone()))?;
        for (acc, v) in mean_sq.iter_mut().zip(d) {
            *acc += v;
        }
    }
    mean_sq.iter_mut().for_each(|v| *v /= settings.paths as f64);
    let tm = grid.time(m);
    let elapsed: Vec<f64> = cps.iter().map(|&n| grid.time(n) - tm).collect();
    let pts: Vec<(f64, f64)> = elapsed.iter().zip(&mean_sq).filter(|(_, v)| **v > 0.0).map(|(t, v)| (*t, v.ln())).collect();
    if pts.len() < 2 {
        return Err(AssumeError::Degenerate("fewer than two positive mean-square differences".into()));
    }
    let (slope, _, _) = weighted_line(&pts, &vec![1.0; pts.len()]);
    Ok(ContractionFit { checkpoints: cps, elapsed, mean_sq, rate: -slope, rho_exponent: -slope / 2.0 })
}

/// Weighted least squares `y = a + b x`; returns `(b, a, se(b))`.
fn weighted_line(pts: &[(f64, f64)], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = pts.iter().zip(w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let my = pts.iter().zip(w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().zip(w).map(|(p, w)| w * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().zip(w).map(|(p, w)| w * (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    (b, my - b * mx, (1.0 / sxx).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderLevel {
    pub n: u64,
    pub tau: f64,
    /// `E|X_{t_n} − Y_{t_n}|²`.
    pub mse: f64,
    pub mse_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongOrderFit {
    pub levels: Vec<OrderLevel>,
    /// `α̂ = slope/2` of `log mse` against `log τ_n`; infinite when the scheme is exact.
    pub alpha: f64,
    /// 95% interval for `α̂`.
    pub ci: (f64, f64),
    pub exact: bool,
}

/// Couples the exact OU transition with `scheme` on shared Brownian paths
/// started at `x0`, and regresses the mean square error at the indices `levels`.
pub fn strong_order_fit(
    model: &Model,
    scheme: &SchemeSpec,
    grid: &TimeGrid,
    x0: f64,
    levels: &[u64],
    settings: &AuditSettings,
) -> Result<StrongOrderFit, AssumeError> {
    let lin = model
        .linear()
        .ok_or_else(|| AssumeError::Unsupported("strong-order fits need the exact transition of the linear model".into()))?;
    if levels.len() < 3 {
        return Err(AssumeError::Insufficient(format!("need at least 3 levels, got {}", levels.len())));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] == 0 {
        return Err(AssumeError::Config("levels must be positive and strictly increasing".into()));
    }
    let top = *levels.last().unwrap();
    if top > grid.n_max() {
        return Err(AssumeError::Config(format!("level {top} beyond the grid end {}", grid.n_max())));
    }
    let (a, sigma) = (lin.a, lin.sigma);
    let nl = levels.len();
    let kind = scheme.kind;
    let results = run_paths(0..settings.paths, settings.workers, false, |path| {
        let noise = NoiseSource::counter(settings.seed, path);
        let (mut x, mut y) = (x0, x0);
        let (mut xi1, mut xi2) = ([0.0], [0.0]);
        let mut sq = vec![0.0; nl];
        let mut next = 0;
        for n in 1..=top {
            let tau = grid.step(n);
            noise.fill(n, &mut xi1);
            noise.fill_aux(n, &mut xi2);
            let (dw, integral) = ou_coupled_increments(a, tau, xi1[0], xi2[0]);
            x = (-a * tau).exp() * x + sigma * integral;
            y = match kind {
                SchemeKind::Bem => (y + sigma * dw) / (1.0 + a * tau),
                SchemeKind::EmBaseline => y - a * y * tau + sigma * dw,
                SchemeKind::ExactOu => (-a * tau).exp() * y + sigma * integral,
                SchemeKind::ExpEuler => return Err(StepError::Unsupported { scheme: kind.name(), reason: "SODE model".into() }),
            };
            if levels[next] == n {
                sq[next] = (x - y) * (x - y);
                next += 1;
            }
        }
        Ok(sq)
    })?;
    let mut s = vec![(0.0, 0.0); nl];
    for (_, r) in &results {
        let sq = r.as_ref().map_err(|e| AssumeError::Step(e.clone()))?;
        for (acc, v) in s.iter_mut().zip(sq) {
            acc.0 += v;
            acc.1 += v * v;
        }
    }
    let np = settings.paths as f64;
    let out_levels: Vec<OrderLevel> = levels
        .iter()
        .zip(&s)
        .map(|(&n, &(s1, s2))| {
            let mse = s1 / np;
            let var = if np > 1.0 { ((s2 - np * mse * mse) / (np - 1.0)).max(0.0) } else { 0.0 };
            OrderLevel { n, tau: grid.step(n), mse, mse_stderr: (var / np).sqrt() }
        })
        .collect();
    if out_levels.iter().all(|l| l.mse == 0.0) {
        return Ok(StrongOrderFit { levels: out_levels, alpha: f64::INFINITY, ci: (f64::INFINITY, f64::INFINITY), exact: true });
    }
    if out_levels.iter().any(|l| !(l.mse > 0.0)) {
        return Err(AssumeError::Degenerate("some level has zero mean square error".into()));
    }
    let pts: Vec<(f64, f64)> = out_levels.iter().map(|l| (l.tau.ln(), l.mse.ln())).collect();
    // Var(log mse) ≈ (se/mse)².
    let w: Vec<f64> = out_levels.iter().map(|l| (l.mse / l.mse_stderr.max(1e-300 * l.mse)).powi(2)).collect();
    let (slope, _, se) = weighted_line(&pts, &w);
    let alpha = slope / 2.0;
    let half = 1.96 * se / 2.0;
    Ok(StrongOrderFit { levels: out_levels, alpha, ci: (alpha - half, alpha + half), exact: false })
}

/// Dyadic levels `2^lo, ..., 2^hi`.
pub fn dyadic_levels(lo: u32, hi: u32) -> Vec<u64> {
    (lo..=hi).map(|j| 1u64 << j).collect()
}
