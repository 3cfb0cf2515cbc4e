//! Decreasing-step time grids and the quasi-uniform subsequence.
//!
//! A grid is described by a [`StepSpec`] and materialised (or walked lazily)
//! as a [`TimeGrid`] holding `t_n = τ_0 + τ_1 + ... + τ_n` with the sentinel
//! `τ_0 = 0`. The [`QuasiUniformIndex`] picks out the grid indices `n_(k)`
//! with `t_{n_(k)} ≤ k < t_{n_(k)+1}`, which turn a shrinking-step grid into
//! one with blocks of roughly unit length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of steps per lazily generated block.
pub const DEFAULT_BLOCK_SIZE: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid configuration error: {0}")]
    Config(String),
    /// The grid ends before the requested quasi-uniform block index.
    #[error("grid horizon t = {horizon} ends before k = {first_unreachable}")]
    Horizon { first_unreachable: u64, horizon: f64 },
    /// A grid index outside of the range covered by the quasi-uniform index.
    #[error("step index {n} is not covered (grid has {n_max} steps, index covers k ≤ {k_max})")]
    NotCovered { n: u64, n_max: u64, k_max: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepKind {
    /// `τ_k = c / k`.
    Harmonic,
    /// `τ_k = c · k^{-θ}` with `θ ∈ (0, 1]`.
    Power { theta: f64 },
    /// `τ_k = c`; a non-vanishing baseline.
    Constant,
}

/// Step-size law `τ_k = min(c · k^{-θ}, τ̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub kind: StepKind,
    pub scale: f64,
    pub cap: f64,
}

impl StepSpec {
    pub fn harmonic() -> Self {
        Self { kind: StepKind::Harmonic, scale: 1.0, cap: 1.0 }
    }

    pub fn power(theta: f64) -> Self {
        Self { kind: StepKind::Power { theta }, scale: 1.0, cap: 1.0 }
    }

    pub fn constant(tau: f64) -> Self {
        Self { kind: StepKind::Constant, scale: tau, cap: tau }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = cap;
        self
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(GridError::Config(format!("scale must be positive and finite, got {}", self.scale)));
        }
        if !(self.cap.is_finite() && self.cap > 0.0) {
            return Err(GridError::Config(format!("cap must be positive and finite, got {}", self.cap)));
        }
        if let StepKind::Power { theta } = self.kind {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(GridError::Config(format!("theta must lie in (0, 1], got {theta}")));
            }
        }
        Ok(())
    }

    /// Decay exponent θ of the uncapped law (`0` for constant steps).
    pub fn decay_exponent(&self) -> f64 {
        match self.kind {
            StepKind::Harmonic => 1.0,
            StepKind::Power { theta } => theta,
            StepKind::Constant => 0.0,
        }
    }

    /// `τ_k`; `τ_0 = 0` is the sentinel.
    #[inline]
    pub fn step(&self, k: u64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let raw = match self.kind {
            StepKind::Harmonic => self.scale / k as f64,
            StepKind::Power { theta } => self.scale * (k as f64).powf(-theta),
            StepKind::Constant => self.scale,
        };
        raw.min(self.cap)
    }

    /// `sup_k τ_k`.
    pub fn tau_bar(&self) -> f64 {
        self.step(1)
    }

    /// `τ_k → 0`.
    pub fn vanishes(&self) -> bool {
        !matches!(self.kind, StepKind::Constant)
    }

    /// `Σ τ_k = ∞`; every built-in law with θ ≤ 1 diverges.
    pub fn sum_diverges(&self) -> bool {
        self.decay_exponent() <= 1.0
    }

    /// All built-in laws are nonincreasing in k.
    pub fn is_nonincreasing(&self) -> bool {
        true
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// One grid point `(n, τ_n, t_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub n: u64,
    pub tau: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense { steps: Vec<f64>, times: Vec<f64> },
    /// Accumulator state at the start of each block.
    Blocked { anchors: Vec<CompensatedSum> },
}

/// Step sequence and grid times `t_0 = 0 < t_1 < ... < t_{n_max}`.
///
/// Small grids are stored densely. Grids longer than the block size keep only
/// the compensated accumulator at block boundaries and regenerate times on
/// demand; regenerated times are bit-identical to a forward walk.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    spec: StepSpec,
    n_max: u64,
    block_size: usize,
    horizon: f64,
    storage: Storage,
}

pub fn build_grid(spec: StepSpec, n_max: u64) -> Result<TimeGrid, GridError> {
    build_grid_blocked(spec, n_max, DEFAULT_BLOCK_SIZE)
}

pub fn build_grid_blocked(spec: StepSpec, n_max: u64, block_size: usize) -> Result<TimeGrid, GridError> {
    spec.validate()?;
    if n_max == 0 {
        return Err(GridError::Config("n_max must be at least 1".into()));
    }
    if block_size == 0 {
        return Err(GridError::Config("block size must be at least 1".into()));
    }
    if (n_max as u128) < block_size as u128 {
        let len = n_max as usize + 1;
        let mut steps = Vec::with_capacity(len);
        let mut times = Vec::with_capacity(len);
        steps.push(0.0);
        times.push(0.0);
        let mut acc = CompensatedSum::new();
        for k in 1..=n_max {
            let tau = spec.step(k);
            check_step(tau, k)?;
            acc.add(tau);
            steps.push(tau);
            times.push(acc.value());
        }
        let horizon = *times.last().unwrap();
        Ok(TimeGrid { spec, n_max, block_size, horizon, storage: Storage::Dense { steps, times } })
    } else {
        let mut anchors = Vec::with_capacity((n_max / block_size as u64 + 1) as usize);
        let mut acc = CompensatedSum::new();
        for k in 1..=n_max {
            if (k - 1) % block_size as u64 == 0 {
                anchors.push(acc);
            }
            let tau = spec.step(k);
            check_step(tau, k)?;
            acc.add(tau);
        }
        Ok(TimeGrid { spec, n_max, block_size, horizon: acc.value(), storage: Storage::Blocked { anchors } })
    }
}

fn check_step(tau: f64, k: u64) -> Result<(), GridError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GridError::Config(format!("step law produced τ_{k} = {tau}")))
    }
}

impl TimeGrid {
    pub fn spec(&self) -> &StepSpec {
        &self.spec
    }

    pub fn n_max(&self) -> u64 {
        self.n_max
    }

    /// `t_{n_max}`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn tau_bar(&self) -> f64 {
        self.spec.tau_bar()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense { .. })
    }

    /// `τ_n` for `n ≤ n_max` (index 0 holds the sentinel 0).
    pub fn step(&self, n: u64) -> f64 {
        debug_assert!(n <= self.n_max);
        match &self.storage {
            Storage::Dense { steps, .. } => steps[n as usize],
            Storage::Blocked { .. } => self.spec.step(n),
        }
    }

    /// `t_n` for `n ≤ n_max`.
    pub fn time(&self, n: u64) -> f64 {
        assert!(n <= self.n_max, "grid index {n} beyond n_max = {}", self.n_max);
        match &self.storage {
            Storage::Dense { times, .. } => times[n as usize],
            Storage::Blocked { anchors } => {
                if n == 0 {
                    return 0.0;
                }
                let block = ((n - 1) / self.block_size as u64) as usize;
                let mut acc = anchors[block];
                let start = block as u64 * self.block_size as u64 + 1;
                for k in start..=n {
                    acc.add(self.spec.step(k));
                }
                acc.value()
            }
        }
    }

    /// Dense step array, when stored.
    pub fn steps(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Dense { steps, .. } => Some(steps),
            Storage::Blocked { .. } => None,
        }
    }

    /// Dense time array, when stored.
    pub fn times(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::Dense { times, .. } => Some(times),
            Storage::Blocked { .. } => None,
        }
    }

    /// Walks `n = 1..=n_max`.
    pub fn iter(&self) -> GridIter<'_> {
        GridIter { grid: self, next: 1, acc: CompensatedSum::new() }
    }
}

pub struct GridIter<'a> {
    grid: &'a TimeGrid,
    next: u64,
    acc: CompensatedSum,
}

impl Iterator for GridIter<'_> {
    type Item = GridPoint;

    #[inline]
    fn next(&mut self) -> Option<GridPoint> {
        let n = self.next;
        if n > self.grid.n_max {
            return None;
        }
        self.next += 1;
        match &self.grid.storage {
            Storage::Dense { steps, times } => Some(GridPoint { n, tau: steps[n as usize], t: times[n as usize] }),
            Storage::Blocked { .. } => {
                let tau = self.grid.spec.step(n);
                self.acc.add(tau);
                Some(GridPoint { n, tau, t: self.acc.value() })
            }
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.grid.n_max + 1 - self.next) as usize;
        (left, Some(left))
    }
}

/// The map `k ↦ n_(k)` with `t_{n_(k)} ≤ k < t_{n_(k)+1}` for `0 ≤ k ≤ k_max`.
///
/// `n_(0) = 0` whenever `t_1 > 0`, which always holds for positive steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiUniformIndex {
    pub n_of: Vec<u64>,
    pub tilde_times: Vec<f64>,
    pub tilde_steps: Vec<f64>,
}

pub fn quasi_uniform_index(grid: &TimeGrid, k_max: u64) -> Result<QuasiUniformIndex, GridError> {
    if k_max == 0 {
        return Err(GridError::Config("k_max must be at least 1".into()));
    }
    if grid.horizon() < k_max as f64 {
        let first_unreachable = grid.horizon().floor() as u64 + 1;
        return Err(GridError::Horizon { first_unreachable, horizon: grid.horizon() });
    }
    let len = k_max as usize + 1;
    let mut n_of = vec![0u64; len];
    let mut tilde_times = vec![0.0; len];
    let mut k = 1u64;
    let mut prev = GridPoint { n: 0, tau: 0.0, t: 0.0 };
    for point in grid.iter() {
        while k <= k_max && point.t > k as f64 {
            n_of[k as usize] = prev.n;
            tilde_times[k as usize] = prev.t;
            k += 1;
        }
        if k > k_max {
            break;
        }
        prev = point;
    }
    // The remaining k satisfy t_{n_max} ≤ k ≤ t_{n_max} (equality), resolved
    // by the first step past the stored grid.
    while k <= k_max {
        let next_t = prev.t + grid.spec().step(prev.n + 1);
        if prev.t <= k as f64 && (k as f64) < next_t {
            n_of[k as usize] = prev.n;
            tilde_times[k as usize] = prev.t;
            k += 1;
        } else {
            return Err(GridError::Horizon { first_unreachable: k, horizon: grid.horizon() });
        }
    }
    let mut tilde_steps = vec![0.0; len];
    for k in 1..len {
        tilde_steps[k] = tilde_times[k] - tilde_times[k - 1];
    }
    Ok(QuasiUniformIndex { n_of, tilde_times, tilde_steps })
}

impl QuasiUniformIndex {
    pub fn k_max(&self) -> u64 {
        (self.n_of.len() - 1) as u64
    }

    /// `n_(k)`.
    pub fn n_of(&self, k: u64) -> u64 {
        self.n_of[k as usize]
    }

    /// `t̃_k = t_{n_(k)}`.
    pub fn tilde_time(&self, k: u64) -> f64 {
        self.tilde_times[k as usize]
    }

    /// `τ̃_k = t̃_k − t̃_{k−1}`.
    pub fn tilde_step(&self, k: u64) -> f64 {
        self.tilde_steps[k as usize]
    }
}

/// `k̃` with `t̃_{k̃} ≤ t_n < t̃_{k̃+1}`.
pub fn tilde_of(index: &QuasiUniformIndex, grid: &TimeGrid, n: u64) -> Result<u64, GridError> {
    let k_max = index.k_max();
    let not_covered = || GridError::NotCovered { n, n_max: grid.n_max(), k_max };
    if n > grid.n_max() {
        return Err(not_covered());
    }
    // Largest k with n_(k) ≤ n; n_(0) = 0 so the search never comes up empty.
    let k = index.n_of.partition_point(|&m| m <= n) as u64 - 1;
    if k < k_max {
        Ok(k)
    } else if grid.time(n) < (k_max + 1) as f64 {
        Ok(k_max)
    } else {
        Err(not_covered())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn harmonic_partial_sum(n: u64) -> f64 {
        (1..=n).map(|k| 1.0 / k as f64).sum()
    }

    #[test]
    fn harmonic_times() {
        let grid = build_grid(StepSpec::harmonic(), 3).unwrap();
        let times = grid.times().unwrap();
        assert_eq!(times[0], 0.0);
        assert_eq!(times[1], 1.0);
        assert_eq!(times[2], 1.5);
        assert_relative_eq!(times[3], 1.0 + 0.5 + 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn power_step() {
        let spec = StepSpec::power(0.75);
        assert_eq!(spec.step(16), 0.125);
        assert_eq!(spec.step(0), 0.0);
    }

    #[test]
    fn constant_times() {
        let grid = build_grid(StepSpec::constant(0.5), 4).unwrap();
        assert_eq!(grid.times().unwrap(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(!grid.spec().vanishes());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(build_grid(StepSpec::harmonic(), 0).is_err());
        assert!(build_grid(StepSpec::power(1.5), 10).is_err());
        assert!(build_grid(StepSpec::harmonic().with_scale(-1.0), 10).is_err());
        assert!(build_grid(StepSpec::harmonic().with_cap(0.0), 10).is_err());
    }

    #[test]
    fn quasi_uniform_harmonic() {
        let grid = build_grid(StepSpec::harmonic(), 100).unwrap();
        let idx = quasi_uniform_index(&grid, 3).unwrap();
        assert_eq!(idx.n_of, vec![0, 1, 3, 10]);
        assert_relative_eq!(idx.tilde_time(3), harmonic_partial_sum(10), epsilon = 1e-14);
        assert_relative_eq!(grid.time(11), 3.019877, epsilon = 1e-6);
    }

    #[test]
    fn tilde_of_examples() {
        let grid = build_grid(StepSpec::harmonic(), 100).unwrap();
        let idx = quasi_uniform_index(&grid, 4).unwrap();
        assert_eq!(tilde_of(&idx, &grid, 5).unwrap(), 2);
        assert_eq!(tilde_of(&idx, &grid, 1).unwrap(), 1);
        for k in 0..=4 {
            assert_eq!(tilde_of(&idx, &grid, idx.n_of(k)).unwrap(), k);
        }
        // t_100 ≈ 5.19 lies past t̃_5 which the index does not cover.
        assert!(matches!(tilde_of(&idx, &grid, 100), Err(GridError::NotCovered { .. })));
    }

    #[test]
    fn horizon_error_names_first_unreachable_k() {
        let grid = build_grid(StepSpec::harmonic(), 10).unwrap(); // t_10 ≈ 2.93
        match quasi_uniform_index(&grid, 5) {
            Err(GridError::Horizon { first_unreachable, .. }) => assert_eq!(first_unreachable, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_horizon_is_reachable() {
        // t_4 = 2.0 exactly; k = 2 resolves with n_(2) = 4.
        let grid = build_grid(StepSpec::constant(0.5), 4).unwrap();
        let idx = quasi_uniform_index(&grid, 2).unwrap();
        assert_eq!(idx.n_of, vec![0, 2, 4]);
    }

    #[test]
    fn blocked_grid_matches_dense() {
        let spec = StepSpec::power(0.75);
        let dense = build_grid(spec, 5000).unwrap();
        let blocked = build_grid_blocked(spec, 5000, 64).unwrap();
        assert!(!blocked.is_dense());
        for n in [0, 1, 63, 64, 65, 128, 129, 4999, 5000] {
            assert_eq!(dense.time(n).to_bits(), blocked.time(n).to_bits());
        }
        for (a, b) in dense.iter().zip(blocked.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(dense.horizon(), blocked.horizon());
        let a = quasi_uniform_index(&dense, 20).unwrap();
        let b = quasi_uniform_index(&blocked, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut acc = CompensatedSum::new();
        let mut naive: f64 = 0.0;
        for _ in 0..10_000_000 {
            acc.add(0.1);
            naive += 0.1;
        }
        assert!((acc.value() - 1_000_000.0).abs() < 1e-9);
        assert!((naive - 1_000_000.0).abs() > 1e-6);
    }
}
