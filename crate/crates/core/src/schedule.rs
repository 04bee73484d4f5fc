//! Shifted timestep schedules, closed-form step entropy and merge planning.
//!
//! Grid indices follow the denoising convention: `t_T = 1` is pure noise and
//! `t_0 = 0` is data. Step `k` is the transition `t_k -> t_{k-1}`, so steps are
//! numbered `1..=T`.
//!
//! The quantity compared against the merge threshold is the dimension-free
//! exp-entropy `ê = exp(2h/d) = 2πe · a² · t/(1-t) · Δt`, where `t` is the
//! top of the (possibly merged) step, clamped to `1 - δ`.

use alloc::vec::Vec;
use core::f64::consts::{E, PI};

use crate::error::{Error, Result};

/// `2πe`, the Gaussian entropy constant.
pub const TWO_PI_E: f64 = 2.0 * PI * E;

/// Default upper-time clamp used when evaluating `σ_t`.
pub const DEFAULT_CLAMP_DELTA: f64 = 1e-4;

/// The noise-scale law `σ_t = a·sqrt(t/(1-t))` with the time clamp `t ≤ 1-δ`.
///
/// `a = 0` is allowed here (it turns SDE sampling into ODE sampling); schedules,
/// whose entropy needs `σ > 0`, require `a > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScale {
    a: f64,
    delta: f64,
}

impl NoiseScale {
    pub fn new(a: f64, delta: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::invalid("noise_scale", "a must be finite and >= 0"));
        }
        if !(delta > 0.0 && delta <= 0.01) {
            return Err(Error::invalid("clamp_delta", "delta must lie in (0, 0.01]"));
        }
        Ok(Self { a, delta })
    }

    /// Zero noise: SDE steps degenerate to Euler ODE steps.
    pub fn deterministic(delta: f64) -> Result<Self> {
        Self::new(0.0, delta)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.min(1.0 - self.delta)
    }

    /// `t/(1-t)` evaluated at the clamped time.
    pub fn odds(&self, t: f64) -> f64 {
        let t = self.clamp(t);
        t / (1.0 - t)
    }

    pub fn sigma_sq(&self, t: f64) -> f64 {
        self.a * self.a * self.odds(t)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        libm::sqrt(self.sigma_sq(t))
    }
}

/// The time-shift map `s·u / (1 + (s-1)·u)`.
pub fn shift_time(shift: f64, u: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

/// A discretized, shifted time grid together with its noise law.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    steps: usize,
    shift: f64,
    dim: usize,
    noise: NoiseScale,
    // timesteps[k] = t_k, ascending in k
    timesteps: Vec<f64>,
}

impl TimestepSchedule {
    /// Builds the grid `t_k = shift_time(s, k/T)` for `k = 0..=T`.
    pub fn new(steps: usize, shift: f64, a: f64, dim: usize, delta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("steps", "T must be at least 2"));
        }
        if !(shift.is_finite() && shift >= 1.0) {
            return Err(Error::invalid("shift", "s must be finite and >= 1"));
        }
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::invalid("noise_scale", "a must be finite and > 0"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "d must be positive"));
        }
        let noise = NoiseScale::new(a, delta)?;
        let mut timesteps: Vec<f64> = (0..=steps)
            .map(|k| shift_time(shift, k as f64 / steps as f64))
            .collect();
        timesteps[0] = 0.0;
        timesteps[steps] = 1.0;
        Ok(Self {
            steps,
            shift,
            dim,
            noise,
            timesteps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise(&self) -> NoiseScale {
        self.noise
    }

    /// `t_k`; panics if `k > T`.
    pub fn time(&self, k: usize) -> f64 {
        self.timesteps[k]
    }

    /// All grid times `t_0, ..., t_T` in ascending order.
    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(Error::IndexOutOfRange {
                what: "step",
                index: k,
                bound: self.steps,
            });
        }
        Ok(())
    }

    /// Entropy of the one-step Gaussian transition `t_k -> t_{k-1}`.
    pub fn step_entropy(&self, k: usize) -> Result<StepEntropy> {
        self.check_step(k)?;
        let exp_entropy = self.exp_entropy_unchecked(k, 1);
        Ok(StepEntropy {
            h: 0.5 * self.dim as f64 * libm::log(exp_entropy),
            exp_entropy,
        })
    }

    /// `ê(m, l)`: exp-entropy of one SDE step spanning `t_m -> t_{m-l}`.
    pub fn merged_exp_entropy(&self, m: usize, l: usize) -> Result<f64> {
        self.check_step(m)?;
        if l == 0 || l > m {
            return Err(Error::IndexOutOfRange {
                what: "merge length",
                index: l,
                bound: m,
            });
        }
        Ok(self.exp_entropy_unchecked(m, l))
    }

    fn exp_entropy_unchecked(&self, m: usize, l: usize) -> f64 {
        let a = self.noise.a();
        let dt = self.timesteps[m] - self.timesteps[m - l];
        TWO_PI_E * a * a * self.noise.odds(self.timesteps[m]) * dt
    }

    /// Entropy of every step `1..=T`.
    pub fn entropy_profile(&self) -> EntropyProfile {
        let (h, exp_entropy) = (1..=self.steps)
            .map(|k| {
                let e = self.exp_entropy_unchecked(k, 1);
                (0.5 * self.dim as f64 * libm::log(e), e)
            })
            .unzip();
        EntropyProfile { h, exp_entropy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEntropy {
    /// Differential entropy in nats.
    pub h: f64,
    /// `exp(2h/d)`.
    pub exp_entropy: f64,
}

/// Per-step entropies; index `i` holds step `k = i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub h: Vec<f64>,
    pub exp_entropy: Vec<f64>,
}

impl EntropyProfile {
    pub fn step(&self, k: usize) -> StepEntropy {
        StepEntropy {
            h: self.h[k - 1],
            exp_entropy: self.exp_entropy[k - 1],
        }
    }
}

/// Steps `low+1 ..= high` are trained; anchors live in `(low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActiveRange {
    pub low: usize,
    pub high: usize,
}

impl ActiveRange {
    pub fn new(low: usize, high: usize) -> Self {
        Self { low, high }
    }

    /// The first half of the denoising trajectory, `(T/2, T]`.
    pub fn first_half(steps: usize) -> Self {
        Self::new(steps / 2, steps)
    }

    pub fn full(steps: usize) -> Self {
        Self::new(0, steps)
    }

    /// Number of trained steps, `high - low`.
    pub fn len(&self) -> usize {
        self.high.saturating_sub(self.low)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, k: usize) -> bool {
        k > self.low && k <= self.high
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.high > steps {
            return Err(Error::IndexOutOfRange {
                what: "active range top",
                index: self.high,
                bound: steps,
            });
        }
        if self.is_empty() {
            return Err(Error::invalid("active_range", "range is empty (low >= high)"));
        }
        Ok(())
    }
}

/// One merged SDE block: a single stochastic transition `t_n -> t_{n-l}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeBlock {
    pub anchor: usize,
    pub length: usize,
    /// `t_n - t_{n-l}`.
    pub interval: f64,
    /// `ê(n, l)`.
    pub exp_entropy: f64,
    /// The block hit the bottom of the active range before reaching the threshold
    /// (or, for fixed-length plans, before reaching the requested length).
    pub truncated: bool,
}

impl MergeBlock {
    /// Grid index the block lands on, `n - l`.
    pub fn target(&self) -> usize {
        self.anchor - self.length
    }
}

/// Partition of the active range into merged SDE blocks; everything else runs as ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    /// Blocks ordered from the highest anchor down.
    pub blocks: Vec<MergeBlock>,
    /// Steps outside the active range, ascending.
    pub ode_steps: Vec<usize>,
    /// Threshold used to build the plan (`+inf` for fixed-length plans).
    pub threshold: f64,
    pub range: ActiveRange,
}

impl MergePlan {
    pub fn block(&self, anchor: usize) -> Option<&MergeBlock> {
        self.blocks.iter().find(|b| b.anchor == anchor)
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().map(|b| b.anchor)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.length).collect()
    }
}

fn ode_steps_outside(steps: usize, range: ActiveRange) -> Vec<usize> {
    (1..=steps).filter(|&k| !range.contains(k)).collect()
}

/// Greedy adaptive planner.
///
/// Starting at the top of the range, each anchor takes the smallest merge
/// length whose exp-entropy reaches `threshold`; the next anchor is where the
/// block ends. A block that would cross the bottom of the range is cut there
/// and flagged as truncated.
pub fn plan_merges(
    schedule: &TimestepSchedule,
    threshold: f64,
    range: ActiveRange,
) -> Result<MergePlan> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid("tau", "threshold must be >= 0"));
    }
    range.validate(schedule.steps())?;
    let mut blocks = Vec::new();
    let mut n = range.high;
    while n > range.low {
        let max_len = n - range.low;
        let mut l = 1;
        let mut e = schedule.exp_entropy_unchecked(n, l);
        while e < threshold && l < max_len {
            l += 1;
            e = schedule.exp_entropy_unchecked(n, l);
        }
        blocks.push(MergeBlock {
            anchor: n,
            length: l,
            interval: schedule.time(n) - schedule.time(n - l),
            exp_entropy: e,
            truncated: e < threshold,
        });
        n -= l;
    }
    Ok(MergePlan {
        blocks,
        ode_steps: ode_steps_outside(schedule.steps(), range),
        threshold,
        range,
    })
}

/// Plan with the same merge length `length` at every anchor, ignoring entropy.
pub fn fixed_merge_plan(
    schedule: &TimestepSchedule,
    length: usize,
    range: ActiveRange,
) -> Result<MergePlan> {
    if length == 0 {
        return Err(Error::invalid("merge length", "must be >= 1"));
    }
    range.validate(schedule.steps())?;
    let mut blocks = Vec::new();
    let mut n = range.high;
    while n > range.low {
        let l = length.min(n - range.low);
        blocks.push(MergeBlock {
            anchor: n,
            length: l,
            interval: schedule.time(n) - schedule.time(n - l),
            exp_entropy: schedule.exp_entropy_unchecked(n, l),
            truncated: l < length,
        });
        n -= l;
    }
    Ok(MergePlan {
        blocks,
        ode_steps: ode_steps_outside(schedule.steps(), range),
        threshold: f64::INFINITY,
        range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn uniform16() -> TimestepSchedule {
        TimestepSchedule::new(16, 1.0, 0.7, 2, DEFAULT_CLAMP_DELTA).unwrap()
    }

    #[test]
    fn build_rejects_bad_parameters() {
        assert!(TimestepSchedule::new(1, 1.0, 0.7, 2, 1e-4).is_err());
        assert!(TimestepSchedule::new(16, 0.5, 0.7, 2, 1e-4).is_err());
        assert!(TimestepSchedule::new(16, 1.0, 0.0, 2, 1e-4).is_err());
        assert!(TimestepSchedule::new(16, 1.0, -1.0, 2, 1e-4).is_err());
        assert!(TimestepSchedule::new(16, 1.0, 0.7, 0, 1e-4).is_err());
        assert!(TimestepSchedule::new(16, 1.0, 0.7, 2, 0.0).is_err());
        assert!(TimestepSchedule::new(16, 1.0, 0.7, 2, 0.02).is_err());
        assert!(TimestepSchedule::new(16, 1.0, 0.7, 2, 0.01).is_ok());
    }

    #[test]
    fn grid_examples() {
        assert_eq!(uniform16().time(8), 0.5);
        let shifted = TimestepSchedule::new(16, 3.0, 0.7, 2, 1e-4).unwrap();
        assert!((shifted.time(8) - 0.75).abs() < 1e-15);
        for s in [1.0, 1.7, 3.0, 9.5] {
            let sched = TimestepSchedule::new(16, s, 0.7, 2, 1e-4).unwrap();
            assert_eq!(sched.time(16), 1.0);
            assert_eq!(sched.time(0), 0.0);
            assert!(sched.timesteps().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn step_entropy_examples() {
        let sched = uniform16();
        let e = sched.step_entropy(8).unwrap();
        assert!((e.exp_entropy - 0.5231).abs() < 1e-4, "{}", e.exp_entropy);
        assert!((e.h - (-0.648)).abs() < 1e-3, "{}", e.h);
        let first = sched.step_entropy(1).unwrap();
        let expected = TWO_PI_E * 0.49 * (1.0 / 15.0) * (1.0 / 16.0);
        assert!((first.exp_entropy - expected).abs() < 1e-15);
        assert_eq!(sched.step_entropy(5), sched.step_entropy(5));
        assert!(sched.step_entropy(0).is_err());
        assert!(sched.step_entropy(17).is_err());
    }

    #[test]
    fn top_step_uses_clamped_time() {
        let sched = uniform16();
        let e = sched.step_entropy(16).unwrap().exp_entropy;
        let odds = (1.0 - 1e-4) / 1e-4;
        assert!((e - TWO_PI_E * 0.49 * odds / 16.0).abs() < 1e-9 * e);
    }

    #[test]
    fn merged_entropy_examples() {
        let sched = uniform16();
        assert_eq!(
            sched.merged_exp_entropy(8, 1).unwrap(),
            sched.step_entropy(8).unwrap().exp_entropy
        );
        let m = sched.merged_exp_entropy(8, 2).unwrap();
        assert!((m - 1.0461).abs() < 1e-4, "{m}");
        assert!(sched.merged_exp_entropy(8, 9).is_err());
        assert!(sched.merged_exp_entropy(17, 1).is_err());
        assert!(sched.merged_exp_entropy(8, 0).is_err());
    }

    #[test]
    fn zero_threshold_gives_unit_blocks() {
        let sched = uniform16();
        let plan = plan_merges(&sched, 0.0, ActiveRange::new(8, 16)).unwrap();
        assert_eq!(plan.anchors().collect::<Vec<_>>(), (9..=16).rev().collect::<Vec<_>>());
        assert!(plan.blocks.iter().all(|b| b.length == 1 && !b.truncated));
    }

    #[test]
    fn infinite_threshold_gives_one_truncated_block() {
        let sched = uniform16();
        let plan = plan_merges(&sched, f64::INFINITY, ActiveRange::new(3, 14)).unwrap();
        assert_eq!(plan.blocks.len(), 1);
        assert_eq!(plan.blocks[0].anchor, 14);
        assert_eq!(plan.blocks[0].length, 11);
        assert!(plan.blocks[0].truncated);
    }

    #[test]
    fn default_plan_on_uniform_grid() {
        // ê_k = 2πe·0.49/16 · k/(16-k): 13 is the last single step above 2.2,
        // 12 needs two steps, and 10 runs into the range floor.
        let plan = plan_merges(&uniform16(), 2.2, ActiveRange::new(8, 16)).unwrap();
        let got: Vec<_> = plan.blocks.iter().map(|b| (b.anchor, b.length, b.truncated)).collect();
        assert_eq!(
            got,
            [
                (16, 1, false),
                (15, 1, false),
                (14, 1, false),
                (13, 1, false),
                (12, 2, false),
                (10, 2, true)
            ]
        );
    }

    #[test]
    fn plan_errors() {
        let sched = uniform16();
        assert!(plan_merges(&sched, 1.0, ActiveRange::new(8, 8)).is_err());
        assert!(plan_merges(&sched, 1.0, ActiveRange::new(8, 17)).is_err());
        assert!(plan_merges(&sched, -1.0, ActiveRange::new(8, 16)).is_err());
        assert!(fixed_merge_plan(&sched, 0, ActiveRange::new(8, 16)).is_err());
    }

    #[test]
    fn plan_covers_every_step_once() {
        let sched = TimestepSchedule::new(20, 2.5, 0.9, 3, 1e-3).unwrap();
        for tau in [0.0, 0.3, 1.0, 2.2, 10.0] {
            let plan = plan_merges(&sched, tau, ActiveRange::new(4, 17)).unwrap();
            let mut seen = BTreeSet::new();
            for b in &plan.blocks {
                for k in b.target() + 1..=b.anchor {
                    assert!(seen.insert(k));
                }
            }
            for &k in &plan.ode_steps {
                assert!(seen.insert(k));
            }
            assert_eq!(seen, (1..=20).collect());
        }
    }

    #[test]
    fn fixed_merge_of_one_matches_zero_threshold() {
        let sched = uniform16();
        let range = ActiveRange::full(16);
        let fixed = fixed_merge_plan(&sched, 1, range).unwrap();
        let adaptive = plan_merges(&sched, 0.0, range).unwrap();
        assert_eq!(fixed.blocks, adaptive.blocks);
        let six = fixed_merge_plan(&sched, 6, ActiveRange::new(8, 16)).unwrap();
        assert_eq!(six.lengths(), [6, 2]);
        assert!(six.blocks[1].truncated);
    }
}
