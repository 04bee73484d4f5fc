//! ODE and SDE stepping, transition densities and rollout groups.
//!
//! Denoising runs from `t = 1` down to `t = 0`. With `Δt = t_cur - t_next > 0`
//! the stochastic update is
//!
//! ```text
//! mean   = x - drift(x, t_cur)·Δt
//! std    = σ(t_cur)·sqrt(Δt)
//! x_next = mean + std·ε
//! drift  = v + σ²/(2t)·(x + (1-t)·v)
//! ```
//!
//! which collapses to the Euler ODE step `x - v·Δt` when `σ = 0`. A merged
//! step spanning several grid points uses the same formula with one model
//! evaluation at the top of the block.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::model::VelocityModel;
use crate::rewards::Reward;
use crate::rng;
use crate::schedule::{MergePlan, NoiseScale, TimestepSchedule};

fn check_times(t_cur: f64, t_next: f64) -> Result<()> {
    if !(0.0 <= t_next && t_next < t_cur && t_cur <= 1.0) {
        return Err(Error::invalid(
            "time step",
            alloc::format!("need 0 <= t_next < t_cur <= 1, got {t_cur} -> {t_next}"),
        ));
    }
    Ok(())
}

/// Explicit Euler step of the probability-flow ODE.
pub fn ode_step(
    model: &VelocityModel,
    x: &[f64],
    t_cur: f64,
    t_next: f64,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    check_times(t_cur, t_next)?;
    let v = model.velocity(x, t_cur, c)?;
    let dt = t_cur - t_next;
    Ok(x.iter().zip(&v).map(|(x, v)| x - v * dt).collect())
}

fn drift_from_velocity(noise: &NoiseScale, x: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    let tc = noise.clamp(t);
    let coef = noise.sigma_sq(t) / (2.0 * tc);
    x.iter()
        .zip(v)
        .map(|(x, v)| v + coef * (x + (1.0 - tc) * v))
        .collect()
}

/// SDE drift `v + σ_t²/(2t)·(x + (1-t)·v)`; the correction uses the clamped time.
pub fn sde_drift(
    model: &VelocityModel,
    noise: &NoiseScale,
    x: &[f64],
    t: f64,
    c: Option<usize>,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid("time", "drift needs t in (0, 1]"));
    }
    let v = model.velocity(x, t, c)?;
    Ok(drift_from_velocity(noise, x, &v, t))
}

/// Gaussian moments of the transition `t_cur -> t_next` given the velocity at `(x, t_cur)`.
pub fn transition_moments(
    noise: &NoiseScale,
    x: &[f64],
    v: &[f64],
    t_cur: f64,
    t_next: f64,
) -> (Vec<f64>, f64) {
    let dt = t_cur - t_next;
    let drift = drift_from_velocity(noise, x, v, t_cur);
    let mean = x.iter().zip(&drift).map(|(x, d)| x - d * dt).collect();
    (mean, noise.sigma(t_cur) * libm::sqrt(dt))
}

/// `∂mean/∂v` of [`transition_moments`]: the mean is `α·x - β·v` and this returns `β`.
pub fn mean_velocity_gain(noise: &NoiseScale, t_cur: f64, t_next: f64) -> f64 {
    let tc = noise.clamp(t_cur);
    let coef = noise.sigma_sq(t_cur) / (2.0 * tc);
    (t_cur - t_next) * (1.0 + coef * (1.0 - tc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// One SDE step over `t_m -> t_target`, possibly spanning several grid points.
pub fn merged_sde_step(
    model: &VelocityModel,
    noise: &NoiseScale,
    x: &[f64],
    t_m: f64,
    t_target: f64,
    c: Option<usize>,
    eps: &[f64],
) -> Result<SdeStep> {
    check_times(t_m, t_target)?;
    check_len("noise draw", x.len(), eps.len())?;
    let v = model.velocity(x, t_m, c)?;
    let (mean, std) = transition_moments(noise, x, &v, t_m, t_target);
    let next = mean.iter().zip(eps).map(|(m, e)| m + std * e).collect();
    Ok(SdeStep { next, mean, std })
}

/// Log-density of `y` under `N(mean, std²·I)`.
pub fn transition_log_prob(mean: &[f64], std: f64, y: &[f64]) -> Result<f64> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::invalid("std", "must be finite and > 0"));
    }
    check_len("sample", mean.len(), y.len())?;
    let var = std * std;
    let sq: f64 = y.iter().zip(mean).map(|(y, m)| (y - m) * (y - m)).sum();
    Ok(-0.5 * mean.len() as f64 * libm::log(2.0 * PI * var) - sq / (2.0 * var))
}

/// Stochastic part of one trajectory: grid transitions `(from, to)` run as SDE
/// steps, contiguous and descending from `anchor`. Everything else is ODE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdeBlock {
    pub anchor: usize,
    pub transitions: Vec<(usize, usize)>,
}

impl SdeBlock {
    /// A single merged transition `anchor -> anchor - length`.
    pub fn merged(anchor: usize, length: usize) -> Self {
        Self {
            anchor,
            transitions: vec![(anchor, anchor - length)],
        }
    }

    /// `length` independent one-step SDE transitions starting at `anchor`.
    pub fn consecutive(anchor: usize, length: usize) -> Self {
        Self {
            anchor,
            transitions: (0..length).map(|i| (anchor - i, anchor - i - 1)).collect(),
        }
    }

    /// Grid index where the stochastic part ends.
    pub fn end(&self) -> usize {
        self.transitions.last().map_or(self.anchor, |t| t.1)
    }

    fn validate(&self, steps: usize) -> Result<()> {
        if self.anchor == 0 || self.anchor > steps || self.transitions.is_empty() {
            return Err(Error::IndexOutOfRange {
                what: "anchor",
                index: self.anchor,
                bound: steps,
            });
        }
        let mut k = self.anchor;
        for &(from, to) in &self.transitions {
            if from != k || to >= from {
                return Err(Error::invalid("sde block", "transitions must descend contiguously"));
            }
            k = to;
        }
        Ok(())
    }
}

/// Everything needed to recompute the density of one realized SDE transition.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub from: usize,
    pub to: usize,
    pub t_from: f64,
    pub t_to: f64,
    pub x_from: Vec<f64>,
    pub eps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    /// Realized `x_{t_to}`.
    pub sample: Vec<f64>,
    /// Log-density under the sampling policy; `None` for a deterministic (σ = 0) step.
    pub log_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub anchor: usize,
    /// Visited `(t, x)` pairs from `t_T` down to `t_0`; merged steps skip the
    /// grid points inside the block.
    pub states: Vec<(f64, Vec<f64>)>,
    pub branches: Vec<BranchRecord>,
    pub final_state: Vec<f64>,
    pub reward: Option<f64>,
}

impl Trajectory {
    /// The first (for merged blocks, the only) stochastic transition.
    pub fn branch(&self) -> &BranchRecord {
        &self.branches[0]
    }
}

/// `G` trajectories that share initial noise and ODE prefix down to the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub anchor: usize,
    pub condition: Option<usize>,
    pub initial_noise: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Scores every final state and stores the rewards.
    pub fn score<R: Reward + ?Sized>(&mut self, reward: &R) -> Result<()> {
        let mut rewards = Vec::with_capacity(self.size());
        for traj in &mut self.trajectories {
            let r = reward.reward(&traj.final_state, self.condition)?;
            traj.reward = Some(r);
            rewards.push(r);
        }
        self.rewards = rewards;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceProbe {
    pub mean: f64,
    /// Unbiased sample variance of the reward.
    pub variance: f64,
    /// Standard error of `variance`, from the sample fourth central moment.
    pub variance_std_error: f64,
}

/// Sampling over a fixed grid with a given noise law.
#[derive(Debug, Clone, Copy)]
pub struct Sampler<'a> {
    schedule: &'a TimestepSchedule,
    noise: NoiseScale,
}

impl<'a> Sampler<'a> {
    pub fn new(schedule: &'a TimestepSchedule) -> Self {
        Self {
            schedule,
            noise: schedule.noise(),
        }
    }

    /// Same grid, different noise law (for instance `a = 0` to switch off exploration).
    pub fn with_noise(schedule: &'a TimestepSchedule, noise: NoiseScale) -> Self {
        Self { schedule, noise }
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        self.schedule
    }

    pub fn noise(&self) -> &NoiseScale {
        &self.noise
    }

    /// Unmerged SDE step `t_k -> t_{k-1}`.
    pub fn sde_step(
        &self,
        model: &VelocityModel,
        x: &[f64],
        k: usize,
        c: Option<usize>,
        eps: &[f64],
    ) -> Result<SdeStep> {
        self.merged_step(model, x, k, 1, c, eps)
    }

    /// Merged SDE step `t_k -> t_{k-l}`.
    pub fn merged_step(
        &self,
        model: &VelocityModel,
        x: &[f64],
        k: usize,
        l: usize,
        c: Option<usize>,
        eps: &[f64],
    ) -> Result<SdeStep> {
        if k > self.schedule.steps() || l == 0 || l > k {
            return Err(Error::IndexOutOfRange {
                what: "merged step",
                index: k,
                bound: self.schedule.steps(),
            });
        }
        merged_sde_step(
            model,
            &self.noise,
            x,
            self.schedule.time(k),
            self.schedule.time(k - l),
            c,
            eps,
        )
    }

    /// ODE integration from grid index `from` down to `to`, recording the visited states.
    fn ode_run(
        &self,
        model: &VelocityModel,
        mut x: Vec<f64>,
        from: usize,
        to: usize,
        c: Option<usize>,
        states: &mut Vec<(f64, Vec<f64>)>,
    ) -> Result<Vec<f64>> {
        for k in (to + 1..=from).rev() {
            x = ode_step(model, &x, self.schedule.time(k), self.schedule.time(k - 1), c)?;
            states.push((self.schedule.time(k - 1), x.clone()));
        }
        Ok(x)
    }

    /// Deterministic sample from noise at `t_T`.
    pub fn ode_sample(
        &self,
        model: &VelocityModel,
        initial: &[f64],
        c: Option<usize>,
    ) -> Result<Vec<f64>> {
        let mut x = initial.to_vec();
        for k in (1..=self.schedule.steps()).rev() {
            x = ode_step(model, &x, self.schedule.time(k), self.schedule.time(k - 1), c)?;
        }
        Ok(x)
    }

    /// Group for one anchor of an adaptive or fixed merge plan.
    pub fn rollout_group(
        &self,
        model: &VelocityModel,
        plan: &MergePlan,
        anchor: usize,
        group_size: usize,
        c: Option<usize>,
        seed: u64,
    ) -> Result<RolloutGroup> {
        let block = plan.block(anchor).ok_or(Error::IndexOutOfRange {
            what: "plan anchor",
            index: anchor,
            bound: self.schedule.steps(),
        })?;
        self.rollout_block(
            model,
            &SdeBlock::merged(block.anchor, block.length),
            group_size,
            c,
            seed,
        )
    }

    /// Draws one initial noise, runs the ODE prefix once, then branches `group_size`
    /// times through the SDE block and finishes each branch with ODE steps.
    ///
    /// Randomness: the initial noise comes from stream `(seed, [0])` and branch
    /// `j` draws its `ε`s in transition order from stream `(seed, [1, j])`.
    pub fn rollout_block(
        &self,
        model: &VelocityModel,
        block: &SdeBlock,
        group_size: usize,
        c: Option<usize>,
        seed: u64,
    ) -> Result<RolloutGroup> {
        if group_size < 2 {
            return Err(Error::invalid("group size", "need at least 2 trajectories"));
        }
        block.validate(self.schedule.steps())?;
        let steps = self.schedule.steps();
        let d = model.dim();
        let initial_noise = rng::normal_vec(&mut rng::stream(seed, &[0]), d);
        let mut prefix = vec![(self.schedule.time(steps), initial_noise.clone())];
        let x_anchor = self.ode_run(model, initial_noise.clone(), steps, block.anchor, c, &mut prefix)?;

        let mut trajectories = Vec::with_capacity(group_size);
        for j in 0..group_size {
            let mut rng = rng::stream(seed, &[1, j as u64]);
            let mut states = prefix.clone();
            let mut branches = Vec::with_capacity(block.transitions.len());
            let mut x = x_anchor.clone();
            for &(from, to) in &block.transitions {
                let eps = rng::normal_vec(&mut rng, d);
                let step = self.merged_step(model, &x, from, from - to, c, &eps)?;
                let log_prob = if step.std > 0.0 {
                    Some(transition_log_prob(&step.mean, step.std, &step.next)?)
                } else {
                    None
                };
                states.push((self.schedule.time(to), step.next.clone()));
                branches.push(BranchRecord {
                    from,
                    to,
                    t_from: self.schedule.time(from),
                    t_to: self.schedule.time(to),
                    x_from: x,
                    eps,
                    mean: step.mean,
                    std: step.std,
                    sample: step.next.clone(),
                    log_prob,
                });
                x = step.next;
            }
            let final_state = self.ode_run(model, x, block.end(), 0, c, &mut states)?;
            trajectories.push(Trajectory {
                anchor: block.anchor,
                states,
                branches,
                final_state,
                reward: None,
            });
        }
        Ok(RolloutGroup {
            anchor: block.anchor,
            condition: c,
            initial_noise,
            trajectories,
            rewards: Vec::new(),
            advantages: Vec::new(),
        })
    }

    /// Reward spread caused by a single (possibly merged) SDE step `t_k -> t_{k-l}`
    /// from one shared initial noise, everything else ODE.
    #[allow(clippy::too_many_arguments)]
    pub fn reward_variance_probe<R: Reward + ?Sized>(
        &self,
        model: &VelocityModel,
        reward: &R,
        k: usize,
        l: usize,
        samples: usize,
        c: Option<usize>,
        seed: u64,
    ) -> Result<VarianceProbe> {
        if samples < 2 {
            return Err(Error::invalid("samples", "need at least 2"));
        }
        if k == 0 || k > self.schedule.steps() || l == 0 || l > k {
            return Err(Error::IndexOutOfRange {
                what: "probe step",
                index: k,
                bound: self.schedule.steps(),
            });
        }
        let mut group = self.rollout_block(model, &SdeBlock::merged(k, l), samples, c, seed)?;
        group.score(reward)?;
        Ok(variance_summary(&group.rewards))
    }
}

fn variance_summary(values: &[f64]) -> VarianceProbe {
    let n = values.len() as f64;
    // shift by the first value so identical samples give exactly zero spread
    let shift = values[0];
    let centered_mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let dev = |v: &f64| v - shift - centered_mean;
    let m2 = values.iter().map(|v| dev(v) * dev(v)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| libm::pow(dev(v), 4.0)).sum::<f64>() / n;
    let mean = shift + centered_mean;
    let variance = m2 * n / (n - 1.0);
    VarianceProbe {
        mean,
        variance,
        variance_std_error: libm::sqrt(((m4 - m2 * m2) / n).max(0.0)),
    }
}
