//! Group-normalized advantages, merged-step importance ratios, the clipped
//! surrogate and the on-policy training loop.
//!
//! Every strategy is expressed as a list of [`SdeBlock`]s over the active
//! range. Each block yields one rollout group per iteration; rewards are
//! standardized within the group and every stochastic transition of a
//! trajectory contributes one clipped term with that trajectory's advantage.
//! The surrogate is `(1/H)·Σ_groups (1/G)·Σ_i Σ_transitions min(r·A, clip(r)·A)`
//! with `H` the length of the active range, and it is maximized.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{AdamConfig, AdamState, VelocityModel};
use crate::rewards::Reward;
use crate::rng;
use crate::sampler::{
    mean_velocity_gain, transition_log_prob, transition_moments, BranchRecord, RolloutGroup,
    Sampler, SdeBlock,
};
use crate::schedule::{fixed_merge_plan, plan_merges, ActiveRange, NoiseScale, TimestepSchedule};

/// Reward spread below which a group is treated as degenerate.
pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-8;

/// `(R_i - mean(R)) / max(std_pop(R), eps_std)`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("rewards", "advantages need at least 2 rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { what: "rewards" });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std <= eps_std {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the clipped branch is strictly the minimum (the term has no gradient).
pub fn is_clipped(ratio: f64, advantage: f64, clip: f64) -> bool {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    clipped * advantage < ratio * advantage
}

/// Ratios of one group: `ratios[i]` holds one entry per stochastic transition of trajectory `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRatios {
    pub ratios: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

/// The clipped surrogate averaged over trajectories per group and normalized by `horizon`.
pub fn clipped_surrogate(groups: &[GroupRatios], clip: f64, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be positive"));
    }
    let mut total = 0.0;
    for g in groups {
        if g.ratios.len() != g.advantages.len() || g.ratios.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "ratios vs advantages",
                expected: g.advantages.len(),
                found: g.ratios.len(),
            });
        }
        let sum: f64 = g
            .ratios
            .iter()
            .zip(&g.advantages)
            .flat_map(|(rs, &a)| rs.iter().map(move |&r| clipped_term(r, a, clip)))
            .sum();
        total += sum / g.ratios.len() as f64;
    }
    Ok(total / horizon as f64)
}

fn recompute(
    model: &VelocityModel,
    noise: &NoiseScale,
    branch: &BranchRecord,
    c: Option<usize>,
) -> Result<(f64, crate::model::ForwardRecord, Vec<f64>)> {
    let (v, record) = model.forward(&branch.x_from, branch.t_from, c)?;
    let (mean, std) = transition_moments(noise, &branch.x_from, &v, branch.t_from, branch.t_to);
    let lp = transition_log_prob(&mean, std, &branch.sample)?;
    if !lp.is_finite() {
        return Err(Error::NonFinite {
            what: "transition log-probability",
        });
    }
    Ok((lp, record, mean))
}

/// `log p_θ(sample | x_from)` under `model`.
pub fn branch_log_prob(
    model: &VelocityModel,
    noise: &NoiseScale,
    branch: &BranchRecord,
    c: Option<usize>,
) -> Result<f64> {
    recompute(model, noise, branch, c).map(|(lp, _, _)| lp)
}

/// `p_θ / p_θ_old` at the realized sample, using the stored sampling log-prob.
/// Deterministic transitions (σ = 0) have ratio 1.
pub fn importance_ratio(
    model: &VelocityModel,
    noise: &NoiseScale,
    branch: &BranchRecord,
    c: Option<usize>,
) -> Result<f64> {
    match branch.log_prob {
        None => Ok(1.0),
        Some(old) => {
            let r = libm::exp(branch_log_prob(model, noise, branch, c)? - old);
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite {
                    what: "importance ratio",
                })
            }
        }
    }
}

/// Adds `scale·∇_θ log p_θ(sample | x_from)` to `grad`.
#[allow(clippy::too_many_arguments)]
fn accumulate_log_prob_grad(
    model: &VelocityModel,
    noise: &NoiseScale,
    branch: &BranchRecord,
    record: &crate::model::ForwardRecord,
    mean: &[f64],
    std: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    // log p depends on θ only through mean = α·x - β·v.
    let beta = mean_velocity_gain(noise, branch.t_from, branch.t_to);
    let cot: Vec<f64> = branch
        .sample
        .iter()
        .zip(mean)
        .map(|(y, m)| -scale * beta * (y - m) / (std * std))
        .collect();
    model.backward_into(record, &cot, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Fraction of clipped terms over all stochastic transitions.
    pub clip_fraction: f64,
    /// Per-group `(objective contribution, clip fraction)`.
    pub groups: Vec<(f64, f64)>,
}

/// Surrogate value and its exact gradient with respect to the parameters of `model`
/// for scored groups sampled under the old policy.
pub fn surrogate_with_gradient(
    model: &VelocityModel,
    noise: &NoiseScale,
    groups: &[RolloutGroup],
    clip: f64,
    horizon: usize,
) -> Result<SurrogateEval> {
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be positive"));
    }
    let h = horizon as f64;
    let mut gradient = vec![0.0; model.params().len()];
    let mut objective = 0.0;
    let (mut terms, mut clipped) = (0usize, 0usize);
    let mut per_group = Vec::with_capacity(groups.len());
    for group in groups {
        if group.advantages.len() != group.size() || group.size() == 0 {
            return Err(Error::DimensionMismatch {
                what: "advantages vs trajectories",
                expected: group.size(),
                found: group.advantages.len(),
            });
        }
        let weight = 1.0 / (group.size() as f64 * h);
        let (mut g_obj, mut g_terms, mut g_clipped) = (0.0, 0usize, 0usize);
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            for branch in &traj.branches {
                g_terms += 1;
                let Some(old) = branch.log_prob else {
                    g_obj += adv;
                    continue;
                };
                let (lp, record, mean) = recompute(model, noise, branch, group.condition)?;
                let ratio = libm::exp(lp - old);
                g_obj += clipped_term(ratio, adv, clip);
                if is_clipped(ratio, adv, clip) {
                    g_clipped += 1;
                } else if adv != 0.0 {
                    // d(r·A)/dθ = A·r·∇log p
                    accumulate_log_prob_grad(
                        model,
                        noise,
                        branch,
                        &record,
                        &mean,
                        branch.std,
                        weight * adv * ratio,
                        &mut gradient,
                    )?;
                }
            }
        }
        let contribution = g_obj * weight;
        objective += contribution;
        per_group.push((contribution, g_clipped as f64 / g_terms.max(1) as f64));
        terms += g_terms;
        clipped += g_clipped;
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite {
            what: "surrogate objective",
        });
    }
    Ok(SurrogateEval {
        objective,
        gradient,
        clip_fraction: clipped as f64 / terms.max(1) as f64,
        groups: per_group,
    })
}

/// How stochastic transitions are laid out over the active range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Adaptive entropy-threshold merging; one merged SDE step per group.
    EGrpo,
    /// One group per iteration with every active step stochastic and a shared
    /// terminal advantage.
    UniformSde,
    /// Constant merge length, ignoring the threshold.
    FixedMerge(usize),
    /// Blocks of `l` independent one-step SDE transitions sharing one advantage.
    ConsecutiveSde(usize),
}

/// SDE blocks for `strategy` over `range`. `threshold` is only used by [`Strategy::EGrpo`].
pub fn sde_blocks(
    strategy: Strategy,
    schedule: &TimestepSchedule,
    threshold: f64,
    range: ActiveRange,
) -> Result<Vec<SdeBlock>> {
    range.validate(schedule.steps())?;
    let merged = |plan: crate::schedule::MergePlan| {
        plan.blocks
            .iter()
            .map(|b| SdeBlock::merged(b.anchor, b.length))
            .collect()
    };
    Ok(match strategy {
        Strategy::EGrpo => merged(plan_merges(schedule, threshold, range)?),
        Strategy::FixedMerge(l) => merged(fixed_merge_plan(schedule, l, range)?),
        Strategy::UniformSde => vec![SdeBlock::consecutive(range.high, range.len())],
        Strategy::ConsecutiveSde(l) => {
            if l == 0 {
                return Err(Error::invalid("consecutive length", "must be >= 1"));
            }
            let mut blocks = Vec::new();
            let mut n = range.high;
            while n > range.low {
                let len = l.min(n - range.low);
                blocks.push(SdeBlock::consecutive(n, len));
                n -= len;
            }
            blocks
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub range: ActiveRange,
    pub threshold: f64,
    /// Default `G^(n)`.
    pub group_size: usize,
    /// Per-anchor `(anchor, G)` overrides.
    pub group_size_overrides: Vec<(usize, usize)>,
    pub clip: f64,
    pub advantage_eps: f64,
    pub adam: AdamConfig,
    /// Number of toy condition labels; 0 trains unconditionally.
    pub conditions: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            strategy: Strategy::EGrpo,
            range: ActiveRange::first_half(steps),
            threshold: 2.2,
            group_size: 8,
            group_size_overrides: Vec::new(),
            clip: 0.2,
            advantage_eps: DEFAULT_ADVANTAGE_EPS,
            adam: AdamConfig {
                lr: 3e-4,
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
            conditions: 0,
            seed: 0,
        }
    }

    pub fn group_size_for(&self, anchor: usize) -> usize {
        self.group_size_overrides
            .iter()
            .find(|(a, _)| *a == anchor)
            .map_or(self.group_size, |&(_, g)| g)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        self.range.validate(steps)?;
        if self.group_size < 2 || self.group_size_overrides.iter().any(|&(_, g)| g < 2) {
            return Err(Error::invalid("group_size", "every G must be >= 2"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::invalid("clip", "must lie in (0, 1)"));
        }
        if !(self.advantage_eps > 0.0 && self.advantage_eps.is_finite()) {
            return Err(Error::invalid("advantage_eps", "must be a small positive number"));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::invalid("tau", "must be >= 0"));
        }
        let adam = &self.adam;
        if !(adam.lr > 0.0 && adam.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
            return Err(Error::invalid("betas", "must lie in [0, 1)"));
        }
        if !(adam.weight_decay >= 0.0 && adam.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMetrics {
    pub anchor: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub condition: Option<usize>,
    pub anchors: Vec<AnchorMetrics>,
    pub objective: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl IterationMetrics {
    pub fn mean_reward(&self) -> f64 {
        self.anchors.iter().map(|a| a.mean_reward).sum::<f64>() / self.anchors.len() as f64
    }
}

/// Condition label used at `iteration` (uniform over `0..conditions`).
pub fn iteration_condition(config: &TrainConfig, iteration: usize) -> Option<usize> {
    (config.conditions > 0).then(|| {
        rng::stream(config.seed, &[0xC0D, iteration as u64]).random_range(0..config.conditions)
    })
}

/// Samples and scores one group per block under `old`.
pub fn collect_groups<R: Reward + ?Sized>(
    sampler: &Sampler<'_>,
    old: &VelocityModel,
    blocks: &[SdeBlock],
    reward: &R,
    config: &TrainConfig,
    iteration: usize,
) -> Result<Vec<RolloutGroup>> {
    let c = iteration_condition(config, iteration);
    blocks
        .iter()
        .map(|block| {
            let seed = rng::derive_seed(config.seed, &[iteration as u64, block.anchor as u64]);
            let mut group =
                sampler.rollout_block(old, block, config.group_size_for(block.anchor), c, seed)?;
            group.score(reward)?;
            group.advantages = group_advantages(&group.rewards, config.advantage_eps)?;
            Ok(group)
        })
        .collect()
}

/// One round: sample a group per block under `old`, take a single optimizer step
/// ascending the surrogate, then copy the new parameters into `old`.
#[allow(clippy::too_many_arguments)]
pub fn egrpo_iteration<R: Reward + ?Sized>(
    policy: &mut VelocityModel,
    old: &mut VelocityModel,
    adam: &mut AdamState,
    sampler: &Sampler<'_>,
    blocks: &[SdeBlock],
    reward: &R,
    config: &TrainConfig,
    iteration: usize,
) -> Result<IterationMetrics> {
    let groups = collect_groups(sampler, old, blocks, reward, config, iteration)?;
    let eval = surrogate_with_gradient(
        policy,
        sampler.noise(),
        &groups,
        config.clip,
        config.range.len(),
    )?;
    let grad_norm = libm::sqrt(eval.gradient.iter().map(|g| g * g).sum());
    // ascend: the optimizer minimizes, so hand it the negated gradient
    let descent: Vec<f64> = eval.gradient.iter().map(|g| -g).collect();
    adam.update(policy, &descent)?;
    old.params_mut().copy_from_slice(policy.params());
    let anchors = groups
        .iter()
        .zip(&eval.groups)
        .map(|(g, &(objective, clip_fraction))| AnchorMetrics {
            anchor: g.anchor,
            mean_reward: g.rewards.iter().sum::<f64>() / g.size() as f64,
            objective,
            clip_fraction,
        })
        .collect();
    Ok(IterationMetrics {
        iteration,
        condition: groups.first().and_then(|g| g.condition),
        anchors,
        objective: eval.objective,
        clip_fraction: eval.clip_fraction,
        grad_norm,
    })
}

/// Owns the policy, its old copy and optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    sampler: Sampler<'a>,
    config: TrainConfig,
    blocks: Vec<SdeBlock>,
    policy: VelocityModel,
    old: VelocityModel,
    adam: AdamState,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        schedule: &'a TimestepSchedule,
        model: VelocityModel,
        config: TrainConfig,
    ) -> Result<Self> {
        Self::with_sampler(Sampler::new(schedule), model, config)
    }

    pub fn with_sampler(
        sampler: Sampler<'a>,
        model: VelocityModel,
        config: TrainConfig,
    ) -> Result<Self> {
        let schedule = sampler.schedule();
        config.validate(schedule.steps())?;
        if model.dim() != schedule.dim() {
            return Err(Error::DimensionMismatch {
                what: "model dimension",
                expected: schedule.dim(),
                found: model.dim(),
            });
        }
        if config.conditions > model.conditions() {
            return Err(Error::invalid(
                "conditions",
                "model has fewer condition inputs than the training config",
            ));
        }
        let blocks = sde_blocks(config.strategy, schedule, config.threshold, config.range)?;
        let adam = AdamState::new(model.params().len(), config.adam);
        Ok(Self {
            sampler,
            config,
            blocks,
            old: model.clone(),
            policy: model,
            adam,
            iteration: 0,
        })
    }

    pub fn step<R: Reward + ?Sized>(&mut self, reward: &R) -> Result<IterationMetrics> {
        let metrics = egrpo_iteration(
            &mut self.policy,
            &mut self.old,
            &mut self.adam,
            &self.sampler,
            &self.blocks,
            reward,
            &self.config,
            self.iteration,
        )?;
        self.iteration += 1;
        Ok(metrics)
    }

    pub fn policy(&self) -> &VelocityModel {
        &self.policy
    }

    pub fn into_policy(self) -> VelocityModel {
        self.policy
    }

    pub fn blocks(&self) -> &[SdeBlock] {
        &self.blocks
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sampler(&self) -> &Sampler<'a> {
        &self.sampler
    }
}

/// Mean reward of `samples` ODE samples from fresh noise (stream `(seed, [i])`).
/// Conditions cycle through `0..conditions` when `conditions > 0`.
pub fn evaluate_mean_reward<R: Reward + ?Sized>(
    sampler: &Sampler<'_>,
    model: &VelocityModel,
    reward: &R,
    samples: usize,
    conditions: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::invalid("samples", "must be positive"));
    }
    let mut total = 0.0;
    for i in 0..samples {
        let c = (conditions > 0).then_some(i % conditions.max(1));
        let x = rng::normal_vec(&mut rng::stream(seed, &[i as u64]), model.dim());
        total += reward.reward(&sampler.ode_sample(model, &x, c)?, c)?;
    }
    Ok(total / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        for (x, y) in a.iter().zip([-1.224745, 0.0, 1.224745]) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(group_advantages(&[5.0; 4], 1e-8).unwrap(), [0.0; 4]);
        assert!(group_advantages(&[1.0], 1e-8).is_err());
        assert!(group_advantages(&[1.0, f64::NAN], 1e-8).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_term(1.3, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        let adv = group_advantages(&[0.1, 0.7, -0.3, 2.0], 1e-8).unwrap();
        let g = GroupRatios {
            ratios: vec![vec![1.0]; 4],
            advantages: adv,
        };
        assert!(clipped_surrogate(&[g.clone()], 0.2, 8).unwrap().abs() < 1e-15);
        let bad = GroupRatios {
            ratios: vec![vec![1.0]; 3],
            ..g
        };
        assert!(clipped_surrogate(&[bad], 0.2, 8).is_err());
    }

    #[test]
    fn surrogate_normalization() {
        let g = GroupRatios {
            ratios: vec![vec![1.3], vec![0.5]],
            advantages: vec![1.0, -1.0],
        };
        // (1.2 - 0.8) / 2 / 4
        let j = clipped_surrogate(&[g], 0.2, 4).unwrap();
        assert!((j - 0.05).abs() < 1e-15);
    }

    #[test]
    fn blocks_per_strategy() {
        let sched = TimestepSchedule::new(16, 1.0, 0.7, 2, 1e-4).unwrap();
        let range = ActiveRange::new(8, 16);
        let fixed1 = sde_blocks(Strategy::FixedMerge(1), &sched, 0.0, ActiveRange::full(16)).unwrap();
        let egrpo0 = sde_blocks(Strategy::EGrpo, &sched, 0.0, ActiveRange::full(16)).unwrap();
        assert_eq!(fixed1, egrpo0);
        let cons1 = sde_blocks(Strategy::ConsecutiveSde(1), &sched, 0.0, range).unwrap();
        let fixed1 = sde_blocks(Strategy::FixedMerge(1), &sched, 0.0, range).unwrap();
        assert_eq!(cons1, fixed1);
        let cons4 = sde_blocks(Strategy::ConsecutiveSde(4), &sched, 0.0, range).unwrap();
        assert_eq!(cons4, [SdeBlock::consecutive(16, 4), SdeBlock::consecutive(12, 4)]);
        let uniform = sde_blocks(Strategy::UniformSde, &sched, 0.0, range).unwrap();
        assert_eq!(uniform, [SdeBlock::consecutive(16, 8)]);
        assert!(sde_blocks(Strategy::ConsecutiveSde(0), &sched, 0.0, range).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(16);
        assert!(c.validate(16).is_ok());
        c.clip = 1.0;
        assert!(c.validate(16).is_err());
        let mut c = TrainConfig::new(16);
        c.group_size = 1;
        assert!(c.validate(16).is_err());
        let mut c = TrainConfig::new(16);
        c.group_size_overrides = vec![(16, 1)];
        assert!(c.validate(16).is_err());
        let mut c = TrainConfig::new(16);
        c.range = ActiveRange::new(16, 16);
        assert!(c.validate(16).is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(-100.0f64..100.0, 2..32)) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
                - rewards.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-6);
            let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((std - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn advantages_are_affine_invariant(
            rewards in prop::collection::vec(-10.0f64..10.0, 2..16),
            scale in 0.01f64..100.0,
            shift in -100.0f64..100.0,
        ) {
            let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
                - rewards.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
            let b = group_advantages(&moved, 1e-8).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn clipped_terms_ignore_ratio_beyond_boundary(
            r in 0.0f64..3.0,
            a in -3.0f64..3.0,
            eps in 0.01f64..0.99,
            push in 0.0f64..2.0,
        ) {
            let direct = (r * a).min(r.max(1.0 - eps).min(1.0 + eps) * a);
            prop_assert_eq!(clipped_term(r, a, eps), direct);
            if is_clipped(r, a, eps) {
                // moving the ratio further out keeps the clipped branch active
                let further = if r > 1.0 { r + push } else { (r - push).max(0.0) };
                prop_assert!(is_clipped(further, a, eps) || further == r);
                prop_assert_eq!(clipped_term(further, a, eps), clipped_term(r, a, eps));
            }
        }
    }
}
