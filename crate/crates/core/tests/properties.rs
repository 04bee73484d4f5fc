use egrpo_core::grpo::{self, group_advantages, sde_blocks, surrogate_with_gradient, TrainConfig, Trainer};
use egrpo_core::model::VelocityModel;
use egrpo_core::rewards::RewardSpec;
use egrpo_core::sampler::{merged_sde_step, Sampler, SdeBlock};
use egrpo_core::schedule::{plan_merges, ActiveRange, TimestepSchedule};
use proptest::prelude::*;

fn schedule() -> impl proptest::strategy::Strategy<Value = TimestepSchedule> {
    (2usize..40, 1.0f64..4.0, 0.05f64..2.0, 1usize..8)
        .prop_map(|(t, s, a, d)| TimestepSchedule::new(t, s, a, d, 1e-4).unwrap())
}

fn schedule_and_range() -> impl proptest::strategy::Strategy<Value = (TimestepSchedule, ActiveRange)> {
    schedule().prop_flat_map(|sched| {
        let t = sched.steps();
        (Just(sched), (0..t))
            .prop_flat_map(move |(sched, low)| (Just(sched), Just(low), (low + 1)..=t))
            .prop_map(|(sched, low, high)| (sched, ActiveRange::new(low, high)))
    })
}

proptest! {
    #[test]
    fn grid_is_increasing_with_exact_ends(sched in schedule()) {
        let ts = sched.timesteps();
        prop_assert_eq!(ts[0], 0.0);
        prop_assert_eq!(*ts.last().unwrap(), 1.0);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn plan_tiles_the_range((sched, range) in schedule_and_range(), tau in 0.0f64..20.0) {
        let plan = plan_merges(&sched, tau, range).unwrap();
        let mut n = range.high;
        for (i, b) in plan.blocks.iter().enumerate() {
            prop_assert_eq!(b.anchor, n);
            prop_assert!(b.length >= 1);
            prop_assert!(b.target() >= range.low);
            if b.truncated {
                prop_assert_eq!(i, plan.blocks.len() - 1);
                prop_assert_eq!(b.target(), range.low);
                prop_assert!(b.exp_entropy < tau);
            } else {
                prop_assert!(b.exp_entropy >= tau);
                if b.length > 1 {
                    prop_assert!(sched.merged_exp_entropy(b.anchor, b.length - 1).unwrap() < tau);
                }
            }
            n = b.target();
        }
        prop_assert_eq!(n, range.low);
        for k in &plan.ode_steps {
            prop_assert!(!range.contains(*k));
        }
    }

    #[test]
    fn raising_tau_never_adds_anchors((sched, range) in schedule_and_range(), mut taus in prop::collection::vec(0.0f64..30.0, 2..8)) {
        taus.sort_by(f64::total_cmp);
        let counts: Vec<usize> = taus
            .iter()
            .map(|&tau| plan_merges(&sched, tau, range).unwrap().blocks.len())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{:?} -> {:?}", taus, counts);
    }

    #[test]
    fn merged_step_is_mean_plus_scaled_noise(
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0f64..3.0, 2),
        eps in prop::collection::vec(-3.0f64..3.0, 2),
        m in 1usize..=16,
    ) {
        let sched = TimestepSchedule::new(16, 1.0, 0.7, 2, 1e-4).unwrap();
        let model = VelocityModel::init(2, 0, &[8], seed).unwrap();
        let l = 1 + (seed as usize % m);
        let step = merged_sde_step(&model, &sched.noise(), &x, sched.time(m), sched.time(m - l), None, &eps).unwrap();
        let zero = merged_sde_step(&model, &sched.noise(), &x, sched.time(m), sched.time(m - l), None, &[0.0, 0.0]).unwrap();
        prop_assert_eq!(&zero.next, &zero.mean);
        for i in 0..2 {
            prop_assert!((step.next[i] - step.mean[i] - step.std * eps[i]).abs() <= 1e-12 * (1.0 + step.next[i].abs()));
        }
    }

    #[test]
    fn zero_advantages_give_zero_gradient(seed in 0u64..500) {
        let sched = TimestepSchedule::new(8, 1.0, 0.7, 2, 1e-4).unwrap();
        let sampler = Sampler::new(&sched);
        let model = VelocityModel::init(2, 0, &[6], seed).unwrap();
        let mut group = sampler.rollout_block(&model, &SdeBlock::merged(6, 2), 4, None, seed).unwrap();
        group.score(&RewardSpec::mode_distance(vec![0.0, 0.0])).unwrap();
        group.advantages = vec![0.0; 4];
        let eval = surrogate_with_gradient(&model, sampler.noise(), &[group], 0.2, 4).unwrap();
        prop_assert_eq!(eval.objective, 0.0);
        prop_assert!(eval.gradient.iter().all(|g| *g == 0.0));
    }
}

#[test]
fn rollouts_are_reproducible_and_share_prefix() {
    let sched = TimestepSchedule::new(12, 2.0, 0.7, 2, 1e-4).unwrap();
    let sampler = Sampler::new(&sched);
    let model = VelocityModel::init(2, 0, &[8, 8], 3).unwrap();
    let block = SdeBlock::consecutive(9, 3);
    let a = sampler.rollout_block(&model, &block, 5, None, 11).unwrap();
    let b = sampler.rollout_block(&model, &block, 5, None, 11).unwrap();
    let c = sampler.rollout_block(&model, &block, 5, None, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.initial_noise, c.initial_noise);
    // states 12..9 are the shared ODE prefix
    for t in &a.trajectories {
        assert_eq!(t.states[..4], a.trajectories[0].states[..4]);
        assert_eq!(t.branches.len(), 3);
        assert_eq!(t.states.len(), 13);
    }
    assert_ne!(a.trajectories[0].final_state, a.trajectories[1].final_state);
}

#[test]
fn every_strategy_covers_the_range() {
    let sched = TimestepSchedule::new(16, 1.0, 0.7, 2, 1e-4).unwrap();
    for range in [ActiveRange::first_half(16), ActiveRange::new(0, 8), ActiveRange::new(3, 11)] {
        for strategy in [
            grpo::Strategy::EGrpo,
            grpo::Strategy::UniformSde,
            grpo::Strategy::FixedMerge(3),
            grpo::Strategy::ConsecutiveSde(4),
        ] {
            let blocks = sde_blocks(strategy, &sched, 2.2, range).unwrap();
            let mut k = range.high;
            for b in &blocks {
                for &(from, to) in &b.transitions {
                    assert_eq!(from, k, "{strategy:?} {range:?}");
                    k = to;
                }
            }
            assert_eq!(k, range.low, "{strategy:?} {range:?}");
        }
    }
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let sched = TimestepSchedule::new(8, 1.0, 0.7, 2, 1e-4).unwrap();
    let model = VelocityModel::init(2, 0, &[8], 1).unwrap();
    let reward = RewardSpec::mode_distance(vec![2.0, 0.0]);
    let run = || {
        let mut trainer = Trainer::new(&sched, model.clone(), TrainConfig::new(8)).unwrap();
        let metrics: Vec<_> = (0..3).map(|_| trainer.step(&reward).unwrap()).collect();
        (trainer.into_policy(), metrics)
    };
    let (p1, m1) = run();
    let (p2, m2) = run();
    assert_eq!(p1, p2);
    assert_eq!(m1, m2);
    assert_ne!(p1.params(), model.params());
    for m in &m1 {
        assert!(m.grad_norm.is_finite());
        // on-policy: ratios are 1 at update time, so nothing is clipped
        assert_eq!(m.clip_fraction, 0.0);
    }
}

#[test]
fn advantages_reject_too_small_groups() {
    assert!(group_advantages(&[], 1e-8).is_err());
    assert!(group_advantages(&[1.0], 1e-8).is_err());
}
