//! Plain-text documents for schedules and merge plans.
//!
//! Both use `key = value` header lines followed by a comma-separated table.
//! Floats are written with Rust's shortest round-trip formatting, so parsing a
//! document back yields bit-identical values.

use std::fmt::Write as _;

use egrpo_core::schedule::{ActiveRange, MergeBlock, MergePlan, TimestepSchedule};

use crate::error::{HarnessError, Result};

pub const PLAN_COLUMNS: &str = "anchor,length,target,interval,exp_entropy,truncated";

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

pub fn plan_to_text(plan: &MergePlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "threshold = {:?}", plan.threshold);
    let _ = writeln!(s, "range_low = {}", plan.range.low);
    let _ = writeln!(s, "range_high = {}", plan.range.high);
    let _ = writeln!(s, "ode_steps = {}", join(&plan.ode_steps));
    let _ = writeln!(s, "{PLAN_COLUMNS}");
    for b in &plan.blocks {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?},{}",
            b.anchor,
            b.length,
            b.target(),
            b.interval,
            b.exp_entropy,
            b.truncated
        );
    }
    s
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::config(format!("plan document: {}", msg.into()))
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| bad(format!("cannot parse {v:?}")))
}

pub fn plan_from_text(text: &str) -> Result<MergePlan> {
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad("truncated header"))?;
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok(v.trim().to_string()),
            _ => Err(bad(format!("expected `{key} = ...`, got {line:?}"))),
        }
    };
    let threshold: f64 = num(&header("threshold")?)?;
    let low: usize = num(&header("range_low")?)?;
    let high: usize = num(&header("range_high")?)?;
    let ode = header("ode_steps")?;
    let ode_steps = if ode.is_empty() {
        Vec::new()
    } else {
        ode.split(',').map(num).collect::<Result<Vec<usize>>>()?
    };
    if lines.next() != Some(PLAN_COLUMNS) {
        return Err(bad("missing column header"));
    }
    let mut blocks = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 columns in {line:?}")));
        }
        let block = MergeBlock {
            anchor: num(f[0])?,
            length: num(f[1])?,
            interval: num(f[3])?,
            exp_entropy: num(f[4])?,
            truncated: num(f[5])?,
        };
        if block.length == 0 || block.length > block.anchor || block.target() != num::<usize>(f[2])? {
            return Err(bad(format!("inconsistent block {line:?}")));
        }
        blocks.push(block);
    }
    Ok(MergePlan {
        blocks,
        ode_steps,
        threshold,
        range: ActiveRange::new(low, high),
    })
}

/// Schedule parameters, timesteps and the per-step entropy profile.
pub fn schedule_to_text(schedule: &TimestepSchedule) -> String {
    let noise = schedule.noise();
    let profile = schedule.entropy_profile();
    let mut s = String::new();
    let _ = writeln!(s, "steps = {}", schedule.steps());
    let _ = writeln!(s, "shift = {:?}", schedule.shift());
    let _ = writeln!(s, "noise_scale = {:?}", noise.a());
    let _ = writeln!(s, "dim = {}", schedule.dim());
    let _ = writeln!(s, "clamp_delta = {:?}", noise.delta());
    let _ = writeln!(s, "timesteps = {}", join(schedule.timesteps()));
    let _ = writeln!(s, "entropy = {}", join(&profile.h));
    let _ = writeln!(s, "exp_entropy = {}", join(&profile.exp_entropy));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use egrpo_core::schedule::{fixed_merge_plan, plan_merges};

    #[test]
    fn plan_round_trips() {
        let sched = TimestepSchedule::new(16, 1.0, 0.7, 2, 1e-4).unwrap();
        for plan in [
            plan_merges(&sched, 2.2, ActiveRange::first_half(16)).unwrap(),
            plan_merges(&sched, 0.0, ActiveRange::full(16)).unwrap(),
            fixed_merge_plan(&sched, 6, ActiveRange::first_half(16)).unwrap(),
        ] {
            let text = plan_to_text(&plan);
            assert_eq!(plan_from_text(&text).unwrap(), plan);
        }
    }

    #[test]
    fn rejects_malformed_plans() {
        assert!(plan_from_text("").is_err());
        let sched = TimestepSchedule::new(8, 1.0, 0.7, 2, 1e-4).unwrap();
        let text = plan_to_text(&plan_merges(&sched, 2.2, ActiveRange::first_half(8)).unwrap());
        assert!(plan_from_text(&text.replace("anchor,", "anker,")).is_err());
        let broken = text.replacen(",false", ",maybe", 1).replacen(",true", ",maybe", 1);
        assert!(plan_from_text(&broken).is_err());
    }

    #[test]
    fn schedule_document_lists_every_step() {
        let sched = TimestepSchedule::new(4, 1.0, 0.7, 2, 1e-4).unwrap();
        let text = schedule_to_text(&sched);
        let line = text.lines().find(|l| l.starts_with("timesteps")).unwrap();
        assert_eq!(line, "timesteps = 0.0, 0.25, 0.5, 0.75, 1.0");
    }
}
