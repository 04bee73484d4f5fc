//! Experiment configuration.
//!
//! The file format is flat `key = value` text:
//!
//! ```text
//! # comment
//! schedule.steps = 16
//! reward.target = 2.0, 0.0    # trailing comments are allowed
//! ```
//!
//! Keys are dotted lowercase identifiers (`[a-z0-9_]+` segments joined by
//! `.`). Values run to the end of the line or to a ` #` comment and are
//! trimmed. Lists are comma separated; lists of vectors separate vectors with
//! `;`. Booleans are `true`/`false`. Every key is optional, unknown or repeated
//! keys are errors.
//!
//! The toy defaults differ from large-backbone settings (lr 2e-6, weight decay
//! 1e-4, batch 1) because they are tuned for a 4.5k-parameter model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use egrpo_core::grpo::{Strategy, TrainConfig, DEFAULT_ADVANTAGE_EPS};
use egrpo_core::model::{AdamConfig, MixtureSpec, PretrainConfig};
use egrpo_core::rewards::RewardSpec;
use egrpo_core::schedule::{ActiveRange, NoiseScale, TimestepSchedule, DEFAULT_CLAMP_DELTA};

use crate::error::{HarnessError, Result};

/// Environment variable that, when set, prefixes relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "EGRPO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    ModeDistance,
    Region,
    Composite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub wall_time: bool,

    pub steps: usize,
    pub shift: f64,
    pub noise_scale: f64,
    pub dim: usize,
    pub clamp_delta: f64,

    pub tau: f64,
    pub range_low: Option<usize>,
    pub range_high: Option<usize>,

    pub mode_offset: f64,
    pub mode_std: f64,
    pub data_points: usize,
    pub conditional: bool,

    pub hidden: Vec<usize>,

    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,

    pub strategy: Strategy,
    pub iterations: usize,
    pub group_size: usize,
    pub clip: f64,
    pub advantage_eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Sampling noise scale during training; defaults to `noise_scale`.
    pub train_noise_scale: Option<f64>,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub checkpoint_interval: usize,

    pub reward_kind: RewardKind,
    pub reward_targets: Vec<Vec<f64>>,
    pub region_center: Vec<f64>,
    pub region_radius: f64,
    pub region_smoothness: f64,
    pub weight_mode_distance: f64,
    pub weight_region: f64,

    pub ablate_seeds: usize,
    pub tau_grid: Vec<f64>,

    pub probe_steps: Option<Vec<usize>>,
    pub probe_merge: usize,
    pub probe_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            wall_time: false,
            steps: 16,
            shift: 1.0,
            noise_scale: 0.7,
            dim: 2,
            clamp_delta: DEFAULT_CLAMP_DELTA,
            tau: 2.2,
            range_low: None,
            range_high: None,
            mode_offset: 2.0,
            mode_std: 0.3,
            data_points: 4096,
            conditional: false,
            hidden: vec![64, 64],
            pretrain_iterations: 5000,
            pretrain_batch: 256,
            pretrain_lr: 1e-3,
            pretrain_weight_decay: 0.0,
            strategy: Strategy::EGrpo,
            iterations: 300,
            group_size: 8,
            clip: 0.2,
            advantage_eps: DEFAULT_ADVANTAGE_EPS,
            lr: 3e-4,
            weight_decay: 1e-4,
            train_noise_scale: None,
            eval_interval: 10,
            eval_samples: 512,
            eval_seed: 12345,
            checkpoint_interval: 0,
            reward_kind: RewardKind::ModeDistance,
            reward_targets: vec![vec![2.0, 0.0]],
            region_center: vec![2.0, 0.0],
            region_radius: 0.5,
            region_smoothness: 0.1,
            weight_mode_distance: 0.5,
            weight_region: 0.5,
            ablate_seeds: 3,
            tau_grid: vec![0.0, 1.8, 2.0, 2.2, 2.6],
            probe_steps: None,
            probe_merge: 1,
            probe_samples: 1000,
        }
    }
}

fn field_err(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::config(format!("{key}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| field_err(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(field_err(key, format!("expected true or false, got {v:?}"))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

pub fn parse_strategy(v: &str) -> Result<Strategy> {
    let key = "train.strategy";
    let (name, arg) = match v.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (v, None),
    };
    let len = |arg: Option<&str>| -> Result<usize> {
        let l: usize = parse_num(key, arg.ok_or_else(|| field_err(key, "missing length"))?)?;
        if l == 0 {
            return Err(field_err(key, "length must be >= 1"));
        }
        Ok(l)
    };
    match (name, arg) {
        ("egrpo", None) => Ok(Strategy::EGrpo),
        ("uniform_sde", None) => Ok(Strategy::UniformSde),
        ("fixed_merge", a) => Ok(Strategy::FixedMerge(len(a)?)),
        ("consecutive_sde", a) => Ok(Strategy::ConsecutiveSde(len(a)?)),
        _ => Err(field_err(
            key,
            format!(
                "unknown strategy {v:?} (egrpo, uniform_sde, fixed_merge:<k>, consecutive_sde:<l>)"
            ),
        )),
    }
}

pub fn strategy_name(s: Strategy) -> String {
    match s {
        Strategy::EGrpo => "egrpo".into(),
        Strategy::UniformSde => "uniform_sde".into(),
        Strategy::FixedMerge(k) => format!("fixed_merge:{k}"),
        Strategy::ConsecutiveSde(l) => format!("consecutive_sde:{l}"),
    }
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Parses the flat key/value grammar into an ordered map.
pub fn parse_document(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = match raw.find(" #").or_else(|| raw.trim_start().starts_with('#').then_some(0)) {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::config(format!("line {}: expected `key = value`", no + 1)))?;
        let key = key.trim();
        let valid = !key.is_empty()
            && key.split('.').all(|seg| {
                !seg.is_empty()
                    && seg
                        .chars()
                        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            });
        if !valid {
            return Err(HarnessError::config(format!(
                "line {}: invalid key {key:?}",
                no + 1
            )));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(HarnessError::config(format!(
                "line {}: duplicate key {key}",
                no + 1
            )));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_document(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Does not re-validate; call [`Self::validate`] afterwards.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.wall_time" => self.wall_time = parse_bool(key, v)?,
            "schedule.steps" => self.steps = parse_num(key, v)?,
            "schedule.shift" => self.shift = parse_num(key, v)?,
            "schedule.noise_scale" => self.noise_scale = parse_num(key, v)?,
            "schedule.dim" => self.dim = parse_num(key, v)?,
            "schedule.clamp_delta" => self.clamp_delta = parse_num(key, v)?,
            "merge.tau" => self.tau = parse_num(key, v)?,
            "merge.range_low" => self.range_low = parse_opt(key, v)?,
            "merge.range_high" => self.range_high = parse_opt(key, v)?,
            "data.mode_offset" => self.mode_offset = parse_num(key, v)?,
            "data.mode_std" => self.mode_std = parse_num(key, v)?,
            "data.points" => self.data_points = parse_num(key, v)?,
            "data.conditional" => self.conditional = parse_bool(key, v)?,
            "model.hidden" => self.hidden = parse_list(key, v)?,
            "pretrain.iterations" => self.pretrain_iterations = parse_num(key, v)?,
            "pretrain.batch" => self.pretrain_batch = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain_lr = parse_num(key, v)?,
            "pretrain.weight_decay" => self.pretrain_weight_decay = parse_num(key, v)?,
            "train.strategy" => self.strategy = parse_strategy(v)?,
            "train.iterations" => self.iterations = parse_num(key, v)?,
            "train.group_size" => self.group_size = parse_num(key, v)?,
            "train.clip" => self.clip = parse_num(key, v)?,
            "train.advantage_eps" => self.advantage_eps = parse_num(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, v)?,
            "train.noise_scale" => self.train_noise_scale = parse_opt(key, v)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, v)?,
            "train.eval_samples" => self.eval_samples = parse_num(key, v)?,
            "train.eval_seed" => self.eval_seed = parse_num(key, v)?,
            "train.checkpoint_interval" => self.checkpoint_interval = parse_num(key, v)?,
            "reward.kind" => {
                self.reward_kind = match v {
                    "mode_distance" => RewardKind::ModeDistance,
                    "region" => RewardKind::Region,
                    "composite" => RewardKind::Composite,
                    _ => {
                        return Err(field_err(
                            key,
                            format!("unknown reward {v:?} (mode_distance, region, composite)"),
                        ))
                    }
                }
            }
            "reward.target" => self.reward_targets = vec![parse_list(key, v)?],
            "reward.targets" => {
                self.reward_targets = v
                    .split(';')
                    .map(|part| parse_list(key, part))
                    .collect::<Result<_>>()?
            }
            "reward.region.center" => self.region_center = parse_list(key, v)?,
            "reward.region.radius" => self.region_radius = parse_num(key, v)?,
            "reward.region.smoothness" => self.region_smoothness = parse_num(key, v)?,
            "reward.weight.mode_distance" => self.weight_mode_distance = parse_num(key, v)?,
            "reward.weight.region" => self.weight_region = parse_num(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_num(key, v)?,
            "ablate.tau_grid" => self.tau_grid = parse_list(key, v)?,
            "probe.steps" => {
                self.probe_steps = if v == "auto" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "probe.merge" => self.probe_merge = parse_num(key, v)?,
            "probe.samples" => self.probe_samples = parse_num(key, v)?,
            _ => return Err(HarnessError::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks every field before anything runs. Messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(field_err(key, msg))
            }
        };
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        check(self.steps >= 2, "schedule.steps", "must be >= 2")?;
        check(self.shift.is_finite() && self.shift >= 1.0, "schedule.shift", "must be finite and >= 1")?;
        check(finite_pos(self.noise_scale), "schedule.noise_scale", "must be finite and > 0")?;
        check(self.dim >= 1, "schedule.dim", "must be >= 1")?;
        check(
            self.clamp_delta > 0.0 && self.clamp_delta <= 0.01,
            "schedule.clamp_delta",
            "must lie in (0, 0.01]",
        )?;
        check(self.tau.is_finite() && self.tau >= 0.0, "merge.tau", "must be finite and >= 0")?;
        let range = self.range();
        check(range.high <= self.steps, "merge.range_high", "must be <= schedule.steps")?;
        check(range.low < range.high, "merge.range_low", "must be < merge.range_high")?;
        check(self.mode_offset.is_finite(), "data.mode_offset", "must be finite")?;
        check(self.mode_std.is_finite() && self.mode_std >= 0.0, "data.mode_std", "must be finite and >= 0")?;
        check(self.data_points >= 1, "data.points", "must be >= 1")?;
        check(self.hidden.iter().all(|&h| h > 0), "model.hidden", "widths must be positive")?;
        check(self.pretrain_batch >= 1, "pretrain.batch", "must be >= 1")?;
        check(finite_pos(self.pretrain_lr), "pretrain.lr", "must be finite and > 0")?;
        check(
            self.pretrain_weight_decay.is_finite() && self.pretrain_weight_decay >= 0.0,
            "pretrain.weight_decay",
            "must be finite and >= 0",
        )?;
        check(self.group_size >= 2, "train.group_size", "must be >= 2")?;
        check(self.clip > 0.0 && self.clip < 1.0, "train.clip", "must lie in (0, 1)")?;
        check(finite_pos(self.advantage_eps), "train.advantage_eps", "must be finite and > 0")?;
        check(finite_pos(self.lr), "train.lr", "must be finite and > 0")?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "train.weight_decay",
            "must be finite and >= 0",
        )?;
        if let Some(a) = self.train_noise_scale {
            check(a.is_finite() && a >= 0.0, "train.noise_scale", "must be finite and >= 0")?;
        }
        check(self.eval_samples >= 1, "train.eval_samples", "must be >= 1")?;
        self.reward_spec()
            .validate(self.dim)
            .map_err(|e| field_err("reward", e))?;
        if self.conditional {
            check(
                self.reward_targets.len() == 2 || self.reward_targets.len() == 1,
                "reward.targets",
                "conditional runs need one target per mode (2) or a shared target",
            )?;
        } else {
            check(self.reward_targets.len() == 1, "reward.targets", "unconditional runs take one target")?;
        }
        check(self.ablate_seeds >= 1, "ablate.seeds", "must be >= 1")?;
        check(
            self.tau_grid.iter().all(|t| t.is_finite() && *t >= 0.0),
            "ablate.tau_grid",
            "values must be finite and >= 0",
        )?;
        if let Some(steps) = &self.probe_steps {
            check(
                steps.iter().all(|&k| k >= 1 && k <= self.steps),
                "probe.steps",
                "steps must lie in 1..=schedule.steps",
            )?;
            check(
                steps.iter().all(|&k| self.probe_merge <= k),
                "probe.merge",
                "merge length must not exceed any probed step",
            )?;
        }
        check(self.probe_merge >= 1, "probe.merge", "must be >= 1")?;
        check(self.probe_samples >= 2, "probe.samples", "must be >= 2")?;
        Ok(())
    }

    pub fn range(&self) -> ActiveRange {
        let high = self.range_high.unwrap_or(self.steps);
        ActiveRange::new(self.range_low.unwrap_or(self.steps / 2), high)
    }

    pub fn schedule(&self) -> Result<TimestepSchedule> {
        Ok(TimestepSchedule::new(
            self.steps,
            self.shift,
            self.noise_scale,
            self.dim,
            self.clamp_delta,
        )?)
    }

    /// Noise law used while sampling training rollouts.
    pub fn train_noise(&self) -> Result<NoiseScale> {
        Ok(NoiseScale::new(
            self.train_noise_scale.unwrap_or(self.noise_scale),
            self.clamp_delta,
        )?)
    }

    pub fn conditions(&self) -> usize {
        if self.conditional {
            2
        } else {
            0
        }
    }

    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec::two_mode(self.dim, self.mode_offset, self.mode_std)
    }

    pub fn reward_spec(&self) -> RewardSpec {
        let mode = RewardSpec::ModeDistance {
            targets: self.reward_targets.clone(),
        };
        let region = RewardSpec::region(
            self.region_center.clone(),
            self.region_radius,
            self.region_smoothness,
        );
        match self.reward_kind {
            RewardKind::ModeDistance => mode,
            RewardKind::Region => region,
            RewardKind::Composite => RewardSpec::Composite(vec![
                (mode, self.weight_mode_distance),
                (region, self.weight_region),
            ]),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            batch: self.pretrain_batch,
            adam: AdamConfig {
                lr: self.pretrain_lr,
                weight_decay: self.pretrain_weight_decay,
                ..AdamConfig::default()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.steps);
        cfg.strategy = self.strategy;
        cfg.range = self.range();
        cfg.threshold = self.tau;
        cfg.group_size = self.group_size;
        cfg.clip = self.clip;
        cfg.advantage_eps = self.advantage_eps;
        cfg.adam = AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        };
        cfg.conditions = self.conditions();
        cfg.seed = self.seed;
        cfg
    }

    /// Output directory, prefixed by `$EGRPO_OUTPUT_ROOT` when it is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Full resolved snapshot in the config grammar; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv("output.wall_time", self.wall_time.to_string());
        kv("schedule.steps", self.steps.to_string());
        kv("schedule.shift", format!("{:?}", self.shift));
        kv("schedule.noise_scale", format!("{:?}", self.noise_scale));
        kv("schedule.dim", self.dim.to_string());
        kv("schedule.clamp_delta", format!("{:?}", self.clamp_delta));
        kv("merge.tau", format!("{:?}", self.tau));
        kv("merge.range_low", opt(self.range_low));
        kv("merge.range_high", opt(self.range_high));
        kv("data.mode_offset", format!("{:?}", self.mode_offset));
        kv("data.mode_std", format!("{:?}", self.mode_std));
        kv("data.points", self.data_points.to_string());
        kv("data.conditional", self.conditional.to_string());
        kv("model.hidden", fmt_list(&self.hidden));
        kv("pretrain.iterations", self.pretrain_iterations.to_string());
        kv("pretrain.batch", self.pretrain_batch.to_string());
        kv("pretrain.lr", format!("{:?}", self.pretrain_lr));
        kv("pretrain.weight_decay", format!("{:?}", self.pretrain_weight_decay));
        kv("train.strategy", strategy_name(self.strategy));
        kv("train.iterations", self.iterations.to_string());
        kv("train.group_size", self.group_size.to_string());
        kv("train.clip", format!("{:?}", self.clip));
        kv("train.advantage_eps", format!("{:?}", self.advantage_eps));
        kv("train.lr", format!("{:?}", self.lr));
        kv("train.weight_decay", format!("{:?}", self.weight_decay));
        kv(
            "train.noise_scale",
            self.train_noise_scale
                .map_or("auto".to_string(), |a| format!("{a:?}")),
        );
        kv("train.eval_interval", self.eval_interval.to_string());
        kv("train.eval_samples", self.eval_samples.to_string());
        kv("train.eval_seed", self.eval_seed.to_string());
        kv("train.checkpoint_interval", self.checkpoint_interval.to_string());
        kv(
            "reward.kind",
            match self.reward_kind {
                RewardKind::ModeDistance => "mode_distance",
                RewardKind::Region => "region",
                RewardKind::Composite => "composite",
            }
            .to_string(),
        );
        kv(
            "reward.targets",
            self.reward_targets
                .iter()
                .map(|t| fmt_list(&t.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
                .join("; "),
        );
        kv(
            "reward.region.center",
            fmt_list(&self.region_center.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()),
        );
        kv("reward.region.radius", format!("{:?}", self.region_radius));
        kv("reward.region.smoothness", format!("{:?}", self.region_smoothness));
        kv("reward.weight.mode_distance", format!("{:?}", self.weight_mode_distance));
        kv("reward.weight.region", format!("{:?}", self.weight_region));
        kv("ablate.seeds", self.ablate_seeds.to_string());
        kv(
            "ablate.tau_grid",
            fmt_list(&self.tau_grid.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()),
        );
        kv(
            "probe.steps",
            self.probe_steps
                .as_ref()
                .map_or("auto".to_string(), |s| fmt_list(s)),
        );
        kv("probe.merge", self.probe_merge.to_string());
        kv("probe.samples", self.probe_samples.to_string());
        s
    }
}
