//! Subcommand implementations. Each `cmd_*` writes its artifacts under `out`
//! and finishes with a `report.txt` listing the resolved config, a summary and
//! the sha256 digest of every artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use egrpo_core::grpo::{evaluate_mean_reward, IterationMetrics, Strategy, Trainer};
use egrpo_core::model::{cfm_pretrain, PretrainReport, ToyDataset, VelocityModel};
use egrpo_core::rng::derive_seed;
use egrpo_core::sampler::Sampler;
use egrpo_core::schedule::{plan_merges, ActiveRange, MergePlan, TimestepSchedule};

use crate::checkpoint::Checkpoint;
use crate::config::{strategy_name, ExperimentConfig};
use crate::document::{plan_to_text, schedule_to_text};
use crate::error::{HarnessError, Result};
use crate::svg::{line_chart, Series};

pub const ENTROPY_COLUMNS: [&str; 6] = ["l", "k", "t_k", "dt", "h", "exp_entropy"];
pub const METRICS_COLUMNS: [&str; 7] = [
    "iteration",
    "anchor",
    "mean_reward",
    "objective",
    "clip_fraction",
    "grad_norm",
    "wall_ms",
];
pub const EVAL_COLUMNS: [&str; 2] = ["iteration", "mean_reward"];
pub const PRETRAIN_COLUMNS: [&str; 2] = ["iteration", "loss"];
pub const ABLATION_COLUMNS: [&str; 5] = ["variant", "seed", "baseline_reward", "final_reward", "status"];
pub const SUMMARY_COLUMNS: [&str; 6] = ["variant", "runs", "failures", "mean", "std", "median"];
pub const PROBE_COLUMNS: [&str; 4] = ["k", "l", "mean", "variance"];

/// Merge lengths overlaid by `entropy-profile`.
pub const PROFILE_OVERLAYS: [usize; 3] = [1, 2, 4];

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Collects artifacts for `report.txt`.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub summary: Vec<(String, String)>,
    pub artifacts: Vec<PathBuf>,
}

impl Report {
    fn add(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Writes `report.txt` in `dir`; artifact paths are listed relative to it.
    fn finish(&mut self, command: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
        let mut s = String::new();
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "\n[config]");
        s.push_str(&cfg.to_text());
        let _ = writeln!(s, "\n[summary]");
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[digests]");
        for path in &self.artifacts {
            let rel = path.strip_prefix(dir).unwrap_or(path);
            let _ = writeln!(s, "{} = {}", rel.display(), file_digest(path)?);
        }
        let path = dir.join("report.txt");
        write_text(&path, &s)?;
        Ok(path)
    }
}

/// Hex sha256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRow {
    pub l: usize,
    pub k: usize,
    pub t_k: f64,
    pub dt: f64,
    pub h: f64,
    pub exp_entropy: f64,
}

/// Rows of the entropy profile for each overlay length. Near the data end the
/// merge is limited to `min(l, k)` steps.
pub fn entropy_rows(schedule: &TimestepSchedule) -> Result<Vec<EntropyRow>> {
    let half_d = schedule.dim() as f64 / 2.0;
    let mut rows = Vec::new();
    for &l in &PROFILE_OVERLAYS {
        for k in 1..=schedule.steps() {
            let eff = l.min(k);
            let (h, e) = if eff == 1 {
                let s = schedule.step_entropy(k)?;
                (s.h, s.exp_entropy)
            } else {
                let e = schedule.merged_exp_entropy(k, eff)?;
                (half_d * e.ln(), e)
            };
            rows.push(EntropyRow {
                l,
                k,
                t_k: schedule.time(k),
                dt: schedule.time(k) - schedule.time(k - eff),
                h,
                exp_entropy: e,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_entropy_profile(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    ensure_dir(out)?;
    let rows = entropy_rows(&schedule)?;
    let mut report = Report::default();

    let csv_path = out.join("entropy_profile.csv");
    write_csv(
        &csv_path,
        &ENTROPY_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.l.to_string(),
                r.k.to_string(),
                f(r.t_k),
                f(r.dt),
                f(r.h),
                f(r.exp_entropy),
            ]
        }),
    )?;
    report.add(csv_path);

    let series: Vec<Series> = PROFILE_OVERLAYS
        .iter()
        .map(|&l| {
            Series::new(
                format!("l = {l}"),
                rows.iter()
                    .filter(|r| r.l == l)
                    .map(|r| (r.k as f64, r.h))
                    .collect(),
            )
        })
        .collect();
    let svg_path = out.join("entropy_profile.svg");
    write_text(&svg_path, &line_chart("SDE step entropy", "step k", "entropy h", &series))?;
    report.add(svg_path);

    let doc_path = out.join("schedule.txt");
    write_text(&doc_path, &schedule_to_text(&schedule))?;
    report.add(doc_path);

    report.note("rows", rows.len());
    report.finish("entropy-profile", cfg, out)?;
    Ok(report)
}

pub fn cmd_plan(cfg: &ExperimentConfig, out: &Path) -> Result<(MergePlan, Report)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let plan = plan_merges(&schedule, cfg.tau, cfg.range())?;
    ensure_dir(out)?;
    let mut report = Report::default();
    let path = out.join("plan.txt");
    write_text(&path, &plan_to_text(&plan))?;
    report.add(path);
    report.note("anchors", plan.blocks.len());
    report.note(
        "truncated",
        plan.blocks.iter().filter(|b| b.truncated).count(),
    );
    report.finish("plan", cfg, out)?;
    Ok((plan, report))
}

/// Builds the toy dataset and a freshly initialised model, then pretrains it.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(VelocityModel, PretrainReport)> {
    cfg.validate()?;
    let dataset = ToyDataset::generate(
        cfg.mixture(),
        cfg.data_points,
        cfg.conditional,
        derive_seed(cfg.seed, &[0xDA7A]),
    )?;
    let mut model = VelocityModel::init(
        cfg.dim,
        cfg.conditions(),
        &cfg.hidden,
        derive_seed(cfg.seed, &[0x1417]),
    )?;
    let report = cfm_pretrain(
        &mut model,
        &dataset,
        &cfg.pretrain_config(),
        derive_seed(cfg.seed, &[0xCF3]),
    )?;
    Ok((model, report))
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    let (model, losses) = pretrain_model(cfg)?;
    ensure_dir(out)?;
    let mut report = Report::default();
    let ckpt = out.join("model.ckpt");
    Checkpoint {
        model,
        seed: cfg.seed,
    }
    .save(&ckpt)?;
    report.add(ckpt);
    let loss_path = out.join("pretrain.csv");
    write_csv(
        &loss_path,
        &PRETRAIN_COLUMNS,
        losses
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), f(*l)]),
    )?;
    report.add(loss_path);
    if let Some(l) = losses.final_loss() {
        report.note("final_loss", f(l));
    }
    report.finish("pretrain", cfg, out)?;
    Ok(report)
}

/// Result of one in-memory training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: VelocityModel,
    pub metrics: Vec<IterationMetrics>,
    /// Wall time per iteration in milliseconds.
    pub wall_ms: Vec<u64>,
    /// `(iterations completed, mean ODE reward)`, starting with the baseline at 0.
    pub eval_curve: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn baseline_reward(&self) -> f64 {
        self.eval_curve[0].1
    }

    pub fn final_reward(&self) -> f64 {
        self.eval_curve.last().unwrap().1
    }

    /// First evaluated iteration count whose reward reaches `threshold`.
    pub fn iterations_to_reach(&self, threshold: f64) -> Option<usize> {
        self.eval_curve
            .iter()
            .find(|(_, r)| *r >= threshold)
            .map(|(i, _)| *i)
    }
}

/// Runs `cfg.iterations` policy updates from `model`, evaluating every
/// `eval_interval` iterations (and always at the start and end). `on_iteration`
/// sees the policy after each update.
pub fn run_training(
    cfg: &ExperimentConfig,
    model: VelocityModel,
    mut on_iteration: impl FnMut(usize, &VelocityModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    if model.dim() != cfg.dim {
        return Err(HarnessError::config(format!(
            "schedule.dim: checkpoint has dimension {}, config asks for {}",
            model.dim(),
            cfg.dim
        )));
    }
    if model.conditions() != cfg.conditions() {
        return Err(HarnessError::config(format!(
            "data.conditional: checkpoint has {} condition inputs, config implies {}",
            model.conditions(),
            cfg.conditions()
        )));
    }
    let reward = cfg.reward_spec();
    let eval_sampler = Sampler::new(&schedule);
    let evaluate = |m: &VelocityModel| {
        evaluate_mean_reward(
            &eval_sampler,
            m,
            &reward,
            cfg.eval_samples,
            cfg.conditions(),
            cfg.eval_seed,
        )
    };
    let mut eval_curve = vec![(0, evaluate(&model)?)];
    let sampler = Sampler::with_noise(&schedule, cfg.train_noise()?);
    let mut trainer = Trainer::with_sampler(sampler, model, cfg.train_config())?;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut wall_ms = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let start = Instant::now();
        let m = trainer.step(&reward)?;
        wall_ms.push(start.elapsed().as_millis() as u64);
        if !trainer.policy().params().iter().all(|p| p.is_finite()) {
            return Err(egrpo_core::Error::NonFinite {
                what: "policy parameters",
            }
            .into());
        }
        metrics.push(m);
        on_iteration(it, trainer.policy())?;
        let due = cfg.eval_interval > 0 && it % cfg.eval_interval == 0;
        if due || it == cfg.iterations {
            eval_curve.push((it, evaluate(trainer.policy())?));
        }
    }
    Ok(TrainOutcome {
        policy: trainer.into_policy(),
        metrics,
        wall_ms,
        eval_curve,
    })
}

/// Loads the checkpoint, trains, and writes `metrics.csv`, `eval.csv`,
/// `reward_curve.svg`, periodic and final checkpoints, the plan and schedule
/// documents and `report.txt`.
pub fn cmd_train(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<(TrainOutcome, Report)> {
    cfg.validate()?;
    let start = Checkpoint::load(checkpoint)?;
    train_from_model(cfg, start.model, out)
}

fn train_from_model(
    cfg: &ExperimentConfig,
    model: VelocityModel,
    out: &Path,
) -> Result<(TrainOutcome, Report)> {
    ensure_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    let mut report = Report::default();
    let mut saved = Vec::new();
    let outcome = run_training(cfg, model, |it, policy| {
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
            let path = ckpt_dir.join(format!("iter_{it:05}.ckpt"));
            Checkpoint {
                model: policy.clone(),
                seed: cfg.seed,
            }
            .save(&path)?;
            saved.push(path);
        }
        Ok(())
    })?;
    report.artifacts.extend(saved);

    let final_path = out.join("final.ckpt");
    Checkpoint {
        model: outcome.policy.clone(),
        seed: cfg.seed,
    }
    .save(&final_path)?;
    report.add(final_path);

    let metrics_path = out.join("metrics.csv");
    write_csv(
        &metrics_path,
        &METRICS_COLUMNS,
        outcome
            .metrics
            .iter()
            .zip(&outcome.wall_ms)
            .flat_map(|(m, ms)| {
                let ms = if cfg.wall_time { *ms } else { 0 };
                m.anchors.iter().map(move |a| {
                    vec![
                        m.iteration.to_string(),
                        a.anchor.to_string(),
                        f(a.mean_reward),
                        f(a.objective),
                        f(a.clip_fraction),
                        f(m.grad_norm),
                        ms.to_string(),
                    ]
                })
            }),
    )?;
    report.add(metrics_path);

    let eval_path = out.join("eval.csv");
    write_csv(
        &eval_path,
        &EVAL_COLUMNS,
        outcome
            .eval_curve
            .iter()
            .map(|(i, r)| vec![i.to_string(), f(*r)]),
    )?;
    report.add(eval_path);

    let curve = Series::new(
        strategy_name(cfg.strategy),
        outcome
            .eval_curve
            .iter()
            .map(|&(i, r)| (i as f64, r))
            .collect(),
    );
    let svg_path = out.join("reward_curve.svg");
    write_text(
        &svg_path,
        &line_chart("Mean reward (ODE evaluation)", "iteration", "reward", &[curve]),
    )?;
    report.add(svg_path);

    let schedule = cfg.schedule()?;
    let schedule_path = out.join("schedule.txt");
    write_text(&schedule_path, &schedule_to_text(&schedule))?;
    report.add(schedule_path);
    if cfg.strategy == Strategy::EGrpo {
        let plan_path = out.join("plan.txt");
        write_text(
            &plan_path,
            &plan_to_text(&plan_merges(&schedule, cfg.tau, cfg.range())?),
        )?;
        report.add(plan_path);
    }

    report.note("iterations", cfg.iterations);
    report.note("strategy", strategy_name(cfg.strategy));
    report.note("baseline_reward", f(outcome.baseline_reward()));
    report.note("final_reward", f(outcome.final_reward()));
    report.finish("train", cfg, out)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Tau,
    Steps,
    Merge,
}

impl std::str::FromStr for Ablation {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Ablation::Tau),
            "steps" => Ok(Ablation::Steps),
            "merge" => Ok(Ablation::Merge),
            _ => Err(HarnessError::config(format!(
                "ablation: unknown grid {s:?} (tau, steps, merge)"
            ))),
        }
    }
}

/// Named config variants of an ablation grid, in output order.
pub fn ablation_variants(cfg: &ExperimentConfig, which: Ablation) -> Vec<(String, ExperimentConfig)> {
    let t = cfg.steps;
    let with = |edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        edit(&mut c);
        c
    };
    match which {
        Ablation::Tau => cfg
            .tau_grid
            .iter()
            .map(|&tau| {
                (
                    format!("tau_{tau:?}"),
                    with(&|c| {
                        c.strategy = Strategy::EGrpo;
                        c.tau = tau;
                    }),
                )
            })
            .collect(),
        Ablation::Steps => [
            ("first_quarter", t - t / 4, t),
            ("first_half", t / 2, t),
            ("second_half", 0, t / 2),
            ("full", 0, t),
        ]
        .into_iter()
        .map(|(name, lo, hi)| {
            (
                name.to_string(),
                with(&|c| {
                    c.range_low = Some(lo);
                    c.range_high = Some(hi);
                }),
            )
        })
        .collect(),
        Ablation::Merge => [
            Strategy::FixedMerge(2),
            Strategy::FixedMerge(4),
            Strategy::FixedMerge(6),
            Strategy::EGrpo,
        ]
        .into_iter()
        .map(|s| {
            let name = match s {
                Strategy::FixedMerge(k) => format!("fixed_{k}"),
                _ => "adaptive".to_string(),
            };
            (name, with(&|c| c.strategy = s))
        })
        .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    /// `(baseline, final)` rewards, or the error message of a failed cell.
    pub result: std::result::Result<(f64, f64), String>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs every (variant, seed) cell in parallel. Cell `i` of a variant uses
/// seed `cfg.seed + i` and writes into `out/cells/<variant>/seed_<seed>`.
/// A failed cell is recorded in the tables rather than aborting the grid.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    which: Ablation,
    model: &VelocityModel,
    out: &Path,
) -> Result<(Vec<AblationCell>, Report)> {
    cfg.validate()?;
    ensure_dir(out)?;
    let jobs: Vec<(String, ExperimentConfig)> = ablation_variants(cfg, which)
        .into_iter()
        .flat_map(|(name, base)| {
            (0..cfg.ablate_seeds as u64).map(move |i| {
                let mut c = base.clone();
                c.seed = base.seed.wrapping_add(i);
                (name.clone(), c)
            })
        })
        .collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|(name, c)| {
            let dir = out.join("cells").join(name).join(format!("seed_{}", c.seed));
            let result = train_from_model(c, model.clone(), &dir)
                .map(|(o, _)| (o.baseline_reward(), o.final_reward()))
                .map_err(|e| e.to_string());
            AblationCell {
                variant: name.clone(),
                seed: c.seed,
                result,
            }
        })
        .collect();

    let mut report = Report::default();
    let table = out.join("ablation.csv");
    write_csv(
        &table,
        &ABLATION_COLUMNS,
        cells.iter().map(|c| match &c.result {
            Ok((b, fin)) => vec![c.variant.clone(), c.seed.to_string(), f(*b), f(*fin), "ok".into()],
            Err(e) => vec![
                c.variant.clone(),
                c.seed.to_string(),
                String::new(),
                String::new(),
                format!("failed: {e}"),
            ],
        }),
    )?;
    report.add(table);

    let mut names: Vec<&str> = Vec::new();
    for c in &cells {
        if !names.contains(&c.variant.as_str()) {
            names.push(&c.variant);
        }
    }
    let summary_rows: Vec<Vec<String>> = names
        .iter()
        .map(|name| {
            let group: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == *name).collect();
            let mut finals: Vec<f64> = group
                .iter()
                .filter_map(|c| c.result.as_ref().ok().map(|r| r.1))
                .collect();
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            vec![
                name.to_string(),
                group.len().to_string(),
                (group.len() - finals.len()).to_string(),
                f(mean),
                f(std),
                f(median(&mut finals)),
            ]
        })
        .collect();
    let summary = out.join("summary.csv");
    write_csv(&summary, &SUMMARY_COLUMNS, summary_rows)?;
    report.add(summary);

    report.note("cells", cells.len());
    report.note("failed", cells.iter().filter(|c| c.result.is_err()).count());
    report.finish("ablate", cfg, out)?;
    Ok((cells, report))
}

/// Steps probed by default: the highest and lowest step of the active range.
pub fn default_probe_steps(range: ActiveRange) -> Vec<usize> {
    vec![range.high, range.low + 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub k: usize,
    pub l: usize,
    pub mean: f64,
    pub variance: f64,
}

pub fn probe_rows(cfg: &ExperimentConfig, model: &VelocityModel) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let sampler = Sampler::with_noise(&schedule, cfg.train_noise()?);
    let reward = cfg.reward_spec();
    let steps = cfg
        .probe_steps
        .clone()
        .unwrap_or_else(|| default_probe_steps(cfg.range()));
    let c = cfg.conditional.then_some(0);
    steps
        .iter()
        .map(|&k| {
            let l = cfg.probe_merge.min(k);
            let p = sampler.reward_variance_probe(
                model,
                &reward,
                k,
                l,
                cfg.probe_samples,
                c,
                derive_seed(cfg.seed, &[0x9B0BE, k as u64]),
            )?;
            Ok(ProbeRow {
                k,
                l,
                mean: p.mean,
                variance: p.variance,
            })
        })
        .collect()
}

pub fn cmd_probe_variance(
    cfg: &ExperimentConfig,
    model: &VelocityModel,
    out: &Path,
) -> Result<(Vec<ProbeRow>, Report)> {
    let rows = probe_rows(cfg, model)?;
    ensure_dir(out)?;
    let mut report = Report::default();
    let path = out.join("probe_variance.csv");
    write_csv(
        &path,
        &PROBE_COLUMNS,
        rows.iter()
            .map(|r| vec![r.k.to_string(), r.l.to_string(), f(r.mean), f(r.variance)]),
    )?;
    report.add(path);
    report.note("rows", rows.len());
    report.finish("probe-variance", cfg, out)?;
    Ok((rows, report))
}
