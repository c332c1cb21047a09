//! Multi-seed comparison of Pear against vanilla pruning and full adapters.
//!
//! Every (task seed, train seed) pair is an independent job. Jobs run on the
//! rayon pool and results are stored in job order, so the report does not
//! depend on scheduling. Wall-clock time is left out of the report for the
//! same reason.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{PearError, Result};
use crate::io::fmt_f64;
use crate::model::{Backbone, BackboneConfig};
use crate::pipeline::{pretrain, run_variants, select_best, Metrics, PretrainConfig, TrainConfig, Variant};
use crate::task::{generate_task, SyntheticTask, TaskData};

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub task_seeds: Vec<u64>,
    pub train_seeds: Vec<u64>,
    /// Template task; its seed is replaced by each task seed.
    pub task: SyntheticTask,
    pub backbone: BackboneConfig,
    /// Template pretraining config; its seed is replaced by the task seed.
    pub pretrain: PretrainConfig,
    /// Template training config; its seed is replaced by each train seed.
    pub train: TrainConfig,
    pub include_full: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            task_seeds: vec![0, 1, 2],
            train_seeds: (0..5).collect(),
            task: SyntheticTask::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            include_full: true,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_seeds.is_empty() {
            return Err(PearError::InvalidConfig("need at least one task seed".into()));
        }
        if self.train_seeds.len() < 2 {
            return Err(PearError::InvalidConfig("need at least 2 train seeds".into()));
        }
        let distinct = |v: &[u64]| {
            let mut s = v.to_vec();
            s.sort_unstable();
            s.dedup();
            s.len() == v.len()
        };
        if !distinct(&self.task_seeds) || !distinct(&self.train_seeds) {
            return Err(PearError::InvalidConfig("seeds must be distinct".into()));
        }
        self.task.validate()?;
        self.backbone.validate()?;
        self.train.validate()
    }

    fn variants(&self) -> Vec<Variant> {
        let mut v = Vec::with_capacity(5);
        if self.include_full {
            v.push(Variant::FullAdapters);
        }
        v.push(Variant::VanillaPrune);
        v.extend(Variant::SEARCH);
        v
    }
}

/// Outcome of one variant on one seed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub task_seed: u64,
    pub train_seed: u64,
    pub variant: Variant,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub trainable_params: usize,
    pub positions_adapted: usize,
}

impl RunRecord {
    fn new(task_seed: u64, train_seed: u64, m: &Metrics) -> Self {
        RunRecord {
            task_seed,
            train_seed,
            variant: m.variant,
            val_accuracy: m.val_accuracy,
            test_accuracy: m.test_accuracy,
            trainable_params: m.trainable_params,
            positions_adapted: m.positions_adapted,
        }
    }
}

/// Pear scenario chosen on validation accuracy for one seed pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub task_seed: u64,
    pub train_seed: u64,
    pub variant: Variant,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    pub n: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Stats {
            mean,
            std: var.sqrt(),
            n,
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

/// Pear-best minus vanilla on one task seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskGap {
    pub task_seed: u64,
    pub gap: f64,
    /// `sqrt(se_pear² + se_vanilla²)`.
    pub pooled_se: f64,
}

impl TaskGap {
    pub fn significant(&self) -> bool {
        self.gap > 0.0 && self.gap > self.pooled_se
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub config: CompareConfig,
    /// Seed-pair major, variant minor, in configuration order.
    pub runs: Vec<RunRecord>,
    pub best: Vec<BestRecord>,
}

pub const PEAR_BEST: &str = "pear-best";

impl Comparison {
    fn tests(&self, variant: Variant, task_seed: Option<u64>) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant && task_seed.is_none_or(|t| r.task_seed == t))
            .map(|r| r.test_accuracy)
            .collect()
    }

    fn best_tests(&self, task_seed: Option<u64>) -> Vec<f64> {
        self.best
            .iter()
            .filter(|b| task_seed.is_none_or(|t| b.task_seed == t))
            .map(|b| b.test_accuracy)
            .collect()
    }

    pub fn variant_stats(&self, variant: Variant) -> Option<Stats> {
        let v = self.tests(variant, None);
        (!v.is_empty()).then(|| Stats::of(&v))
    }

    pub fn pear_best_stats(&self) -> Stats {
        Stats::of(&self.best_tests(None))
    }

    pub fn task_gaps(&self) -> Vec<TaskGap> {
        self.config
            .task_seeds
            .iter()
            .map(|&t| {
                let p = Stats::of(&self.best_tests(Some(t)));
                let v = Stats::of(&self.tests(Variant::VanillaPrune, Some(t)));
                TaskGap {
                    task_seed: t,
                    gap: p.mean - v.mean,
                    pooled_se: (p.se().powi(2) + v.se().powi(2)).sqrt(),
                }
            })
            .collect()
    }

    /// Mean Pear-best test accuracy is at least the vanilla mean.
    pub fn pear_ge_vanilla(&self) -> bool {
        let vanilla = self.variant_stats(Variant::VanillaPrune).expect("vanilla always runs");
        self.pear_best_stats().mean >= vanilla.mean
    }

    pub fn significant_task_seeds(&self) -> Vec<u64> {
        self.task_gaps()
            .into_iter()
            .filter(TaskGap::significant)
            .map(|g| g.task_seed)
            .collect()
    }

    /// Breaks of the expected `full-adapters ≥ pear-best ≥ vanilla-prune`
    /// ordering of means.
    pub fn ordering_violations(&self) -> Vec<String> {
        let pear = self.pear_best_stats().mean;
        let vanilla = self.variant_stats(Variant::VanillaPrune).expect("vanilla always runs").mean;
        let mut out = Vec::new();
        if let Some(full) = self.variant_stats(Variant::FullAdapters) {
            if full.mean < pear {
                out.push(format!("{}<{PEAR_BEST}", Variant::FullAdapters.name()));
            }
        }
        if pear < vanilla {
            out.push(format!("{PEAR_BEST}<{}", Variant::VanillaPrune.name()));
        }
        out
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let seeds = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        let mut s = format!("pear comparison {}\n", crate::io::FORMAT_VERSION);
        writeln!(s, "task_seeds {}", seeds(&c.task_seeds)).unwrap();
        writeln!(s, "train_seeds {}", seeds(&c.train_seeds)).unwrap();
        writeln!(s, "ratio {}", fmt_f64(c.train.ratio)).unwrap();
        writeln!(s, "warmup_epochs {}", c.train.warmup_epochs).unwrap();
        writeln!(s, "total_epochs {}", c.train.total_epochs).unwrap();
        writeln!(s, "learning_rate {}", fmt_f64(c.train.optimizer.learning_rate)).unwrap();
        writeln!(s, "train_examples {}", c.task.train_examples).unwrap();
        for r in &self.runs {
            writeln!(
                s,
                "run {} {} {} {} {} {} {}",
                r.task_seed,
                r.train_seed,
                r.variant.name(),
                fmt_f64(r.val_accuracy),
                fmt_f64(r.test_accuracy),
                r.trainable_params,
                r.positions_adapted
            )
            .unwrap();
        }
        for b in &self.best {
            writeln!(s, "best {} {} {}", b.task_seed, b.train_seed, b.variant.name()).unwrap();
        }
        let stats_line = |s: &mut String, name: &str, st: Stats| {
            writeln!(s, "summary {name} {} {} {}", fmt_f64(st.mean), fmt_f64(st.std), st.n).unwrap();
        };
        for v in c.variants() {
            stats_line(&mut s, v.name(), self.variant_stats(v).expect("variant ran"));
        }
        stats_line(&mut s, PEAR_BEST, self.pear_best_stats());
        for g in self.task_gaps() {
            writeln!(s, "gap {} {} {} {}", g.task_seed, fmt_f64(g.gap), fmt_f64(g.pooled_se), g.significant()).unwrap();
        }
        writeln!(s, "verdict pear_ge_vanilla {}", self.pear_ge_vanilla()).unwrap();
        writeln!(s, "verdict significant_task_seeds {}", seeds(&self.significant_task_seeds())).unwrap();
        let violations = self.ordering_violations();
        let violations = if violations.is_empty() { "none".to_string() } else { violations.join(" ") };
        writeln!(s, "verdict ordering_violations {violations}").unwrap();
        s
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<14} {:>8} {:>8} {:>4}", "variant", "mean", "std", "n").unwrap();
        let mut row = |name: &str, st: Stats| {
            writeln!(s, "{name:<14} {:>8.4} {:>8.4} {:>4}", st.mean, st.std, st.n).unwrap();
        };
        for v in self.config.variants() {
            row(v.name(), self.variant_stats(v).expect("variant ran"));
        }
        row(PEAR_BEST, self.pear_best_stats());
        for g in self.task_gaps() {
            let mark = if g.significant() { " *" } else { "" };
            writeln!(s, "task {}: gap {:+.4} (pooled se {:.4}){mark}", g.task_seed, g.gap, g.pooled_se).unwrap();
        }
        let verdict = if self.pear_ge_vanilla() { "pear-best >= vanilla" } else { "pear-best < vanilla" };
        writeln!(s, "verdict: {verdict}").unwrap();
        let violations = self.ordering_violations();
        if !violations.is_empty() {
            writeln!(s, "ordering violations: {}", violations.join(", ")).unwrap();
        }
        s
    }
}

fn prepare_task(cfg: &CompareConfig, task_seed: u64) -> Result<(TaskData, Backbone)> {
    let task = SyntheticTask {
        seed: task_seed,
        ..cfg.task.clone()
    };
    let data = generate_task(&task)?;
    let pcfg = PretrainConfig {
        seed: task_seed,
        ..cfg.pretrain.clone()
    };
    let backbone = pretrain(cfg.backbone.clone(), &data.pretrain, &pcfg)?;
    Ok((data, backbone))
}

pub fn compare_experiment(cfg: &CompareConfig) -> Result<Comparison> {
    cfg.validate()?;
    let prepared: Vec<(TaskData, Backbone)> = cfg
        .task_seeds
        .par_iter()
        .map(|&t| prepare_task(cfg, t))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..cfg.task_seeds.len())
        .flat_map(|i| cfg.train_seeds.iter().map(move |&s| (i, s)))
        .collect();
    let variants = cfg.variants();
    let results: Vec<Vec<Metrics>> = jobs
        .par_iter()
        .map(|&(i, train_seed)| {
            let (data, backbone) = &prepared[i];
            let tcfg = TrainConfig {
                seed: train_seed,
                ..cfg.train.clone()
            };
            run_variants(&variants, backbone, data, &tcfg)
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(jobs.len() * variants.len());
    let mut best = Vec::with_capacity(jobs.len());
    for (&(i, train_seed), metrics) in jobs.iter().zip(&results) {
        let task_seed = cfg.task_seeds[i];
        runs.extend(metrics.iter().map(|m| RunRecord::new(task_seed, train_seed, m)));
        let scenarios: Vec<Metrics> = metrics
            .iter()
            .filter(|m| Variant::SEARCH.contains(&m.variant))
            .cloned()
            .collect();
        let chosen = select_best(&scenarios);
        let m = scenarios.iter().find(|m| m.variant == chosen).expect("chosen scenario ran");
        best.push(BestRecord {
            task_seed,
            train_seed,
            variant: chosen,
            test_accuracy: m.test_accuracy,
        });
    }
    Ok(Comparison {
        config: cfg.clone(),
        runs,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_use_sample_deviation() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.se() - s.std / 2.0).abs() < 1e-15);
    }

    fn record(task: u64, train: u64, variant: Variant, test: f64) -> RunRecord {
        RunRecord {
            task_seed: task,
            train_seed: train,
            variant,
            val_accuracy: test,
            test_accuracy: test,
            trainable_params: 0,
            positions_adapted: 0,
        }
    }

    #[test]
    fn verdicts_and_violations_are_derived_from_runs() {
        let config = CompareConfig {
            task_seeds: vec![7],
            train_seeds: vec![0, 1],
            ..CompareConfig::default()
        };
        let mut runs = Vec::new();
        let mut best = Vec::new();
        for (train, (full, vanilla, pear)) in [(0.60, 0.50, 0.70), (0.62, 0.52, 0.72)].into_iter().enumerate() {
            runs.push(record(7, train as u64, Variant::FullAdapters, full));
            runs.push(record(7, train as u64, Variant::VanillaPrune, vanilla));
            for v in Variant::SEARCH {
                runs.push(record(7, train as u64, v, pear));
            }
            best.push(BestRecord {
                task_seed: 7,
                train_seed: train as u64,
                variant: Variant::Pear,
                test_accuracy: pear,
            });
        }
        let c = Comparison { config, runs, best };
        assert!(c.pear_ge_vanilla());
        let gap = c.task_gaps()[0];
        assert!((gap.gap - 0.2).abs() < 1e-12);
        assert_eq!(c.significant_task_seeds(), vec![7]);
        assert_eq!(c.ordering_violations(), vec!["full-adapters<pear-best".to_string()]);
        let text = c.to_text();
        assert!(text.contains("verdict ordering_violations full-adapters<pear-best\n"));
        assert!(text.contains("verdict pear_ge_vanilla true\n"));
        let back = crate::io::parse_comparison(&text).unwrap();
        assert_eq!(back.runs, c.runs);
        assert_eq!(back.best, c.best);
        assert_eq!(back.to_text(), text);
        let tampered = text.replace("verdict pear_ge_vanilla true", "verdict pear_ge_vanilla false");
        assert!(crate::io::parse_comparison(&tampered).is_err());
    }

    #[test]
    fn needs_two_train_seeds() {
        let cfg = CompareConfig {
            train_seeds: vec![0],
            ..CompareConfig::default()
        };
        assert!(compare_experiment(&cfg).is_err());
    }
}
