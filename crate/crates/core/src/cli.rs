//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! non-finite loss.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::compare::{compare_experiment, CompareConfig};
use crate::error::{PearError, Result};
use crate::importance::TaylorRule;
use crate::io;
use crate::model::{AdapterConfig, BackboneConfig};
use crate::optim::AdamWState;
use crate::pipeline::{self, accuracy, PretrainConfig, TrainConfig, Variant};
use crate::planner::{self, CheckpointMode, CoefficientSource, KnowledgeCheckpointConfig, PruneMode};
use crate::task::{generate_task, SyntheticTask};
use crate::AdaptedModel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PEAR_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "pear", version, about = "Prune-and-share low-rank adapters on a tiny frozen transformer")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a backbone on the source task and save it.
    Pretrain {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 4)]
        pretrain_epochs: usize,
        /// Output backbone file [default: <out-dir>/backbone.bin].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one variant end to end, or continue a boundary bank with --resume.
    Finetune {
        #[arg(long)]
        backbone: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value = "pear")]
        variant: String,
        /// Bank produced by `apply`; training restarts at the warm-up boundary.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Final bank [default: <out-dir>/finetuned.bank].
        #[arg(long)]
        bank_out: Option<PathBuf>,
        /// Metrics report [default: <out-dir>/metrics.txt].
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Run warm-up and write the boundary bank and importance report.
    Score {
        #[arg(long)]
        backbone: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Boundary bank [default: <out-dir>/warm.bank].
        #[arg(long)]
        bank_out: Option<PathBuf>,
        /// Importance report [default: <out-dir>/importance.txt].
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Compute a share plan from an importance report.
    Plan {
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        kc: CheckpointArgs,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// Plan file [default: <out-dir>/plan.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a share plan to a saved bank.
    Apply {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Share)]
        mode: ModeArg,
        /// Output bank [default: <out-dir>/applied.bank].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the accuracy of a backbone plus bank.
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Evaluation report [default: <out-dir>/eval.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-seed Pear vs vanilla study.
    Compare {
        /// Number of task seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        task_seeds: u64,
        /// Number of training seeds per task, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 4)]
        pretrain_epochs: usize,
        /// Skip the unpruned baseline.
        #[arg(long)]
        no_full: bool,
        /// Report file [default: <out-dir>/comparison.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
struct TaskArgs {
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    shift: f64,
    #[arg(long, default_value_t = 2000)]
    pretrain_examples: usize,
    #[arg(long, default_value_t = 1000)]
    train_examples: usize,
    #[arg(long, default_value_t = 300)]
    val_examples: usize,
    #[arg(long, default_value_t = 1000)]
    test_examples: usize,
}

impl TaskArgs {
    fn task(&self) -> SyntheticTask {
        SyntheticTask {
            seed: self.task_seed,
            shift: self.shift,
            pretrain_examples: self.pretrain_examples,
            train_examples: self.train_examples,
            val_examples: self.val_examples,
            test_examples: self.test_examples,
            ..SyntheticTask::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KcArg {
    None,
    Da,
    Sba,
}

#[derive(Debug, Clone, Args)]
struct CheckpointArgs {
    /// Knowledge checkpoint applied when sharing.
    #[arg(long, value_enum)]
    kc: Option<KcArg>,
    /// SBA weight on the donor.
    #[arg(long)]
    c1: Option<f64>,
    /// SBA weight on the pruned adapter.
    #[arg(long)]
    c2: Option<f64>,
    /// Derive SBA weights from the importance scores.
    #[arg(long)]
    sba_from_scores: bool,
}

impl CheckpointArgs {
    fn coefficients(&self) -> Result<CoefficientSource> {
        if self.sba_from_scores {
            if self.c1.is_some() || self.c2.is_some() {
                return Err(usage("--sba-from-scores conflicts with --c1/--c2"));
            }
            return Ok(CoefficientSource::FromScores);
        }
        Ok(CoefficientSource::Manual {
            c1: self.c1.unwrap_or(0.5),
            c2: self.c2.unwrap_or(0.5),
        })
    }

    fn sba_flags_given(&self) -> bool {
        self.c1.is_some() || self.c2.is_some() || self.sba_from_scores
    }

    fn config(&self) -> Result<KnowledgeCheckpointConfig> {
        let kc = self.kc.unwrap_or(KcArg::None);
        if kc != KcArg::Sba && self.sba_flags_given() {
            return Err(usage("--c1, --c2 and --sba-from-scores need --kc sba"));
        }
        let cfg = match kc {
            KcArg::None => KnowledgeCheckpointConfig::none(),
            KcArg::Da => KnowledgeCheckpointConfig::da(),
            KcArg::Sba => KnowledgeCheckpointConfig {
                mode: CheckpointMode::Sba,
                coefficients: self.coefficients()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[command(flatten)]
    kc: CheckpointArgs,
    #[arg(long, default_value_t = 2)]
    warmup_epochs: usize,
    /// Total epochs, warm-up included.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::ElementwiseAbs)]
    rule: RuleArg,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ratio: self.ratio,
            sba_coefficients: self.kc.coefficients()?,
            adapter: AdapterConfig {
                rank: self.rank,
                ..AdapterConfig::default()
            },
            rule: match self.rule {
                RuleArg::ElementwiseAbs => TaylorRule::ElementwiseAbs,
                RuleArg::SummedAbs => TaylorRule::SummedAbs,
            },
            ..TrainConfig::default()
        };
        cfg.optimizer.learning_rate = self.lr;
        cfg.optimizer.weight_decay = self.weight_decay;
        if !(self.ratio > 0.0 && self.ratio <= planner::MAX_RATIO) {
            return Err(PearError::InvalidRatio(self.ratio));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Folds `--kc` into the variant: `pear --kc da` is `pear-da`.
    fn variant(&self, name: &str) -> Result<Variant> {
        let base = Variant::parse(name).ok_or_else(|| usage(format!("unknown variant `{name}`")))?;
        let Some(kc) = self.kc.kc else {
            if base != Variant::PearSba && self.kc.sba_flags_given() {
                return Err(usage("--c1, --c2 and --sba-from-scores need the pear-sba variant"));
            }
            return Ok(base);
        };
        let wanted = match kc {
            KcArg::None => Variant::Pear,
            KcArg::Da => Variant::PearDa,
            KcArg::Sba => Variant::PearSba,
        };
        if !Variant::SEARCH.contains(&base) {
            return Err(usage(format!("--kc does not apply to variant `{name}`")));
        }
        if base != Variant::Pear && base != wanted {
            return Err(usage(format!("--kc {kc:?} conflicts with variant `{name}`").to_lowercase()));
        }
        if wanted != Variant::PearSba && self.kc.sba_flags_given() {
            return Err(usage("--c1, --c2 and --sba-from-scores need --kc sba"));
        }
        Ok(wanted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    ElementwiseAbs,
    SummedAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Share,
    Untied,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

fn usage(msg: impl Into<String>) -> PearError {
    PearError::InvalidConfig(msg.into())
}

pub fn exit_code(err: &PearError) -> i32 {
    match err {
        PearError::InvalidConfig(_)
        | PearError::InvalidRatio(_)
        | PearError::InsufficientDonors { .. }
        | PearError::TooFewPositions(_)
        | PearError::NonFiniteCoefficient(_) => EXIT_USAGE,
        PearError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(explicit: Option<PathBuf>, out_dir: &Path, default: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| PearError::io(out_dir, e))?;
    Ok(out_dir.join(default))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(out, "{}", line.as_ref());
}

fn load_model_inputs(backbone: &Path, task: &TaskArgs) -> Result<(crate::Backbone, crate::task::TaskData)> {
    let backbone = io::load_backbone(backbone)?;
    let data = generate_task(&task.task())?;
    let cfg = &backbone.config;
    if cfg.input_dim != data.train.inputs.cols() || cfg.seq_len != data.train.seq_len {
        return Err(PearError::InvalidConfig("backbone does not match the task shape".into()));
    }
    Ok((backbone, data))
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let dir = cli.out_dir;
    match cli.command {
        Command::Pretrain {
            task,
            pretrain_epochs,
            out: path,
        } => {
            let spec = task.task();
            let data = generate_task(&spec)?;
            let pcfg = PretrainConfig {
                epochs: pretrain_epochs,
                seed: spec.seed,
                ..PretrainConfig::default()
            };
            let backbone = pipeline::pretrain(BackboneConfig::default(), &data.pretrain, &pcfg)?;
            let path = resolve(path, &dir, "backbone.bin")?;
            io::save_backbone(&backbone, &path)?;
            let model = AdaptedModel::new(backbone.clone(), backbone.fresh_bank(AdapterConfig::default(), 0)?)?;
            say(out, format!("pretrain accuracy {:.4}", accuracy(&model, &data.pretrain)?));
            say(out, format!("wrote {}", path.display()));
        }
        Command::Finetune {
            backbone,
            task,
            train,
            variant,
            resume,
            bank_out,
            metrics_out,
        } => {
            let cfg = train.config()?;
            let variant = train.variant(&variant)?;
            let (backbone, data) = load_model_inputs(&backbone, &task)?;
            let start = pipeline::Stopwatch::start();
            let model_and_metrics = match resume {
                None => {
                    let warm = pipeline::warmup(&backbone, &data, &cfg)?;
                    let (metrics, model) = pipeline::run_from_warmup(variant, &warm, &backbone, &data, &cfg)?;
                    (model, metrics)
                }
                Some(path) => {
                    let bank = io::load_bank(&path)?;
                    let (model, losses) = pipeline::continue_training(
                        &backbone,
                        bank,
                        &data,
                        &cfg,
                        cfg.warmup_epochs,
                        AdamWState::new(),
                    )?;
                    let metrics =
                        pipeline::evaluate(variant, &model, &data, losses, start.seconds())?;
                    (model, metrics)
                }
            };
            let (model, metrics) = model_and_metrics;
            let bank_path = resolve(bank_out, &dir, "finetuned.bank")?;
            let metrics_path = resolve(metrics_out, &dir, "metrics.txt")?;
            io::save_bank(&model.bank, &bank_path)?;
            io::save_text(&io::format_metrics(&metrics, true), &metrics_path)?;
            say(
                out,
                format!(
                    "{} val {:.4} test {:.4} params {} positions {}",
                    metrics.variant.name(),
                    metrics.val_accuracy,
                    metrics.test_accuracy,
                    metrics.trainable_params,
                    metrics.positions_adapted
                ),
            );
            say(out, format!("wrote {} and {}", bank_path.display(), metrics_path.display()));
        }
        Command::Score {
            backbone,
            task,
            train,
            bank_out,
            report_out,
        } => {
            let cfg = train.config()?;
            let (backbone, data) = load_model_inputs(&backbone, &task)?;
            let warm = pipeline::warmup(&backbone, &data, &cfg)?;
            let bank_path = resolve(bank_out, &dir, "warm.bank")?;
            let report_path = resolve(report_out, &dir, "importance.txt")?;
            io::save_bank(&warm.bank, &bank_path)?;
            io::save_text(&io::format_importance(&warm.report)?, &report_path)?;
            for (pos, score) in warm.report.scores() {
                say(out, format!("position {pos} score {score:.6e}"));
            }
            say(out, format!("wrote {} and {}", bank_path.display(), report_path.display()));
        }
        Command::Plan {
            report,
            kc,
            ratio,
            out: path,
        } => {
            let checkpoint = kc.config()?;
            let report = io::load_importance(&report)?;
            let plan = planner::plan(&report, ratio, checkpoint)?;
            let path = resolve(path, &dir, "plan.txt")?;
            io::save_text(&io::format_plan(&plan), &path)?;
            for a in &plan.assignment {
                say(out, format!("position {} <- donor {}", a.pruned, a.donor));
            }
            say(out, format!("wrote {}", path.display()));
        }
        Command::Apply {
            bank,
            plan,
            mode,
            out: path,
        } => {
            let mut bank = io::load_bank(&bank)?;
            let plan = io::load_plan(&plan)?;
            let mode = match mode {
                ModeArg::Share => PruneMode::Share,
                ModeArg::Untied => PruneMode::ShareUntied,
                ModeArg::Vanilla => PruneMode::Vanilla,
            };
            planner::apply(&mut bank, &plan, mode)?;
            bank.round_to_f32();
            let path = resolve(path, &dir, "applied.bank")?;
            io::save_bank(&bank, &path)?;
            say(
                out,
                format!(
                    "owned {} in effect {} params {} payload bytes {}",
                    bank.owned_count(),
                    bank.positions_in_effect(),
                    bank.actual_params(),
                    io::bank_payload_bytes(&bank)
                ),
            );
            say(out, format!("wrote {}", path.display()));
        }
        Command::Eval {
            backbone,
            bank,
            task,
            split,
            out: path,
        } => {
            let (backbone, data) = load_model_inputs(&backbone, &task)?;
            let bank = io::load_bank(&bank)?;
            let model = AdaptedModel::new(backbone, bank)?;
            let (name, dataset) = match split {
                SplitArg::Val => ("val", &data.val),
                SplitArg::Test => ("test", &data.test),
            };
            let acc = accuracy(&model, dataset)?;
            let text = format!(
                "pear eval {}\nsplit {name}\nexamples {}\naccuracy {}\n",
                io::FORMAT_VERSION,
                dataset.len(),
                io::fmt_f64(acc)
            );
            let path = resolve(path, &dir, "eval.txt")?;
            io::save_text(&text, &path)?;
            say(out, format!("{name} accuracy {acc:.4}"));
            say(out, format!("wrote {}", path.display()));
        }
        Command::Compare {
            task_seeds,
            seeds,
            task,
            train,
            pretrain_epochs,
            no_full,
            out: path,
        } => {
            if train.kc.kc.is_some() || train.kc.c1.is_some() || train.kc.c2.is_some() {
                return Err(usage("compare always runs all three checkpoint scenarios; drop --kc/--c1/--c2"));
            }
            let cfg = CompareConfig {
                task_seeds: (0..task_seeds).collect(),
                train_seeds: (0..seeds).collect(),
                task: task.task(),
                backbone: BackboneConfig::default(),
                pretrain: PretrainConfig {
                    epochs: pretrain_epochs,
                    ..PretrainConfig::default()
                },
                train: train.config()?,
                include_full: !no_full,
            };
            let comparison = compare_experiment(&cfg)?;
            let path = resolve(path, &dir, "comparison.txt")?;
            io::save_text(&comparison.to_text(), &path)?;
            let _ = write!(out, "{}", comparison.to_table());
            say(out, format!("wrote {}", path.display()));
        }
    }
    Ok(())
}
