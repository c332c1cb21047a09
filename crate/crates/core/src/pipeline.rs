//! Warm-up, prune-and-share and fine-tuning driver.
//!
//! A pruning run has three phases. Warm-up trains every adapter while the
//! importance report accumulates one Taylor step per mini-batch. At the
//! boundary the report is finalized, a plan is computed and applied, the
//! bank is snapshotted at checkpoint precision (`f32`) and the optimizer
//! starts fresh. Fine-tuning then runs the remaining epochs.
//!
//! Epoch shuffles depend only on `(seed, epoch)`, so a run resumed from a
//! saved boundary bank replays exactly what an uninterrupted run does.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterBank;
use crate::error::{PearError, Result};
use crate::importance::{ImportanceReport, TaylorRule};
use crate::model::{AdaptedModel, AdapterConfig, Backbone, BackboneConfig, BindMode};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::planner::{self, CoefficientSource, KnowledgeCheckpointConfig, PruneMode, SharePlan};
use crate::tape::Tape;
use crate::task::{Dataset, TaskData};

/// Wall-clock timer that reads zero where the platform has no clock
/// (`wasm32-unknown-unknown`).
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch(#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))] std::time::Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(
            #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
            std::time::Instant::now(),
        )
    }

    pub fn seconds(&self) -> f64 {
        #[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
        return 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    FullAdapters,
    VanillaPrune,
    Pear,
    PearDa,
    PearSba,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::FullAdapters,
        Variant::VanillaPrune,
        Variant::Pear,
        Variant::PearDa,
        Variant::PearSba,
    ];

    /// The three scenarios searched for Pear, in tie-break order.
    pub const SEARCH: [Variant; 3] = [Variant::Pear, Variant::PearDa, Variant::PearSba];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullAdapters => "full-adapters",
            Variant::VanillaPrune => "vanilla-prune",
            Variant::Pear => "pear",
            Variant::PearDa => "pear-da",
            Variant::PearSba => "pear-sba",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn is_pruning(self) -> bool {
        self != Variant::FullAdapters
    }

    pub fn prune_mode(self) -> PruneMode {
        match self {
            Variant::VanillaPrune => PruneMode::Vanilla,
            _ => PruneMode::Share,
        }
    }

    /// Checkpoint configuration the variant applies at the boundary.
    pub fn checkpoint(self, sba: CoefficientSource) -> KnowledgeCheckpointConfig {
        match self {
            Variant::FullAdapters | Variant::VanillaPrune | Variant::Pear => KnowledgeCheckpointConfig::none(),
            Variant::PearDa => KnowledgeCheckpointConfig::da(),
            Variant::PearSba => KnowledgeCheckpointConfig {
                mode: planner::CheckpointMode::Sba,
                coefficients: sba,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    /// Total epochs, warm-up included.
    pub total_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub ratio: f64,
    pub sba_coefficients: CoefficientSource,
    pub adapter: AdapterConfig,
    pub rule: TaylorRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 2,
            total_epochs: 20,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
            ratio: 0.5,
            sba_coefficients: CoefficientSource::Manual { c1: 0.5, c2: 0.5 },
            adapter: AdapterConfig::default(),
            rule: TaylorRule::ElementwiseAbs,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PearError::InvalidConfig(m));
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "need 0 < warmup_epochs ({}) < total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.optimizer.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            batch_size: 32,
            optimizer: AdamWConfig {
                learning_rate: 3e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub variant: Variant,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub trainable_params: usize,
    pub positions_adapted: usize,
    pub wall_clock_seconds: f64,
}

/// Example order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn check_loss(value: f64, epoch: usize, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(PearError::NonFiniteLoss { epoch, step })
    }
}

/// One epoch of adapter training. When `report` is given, every mini-batch
/// adds a Taylor step before the optimizer moves the weights.
pub fn train_epoch(
    model: &mut AdaptedModel,
    state: &mut AdamWState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    mut report: Option<&mut ImportanceReport>,
) -> Result<f64> {
    crate::alloc::tune_allocator();
    let order = epoch_order(cfg.seed, epoch, data.len());
    let mut total = 0.0;
    for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.batch(idx);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, BindMode::Adapters)?;
        let loss = model.loss(&mut tape, &binding, &x, &y)?;
        total += check_loss(tape.value(loss).data()[0], epoch, step)? * idx.len() as f64;
        tape.backward(loss)?;
        model.bank.clear_grads();
        model.bank.absorb_grads(&tape, &binding.adapters);
        if let Some(r) = report.as_deref_mut() {
            r.accumulate_step(&model.bank)?;
        }
        adamw_step(&mut model.bank.trainable_parameters_mut(), state, &cfg.optimizer)?;
    }
    model.bank.clear_grads();
    Ok(total / data.len() as f64)
}

pub fn accuracy(model: &AdaptedModel, data: &Dataset) -> Result<f64> {
    const CHUNK: usize = 256;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (x, y) = data.batch(idx);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the whole backbone on the pretraining split, then freezes it at
/// `f32`-representable values so it round-trips through files exactly.
pub fn pretrain(config: BackboneConfig, data: &Dataset, pcfg: &PretrainConfig) -> Result<Backbone> {
    crate::alloc::tune_allocator();
    let backbone = Backbone::init(config, pcfg.seed)?;
    let bank = backbone.fresh_bank(AdapterConfig { rank: 1, scale: 1.0 }, 0)?;
    let mut model = AdaptedModel::new(backbone, bank)?;
    let mut state = AdamWState::new();
    for epoch in 0..pcfg.epochs {
        let order = epoch_order(pcfg.seed ^ 0x9e37_79b9_7f4a_7c15, epoch, data.len());
        for (step, idx) in order.chunks(pcfg.batch_size.max(1)).enumerate() {
            let (x, y) = data.batch(idx);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, BindMode::BackboneOnly)?;
            let loss = model.loss(&mut tape, &binding, &x, &y)?;
            check_loss(tape.value(loss).data()[0], epoch, step)?;
            tape.backward(loss)?;
            for t in model.backbone.tensors_mut() {
                t.clear_grad();
            }
            model.backbone.absorb_grads(&tape, &binding);
            adamw_step(&mut model.backbone.tensors_mut(), &mut state, &pcfg.optimizer)?;
        }
    }
    let mut backbone = model.backbone;
    for t in backbone.tensors_mut() {
        t.clear_grad();
        t.set_requires_grad(false);
    }
    backbone.round_to_f32();
    Ok(backbone)
}

/// State at the end of warm-up.
#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub bank: AdapterBank,
    pub report: ImportanceReport,
    pub train_loss: Vec<f64>,
    pub optimizer: AdamWState,
    pub seconds: f64,
}

/// Trains a fresh bank for `warmup_epochs`, accumulating importance over
/// every mini-batch, and finalizes the report.
pub fn warmup(backbone: &Backbone, data: &TaskData, cfg: &TrainConfig) -> Result<WarmupOutcome> {
    cfg.validate()?;
    let start = Stopwatch::start();
    let bank = backbone.fresh_bank(cfg.adapter, cfg.seed)?;
    let mut model = AdaptedModel::new(backbone.clone(), bank)?;
    let mut state = AdamWState::new();
    let mut report = ImportanceReport::new(cfg.rule);
    let mut train_loss = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        train_loss.push(train_epoch(&mut model, &mut state, &data.train, cfg, epoch, Some(&mut report))?);
    }
    report.finalize()?;
    Ok(WarmupOutcome {
        bank: model.bank,
        report,
        train_loss,
        optimizer: state,
        seconds: start.seconds(),
    })
}

/// Plans from the finalized report and rewrites the bank for `variant`.
/// The bank is taken to `f32` before and after the rewrite, so the result
/// matches applying the plan to a bank saved at the boundary.
pub fn prune_and_share(
    bank: &mut AdapterBank,
    report: &ImportanceReport,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<SharePlan> {
    let share_plan = planner::plan(report, cfg.ratio, variant.checkpoint(cfg.sba_coefficients))?;
    bank.round_to_f32();
    planner::apply(bank, &share_plan, variant.prune_mode())?;
    bank.round_to_f32();
    Ok(share_plan)
}

/// Trains `bank` from `start_epoch` to `total_epochs`.
pub fn continue_training(
    backbone: &Backbone,
    bank: AdapterBank,
    data: &TaskData,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut state: AdamWState,
) -> Result<(AdaptedModel, Vec<f64>)> {
    cfg.validate()?;
    let mut model = AdaptedModel::new(backbone.clone(), bank)?;
    let mut losses = Vec::with_capacity(cfg.total_epochs.saturating_sub(start_epoch));
    for epoch in start_epoch..cfg.total_epochs {
        losses.push(train_epoch(&mut model, &mut state, &data.train, cfg, epoch, None)?);
    }
    Ok((model, losses))
}

/// Evaluates a trained model into [`Metrics`].
pub fn evaluate(
    variant: Variant,
    model: &AdaptedModel,
    data: &TaskData,
    train_loss: Vec<f64>,
    seconds: f64,
) -> Result<Metrics> {
    Ok(Metrics {
        variant,
        train_loss,
        val_accuracy: accuracy(model, &data.val)?,
        test_accuracy: accuracy(model, &data.test)?,
        trainable_params: model.bank.actual_params(),
        positions_adapted: model.bank.positions_in_effect(),
        wall_clock_seconds: seconds,
    })
}

/// Continues one variant from a shared warm-up.
pub fn run_from_warmup(
    variant: Variant,
    warm: &WarmupOutcome,
    backbone: &Backbone,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(Metrics, AdaptedModel)> {
    let start = Stopwatch::start();
    let mut bank = warm.bank.clone();
    let state = if variant.is_pruning() {
        prune_and_share(&mut bank, &warm.report, cfg, variant)?;
        AdamWState::new()
    } else {
        warm.optimizer.clone()
    };
    let (model, rest) = continue_training(backbone, bank, data, cfg, cfg.warmup_epochs, state)?;
    let mut losses = warm.train_loss.clone();
    losses.extend(rest);
    let seconds = warm.seconds + start.seconds();
    let metrics = evaluate(variant, &model, data, losses, seconds)?;
    Ok((metrics, model))
}

/// Runs one variant end to end.
pub fn run_variant(variant: Variant, backbone: &Backbone, data: &TaskData, cfg: &TrainConfig) -> Result<Metrics> {
    let warm = warmup(backbone, data, cfg)?;
    Ok(run_from_warmup(variant, &warm, backbone, data, cfg)?.0)
}

/// Runs several variants that share one warm-up phase; results follow the
/// order of `variants`.
pub fn run_variants(
    variants: &[Variant],
    backbone: &Backbone,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<Vec<Metrics>> {
    let warm = warmup(backbone, data, cfg)?;
    variants
        .iter()
        .map(|&v| run_from_warmup(v, &warm, backbone, data, cfg).map(|(m, _)| m))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Variant,
    /// Plain, DA and SBA, in that order.
    pub scenarios: Vec<Metrics>,
}

impl SearchResult {
    pub fn best_metrics(&self) -> &Metrics {
        self.scenarios
            .iter()
            .find(|m| m.variant == self.best)
            .expect("best is one of the scenarios")
    }
}

/// Picks the scenario with the highest validation accuracy; ties go to the
/// earlier scenario.
pub fn select_best(scenarios: &[Metrics]) -> Variant {
    scenarios
        .iter()
        .fold(None::<&Metrics>, |best, m| match best {
            Some(b) if b.val_accuracy >= m.val_accuracy => Some(b),
            _ => Some(m),
        })
        .map(|m| m.variant)
        .expect("at least one scenario")
}

pub fn run_search(backbone: &Backbone, data: &TaskData, cfg: &TrainConfig) -> Result<SearchResult> {
    let scenarios = run_variants(&Variant::SEARCH, backbone, data, cfg)?;
    Ok(SearchResult {
        best: select_best(&scenarios),
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(variant: Variant, val: f64, test: f64) -> Metrics {
        Metrics {
            variant,
            train_loss: vec![],
            val_accuracy: val,
            test_accuracy: test,
            trainable_params: 0,
            positions_adapted: 0,
            wall_clock_seconds: 0.0,
        }
    }

    #[test]
    fn selection_uses_validation_and_breaks_ties_by_order() {
        let s = [
            metrics(Variant::Pear, 0.7, 0.1),
            metrics(Variant::PearDa, 0.7, 0.9),
            metrics(Variant::PearSba, 0.6, 1.0),
        ];
        assert_eq!(select_best(&s), Variant::Pear);
        let s = [
            metrics(Variant::Pear, 0.5, 0.9),
            metrics(Variant::PearDa, 0.6, 0.1),
            metrics(Variant::PearSba, 0.6, 1.0),
        ];
        assert_eq!(select_best(&s), Variant::PearDa);
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert!(TrainConfig { warmup_epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 20, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        let mut bad_lr = ok.clone();
        bad_lr.optimizer.learning_rate = 0.0;
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn sba_variant_uses_half_half_by_default() {
        let cfg = TrainConfig::default();
        assert_eq!(
            Variant::PearSba.checkpoint(cfg.sba_coefficients),
            KnowledgeCheckpointConfig::sba(0.5, 0.5)
        );
    }

    #[test]
    fn epoch_order_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(3, 7, 50), epoch_order(3, 7, 50));
        assert_ne!(epoch_order(3, 7, 50), epoch_order(3, 8, 50));
        let mut sorted = epoch_order(1, 0, 20);
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
