//! Browser demo bindings. Each operation is a plain function returning a
//! JSON string so it can be tested natively; the `wasm_bindgen` wrappers at
//! the bottom only translate errors.

use pear::adapter::AdapterSlot;
use pear::optim::AdamWConfig;
use pear::pipeline::{pretrain, run_from_warmup, warmup, PretrainConfig, TrainConfig, Variant};
use pear::planner::{CheckpointMode, CoefficientSource};
use pear::task::{generate_task, SyntheticTask};
use pear::{
    apply, checkpoint_sba, plan, AdapterBank, AdapterConfig, AdapterPair, BackboneConfig, ImportanceReport,
    KnowledgeCheckpointConfig, PositionId, Projection, PruneMode, ShapeSignature, Site, TaylorRule, Tensor,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Signature used for the accounting view: 8×8 weights, rank 2.
const PLAN_SIGNATURE: (usize, usize, usize) = (8, 8, 2);

fn checkpoint_config(kc: &str, c1: f64, c2: f64) -> Result<KnowledgeCheckpointConfig, String> {
    match kc {
        "none" => Ok(KnowledgeCheckpointConfig::none()),
        "da" => Ok(KnowledgeCheckpointConfig::da()),
        "sba" => Ok(KnowledgeCheckpointConfig::sba(c1, c2)),
        "sba-scores" => Ok(KnowledgeCheckpointConfig::sba_from_scores()),
        other => Err(format!("unknown checkpoint mode '{other}'")),
    }
}

fn slot_json(bank: &AdapterBank) -> Value {
    bank.slots()
        .iter()
        .map(|s| match s {
            AdapterSlot::Owned(_) => json!({"kind": "owned"}),
            AdapterSlot::Shared(d) => json!({"kind": "shared", "donor": d.0}),
            AdapterSlot::Pruned => json!({"kind": "pruned"}),
        })
        .collect()
}

fn bank_json(bank: &AdapterBank) -> Value {
    json!({
        "params": bank.actual_params(),
        "positions": bank.positions_in_effect(),
        "slots": slot_json(bank),
    })
}

/// Plans a prune-and-share from comma-separated scores and reports the
/// resulting Pear and vanilla banks.
pub fn plan_view(scores: &str, ratio: f64, kc: &str, c1: f64, c2: f64) -> Result<String, String> {
    let values: Vec<f64> = scores
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("'{s}' is not a number")))
        .collect::<Result<_, _>>()?;
    let report = ImportanceReport::from_scores(
        values.iter().enumerate().map(|(i, &s)| (PositionId(i), s)),
        1,
        TaylorRule::ElementwiseAbs,
    )
    .map_err(|e| e.to_string())?;
    let share = plan(&report, ratio, checkpoint_config(kc, c1, c2)?).map_err(|e| e.to_string())?;

    let (a, b, d) = PLAN_SIGNATURE;
    let sites = (0..values.len())
        .map(|i| Site {
            layer: i / 2,
            projection: if i % 2 == 0 { Projection::Query } else { Projection::Value },
        })
        .collect();
    let full = AdapterBank::init(sites, ShapeSignature::new(a, b, d).map_err(|e| e.to_string())?, 1.0, 0);
    let mut pear_bank = full.clone();
    let mut vanilla = full.clone();
    apply(&mut pear_bank, &share, PruneMode::Share).map_err(|e| e.to_string())?;
    apply(&mut vanilla, &share, PruneMode::Vanilla).map_err(|e| e.to_string())?;

    let ids = |v: &[PositionId]| v.iter().map(|p| p.0).collect::<Vec<_>>();
    Ok(json!({
        "n": share.n,
        "m": share.m(),
        "ranking": ids(&report.rank().map_err(|e| e.to_string())?),
        "pruned": ids(&share.pruned),
        "donors": ids(&share.donors),
        "assignment": share.assignment.iter().map(|x| json!({
            "pruned": x.pruned.0, "donor": x.donor.0, "c1": x.c1, "c2": x.c2,
        })).collect::<Vec<_>>(),
        "signature": [a, b, d],
        "full": bank_json(&full),
        "pear": bank_json(&pear_bank),
        "vanilla": bank_json(&vanilla),
    })
    .to_string())
}

fn pair_json(p: &AdapterPair) -> Value {
    json!({"a": p.down.data(), "b": p.up.data(), "delta": p.delta().data()})
}

/// Folds a random pruned pair into a random donor pair.
pub fn checkpoint_view(seed: u32, kc: &str, c1: f64, c2: f64) -> Result<String, String> {
    let (rows, cols, rank) = (4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let mut random = || -> Result<AdapterPair, String> {
        let round = |t: Tensor| {
            let data = t.data().iter().map(|v| (v * 100.0).round() / 100.0).collect();
            Tensor::new(t.shape(), data).map_err(|e| e.to_string())
        };
        let down = round(Tensor::randn(&[rows, rank], 1.0, &mut rng))?;
        let up = round(Tensor::randn(&[rank, cols], 1.0, &mut rng))?;
        AdapterPair::new(down, up, 1.0).map_err(|e| e.to_string())
    };
    let donor = random()?;
    let pruned = random()?;
    let cfg = checkpoint_config(kc, c1, c2)?;
    let (c1, c2) = match (cfg.mode, cfg.coefficients) {
        (CheckpointMode::None, _) => (1.0, 0.0),
        (CheckpointMode::Da, _) => (1.0, 1.0),
        (CheckpointMode::Sba, CoefficientSource::Manual { c1, c2 }) => (c1, c2),
        (CheckpointMode::Sba, CoefficientSource::FromScores) => {
            return Err("score-based coefficients need a plan; use manual c1/c2 here".into())
        }
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let merged = checkpoint_sba(&donor, &pruned, c1, c2).map_err(|e| e.to_string())?;
    Ok(json!({
        "rows": rows, "cols": cols, "rank": rank, "c1": c1, "c2": c2,
        "donor": pair_json(&donor),
        "pruned": pair_json(&pruned),
        "merged": pair_json(&merged),
    })
    .to_string())
}

/// Trains a tiny model and returns per-epoch training loss and final test
/// accuracy for full adapters, vanilla pruning and Pear.
pub fn training_curves(seed: u32, epochs: u32) -> Result<String, String> {
    let epochs = epochs.clamp(3, 40) as usize;
    let task = SyntheticTask {
        seed: u64::from(seed),
        input_dim: 4,
        seq_len: 6,
        classes: 3,
        pretrain_examples: 600,
        train_examples: 300,
        val_examples: 100,
        test_examples: 300,
        ..SyntheticTask::default()
    };
    let data = generate_task(&task).map_err(|e| e.to_string())?;
    let config = BackboneConfig {
        model_dim: 16,
        heads: 2,
        input_dim: 4,
        seq_len: 6,
        classes: 3,
        ..BackboneConfig::default()
    };
    let pcfg = PretrainConfig {
        epochs: 4,
        seed: u64::from(seed),
        ..PretrainConfig::default()
    };
    let backbone = pretrain(config, &data.pretrain, &pcfg).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        warmup_epochs: 2.min(epochs - 1),
        total_epochs: epochs,
        batch_size: 32,
        seed: u64::from(seed),
        adapter: AdapterConfig { rank: 2, scale: 1.0 },
        optimizer: AdamWConfig {
            learning_rate: 3e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let warm = warmup(&backbone, &data, &cfg).map_err(|e| e.to_string())?;
    let mut runs = serde_json::Map::new();
    for v in [Variant::FullAdapters, Variant::VanillaPrune, Variant::Pear] {
        let (m, _) = run_from_warmup(v, &warm, &backbone, &data, &cfg).map_err(|e| e.to_string())?;
        runs.insert(
            v.name().into(),
            json!({
                "loss": m.train_loss,
                "test": m.test_accuracy,
                "params": m.trainable_params,
                "positions": m.positions_adapted,
            }),
        );
    }
    Ok(json!({"epochs": epochs, "warmup": cfg.warmup_epochs, "runs": runs}).to_string())
}

#[wasm_bindgen(js_name = planView)]
pub fn plan_view_js(scores: &str, ratio: f64, kc: &str, c1: f64, c2: f64) -> Result<String, JsError> {
    plan_view(scores, ratio, kc, c1, c2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = checkpointView)]
pub fn checkpoint_view_js(seed: u32, kc: &str, c1: f64, c2: f64) -> Result<String, JsError> {
    checkpoint_view(seed, kc, c1, c2).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainingCurves)]
pub fn training_curves_js(seed: u32, epochs: u32) -> Result<String, JsError> {
    training_curves(seed, epochs).map_err(|e| JsError::new(&e))
}
