//! Finite-difference oracles shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use pear::adapter::AdapterSlot;
use pear::io::{decode_bank, encode_bank};
use pear::model::LAYER_NORM_EPS;
use pear::planner::CoefficientSource;
use pear::{
    checkpoint_da, checkpoint_sba, AdaptedModel, AdapterBank, AdapterConfig, AdapterPair, Backbone, BackboneConfig,
    BindMode, ImportanceReport, KnowledgeCheckpointConfig, PositionId, Projection, Result, ShapeSignature, Site,
    TaylorRule, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with entries kept at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v += gap.copysign(*v) * 2.0;
        }
    }
    t
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalar objective: the op output itself when scalar, else its dot product
/// with a fixed random probe.
fn objective(tape: &mut Tape, out: Var, probe_seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let probe = tape.leaf(Tensor::randn(&shape, 1.0, &mut rng(probe_seed)));
    let weighted = tape.mul(out, probe)?;
    Ok(tape.sum(weighted))
}

fn eval(inputs: &[Tensor], build: &Build, probe_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let loss = objective(&mut tape, out, probe_seed).expect("objective");
    tape.value(loss).data()[0]
}

/// Largest relative error between tape gradients and central differences
/// over every element of every input.
pub fn check_op(inputs: Vec<Tensor>, build: &Build, probe_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let loss = objective(&mut tape, out, probe_seed).expect("objective");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, build, probe_seed) - eval(&minus, build, probe_seed)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Every tape op, each checked on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, build: &Build| {
        out.push((name, check_op(inputs, build, seed ^ 0xabcd)));
    };
    let m = |r: &mut ChaCha8Rng, rows, cols| Tensor::randn(&[rows, cols], 1.0, r);

    run("matmul", vec![m(&mut r, 3, 4), m(&mut r, 4, 5)], &|t, v| t.matmul(v[0], v[1]));
    run("add", vec![m(&mut r, 3, 4), m(&mut r, 3, 4)], &|t, v| t.add(v[0], v[1]));
    run("add-tiled", vec![m(&mut r, 6, 4), m(&mut r, 2, 4)], &|t, v| t.add(v[0], v[1]));
    run("add-row", vec![m(&mut r, 3, 4), Tensor::randn(&[4], 1.0, &mut r)], &|t, v| t.add(v[0], v[1]));
    run("mul", vec![m(&mut r, 3, 4), m(&mut r, 3, 4)], &|t, v| t.mul(v[0], v[1]));
    let c = r.random_range(-2.0..2.0);
    run("scale", vec![m(&mut r, 3, 4)], &move |t, v| Ok(t.scale(v[0], c)));
    run("relu", vec![away_from_zero(&[3, 4], 0.05, &mut r)], &|t, v| Ok(t.relu(v[0])));
    run("gelu", vec![m(&mut r, 3, 4)], &|t, v| Ok(t.gelu(v[0])));
    run(
        "layer_norm",
        vec![m(&mut r, 3, 5), Tensor::randn(&[5], 1.0, &mut r), Tensor::randn(&[5], 1.0, &mut r)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
    );
    run("softmax_rows", vec![m(&mut r, 3, 5)], &|t, v| Ok(t.softmax_rows(v[0])));
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    run("cross_entropy", vec![m(&mut r, 4, 3)], &move |t, v| t.cross_entropy(v[0], &labels));
    run("sum", vec![m(&mut r, 3, 4)], &|t, v| Ok(t.sum(v[0])));
    run("mean_pool", vec![m(&mut r, 6, 4)], &|t, v| t.mean_pool(v[0], 3));
    run(
        "attention",
        vec![m(&mut r, 8, 6), m(&mut r, 8, 6), m(&mut r, 8, 6)],
        &|t, v| t.attention(v[0], v[1], v[2], 4, 2),
    );
    out
}

pub fn small_config() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        model_dim: 8,
        heads: 2,
        mlp_ratio: 2,
        input_dim: 3,
        seq_len: 4,
        classes: 3,
        positions: vec![Projection::Query, Projection::Value],
    }
}

/// Small two-layer model with random adapters; position 2 shares
/// position 0's pair so tied gradients are covered.
pub fn small_model(seed: u64) -> AdaptedModel {
    let mut r = rng(seed);
    let backbone = Backbone::init(small_config(), seed).unwrap();
    let mut bank = backbone.fresh_bank(AdapterConfig { rank: 2, scale: 1.0 }, seed).unwrap();
    for p in bank.trainable_parameters_mut() {
        *p = Tensor::randn(p.shape(), 0.5, &mut r);
    }
    let mut slots = bank.slots().to_vec();
    slots[2] = AdapterSlot::Shared(PositionId(0));
    let bank = AdapterBank::from_slots(bank.sites().to_vec(), bank.signature(), slots, None).unwrap();
    AdaptedModel::new(backbone, bank).unwrap()
}

fn model_loss(model: &AdaptedModel, x: &Tensor, y: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, BindMode::Eval).unwrap();
    let loss = model.loss(&mut tape, &b, x, y).unwrap();
    tape.value(loss).data()[0]
}

/// Full-model check over every backbone and adapter parameter.
pub fn check_model(seed: u64) -> f64 {
    let mut model = small_model(seed);
    let cfg = small_config();
    let batch = 3;
    let mut r = rng(seed ^ 0x5eed);
    let x = Tensor::randn(&[batch * cfg.seq_len, cfg.input_dim], 1.0, &mut r);
    let y: Vec<usize> = (0..batch).map(|_| r.random_range(0..cfg.classes)).collect();

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, BindMode::All).unwrap();
    let loss = model.loss(&mut tape, &binding, &x, &y).unwrap();
    tape.backward(loss).unwrap();
    model.backbone.zero_grad();
    model.bank.zero_grad();
    model.backbone.absorb_grads(&tape, &binding);
    model.bank.absorb_grads(&tape, &binding.adapters);

    let backbone_count = model.backbone.tensors().len();
    let adapter_count = model.bank.trainable_parameters().len();
    let mut worst: f64 = 0.0;
    for k in 0..backbone_count + adapter_count {
        let numel = param(&mut model, k, backbone_count).numel();
        for j in 0..numel {
            let analytic = param(&mut model, k, backbone_count).grad_or_zeros()[j];
            let orig = param(&mut model, k, backbone_count).data()[j];
            param(&mut model, k, backbone_count).data_mut()[j] = orig + FD_STEP;
            let lp = model_loss(&model, &x, &y);
            param(&mut model, k, backbone_count).data_mut()[j] = orig - FD_STEP;
            let lm = model_loss(&model, &x, &y);
            param(&mut model, k, backbone_count).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn param(model: &mut AdaptedModel, k: usize, backbone_count: usize) -> &mut Tensor {
    if k < backbone_count {
        model.backbone.tensors_mut().swap_remove(k)
    } else {
        model.bank.trainable_parameters_mut().swap_remove(k - backbone_count)
    }
}

/// Reference planner: positions ranked by counting how many others beat
/// them, then lowest-m pruned and highest-m donors, both in descending
/// contribution order.
pub fn reference_plan(scores: &[f64], m: usize) -> (Vec<usize>, Vec<usize>) {
    let n = scores.len();
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut by_rank = vec![0; n];
    for p in 0..n {
        let rank = (0..n).filter(|&q| q != p && beats(q, p)).count();
        by_rank[rank] = p;
    }
    (by_rank[n - m..].to_vec(), by_rank[..m].to_vec())
}

/// Scores drawn from a small integer pool (ties likely) or continuously.
pub fn random_scores(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    if r.random_bool(0.5) {
        let pool = r.random_range(1..=n.max(2) as u32);
        (0..n).map(|_| f64::from(r.random_range(0..pool))).collect()
    } else {
        (0..n).map(|_| r.random_range(0.0..10.0)).collect()
    }
}

pub fn report_from(scores: &[f64]) -> ImportanceReport {
    ImportanceReport::from_scores(
        scores.iter().enumerate().map(|(i, &s)| (PositionId(i), s)),
        1,
        TaylorRule::ElementwiseAbs,
    )
    .unwrap()
}

/// Number of (n, vector) cases where `plan` disagrees with the reference,
/// over `trials` vectors for each n in 2..=12.
pub fn planner_mismatches(trials: usize, seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    let (mut cases, mut bad, mut tied) = (0, 0, 0);
    for n in 2..=12 {
        for _ in 0..trials {
            let scores = random_scores(n, &mut r);
            let ratio = r.random_range(0.01..=0.5);
            let plan = pear::plan(&report_from(&scores), ratio, KnowledgeCheckpointConfig::none()).unwrap();
            let m = (n as f64 * ratio + 1e-9).floor() as usize;
            let (pruned, donors) = reference_plan(&scores, m);
            let ids = |v: &[PositionId]| v.iter().map(|p| p.0).collect::<Vec<_>>();
            let pairs_ok = plan
                .assignment
                .iter()
                .zip(pruned.iter().zip(&donors))
                .all(|(a, (&p, &d))| a.pruned.0 == p && a.donor.0 == d);
            let ok = plan.m() == m
                && ids(&plan.pruned) == pruned
                && ids(&plan.donors) == donors
                && plan.assignment.len() == m
                && pairs_ok;
            cases += 1;
            bad += usize::from(!ok);
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            tied += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        }
    }
    (cases, bad, tied)
}

/// Max-norm relative gap between the tied donor gradient and the summed
/// gradients of two untied copies.
pub fn tied_gradient_error(seed: u64) -> f64 {
    let tied = small_model(seed);
    let mut untied = tied.clone();
    let mut slots = tied.bank.slots().to_vec();
    slots[2] = AdapterSlot::Owned(tied.bank.pair(PositionId(0)).unwrap().clone());
    untied.bank =
        AdapterBank::from_slots(tied.bank.sites().to_vec(), tied.bank.signature(), slots, None).unwrap();

    let cfg = small_config();
    let mut r = rng(seed ^ 0x71ed);
    let batch = 4;
    let x = Tensor::randn(&[batch * cfg.seq_len, cfg.input_dim], 1.0, &mut r);
    let y: Vec<usize> = (0..batch).map(|_| r.random_range(0..cfg.classes)).collect();
    let grads = |mut model: AdaptedModel| {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, BindMode::Adapters).unwrap();
        let loss = model.loss(&mut tape, &binding, &x, &y).unwrap();
        tape.backward(loss).unwrap();
        model.bank.zero_grad();
        model.bank.absorb_grads(&tape, &binding.adapters);
        model.bank
    };
    let tied = grads(tied);
    let untied = grads(untied);
    let flat = |p: &AdapterPair| [p.down.grad_or_zeros(), p.up.grad_or_zeros()].concat();
    let got = flat(tied.pair(PositionId(0)).unwrap());
    let a = flat(untied.pair(PositionId(0)).unwrap());
    let b = flat(untied.pair(PositionId(2)).unwrap());
    let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(&want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
    diff / scale
}

pub fn sites(n: usize) -> Vec<Site> {
    (0..n)
        .map(|i| Site {
            layer: i / 2,
            projection: if i % 2 == 0 { Projection::Query } else { Projection::Value },
        })
        .collect()
}

/// Random valid `(a, b, d)` with `a, b < max`.
pub fn random_signature(r: &mut ChaCha8Rng, max: usize) -> ShapeSignature {
    let (a, b) = (r.random_range(2..max), r.random_range(2..max));
    ShapeSignature::new(a, b, r.random_range(1..a.min(b))).unwrap()
}

pub fn random_pair(sig: ShapeSignature, r: &mut ChaCha8Rng) -> AdapterPair {
    AdapterPair::new(
        Tensor::randn(&[sig.rows, sig.rank], 1.0, r),
        Tensor::randn(&[sig.rank, sig.cols], 1.0, r),
        1.0,
    )
    .unwrap()
}

/// Exact-equality checks of the checkpoint algebra on one random pair of
/// pairs: (DA == SBA(1,1), SBA(1,0) == donor, SBA(.5,.5) == average).
pub fn checkpoint_algebra(seed: u64) -> (bool, bool, bool) {
    let mut r = rng(seed);
    let sig = random_signature(&mut r, 10);
    let donor = random_pair(sig, &mut r);
    let pruned = random_pair(sig, &mut r);
    let da = checkpoint_da(&donor, &pruned).unwrap();
    let sba11 = checkpoint_sba(&donor, &pruned, 1.0, 1.0).unwrap();
    let sba10 = checkpoint_sba(&donor, &pruned, 1.0, 0.0).unwrap();
    let sba55 = checkpoint_sba(&donor, &pruned, 0.5, 0.5).unwrap();
    let avg = |a: &Tensor, b: &Tensor| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect() };
    let same = |a: &AdapterPair, b: &AdapterPair| a.down.data() == b.down.data() && a.up.data() == b.up.data();
    (
        same(&da, &sba11),
        same(&sba10, &donor),
        sba55.down.data() == avg(&donor.down, &pruned.down).as_slice()
            && sba55.up.data() == avg(&donor.up, &pruned.up).as_slice(),
    )
}

/// Bank with a random mix of owned, shared and pruned slots.
pub fn random_bank(r: &mut ChaCha8Rng) -> AdapterBank {
    let n = r.random_range(1..=8);
    let sig = random_signature(r, 7);
    let scale = [1.0, 0.5, 2.0][r.random_range(0..3)];
    let mut slots: Vec<AdapterSlot> = (0..n)
        .map(|_| {
            if r.random_bool(0.2) {
                AdapterSlot::Pruned
            } else {
                let mut p = random_pair(sig, r);
                p.scale = scale;
                AdapterSlot::Owned(p)
            }
        })
        .collect();
    let owned: Vec<usize> = (0..n).filter(|&i| matches!(slots[i], AdapterSlot::Owned(_))).collect();
    if owned.len() >= 2 {
        for _ in 0..r.random_range(0..owned.len()) {
            let target = owned[r.random_range(0..owned.len())];
            let donor = owned[r.random_range(0..owned.len())];
            if target != donor && matches!(slots[donor], AdapterSlot::Owned(_)) {
                slots[target] = AdapterSlot::Shared(PositionId(donor));
            }
        }
        // Shares may now point at a slot that later became shared itself.
        for i in 0..n {
            if let AdapterSlot::Shared(d) = slots[i] {
                if !matches!(slots[d.0], AdapterSlot::Owned(_)) {
                    slots[i] = AdapterSlot::Pruned;
                }
            }
        }
    }
    let checkpoint = match r.random_range(0..5) {
        0 => None,
        1 => Some(KnowledgeCheckpointConfig::none()),
        2 => Some(KnowledgeCheckpointConfig::da()),
        3 => Some(KnowledgeCheckpointConfig::sba_from_scores()),
        _ => Some(KnowledgeCheckpointConfig {
            mode: pear::planner::CheckpointMode::Sba,
            coefficients: CoefficientSource::Manual { c1: r.random_range(0.0..2.0), c2: r.random_range(0.0..2.0) },
        }),
    };
    AdapterBank::from_slots(sites(n), sig, slots, checkpoint).unwrap()
}

/// Round-trip through the binary format: structure and f32-rounded weights
/// reproduced exactly, second encoding byte-identical.
pub fn bank_round_trips(bank: &AdapterBank) -> bool {
    let bytes = encode_bank(bank);
    let Ok(loaded) = decode_bank(&bytes) else { return false };
    let mut expected = bank.clone();
    expected.round_to_f32();
    expected.clear_grads();
    structure(&loaded) == structure(&expected)
        && loaded.signature() == expected.signature()
        && loaded.sites() == expected.sites()
        && loaded.checkpoint() == expected.checkpoint()
        && weights(&loaded) == weights(&expected)
        && encode_bank(&loaded) == bytes
}

fn structure(bank: &AdapterBank) -> Vec<String> {
    bank.slots()
        .iter()
        .map(|s| match s {
            AdapterSlot::Owned(p) => format!("owned {}", p.scale),
            AdapterSlot::Shared(d) => format!("shared {}", d.0),
            AdapterSlot::Pruned => "pruned".into(),
        })
        .collect()
}

fn weights(bank: &AdapterBank) -> Vec<u64> {
    bank.trainable_parameters().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Runs the `pear` binary with `PEAR_OUT_DIR` set to `out_dir`.
pub fn pear_cli(out_dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_pear"))
        .args(args)
        .env("PEAR_OUT_DIR", out_dir)
        .output()
        .expect("spawn pear")
}

pub fn pear_ok(out_dir: &std::path::Path, args: &[&str]) -> String {
    let out = pear_cli(out_dir, args);
    assert!(
        out.status.success(),
        "pear {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// End-to-end `finetune` against `score` → `plan` → `apply` →
/// `finetune --resume`, both from the same pretrained backbone. Returns
/// whether the final banks and the test accuracies are identical.
pub fn decomposition_matches(
    dir: &std::path::Path,
    pretrain_epochs: &str,
    task: &[&str],
    train: &[&str],
    plan: &[&str],
) -> (bool, bool) {
    let path = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let with = |head: &[&str], tails: &[&[&str]]| -> Vec<String> {
        head.iter().map(|s| s.to_string()).chain(tails.iter().flat_map(|t| t.iter().map(|s| s.to_string()))).collect()
    };
    let run = |args: Vec<String>| pear_ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    let backbone = path("backbone.bin");

    run(with(&["pretrain", "--pretrain-epochs", pretrain_epochs], &[task]));
    run(with(&["finetune", "--backbone", &backbone, "--bank-out", &path("e2e.bank")], &[task, train, plan]));
    run(with(&["score", "--backbone", &backbone], &[task, train]));
    run(with(&["plan", "--report", &path("importance.txt")], &[plan]));
    run(vec!["apply".into(), "--bank".into(), path("warm.bank"), "--plan".into(), path("plan.txt")]);
    run(with(
        &["finetune", "--backbone", &backbone, "--resume", &path("applied.bank"), "--bank-out", &path("split.bank")],
        &[task, train, plan],
    ));
    let banks = std::fs::read(path("e2e.bank")).unwrap() == std::fs::read(path("split.bank")).unwrap();
    let mut accs = Vec::new();
    for bank in ["e2e.bank", "split.bank"] {
        run(with(&["eval", "--backbone", &backbone, "--bank", &path(bank), "--out", &path("eval.txt")], &[task]));
        accs.push(std::fs::read_to_string(path("eval.txt")).unwrap());
    }
    (banks, accs[0] == accs[1])
}
