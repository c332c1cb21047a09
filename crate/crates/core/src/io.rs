//! On-disk formats.
//!
//! Binary checkpoints (adapter banks and backbones) start with an 8-byte
//! magic, a little-endian `u32` format version and a `u64` manifest length.
//! The manifest is UTF-8 text, one record per line. The payload that follows
//! is row-major little-endian `f32`.
//!
//! Text reports are line-delimited `key value...` records under a
//! `pear <kind> <version>` header. Keys appear in a fixed order and floats
//! are written with 17 significant digits, so a load/save cycle reproduces
//! the file byte for byte.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::compare::{BestRecord, CompareConfig, Comparison, RunRecord};
use crate::adapter::{AdapterBank, AdapterPair, AdapterSlot, PositionId, Projection, ShapeSignature, Site};
use crate::error::{PearError, Result};
use crate::importance::{ImportanceReport, TaylorRule};
use crate::model::{Backbone, BackboneConfig};
use crate::pipeline::{Metrics, Variant};
use crate::planner::{Assignment, CheckpointMode, CoefficientSource, KnowledgeCheckpointConfig, SharePlan};
use crate::tensor::Tensor;

pub const BANK_MAGIC: &[u8; 8] = b"PEARBANK";
pub const BACKBONE_MAGIC: &[u8; 8] = b"PEARBKBN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PearError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PearError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| PearError::io(path, e))?;
    tmp.persist(path).map_err(|e| PearError::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PearError::io(path, e))
}

fn read_text(path: &Path, what: &'static str) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| PearError::malformed(what, "not UTF-8"))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------- binary

fn encode_container(magic: &[u8; 8], manifest: &str, payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 4 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into its manifest text and raw payload bytes.
fn decode_container<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != magic {
        return Err(PearError::malformed(what, "missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PearError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| PearError::malformed(what, "manifest runs past end of file"))?;
    let manifest =
        std::str::from_utf8(&bytes[HEADER_LEN..end]).map_err(|_| PearError::malformed(what, "manifest is not UTF-8"))?;
    Ok((manifest, &bytes[end..]))
}

fn decode_payload(raw: &[u8], floats: usize) -> Result<Vec<f64>> {
    if raw.len() != 4 * floats {
        return Err(PearError::CorruptPayload {
            expected: 4 * floats,
            found: raw.len(),
        });
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn push_f32(out: &mut Vec<f32>, t: &Tensor) {
    out.extend(t.data().iter().map(|&v| v as f32));
}

/// Line cursor over a manifest or report.
struct Lines<'a> {
    what: &'static str,
    iter: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, what: &'static str) -> Self {
        Lines {
            what,
            iter: text.lines().peekable(),
        }
    }

    fn err(&self, detail: impl Into<String>) -> PearError {
        PearError::malformed(self.what, detail)
    }

    /// Next line, which must start with `key`; returns the remaining fields.
    fn expect(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.iter.next().ok_or_else(|| self.err(format!("missing `{key}` line")))?;
        let mut fields = line.split(' ');
        match fields.next() {
            Some(k) if k == key => Ok(fields.collect()),
            _ => Err(self.err(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn expect_n(&mut self, key: &str, n: usize) -> Result<Vec<&'a str>> {
        let fields = self.expect(key)?;
        if fields.len() != n {
            return Err(self.err(format!("`{key}` takes {n} fields, found {}", fields.len())));
        }
        Ok(fields)
    }

    fn header(&mut self, kind: &str) -> Result<()> {
        let f = self.expect_n("pear", 2)?;
        if f[0] != kind {
            return Err(self.err(format!("expected a {kind} file, found {}", f[0])));
        }
        let version: u32 = self.parse(f[1])?;
        if version != FORMAT_VERSION {
            return Err(PearError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn peek_key(&mut self) -> Option<&'a str> {
        self.iter.peek().and_then(|l| l.split(' ').next())
    }

    fn finish(&mut self) -> Result<()> {
        match self.iter.next() {
            None => Ok(()),
            Some(line) => Err(self.err(format!("unexpected trailing line `{line}`"))),
        }
    }

    fn parse<T: std::str::FromStr>(&self, field: &str) -> Result<T> {
        field.parse().map_err(|_| self.err(format!("cannot parse `{field}`")))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let f = self.expect_n(key, 1)?;
        self.parse(f[0])
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let f = self.expect_n(key, 1)?;
        self.parse(f[0])
    }
}

fn fmt_checkpoint(cfg: Option<&KnowledgeCheckpointConfig>) -> String {
    let Some(cfg) = cfg else { return "absent".into() };
    match (cfg.mode, cfg.coefficients) {
        (CheckpointMode::Sba, CoefficientSource::Manual { c1, c2 }) => {
            format!("sba manual {} {}", fmt_f64(c1), fmt_f64(c2))
        }
        (CheckpointMode::Sba, CoefficientSource::FromScores) => "sba from-scores".into(),
        (mode, _) => mode.name().into(),
    }
}

fn parse_checkpoint(lines: &Lines, f: &[&str]) -> Result<Option<KnowledgeCheckpointConfig>> {
    let cfg = match f {
        ["absent"] => return Ok(None),
        ["none"] => KnowledgeCheckpointConfig::none(),
        ["da"] => KnowledgeCheckpointConfig::da(),
        ["sba", "from-scores"] => KnowledgeCheckpointConfig::sba_from_scores(),
        ["sba", "manual", c1, c2] => KnowledgeCheckpointConfig::sba(lines.parse(c1)?, lines.parse(c2)?),
        _ => return Err(lines.err(format!("bad checkpoint `{}`", f.join(" ")))),
    };
    cfg.validate()?;
    Ok(Some(cfg))
}

// ---------------------------------------------------------------- banks

fn bank_manifest(bank: &AdapterBank) -> String {
    let sig = bank.signature();
    let mut m = String::new();
    writeln!(m, "signature {} {} {}", sig.rows, sig.cols, sig.rank).unwrap();
    writeln!(m, "checkpoint {}", fmt_checkpoint(bank.checkpoint())).unwrap();
    writeln!(m, "positions {}", bank.len()).unwrap();
    for (i, (site, slot)) in bank.sites().iter().zip(bank.slots()).enumerate() {
        write!(m, "position {i} {} {} ", site.layer, site.projection.name()).unwrap();
        match slot {
            AdapterSlot::Owned(p) => writeln!(m, "owned {}", fmt_f64(p.scale)),
            AdapterSlot::Shared(d) => writeln!(m, "shared {}", d.0),
            AdapterSlot::Pruned => writeln!(m, "pruned"),
        }
        .unwrap();
    }
    m
}

/// Payload size in bytes predicted by the slot structure alone.
pub fn bank_payload_bytes(bank: &AdapterBank) -> usize {
    4 * bank.owned_count() * bank.signature().pair_params()
}

pub fn encode_bank(bank: &AdapterBank) -> Vec<u8> {
    let mut payload = Vec::with_capacity(bank.owned_count() * bank.signature().pair_params());
    for slot in bank.slots() {
        if let AdapterSlot::Owned(p) = slot {
            push_f32(&mut payload, &p.down);
            push_f32(&mut payload, &p.up);
        }
    }
    encode_container(BANK_MAGIC, &bank_manifest(bank), &payload)
}

enum SlotSpec {
    Owned(f64),
    Shared(usize),
    Pruned,
}

pub fn decode_bank(bytes: &[u8]) -> Result<AdapterBank> {
    const WHAT: &str = "bank manifest";
    let (manifest, raw) = decode_container(bytes, BANK_MAGIC, "bank file")?;
    let mut lines = Lines::new(manifest, WHAT);
    let f = lines.expect_n("signature", 3)?;
    let signature = ShapeSignature::new(lines.parse(f[0])?, lines.parse(f[1])?, lines.parse(f[2])?)?;
    let f = lines.expect("checkpoint")?;
    let checkpoint = parse_checkpoint(&lines, &f)?;
    let count = lines.usize("positions")?;
    let mut sites = Vec::with_capacity(count.min(1 << 16));
    let mut specs = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let f = lines.expect("position")?;
        let (id, layer, proj, rest) = match f.as_slice() {
            [id, layer, proj, rest @ ..] => (*id, *layer, *proj, rest),
            _ => return Err(lines.err(format!("short position record {i}"))),
        };
        if lines.parse::<usize>(id)? != i {
            return Err(lines.err(format!("position {id} out of order, expected {i}")));
        }
        let projection = Projection::parse(proj).ok_or_else(|| lines.err(format!("unknown projection `{proj}`")))?;
        sites.push(Site {
            layer: lines.parse(layer)?,
            projection,
        });
        specs.push(match rest {
            ["owned", scale] => SlotSpec::Owned(lines.parse(scale)?),
            ["shared", donor] => SlotSpec::Shared(lines.parse(donor)?),
            ["pruned"] => SlotSpec::Pruned,
            _ => return Err(lines.err(format!("bad slot for position {i}"))),
        });
    }
    lines.finish()?;

    for (i, spec) in specs.iter().enumerate() {
        if let SlotSpec::Shared(d) = *spec {
            if !matches!(specs.get(d), Some(SlotSpec::Owned(_))) {
                return Err(PearError::DanglingDonor { position: i, donor: d });
            }
        }
    }
    let owned = specs.iter().filter(|s| matches!(s, SlotSpec::Owned(_))).count();
    let values = decode_payload(raw, owned * signature.pair_params())?;
    let (down_len, up_len) = (signature.rows * signature.rank, signature.rank * signature.cols);
    let mut chunks = values.chunks_exact(down_len + up_len);
    let slots = specs
        .into_iter()
        .map(|spec| match spec {
            SlotSpec::Owned(scale) => {
                let block = chunks.next().expect("payload size checked");
                let down = Tensor::new(&[signature.rows, signature.rank], block[..down_len].to_vec())?;
                let up = Tensor::new(&[signature.rank, signature.cols], block[down_len..].to_vec())?;
                Ok(AdapterSlot::Owned(AdapterPair::new(down, up, scale)?))
            }
            SlotSpec::Shared(d) => Ok(AdapterSlot::Shared(PositionId(d))),
            SlotSpec::Pruned => Ok(AdapterSlot::Pruned),
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterBank::from_slots(sites, signature, slots, checkpoint)
}

pub fn save_bank(bank: &AdapterBank, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<AdapterBank> {
    decode_bank(&read_file(path)?)
}

// ---------------------------------------------------------------- backbones

pub fn encode_backbone(backbone: &Backbone) -> Vec<u8> {
    let c = &backbone.config;
    let mut m = String::new();
    writeln!(m, "layers {}", c.layers).unwrap();
    writeln!(m, "model_dim {}", c.model_dim).unwrap();
    writeln!(m, "heads {}", c.heads).unwrap();
    writeln!(m, "mlp_ratio {}", c.mlp_ratio).unwrap();
    writeln!(m, "input_dim {}", c.input_dim).unwrap();
    writeln!(m, "seq_len {}", c.seq_len).unwrap();
    writeln!(m, "classes {}", c.classes).unwrap();
    let names: Vec<_> = c.positions.iter().map(|p| p.name()).collect();
    writeln!(m, "positions {}", names.join(" ")).unwrap();
    let tensors = backbone.tensors();
    writeln!(m, "tensors {}", tensors.len()).unwrap();
    let mut payload = Vec::new();
    for t in tensors {
        push_f32(&mut payload, t);
    }
    encode_container(BACKBONE_MAGIC, &m, &payload)
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone> {
    let (manifest, raw) = decode_container(bytes, BACKBONE_MAGIC, "backbone file")?;
    let mut lines = Lines::new(manifest, "backbone manifest");
    let layers = lines.usize("layers")?;
    let model_dim = lines.usize("model_dim")?;
    let heads = lines.usize("heads")?;
    let mlp_ratio = lines.usize("mlp_ratio")?;
    let input_dim = lines.usize("input_dim")?;
    let seq_len = lines.usize("seq_len")?;
    let classes = lines.usize("classes")?;
    let positions = lines
        .expect("positions")?
        .iter()
        .map(|p| Projection::parse(p).ok_or_else(|| lines.err(format!("unknown projection `{p}`"))))
        .collect::<Result<Vec<_>>>()?;
    let count = lines.usize("tensors")?;
    lines.finish()?;
    let config = BackboneConfig {
        layers,
        model_dim,
        heads,
        mlp_ratio,
        input_dim,
        seq_len,
        classes,
        positions,
    };
    let mut backbone = Backbone::init(config, 0)?;
    let mut tensors = backbone.tensors_mut();
    if tensors.len() != count {
        return Err(lines.err(format!("expected {} tensors, manifest lists {count}", tensors.len())));
    }
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    let values = decode_payload(raw, total)?;
    let mut offset = 0;
    for t in tensors.iter_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(backbone)
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<()> {
    write_atomic(path, &encode_backbone(backbone))
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    decode_backbone(&read_file(path)?)
}

// ---------------------------------------------------------------- reports

pub fn format_importance(report: &ImportanceReport) -> Result<String> {
    if !report.is_final() {
        return Err(PearError::NotFinal);
    }
    let mut s = format!("pear importance-report {FORMAT_VERSION}\n");
    writeln!(s, "rule {}", report.rule().tag()).unwrap();
    writeln!(s, "steps {}", report.steps_accumulated()).unwrap();
    writeln!(s, "positions {}", report.len()).unwrap();
    for (pos, score) in report.scores() {
        writeln!(s, "score {} {}", pos.0, fmt_f64(*score)).unwrap();
    }
    Ok(s)
}

pub fn parse_importance(text: &str) -> Result<ImportanceReport> {
    let mut lines = Lines::new(text, "importance report");
    lines.header("importance-report")?;
    let f = lines.expect_n("rule", 1)?;
    let rule = TaylorRule::from_tag(f[0]).ok_or_else(|| lines.err(format!("unknown rule `{}`", f[0])))?;
    let steps = lines.usize("steps")?;
    let count = lines.usize("positions")?;
    let mut scores = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let f = lines.expect_n("score", 2)?;
        scores.push((PositionId(lines.parse(f[0])?), lines.parse::<f64>(f[1])?));
    }
    lines.finish()?;
    let report = ImportanceReport::from_scores(scores, steps, rule)?;
    if report.len() != count {
        return Err(lines.err("duplicate position"));
    }
    Ok(report)
}

pub fn format_plan(plan: &SharePlan) -> String {
    let mut s = format!("pear share-plan {FORMAT_VERSION}\n");
    writeln!(s, "ratio {}", fmt_f64(plan.ratio)).unwrap();
    writeln!(s, "n {}", plan.n).unwrap();
    writeln!(s, "checkpoint {}", fmt_checkpoint(Some(&plan.checkpoint))).unwrap();
    writeln!(s, "pairs {}", plan.assignment.len()).unwrap();
    for a in &plan.assignment {
        writeln!(s, "pair {} {} {} {}", a.pruned.0, a.donor.0, fmt_f64(a.c1), fmt_f64(a.c2)).unwrap();
    }
    s
}

pub fn parse_plan(text: &str) -> Result<SharePlan> {
    let mut lines = Lines::new(text, "share plan");
    lines.header("share-plan")?;
    let ratio = lines.f64("ratio")?;
    let n = lines.usize("n")?;
    let f = lines.expect("checkpoint")?;
    let checkpoint = parse_checkpoint(&lines, &f)?.ok_or_else(|| lines.err("plan needs a checkpoint mode"))?;
    let count = lines.usize("pairs")?;
    let mut assignment = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let f = lines.expect_n("pair", 4)?;
        assignment.push(Assignment {
            pruned: PositionId(lines.parse(f[0])?),
            donor: PositionId(lines.parse(f[1])?),
            c1: lines.parse(f[2])?,
            c2: lines.parse(f[3])?,
        });
    }
    lines.finish()?;
    let plan = SharePlan {
        ratio,
        n,
        pruned: assignment.iter().map(|a| a.pruned).collect(),
        donors: assignment.iter().map(|a| a.donor).collect(),
        assignment,
        checkpoint,
    };
    plan.validate()?;
    Ok(plan)
}

/// Metrics as text. `with_time` controls the wall-clock line, which is the
/// only non-deterministic field.
pub fn format_metrics(m: &Metrics, with_time: bool) -> String {
    let mut s = format!("pear metrics {FORMAT_VERSION}\n");
    writeln!(s, "variant {}", m.variant.name()).unwrap();
    writeln!(s, "val_accuracy {}", fmt_f64(m.val_accuracy)).unwrap();
    writeln!(s, "test_accuracy {}", fmt_f64(m.test_accuracy)).unwrap();
    writeln!(s, "trainable_params {}", m.trainable_params).unwrap();
    writeln!(s, "positions_adapted {}", m.positions_adapted).unwrap();
    if with_time {
        writeln!(s, "wall_clock_seconds {}", fmt_f64(m.wall_clock_seconds)).unwrap();
    }
    writeln!(s, "epochs {}", m.train_loss.len()).unwrap();
    for (e, l) in m.train_loss.iter().enumerate() {
        writeln!(s, "train_loss {e} {}", fmt_f64(*l)).unwrap();
    }
    s
}

/// Parses a metrics file; a missing wall-clock line reads as zero.
pub fn parse_metrics(text: &str) -> Result<Metrics> {
    let mut lines = Lines::new(text, "metrics");
    lines.header("metrics")?;
    let f = lines.expect_n("variant", 1)?;
    let variant = Variant::parse(f[0]).ok_or_else(|| lines.err(format!("unknown variant `{}`", f[0])))?;
    let val_accuracy = lines.f64("val_accuracy")?;
    let test_accuracy = lines.f64("test_accuracy")?;
    let trainable_params = lines.usize("trainable_params")?;
    let positions_adapted = lines.usize("positions_adapted")?;
    let wall_clock_seconds = if lines.peek_key() == Some("wall_clock_seconds") {
        lines.f64("wall_clock_seconds")?
    } else {
        0.0
    };
    let epochs = lines.usize("epochs")?;
    let mut train_loss = Vec::with_capacity(epochs.min(1 << 16));
    for e in 0..epochs {
        let f = lines.expect_n("train_loss", 2)?;
        if lines.parse::<usize>(f[0])? != e {
            return Err(lines.err(format!("train_loss epoch {} out of order", f[0])));
        }
        train_loss.push(lines.parse(f[1])?);
    }
    lines.finish()?;
    Ok(Metrics {
        variant,
        train_loss,
        val_accuracy,
        test_accuracy,
        trainable_params,
        positions_adapted,
        wall_clock_seconds,
    })
}

/// Parses a comparison report. Run and selection records are read back;
/// summary and verdict lines must match what those records imply.
pub fn parse_comparison(text: &str) -> Result<Comparison> {
    let mut lines = Lines::new(text, "comparison");
    lines.header("comparison")?;
    let seeds = |lines: &Lines, f: Vec<&str>| f.iter().map(|v| lines.parse::<u64>(v)).collect::<Result<Vec<_>>>();
    let f = lines.expect("task_seeds")?;
    let task_seeds = seeds(&lines, f)?;
    let f = lines.expect("train_seeds")?;
    let train_seeds = seeds(&lines, f)?;
    let mut config = CompareConfig {
        task_seeds,
        train_seeds,
        ..CompareConfig::default()
    };
    config.train.ratio = lines.f64("ratio")?;
    config.train.warmup_epochs = lines.usize("warmup_epochs")?;
    config.train.total_epochs = lines.usize("total_epochs")?;
    config.train.optimizer.learning_rate = lines.f64("learning_rate")?;
    config.task.train_examples = lines.usize("train_examples")?;

    let variant = |lines: &Lines, name: &str| {
        Variant::parse(name).ok_or_else(|| lines.err(format!("unknown variant `{name}`")))
    };
    let mut runs = Vec::new();
    while lines.peek_key() == Some("run") {
        let f = lines.expect_n("run", 7)?;
        runs.push(RunRecord {
            task_seed: lines.parse(f[0])?,
            train_seed: lines.parse(f[1])?,
            variant: variant(&lines, f[2])?,
            val_accuracy: lines.parse(f[3])?,
            test_accuracy: lines.parse(f[4])?,
            trainable_params: lines.parse(f[5])?,
            positions_adapted: lines.parse(f[6])?,
        });
    }
    let mut best = Vec::new();
    while lines.peek_key() == Some("best") {
        let f = lines.expect_n("best", 3)?;
        let (task_seed, train_seed): (u64, u64) = (lines.parse(f[0])?, lines.parse(f[1])?);
        let chosen = variant(&lines, f[2])?;
        let run = runs
            .iter()
            .find(|r| r.task_seed == task_seed && r.train_seed == train_seed && r.variant == chosen)
            .ok_or_else(|| lines.err(format!("best {task_seed} {train_seed} has no matching run")))?;
        best.push(BestRecord {
            task_seed,
            train_seed,
            variant: chosen,
            test_accuracy: run.test_accuracy,
        });
    }
    config.include_full = runs.iter().any(|r| r.variant == Variant::FullAdapters);
    let pairs = config.task_seeds.len() * config.train_seeds.len();
    if best.len() != pairs || runs.is_empty() {
        return Err(lines.err("run and best records do not cover every seed pair"));
    }
    let comparison = Comparison { config, runs, best };
    if comparison.to_text() != text {
        return Err(lines.err("summary or verdict lines disagree with the run records"));
    }
    Ok(comparison)
}

pub fn load_comparison(path: &Path) -> Result<Comparison> {
    parse_comparison(&read_text(path, "comparison")?)
}

pub fn save_text(text: &str, path: &Path) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn load_importance(path: &Path) -> Result<ImportanceReport> {
    parse_importance(&read_text(path, "importance report")?)
}

pub fn load_plan(path: &Path) -> Result<SharePlan> {
    parse_plan(&read_text(path, "share plan")?)
}

pub fn load_metrics(path: &Path) -> Result<Metrics> {
    parse_metrics(&read_text(path, "metrics")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{apply, plan, PruneMode};

    fn bank() -> AdapterBank {
        let sites = (0..4)
            .map(|i| Site {
                layer: i / 2,
                projection: if i % 2 == 0 { Projection::Query } else { Projection::Value },
            })
            .collect();
        let mut bank = AdapterBank::init(sites, ShapeSignature::new(8, 8, 2).unwrap(), 1.0, 7);
        for p in bank.trainable_parameters_mut() {
            p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64 - 0.1);
        }
        bank.round_to_f32();
        bank
    }

    fn shared_bank() -> AdapterBank {
        let mut b = bank();
        let report = ImportanceReport::from_scores((0..4).map(|i| (PositionId(i), [3.0, 1.0, 4.0, 2.0][i])), 1, TaylorRule::ElementwiseAbs).unwrap();
        let p = plan(&report, 0.5, KnowledgeCheckpointConfig::none()).unwrap();
        apply(&mut b, &p, PruneMode::Share).unwrap();
        b
    }

    #[test]
    fn bank_round_trips_and_second_save_is_identical() {
        let b = shared_bank();
        let bytes = encode_bank(&b);
        let back = decode_bank(&bytes).unwrap();
        assert_eq!(back.slots().iter().map(|s| s.kind()).collect::<Vec<_>>(), b.slots().iter().map(|s| s.kind()).collect::<Vec<_>>());
        for (x, y) in back.trainable_parameters().iter().zip(b.trainable_parameters()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(encode_bank(&back), bytes);
    }

    #[test]
    fn shared_slots_halve_the_payload() {
        let full = encode_bank(&bank());
        let half = encode_bank(&shared_bank());
        assert_eq!(bank_payload_bytes(&bank()), 2 * bank_payload_bytes(&shared_bank()));
        let payload = |b: &[u8]| b.len() - HEADER_LEN - u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        assert_eq!(payload(&full), bank_payload_bytes(&bank()));
        assert_eq!(payload(&half), bank_payload_bytes(&shared_bank()));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let mut bytes = encode_bank(&bank());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_bank(&bytes), Err(PearError::CorruptPayload { .. })));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = encode_bank(&bank());
        bytes[8] = 9;
        assert!(matches!(decode_bank(&bytes), Err(PearError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn dangling_donor_is_reported() {
        let b = shared_bank();
        let manifest = bank_manifest(&b);
        let payload: Vec<f32> = b.trainable_parameters().iter().flat_map(|t| t.data().iter().map(|&v| v as f32)).collect();
        let chained: Vec<String> = manifest
            .lines()
            .map(|l| match l.split_once(" shared ") {
                // A share that points at itself is a share-to-share chain.
                Some((head, _)) => format!("{head} shared {}", head.split(' ').nth(1).unwrap()),
                None => l.to_string(),
            })
            .collect();
        let bytes = encode_container(BANK_MAGIC, &(chained.join("\n") + "\n"), &payload);
        assert!(matches!(decode_bank(&bytes), Err(PearError::DanglingDonor { .. })));
        let out_of_range = manifest.replacen(" shared 0", " shared 99", 1).replacen(" shared 2", " shared 99", 1);
        let bytes = encode_container(BANK_MAGIC, &out_of_range, &payload);
        assert!(matches!(decode_bank(&bytes), Err(PearError::DanglingDonor { donor: 99, .. })));
    }

    #[test]
    fn report_and_plan_text_round_trip() {
        let report = ImportanceReport::from_scores([(PositionId(0), 0.1), (PositionId(1), 1.0 / 3.0), (PositionId(2), 2.5), (PositionId(3), 0.0)], 32, TaylorRule::ElementwiseAbs).unwrap();
        let text = format_importance(&report).unwrap();
        let back = parse_importance(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(format_importance(&back).unwrap(), text);

        let p = plan(&report, 0.5, KnowledgeCheckpointConfig::sba(0.25, 0.75)).unwrap();
        let text = format_plan(&p);
        let back = parse_plan(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(format_plan(&back), text);
    }

    #[test]
    fn metrics_round_trip() {
        let m = Metrics {
            variant: Variant::PearDa,
            train_loss: vec![1.25, 0.1 + 0.2],
            val_accuracy: 0.7,
            test_accuracy: 2.0 / 3.0,
            trainable_params: 512,
            positions_adapted: 4,
            wall_clock_seconds: 1.5,
        };
        assert_eq!(parse_metrics(&format_metrics(&m, true)).unwrap(), m);
        let timeless = parse_metrics(&format_metrics(&m, false)).unwrap();
        assert_eq!(timeless.wall_clock_seconds, 0.0);
    }

    #[test]
    fn atomic_write_replaces_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
