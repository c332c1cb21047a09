//! Tiny pre-norm transformer encoder used as the frozen backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapted_linear, AdapterBank, BankBinding, PositionId, Projection, ShapeSignature, Site};
use crate::error::{PearError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Per-token feature size.
    pub input_dim: usize,
    pub seq_len: usize,
    pub classes: usize,
    /// Projections carrying adapters in every layer.
    pub positions: Vec<Projection>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 2,
            model_dim: 32,
            heads: 4,
            mlp_ratio: 2,
            input_dim: 8,
            seq_len: 16,
            classes: 4,
            positions: vec![Projection::Query, Projection::Value],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PearError::InvalidConfig(msg));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return bad("layers, model_dim and heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 || self.input_dim == 0 || self.seq_len == 0 {
            return bad("mlp_ratio, input_dim and seq_len must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        let mut seen = self.positions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.positions.len() {
            return bad("adaptation positions repeat a projection".into());
        }
        Ok(())
    }

    /// Adaptation sites in position-id order: layer-major, then the
    /// configured projection order.
    pub fn sites(&self) -> Vec<Site> {
        (0..self.layers)
            .flat_map(|layer| {
                self.positions
                    .iter()
                    .map(move |&projection| Site { layer, projection })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in: Tensor,
    pub mlp_in_bias: Tensor,
    pub mlp_out: Tensor,
    pub mlp_out_bias: Tensor,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
            Projection::Output => &self.output,
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

/// Backbone weights. Frozen during adapter training; only the pretraining
/// loop updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl Backbone {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let hidden = d * config.mlp_ratio;
        let mut dense = |rows: usize, cols: usize| {
            Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut rng)
        };
        let ones = |n: usize| Tensor::new(&[n], vec![1.0; n]).expect("ones");
        let embed = dense(config.input_dim, d);
        let pos_embed = dense(config.seq_len, d);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[d]),
                query: dense(d, d),
                key: dense(d, d),
                value: dense(d, d),
                output: dense(d, d),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[d]),
                mlp_in: dense(d, hidden),
                mlp_in_bias: Tensor::zeros(&[hidden]),
                mlp_out: dense(hidden, d),
                mlp_out_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let head = dense(d, config.classes);
        Ok(Backbone {
            embed,
            pos_embed,
            blocks,
            final_gain: ones(d),
            final_bias: Tensor::zeros(&[d]),
            head,
            head_bias: Tensor::zeros(&[config.classes]),
            config,
        })
    }

    /// All weights in canonical order (used by serialization and pretraining).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head, &self.head_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    /// Adapter shape signature compatible with every adaptation site.
    pub fn signature(&self, rank: usize) -> Result<ShapeSignature> {
        ShapeSignature::new(self.config.model_dim, self.config.model_dim, rank)
    }

    pub fn fresh_bank(&self, adapter: AdapterConfig, seed: u64) -> Result<AdapterBank> {
        Ok(AdapterBank::init(
            self.config.sites(),
            self.signature(adapter.rank)?,
            adapter.scale,
            seed,
        ))
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneBinding {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.clear_grad();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        BackboneBinding { vars }
    }

    /// Adds gradients gathered on the tape into the backbone weights.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &ModelBinding) {
        for (t, v) in self.tensors_mut().into_iter().zip(&binding.backbone.vars) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        crate::tensor::zero_grad(self.tensors_mut());
    }
}

#[derive(Debug, Clone)]
struct BackboneBinding {
    vars: Vec<Var>,
}

const BLOCK_TENSORS: usize = 12;

impl BackboneBinding {
    fn embed(&self) -> Var {
        self.vars[0]
    }
    fn pos_embed(&self) -> Var {
        self.vars[1]
    }
    fn block(&self, layer: usize, idx: usize) -> Var {
        self.vars[2 + layer * BLOCK_TENSORS + idx]
    }
    fn tail(&self, idx: usize) -> Var {
        self.vars[self.vars.len() - 4 + idx]
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    backbone: BackboneBinding,
    pub adapters: BankBinding,
}

/// What receives gradients during a bound forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Nothing is tracked.
    Eval,
    /// Adapters train, backbone frozen.
    Adapters,
    /// Everything trains (used for the gradient suite).
    All,
    /// Backbone trains with no adapters applied (pretraining).
    BackboneOnly,
}

/// Frozen backbone plus its adapter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub backbone: Backbone,
    pub bank: AdapterBank,
}

/// Random backbone with a fresh zero-start adapter at every site.
pub fn build_model(config: BackboneConfig, adapter: AdapterConfig, seed: u64) -> Result<AdaptedModel> {
    let backbone = Backbone::init(config, seed)?;
    let bank = backbone.fresh_bank(adapter, seed.wrapping_add(1))?;
    Ok(AdaptedModel { backbone, bank })
}

impl AdaptedModel {
    pub fn new(backbone: Backbone, bank: AdapterBank) -> Result<Self> {
        if bank.sites() != backbone.config.sites().as_slice() {
            return Err(PearError::InvalidConfig(
                "bank sites do not match backbone adaptation positions".into(),
            ));
        }
        if bank.signature().rows != backbone.config.model_dim
            || bank.signature().cols != backbone.config.model_dim
        {
            return Err(PearError::InvalidConfig(
                "bank signature does not match backbone width".into(),
            ));
        }
        Ok(AdaptedModel { backbone, bank })
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode) -> Result<ModelBinding> {
        let backbone_trainable = matches!(mode, BindMode::All | BindMode::BackboneOnly);
        let backbone = self.backbone.bind(tape, backbone_trainable);
        let adapters = match mode {
            BindMode::BackboneOnly => BankBinding::empty(self.bank.len()),
            BindMode::Eval => self.bank.bind(tape, false)?,
            BindMode::Adapters | BindMode::All => self.bank.bind(tape, true)?,
        };
        Ok(ModelBinding { backbone, adapters })
    }

    /// Logits `[batch, classes]` for inputs `[batch·seq, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, binding: &ModelBinding, inputs: &Tensor) -> Result<Var> {
        let cfg = &self.backbone.config;
        if inputs.cols() != cfg.input_dim || !inputs.rows().is_multiple_of(cfg.seq_len) {
            return Err(PearError::shape(
                "model input",
                inputs.shape(),
                &[cfg.seq_len, cfg.input_dim],
            ));
        }
        let bb = &binding.backbone;
        let x = tape.leaf(inputs.clone());
        let x = tape.matmul(x, bb.embed())?;
        let mut h = tape.add(x, bb.pos_embed())?;

        for layer in 0..cfg.layers {
            let pair = |p: Projection| {
                self.bank
                    .position_of(Site { layer, projection: p })
                    .and_then(|pos: PositionId| binding.adapters.get(pos))
            };
            let a = tape.layer_norm(h, bb.block(layer, 0), bb.block(layer, 1), LAYER_NORM_EPS)?;
            let q = adapted_linear(tape, a, bb.block(layer, 2), pair(Projection::Query))?;
            let k = adapted_linear(tape, a, bb.block(layer, 3), pair(Projection::Key))?;
            let v = adapted_linear(tape, a, bb.block(layer, 4), pair(Projection::Value))?;
            let att = tape.attention(q, k, v, cfg.seq_len, cfg.heads)?;
            let o = adapted_linear(tape, att, bb.block(layer, 5), pair(Projection::Output))?;
            h = tape.add(h, o)?;

            let m = tape.layer_norm(h, bb.block(layer, 6), bb.block(layer, 7), LAYER_NORM_EPS)?;
            let m = tape.matmul(m, bb.block(layer, 8))?;
            let m = tape.add(m, bb.block(layer, 9))?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, bb.block(layer, 10))?;
            let m = tape.add(m, bb.block(layer, 11))?;
            h = tape.add(h, m)?;
        }

        let h = tape.layer_norm(h, bb.tail(0), bb.tail(1), LAYER_NORM_EPS)?;
        let pooled = tape.mean_pool(h, cfg.seq_len)?;
        let logits = tape.matmul(pooled, bb.tail(2))?;
        tape.add(logits, bb.tail(3))
    }

    /// Mean cross-entropy loss node for a labelled batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        inputs: &Tensor,
        labels: &[usize],
    ) -> Result<Var> {
        let logits = self.forward(tape, binding, inputs)?;
        tape.cross_entropy(logits, labels)
    }

    /// Logits without recording any backward rules.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, BindMode::Eval)?;
        let out = self.forward(&mut tape, &binding, inputs)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok(logits
            .data()
            .chunks(logits.cols())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
