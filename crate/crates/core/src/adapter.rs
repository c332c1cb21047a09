//! Low-rank adapter pairs and the position-indexed bank that holds them.
//!
//! Each adaptation position carries one [`AdapterSlot`]: an owned pair, a
//! weight-tied reference to another position's owned pair, or nothing.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PearError, Result};
use crate::planner::KnowledgeCheckpointConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PositionId(pub usize);

impl fmt::Display for PositionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Attention projection that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "query" => Some(Projection::Query),
            "key" => Some(Projection::Key),
            "value" => Some(Projection::Value),
            "output" => Some(Projection::Output),
            _ => None,
        }
    }
}

/// Where a position lives in the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    pub layer: usize,
    pub projection: Projection,
}

/// `(a, b, d)`: adapted weight is `a×b`, adapter rank is `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeSignature {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
}

impl ShapeSignature {
    pub fn new(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank >= rows.min(cols) {
            return Err(PearError::InvalidConfig(format!(
                "adapter rank {rank} must satisfy 1 <= d < min({rows}, {cols})"
            )));
        }
        Ok(ShapeSignature { rows, cols, rank })
    }

    /// Scalars in one pair: `a·d + d·b`.
    pub fn pair_params(&self) -> usize {
        self.rows * self.rank + self.rank * self.cols
    }
}

/// The `(A, B)` pair approximating a weight update as `scale · A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    /// `A`, shape `a×d`.
    pub down: Tensor,
    /// `B`, shape `d×b`.
    pub up: Tensor,
    pub scale: f64,
}

impl AdapterPair {
    pub fn new(mut down: Tensor, mut up: Tensor, scale: f64) -> Result<Self> {
        let (&[a, d], &[d2, b]) = (down.shape(), up.shape()) else {
            return Err(PearError::shape("adapter pair", down.shape(), up.shape()));
        };
        if d != d2 {
            return Err(PearError::shape("adapter pair", down.shape(), up.shape()));
        }
        ShapeSignature::new(a, b, d)?;
        down.set_requires_grad(true);
        up.set_requires_grad(true);
        Ok(AdapterPair { down, up, scale })
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(signature: ShapeSignature, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let down = Tensor::randn(&[signature.rows, signature.rank], ADAPTER_INIT_STD, rng);
        let up = Tensor::zeros(&[signature.rank, signature.cols]);
        AdapterPair::new(down, up, scale).expect("signature already validated")
    }

    pub fn signature(&self) -> ShapeSignature {
        ShapeSignature {
            rows: self.down.shape()[0],
            cols: self.up.shape()[1],
            rank: self.down.shape()[1],
        }
    }

    pub fn num_params(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// `ΔW = scale · A·B`.
    pub fn delta(&self) -> Tensor {
        let mut w = self.down.matmul(&self.up).expect("pair shapes validated");
        w.data_mut().iter_mut().for_each(|v| *v *= self.scale);
        w
    }

    pub fn same_shape(&self, other: &AdapterPair) -> bool {
        self.down.shape() == other.down.shape() && self.up.shape() == other.up.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterSlot {
    Owned(AdapterPair),
    Shared(PositionId),
    Pruned,
}

impl AdapterSlot {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterSlot::Owned(_) => "owned",
            AdapterSlot::Shared(_) => "shared",
            AdapterSlot::Pruned => "pruned",
        }
    }
}

/// Registry of adapter slots, one per adaptation position.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    sites: Vec<Site>,
    slots: Vec<AdapterSlot>,
    signature: ShapeSignature,
    checkpoint: Option<KnowledgeCheckpointConfig>,
}

impl AdapterBank {
    /// Fresh bank with an owned, zero-start pair at every site.
    pub fn init(sites: Vec<Site>, signature: ShapeSignature, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = sites
            .iter()
            .map(|_| AdapterSlot::Owned(AdapterPair::init(signature, scale, &mut rng)))
            .collect();
        AdapterBank {
            sites,
            slots,
            signature,
            checkpoint: None,
        }
    }

    pub fn from_slots(
        sites: Vec<Site>,
        signature: ShapeSignature,
        slots: Vec<AdapterSlot>,
        checkpoint: Option<KnowledgeCheckpointConfig>,
    ) -> Result<Self> {
        if sites.len() != slots.len() {
            return Err(PearError::InvalidConfig(format!(
                "{} sites but {} slots",
                sites.len(),
                slots.len()
            )));
        }
        let bank = AdapterBank {
            sites,
            slots,
            signature,
            checkpoint,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Checks the slot invariants: shares point at owned slots and every
    /// owned pair matches the bank signature.
    pub fn validate(&self) -> Result<()> {
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                AdapterSlot::Owned(pair) => {
                    if pair.signature() != self.signature {
                        return Err(PearError::shape(
                            "adapter bank",
                            &[self.signature.rows, self.signature.rank, self.signature.cols],
                            &[pair.signature().rows, pair.signature().rank, pair.signature().cols],
                        ));
                    }
                }
                AdapterSlot::Shared(q) => match self.slots.get(q.0) {
                    Some(AdapterSlot::Owned(_)) => {}
                    _ => return Err(PearError::DanglingShare(PositionId(i))),
                },
                AdapterSlot::Pruned => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = PositionId> {
        (0..self.slots.len()).map(PositionId)
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, pos: PositionId) -> Option<Site> {
        self.sites.get(pos.0).copied()
    }

    /// Position adapting `site`, if the bank covers it.
    pub fn position_of(&self, site: Site) -> Option<PositionId> {
        self.sites.iter().position(|s| *s == site).map(PositionId)
    }

    pub fn signature(&self) -> ShapeSignature {
        self.signature
    }

    pub fn checkpoint(&self) -> Option<&KnowledgeCheckpointConfig> {
        self.checkpoint.as_ref()
    }

    pub(crate) fn set_checkpoint(&mut self, checkpoint: Option<KnowledgeCheckpointConfig>) {
        self.checkpoint = checkpoint;
    }

    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn slot(&self, pos: PositionId) -> Result<&AdapterSlot> {
        self.slots.get(pos.0).ok_or(PearError::UnknownPosition(pos))
    }

    pub(crate) fn set_slot(&mut self, pos: PositionId, slot: AdapterSlot) -> Result<()> {
        let target = self.slots.get_mut(pos.0).ok_or(PearError::UnknownPosition(pos))?;
        *target = slot;
        Ok(())
    }

    pub fn pair(&self, pos: PositionId) -> Result<&AdapterPair> {
        match self.slot(pos)? {
            AdapterSlot::Owned(pair) => Ok(pair),
            _ => Err(PearError::NotOwned(pos)),
        }
    }

    pub fn pair_mut(&mut self, pos: PositionId) -> Result<&mut AdapterPair> {
        match self.slots.get_mut(pos.0) {
            Some(AdapterSlot::Owned(pair)) => Ok(pair),
            Some(_) => Err(PearError::NotOwned(pos)),
            None => Err(PearError::UnknownPosition(pos)),
        }
    }

    /// The pair that adapts `pos`, following a share to its donor.
    /// `None` for a pruned position.
    pub fn resolve(&self, pos: PositionId) -> Result<Option<(PositionId, &AdapterPair)>> {
        match self.slot(pos)? {
            AdapterSlot::Owned(pair) => Ok(Some((pos, pair))),
            AdapterSlot::Shared(q) => match self.slots.get(q.0) {
                Some(AdapterSlot::Owned(pair)) => Ok(Some((*q, pair))),
                _ => Err(PearError::DanglingShare(pos)),
            },
            AdapterSlot::Pruned => Ok(None),
        }
    }

    pub fn owned_positions(&self) -> Vec<PositionId> {
        self.positions()
            .filter(|p| matches!(self.slots[p.0], AdapterSlot::Owned(_)))
            .collect()
    }

    pub fn owned_count(&self) -> usize {
        self.owned_positions().len()
    }

    /// Positions receiving adaptation ("params in effect").
    pub fn positions_in_effect(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| !matches!(s, AdapterSlot::Pruned))
            .count()
    }

    /// Stored trainable scalars ("actual params").
    pub fn actual_params(&self) -> usize {
        self.owned_count() * self.signature.pair_params()
    }

    /// `A` and `B` of every owned slot, each once, in position order.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                AdapterSlot::Owned(p) => Some([&p.down, &p.up]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.slots
            .iter_mut()
            .filter_map(|s| match s {
                AdapterSlot::Owned(p) => Some([&mut p.down, &mut p.up]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn zero_grad(&mut self) {
        crate::tensor::zero_grad(self.trainable_parameters_mut());
    }

    /// Drops stored gradients so the next backward starts from "absent".
    pub fn clear_grads(&mut self) {
        for p in self.trainable_parameters_mut() {
            p.clear_grad();
        }
    }

    /// Eager `x·W0 + scale·(x·A)·B` for the pair serving `pos`; pruned
    /// positions return `x·W0` exactly.
    pub fn forward_adapted(&self, pos: PositionId, x: &Tensor, frozen: &Tensor) -> Result<Tensor> {
        let base = x.matmul(frozen)?;
        let Some((_, pair)) = self.resolve(pos)? else {
            return Ok(base);
        };
        if frozen.shape() != [pair.down.shape()[0], pair.up.shape()[1]] {
            return Err(PearError::shape(
                "forward_adapted",
                frozen.shape(),
                &[pair.down.shape()[0], pair.up.shape()[1]],
            ));
        }
        let low = x.matmul(&pair.down)?.matmul(&pair.up)?;
        let mut out = base;
        for (o, l) in out.data_mut().iter_mut().zip(low.data()) {
            *o += pair.scale * l;
        }
        Ok(out)
    }

    /// Rounds all stored weights through `f32`, matching on-disk precision.
    pub fn round_to_f32(&mut self) {
        for p in self.trainable_parameters_mut() {
            p.round_to_f32();
        }
    }

    /// Places every owned pair on the tape. Shared positions reuse their
    /// donor's vars, so gradients from both sites sum into one pair.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BankBinding> {
        let mut owned: Vec<Option<(Var, Var)>> = vec![None; self.slots.len()];
        for (i, slot) in self.slots.iter().enumerate() {
            if let AdapterSlot::Owned(pair) = slot {
                let mut down = pair.down.clone();
                let mut up = pair.up.clone();
                down.clear_grad();
                up.clear_grad();
                down.set_requires_grad(trainable);
                up.set_requires_grad(trainable);
                owned[i] = Some((tape.leaf(down), tape.leaf(up)));
            }
        }
        let mut vars = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter().enumerate() {
            vars.push(match slot {
                AdapterSlot::Owned(pair) => owned[i].map(|(d, u)| BoundPair {
                    down: d,
                    up: u,
                    scale: pair.scale,
                }),
                AdapterSlot::Shared(q) => {
                    let Some(AdapterSlot::Owned(pair)) = self.slots.get(q.0) else {
                        return Err(PearError::DanglingShare(PositionId(i)));
                    };
                    owned[q.0].map(|(d, u)| BoundPair {
                        down: d,
                        up: u,
                        scale: pair.scale,
                    })
                }
                AdapterSlot::Pruned => None,
            });
        }
        Ok(BankBinding { vars, owned })
    }

    /// Adds the gradients gathered on `tape` into the owned pairs.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &BankBinding) {
        for (slot, owned) in self.slots.iter_mut().zip(&binding.owned) {
            if let (AdapterSlot::Owned(pair), Some((d, u))) = (slot, owned) {
                if let Some(g) = tape.grad(*d) {
                    pair.down.accumulate_grad(g);
                }
                if let Some(g) = tape.grad(*u) {
                    pair.up.accumulate_grad(g);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPair {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

/// Tape handles for a bank: the pair serving each position.
#[derive(Debug, Clone)]
pub struct BankBinding {
    vars: Vec<Option<BoundPair>>,
    owned: Vec<Option<(Var, Var)>>,
}

impl BankBinding {
    pub fn empty(len: usize) -> Self {
        BankBinding {
            vars: vec![None; len],
            owned: vec![None; len],
        }
    }

    pub fn get(&self, pos: PositionId) -> Option<BoundPair> {
        self.vars.get(pos.0).copied().flatten()
    }
}

/// Records `x·W0 + scale·(x·A)·B` on the tape; `x·W0` when no pair is bound.
pub fn adapted_linear(tape: &mut Tape, x: Var, frozen: Var, pair: Option<BoundPair>) -> Result<Var> {
    let base = tape.matmul(x, frozen)?;
    let Some(pair) = pair else { return Ok(base) };
    let low = tape.matmul(x, pair.down)?;
    let low = tape.matmul(low, pair.up)?;
    let low = if pair.scale == 1.0 {
        low
    } else {
        tape.scale(low, pair.scale)
    };
    tape.add(base, low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sites(n: usize) -> Vec<Site> {
        (0..n)
            .map(|i| Site {
                layer: i / 2,
                projection: if i % 2 == 0 {
                    Projection::Query
                } else {
                    Projection::Value
                },
            })
            .collect()
    }

    #[test]
    fn rank_must_be_low() {
        assert!(ShapeSignature::new(8, 8, 8).is_err());
        assert!(ShapeSignature::new(8, 8, 0).is_err());
        assert!(ShapeSignature::new(8, 4, 3).is_ok());
    }

    #[test]
    fn zero_up_projection_leaves_frozen_output() {
        let sig = ShapeSignature::new(6, 5, 2).unwrap();
        let bank = AdapterBank::init(sites(2), sig, 1.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let out = bank.forward_adapted(PositionId(0), &x, &w0).unwrap();
        assert_eq!(out, x.matmul(&w0).unwrap());
    }

    #[test]
    fn scalar_case() {
        // a = b = d = 1 is not low-rank, so build the slot directly.
        let pair = AdapterPair {
            down: Tensor::from_rows(&[&[2.0]]),
            up: Tensor::from_rows(&[&[3.0]]),
            scale: 1.0,
        };
        let bank = AdapterBank {
            sites: sites(1),
            slots: vec![AdapterSlot::Owned(pair)],
            signature: ShapeSignature {
                rows: 1,
                cols: 1,
                rank: 1,
            },
            checkpoint: None,
        };
        let out = bank
            .forward_adapted(PositionId(0), &Tensor::from_rows(&[&[1.0]]), &Tensor::zeros(&[1, 1]))
            .unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn pruned_and_dangling_slots() {
        let sig = ShapeSignature::new(4, 4, 1).unwrap();
        let mut bank = AdapterBank::init(sites(3), sig, 1.0, 0);
        bank.set_slot(PositionId(1), AdapterSlot::Pruned).unwrap();
        let x = Tensor::identity(4);
        let w0 = Tensor::identity(4);
        assert_eq!(bank.forward_adapted(PositionId(1), &x, &w0).unwrap(), w0);

        bank.set_slot(PositionId(2), AdapterSlot::Shared(PositionId(1))).unwrap();
        assert!(matches!(
            bank.forward_adapted(PositionId(2), &x, &w0),
            Err(PearError::DanglingShare(PositionId(2)))
        ));
        assert!(bank.validate().is_err());
    }

    #[test]
    fn counting_and_accounting() {
        let sig = ShapeSignature::new(8, 8, 2).unwrap();
        let mut bank = AdapterBank::init(sites(4), sig, 1.0, 0);
        let total: usize = bank.trainable_parameters().iter().map(|t| t.numel()).sum();
        assert_eq!(total, 128);
        assert_eq!(bank.actual_params(), 128);

        bank.set_slot(PositionId(0), AdapterSlot::Shared(PositionId(3))).unwrap();
        bank.set_slot(PositionId(1), AdapterSlot::Shared(PositionId(2))).unwrap();
        let total: usize = bank.trainable_parameters().iter().map(|t| t.numel()).sum();
        assert_eq!(total, 64);
        assert_eq!(bank.positions_in_effect(), 4);

        for p in 0..4 {
            bank.set_slot(PositionId(p), AdapterSlot::Pruned).unwrap();
        }
        assert!(bank.trainable_parameters().is_empty());
        assert_eq!(bank.positions_in_effect(), 0);
    }

    #[test]
    fn init_is_deterministic() {
        let sig = ShapeSignature::new(8, 8, 2).unwrap();
        assert_eq!(
            AdapterBank::init(sites(4), sig, 1.0, 42),
            AdapterBank::init(sites(4), sig, 1.0, 42)
        );
        assert_ne!(
            AdapterBank::init(sites(4), sig, 1.0, 42),
            AdapterBank::init(sites(4), sig, 1.0, 43)
        );
    }
}
