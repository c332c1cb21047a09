//! Prune-and-share planning.
//!
//! Given finalized importance scores and a ratio, the `m = ⌊n·ratio⌋`
//! lowest-scoring positions are pruned and the `m` highest-scoring survivors
//! become donors. The i-th strongest pruned position is taken over by the
//! i-th strongest donor. Before a donor takes over, its weights may absorb
//! the pruned pair (knowledge checkpoint).

use crate::adapter::{AdapterBank, AdapterPair, AdapterSlot, PositionId};
use crate::error::{PearError, Result};
use crate::importance::ImportanceReport;
use crate::tensor::Tensor;

pub const MAX_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    None,
    /// Direct aggregation: donor += pruned.
    Da,
    /// Score-based aggregation: donor = c1·donor + c2·pruned.
    Sba,
}

impl CheckpointMode {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointMode::None => "none",
            CheckpointMode::Da => "da",
            CheckpointMode::Sba => "sba",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "none" => Some(CheckpointMode::None),
            "da" => Some(CheckpointMode::Da),
            "sba" => Some(CheckpointMode::Sba),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientSource {
    Manual { c1: f64, c2: f64 },
    /// `c1 = s_donor / (s_donor + s_pruned)`, `c2 = 1 − c1`.
    FromScores,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnowledgeCheckpointConfig {
    pub mode: CheckpointMode,
    pub coefficients: CoefficientSource,
}

impl Default for KnowledgeCheckpointConfig {
    fn default() -> Self {
        KnowledgeCheckpointConfig {
            mode: CheckpointMode::None,
            coefficients: CoefficientSource::Manual { c1: 0.5, c2: 0.5 },
        }
    }
}

impl KnowledgeCheckpointConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn da() -> Self {
        KnowledgeCheckpointConfig {
            mode: CheckpointMode::Da,
            ..Self::default()
        }
    }

    pub fn sba(c1: f64, c2: f64) -> Self {
        KnowledgeCheckpointConfig {
            mode: CheckpointMode::Sba,
            coefficients: CoefficientSource::Manual { c1, c2 },
        }
    }

    pub fn sba_from_scores() -> Self {
        KnowledgeCheckpointConfig {
            mode: CheckpointMode::Sba,
            coefficients: CoefficientSource::FromScores,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CoefficientSource::Manual { c1, c2 } = self.coefficients {
            for c in [c1, c2] {
                if !c.is_finite() {
                    return Err(PearError::NonFiniteCoefficient(c));
                }
                if c < 0.0 {
                    return Err(PearError::InvalidConfig(format!("negative coefficient {c}")));
                }
            }
        }
        Ok(())
    }

    /// Coefficients applied to one donor/pruned pair.
    pub fn resolve(&self, donor_score: f64, pruned_score: f64) -> (f64, f64) {
        match (self.mode, self.coefficients) {
            (CheckpointMode::None, _) => (1.0, 0.0),
            (CheckpointMode::Da, _) => (1.0, 1.0),
            (CheckpointMode::Sba, CoefficientSource::Manual { c1, c2 }) => (c1, c2),
            (CheckpointMode::Sba, CoefficientSource::FromScores) => {
                let total = donor_score + pruned_score;
                if total > 0.0 {
                    let c1 = donor_score / total;
                    (c1, 1.0 - c1)
                } else {
                    (0.5, 0.5)
                }
            }
        }
    }
}

/// One pruned position and the donor that takes it over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub pruned: PositionId,
    pub donor: PositionId,
    /// Resolved checkpoint coefficients for this pair.
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharePlan {
    pub ratio: f64,
    /// Owned positions the plan was computed over.
    pub n: usize,
    /// Pruned positions, descending contribution.
    pub pruned: Vec<PositionId>,
    /// Donor positions, descending contribution.
    pub donors: Vec<PositionId>,
    /// Rank-matched pairs, in the order of `pruned`.
    pub assignment: Vec<Assignment>,
    pub checkpoint: KnowledgeCheckpointConfig,
}

impl SharePlan {
    pub fn m(&self) -> usize {
        self.pruned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pruned.is_empty()
    }

    pub fn donor_of(&self, pruned: PositionId) -> Option<PositionId> {
        self.assignment
            .iter()
            .find(|a| a.pruned == pruned)
            .map(|a| a.donor)
    }

    /// Structural checks used after deserialization.
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        self.checkpoint.validate()?;
        let m = prune_count(self.n, self.ratio);
        let bad = |d: &str| Err(PearError::malformed("share plan", d.to_string()));
        if self.pruned.len() != m || self.donors.len() != m || self.assignment.len() != m {
            return bad("list lengths disagree with floor(n * ratio)");
        }
        let mut all: Vec<_> = self.pruned.iter().chain(&self.donors).collect();
        all.sort();
        all.dedup();
        if all.len() != 2 * m {
            return bad("pruned and donor positions overlap or repeat");
        }
        for ((a, p), d) in self.assignment.iter().zip(&self.pruned).zip(&self.donors) {
            if a.pruned != *p || a.donor != *d {
                return bad("assignment is not rank-matched");
            }
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(PearError::InvalidRatio(ratio));
    }
    Ok(())
}

/// `⌊n·ratio⌋`, robust to the representation error of decimal ratios.
pub fn prune_count(n: usize, ratio: f64) -> usize {
    let exact = n as f64 * ratio;
    (exact + 1e-9 * exact.max(1.0)).floor() as usize
}

pub fn plan(
    report: &ImportanceReport,
    ratio: f64,
    checkpoint: KnowledgeCheckpointConfig,
) -> Result<SharePlan> {
    check_ratio(ratio)?;
    checkpoint.validate()?;
    let ranking = report.rank()?;
    let n = ranking.len();
    let m = prune_count(n, ratio);
    if ratio > MAX_RATIO {
        return Err(PearError::InsufficientDonors { ratio, m, n });
    }
    if n < 2 {
        return Err(PearError::TooFewPositions(n));
    }
    let pruned = ranking[n - m..].to_vec();
    let donors = ranking[..m].to_vec();
    let assignment = pruned
        .iter()
        .zip(&donors)
        .map(|(&p, &d)| {
            let score = |pos| report.score(pos).unwrap_or(0.0);
            let (c1, c2) = checkpoint.resolve(score(d), score(p));
            Assignment {
                pruned: p,
                donor: d,
                c1,
                c2,
            }
        })
        .collect();
    Ok(SharePlan {
        ratio,
        n,
        pruned,
        donors,
        assignment,
        checkpoint,
    })
}

/// What happens to a pruned position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    /// Weight-tied share of the donor (Pear).
    Share,
    /// Independent copy of the (checkpointed) donor; adds parameters back.
    ShareUntied,
    /// Leave the position unadapted.
    Vanilla,
}

/// Rewrites the bank according to `plan`. Vanilla mode ignores the
/// checkpoint configuration. The bank is left untouched on error.
pub fn apply(bank: &mut AdapterBank, plan: &SharePlan, mode: PruneMode) -> Result<()> {
    for a in &plan.assignment {
        let donor = bank.pair(a.donor)?;
        let pruned = bank.pair(a.pruned)?;
        if !donor.same_shape(pruned) {
            return Err(PearError::shape(
                "apply",
                donor.down.shape(),
                pruned.down.shape(),
            ));
        }
    }
    if plan.is_empty() {
        return Ok(());
    }
    for a in &plan.assignment {
        match mode {
            PruneMode::Vanilla => bank.set_slot(a.pruned, AdapterSlot::Pruned)?,
            PruneMode::Share | PruneMode::ShareUntied => {
                if plan.checkpoint.mode != CheckpointMode::None {
                    let merged = checkpoint_sba(bank.pair(a.donor)?, bank.pair(a.pruned)?, a.c1, a.c2)?;
                    *bank.pair_mut(a.donor)? = merged;
                }
                let slot = if mode == PruneMode::Share {
                    AdapterSlot::Shared(a.donor)
                } else {
                    let mut copy = bank.pair(a.donor)?.clone();
                    copy.down.clear_grad();
                    copy.up.clear_grad();
                    AdapterSlot::Owned(copy)
                };
                bank.set_slot(a.pruned, slot)?;
            }
        }
    }
    bank.set_checkpoint(match mode {
        PruneMode::Vanilla => None,
        _ => Some(plan.checkpoint),
    });
    bank.validate()
}

/// Direct aggregation: `A_ += A`, `B_ += B`.
pub fn checkpoint_da(donor: &AdapterPair, pruned: &AdapterPair) -> Result<AdapterPair> {
    combine(donor, pruned, |d, p| d + p)
}

/// Score-based aggregation: `A_ = c1·A_ + c2·A`, likewise for `B`.
pub fn checkpoint_sba(donor: &AdapterPair, pruned: &AdapterPair, c1: f64, c2: f64) -> Result<AdapterPair> {
    for c in [c1, c2] {
        if !c.is_finite() {
            return Err(PearError::NonFiniteCoefficient(c));
        }
    }
    combine(donor, pruned, |d, p| c1 * d + c2 * p)
}

fn combine(donor: &AdapterPair, pruned: &AdapterPair, f: impl Fn(f64, f64) -> f64) -> Result<AdapterPair> {
    if !donor.same_shape(pruned) {
        return Err(PearError::shape(
            "knowledge checkpoint",
            donor.down.shape(),
            pruned.down.shape(),
        ));
    }
    let merge = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    };
    AdapterPair::new(
        merge(&donor.down, &pruned.down)?,
        merge(&donor.up, &pruned.up)?,
        donor.scale,
    )
}
