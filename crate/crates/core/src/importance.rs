//! First-order Taylor importance of adapter pairs.
//!
//! Each owned pair is scored as a unit: during warm-up, every mini-batch adds
//! `Σ |w · ∂L/∂w|` over all elements of both `A` and `B`. [`finalize`] turns
//! the running sums into per-step means.
//!
//! [`finalize`]: ImportanceReport::finalize

use std::collections::BTreeMap;

use crate::adapter::{AdapterBank, PositionId};
use crate::error::{PearError, Result};

/// How the per-step contribution of a pair is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaylorRule {
    /// `Σ_i |w_i g_i|`.
    ElementwiseAbs,
    /// `|Σ_i w_i g_i|`, kept for ablation.
    SummedAbs,
}

impl TaylorRule {
    pub fn tag(self) -> &'static str {
        match self {
            TaylorRule::ElementwiseAbs => "taylor-elementwise-abs",
            TaylorRule::SummedAbs => "taylor-summed-abs",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "taylor-elementwise-abs" => Some(TaylorRule::ElementwiseAbs),
            "taylor-summed-abs" => Some(TaylorRule::SummedAbs),
            _ => None,
        }
    }

    pub fn contribution(self, weights: &[f64], grads: &[f64]) -> f64 {
        let products = weights.iter().zip(grads).map(|(w, g)| w * g);
        match self {
            TaylorRule::ElementwiseAbs => products.map(f64::abs).sum(),
            TaylorRule::SummedAbs => products.sum::<f64>().abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    scores: BTreeMap<PositionId, f64>,
    steps: usize,
    rule: TaylorRule,
    finalized: bool,
}

impl ImportanceReport {
    pub fn new(rule: TaylorRule) -> Self {
        ImportanceReport {
            scores: BTreeMap::new(),
            steps: 0,
            rule,
            finalized: false,
        }
    }

    /// Already-final report built from known scores.
    pub fn from_scores(scores: impl IntoIterator<Item = (PositionId, f64)>, steps: usize, rule: TaylorRule) -> Result<Self> {
        let scores: BTreeMap<_, _> = scores.into_iter().collect();
        if let Some((_, s)) = scores.iter().find(|(_, s)| !(s.is_finite() && **s >= 0.0)) {
            return Err(PearError::malformed("importance report", format!("invalid score {s}")));
        }
        if steps == 0 {
            return Err(PearError::NoSteps);
        }
        Ok(ImportanceReport {
            scores,
            steps,
            rule,
            finalized: true,
        })
    }

    pub fn scores(&self) -> &BTreeMap<PositionId, f64> {
        &self.scores
    }

    pub fn score(&self, pos: PositionId) -> Option<f64> {
        self.scores.get(&pos).copied()
    }

    pub fn steps_accumulated(&self) -> usize {
        self.steps
    }

    pub fn rule(&self) -> TaylorRule {
        self.rule
    }

    pub fn is_final(&self) -> bool {
        self.finalized
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Adds one mini-batch of contributions from the gradients currently held
    /// by the bank's owned pairs.
    pub fn accumulate_step(&mut self, bank: &AdapterBank) -> Result<()> {
        if self.finalized {
            return Err(PearError::AlreadyFinal);
        }
        let owned = bank.owned_positions();
        let mut increments = Vec::with_capacity(owned.len());
        for pos in owned {
            let pair = bank.pair(pos)?;
            let (Some(gd), Some(gu)) = (pair.down.grad(), pair.up.grad()) else {
                return Err(PearError::NoGradients(pos));
            };
            let inc = self.rule.contribution(pair.down.data(), gd)
                + self.rule.contribution(pair.up.data(), gu);
            increments.push((pos, inc));
        }
        if self.steps > 0 && increments.len() != self.scores.len() {
            return Err(PearError::InvalidConfig(
                "owned positions changed during accumulation".into(),
            ));
        }
        for (pos, inc) in increments {
            *self.scores.entry(pos).or_insert(0.0) += inc;
        }
        self.steps += 1;
        Ok(())
    }

    /// Divides each running sum by the number of accumulated steps. A report
    /// can be finalized once.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Err(PearError::AlreadyFinal);
        }
        if self.steps == 0 {
            return Err(PearError::NoSteps);
        }
        let steps = self.steps as f64;
        self.scores.values_mut().for_each(|s| *s /= steps);
        self.finalized = true;
        Ok(())
    }

    /// Positions by descending score, ties by ascending id.
    pub fn rank(&self) -> Result<Vec<PositionId>> {
        if !self.finalized {
            return Err(PearError::NotFinal);
        }
        Ok(rank_scores(&self.scores))
    }
}

pub(crate) fn rank_scores(scores: &BTreeMap<PositionId, f64>) -> Vec<PositionId> {
    let mut ids: Vec<PositionId> = scores.keys().copied().collect();
    ids.sort_by(|a, b| scores[b].total_cmp(&scores[a]).then(a.cmp(b)));
    ids
}
