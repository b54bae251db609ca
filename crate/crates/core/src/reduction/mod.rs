//! Audio-token reduction policies.
//!
//! Every policy takes the audio rows of the hidden state at a layer boundary
//! and returns fewer rows plus, for each output row, the input rows it
//! stands for. Merge-style policies pick adjacent pairs by key similarity at
//! the operating layer; the weighted merge averages each cluster with the
//! attention mass each token received at that same layer.

mod baselines;
mod merge;

use std::fmt;
use std::str::FromStr;

pub use baselines::{atome_merge, fastv_evict, random_evict, random_merge};
pub use merge::{
    build_merge_plan, compute_adjacent_similarity, compute_merge_weights, weighted_merge,
    AdjacentSimilarity, Cluster, MergePlan, MergeWeights, WEIGHT_EPS,
};

use crate::error::{Error, Result};
use crate::runtime::{HiddenState, LayerTrace, ReductionHook};
use crate::schedule::Schedule;
use crate::tensor::{Matrix, Rng};

/// Reduced audio rows and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState {
    pub audio: Matrix,
    /// `groups[r]` lists the input audio rows behind output row `r`.
    pub groups: Vec<Vec<usize>>,
    /// Clusters that fell back to an unweighted mean.
    pub fallbacks: usize,
}

impl ReducedState {
    pub fn identity(audio: &Matrix) -> Self {
        Self {
            audio: audio.clone(),
            groups: (0..audio.rows()).map(|i| vec![i]).collect(),
            fallbacks: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyId {
    WeightedMerge,
    AverageMerge,
    Atome,
    FastV,
    RandomMerge,
    RandomEvict,
    None,
}

impl PolicyId {
    pub const ALL: [PolicyId; 7] = [
        PolicyId::WeightedMerge,
        PolicyId::AverageMerge,
        PolicyId::Atome,
        PolicyId::FastV,
        PolicyId::RandomMerge,
        PolicyId::RandomEvict,
        PolicyId::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::WeightedMerge => "weighted_merge",
            PolicyId::AverageMerge => "average_merge",
            PolicyId::Atome => "atome",
            PolicyId::FastV => "fastv",
            PolicyId::RandomMerge => "random_merge",
            PolicyId::RandomEvict => "random_evict",
            PolicyId::None => "none",
        }
    }

    /// Whether the policy reads the operating layer's keys or attention.
    pub fn needs_trace(self) -> bool {
        matches!(
            self,
            PolicyId::WeightedMerge | PolicyId::AverageMerge | PolicyId::Atome | PolicyId::FastV
        )
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownId {
                kind: "policy",
                value: s.to_string(),
            })
    }
}

/// Applies `policy` to the audio rows, removing `k` of them.
pub fn apply_policy(
    policy: PolicyId,
    audio: &Matrix,
    trace: Option<&LayerTrace>,
    layer: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<ReducedState> {
    if k == 0 || policy == PolicyId::None {
        return Ok(ReducedState::identity(audio));
    }
    let len = audio.rows();
    let need = |t: Option<&LayerTrace>| -> Result<Matrix> {
        Ok(t.ok_or(Error::TraceMissing { layer })?.audio_keys())
    };
    match policy {
        PolicyId::WeightedMerge | PolicyId::AverageMerge => {
            let keys = need(trace)?;
            let plan = build_merge_plan(&compute_adjacent_similarity(&keys)?, k)?;
            let weights = if policy == PolicyId::WeightedMerge {
                compute_merge_weights(trace, layer, len)?
            } else {
                MergeWeights::uniform(len)
            };
            weighted_merge(audio, &plan, &weights)
        }
        PolicyId::Atome => atome_merge(audio, &need(trace)?, k),
        PolicyId::FastV => fastv_evict(audio, &compute_merge_weights(trace, layer, len)?, k),
        PolicyId::RandomMerge => random_merge(audio, k, rng),
        PolicyId::RandomEvict => random_evict(audio, k, rng),
        PolicyId::None => unreachable!("handled above"),
    }
}

/// Runtime hook applying one policy with a per-layer token budget.
#[derive(Debug, Clone)]
pub struct PolicyHook {
    policy: PolicyId,
    budgets: Vec<usize>,
    rng: Rng,
    fallbacks: usize,
    applied: Vec<(usize, usize)>,
}

impl PolicyHook {
    pub fn new(policy: PolicyId, schedule: &Schedule, seed: u64) -> Self {
        Self::from_budgets(policy, schedule.per_layer_budget().to_vec(), seed)
    }

    pub fn from_budgets(policy: PolicyId, budgets: Vec<usize>, seed: u64) -> Self {
        Self {
            policy,
            budgets,
            rng: Rng::new(seed),
            fallbacks: 0,
            applied: Vec::new(),
        }
    }

    /// `policy` removing `k` tokens after a single layer.
    pub fn single(policy: PolicyId, num_layers: usize, layer: usize, k: usize, seed: u64) -> Self {
        let mut budgets = vec![0; num_layers];
        budgets[layer] = k;
        Self::from_budgets(policy, budgets, seed)
    }

    pub fn policy(&self) -> PolicyId {
        self.policy
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// `(layer, tokens removed)` for every layer that reduced.
    pub fn applied(&self) -> &[(usize, usize)] {
        &self.applied
    }

    fn budget(&self, layer: usize) -> usize {
        self.budgets.get(layer).copied().unwrap_or(0)
    }
}

impl ReductionHook for PolicyHook {
    fn needs_trace(&self, layer: usize) -> bool {
        self.policy.needs_trace() && self.budget(layer) > 0
    }

    fn after_layer(
        &mut self,
        layer: usize,
        state: &mut HiddenState,
        trace: Option<&LayerTrace>,
    ) -> Result<()> {
        let k = self.budget(layer);
        if k == 0 || self.policy == PolicyId::None {
            return Ok(());
        }
        let reduced = apply_policy(self.policy, &state.audio(), trace, layer, k, &mut self.rng)?;
        self.fallbacks += reduced.fallbacks;
        state.replace_audio(reduced.audio, &reduced.groups)?;
        self.applied.push((layer, k));
        Ok(())
    }
}
