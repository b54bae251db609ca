//! Where reduction happens: per-layer token budgets for dense prompts, and
//! transfer-entropy ranking of a single operation layer for sparse ones.

mod entropy;

use std::fmt;
use std::str::FromStr;

pub use entropy::{
    default_candidates, final_features_with_merge_at, layer_entropy, select_layer,
    transfer_entropy, CandidateEntropy, EntropyReport, SIGMA_FLOOR,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Constant,
    Decay,
    SingleLayer,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::Constant,
        ScheduleKind::Decay,
        ScheduleKind::SingleLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Decay => "decay",
            ScheduleKind::SingleLayer => "single_layer",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownId {
                kind: "schedule",
                value: s.to_string(),
            })
    }
}

/// Tokens to remove after each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    kind: ScheduleKind,
    start_layer: usize,
    per_layer_budget: Vec<usize>,
}

impl Schedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn start_layer(&self) -> usize {
        self.start_layer
    }

    pub fn per_layer_budget(&self) -> &[usize] {
        &self.per_layer_budget
    }

    pub fn total(&self) -> usize {
        self.per_layer_budget.iter().sum()
    }

    /// Layers with a non-zero budget.
    pub fn operation_layers(&self) -> Vec<usize> {
        self.per_layer_budget
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 0)
            .map(|(l, _)| l)
            .collect()
    }

    /// At least one audio token must survive every merge.
    pub fn check_feasible(&self, audio_len: usize) -> Result<()> {
        let total = self.total();
        if total > 0 && total >= audio_len {
            return Err(Error::Budget {
                k: total,
                reason: format!("at most {} of {audio_len} audio tokens can be removed", audio_len.saturating_sub(1)),
            });
        }
        Ok(())
    }
}

fn check_start(start: usize, num_layers: usize) -> Result<()> {
    if start >= num_layers {
        return Err(Error::Config(format!(
            "start layer {start} outside a {num_layers}-layer model"
        )));
    }
    Ok(())
}

/// Splits `total` in proportion to integer `weights`: floors first, then one
/// extra token each to the largest remainders, earlier entries winning ties.
fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let denom: usize = weights.iter().sum();
    if denom == 0 {
        return vec![0; weights.len()];
    }
    let mut shares: Vec<usize> = weights.iter().map(|w| total * w / denom).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = total * weights[a] % denom;
        let rb = total * weights[b] % denom;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        shares[i] += 1;
    }
    shares
}

fn spread(kind: ScheduleKind, start: usize, num_layers: usize, active: Vec<usize>) -> Schedule {
    let mut per_layer_budget = vec![0; start];
    per_layer_budget.extend(active);
    debug_assert_eq!(per_layer_budget.len(), num_layers);
    Schedule {
        kind,
        start_layer: start,
        per_layer_budget,
    }
}

/// Same budget at every layer from `start` on, remainders to earlier layers.
pub fn make_constant_schedule(total_k: usize, start: usize, num_layers: usize) -> Result<Schedule> {
    check_start(start, num_layers)?;
    let active = num_layers - start;
    let shares = largest_remainder(total_k, &vec![1; active]);
    Ok(spread(ScheduleKind::Constant, start, num_layers, shares))
}

/// Budgets proportional to `A-1, A-2, ..., 0` over the `A` active layers.
pub fn make_decay_schedule(total_k: usize, start: usize, num_layers: usize) -> Result<Schedule> {
    check_start(start, num_layers)?;
    let active = num_layers - start;
    if active < 2 {
        return Err(Error::Config(format!(
            "a decay schedule needs at least 2 active layers, start layer {start} leaves {active}"
        )));
    }
    let weights: Vec<usize> = (0..active).rev().collect();
    let shares = largest_remainder(total_k, &weights);
    Ok(spread(ScheduleKind::Decay, start, num_layers, shares))
}

/// The whole budget after one layer.
pub fn make_single_layer_schedule(total_k: usize, layer: usize, num_layers: usize) -> Result<Schedule> {
    check_start(layer, num_layers)?;
    let mut per_layer_budget = vec![0; num_layers];
    per_layer_budget[layer] = total_k;
    Ok(Schedule {
        kind: ScheduleKind::SingleLayer,
        start_layer: layer,
        per_layer_budget,
    })
}

pub fn make_schedule(kind: ScheduleKind, total_k: usize, start: usize, num_layers: usize) -> Result<Schedule> {
    match kind {
        ScheduleKind::Constant => make_constant_schedule(total_k, start, num_layers),
        ScheduleKind::Decay => make_decay_schedule(total_k, start, num_layers),
        ScheduleKind::SingleLayer => make_single_layer_schedule(total_k, start, num_layers),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_examples() {
        assert_eq!(make_constant_schedule(12, 0, 4).unwrap().per_layer_budget(), &[3, 3, 3, 3]);
        assert_eq!(make_constant_schedule(10, 0, 4).unwrap().per_layer_budget(), &[3, 3, 2, 2]);
        assert_eq!(make_constant_schedule(0, 1, 4).unwrap().per_layer_budget(), &[0, 0, 0, 0]);
        assert_eq!(make_constant_schedule(5, 2, 4).unwrap().per_layer_budget(), &[0, 0, 3, 2]);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(make_decay_schedule(12, 0, 4).unwrap().per_layer_budget(), &[6, 4, 2, 0]);
        assert_eq!(make_decay_schedule(1, 2, 4).unwrap().per_layer_budget(), &[0, 0, 1, 0]);
        assert!(make_decay_schedule(3, 3, 4).is_err());
    }

    #[test]
    fn bad_start_and_feasibility() {
        assert!(make_constant_schedule(3, 4, 4).is_err());
        let s = make_single_layer_schedule(10, 2, 4).unwrap();
        assert_eq!(s.operation_layers(), vec![2]);
        assert!(s.check_feasible(11).is_ok());
        assert!(s.check_feasible(10).is_err());
        assert!(make_constant_schedule(0, 0, 2).unwrap().check_feasible(0).is_ok());
    }

    #[test]
    fn kind_strings() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.as_str().parse::<ScheduleKind>().unwrap(), k);
        }
        assert!("linear".parse::<ScheduleKind>().is_err());
    }

    proptest! {
        #[test]
        fn decay_non_increasing(total in 0usize..500, start in 0usize..6, extra in 2usize..12) {
            let n = start + extra;
            let s = make_decay_schedule(total, start, n).unwrap();
            let b = &s.per_layer_budget()[start..];
            prop_assert!(b.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(*b.last().unwrap(), 0);
            prop_assert_eq!(s.total(), total);
        }
    }
}
