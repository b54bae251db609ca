//! Gaussian entropy proxy of a feature matrix and transfer-entropy ranking
//! of candidate operation layers.
//!
//! Each token row of a feature matrix is treated as a Gaussian over the
//! hidden dimensions, so its differential entropy is `ln σ` plus a constant.
//! The proxy sums `ln σ` over rows. Transfer entropy of layer `i` compares
//! the proxy of the final layer's features when a weighted merge of `k`
//! tokens happens at layer `i` against merging the same `k` tokens out of the
//! final layer's features directly. Both matrices have the same row count.

use crate::error::{Error, Result};
use crate::reduction::{
    build_merge_plan, compute_adjacent_similarity, compute_merge_weights, weighted_merge, PolicyHook,
    PolicyId,
};
use crate::runtime::{prefill, ModelWeights, Sequence, TraceOptions};
use crate::tensor::{mean_std, Matrix};

/// Row standard deviations are floored here before the log.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// `Σ_rows ln(max(σ_row, 1e-12))`, with σ the population standard deviation
/// across the row's hidden dimensions.
pub fn layer_entropy(features: &Matrix) -> f64 {
    features
        .row_iter()
        .map(|row| mean_std(row).1.max(SIGMA_FLOOR).ln())
        .sum()
}

/// Candidate layers `1..=num_layers/2`, or just layer 0 for a 1-layer model.
pub fn default_candidates(num_layers: usize) -> Vec<usize> {
    let c: Vec<usize> = (1..=num_layers / 2).collect();
    if c.is_empty() {
        vec![0]
    } else {
        c
    }
}

/// Final-layer post-attention features when `k` audio tokens are merged at
/// `layer`. For the final layer itself the merge is applied to its own
/// features, since no later layer would see a hook's output.
pub fn final_features_with_merge_at(
    weights: &ModelWeights,
    seq: &Sequence,
    layer: usize,
    k: usize,
) -> Result<Matrix> {
    let config = weights.config();
    let last = config.final_layer();
    if layer > last {
        return Err(Error::Config(format!(
            "candidate layer {layer} outside a {}-layer model",
            config.num_layers
        )));
    }
    if k > 0 && k >= seq.audio_len() {
        return Err(Error::Budget {
            k,
            reason: format!("cannot merge {k} of {} audio tokens", seq.audio_len()),
        });
    }
    let trace = TraceOptions::only(vec![last]);
    if layer == last {
        let out = prefill(weights, seq, &mut crate::runtime::NoopHook, &trace)?;
        let t = out.trace(last)?;
        if k == 0 {
            return Ok(t.features.clone());
        }
        let plan = build_merge_plan(&compute_adjacent_similarity(&t.audio_keys())?, k)?;
        let w = compute_merge_weights(Some(t), last, t.audio_len)?;
        let merged = weighted_merge(&t.audio_features(), &plan, &w)?;
        let text = t.features.slice_rows(t.audio_len, t.features.rows());
        return merged.audio.vstack(&text);
    }
    let mut hook = PolicyHook::single(PolicyId::WeightedMerge, config.num_layers, layer, k, 0);
    let out = prefill(weights, seq, &mut hook, &trace)?;
    Ok(out.trace(last)?.features.clone())
}

/// `|H(merge at final layer) − H(final features | merge at layer)|`.
pub fn transfer_entropy(weights: &ModelWeights, seq: &Sequence, layer: usize, k: usize) -> Result<f64> {
    let last = weights.config().final_layer();
    let reference = layer_entropy(&final_features_with_merge_at(weights, seq, last, k)?);
    if layer == last {
        return Ok(0.0);
    }
    let probed = layer_entropy(&final_features_with_merge_at(weights, seq, layer, k)?);
    Ok((reference - probed).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEntropy {
    pub layer: usize,
    /// Entropy proxy of the final features with the merge at this layer.
    pub entropy: f64,
    pub transfer_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub k_tokens: usize,
    /// Entropy proxy of the final features merged in place.
    pub reference_entropy: f64,
    /// In candidate order.
    pub candidates: Vec<CandidateEntropy>,
    /// Candidate layers by ascending transfer entropy, lower layer on ties.
    pub ranking: Vec<usize>,
}

impl EntropyReport {
    pub fn selected(&self) -> usize {
        self.ranking[0]
    }

    pub fn rank_of(&self, layer: usize) -> Option<usize> {
        self.ranking.iter().position(|&l| l == layer).map(|r| r + 1)
    }
}

/// Layer with the least transfer entropy among `candidates`.
pub fn select_layer(
    weights: &ModelWeights,
    seq: &Sequence,
    candidates: &[usize],
    k: usize,
) -> Result<(usize, EntropyReport)> {
    if candidates.is_empty() {
        return Err(Error::Config("layer selection needs at least one candidate".into()));
    }
    let last = weights.config().final_layer();
    let reference_entropy = layer_entropy(&final_features_with_merge_at(weights, seq, last, k)?);
    let mut entries = Vec::with_capacity(candidates.len());
    for &layer in candidates {
        let (entropy, te) = if layer == last {
            (reference_entropy, 0.0)
        } else {
            let h = layer_entropy(&final_features_with_merge_at(weights, seq, layer, k)?);
            (h, (reference_entropy - h).abs())
        };
        entries.push(CandidateEntropy {
            layer,
            entropy,
            transfer_entropy: te,
        });
    }
    let mut ranked = entries.clone();
    ranked.sort_by(|a, b| {
        a.transfer_entropy
            .total_cmp(&b.transfer_entropy)
            .then(a.layer.cmp(&b.layer))
    });
    let ranking: Vec<usize> = ranked.iter().map(|c| c.layer).collect();
    let report = EntropyReport {
        k_tokens: k,
        reference_entropy,
        candidates: entries,
        ranking,
    };
    Ok((report.selected(), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let one = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        assert_eq!(layer_entropy(&one), 0.0);

        let two = Matrix::from_rows(&[[0.0, 2.0], [0.0, 4.0]]).unwrap();
        assert!((layer_entropy(&two) - std::f64::consts::LN_2).abs() < 1e-15);

        let flat = Matrix::from_rows(&[[3.0, 3.0, 3.0]]).unwrap();
        assert_eq!(layer_entropy(&flat), SIGMA_FLOOR.ln());
    }

    #[test]
    fn default_candidate_range() {
        assert_eq!(default_candidates(8), vec![1, 2, 3, 4]);
        assert_eq!(default_candidates(1), vec![0]);
        assert_eq!(default_candidates(3), vec![1]);
    }
}
