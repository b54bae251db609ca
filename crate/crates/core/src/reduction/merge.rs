use crate::error::{Error, Result};
use crate::runtime::LayerTrace;
use crate::tensor::{cosine_similarity, Matrix};

use super::ReducedState;

/// Cluster weight sums below this fall back to an unweighted mean.
pub const WEIGHT_EPS: f64 = 1e-12;

/// Cosine similarity of each audio token's key with the next token's key.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacentSimilarity {
    scores: Vec<f64>,
}

impl AdjacentSimilarity {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|p| !(-1.0..=1.0).contains(*p)) {
            return Err(Error::Shape(format!("similarity score {bad} outside [-1, 1]")));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Number of tokens the scores were computed over.
    pub fn audio_len(&self) -> usize {
        self.scores.len() + 1
    }
}

pub fn compute_adjacent_similarity(keys: &Matrix) -> Result<AdjacentSimilarity> {
    if keys.rows() < 2 {
        return Err(Error::Shape(format!(
            "adjacent similarity needs at least 2 audio tokens, got {}",
            keys.rows()
        )));
    }
    let scores = (0..keys.rows() - 1)
        .map(|i| cosine_similarity(keys.row(i), keys.row(i + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdjacentSimilarity { scores })
}

/// A maximal run of adjacent tokens merged into one, `first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cluster {
    pub first: usize,
    pub last: usize,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Which adjacent pairs merge. Index `i` in `merge_indices` joins tokens
/// `i` and `i + 1`; consecutive indices chain into one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergePlan {
    audio_len: usize,
    merge_indices: Vec<usize>,
    clusters: Vec<Cluster>,
}

impl MergePlan {
    /// Plan from an arbitrary set of pair indices.
    pub fn from_indices(audio_len: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i + 1 >= audio_len) {
            return Err(Error::Budget {
                k: indices.len(),
                reason: format!("pair index {bad} outside {audio_len} tokens"),
            });
        }
        let mut clusters: Vec<Cluster> = Vec::new();
        for &i in &indices {
            match clusters.last_mut() {
                Some(c) if c.last == i => c.last = i + 1,
                _ => clusters.push(Cluster {
                    first: i,
                    last: i + 1,
                }),
            }
        }
        Ok(Self {
            audio_len,
            merge_indices: indices,
            clusters,
        })
    }

    pub fn identity(audio_len: usize) -> Self {
        Self {
            audio_len,
            merge_indices: Vec::new(),
            clusters: Vec::new(),
        }
    }

    pub fn audio_len(&self) -> usize {
        self.audio_len
    }

    pub fn merge_indices(&self) -> &[usize] {
        &self.merge_indices
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn removed(&self) -> usize {
        self.merge_indices.len()
    }

    pub fn output_len(&self) -> usize {
        self.audio_len - self.removed()
    }

    /// Input token indices behind each output row.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.output_len());
        let mut next = 0;
        for c in &self.clusters {
            out.extend((next..c.first).map(|i| vec![i]));
            out.push(c.tokens().collect());
            next = c.last + 1;
        }
        out.extend((next..self.audio_len).map(|i| vec![i]));
        out
    }
}

/// Top-`k` adjacent pairs by similarity (lower index wins ties), grouped
/// into maximal runs.
pub fn build_merge_plan(similarity: &AdjacentSimilarity, k: usize) -> Result<MergePlan> {
    let audio_len = similarity.audio_len();
    let pairs = similarity.scores.len();
    if k > pairs {
        return Err(Error::Budget {
            k,
            reason: format!("at most {pairs} merges for {audio_len} tokens"),
        });
    }
    let mut order: Vec<usize> = (0..pairs).collect();
    let by_score = |a: &usize, b: &usize| {
        similarity.scores[*b]
            .total_cmp(&similarity.scores[*a])
            .then(a.cmp(b))
    };
    if k > 0 && k < pairs {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    order.truncate(k);
    MergePlan::from_indices(audio_len, order)
}

/// Per-token cumulative attention received, summed over heads and query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    weights: Vec<f64>,
}

impl MergeWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Shape(format!("merge weight {bad} is not a finite non-negative value")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            weights: vec![1.0; len],
        }
    }

    /// Column sums of a (head-summed) attention probability matrix, keeping
    /// the first `audio_len` columns.
    pub fn from_attention(attention: &Matrix, audio_len: usize) -> Result<Self> {
        if audio_len > attention.cols() {
            return Err(Error::Shape(format!(
                "{audio_len} audio columns requested from a {}-column attention matrix",
                attention.cols()
            )));
        }
        let mut sums = attention.column_sums();
        sums.truncate(audio_len);
        Self::new(sums)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * alpha).collect(),
        }
    }
}

/// Audio-column attention mass of the operating `layer`.
pub fn compute_merge_weights(
    trace: Option<&LayerTrace>,
    layer: usize,
    audio_len: usize,
) -> Result<MergeWeights> {
    let trace = trace.ok_or(Error::TraceMissing { layer })?;
    if audio_len > trace.attention_mass.len() {
        return Err(Error::Shape(format!(
            "{audio_len} audio tokens but the trace covers {} columns",
            trace.attention_mass.len()
        )));
    }
    MergeWeights::new(trace.attention_mass[..audio_len].to_vec())
}

/// Replaces each cluster by `Σ ω_j a_j / Σ ω_j`; tokens outside every cluster
/// are copied unchanged. A cluster whose weights sum below [`WEIGHT_EPS`]
/// gets the plain mean and is counted in `fallbacks`.
pub fn weighted_merge(audio: &Matrix, plan: &MergePlan, weights: &MergeWeights) -> Result<ReducedState> {
    let len = audio.rows();
    if plan.audio_len() != len || weights.len() != len {
        return Err(Error::Shape(format!(
            "merge inputs disagree: {len} audio rows, plan over {}, {} weights",
            plan.audio_len(),
            weights.len()
        )));
    }
    let mut in_plan = vec![false; len];
    for &i in plan.merge_indices() {
        in_plan[i] = true;
    }
    let w = weights.as_slice();
    let mut out = Matrix::zeros(0, audio.cols());
    let mut groups = Vec::with_capacity(plan.output_len());
    let mut fallbacks = 0;
    let mut acc = vec![0.0; audio.cols()];
    let mut i = 0;
    while i < len {
        if !in_plan[i] {
            out.push_row(audio.row(i))?;
            groups.push(vec![i]);
            i += 1;
            continue;
        }
        // a run of pair indices i..j-1 covers tokens i..=j
        let mut j = i;
        while in_plan[j] {
            j += 1;
        }
        let total: f64 = w[i..=j].iter().sum();
        acc.iter_mut().for_each(|x| *x = 0.0);
        if total >= WEIGHT_EPS {
            for t in i..=j {
                for (a, x) in acc.iter_mut().zip(audio.row(t)) {
                    *a += w[t] * x;
                }
            }
            acc.iter_mut().for_each(|x| *x /= total);
        } else {
            fallbacks += 1;
            for t in i..=j {
                for (a, x) in acc.iter_mut().zip(audio.row(t)) {
                    *a += x;
                }
            }
            let n = (j - i + 1) as f64;
            acc.iter_mut().for_each(|x| *x /= n);
        }
        out.push_row(&acc)?;
        groups.push((i..=j).collect());
        i = j + 1;
    }
    Ok(ReducedState {
        audio: out,
        groups,
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(scores: &[f64]) -> AdjacentSimilarity {
        AdjacentSimilarity::from_scores(scores.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let same = Matrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        assert!(compute_adjacent_similarity(&same)
            .unwrap()
            .scores()
            .iter()
            .all(|p| (p - 1.0).abs() < 1e-15));

        let alt = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(compute_adjacent_similarity(&alt).unwrap().scores(), &[0.0, 0.0]);

        let rows = Matrix::from_rows(&[[3.0, 4.0], [4.0, 3.0], [4.0, 3.0]]).unwrap();
        let p = compute_adjacent_similarity(&rows).unwrap();
        assert!((p.scores()[0] - 0.96).abs() < 1e-15);
        assert!((p.scores()[1] - 1.0).abs() < 1e-15);

        assert!(compute_adjacent_similarity(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn plan_worked_example() {
        let plan = build_merge_plan(&sim(&[0.9, 0.8, 0.1, 0.95, 0.2]), 3).unwrap();
        assert_eq!(plan.merge_indices(), &[0, 1, 3]);
        assert_eq!(
            plan.clusters(),
            &[Cluster { first: 0, last: 2 }, Cluster { first: 3, last: 4 }]
        );
        assert_eq!(plan.output_len(), 3);
        assert_eq!(plan.groups(), vec![vec![0, 1, 2], vec![3, 4], vec![5]]);
    }

    #[test]
    fn plan_zero_and_ties() {
        let plan = build_merge_plan(&sim(&[0.3, 0.7]), 0).unwrap();
        assert!(plan.merge_indices().is_empty() && plan.clusters().is_empty());
        let plan = build_merge_plan(&sim(&[0.5, 0.5]), 1).unwrap();
        assert_eq!(plan.merge_indices(), &[0]);
        assert!(matches!(
            build_merge_plan(&sim(&[0.5, 0.5]), 3),
            Err(Error::Budget { k: 3, .. })
        ));
    }

    #[test]
    fn weighted_merge_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [3.0, 0.0], [5.0, 0.0]]).unwrap();
        let plan = MergePlan::from_indices(3, vec![0, 1]).unwrap();
        let w = MergeWeights::new(vec![1.0, 1.0, 2.0]).unwrap();
        let out = weighted_merge(&a, &plan, &w).unwrap();
        assert_eq!(out.audio.data(), &[3.5, 0.0]);

        let a = Matrix::from_rows(&[[2.0, 4.0], [4.0, 8.0]]).unwrap();
        let plan = MergePlan::from_indices(2, vec![0]).unwrap();
        let out = weighted_merge(&a, &plan, &MergeWeights::uniform(2)).unwrap();
        assert_eq!(out.audio.data(), &[3.0, 6.0]);
        let out = weighted_merge(&a, &plan, &MergeWeights::new(vec![0.7, 0.7]).unwrap()).unwrap();
        assert!((out.audio.get(0, 0) - 3.0).abs() < 1e-15 && (out.audio.get(0, 1) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn identity_plan_is_exact() {
        let a = Matrix::from_rows(&[[0.1, -0.3], [1e-9, 7.0], [2.5, 0.0]]).unwrap();
        let w = MergeWeights::new(vec![0.3, 0.0, 11.0]).unwrap();
        let out = weighted_merge(&a, &MergePlan::identity(3), &w).unwrap();
        assert_eq!(out.audio, a);
        assert_eq!(out.fallbacks, 0);
    }

    #[test]
    fn zero_weight_cluster_falls_back_to_mean() {
        let a = Matrix::from_rows(&[[2.0], [4.0], [9.0]]).unwrap();
        let plan = MergePlan::from_indices(3, vec![0]).unwrap();
        let out = weighted_merge(&a, &plan, &MergeWeights::new(vec![0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(out.audio.data(), &[3.0, 9.0]);
        assert_eq!(out.fallbacks, 1);
    }

    #[test]
    fn merge_weights_from_delta_attention() {
        // both queries put all their mass on column 0
        let attn = Matrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let w = MergeWeights::from_attention(&attn, 3).unwrap();
        assert_eq!(w.as_slice(), &[2.0, 0.0, 0.0]);
        assert!(MergeWeights::new(vec![-1.0]).is_err());
        assert!(matches!(compute_merge_weights(None, 4, 3), Err(Error::TraceMissing { layer: 4 })));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let a = Matrix::zeros(3, 2);
        assert!(weighted_merge(&a, &MergePlan::identity(4), &MergeWeights::uniform(3)).is_err());
        assert!(weighted_merge(&a, &MergePlan::identity(3), &MergeWeights::uniform(2)).is_err());
        assert!(MergePlan::from_indices(3, vec![2]).is_err());
    }
}
