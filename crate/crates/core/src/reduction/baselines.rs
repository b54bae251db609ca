//! Reference reduction policies the weighted merge is compared against.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

use super::merge::{compute_adjacent_similarity, weighted_merge, MergePlan, MergeWeights};
use super::ReducedState;

fn keep_rows(audio: &Matrix, evicted: &[bool]) -> Result<ReducedState> {
    let mut out = Matrix::zeros(0, audio.cols());
    let mut groups = Vec::new();
    for (i, row) in audio.row_iter().enumerate() {
        if !evicted[i] {
            out.push_row(row)?;
            groups.push(vec![i]);
        }
    }
    Ok(ReducedState {
        audio: out,
        groups,
        fallbacks: 0,
    })
}

fn check_evict_budget(k: usize, len: usize) -> Result<()> {
    if k > len {
        return Err(Error::Budget {
            k,
            reason: format!("cannot evict more than the {len} audio tokens"),
        });
    }
    Ok(())
}

/// `k` uniformly random adjacent pairs, chained into clusters and averaged.
pub fn random_merge(audio: &Matrix, k: usize, rng: &mut Rng) -> Result<ReducedState> {
    let len = audio.rows();
    if k == 0 {
        return Ok(ReducedState::identity(audio));
    }
    if k >= len {
        return Err(Error::Budget {
            k,
            reason: format!("at most {} merges for {len} tokens", len.saturating_sub(1)),
        });
    }
    let plan = MergePlan::from_indices(len, rng.sample_indices(len - 1, k))?;
    weighted_merge(audio, &plan, &MergeWeights::uniform(len))
}

/// Drops `k` uniformly random tokens.
pub fn random_evict(audio: &Matrix, k: usize, rng: &mut Rng) -> Result<ReducedState> {
    let len = audio.rows();
    check_evict_budget(k, len)?;
    let mut evicted = vec![false; len];
    for i in rng.sample_indices(len, k) {
        evicted[i] = true;
    }
    keep_rows(audio, &evicted)
}

/// Greedy non-overlapping pair merge: adjacent pairs are taken in order of
/// key similarity (lower index on ties), skipping any pair that shares a
/// token with one already taken, and each pair becomes its plain mean.
pub fn atome_merge(audio: &Matrix, keys: &Matrix, k: usize) -> Result<ReducedState> {
    let len = audio.rows();
    if keys.rows() != len {
        return Err(Error::Shape(format!(
            "{} key rows for {len} audio rows",
            keys.rows()
        )));
    }
    if k == 0 {
        return Ok(ReducedState::identity(audio));
    }
    if k > len / 2 {
        return Err(Error::Budget {
            k,
            reason: format!("pairwise merging removes at most {} of {len} tokens", len / 2),
        });
    }
    let sim = compute_adjacent_similarity(keys)?;
    let scores = sim.scores();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    let mut used = vec![false; len];
    let mut chosen = Vec::with_capacity(k);
    for i in order {
        if chosen.len() == k {
            break;
        }
        if !used[i] && !used[i + 1] {
            used[i] = true;
            used[i + 1] = true;
            chosen.push(i);
        }
    }
    if chosen.len() < k {
        return Err(Error::Budget {
            k,
            reason: format!("only {} disjoint pairs available", chosen.len()),
        });
    }
    // chosen pairs never touch, so every cluster is exactly one pair
    let plan = MergePlan::from_indices(len, chosen)?;
    weighted_merge(audio, &plan, &MergeWeights::uniform(len))
}

/// Evicts the `k` tokens with the least attention mass; among equal masses
/// the higher index goes first. Survivors keep their order.
pub fn fastv_evict(audio: &Matrix, weights: &MergeWeights, k: usize) -> Result<ReducedState> {
    let len = audio.rows();
    check_evict_budget(k, len)?;
    if weights.len() != len {
        return Err(Error::Shape(format!(
            "{} attention weights for {len} audio rows",
            weights.len()
        )));
    }
    let w = weights.as_slice();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|a, b| w[*a].total_cmp(&w[*b]).then(b.cmp(a)));
    let mut evicted = vec![false; len];
    for &i in &order[..k] {
        evicted[i] = true;
    }
    keep_rows(audio, &evicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    /// Keys whose adjacent cosines are exactly `cos θ_i` for the given angles.
    fn keys_with_angles(angles: &[f64]) -> Matrix {
        let mut theta = 0.0;
        let mut rows = vec![vec![1.0, 0.0]];
        for a in angles {
            theta += a;
            rows.push(vec![f64::cos(theta), f64::sin(theta)]);
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn fastv_examples() {
        let a = column(&[10.0, 20.0, 30.0]);
        let out = fastv_evict(&a, &MergeWeights::new(vec![3.0, 1.0, 2.0]).unwrap(), 1).unwrap();
        assert_eq!(out.groups, vec![vec![0], vec![2]]);
        assert_eq!(out.audio.data(), &[10.0, 30.0]);

        let out = fastv_evict(&a, &MergeWeights::new(vec![3.0, 1.0, 2.0]).unwrap(), 0).unwrap();
        assert_eq!(out.audio, a);

        let out = fastv_evict(&a, &MergeWeights::uniform(3), 1).unwrap();
        assert_eq!(out.groups, vec![vec![0], vec![1]]);

        assert!(fastv_evict(&a, &MergeWeights::uniform(3), 4).is_err());
    }

    #[test]
    fn atome_examples() {
        // cosines 0.9 then 0.8
        let keys = keys_with_angles(&[0.9f64.acos(), 0.8f64.acos()]);
        let a = column(&[1.0, 3.0, 7.0]);
        let out = atome_merge(&a, &keys, 1).unwrap();
        assert_eq!(out.groups, vec![vec![0, 1], vec![2]]);
        assert_eq!(out.audio.data(), &[2.0, 7.0]);
        assert!(matches!(atome_merge(&a, &keys, 2), Err(Error::Budget { k: 2, .. })));

        let same = Matrix::from_rows(&[[0.5, -1.0]; 4]).unwrap();
        let out = atome_merge(&same, &same, 2).unwrap();
        assert_eq!(out.audio, Matrix::from_rows(&[[0.5, -1.0]; 2]).unwrap());
    }

    #[test]
    fn atome_never_chains() {
        // the middle pair is best, which blocks both neighbours
        let keys = keys_with_angles(&[0.5, 0.1, 0.6]);
        let a = column(&[1.0, 2.0, 3.0, 4.0]);
        let out = atome_merge(&a, &keys, 1).unwrap();
        assert_eq!(out.groups, vec![vec![0], vec![1, 2], vec![3]]);
        assert!(atome_merge(&a, &keys, 2).is_err());
    }

    #[test]
    fn random_policies() {
        let a = column(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(random_merge(&a, 0, &mut Rng::new(1)).unwrap().audio, a);
        assert_eq!(random_evict(&a, 0, &mut Rng::new(1)).unwrap().audio, a);
        assert_eq!(random_evict(&a, 4, &mut Rng::new(1)).unwrap().audio.rows(), 1);
        assert!(random_merge(&a, 5, &mut Rng::new(1)).is_err());
        assert!(random_evict(&a, 6, &mut Rng::new(1)).is_err());

        let m1 = random_merge(&a, 2, &mut Rng::new(9)).unwrap();
        let m2 = random_merge(&a, 2, &mut Rng::new(9)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.audio.rows(), 3);
        let e1 = random_evict(&a, 3, &mut Rng::new(9)).unwrap();
        assert_eq!(e1, random_evict(&a, 3, &mut Rng::new(9)).unwrap());
    }
}
