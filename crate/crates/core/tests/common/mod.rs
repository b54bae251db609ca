//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's kernels, planners or forward pass.

#![allow(dead_code)]

use fastadasp::runtime::{ModelConfig, ModelWeights, Sequence};
use fastadasp::tensor::{Matrix, Rng};

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn from_rows(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn random_rows(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Rows {
    (0..rows)
        .map(|_| (0..cols).map(|_| std * rng.gaussian()).collect())
        .collect()
}

/// Audio rows built from runs of a shared centre plus small noise, so
/// adjacent keys are often close. Text rows are independent.
pub fn segmented_sequence(rng: &mut Rng, audio_len: usize, text_len: usize, dim: usize) -> Sequence {
    let mut rows = Vec::with_capacity(audio_len + text_len);
    let mut centre: Vec<f64> = Vec::new();
    for i in 0..audio_len {
        if i == 0 || rng.uniform() < 0.3 {
            centre = (0..dim).map(|_| rng.gaussian()).collect();
        }
        rows.push(centre.iter().map(|c| 0.02 * (0.9 * c + 0.3 * rng.gaussian())).collect());
    }
    rows.extend(random_rows(rng, text_len, dim, 0.02));
    Sequence::new(from_rows(&rows), audio_len, text_len).unwrap()
}

pub fn small_config(num_layers: usize, hidden_dim: usize, num_heads: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        hidden_dim,
        ffn_dim: 2 * hidden_dim,
        num_heads,
        vocab_size: 32,
        max_positions: 512,
    }
}

/// Union-find over tokens joined by each pair index `i ~ i+1`.
pub fn oracle_groups(len: usize, pair_indices: &[usize]) -> Vec<Vec<usize>> {
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut y = x;
        while parent[y] != r {
            let next = parent[y];
            parent[y] = r;
            y = next;
        }
        r
    }
    let mut parent: Vec<usize> = (0..len).collect();
    for &i in pair_indices {
        let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for t in 0..len {
        let root = find(&mut parent, t);
        match groups.iter_mut().find(|g| g[0] == root) {
            Some(g) => g.push(t),
            None => groups.push(vec![t]),
        }
    }
    groups
}

/// First `k` pair indices after a full sort by score descending, index ascending.
pub fn oracle_top_pairs(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn oracle_cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// Each group becomes `Σ ω a / Σ ω`, or the plain mean when `Σ ω < 1e-12`.
pub fn oracle_group_average(audio: &Rows, groups: &[Vec<usize>], omega: &[f64]) -> Rows {
    groups
        .iter()
        .map(|g| {
            if g.len() == 1 {
                return audio[g[0]].clone();
            }
            let total: f64 = g.iter().map(|&t| omega[t]).sum();
            let dim = audio[g[0]].len();
            (0..dim)
                .map(|c| {
                    if total < 1e-12 {
                        g.iter().map(|&t| audio[t][c]).sum::<f64>() / g.len() as f64
                    } else {
                        g.iter().map(|&t| omega[t] * audio[t][c]).sum::<f64>() / total
                    }
                })
                .collect()
        })
        .collect()
}

pub fn oracle_merge(audio: &Rows, keys: &Rows, omega: &[f64], k: usize) -> Rows {
    let scores: Vec<f64> = keys.windows(2).map(|w| oracle_cosine(&w[0], &w[1])).collect();
    let groups = oracle_groups(audio.len(), &oracle_top_pairs(&scores, k));
    oracle_group_average(audio, &groups, omega)
}

fn mm(a: &Rows, b: &Matrix) -> Rows {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|c| row.iter().enumerate().map(|(i, x)| x * b.get(i, c)).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn norm_rows(x: &Rows, gain: &Matrix, bias: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / sd * gain.get(0, c) + bias.get(0, c))
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub struct RefLayer {
    pub keys: Rows,
    pub mass: Vec<f64>,
    pub features: Rows,
    pub audio_len: usize,
}

/// Plain-loop prefill. When `merge` is `Some((layer, k))`, the audio rows of
/// that layer's output are merged with the layer's own keys and column mass.
/// Returns every layer's record.
pub fn reference_prefill(w: &ModelWeights, seq: &Sequence, merge: Option<(usize, usize)>) -> Vec<RefLayer> {
    let cfg = *w.config();
    let heads = cfg.num_heads;
    let hd = cfg.hidden_dim / heads;
    let mut x = to_rows(seq.embeddings());
    for (p, row) in x.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += w.positional.get(p, c);
        }
    }
    let mut audio_len = seq.audio_len();
    let mut records = Vec::new();
    for (l, layer) in w.layers.iter().enumerate() {
        let n = x.len();
        let normed = norm_rows(&x, &layer.ln1_gain, &layer.ln1_bias);
        let q = mm(&normed, &layer.w_q);
        let k = mm(&normed, &layer.w_k);
        let v = mm(&normed, &layer.w_v);
        let mut attn = vec![vec![0.0; cfg.hidden_dim]; n];
        let mut mass = vec![0.0; n];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    let p = ej / z;
                    mass[j] += p;
                    for c in cols.clone() {
                        attn[i][c] += p * v[j][c];
                    }
                }
            }
        }
        let mid = add(&mm(&attn, &layer.w_o), &x);
        let inner: Rows = mm(&norm_rows(&mid, &layer.ln2_gain, &layer.ln2_bias), &layer.ffn_in)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let out = add(&mm(&inner, &layer.ffn_out), &mid);
        records.push(RefLayer {
            keys: k.clone(),
            mass: mass.clone(),
            features: mid,
            audio_len,
        });
        x = out;
        if let Some((ml, kk)) = merge {
            if ml == l && kk > 0 {
                let audio = x[..audio_len].to_vec();
                let merged = oracle_merge(&audio, &k[..audio_len].to_vec(), &mass[..audio_len], kk);
                let text = x[audio_len..].to_vec();
                audio_len = merged.len();
                x = merged.into_iter().chain(text).collect();
            }
        }
    }
    records
}

pub fn oracle_entropy(rows: &Rows) -> f64 {
    rows.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d).sqrt();
            sd.max(1e-12).ln()
        })
        .sum()
}

/// Entropy of the final layer's features merged in place with its own keys
/// and mass, versus with the merge performed after `layer`.
pub fn oracle_transfer_entropy(w: &ModelWeights, seq: &Sequence, layer: usize, k: usize) -> f64 {
    let last = w.config().num_layers - 1;
    let plain = reference_prefill(w, seq, None);
    let fin = &plain[last];
    let a = fin.audio_len;
    let merged = oracle_merge(&fin.features[..a].to_vec(), &fin.keys[..a].to_vec(), &fin.mass[..a], k);
    let reference: Rows = merged.into_iter().chain(fin.features[a..].iter().cloned()).collect();
    if layer == last {
        return (oracle_entropy(&reference) - oracle_entropy(&reference)).abs();
    }
    let probed = reference_prefill(w, seq, Some((layer, k)));
    (oracle_entropy(&reference) - oracle_entropy(&probed[last].features)).abs()
}
