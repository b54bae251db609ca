//! Pre-LN decoder forward passes: prompt prefill with between-layer reduction
//! hooks, and single-token decoding against the KV cache.

use std::time::{Duration, Instant};

use super::cache::{KvCache, LayerCache};
use super::model::{LayerWeights, ModelWeights, Sequence};
use crate::error::{Error, Result};
use crate::metrics::RunTimings;
use crate::tensor::{matmul, matmul_transposed, softmax_in_place, softmax_rows_in_place, Mask, Matrix};

const LN_EPS: f64 = 1e-5;

/// Residual stream between layers, with the original prompt positions that
/// each row stands for. A merged row carries all of its members' positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub hidden: Matrix,
    pub audio_len: usize,
    pub positions: Vec<Vec<usize>>,
}

impl HiddenState {
    fn from_sequence(seq: &Sequence, hidden: Matrix) -> Self {
        Self {
            hidden,
            audio_len: seq.audio_len(),
            positions: (0..seq.prompt_len()).map(|p| vec![p]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.audio_len
    }

    pub fn audio(&self) -> Matrix {
        self.hidden.slice_rows(0, self.audio_len)
    }

    /// Replaces the audio rows. `groups[r]` lists the current audio rows that
    /// output row `r` stands for; text rows are left untouched.
    pub fn replace_audio(&mut self, audio: Matrix, groups: &[Vec<usize>]) -> Result<()> {
        if audio.rows() != groups.len() {
            return Err(Error::Hook(format!(
                "{} reduced audio rows but {} position groups",
                audio.rows(),
                groups.len()
            )));
        }
        let mut positions = Vec::with_capacity(groups.len() + self.text_len());
        for g in groups {
            let mut merged = Vec::new();
            for &row in g {
                if row >= self.audio_len {
                    return Err(Error::Hook(format!(
                        "group references row {row} outside the {} audio rows",
                        self.audio_len
                    )));
                }
                merged.extend_from_slice(&self.positions[row]);
            }
            positions.push(merged);
        }
        positions.extend_from_slice(&self.positions[self.audio_len..]);
        let text = self.hidden.slice_rows(self.audio_len, self.len());
        self.hidden = audio.vstack(&text)?;
        self.audio_len = audio.rows();
        self.positions = positions;
        Ok(())
    }
}

/// What a layer recorded during prefill, for the reduction policies and the
/// entropy probes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// Audio rows at the layer's input.
    pub audio_len: usize,
    /// Column sums of the causal attention probabilities, summed over heads
    /// and over every query row. Sums to `heads * rows`.
    pub attention_mass: Vec<f64>,
    /// Head-summed probability matrix, kept only on request.
    pub attention: Option<Matrix>,
    /// Largest `|row sum - 1|` seen over all heads and rows.
    pub max_row_sum_error: f64,
    /// Full-width key states of every input row.
    pub keys: Matrix,
    /// Residual stream after the attention sub-block, before the FFN.
    pub features: Matrix,
}

impl LayerTrace {
    pub fn audio_keys(&self) -> Matrix {
        self.keys.slice_rows(0, self.audio_len)
    }

    pub fn audio_features(&self) -> Matrix {
        self.features.slice_rows(0, self.audio_len)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum TraceLayers {
    #[default]
    None,
    All,
    Only(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub layers: TraceLayers,
    pub keep_attention: bool,
}

impl TraceOptions {
    pub fn all() -> Self {
        Self {
            layers: TraceLayers::All,
            keep_attention: false,
        }
    }

    pub fn only(layers: Vec<usize>) -> Self {
        Self {
            layers: TraceLayers::Only(layers),
            keep_attention: false,
        }
    }

    fn covers(&self, layer: usize) -> bool {
        match &self.layers {
            TraceLayers::None => false,
            TraceLayers::All => true,
            TraceLayers::Only(ls) => ls.contains(&layer),
        }
    }
}

/// Called after each layer's full block; may shorten the audio part of the
/// hidden state that the next layer receives.
pub trait ReductionHook {
    fn needs_trace(&self, _layer: usize) -> bool {
        false
    }

    fn after_layer(
        &mut self,
        layer: usize,
        state: &mut HiddenState,
        trace: Option<&LayerTrace>,
    ) -> Result<()>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopHook;

impl ReductionHook for NoopHook {
    fn after_layer(&mut self, _: usize, _: &mut HiddenState, _: Option<&LayerTrace>) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KvCache,
    pub traces: Vec<Option<LayerTrace>>,
    pub state: HiddenState,
    /// Input length of every layer.
    pub layer_lengths: Vec<usize>,
    /// Logits of the last prompt row.
    pub logits: Vec<f64>,
}

impl Prefill {
    pub fn final_hidden(&self) -> &Matrix {
        &self.state.hidden
    }

    pub fn trace(&self, layer: usize) -> Result<&LayerTrace> {
        self.traces
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(Error::TraceMissing { layer })
    }
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn feed_forward(layer: &LayerWeights, x: &Matrix) -> Result<Matrix> {
    let mut inner = matmul(x, &layer.ffn_in)?;
    for r in 0..inner.rows() {
        inner.row_mut(r).iter_mut().for_each(|v| *v = gelu(*v));
    }
    matmul(&inner, &layer.ffn_out)
}

struct AttentionStats {
    mass: Vec<f64>,
    probs: Option<Matrix>,
    max_row_sum_error: f64,
}

/// Causal multi-head attention of every row against every row.
fn prompt_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    trace: bool,
    keep_attention: bool,
) -> Result<(Matrix, Option<AttentionStats>)> {
    let (n, d) = q.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut stats = trace.then(|| AttentionStats {
        mass: vec![0.0; n],
        probs: keep_attention.then(|| Matrix::zeros(n, n)),
        max_row_sum_error: 0.0,
    });
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let mut probs = matmul_transposed(&qh, &kh)?;
        probs.scale(scale);
        softmax_rows_in_place(&mut probs, Mask::Causal)?;
        if let Some(s) = stats.as_mut() {
            for (r, row) in probs.row_iter().enumerate() {
                let visible = &row[..=r];
                s.max_row_sum_error = s
                    .max_row_sum_error
                    .max((visible.iter().sum::<f64>() - 1.0).abs());
                for (m, p) in s.mass.iter_mut().zip(visible) {
                    *m += p;
                }
            }
            if let Some(acc) = s.probs.as_mut() {
                acc.add_assign(&probs)?;
            }
        }
        let head_out = matmul(&probs, &vh)?;
        for r in 0..n {
            out.row_mut(r)[lo..hi].copy_from_slice(head_out.row(r));
        }
    }
    Ok((out, stats))
}

fn logits_for(weights: &ModelWeights, hidden_row: &[f64]) -> Result<Vec<f64>> {
    let x = Matrix::from_vec(1, hidden_row.len(), hidden_row.to_vec())?;
    Ok(matmul(&x, &weights.output_head)?.into_vec())
}

fn check_hook_result(
    layer: usize,
    state: &HiddenState,
    prev_audio: usize,
    text_positions: &[Vec<usize>],
    dim: usize,
) -> Result<()> {
    let fail = |msg: String| Err(Error::Hook(format!("after layer {layer}: {msg}")));
    if state.hidden.cols() != dim {
        return fail(format!("hidden width changed to {}", state.hidden.cols()));
    }
    if state.positions.len() != state.len() {
        return fail(format!(
            "{} rows but {} position tags",
            state.len(),
            state.positions.len()
        ));
    }
    if state.audio_len > prev_audio {
        return fail(format!("audio grew from {prev_audio} to {}", state.audio_len));
    }
    if state.len() < state.audio_len || state.positions[state.audio_len..] != *text_positions {
        return fail("text rows were altered".into());
    }
    if state.is_empty() {
        return fail("no rows left".into());
    }
    if !state.hidden.is_finite() {
        return fail("non-finite hidden state".into());
    }
    Ok(())
}

/// Runs the prompt through every layer, filling the KV cache. After layer
/// `l`'s block the hook may shorten the audio rows; layer `l` itself keeps
/// its full-length cache and every later layer sees the reduced rows.
pub fn prefill(
    weights: &ModelWeights,
    seq: &Sequence,
    hook: &mut dyn ReductionHook,
    trace: &TraceOptions,
) -> Result<Prefill> {
    let config = *weights.config();
    if seq.hidden_dim() != config.hidden_dim {
        return Err(Error::Shape(format!(
            "sequence width {} does not match hidden_dim {}",
            seq.hidden_dim(),
            config.hidden_dim
        )));
    }
    let len = seq.prompt_len();
    if len > config.max_positions {
        return Err(Error::ContextLength {
            len,
            max: config.max_positions,
        });
    }
    let mut x = seq.embeddings().clone();
    x.add_assign(&weights.positional.slice_rows(0, len))?;
    let mut state = HiddenState::from_sequence(seq, x);
    let text_positions = state.positions[seq.audio_len()..].to_vec();

    let mut caches = Vec::with_capacity(config.num_layers);
    let mut traces = Vec::with_capacity(config.num_layers);
    let mut layer_lengths = Vec::with_capacity(config.num_layers);
    for (l, layer) in weights.layers.iter().enumerate() {
        let want_trace = trace.covers(l) || hook.needs_trace(l);
        layer_lengths.push(state.len());

        let normed = layer_norm(&state.hidden, &layer.ln1_gain, &layer.ln1_bias);
        let q = matmul(&normed, &layer.w_q)?;
        let k = matmul(&normed, &layer.w_k)?;
        let v = matmul(&normed, &layer.w_v)?;
        let (attn, stats) = prompt_attention(
            &q,
            &k,
            &v,
            config.num_heads,
            want_trace,
            trace.keep_attention,
        )?;
        let mut mid = matmul(&attn, &layer.w_o)?;
        mid.add_assign(&state.hidden)?;
        let ffn = feed_forward(layer, &layer_norm(&mid, &layer.ln2_gain, &layer.ln2_bias))?;
        let mut out = ffn;
        out.add_assign(&mid)?;

        let layer_trace = stats.map(|s| LayerTrace {
            layer: l,
            audio_len: state.audio_len,
            attention_mass: s.mass,
            attention: s.probs,
            max_row_sum_error: s.max_row_sum_error,
            keys: k.clone(),
            features: mid,
        });
        caches.push(LayerCache { keys: k, values: v });
        state.hidden = out;

        let prev_audio = state.audio_len;
        hook.after_layer(l, &mut state, layer_trace.as_ref())?;
        check_hook_result(l, &state, prev_audio, &text_positions, config.hidden_dim)?;
        traces.push(layer_trace);
    }

    let logits = logits_for(weights, state.hidden.row(state.len() - 1))?;
    Ok(Prefill {
        cache: KvCache::with_layers(caches, len),
        traces,
        state,
        layer_lengths,
        logits,
    })
}

/// Feeds one new token embedding through every layer, appending its key and
/// value to each layer's cache, and returns the next-token logits.
pub fn decode_step(weights: &ModelWeights, cache: &mut KvCache, new_embedding: &[f64]) -> Result<Vec<f64>> {
    let config = weights.config();
    cache.check_layers(config.num_layers)?;
    if new_embedding.len() != config.hidden_dim {
        return Err(Error::Shape(format!(
            "token embedding has {} entries, expected {}",
            new_embedding.len(),
            config.hidden_dim
        )));
    }
    let heads = config.num_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut h = Matrix::from_vec(1, config.hidden_dim, new_embedding.to_vec())?;
    let mut scores = Vec::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        let normed = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
        let q = matmul(&normed, &layer.w_q)?;
        let k = matmul(&normed, &layer.w_k)?;
        let v = matmul(&normed, &layer.w_v)?;
        let lc = cache.layer_mut(l);
        lc.append(k.data(), v.data())?;

        // one pass over the cache rows for all heads, scores stored head-major
        let n = lc.len();
        scores.clear();
        scores.resize(heads * n, 0.0);
        let qd = q.data();
        for (j, kr) in lc.keys.row_iter().enumerate() {
            for head in 0..heads {
                let (lo, hi) = (head * hd, (head + 1) * hd);
                scores[head * n + j] = qd[lo..hi].iter().zip(&kr[lo..hi]).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
        }
        for head in 0..heads {
            softmax_in_place(&mut scores[head * n..(head + 1) * n]);
        }
        let mut attn = vec![0.0; config.hidden_dim];
        for (j, vr) in lc.values.row_iter().enumerate() {
            for head in 0..heads {
                let p = scores[head * n + j];
                let (lo, hi) = (head * hd, (head + 1) * hd);
                for (o, x) in attn[lo..hi].iter_mut().zip(&vr[lo..hi]) {
                    *o += p * x;
                }
            }
        }
        let attn = Matrix::from_vec(1, config.hidden_dim, attn)?;
        let mut mid = matmul(&attn, &layer.w_o)?;
        mid.add_assign(&h)?;
        let mut out = feed_forward(layer, &layer_norm(&mid, &layer.ln2_gain, &layer.ln2_bias))?;
        out.add_assign(&mid)?;
        h = out;
    }
    cache.advance();
    logits_for(weights, h.row(0))
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `steps` tokens, starting by feeding `first_token`.
pub fn decode_greedy(
    weights: &ModelWeights,
    cache: &mut KvCache,
    first_token: usize,
    steps: usize,
) -> Result<Vec<usize>> {
    let mut tokens = Vec::with_capacity(steps);
    let mut current = first_token;
    for _ in 0..steps {
        let emb = weights.embed(current, cache.next_position())?;
        let logits = decode_step(weights, cache, &emb)?;
        current = argmax(&logits);
        tokens.push(current);
    }
    Ok(tokens)
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub prefill: Prefill,
    /// Greedy argmax of the prefill logits; the first decode input.
    pub prefill_token: usize,
    /// One token per decode step.
    pub tokens: Vec<usize>,
    pub prefill_time: Duration,
    pub decode_time: Duration,
}

impl Generation {
    pub fn timings(&self, audio_seconds: f64) -> RunTimings {
        RunTimings {
            prefill_seconds: self.prefill_time.as_secs_f64(),
            decode_seconds: self.decode_time.as_secs_f64(),
            audio_seconds,
            generated_tokens: self.tokens.len(),
        }
    }
}

/// Prefill followed by `steps` greedy decode steps, timing each phase.
pub fn generate(
    weights: &ModelWeights,
    seq: &Sequence,
    hook: &mut dyn ReductionHook,
    trace: &TraceOptions,
    steps: usize,
) -> Result<Generation> {
    if steps == 0 {
        return Err(Error::Config("generate needs at least one decode step".into()));
    }
    let start = Instant::now();
    let mut prefill = prefill(weights, seq, hook, trace)?;
    let prefill_time = start.elapsed();
    let prefill_token = argmax(&prefill.logits);
    let start = Instant::now();
    let tokens = decode_greedy(weights, &mut prefill.cache, prefill_token, steps)?;
    let decode_time = start.elapsed();
    Ok(Generation {
        prefill,
        prefill_token,
        tokens,
        prefill_time,
        decode_time,
    })
}
