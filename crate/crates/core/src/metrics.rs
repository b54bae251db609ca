//! Analytical FLOPs model, real-time factor, throughput and KV-cache sizing.
//!
//! The per-layer FLOPs count covers the attention score/value products, the
//! four `D x D` projections and the FFN. Softmax and layer-norm costs are
//! left out, so reported savings are slightly optimistic.

use crate::error::{Error, Result};
use crate::runtime::ModelConfig;

/// `2n²d + 4nd² + 2ndm` for one decoder layer over `n` tokens.
pub fn layer_flops(n: f64, d: f64, m: f64) -> f64 {
    2.0 * n * n * d + 4.0 * n * d * d + 2.0 * n * d * m
}

/// One decoding query against `cache_len` keys: `2·len·d + 4d² + 2dm`.
pub fn decode_step_flops(cache_len: f64, d: f64, m: f64) -> f64 {
    2.0 * cache_len * d + 4.0 * d * d + 2.0 * d * m
}

/// FLOPs saved by the layer after a reduction that keeps `n(1 - k)` tokens:
/// `k + (k - k²) / (1 + (2d + m) / n)`.
pub fn reduction_rate(k: f64, n: f64, d: f64, m: f64) -> f64 {
    k + (k - k * k) / (1.0 + (2.0 * d + m) / n)
}

/// Inverse of [`reduction_rate`] in `k`, by bisection to 1e-9.
pub fn k_for_target_rate(target: f64, n: f64, d: f64, m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!(
            "target reduction rate {target} outside [0, 1]"
        )));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    if target == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if reduction_rate(mid, n, d, m) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsSummary {
    pub baseline: f64,
    pub reduced: f64,
    /// `100 * (1 - reduced / baseline)`
    pub reduction_pct: f64,
}

/// Whole-run FLOPs from per-layer prefill input lengths, plus `decode_steps`
/// single-query steps where step `s` at layer `l` attends over
/// `len_l + s + 1` keys.
pub fn aggregate_run_flops(
    baseline_lengths: &[usize],
    reduced_lengths: &[usize],
    d: usize,
    m: usize,
    decode_steps: usize,
) -> Result<FlopsSummary> {
    if baseline_lengths.is_empty() || baseline_lengths.len() != reduced_lengths.len() {
        return Err(Error::Shape(format!(
            "per-layer lengths disagree: {} baseline layers, {} reduced layers",
            baseline_lengths.len(),
            reduced_lengths.len()
        )));
    }
    let total = |lengths: &[usize]| -> f64 {
        let (d, m) = (d as f64, m as f64);
        lengths
            .iter()
            .map(|&n| {
                let prefill = layer_flops(n as f64, d, m);
                let decode: f64 = (0..decode_steps)
                    .map(|s| decode_step_flops((n + s + 1) as f64, d, m))
                    .sum();
                prefill + decode
            })
            .sum()
    };
    let baseline = total(baseline_lengths);
    let reduced = total(reduced_lengths);
    let reduction_pct = if reduced == baseline {
        0.0
    } else {
        (100.0 * (1.0 - reduced / baseline)).clamp(0.0, 100.0)
    };
    Ok(FlopsSummary {
        baseline,
        reduced,
        reduction_pct,
    })
}

/// Wall-clock phases of one generation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunTimings {
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    /// Nominal duration of the audio the prompt encodes.
    pub audio_seconds: f64,
    pub generated_tokens: usize,
}

/// Real-time factor `(T_prefill + T_decode) / T_audio`.
pub fn rtf(t: &RunTimings) -> Result<f64> {
    if !(t.audio_seconds > 0.0) {
        return Err(Error::Config(format!(
            "audio duration must be positive, got {}",
            t.audio_seconds
        )));
    }
    Ok((t.prefill_seconds + t.decode_seconds) / t.audio_seconds)
}

/// Decoded tokens per second of decode time.
pub fn throughput(t: &RunTimings) -> Result<f64> {
    if t.generated_tokens == 0 || !(t.decode_seconds > 0.0) {
        return Err(Error::Config(
            "throughput needs at least one token and positive decode time".into(),
        ));
    }
    Ok(t.generated_tokens as f64 / t.decode_seconds)
}

/// Bytes held by the K and V caches: `Σ 2 · len · D · bytes_per_scalar`.
pub fn kv_bytes(config: &ModelConfig, lengths: &[usize], bytes_per_scalar: u64) -> u64 {
    lengths
        .iter()
        .map(|&len| 2 * len as u64 * config.hidden_dim as u64 * bytes_per_scalar)
        .sum()
}

/// How many sequences of `per_sequence` cache bytes fit in `budget` bytes.
pub fn max_batch(budget: u64, per_sequence: u64) -> u64 {
    if per_sequence == 0 {
        return u64::MAX;
    }
    budget / per_sequence
}

/// Median of a non-empty sample; the mean of the two middle values when even.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub policy: String,
    pub schedule: String,
    pub operation_layers: Vec<usize>,
    pub audio_len: usize,
    pub text_len: usize,
    pub decode_steps: usize,
    pub seed: u64,
    /// Requested FLOPs reduction as a ratio, when the run was target-driven.
    pub target_rate: Option<f64>,
    pub k_tokens: usize,
    pub flops_reduction_pct: f64,
    pub rtf: f64,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    pub throughput: f64,
    pub kv_bytes_baseline: u64,
    pub kv_bytes_reduced: u64,
    pub fallback_warnings: usize,
}

impl RunReport {
    /// Column order of [`RunReport::csv_fields`].
    pub const CSV_HEADER: [&'static str; 19] = [
        "status",
        "policy",
        "schedule",
        "operation_layers",
        "audio_len",
        "text_len",
        "decode_steps",
        "seed",
        "target_pct",
        "k_tokens",
        "flops_reduction_pct",
        "kv_bytes_baseline",
        "kv_bytes_reduced",
        "fallback_warnings",
        "rtf",
        "prefill_s",
        "decode_s",
        "throughput_tok_s",
        "error",
    ];

    /// Columns that depend on wall-clock measurements.
    pub const TIMING_COLUMNS: [&'static str; 4] = ["rtf", "prefill_s", "decode_s", "throughput_tok_s"];

    pub fn layers_label(&self) -> String {
        self.operation_layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            "ok".into(),
            self.policy.clone(),
            self.schedule.clone(),
            self.layers_label(),
            self.audio_len.to_string(),
            self.text_len.to_string(),
            self.decode_steps.to_string(),
            self.seed.to_string(),
            self.target_rate
                .map(|t| format!("{:.1}", 100.0 * t))
                .unwrap_or_default(),
            self.k_tokens.to_string(),
            format!("{:.4}", self.flops_reduction_pct),
            self.kv_bytes_baseline.to_string(),
            self.kv_bytes_reduced.to_string(),
            self.fallback_warnings.to_string(),
            format!("{:.6}", self.rtf),
            format!("{:.6}", self.prefill_seconds),
            format!("{:.6}", self.decode_seconds),
            format!("{:.3}", self.throughput),
            String::new(),
        ]
    }
}

/// Markdown table with one row per run: FLOPs reduction, RTF, phase
/// latencies and decode throughput.
pub fn cost_table_markdown(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "| Policy | FLOPs Reduction % | Real Time Factor ↓ | Pre-filling Latency (s) ↓ | Decoding Latency (s) ↓ | Throughput (token/s) ↑ |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in reports {
        out.push_str(&format!(
            "| {} | {:.2} | {:.3} | {:.3} | {:.3} | {:.2} |\n",
            r.policy, r.flops_reduction_pct, r.rtf, r.prefill_seconds, r.decode_seconds, r.throughput
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_flops_examples() {
        assert_eq!(layer_flops(100.0, 64.0, 256.0), 6_195_200.0);
        let (d, m) = (64.0, 256.0);
        assert_eq!(layer_flops(1.0, d, m), 2.0 * d + 4.0 * d * d + 2.0 * d * m);
        assert!(layer_flops(200.0, d, m) > 2.0 * layer_flops(100.0, d, m));
    }

    #[test]
    fn reduction_rate_examples() {
        assert_eq!(reduction_rate(0.0, 384.0, 64.0, 256.0), 0.0);
        assert_eq!(reduction_rate(1.0, 384.0, 64.0, 256.0), 1.0);
        assert!((reduction_rate(0.5, 384.0, 64.0, 256.0) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn inverse_rate() {
        assert_eq!(k_for_target_rate(0.0, 500.0, 64.0, 256.0).unwrap(), 0.0);
        assert_eq!(k_for_target_rate(1.0, 500.0, 64.0, 256.0).unwrap(), 1.0);
        let k = k_for_target_rate(0.3, 500.0, 64.0, 256.0).unwrap();
        assert!((reduction_rate(k, 500.0, 64.0, 256.0) - 0.3).abs() < 1e-8);
        assert!(k_for_target_rate(1.5, 500.0, 64.0, 256.0).is_err());
    }

    #[test]
    fn aggregate_no_reduction_is_zero() {
        let lens = [50, 50, 50];
        let s = aggregate_run_flops(&lens, &lens, 16, 64, 4).unwrap();
        assert_eq!(s.reduction_pct, 0.0);
        let s = aggregate_run_flops(&lens, &lens, 16, 64, 0).unwrap();
        assert_eq!(s.baseline, 3.0 * layer_flops(50.0, 16.0, 64.0));
    }

    #[test]
    fn aggregate_single_layer_cut_after_last_layer_saves_nothing() {
        // a cut after the only layer changes no layer's input length
        let s = aggregate_run_flops(&[40], &[40], 8, 32, 0).unwrap();
        assert_eq!(s.reduction_pct, 0.0);
    }

    #[test]
    fn aggregate_four_layers_hand_sum() {
        // cut 50 of 100 tokens after layer 1: layers 2 and 3 see 50 tokens
        let (d, m) = (64usize, 256usize);
        let s = aggregate_run_flops(&[100; 4], &[100, 100, 50, 50], d, m, 0).unwrap();
        let full = 6_195_200.0;
        let half = 2.0 * 2500.0 * 64.0 + 4.0 * 50.0 * 4096.0 + 2.0 * 50.0 * 64.0 * 256.0;
        assert_eq!(half, 2_777_600.0);
        let expected = 100.0 * (1.0 - (2.0 * full + 2.0 * half) / (4.0 * full));
        assert!((s.reduction_pct - expected).abs() < 1e-12);
        let per_layer = 100.0 * reduction_rate(0.5, 100.0, 64.0, 256.0);
        assert!(s.reduction_pct > 0.0 && s.reduction_pct < per_layer);
    }

    #[test]
    fn aggregate_length_mismatch() {
        assert!(aggregate_run_flops(&[1, 2], &[1], 4, 4, 0).is_err());
        assert!(aggregate_run_flops(&[], &[], 4, 4, 0).is_err());
    }

    #[test]
    fn rtf_and_throughput() {
        let t = RunTimings {
            prefill_seconds: 6.72,
            decode_seconds: 23.55,
            audio_seconds: 240.0,
            generated_tokens: 73,
        };
        assert!((rtf(&t).unwrap() - 0.126).abs() < 1e-3);
        assert!((throughput(&t).unwrap() - 73.0 / 23.55).abs() < 1e-12);
        let zero = RunTimings {
            prefill_seconds: 0.0,
            decode_seconds: 0.0,
            audio_seconds: 10.0,
            generated_tokens: 1,
        };
        assert_eq!(rtf(&zero).unwrap(), 0.0);
        assert!(throughput(&zero).is_err());
        assert!(rtf(&RunTimings { audio_seconds: 0.0, ..t }).is_err());
    }

    #[test]
    fn kv_bytes_examples() {
        let mut c = ModelConfig::desk_default();
        c.hidden_dim = 4;
        c.num_heads = 1;
        assert_eq!(kv_bytes(&c, &[10], 8), 640);
        // audio-only prompt of 20 halved after layer 0 of 2
        let bytes = [kv_bytes(&c, &[20], 8), kv_bytes(&c, &[10], 8)];
        assert_eq!(bytes[1] * 2, bytes[0]);
    }

    #[test]
    fn max_batch_doubles_when_footprint_halves() {
        for per_seq in [8u64, 100, 12_346] {
            for budget in [1_000u64, 99_999, 1 << 30] {
                assert!(max_batch(budget, per_seq / 2) >= 2 * max_batch(budget, per_seq));
                assert!(max_batch(budget, per_seq) * per_seq <= budget);
            }
        }
        assert_eq!(max_batch(1000, 100), 10);
        assert!(max_batch(1000, 50) >= 2 * max_batch(1000, 100));
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let r = RunReport {
            policy: "weighted_merge".into(),
            schedule: "constant".into(),
            operation_layers: vec![1, 2],
            audio_len: 10,
            text_len: 2,
            decode_steps: 3,
            seed: 1,
            target_rate: Some(0.5),
            k_tokens: 4,
            flops_reduction_pct: 12.5,
            rtf: 0.1,
            prefill_seconds: 0.1,
            decode_seconds: 0.2,
            throughput: 15.0,
            kv_bytes_baseline: 100,
            kv_bytes_reduced: 80,
            fallback_warnings: 0,
        };
        assert_eq!(r.csv_fields().len(), RunReport::CSV_HEADER.len());
        assert_eq!(r.layers_label(), "1;2");
        assert!(cost_table_markdown(&[r]).contains("| weighted_merge | 12.50 |"));
    }
}
