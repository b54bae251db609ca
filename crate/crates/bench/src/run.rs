//! Single runs and policy x target sweeps.

use std::path::PathBuf;

use fastadasp::metrics::{
    aggregate_run_flops, k_for_target_rate, kv_bytes, median, rtf, throughput, RunReport, RunTimings,
};
use fastadasp::reduction::{PolicyHook, PolicyId};
use fastadasp::runtime::{generate, TraceOptions};
use fastadasp::schedule::{default_candidates, make_schedule, select_layer, EntropyReport, Schedule, ScheduleKind};
use rayon::prelude::*;

use crate::config::{Amount, OperationLayer, RunConfig, SweepSpec};
use crate::error::{BenchError, Result};
use crate::fixture::{load_or_generate, Fixture};
use crate::report;

/// Cache entries are f64.
pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Present when the operation layer was chosen automatically.
    pub entropy: Option<EntropyReport>,
}

/// Tokens to remove for `amount`. A target ratio is inverted through the
/// per-layer FLOPs model over the whole prompt, rounded, and capped so one
/// audio token survives.
pub fn resolve_k_tokens(amount: Amount, audio_len: usize, prompt_len: usize, d: usize, m: usize) -> Result<usize> {
    match amount {
        Amount::Tokens(k) => Ok(k),
        Amount::Target(t) => {
            let n = prompt_len as f64;
            let k = k_for_target_rate(t, n, d as f64, m as f64)?;
            Ok(((k * n).round() as usize).min(audio_len.saturating_sub(1)))
        }
    }
}

fn build_schedule(cfg: &RunConfig, fixture: &Fixture, k: usize) -> Result<(Schedule, Option<EntropyReport>)> {
    let layers = cfg.model.num_layers;
    let plan = &cfg.plan;
    if plan.schedule != ScheduleKind::SingleLayer {
        return Ok((make_schedule(plan.schedule, k, plan.start_layer, layers)?, None));
    }
    let (layer, entropy) = match plan.layer {
        OperationLayer::Fixed(l) => (l, None),
        OperationLayer::Auto => {
            let (l, rep) = select_layer(&fixture.weights, &fixture.sequence, &default_candidates(layers), k)?;
            (l, Some(rep))
        }
    };
    Ok((make_schedule(ScheduleKind::SingleLayer, k, layer, layers)?, entropy))
}

/// Runs the plan `repeats + 1` times on an existing fixture. The first run
/// is a discarded warm-up; latencies are medians over the rest. Every
/// non-timing field comes from the first run and depends only on the seed.
pub fn run_with_fixture(cfg: &RunConfig, fixture: &Fixture) -> Result<RunOutcome> {
    let model = &cfg.model;
    let spec = &cfg.fixture;
    let seq = &fixture.sequence;
    let prompt_len = seq.prompt_len();
    let policy = cfg.plan.policy;
    let k = if policy == PolicyId::None {
        0
    } else {
        resolve_k_tokens(cfg.plan.amount, seq.audio_len(), prompt_len, model.hidden_dim, model.ffn_dim)?
    };
    let (schedule, entropy) = build_schedule(cfg, fixture, k)?;
    schedule.check_feasible(seq.audio_len())?;

    let mut prefill_s = Vec::with_capacity(cfg.repeats);
    let mut decode_s = Vec::with_capacity(cfg.repeats);
    let mut first = None;
    for rep in 0..=cfg.repeats {
        let mut hook = PolicyHook::new(policy, &schedule, spec.seed);
        let gen = generate(
            &fixture.weights,
            seq,
            &mut hook,
            &TraceOptions::default(),
            spec.decode_steps,
        )?;
        if rep > 0 {
            prefill_s.push(gen.prefill_time.as_secs_f64());
            decode_s.push(gen.decode_time.as_secs_f64());
        }
        if first.is_none() {
            first = Some((gen.prefill.layer_lengths.clone(), gen.prefill.cache.lengths(), hook.fallbacks()));
        }
    }
    let (layer_lengths, cache_lengths, fallbacks) = first.expect("at least one run");

    let baseline_lengths = vec![prompt_len; model.num_layers];
    let flops = aggregate_run_flops(
        &baseline_lengths,
        &layer_lengths,
        model.hidden_dim,
        model.ffn_dim,
        spec.decode_steps,
    )?;
    let full_cache = vec![prompt_len + spec.decode_steps; model.num_layers];
    let timings = RunTimings {
        prefill_seconds: median(&prefill_s),
        decode_seconds: median(&decode_s),
        audio_seconds: spec.audio_seconds(),
        generated_tokens: spec.decode_steps,
    };
    let report = RunReport {
        policy: policy.to_string(),
        schedule: schedule.kind().to_string(),
        operation_layers: schedule.operation_layers(),
        audio_len: seq.audio_len(),
        text_len: seq.text_len(),
        decode_steps: spec.decode_steps,
        seed: spec.seed,
        target_rate: match cfg.plan.amount {
            Amount::Target(t) => Some(t),
            Amount::Tokens(_) => None,
        },
        k_tokens: k,
        flops_reduction_pct: flops.reduction_pct,
        rtf: rtf(&timings)?,
        prefill_seconds: timings.prefill_seconds,
        decode_seconds: timings.decode_seconds,
        // a sub-resolution decode time would divide by zero
        throughput: throughput(&timings).unwrap_or(f64::INFINITY),
        kv_bytes_baseline: kv_bytes(model, &full_cache, BYTES_PER_SCALAR),
        kv_bytes_reduced: kv_bytes(model, &cache_lengths, BYTES_PER_SCALAR),
        fallback_warnings: fallbacks,
    };
    Ok(RunOutcome { report, entropy })
}

pub fn run_once(cfg: &RunConfig) -> Result<RunOutcome> {
    let fixture = load_or_generate(&cfg.model, &cfg.fixture)?;
    run_with_fixture(cfg, &fixture)
}

/// Runs the plan and writes `results.csv`, `results.md` and, when the layer
/// was selected, `entropy_report.csv` under `cfg.out`.
pub fn run_and_write(cfg: &RunConfig) -> Result<(RunOutcome, Vec<PathBuf>)> {
    let outcome = run_once(cfg)?;
    let cell = Cell {
        policy: cfg.plan.policy,
        target: match cfg.plan.amount {
            Amount::Target(t) => Some(t),
            Amount::Tokens(_) => None,
        },
        result: Ok(outcome.clone()),
    };
    let files = report::write_single(&cfg.out, &cell)?;
    Ok((outcome, files))
}

/// One sweep entry; failures are kept so the report can mark them.
#[derive(Debug)]
pub struct Cell {
    pub policy: PolicyId,
    pub target: Option<f64>,
    pub result: Result<RunOutcome>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Policy-major, then target, in spec order.
    pub cells: Vec<Cell>,
    pub files: Vec<PathBuf>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Every policy at every target on one shared fixture, on a pool of
/// `spec.workers` threads. Results are gathered in order and written once.
/// Failed cells appear as marked rows; any failure makes the whole call
/// return [`BenchError::SweepFailures`] after the files are written.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    let fixture = load_or_generate(&spec.base.model, &spec.base.fixture)?;
    let jobs: Vec<(PolicyId, f64)> = spec
        .policies
        .iter()
        .flat_map(|&p| spec.targets.iter().map(move |&t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| BenchError::Config(format!("worker pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(policy, target)| {
                let mut cfg = spec.base.clone();
                cfg.plan.policy = policy;
                cfg.plan.amount = Amount::Target(target);
                Cell {
                    policy,
                    target: Some(target),
                    result: run_with_fixture(&cfg, &fixture),
                }
            })
            .collect()
    });
    let files = report::write_sweep(&spec.base.out, spec, &cells)?;
    let outcome = SweepOutcome { cells, files };
    match outcome.failures() {
        0 => Ok(outcome),
        failed => {
            for c in outcome.cells.iter() {
                if let Err(e) = &c.result {
                    eprintln!("cell {} @ {:?}: {e}", c.policy, c.target);
                }
            }
            Err(BenchError::SweepFailures {
                failed,
                total: outcome.cells.len(),
            })
        }
    }
}
