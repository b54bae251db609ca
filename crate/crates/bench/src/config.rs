//! TOML run configuration, command-line overrides and validation.
//!
//! ```toml
//! repeats = 3
//! out = "adasp-results"
//!
//! [model]            # defaults to the 8-layer desk model
//! num_layers = 8
//! hidden_dim = 256
//! ffn_dim = 1024
//! num_heads = 8
//! vocab_size = 512
//! max_positions = 4096
//!
//! [fixture]
//! audio_len = 1024
//! text_len = 16
//! decode_steps = 32
//! tokens_per_second = 50.0   # nominal audio rate, sets T_audio
//! redundancy = 0.5           # 0 = independent rows, 1 = all rows equal
//! seed = 7                   # falls back to ADASP_SEED, then 0
//! dir = "fixtures/a"         # optional; loaded if present, written otherwise
//!
//! [plan]
//! policy = "weighted_merge"
//! target = 0.3               # FLOPs reduction ratio, or set k_tokens instead
//! schedule = "single_layer"  # constant | decay | single_layer
//! layer = "auto"             # or an index; single_layer only
//! start_layer = 1            # first reducing layer for constant / decay
//!
//! [sweep]
//! targets = [0.1, 0.2, 0.3, 0.4, 0.5]
//! policies = ["weighted_merge", "average_merge", "atome", "fastv", "random_merge", "random_evict"]
//! metric = "flops_reduction_pct"
//! workers = 4
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fastadasp::reduction::PolicyId;
use fastadasp::runtime::ModelConfig;
use fastadasp::schedule::ScheduleKind;
use serde::Deserialize;

use crate::error::{BenchError, Result};

pub const SEED_ENV: &str = "ADASP_SEED";

fn config_err(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::desk_default();
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            ffn_dim: c.ffn_dim,
            num_heads: c.num_heads,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
        }
    }
}

impl From<ModelSection> for ModelConfig {
    fn from(s: ModelSection) -> Self {
        ModelConfig {
            num_layers: s.num_layers,
            hidden_dim: s.hidden_dim,
            ffn_dim: s.ffn_dim,
            num_heads: s.num_heads,
            vocab_size: s.vocab_size,
            max_positions: s.max_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    pub audio_len: usize,
    pub text_len: usize,
    pub decode_steps: usize,
    pub tokens_per_second: f64,
    pub redundancy: f64,
    pub seed: Option<u64>,
    pub dir: Option<PathBuf>,
}

impl Default for FixtureSection {
    fn default() -> Self {
        Self {
            audio_len: 1024,
            text_len: 16,
            decode_steps: 32,
            tokens_per_second: 50.0,
            redundancy: 0.5,
            seed: None,
            dir: None,
        }
    }
}

/// Where a single-layer schedule reduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperationLayer {
    Auto,
    Fixed(usize),
}

impl FromStr for OperationLayer {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(OperationLayer::Auto);
        }
        s.parse()
            .map(OperationLayer::Fixed)
            .map_err(|_| config_err(format!("layer must be an index or \"auto\", got {s:?}")))
    }
}

impl fmt::Display for OperationLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperationLayer::Auto => f.write_str("auto"),
            OperationLayer::Fixed(l) => write!(f, "{l}"),
        }
    }
}

impl<'de> Deserialize<'de> for OperationLayer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(OperationLayer::Fixed(i)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub policy: String,
    pub target: Option<f64>,
    pub k_tokens: Option<usize>,
    pub schedule: String,
    pub layer: Option<OperationLayer>,
    pub start_layer: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            policy: PolicyId::WeightedMerge.to_string(),
            target: None,
            k_tokens: None,
            schedule: ScheduleKind::SingleLayer.to_string(),
            layer: None,
            start_layer: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub targets: Vec<f64>,
    pub policies: Vec<String>,
    pub metric: String,
    pub workers: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            targets: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            policies: PolicyId::ALL
                .iter()
                .filter(|p| **p != PolicyId::None)
                .map(ToString::to_string)
                .collect(),
            metric: Metric::FlopsReduction.to_string(),
            workers: None,
        }
    }
}

/// Contents of a config file, every field optional.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub fixture: FixtureSection,
    pub plan: PlanSection,
    pub repeats: usize,
    pub out: PathBuf,
    pub sweep: SweepSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            fixture: FixtureSection::default(),
            plan: PlanSection::default(),
            repeats: 3,
            out: PathBuf::from("adasp-results"),
            sweep: SweepSection::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::ReadConfig {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| BenchError::ParseConfig {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Command-line values that replace config fields when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub policy: Option<String>,
    pub target: Option<f64>,
    pub k_tokens: Option<usize>,
    pub schedule: Option<String>,
    pub layer: Option<OperationLayer>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Reads `"0.3"` or `"30%"` as the ratio 0.3.
pub fn parse_target(s: &str) -> Result<f64> {
    let s = s.trim();
    let (num, scale) = match s.strip_suffix('%') {
        Some(p) => (p.trim(), 0.01),
        None => (s, 1.0),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| config_err(format!("target {s:?} is not a number or percentage")))?;
    Ok(v * scale)
}

fn check_target(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(config_err(format!("target reduction {t} must lie in [0, 1)")));
    }
    Ok(())
}

/// How much to reduce: a FLOPs-reduction ratio or a token count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Amount {
    Target(f64),
    Tokens(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub audio_len: usize,
    pub text_len: usize,
    pub decode_steps: usize,
    pub tokens_per_second: f64,
    pub redundancy: f64,
    pub seed: u64,
    pub dir: Option<PathBuf>,
}

impl FixtureSpec {
    pub fn audio_seconds(&self) -> f64 {
        self.audio_len as f64 / self.tokens_per_second
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub policy: PolicyId,
    pub amount: Amount,
    pub schedule: ScheduleKind,
    pub layer: OperationLayer,
    pub start_layer: usize,
}

/// A validated single-run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub fixture: FixtureSpec,
    pub plan: Plan,
    pub repeats: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    FlopsReduction,
    Rtf,
    Throughput,
    KvBytes,
    KTokens,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::FlopsReduction,
        Metric::Rtf,
        Metric::Throughput,
        Metric::KvBytes,
        Metric::KTokens,
    ];

    /// Matches the results.csv column the metric is read from.
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FlopsReduction => "flops_reduction_pct",
            Metric::Rtf => "rtf",
            Metric::Throughput => "throughput_tok_s",
            Metric::KvBytes => "kv_bytes_reduced",
            Metric::KTokens => "k_tokens",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
                config_err(format!("unknown metric {s:?}, expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub targets: Vec<f64>,
    pub policies: Vec<PolicyId>,
    pub metric: Metric,
    pub workers: usize,
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(0),
    }
}

fn parse_policy(s: &str) -> Result<PolicyId> {
    s.parse().map_err(|e: fastadasp::Error| config_err(e.to_string()))
}

impl FileConfig {
    /// Applies `over` and validates everything except the reduction amount,
    /// which single runs and sweeps treat differently.
    fn resolve_common(&self, over: &Overrides, env_seed: Option<&str>) -> Result<(RunConfig, Option<f64>, Option<usize>)> {
        let model: ModelConfig = self.model.into();
        model.validate().map_err(|e| config_err(e.to_string()))?;

        let f = &self.fixture;
        if f.audio_len < 2 {
            return Err(config_err("fixture.audio_len must be at least 2"));
        }
        if f.audio_len + f.text_len > model.max_positions {
            return Err(config_err(format!(
                "prompt of {} tokens exceeds max_positions {}",
                f.audio_len + f.text_len,
                model.max_positions
            )));
        }
        if f.decode_steps == 0 {
            return Err(config_err("fixture.decode_steps must be at least 1"));
        }
        if f.audio_len + f.text_len + f.decode_steps > model.max_positions {
            return Err(config_err("prompt plus decode steps exceed max_positions"));
        }
        if !(f.tokens_per_second > 0.0 && f.tokens_per_second.is_finite()) {
            return Err(config_err("fixture.tokens_per_second must be positive"));
        }
        if !(0.0..=1.0).contains(&f.redundancy) {
            return Err(config_err("fixture.redundancy must lie in [0, 1]"));
        }
        let seed = resolve_seed(over.seed, f.seed, env_seed)?;

        let p = &self.plan;
        let policy = parse_policy(over.policy.as_deref().unwrap_or(&p.policy))?;
        let schedule: ScheduleKind = over
            .schedule
            .as_deref()
            .unwrap_or(&p.schedule)
            .parse()
            .map_err(|e: fastadasp::Error| config_err(e.to_string()))?;
        let layer = over.layer.or(p.layer).unwrap_or(OperationLayer::Fixed(p.start_layer));
        if let OperationLayer::Fixed(l) = layer {
            if l >= model.num_layers {
                return Err(config_err(format!("layer {l} outside a {}-layer model", model.num_layers)));
            }
        }
        if p.start_layer >= model.num_layers {
            return Err(config_err(format!(
                "start_layer {} outside a {}-layer model",
                p.start_layer, model.num_layers
            )));
        }
        let repeats = over.repeats.unwrap_or(self.repeats);
        if repeats == 0 {
            return Err(config_err("repeats must be at least 1"));
        }

        // a flag for one amount replaces whatever the file set for the other
        let (target, k_tokens) = match (over.target, over.k_tokens) {
            (Some(_), Some(_)) => return Err(config_err("--target and --k-tokens are mutually exclusive")),
            (Some(t), None) => (Some(t), None),
            (None, Some(k)) => (None, Some(k)),
            (None, None) => (p.target, p.k_tokens),
        };

        let run = RunConfig {
            model,
            fixture: FixtureSpec {
                audio_len: f.audio_len,
                text_len: f.text_len,
                decode_steps: f.decode_steps,
                tokens_per_second: f.tokens_per_second,
                redundancy: f.redundancy,
                seed,
                dir: f.dir.clone(),
            },
            plan: Plan {
                policy,
                amount: Amount::Tokens(0),
                schedule,
                layer,
                start_layer: p.start_layer,
            },
            repeats,
            out: over.out.clone().unwrap_or_else(|| self.out.clone()),
        };
        Ok((run, target, k_tokens))
    }

    /// Model and fixture only, for generating fixture files.
    pub fn resolve_fixture(&self, over: &Overrides, env_seed: Option<&str>) -> Result<(ModelConfig, FixtureSpec)> {
        let (run, _, _) = self.resolve_common(over, env_seed)?;
        Ok((run.model, run.fixture))
    }

    pub fn resolve_run(&self, over: &Overrides, env_seed: Option<&str>) -> Result<RunConfig> {
        let (mut run, target, k_tokens) = self.resolve_common(over, env_seed)?;
        run.plan.amount = match (target, k_tokens) {
            (Some(_), Some(_)) => return Err(config_err("set only one of plan.target and plan.k_tokens")),
            (Some(t), None) => {
                check_target(t)?;
                Amount::Target(t)
            }
            (None, Some(k)) => Amount::Tokens(k),
            (None, None) if run.plan.policy == PolicyId::None => Amount::Tokens(0),
            (None, None) => return Err(config_err("set one of plan.target and plan.k_tokens")),
        };
        Ok(run)
    }

    /// Sweeps take their amounts from `sweep.targets`; `--policy` narrows the
    /// policy list to one entry and `--target` to one column.
    pub fn resolve_sweep(&self, over: &Overrides, env_seed: Option<&str>) -> Result<SweepSpec> {
        if over.k_tokens.is_some() {
            return Err(config_err("--k-tokens cannot be combined with --sweep"));
        }
        let (base, _, _) = self.resolve_common(over, env_seed)?;
        let targets = match over.target {
            Some(t) => vec![t],
            None => self.sweep.targets.clone(),
        };
        let policies = match &over.policy {
            Some(p) => vec![parse_policy(p)?],
            None => self.sweep.policies.iter().map(|p| parse_policy(p)).collect::<Result<_>>()?,
        };
        if targets.is_empty() || policies.is_empty() {
            return Err(config_err("sweep needs at least one target and one policy"));
        }
        for &t in &targets {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_err(format!("sweep target {t} must lie in (0, 1)")));
            }
        }
        let metric = self.sweep.metric.parse()?;
        let workers = match self.sweep.workers {
            Some(0) => return Err(config_err("sweep.workers must be at least 1")),
            Some(w) => w,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(SweepSpec {
            base,
            targets,
            policies,
            metric,
            workers,
        })
    }
}
