//! Seeded synthetic fixtures: random model weights plus a prompt whose audio
//! rows come in runs sharing a common direction.

use std::path::{Path, PathBuf};

use fastadasp::runtime::io::{load_sequence, load_weights, save_sequence, save_weights, weights_manifest};
use fastadasp::runtime::{ModelConfig, ModelWeights, Sequence, EMBEDDING_STD};
use fastadasp::tensor::{Matrix, Rng};
use serde::Serialize;

use crate::config::FixtureSpec;
use crate::error::{BenchError, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "weights.manifest";
pub const SEQUENCE_FILE: &str = "sequence.bin";
pub const FIXTURE_FILE: &str = "fixture.toml";

/// Keeps the prompt stream apart from the weight stream of the same seed.
const SEQUENCE_STREAM: u64 = 0x5EED_0000_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub weights: ModelWeights,
    pub sequence: Sequence,
}

/// Audio rows `EMBEDDING_STD * (sqrt(r) * c + sqrt(1 - r) * z)`, where `c`
/// is the current segment's centre and `z` is per-row noise. Each row after
/// the first starts a new segment with probability `1 - r`, so `r = 1` gives
/// identical rows and `r = 0` independent ones.
pub fn synth_audio(rng: &mut Rng, audio_len: usize, dim: usize, redundancy: f64) -> Matrix {
    let (shared, own) = (redundancy.sqrt(), (1.0 - redundancy).sqrt());
    let mut centre = vec![0.0; dim];
    let mut data = Vec::with_capacity(audio_len * dim);
    for i in 0..audio_len {
        if i == 0 || rng.uniform() >= redundancy {
            centre.iter_mut().for_each(|c| *c = rng.gaussian());
        }
        for &c in &centre {
            data.push(EMBEDDING_STD * (shared * c + own * rng.gaussian()));
        }
    }
    Matrix::from_vec(audio_len, dim, data).expect("sized above")
}

pub fn generate_fixture(model: &ModelConfig, spec: &FixtureSpec) -> Result<Fixture> {
    let weights = ModelWeights::random(*model, spec.seed)?;
    let mut rng = Rng::new(spec.seed ^ SEQUENCE_STREAM);
    let audio = synth_audio(&mut rng, spec.audio_len, model.hidden_dim, spec.redundancy);
    let mut text = Matrix::zeros(0, model.hidden_dim);
    for _ in 0..spec.text_len {
        let token = rng.below(model.vocab_size);
        text.push_row(weights.embedding.row(token))?;
    }
    let sequence = Sequence::from_parts(&audio, &text)?;
    Ok(Fixture { weights, sequence })
}

#[derive(Debug, Serialize)]
struct FixtureManifest {
    seed: u64,
    audio_len: usize,
    text_len: usize,
    redundancy: f64,
    tokens_per_second: f64,
    audio_seconds: f64,
    weights: &'static str,
    sequence: &'static str,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| BenchError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path, e: fastadasp::Error) -> BenchError {
    match e {
        fastadasp::Error::Io(source) => BenchError::Write {
            path: path.to_path_buf(),
            source,
        },
        other => BenchError::Run(other),
    }
}

/// Writes the fixture's weights, weight manifest, sequence and a TOML
/// description into `dir`, creating it if needed.
pub fn write_fixture(dir: &Path, fixture: &Fixture, spec: &FixtureSpec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| BenchError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let weights = dir.join(WEIGHTS_FILE);
    save_weights(&weights, &fixture.weights).map_err(|e| io_err(&weights, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    write_text(&manifest, &weights_manifest(fixture.weights.config()))?;
    let sequence = dir.join(SEQUENCE_FILE);
    save_sequence(&sequence, &fixture.sequence).map_err(|e| io_err(&sequence, e))?;
    let description = dir.join(FIXTURE_FILE);
    let body = toml::to_string(&FixtureManifest {
        seed: spec.seed,
        audio_len: spec.audio_len,
        text_len: spec.text_len,
        redundancy: spec.redundancy,
        tokens_per_second: spec.tokens_per_second,
        audio_seconds: spec.audio_seconds(),
        weights: WEIGHTS_FILE,
        sequence: SEQUENCE_FILE,
    })
    .map_err(|e| BenchError::Config(e.to_string()))?;
    write_text(&description, &body)?;
    Ok(vec![weights, manifest, sequence, description])
}

/// Loads the fixture from `spec.dir` when both binary files are there,
/// otherwise generates it and, with a directory set, writes it out.
pub fn load_or_generate(model: &ModelConfig, spec: &FixtureSpec) -> Result<Fixture> {
    if let Some(dir) = &spec.dir {
        let (w, s) = (dir.join(WEIGHTS_FILE), dir.join(SEQUENCE_FILE));
        if w.exists() && s.exists() {
            let weights = load_weights(&w)?;
            let sequence = load_sequence(&s)?;
            if weights.config() != model {
                return Err(BenchError::Config(format!(
                    "{} holds a different model than the [model] section",
                    w.display()
                )));
            }
            if sequence.audio_len() != spec.audio_len || sequence.text_len() != spec.text_len {
                return Err(BenchError::Config(format!(
                    "{} holds {} audio + {} text tokens, config asks for {} + {}",
                    s.display(),
                    sequence.audio_len(),
                    sequence.text_len(),
                    spec.audio_len,
                    spec.text_len
                )));
            }
            return Ok(Fixture { weights, sequence });
        }
        let fixture = generate_fixture(model, spec)?;
        write_fixture(dir, &fixture, spec)?;
        return Ok(fixture);
    }
    generate_fixture(model, spec)
}
