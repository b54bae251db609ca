//! Binary containers for model weights and prompt sequences.
//!
//! Weights file layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `ADASPWT\0` |
//! | 8     | format version (u64, currently 1) |
//! | 48    | `num_layers, hidden_dim, ffn_dim, num_heads, vocab_size, max_positions` as u64 |
//! | ...   | every tensor of [`ModelWeights::expected_shapes`] in order, row-major f64 |
//!
//! Sequence files use magic `ADASPSQ\0`, the same version word, then
//! `audio_len, text_len, hidden_dim` as u64 and the embedding rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{LayerWeights, ModelConfig, ModelWeights, Sequence};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const WEIGHTS_MAGIC: [u8; 8] = *b"ADASPWT\0";
pub const SEQUENCE_MAGIC: [u8; 8] = *b"ADASPSQ\0";
pub const FORMAT_VERSION: u64 = 1;

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_count<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in usize")))
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        let x = f64::from_le_bytes(buf);
        if !x.is_finite() {
            return Err(Error::Format("non-finite value in tensor data".into()));
        }
        data.push(x);
    }
    Matrix::from_vec(rows, cols, data)
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::Format(format!("bad magic {got:?}")));
    }
    let version = read_u64(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_weights_to<W: Write>(w: &mut W, weights: &ModelWeights) -> Result<()> {
    let c = weights.config();
    w.write_all(&WEIGHTS_MAGIC)?;
    write_u64(w, FORMAT_VERSION)?;
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.ffn_dim,
        c.num_heads,
        c.vocab_size,
        c.max_positions,
    ] {
        write_u64(w, v as u64)?;
    }
    for m in weights.tensors() {
        write_matrix(w, m)?;
    }
    Ok(())
}

pub fn read_weights_from<R: Read>(r: &mut R) -> Result<ModelWeights> {
    check_header(r, &WEIGHTS_MAGIC)?;
    let config = ModelConfig {
        num_layers: read_count(r, "num_layers")?,
        hidden_dim: read_count(r, "hidden_dim")?,
        ffn_dim: read_count(r, "ffn_dim")?,
        num_heads: read_count(r, "num_heads")?,
        vocab_size: read_count(r, "vocab_size")?,
        max_positions: read_count(r, "max_positions")?,
    };
    config.validate()?;
    let mut tensors = ModelWeights::expected_shapes(&config)
        .into_iter()
        .map(|(_, (rows, cols))| read_matrix(r, rows, cols))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || tensors.next().expect("tensor count fixed by expected_shapes");
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ffn_in: next(),
            ffn_out: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        });
    }
    let embedding = next();
    let positional = next();
    let output_head = next();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    ModelWeights::from_parts(config, layers, embedding, positional, output_head)
}

pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights_to(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    read_weights_from(&mut BufReader::new(File::open(path)?))
}

/// Human-readable listing of the tensors in a weights file.
pub fn weights_manifest(config: &ModelConfig) -> String {
    let mut out = format!(
        "# weights format v{FORMAT_VERSION}\nnum_layers {}\nhidden_dim {}\nffn_dim {}\nnum_heads {}\nvocab_size {}\nmax_positions {}\n",
        config.num_layers,
        config.hidden_dim,
        config.ffn_dim,
        config.num_heads,
        config.vocab_size,
        config.max_positions
    );
    for (name, (rows, cols)) in ModelWeights::expected_shapes(config) {
        out.push_str(&format!("{name} {rows}x{cols}\n"));
    }
    out
}

pub fn write_sequence_to<W: Write>(w: &mut W, seq: &Sequence) -> Result<()> {
    w.write_all(&SEQUENCE_MAGIC)?;
    write_u64(w, FORMAT_VERSION)?;
    write_u64(w, seq.audio_len() as u64)?;
    write_u64(w, seq.text_len() as u64)?;
    write_u64(w, seq.hidden_dim() as u64)?;
    write_matrix(w, seq.embeddings())
}

pub fn read_sequence_from<R: Read>(r: &mut R) -> Result<Sequence> {
    check_header(r, &SEQUENCE_MAGIC)?;
    let audio_len = read_count(r, "audio_len")?;
    let text_len = read_count(r, "text_len")?;
    let dim = read_count(r, "hidden_dim")?;
    let embeddings = read_matrix(r, audio_len + text_len, dim)?;
    Sequence::new(embeddings, audio_len, text_len)
}

pub fn save_sequence(path: &Path, seq: &Sequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequence_to(&mut w, seq)?;
    w.flush()?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    read_sequence_from(&mut BufReader::new(File::open(path)?))
}
