use crate::error::{Error, Result};
use crate::tensor::{randn_matrix, Matrix, Rng};

/// Standard deviation of token and positional embeddings.
pub const EMBEDDING_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// 8 layers, D=256, H=8, m=1024, vocab 512.
    pub fn desk_default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 256,
            ffn_dim: 1024,
            num_heads: 8,
            vocab_size: 512,
            max_positions: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn final_layer(&self) -> usize {
        self.num_layers - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
    /// Pre-attention layer norm, stored as 1xD rows.
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    /// Pre-FFN layer norm.
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl LayerWeights {
    fn tensors(&self) -> [&Matrix; 10] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ffn_in,
            &self.ffn_out,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 10] = [
    "w_q", "w_k", "w_v", "w_o", "ffn_in", "ffn_out", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// vocab x D
    pub embedding: Matrix,
    /// max_positions x D
    pub positional: Matrix,
    /// D x vocab
    pub output_head: Matrix,
}

impl ModelWeights {
    /// Synthetic weights. Projections use std `1/sqrt(fan_in)` so attention
    /// is far from uniform; embeddings use [`EMBEDDING_STD`].
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.hidden_dim;
        let m = config.ffn_dim;
        let proj = 1.0 / (d as f64).sqrt();
        let down = 1.0 / (m as f64).sqrt();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                w_q: randn_matrix(&mut rng, d, d, proj)?,
                w_k: randn_matrix(&mut rng, d, d, proj)?,
                w_v: randn_matrix(&mut rng, d, d, proj)?,
                w_o: randn_matrix(&mut rng, d, d, proj)?,
                ffn_in: randn_matrix(&mut rng, d, m, proj)?,
                ffn_out: randn_matrix(&mut rng, m, d, down)?,
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
            });
        }
        let embedding = randn_matrix(&mut rng, config.vocab_size, d, EMBEDDING_STD)?;
        let positional = randn_matrix(&mut rng, config.max_positions, d, EMBEDDING_STD)?;
        let output_head = randn_matrix(&mut rng, d, config.vocab_size, proj)?;
        let weights = Self {
            config,
            layers,
            embedding,
            positional,
            output_head,
        };
        Ok(weights)
    }

    /// Assembles weights from parts, checking every shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<LayerWeights>,
        embedding: Matrix,
        positional: Matrix,
        output_head: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let weights = Self {
            config,
            layers,
            embedding,
            positional,
            output_head,
        };
        weights.check_shapes()?;
        Ok(weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Expected shape of every tensor, in file declaration order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let d = config.hidden_dim;
        let m = config.ffn_dim;
        let layer_shapes = [
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, m),
            (m, d),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
        ];
        let mut out = Vec::new();
        for l in 0..config.num_layers {
            for (name, shape) in LAYER_TENSOR_NAMES.iter().zip(layer_shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("embedding".into(), (config.vocab_size, d)));
        out.push(("positional".into(), (config.max_positions, d)));
        out.push(("output_head".into(), (d, config.vocab_size)));
        out
    }

    /// Every tensor in file declaration order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.extend([&self.embedding, &self.positional, &self.output_head]);
        out
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.config.num_layers {
            return Err(Error::Shape(format!(
                "{} layers of weights for a {}-layer config",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        let expected = Self::expected_shapes(&self.config);
        for ((name, shape), m) in expected.iter().zip(self.tensors()) {
            if m.shape() != *shape {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
            if !m.is_finite() {
                return Err(Error::Shape(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Token embedding plus the absolute positional row.
    pub fn embed(&self, token: usize, position: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::Config(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if position >= self.config.max_positions {
            return Err(Error::ContextLength {
                len: position + 1,
                max: self.config.max_positions,
            });
        }
        Ok(self
            .embedding
            .row(token)
            .iter()
            .zip(self.positional.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }
}

/// The prompt fed to prefill: audio rows first, then text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    embeddings: Matrix,
    audio_len: usize,
    text_len: usize,
}

impl Sequence {
    pub fn new(embeddings: Matrix, audio_len: usize, text_len: usize) -> Result<Self> {
        if embeddings.rows() != audio_len + text_len {
            return Err(Error::Shape(format!(
                "sequence has {} rows but audio_len + text_len = {}",
                embeddings.rows(),
                audio_len + text_len
            )));
        }
        if embeddings.rows() == 0 {
            return Err(Error::Shape("empty prompt".into()));
        }
        Ok(Self {
            embeddings,
            audio_len,
            text_len,
        })
    }

    /// Audio rows followed by text rows.
    pub fn from_parts(audio: &Matrix, text: &Matrix) -> Result<Self> {
        let embeddings = audio.vstack(text)?;
        Self::new(embeddings, audio.rows(), text.rows())
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn audio_len(&self) -> usize {
        self.audio_len
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn prompt_len(&self) -> usize {
        self.audio_len + self.text_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.embeddings.cols()
    }
}
