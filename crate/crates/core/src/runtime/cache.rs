use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Keys and values of one layer, one row per cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn append(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        self.keys.push_row(key)?;
        self.values.push_row(value)
    }
}

/// Per-layer KV cache. Layers after a reduction point hold fewer rows than
/// the layers before it.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    /// Absolute position of the next token to be decoded.
    next_position: usize,
}

impl KvCache {
    pub(crate) fn with_layers(layers: Vec<LayerCache>, next_position: usize) -> Self {
        Self {
            layers,
            next_position,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub(crate) fn advance(&mut self) {
        self.next_position += 1;
    }

    pub(crate) fn check_layers(&self, expected: usize) -> Result<()> {
        if self.layers.len() != expected {
            return Err(Error::Shape(format!(
                "cache has {} layers, model has {expected}",
                self.layers.len()
            )));
        }
        for (l, c) in self.layers.iter().enumerate() {
            if c.keys.rows() != c.values.rows() {
                return Err(Error::Shape(format!(
                    "layer {l} cache has {} keys but {} values",
                    c.keys.rows(),
                    c.values.rows()
                )));
            }
        }
        Ok(())
    }
}
