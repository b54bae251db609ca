//! Decoder-only transformer: prompt prefill with between-layer reduction
//! hooks, KV-cached greedy decoding, and the on-disk weight format.

mod cache;
mod forward;
pub mod io;
mod model;

pub use cache::{KvCache, LayerCache};
pub use forward::{
    argmax, decode_greedy, decode_step, generate, prefill, Generation, HiddenState, LayerTrace,
    NoopHook, Prefill, ReductionHook, TraceLayers, TraceOptions,
};
pub use model::{LayerWeights, ModelConfig, ModelWeights, Sequence, EMBEDDING_STD};
