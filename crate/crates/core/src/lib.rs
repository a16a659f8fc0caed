//! Layer-importance analysis and block surgery for desk-scale
//! decoder-only transformers.
//!
//! The crate covers the full loop: a small autograd engine and AdamW
//! trainer, a Llama-shaped toy transformer with residual-stream capture,
//! angular-distance / removal / insertion importance probes, checkpoint
//! surgery driven by a compact expansion-plan notation, and a two-corpus
//! evaluation harness (perplexity + multiple choice) for measuring
//! knowledge injection against forgetting.
//!
//! With the default `parallel` feature, evaluation and probe loops fan
//! out over rayon; results are bit-identical to the sequential fallback
//! because every reduction happens in a fixed order.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub(crate) mod par;
pub mod probe;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, FreezeMask};
pub use error::{Error, Result};
pub use model::{ModelConfig, ResidualTrace};
pub use surgery::{ExpansionPlan, InitMode};
pub use tensor::Tensor;

/// Pin the global worker-thread count for the parallel maps. Only the
/// first call takes effect; without the `parallel` feature this is a
/// no-op (everything already runs sequentially). Results do not depend
/// on the thread count either way.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
