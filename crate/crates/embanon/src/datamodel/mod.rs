//! Embedding-corpus representation, `.pemb` file I/O, parallel-pair
//! sampling, dataset splitting, and a synthetic corpus generator.

pub mod corpus;
pub mod io;
pub mod sampling;
pub mod split;
pub mod synthetic;

pub use corpus::{pool_time_series, Corpus, DataError, UtteranceEmbedding};
pub use io::{
    manifest_path, read_corpus, read_manifest, write_corpus, write_manifest, Manifest,
};
pub use sampling::{sample_parallel_pairs, PairIndex, ParallelPair};
pub use split::{split, SplitUnit};
pub use synthetic::{generate_synthetic, SyntheticConfig};
