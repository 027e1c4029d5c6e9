//! Corpora, vocabulary, temperature sampling and synthetic task generation.

mod corpus;
mod sampling;
mod synthetic;
mod vocab;

pub use corpus::{
    load_manifest, prepend_task_token, read_text_corpus, subsample, write_manifest,
    write_text_corpus, Corpus, ManifestEntry, TaskKind, TaskSpec, TextCorpus, TextTask,
};
pub use sampling::{temperature_distribution, SampleStream, SamplingSchedule};
pub use synthetic::{make_synthetic_task, SyntheticSpec};
pub use vocab::{build_vocab, task_token, TokenMode, Vocab, RESERVED};
