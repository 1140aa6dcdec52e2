//! Synthetic corpora, task pools and code-mixing statistics.

pub mod corpus_io;
pub mod features;
pub mod language;
pub mod stats;
pub mod taskset;

pub use corpus_io::{dump_corpus, load_corpus};
pub use features::{synth_features, FeatureBank};
pub use language::{gen_codeswitch, gen_monolingual, LangId, LanguageSpec, Utterance};
pub use stats::{cmi, spf, utterance_cmi, Cmi};
pub use taskset::{make_batch, sample_batch, sample_corpus_batch, Corpus, DataConfig, Role, Task, TaskFilter, TaskSet};
