//! Incomplete tokens in byte-level BPE vocabularies and the improbable
//! bigrams built from them.
//!
//! The pipeline runs: import a tokenizer ([`formats`]), classify every token's
//! UTF-8 structure ([`utf8`], [`census`]), pair prefixes with suffixes into
//! bigrams that survive a decode-encode round trip ([`forge`]), rank tokens by
//! how well trained their embeddings look ([`rank`]), build character-aligned
//! alternative encodings ([`preseg`]) and run the repetition experiments
//! ([`harness`]).

pub mod bpe;
pub mod census;
pub mod error;
pub mod forge;
pub mod formats;
pub mod harness;
pub mod preseg;
pub mod rank;
pub mod script;
pub mod utf8;

pub use bpe::{EncodeMode, PretokenizerConfig, PretokenizerMode, Token, TokenId, TokenizerModel};
pub use census::{census, list_incomplete, CensusReport, RoleCounts};
pub use error::{Error, Result};
pub use forge::{
    check_viability, count_legal_bigrams, enumerate_structural_pairs, sample_improbable_bigrams, viability_counts,
    viable_bigrams, BigramCandidate, ForgeConfig, ForgeRecord, Viability, ViabilityCounts,
};
pub use formats::{load_tokenizer, Bundle, RankedImportOptions};
pub use preseg::{natural_tokenization, presegment_tokenize, verify_alternative, SegmentedEncoding};
pub use rank::{rank_by_training, score_tokens, EmbeddingMatrix, Ranking, ScoringMethod};
pub use script::Script;
pub use utf8::{analyze_token_bytes, CountingPolicy, Role, TokenStructure};
