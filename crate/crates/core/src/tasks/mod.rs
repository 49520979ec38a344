//! Byte corpora, synthetic retrieval data and evaluation.

mod corpus;
mod eval;
mod retrieval;

pub use corpus::{ingest_text, sample_window, Corpus, DEFAULT_VAL_FRACTION};
pub use eval::{
    answer_ratio, attention_to_answer, eval_perplexity, eval_retrieval, AnswerAttention,
    LanguageModel, RetrievalReport,
};
pub use retrieval::{
    export_jsonl, gen_retrieval, gen_sample, Query, RetrievalSample, RetrievalTaskConfig,
    FILLER_LIMIT,
};
