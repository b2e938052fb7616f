//! Metrics of the evaluation protocol and the paired significance test.

mod classify;
mod report;
mod rouge;
mod wilcoxon;

pub use classify::{classification_metrics, normalize_label, ClassificationMetrics};
pub use report::{evaluate_stage, score_samples, EvalSample, MetricReport, TaskKind, TaskMetrics};
pub use rouge::{lcs_len, rouge_scores, split_sentences, tokenize, RougeScores};
pub use wilcoxon::{
    doubled_ranks, wilcoxon_signed_rank, PairedScores, WilcoxonMode, WilcoxonResult, EXACT_MAX_N,
};
