//! IoU, BLEU, Rouge-L and forgetting reports.

pub mod report;
pub mod scores;

pub use report::{
    build_report, iou_view, score_sample, BleuMode, DropEntry, GridRecord, Metric, MetricsReport, Prediction,
    Scores, StagePredictions, StageRow, TaskCell,
};
pub use scores::{bleu, corpus_bleu, iou, lcs_len, relative_drop, rouge_l};
