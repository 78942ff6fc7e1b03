//! Retrieval index, P@1 / R@5 evaluation and the experiment protocols.

mod experiments;
mod index;
mod metrics;
mod report;

pub use experiments::{
    run_alpha_sweep, run_leakage_diagnostic, run_supervision_comparison, AlphaSweep, CurveSummary,
    DiagnosticTrace, Experiment, LeakageDiagnostic, ModeRow, ModeRun, OrderingMargins,
    SupervisionComparison, SweepRow,
};
pub use index::{build_index, top_k, Embedder, ReasoningCandidates, RetrievalIndex};
pub use metrics::{
    build_eval_set, evaluate, rank_queries, EvalItem, EvalOptions, EvalReport, Metrics,
};
pub use report::{emit_report, fmt_num, ReportTable};

#[cfg(test)]
mod tests;
