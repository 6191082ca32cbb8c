//! Evaluation metrics, sweeps and reports.

mod edges;
mod metrics;
mod report;

pub use edges::{canny, cosine, edge_cosine_similarity, gaussian_blur, sobel, CannyParams, EdgeSimilarity};
pub use metrics::{
    accuracy_under_attack, clean_accuracy, exclude_label, exclude_predicted, heatmap_source_target, param_sweep,
    size_of_x_sweep, sweep_table, transfer_matrix, AttackSpec, Heatmap, HeatmapAttack, SweepKind, SweepPoint,
};
pub use report::{emit_report, load_report, table_csv, EvalReport, MetricCell, MetricTable, ReportFormat};
