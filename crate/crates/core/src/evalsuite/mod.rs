//! Retrieval evaluation, ablation grids, image metrics and embedding export.

mod ablation;
mod export;
mod metrics;
mod oracle;
mod retrieval;

pub use ablation::{
    run_ablation, window_families, AblationCell, AblationGrid, AblationSpec, CellKind,
};
pub use export::{
    export_embeddings, read_export_info, read_matrix, ExportInfo, ExportedMatrix, EXPORT_FILE,
};
pub use metrics::{
    eval_pair, gaussian_taps, pixcorr, resize_bilinear, ssim, to_gray, LowLevelMetrics,
    EVAL_RESOLUTION, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW,
};
pub use oracle::{ridge_fit, ridge_oracle_top1};
pub use retrieval::{
    cosine_similarity, encode_test, evaluate_retrieval, l2_normalize_rows, rank_all, rank_of,
    report_from_ranks, test_set, top_k_percent, Encoded, EvalOptions, QueryResult,
    ReportFingerprint, RetrievalReport, SubjectRow, SYNTHETIC_CAVEAT,
};
