//! Agreement statistics: F1 against multiple raters, bootstrap intervals
//! and paired differences, and per-class AUROC.

mod bootstrap;
mod metrics;
mod report;

pub use bootstrap::{
    bootstrap_ci, paired_difference_ci, paired_differences, percentile, resample_indices,
    resample_statistics, BootstrapResult, PairedDifference, DEFAULT_SAMPLES,
};
pub use metrics::{
    auroc, binarize, f1, mean, multi_rater_f1, multi_rater_f1_on, optimal_threshold, F1Score,
    MultiRaterF1, RaterMatrix,
};
pub use report::{
    agreement_report, auroc_csv, format_fixed, load_rater_csv, read_rater_csv, AgreementReport,
    Predictions, ReportRow, AVERAGE_ROW, COL_IMAGE, DIFFERENCE_ROW,
};
