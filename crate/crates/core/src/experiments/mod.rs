//! Benchmark generation, perturbations, sweeps and reporting.

pub mod cluster;
pub mod config;
pub mod perturb;
pub mod report;
pub mod run;
pub mod sbm;
pub mod sweep;

pub use cluster::{kmeans, kmeans_elbow, Clustering, Elbow};
pub use config::{Grouping, RunConfig, SimilarityMode, SEED_ENV};
pub use perturb::{perturb_noise, rewire_homophily, same_label_fraction, RewireReport};
pub use report::{emit_report, read_json_reports, Presentation, ReportFormat};
pub use run::{prepare, run_once, run_prepared, GraphSource, Perturbation, Prepared};
pub use sbm::{sbm_generate, SbmSpec};
pub use sweep::{run_sweep, spearman, GridPoint, RunRecord, SweepRow, SweepSpec, SweepTable};
