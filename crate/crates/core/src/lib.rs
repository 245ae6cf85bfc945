//! Graph-cut stitching of pre-aligned image pairs with local patch-based
//! repair of misaligned seam segments.
//!
//! The pipeline: [`seam::estimate_seam`] finds a minimum-cost labeling of the
//! overlap, [`quality::evaluate_seam`] scores every seam pixel, and
//! [`lpam::run_lpam`] realigns the target inside patches around poorly
//! scored runs and re-cuts the seam locally.

pub mod batch;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod lpam;
pub mod mincut;
pub mod parallel;
pub mod pipeline;
pub mod quality;
pub mod seam;
pub mod synthetic;

pub use error::{Error, Result};
pub use flow::{dense_descriptors, estimate_flow, DescriptorField, FlowField, FlowParams};
pub use batch::{read_manifest, run_batch, BatchSummary, ManifestEntry};
pub use imaging::{load_aligned_pair, AlignedPair, Image, Rect, ValidityMask};
pub use lpam::{run_lpam, LpamConfig, LpamOutcome, LpamReport};
pub use mincut::{solve_mincut, CutResult, GridGraph};
pub use parallel::Execution;
pub use pipeline::{stitch, MetricsRecord, StitchConfig, StitchOutput};
pub use quality::{detect_misaligned, evaluate_seam, seam_metrics, Detection, QualityProfile, SeamMetrics};
pub use seam::{composite, estimate_seam, Label, LabelMask, Mosaic, Seam, SeamEstimate};
