//! Partial video copy detection over a global frame-feature database.
//!
//! Every reference frame feature lives in one KNN-searchable [`index::GlobalIndex`].
//! A query segment searches it frame by frame, hits are accumulated into per-video
//! scores to shortlist candidates, and each candidate is localized with a
//! constrained temporal-network path search over a sparse similarity matrix.
//! An optional transformer [`encoder`] re-encodes frame features so copies show up
//! as sharper diagonals.

pub mod error;
pub mod eval;
pub mod encoder;
pub mod features;
pub mod index;
pub mod localize;
pub mod pipeline;
pub mod scoring;
pub mod simmatrix;

mod kmeans;

pub use error::{Error, Result};
pub use eval::{best_f1_over_thresholds, segment_f1, Detection, F1Scores};
pub use features::{CopyAnnotation, VideoFeatures};
pub use index::{FrameRef, GlobalIndex, Hit};
pub use localize::{CopySegment, PathParams};
pub use pipeline::{run_query, run_scan, MatrixMode, QueryParams};
pub use simmatrix::SparseSimMatrix;

/// Dot product of two equal-length feature rows, accumulated in f64.
///
/// Every similarity in the crate goes through this function so that the dense,
/// reconstructed and searched similarities of the same pair of rows agree bit for bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}
