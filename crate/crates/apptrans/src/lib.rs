//! Appearance transfer for multi-view performance capture.
//!
//! Transfers the color appearance of high-resolution static reference stills
//! onto low-resolution multi-view dynamic capture of the same subject:
//! SSIM-based view pairing, L2-divergence thin-plate-spline color transfer
//! learned over multiple view pairs, projective texture baking into UV
//! atlases, a pluggable texture super-resolution stage, and a quality
//! evaluation harness.

pub mod colortransfer;
pub mod imaging;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod sr;
