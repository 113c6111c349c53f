//! Sparse optical flow on learned illumination-invariant feature maps.
//!
//! A four-convolution network turns an RGB image into a keypoint score map
//! and a 3-channel unit-norm feature map. Keypoints are picked from the score
//! map and tracked with pyramidal Lucas-Kanade on the feature map instead of
//! raw intensity, so a brightness change that leaves the features alone does
//! not disturb the flow.
//!
//! ```
//! use letflow::{detector, letnet, pyrflow, tensor::Tensor};
//!
//! let image = Tensor::from_fn(96, 96, 3, |y, x, c| {
//!     (0.5 + 0.4 * ((x as f32 * 0.3 + c as f32).sin() * (y as f32 * 0.2).cos())).clamp(0.0, 1.0)
//! })?;
//! let weights = letnet::LetNetWeights::random(7);
//! let out = letnet::forward(&image, &weights)?;
//! let keypoints = detector::detect(&out.score_map, &detector::DetectorConfig::default());
//! let tracks = pyrflow::track(&out, &out, &keypoints, &pyrflow::TrackConfig::default())?;
//! assert_eq!(tracks.len(), keypoints.len());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
// Index loops mirror the math in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod letnet;
pub mod losses;
pub mod pyrflow;
pub mod tensor;

pub use detector::{detect, DetectorConfig, Keypoint};
pub use geometry::Homography;
pub use letnet::{forward, LetNetWeights, NetOutput};
pub use pyrflow::{track, TrackConfig, TrackResult, TrackStatus};
pub use tensor::{ConvLayer, Tensor};
