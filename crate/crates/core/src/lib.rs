//! Two-stage image matching: pyramid features, attention enhancement,
//! coarse and fine matching, learned outlier removal, training losses and
//! evaluation geometry.

pub mod backbone;
pub mod config;
pub mod enhancer;
mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod matcher;
pub mod outlier;

pub use config::{MatcherConfig, PeMode, Profile};
pub use error::{CoreError, Result};
pub use image::Image;
pub use matcher::{CoarseMatchSet, MatchOutput, Matcher, PixelMatch, PixelMatchSet};
pub use outlier::{InlierWeights, OutlierNet};
