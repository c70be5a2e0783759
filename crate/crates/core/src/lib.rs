//! Short-duration text-dependent speaker verification and pass-phrase
//! verification: cepstral front-ends, GMM-UBM and phrase-dependent
//! background models, i-vector/PLDA back-ends, bottleneck features,
//! trial construction, detection metrics and score fusion.

pub mod binio;
pub mod bnfeat;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod gmm;
pub mod ivector;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod parallel;
pub mod pbm;
pub mod pipeline;
pub mod plda;
pub mod synthgen;
pub mod trials;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;
