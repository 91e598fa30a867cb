//! Visual geo-location estimation against a geo-tagged background collection,
//! and measurement of how photo enhancements hide or reveal where a photo was
//! taken.
//!
//! Two estimators are provided: a bag-of-words baseline searched with a
//! randomized KD-forest ([`bnn`]) and a Hamming-embedding inverted index
//! ([`index`]) whose shortlist is re-ranked by pairwise geometric
//! consistency ([`pgm`]). [`gle`] wires either into an end-to-end
//! geo-locator, and [`eval`] holds the metrics and experiment protocols.

pub mod bnn;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod geo;
pub mod gle;
pub mod image_io;
pub mod index;
pub mod manifest;
pub mod pgm;
pub mod synth;
pub mod toponym;
pub mod vocab;

mod binio;

pub use error::{Error, Result};
pub use exec::Exec;
pub use features::{FeatureSet, Keypoint};
pub use geo::GeoPoint;
pub use image_io::RasterImage;
