//! Release-by-release software composition analysis.
//!
//! The crate mines git release tags, generates one SBOM per release, mirrors
//! NVD and EPSS feeds locally, matches components against them and derives
//! longitudinal metrics (dependency depth, vulnerability persistence, release
//! cadence, attribute correlations).

pub mod model;
pub mod purl;
pub mod store;
pub mod clock;
pub mod feeds;
pub mod sbom;
pub mod genmachine;
pub mod ratelimit;
pub mod repominer;
pub mod matcher;
pub mod analytics;
pub mod pipeline;

#[cfg(any(test, feature = "fixtures"))]
pub mod fixtures;
