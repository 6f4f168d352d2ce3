//! Test fixtures shared by unit, integration and acceptance tests.

mod git;
mod mock_index;
mod repos;
mod vulns;

pub use git::GitFixture;
pub use mock_index::{MockIndex, SeenRequest};
pub use repos::*;
pub use vulns::*;
