//! List-mode MLEM reconstruction for a cylindrical ring scanner.

mod geometry;
mod mlem;
mod projector;
mod simulate;

use thiserror::Error;

pub use geometry::{ListModeEvent, ScannerGeometry};
pub use mlem::{
    apply_update, compute_sensitivity, default_initial_image, log_likelihood, mlem_iterate, reconstruct, ReconConfig,
    Reconstruction, SensitivityMode,
};
pub use projector::{
    backward_project, classify_lor, forward_project, matrix_elements_at_plane, sort_events, GroupOffsets, LorLabel,
    ProjectionPlan, SortedEvents,
};
pub use simulate::{simulate_listmode, Budget, Phantom, Shape, Source, DERENZO_DIAMETERS};

use crate::backend::BackendError;
use crate::image::ImageError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PetError {
    #[error("scanner geometry: {0}")]
    Geometry(String),
    #[error("event {index}: {msg}")]
    InvalidEvent { index: usize, msg: String },
    #[error("reconstruction config: {0}")]
    Config(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}
