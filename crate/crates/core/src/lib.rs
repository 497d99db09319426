//! Parallel scientific-computing toolkit: μSR histogram fitting with
//! runtime-defined theory functions, list-mode MLEM PET reconstruction and
//! sphere-based excess analysis, all dispatched through a deterministic
//! execution [`backend`].

pub mod analysis;
pub mod backend;
pub mod image;
pub mod io;
pub mod musr;
pub mod pet;
pub mod theory;

pub use backend::{Backend, BackendKind};
