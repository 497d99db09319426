//! File formats: list-mode events, images, μSR histograms and fit inputs.

mod binary;
mod fit_config;
mod musr_file;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use binary::{
    load_img3, load_lmpt, read_img3, read_lmpt, store_img3, store_lmpt, write_img3, write_lmpt, ListModeFile,
};
pub use fit_config::{load_fit_problem, parse_fit_config, write_fit_config, FitConfig};
pub use musr_file::{load_musr_data, parse_musr_data, store_musr_data, write_musr_data};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {found}")]
    Version { format: &'static str, found: u32 },
    #[error("truncated {format} file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { format: &'static str, offset: usize, needed: usize, available: usize },
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }
}
