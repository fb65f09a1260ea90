//! Domain types, cap layouts, on-disk dataset formats and the synthetic generator.

mod io;
mod montage;
mod region;
mod synth;
mod trial;

use std::path::{Path, PathBuf};

pub use io::{load_trialset, read_clt1, write_clt1, write_trialset, Manifest, ManifestTrial};
pub use montage::{standard_position, Electrode, Montage, CAP32_LABELS, MAX_RADIUS, SHIPPED_CHANNEL_COUNTS};
pub use region::{assign_region, RegionId};
pub use synth::{generate_synthetic, synthesize, SynthConfig, Synthetic, PLANTED_AMPLITUDE_UV};
pub use trial::{Behavioral, Cohort, LabelRecord, Trial, TrialKey, TrialSet};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed at offset {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("unknown electrode site '{0}'")]
    UnknownSite(String),
    #[error("montage has no electrode in region {0}")]
    EmptyRegion(RegionId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(file: &Path, offset: u64, reason: impl Into<String>) -> Self {
        DataError::Format {
            file: file.display().to_string(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            DataError::Format { offset, reason, .. } => DataError::format(path, offset, reason),
            other => other,
        }
    }
}
