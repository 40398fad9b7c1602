//! Provider-fair neural news recommendation.
//!
//! News and users get two representations each: a *fair* one built from
//! title content and a *biased* one built from the provider id. Training
//! fits clicks with their sum while an adversarial provider discriminator
//! and an orthogonality penalty keep provider identity out of the fair
//! vectors; serving ranks with the fair vectors alone.

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod experiment;
pub mod seed;
pub mod training;

use std::path::Path;

use thiserror::Error;

pub use autodiff::{ParameterStore, Tensor};
pub use data::{Corpus, Impression, NewsArticle, SimulatorConfig, Split};
pub use encoders::{Backbone, EncoderConfig, Model};
pub use eval::{FairnessReport, ProviderGroups, RankedList};
pub use experiment::{RunConfig, Variant, VariantRun};
pub use training::{LossWeights, StepReport, TrainConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("metric undefined: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
