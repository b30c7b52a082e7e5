//! Multimodal low-rank decomposition for few-shot video domain adaptation.
//!
//! Two frozen per-modality Transformer encoders (RGB and optical flow) are
//! adapted with banks of low-rank decomposers whose outputs are soft-merged
//! by routers into modality-unique and modality-shared feature streams.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod decomposer;
pub mod gradcheck;
pub mod heads;
pub mod mmd;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod router;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use config::{ExperimentConfig, LossToggles, ModelConfig, Stage, TrainConfig};
pub use data::{Batch, DatasetSplit, Domain, MultimodalSample};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Rgb, Modality::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}
