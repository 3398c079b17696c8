pub mod autodiff;
pub mod error;
pub mod io;
pub mod loss;
pub mod net;
pub mod patch;
pub mod sparse_model;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use loss::{LossReport, LossWeights};
pub use net::{Architecture, Lcista, NetworkParams, NetworkState};
pub use patch::PatchGrid;
pub use sparse_model::{CistaSolver, CodeStack, DictionarySet, RegWeights, SolverState, ThresholdMode};
pub use tensor::{Filter, Plane, Rgb};
pub use train::{TrainConfig, TrainInput};
pub use wavelet::WaveletBank;
