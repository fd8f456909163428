//! CVSNet: a convolutional network whose blocks follow the primate visual
//! pathway (retina, LGN, striate cortex) topped by an MLP-mixer head.

pub mod ablation;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod lgn;
pub mod model;
pub mod optim;
pub mod params;
pub mod pixmap;
pub mod retina;
pub mod striate;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CvsError, Result};
pub use model::{CostReport, Model, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::{DType, Element, Shape, Tensor4D};
