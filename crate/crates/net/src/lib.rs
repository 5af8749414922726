//! Fusion network regressing a camera pose correction from a color image
//! and a depth image rendered from a point-cloud map.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrained;
pub mod tensor;
pub mod vit;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use error::{NetError, Result};
pub use model::{spatial_pool, AblationMode, FeatureBundle, FrameInput, Model, NetworkConfig, Prediction, Target};
pub use optim::{batch_gradients, Adam, AdamConfig};
pub use tensor::{corr, Tensor};
