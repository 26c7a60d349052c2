//! Feed-forward classifiers: architecture, forward/backward passes,
//! training, and the `SMRG` file format.

mod arch;
mod dataset;
pub mod format;
mod model;
mod train;

pub use arch::{Activation, ArchSpec, LayerSpec};
pub use dataset::Dataset;
pub use format::{load, load_dataset, save, save_dataset};
pub use model::{backward, fingerprint_params, forward, param_names, ForwardTrace, Meta, ModelCheckpoint, Param, Role};
pub(crate) use train::minibatch_train;
pub use train::{fine_tune, pretrain, softmax_ce, PROB_CLAMP, TRAIN_BATCH_SIZE};
