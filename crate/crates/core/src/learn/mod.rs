//! Trainable dictionaries: SDMD-DL with EDMD-DL and gEDMD-DL baselines.

mod network;
mod train;

pub use network::{Augmentation, Layer, NetworkSpec, TrainableDictionary};
pub use train::{
    closed_form_update, complex_gram, learned_spectrum, eigenfunction_series, loss_and_gradient, loss_eval, mode_similarity,
    select_epoch, train, train_from, EpochView, Evaluated, Method, Scorer, TrainConfig, TrainTrace, Trained,
    TrainingData, DEFAULT_RANK_TOL,
};
