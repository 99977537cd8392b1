//! Training-pair curation, the reconstruction loss and the optimizer loop.

mod curate;
mod degrade;
mod loss;
mod train;

pub use curate::{curate_pairs, reference_index, TrainingSample};
pub use degrade::{Degrader, DegraderKind, NamedDegrader};
pub use loss::{
    loss_graph, perceptual_distance, total_loss, total_loss_with_grad, LossConfig, LossValue,
    PerceptualBackend, PerceptualNet, PERCEPTUAL_SEED,
};
pub use train::{fix_loss, fix_loss_gradients, history_csv, train, train_state, LossRecord, OptimConfig, TrainState};
