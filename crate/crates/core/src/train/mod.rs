//! SGD training, inference over corpora and mAP evaluation.

mod eval;
mod optim;
mod trainer;

pub use eval::{average_precision, evaluate_map, MapReport};
pub use optim::{sgd_step, sgd_update, OptimizerState};
pub use trainer::{
    batch_images, detect_all, evaluate_detector, train_from, train_loop, TrainOptions, TrainOutcome,
};
