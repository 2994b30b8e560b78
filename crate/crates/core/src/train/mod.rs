//! Loss, optimizer, schedule, augmentation and the training loop.

pub mod augment;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use loss::{loss_total, LossTerms, LossWeights, PerceptualNet, Stage};
pub use metrics::{psnr, ssim};
pub use optim::{cyclic_lr, Adam};
pub use trainer::{evaluate, make_batch, train, train_step, EvalReport, StepLog, TrainConfig, CSV_HEADER};
