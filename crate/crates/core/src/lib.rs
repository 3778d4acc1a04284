//! Self-supervised estimation of diffusion MRI parameters with a negative
//! log Rician likelihood loss.
//!
//! Modules, bottom-up:
//!
//! * [`specfun`]: exponentially scaled Bessel functions and Rician helpers
//! * [`sigmodels`]: ADC and IVIM signal models with analytic Jacobians
//! * [`simulate`]: grid-sampled ground truth, Rician noise, sigma estimation
//! * [`losses`]: MSE and NLR batch losses with gradients
//! * [`net`]: MLP encoder, backprop, Adam, early stopping, checkpoints
//! * [`fitref`]: classical per-voxel MLE and least-squares fits
//! * [`eval`]: bias, standard deviation, RMSE and boxplot summaries

pub mod dataset_io;
pub mod error;
pub mod eval;
pub mod fitref;
pub mod losses;
pub mod net;
pub mod sigmodels;
pub mod simulate;
pub mod specfun;

pub use error::{Error, Result};
pub use eval::{boxplot_stats, compute_metrics, BoxplotStats, EvalReport, MetricCell};
pub use fitref::{lsq_fit_voxel, mle_fit_voxel, Estimator, FitResult};
pub use losses::{batch_loss, mse_loss, nlr_loss, LossKind, LossValueGrad};
pub use net::{select_common_init, train, Checkpoint, CommonInit, EpochRecord, Network, TrainConfig, TrainResult};
pub use sigmodels::{ModelKind, ModelParams, ParamGrid, Protocol};
pub use simulate::{make_dataset, VoxelDataset};
