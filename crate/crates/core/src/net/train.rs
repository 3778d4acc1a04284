use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backprop::{accumulate_voxel, check_finite, loss_over_rows, LossSpec, Workspace};
use super::{derive_seed, AdamState, Network};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::simulate::VoxelDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 256,
            patience_epochs: 50,
            max_epochs: 300,
            seed: 0,
            loss_kind: LossKind::Nlr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.patience_epochs == 0 || self.patience_epochs > self.max_epochs.max(1) {
            return Err(Error::InvalidArgument(format!(
                "patience_epochs must be in 1..={}, got {}",
                self.max_epochs.max(1),
                self.patience_epochs
            )));
        }
        Ok(())
    }
}

/// Loss bookkeeping for one epoch. Epoch 0 is the untrained starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Network state at the epoch with the lowest validation loss.
    pub final_network: Network,
    pub best_validation_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub loss_history: Vec<EpochRecord>,
}

fn check_datasets(train: &VoxelDataset, val: &VoxelDataset, net: &Network) -> Result<()> {
    if train.protocol != val.protocol {
        return Err(Error::InvalidArgument(
            "training and validation data use different protocols".into(),
        ));
    }
    if net.input_width() != train.protocol.len() || net.output_width() != train.model_kind.n_params() {
        return Err(Error::Shape(format!(
            "network {:?} does not fit a {} protocol with {} b-values",
            net.layer_sizes(),
            train.model_kind,
            train.protocol.len()
        )));
    }
    if train.n_voxels() == 0 || val.n_voxels() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    Ok(())
}

#[inline]
pub(crate) fn patience_exhausted(epoch: usize, best_epoch: usize, patience: usize) -> bool {
    epoch - best_epoch >= patience
}

/// Mini-batch Adam on the self-supervised loss with early stopping on the
/// validation loss.
///
/// Each epoch is one pass over the training voxels in a fresh random order
/// (the final short batch is kept). Training stops once `patience_epochs`
/// epochs pass without a new best validation loss, or after `max_epochs`.
/// The returned network is the best-validation state, possibly the initial
/// one.
pub fn train(
    train_data: &VoxelDataset,
    val_data: &VoxelDataset,
    initial: &Network,
    config: &TrainConfig,
    sigma: f64,
) -> Result<TrainResult> {
    config.validate()?;
    check_datasets(train_data, val_data, initial)?;
    let protocol = &train_data.protocol;
    let loss = LossSpec::new(config.loss_kind, sigma)?;

    let mut net = initial.clone();
    let mut adam = AdamState::new(net.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_data.n_voxels()).collect();
    let mut ws = Workspace::new(&net, protocol);
    let mut grad = vec![0.0; net.params().len()];
    let signals = train_data
        .signals
        .as_slice()
        .ok_or_else(|| Error::Shape("training signals are not contiguous".into()))?;
    let nz = protocol.len();

    let initial_val = loss_over_rows(&net, val_data.signals.view(), protocol, loss);
    let initial_train = loss_over_rows(&net, train_data.signals.view(), protocol, loss);
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        validation_loss: initial_val,
    }];
    if !initial_val.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            reason: format!("initial validation loss is {initial_val}"),
            history,
        });
    }
    let mut best = (initial_val, 0usize, net.clone());

    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for &j in batch {
                let m = &signals[j * nz..(j + 1) * nz];
                total += accumulate_voxel(&net, protocol, m, loss, scale, &mut ws, &mut grad);
            }
            if let Err(e) = check_finite(total * scale, &grad) {
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                    history,
                });
            }
            epoch_loss += total;
            adam.update(net.params_mut(), &grad, config)?;
        }
        epochs_run = epoch;
        let val = loss_over_rows(&net, val_data.signals.view(), protocol, loss);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_data.n_voxels() as f64,
            validation_loss: val,
        });
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation loss is {val}"),
                history,
            });
        }
        if val < best.0 {
            best = (val, epoch, net.clone());
        }
        if patience_exhausted(epoch, best.1, config.patience_epochs) {
            break;
        }
    }

    let (best_validation_loss, best_epoch, final_network) = best;
    Ok(TrainResult {
        final_network,
        best_validation_loss,
        best_epoch,
        epochs_run,
        loss_history: history,
    })
}

/// Outcome of the repeated-initialisation search.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonInit {
    pub network: Network,
    pub chosen: usize,
    /// Best validation loss of each repetition; `None` if it diverged.
    pub validation_losses: Vec<Option<f64>>,
    pub seeds: Vec<u64>,
    pub histories: Vec<Vec<EpochRecord>>,
}

/// Trains `n_repetitions` networks with the NLR loss from independent random
/// initialisations and keeps the one with the lowest validation loss. Only
/// the weights are carried forward; optimiser state starts fresh for every
/// later run.
///
/// Repetition `r` initialises and shuffles with `derive_seed(config.seed, r)`.
pub fn select_common_init(
    train_data: &VoxelDataset,
    val_data: &VoxelDataset,
    config: &TrainConfig,
    n_repetitions: usize,
    sigma: f64,
) -> Result<CommonInit> {
    if n_repetitions == 0 {
        return Err(Error::InvalidArgument("n_repetitions must be at least 1".into()));
    }
    let nz = train_data.protocol.len();
    let p = train_data.model_kind.n_params();
    let seeds: Vec<u64> = (0..n_repetitions as u64).map(|r| derive_seed(config.seed, r)).collect();
    let runs: Vec<Result<TrainResult>> = seeds
        .par_iter()
        .map(|&seed| {
            let init = Network::for_model(nz, p, seed)?;
            let cfg = TrainConfig {
                seed,
                loss_kind: LossKind::Nlr,
                ..config.clone()
            };
            train(train_data, val_data, &init, &cfg, sigma)
        })
        .collect();

    let mut validation_losses = Vec::with_capacity(n_repetitions);
    let mut histories = Vec::with_capacity(n_repetitions);
    let mut best: Option<(f64, usize, Network)> = None;
    let mut last_err = None;
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(res) => {
                validation_losses.push(Some(res.best_validation_loss));
                histories.push(res.loss_history);
                if best.as_ref().is_none_or(|b| res.best_validation_loss < b.0) {
                    best = Some((res.best_validation_loss, r, res.final_network));
                }
            }
            Err(Error::Diverged { history, .. }) => {
                validation_losses.push(None);
                histories.push(history);
            }
            Err(e) => {
                validation_losses.push(None);
                histories.push(Vec::new());
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, chosen, network)) => Ok(CommonInit {
            network,
            chosen,
            validation_losses,
            seeds,
            histories,
        }),
        None => Err(last_err.unwrap_or_else(|| {
            Error::InvalidArgument(format!("all {n_repetitions} initialisation runs diverged"))
        })),
    }
}
