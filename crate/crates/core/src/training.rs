//! Cross-entropy training with Adam, validation-based early stopping, grid
//! search over batch size and learning rate, and sub-network freezing.

use std::collections::BTreeSet;

use crate::dataset::{split, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::network::{BackwardMode, Mode, Network};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{argmax_slice, softmax_rows, Tensor};

/// Seed streams so every stochastic step of a run derives from one seed.
pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_EPOCH_BASE: u64 = 0x100;
pub(crate) const STREAM_GRID_BASE: u64 = 0x10_000;

/// Identifies a sub-network for selective freezing. A plain classifier
/// network is its own `Classifier`; the soft-masking stack adds the two
/// encoders and the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SubNetId {
    Classifier,
    EncoderX,
    EncoderA,
    Mixer,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Number of consecutive non-improving validation epochs tolerated
    /// before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Sub-networks excluded from optimizer updates.
    pub frozen: BTreeSet<SubNetId>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 10,
            validation_fraction: 0.3,
            seed: 0,
            frozen: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie strictly between 0 and 1, got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Adam optimizer state: one first/second moment tensor per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with canonical defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn new(param_shapes: &[&[usize]]) -> Self {
        AdamState {
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &[&mut Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over a flat parameter list.
///
/// `params` and `grads` must match the shapes the state was built with;
/// freezing is expressed by simply not passing a parameter here.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Consistency(format!(
            "adam step over {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (((param, grad), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if param.shape() != grad.shape() || param.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam parameter {:?} does not match gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let pd = param.data_mut();
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gd[i];
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Mean cross-entropy of softmaxed logits against integer labels, plus the
/// gradient with respect to the logits: `(softmax - one_hot) / batch`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, c) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::Consistency(format!(
            "{} labels for batch {batch}",
            labels.len()
        )));
    }
    for &label in labels {
        if label >= c {
            return Err(Error::Label {
                label,
                num_classes: c,
            });
        }
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[label] - max - log_sum;
    }
    loss /= batch as f64;
    let mut grad = probs;
    for (i, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        row[label] -= 1.0;
        for g in row.iter_mut() {
            *g /= batch as f64;
        }
    }
    Ok((loss, grad))
}

/// Fraction of samples whose argmax logit matches the label.
pub fn accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(512) {
        let (x, labels) = ds.batch(chunk);
        let (logits, _) = net.infer(&x)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax_slice(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Loss and validation accuracy for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the network carries after the run; `None` when
    /// no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
}

/// Trains `net` on `data` with Adam, early-stopping on a held-out
/// validation split and restoring the best-validation parameters.
pub fn fit(net: &mut Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_with(net, data, cfg, |_| {})
}

/// [`fit`] with a per-epoch observer for progress reporting.
pub fn fit_with(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features but the network expects {}",
            data.input_dim(),
            net.input_dim()
        )));
    }
    let frozen = cfg.frozen.contains(&SubNetId::Classifier);
    let split_spec = SplitSpec::new(cfg.validation_fraction, derive_seed(cfg.seed, STREAM_SPLIT))?;
    let (train, val) = split(data, &split_spec)?;

    let mut adam = AdamState::for_params(&net.trainable_tensors_mut());
    let mut epochs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut best_params = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_rng = Rng::new(derive_seed(cfg.seed, STREAM_EPOCH_BASE + epoch as u64));
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        net.set_mode(if frozen { Mode::Inference } else { Mode::Training });
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(chunk);
            let (logits, tape) = net.forward(&x)?;
            let (loss, grad_logits) = cross_entropy(&logits, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            if !frozen {
                let (param_grads, _) = net.backward(&tape, &grad_logits, BackwardMode::Standard)?;
                let flat_grads: Vec<&Tensor> = Network::flatten_grads(&param_grads);
                let mut params = net.trainable_tensors_mut();
                adam_step(&mut params, &flat_grads, &mut adam, cfg.learning_rate)?;
            }
        }
        net.set_mode(Mode::Inference);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy: accuracy(net, &val)?,
        };
        on_epoch(&record);
        epochs.push(record);

        if record.val_accuracy > best_val {
            best_val = record.val_accuracy;
            best_epoch = Some(epoch);
            best_params = Some(net.snapshot_params());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    if let Some(params) = best_params {
        net.restore_params(params)?;
    }
    net.set_mode(Mode::Inference);
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_accuracy: best_val,
    })
}

/// One evaluated grid-search cell.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_accuracy: f64,
}

/// Outcome of a grid search: the winning configuration, its report, and
/// every cell's validation score.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_config: TrainConfig,
    pub best_report: TrainReport,
    pub cells: Vec<GridCell>,
}

/// Trains one model per `(batch_size, learning_rate)` cell and keeps the one
/// with the best validation accuracy. Ties break toward the lower learning
/// rate, then the smaller batch size. Each cell gets a fresh network from
/// `factory` and a seed derived from the base seed and the cell index.
pub fn grid_search(
    factory: &dyn Fn(u64) -> Result<Network>,
    data: &LabeledDataset,
    batch_sizes: &[usize],
    learning_rates: &[f64],
    base: &TrainConfig,
) -> Result<(Network, GridSearchResult)> {
    if batch_sizes.is_empty() || learning_rates.is_empty() {
        return Err(Error::Parameter("grid search needs nonempty grids".into()));
    }
    let mut cells = Vec::with_capacity(batch_sizes.len() * learning_rates.len());
    let mut best: Option<(Network, TrainConfig, TrainReport)> = None;
    for (bi, &batch_size) in batch_sizes.iter().enumerate() {
        for (li, &learning_rate) in learning_rates.iter().enumerate() {
            let cell_index = (bi * learning_rates.len() + li) as u64;
            let seed = derive_seed(base.seed, STREAM_GRID_BASE + cell_index);
            let mut cfg = base.clone();
            cfg.batch_size = batch_size;
            cfg.learning_rate = learning_rate;
            cfg.seed = seed;
            let mut net = factory(seed)?;
            let report = fit(&mut net, data, &cfg)?;
            cells.push(GridCell {
                batch_size,
                learning_rate,
                val_accuracy: report.best_val_accuracy,
            });
            let better = match &best {
                None => true,
                Some((_, best_cfg, best_report)) => {
                    let a = report.best_val_accuracy;
                    let b = best_report.best_val_accuracy;
                    a > b
                        || (a == b
                            && (learning_rate < best_cfg.learning_rate
                                || (learning_rate == best_cfg.learning_rate
                                    && batch_size < best_cfg.batch_size)))
                }
            };
            if better {
                best = Some((net, cfg, report));
            }
        }
    }
    let (net, best_config, best_report) = best.expect("grids are nonempty");
    Ok((
        net,
        GridSearchResult {
            best_config,
            best_report,
            cells,
        },
    ))
}
