//! Exploiting relevance maps to improve classification: binary masking with
//! two fine-tuning strategies, and a learned soft-masking stack (two
//! encoders plus a mixer) trained against a frozen classifier.
//!
//! Attribution maps for every pipeline here are computed once from the
//! network passed in and are never refreshed as fine-tuning proceeds.

use std::path::Path;

use crate::attribution::{attribute_dataset, AttributionMethod, IgConfig, RelevanceMap, TargetPolicy};
use crate::checkpoint::{
    network_tensor_count, push_network_tensors, read_container, take_network_tensors,
    write_container,
};
use crate::dataset::{split_indices, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::network::{BackwardMode, GradientTape, LayerGrads, Mode, Network, NetworkSpec, LayerSpec};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{argmax_slice, Tensor};
use crate::training::{
    accuracy, adam_step, cross_entropy, fit, AdamState, EpochRecord, SubNetId, TrainConfig,
    TrainReport, STREAM_EPOCH_BASE, STREAM_SPLIT,
};

/// Whether a mask is hard {0, 1} or soft [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Soft,
}

/// A per-feature multiplier applied elementwise to an input.
#[derive(Debug, Clone)]
pub struct Mask {
    values: Tensor,
    kind: MaskKind,
}

impl Mask {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }
}

/// The positive-relevance rule: mask is 1 where the score is strictly
/// positive, 0 everywhere else (zero relevance is masked out).
pub fn binary_mask(map: &RelevanceMap) -> Mask {
    Mask {
        values: map.scores.map(|s| if s > 0.0 { 1.0 } else { 0.0 }),
        kind: MaskKind::Binary,
    }
}

/// Elementwise product of input and mask.
pub fn apply_mask(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    x.mul(&mask.values)
}

/// Replaces every input with its binary-masked version. Labels are
/// unchanged; the masks come from attributions of `net` (one map per sample,
/// never recomputed).
pub fn masked_dataset(
    net: &Network,
    ds: &LabeledDataset,
    method: AttributionMethod,
    ig: &IgConfig,
    policy: TargetPolicy,
) -> Result<LabeledDataset> {
    let maps = attribute_dataset(net, ds, method, policy, ig)?;
    let inputs = ds
        .inputs()
        .iter()
        .zip(&maps)
        .map(|(x, map)| apply_mask(x, &binary_mask(map)))
        .collect::<Result<Vec<Tensor>>>()?;
    ds.with_inputs(inputs)
}

/// Accuracy and stage reports from a binary-masking strategy run.
#[derive(Debug, Clone)]
pub struct StrategyReport {
    /// Accuracy of the fine-tuned model on the masked test set.
    pub accuracy: f64,
    /// Report of the unaltered-data fine-tuning stage (strategy B only).
    pub first_stage: Option<TrainReport>,
    /// Report of the masked-data fine-tuning stage.
    pub masked_stage: TrainReport,
}

/// Strategy A: fine-tune a copy of the baseline on masked training data and
/// evaluate it on masked test data. Training masks always target the ground
/// truth label; `test_policy` chooses the test-side target.
pub fn strategy_a(
    baseline: &Network,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    method: AttributionMethod,
    ig: &IgConfig,
    cfg: &TrainConfig,
    test_policy: TargetPolicy,
) -> Result<(Network, StrategyReport)> {
    let masked_train = masked_dataset(baseline, train_ds, method, ig, TargetPolicy::GroundTruth)?;
    let masked_test = masked_dataset(baseline, test_ds, method, ig, test_policy)?;
    let mut net = baseline.clone();
    net.set_mode(Mode::Inference);
    let masked_stage = fit(&mut net, &masked_train, cfg)?;
    let accuracy = accuracy(&net, &masked_test)?;
    Ok((
        net,
        StrategyReport {
            accuracy,
            first_stage: None,
            masked_stage,
        },
    ))
}

/// Strategy B: fine-tune on the unaltered training data first, then on the
/// masked training data. Masks still come from the `baseline` network passed
/// in, not from the intermediate fine-tuned model.
pub fn strategy_b(
    baseline: &Network,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    method: AttributionMethod,
    ig: &IgConfig,
    first_cfg: &TrainConfig,
    masked_cfg: &TrainConfig,
    test_policy: TargetPolicy,
) -> Result<(Network, StrategyReport)> {
    let masked_train = masked_dataset(baseline, train_ds, method, ig, TargetPolicy::GroundTruth)?;
    let masked_test = masked_dataset(baseline, test_ds, method, ig, test_policy)?;
    let mut net = baseline.clone();
    net.set_mode(Mode::Inference);
    let first_stage = fit(&mut net, train_ds, first_cfg)?;
    let masked_stage = fit(&mut net, &masked_train, masked_cfg)?;
    let accuracy = accuracy(&net, &masked_test)?;
    Ok((
        net,
        StrategyReport {
            accuracy,
            first_stage: Some(first_stage),
            masked_stage,
        },
    ))
}

/// The learned soft-masking stack: `mask = sigmoid(mixer(concat(E_x(x),
/// E_A(map))))`, classified as `classifier(mask * x)` with the classifier
/// frozen.
#[derive(Debug, Clone)]
pub struct SoftMaskStack {
    pub encoder_x: Network,
    pub encoder_a: Network,
    pub mixer: Network,
    pub classifier: Network,
}

impl SoftMaskStack {
    /// Validates the wiring: both encoders read `d` features, their outputs
    /// concatenate to the mixer input, the mixer emits `d` mask values, and
    /// the classifier consumes `d` features.
    pub fn new(
        encoder_x: Network,
        encoder_a: Network,
        mixer: Network,
        classifier: Network,
    ) -> Result<Self> {
        let d = classifier.input_dim();
        if encoder_x.input_dim() != d || encoder_a.input_dim() != d {
            return Err(Error::Shape(format!(
                "encoders read {}/{} features but the classifier expects {d}",
                encoder_x.input_dim(),
                encoder_a.input_dim()
            )));
        }
        let concat = encoder_x.output_dim() + encoder_a.output_dim();
        if mixer.input_dim() != concat {
            return Err(Error::Shape(format!(
                "mixer reads {} features but the encoders emit {concat}",
                mixer.input_dim()
            )));
        }
        if mixer.output_dim() != d {
            return Err(Error::Shape(format!(
                "mixer emits {} mask values for {d} input features",
                mixer.output_dim()
            )));
        }
        if !matches!(mixer.spec().layers().last(), Some(LayerSpec::Sigmoid)) {
            return Err(Error::Parameter(
                "mixer must end in a sigmoid so the mask lies in (0, 1)".into(),
            ));
        }
        let mut stack = SoftMaskStack {
            encoder_x,
            encoder_a,
            mixer,
            classifier,
        };
        stack.set_trainable_mode(Mode::Inference);
        stack.classifier.set_mode(Mode::Inference);
        Ok(stack)
    }

    /// The standard image-scale architecture: encoders `512 bn relu 256 bn
    /// relu 128`, mixer `512 bn relu d` with a sigmoid head.
    pub fn image_default(classifier: Network, rng: &mut Rng) -> Result<Self> {
        let d = classifier.input_dim();
        let encoder_spec = || {
            NetworkSpec::new(
                d,
                vec![
                    LayerSpec::FullyConnected { out_dim: 512 },
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::FullyConnected { out_dim: 256 },
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::FullyConnected { out_dim: 128 },
                ],
            )
        };
        let mixer_spec = NetworkSpec::new(
            256,
            vec![
                LayerSpec::FullyConnected { out_dim: 512 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::FullyConnected { out_dim: d },
                LayerSpec::Sigmoid,
            ],
        )?;
        SoftMaskStack::new(
            Network::new(encoder_spec()?, rng)?,
            Network::new(encoder_spec()?, rng)?,
            Network::new(mixer_spec, rng)?,
            classifier,
        )
    }

    /// A compact variant for small inputs: encoder widths scale with the
    /// input dimension (two fully-connected layers, `2d/3` then `d/3`), and
    /// the mixer expands the concatenated code before projecting back to `d`.
    pub fn compact(classifier: Network, rng: &mut Rng) -> Result<Self> {
        let d = classifier.input_dim();
        let mid = (2 * d / 3).max(16);
        let out = (d / 3).max(8);
        let encoder_spec = || {
            NetworkSpec::new(
                d,
                vec![
                    LayerSpec::FullyConnected { out_dim: mid },
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::FullyConnected { out_dim: out },
                ],
            )
        };
        let mixer_spec = NetworkSpec::new(
            2 * out,
            vec![
                LayerSpec::FullyConnected { out_dim: 4 * out },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::FullyConnected { out_dim: d },
                LayerSpec::Sigmoid,
            ],
        )?;
        SoftMaskStack::new(
            Network::new(encoder_spec()?, rng)?,
            Network::new(encoder_spec()?, rng)?,
            Network::new(mixer_spec, rng)?,
            classifier,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    /// Sets the mode of the trainable sub-networks (encoders and mixer).
    /// The classifier stays in inference mode; it is frozen by contract.
    pub fn set_trainable_mode(&mut self, mode: Mode) {
        self.encoder_x.set_mode(mode);
        self.encoder_a.set_mode(mode);
        self.mixer.set_mode(mode);
    }

    fn check_batch(&self, x: &Tensor, maps: &Tensor) -> Result<(usize, usize)> {
        let (batch, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {d} features but the stack expects {}",
                self.input_dim()
            )));
        }
        if maps.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "relevance batch {:?} does not match input batch {:?}",
                maps.shape(),
                x.shape()
            )));
        }
        Ok((batch, d))
    }

    /// Forward pass honoring each trainable sub-network's mode (batch norm
    /// statistics update when they are in training mode). The classifier
    /// always runs in inference mode.
    pub fn forward_batch(&mut self, x: &Tensor, maps: &Tensor) -> Result<(Tensor, Tensor, StackTape)> {
        self.check_batch(x, maps)?;
        if self.classifier.mode() != Mode::Inference {
            return Err(Error::InferenceModeRequired("soft-mask classifier"));
        }
        let (ex_out, ex_tape) = self.encoder_x.forward(x)?;
        let (ea_out, ea_tape) = self.encoder_a.forward(maps)?;
        let concat = concat_cols(&ex_out, &ea_out)?;
        let (mask, mixer_tape) = self.mixer.forward(&concat)?;
        let masked = mask.mul(x)?;
        let (logits, classifier_tape) = self.classifier.infer(&masked)?;
        let tape = StackTape {
            x: x.clone(),
            ex_out_dim: ex_out.dims2()?.1,
            ex_tape,
            ea_tape,
            mixer_tape,
            classifier_tape,
        };
        Ok((mask, logits, tape))
    }

    /// Pure inference pass: every sub-network in inference semantics, no
    /// state mutated.
    pub fn infer_batch(&self, x: &Tensor, maps: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_batch(x, maps)?;
        let (ex_out, _) = self.encoder_x.infer(x)?;
        let (ea_out, _) = self.encoder_a.infer(maps)?;
        let concat = concat_cols(&ex_out, &ea_out)?;
        let (mask, _) = self.mixer.infer(&concat)?;
        let masked = mask.mul(x)?;
        let (logits, _) = self.classifier.infer(&masked)?;
        Ok((mask, logits))
    }

    /// Gradients of `sum(logits * upstream)` for the trainable sub-networks.
    ///
    /// The classifier is a frozen constant: its slot in the result holds
    /// zero gradients, and its parameters are never touched.
    pub fn backward_batch(&self, tape: &StackTape, upstream: &Tensor) -> Result<StackGrads> {
        let (_, d_masked) =
            self.classifier
                .backward(&tape.classifier_tape, upstream, BackwardMode::Standard)?;
        let d_mask = d_masked.mul(&tape.x)?;
        let (mixer_grads, d_concat) =
            self.mixer
                .backward(&tape.mixer_tape, &d_mask, BackwardMode::Standard)?;
        let (d_ex, d_ea) = split_cols(&d_concat, tape.ex_out_dim)?;
        let (encoder_x_grads, _) =
            self.encoder_x
                .backward(&tape.ex_tape, &d_ex, BackwardMode::Standard)?;
        let (encoder_a_grads, _) =
            self.encoder_a
                .backward(&tape.ea_tape, &d_ea, BackwardMode::Standard)?;
        let classifier_grads = self
            .classifier
            .params()
            .iter()
            .map(LayerGrads::zeros_like)
            .collect();
        Ok(StackGrads {
            encoder_x: encoder_x_grads,
            encoder_a: encoder_a_grads,
            mixer: mixer_grads,
            classifier: classifier_grads,
        })
    }
}

/// Cached activations from one stack forward pass.
#[derive(Debug, Clone)]
pub struct StackTape {
    x: Tensor,
    ex_out_dim: usize,
    ex_tape: GradientTape,
    ea_tape: GradientTape,
    mixer_tape: GradientTape,
    classifier_tape: GradientTape,
}

/// Per-sub-network parameter gradients from a stack backward pass.
#[derive(Debug, Clone)]
pub struct StackGrads {
    pub encoder_x: Vec<LayerGrads>,
    pub encoder_a: Vec<LayerGrads>,
    pub mixer: Vec<LayerGrads>,
    /// Always zero: the classifier is frozen.
    pub classifier: Vec<LayerGrads>,
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch_a, cols_a) = a.dims2()?;
    let (batch_b, cols_b) = b.dims2()?;
    if batch_a != batch_b {
        return Err(Error::Shape(format!(
            "cannot concatenate batches of {batch_a} and {batch_b} rows"
        )));
    }
    let mut data = Vec::with_capacity(batch_a * (cols_a + cols_b));
    for i in 0..batch_a {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![batch_a, cols_a + cols_b], data)
}

fn split_cols(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (batch, cols) = t.dims2()?;
    if first > cols {
        return Err(Error::Shape(format!(
            "cannot split {cols} columns at {first}"
        )));
    }
    let mut a = Vec::with_capacity(batch * first);
    let mut b = Vec::with_capacity(batch * (cols - first));
    for i in 0..batch {
        let row = t.row(i);
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    Ok((
        Tensor::new(vec![batch, first], a)?,
        Tensor::new(vec![batch, cols - first], b)?,
    ))
}

/// Runs one input through the stack: the soft mask the mixer produces and
/// the classifier's logits for the masked input.
pub fn soft_forward(stack: &SoftMaskStack, x: &Tensor, map: &RelevanceMap) -> Result<(Mask, Tensor)> {
    let d = x.dims1()?;
    let xb = Tensor::new(vec![1, d], x.data().to_vec())?;
    let mb = Tensor::new(vec![1, d], map.scores.data().to_vec())?;
    let (mask, logits) = stack.infer_batch(&xb, &mb)?;
    Ok((
        Mask {
            values: mask.reshape(vec![d])?,
            kind: MaskKind::Soft,
        },
        logits.reshape(vec![stack.classifier.output_dim()])?,
    ))
}

fn stack_accuracy(
    stack: &SoftMaskStack,
    ds: &LabeledDataset,
    maps: &[RelevanceMap],
    indices: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (x, labels) = ds.batch(chunk);
        let map_batch = batch_maps(maps, chunk, ds.input_dim())?;
        let (_, logits) = stack.infer_batch(&x, &map_batch)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax_slice(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

fn batch_maps(maps: &[RelevanceMap], indices: &[usize], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(maps[i].scores.data());
    }
    Tensor::new(vec![indices.len(), d], data)
}

/// Trains encoders and mixer with the classifier frozen.
///
/// Relevance maps are computed once up front from the frozen classifier
/// against ground-truth labels, then reused for every epoch. Early stopping
/// and best-epoch restoration work exactly as in [`fit`].
pub fn train_soft(
    stack: &mut SoftMaskStack,
    train_ds: &LabeledDataset,
    method: AttributionMethod,
    ig: &IgConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let maps = attribute_dataset(&stack.classifier, train_ds, method, TargetPolicy::GroundTruth, ig)?;

    let split_spec = SplitSpec::new(cfg.validation_fraction, derive_seed(cfg.seed, STREAM_SPLIT))?;
    let (train_idx, val_idx) = split_indices(train_ds.len(), &split_spec)?;

    let trainable: Vec<SubNetId> = [SubNetId::EncoderX, SubNetId::EncoderA, SubNetId::Mixer]
        .into_iter()
        .filter(|id| !cfg.frozen.contains(id))
        .collect();

    let mut adam = AdamState::for_params(&trainable_tensors(stack, &trainable));
    let mut epochs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut best_params: Option<(Vec<_>, Vec<_>, Vec<_>)> = None;
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        let mut epoch_rng = Rng::new(derive_seed(cfg.seed, STREAM_EPOCH_BASE + epoch as u64));
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        stack.set_trainable_mode(if trainable.is_empty() {
            Mode::Inference
        } else {
            Mode::Training
        });
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_ds.batch(chunk);
            let map_batch = batch_maps(&maps, chunk, train_ds.input_dim())?;
            let (_, logits, tape) = stack.forward_batch(&x, &map_batch)?;
            let (loss, grad_logits) = cross_entropy(&logits, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            if !trainable.is_empty() {
                let grads = stack.backward_batch(&tape, &grad_logits)?;
                let flat_grads = flatten_stack_grads(&grads, &trainable);
                let mut params = trainable_tensors(stack, &trainable);
                adam_step(&mut params, &flat_grads, &mut adam, cfg.learning_rate)?;
            }
        }
        stack.set_trainable_mode(Mode::Inference);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_accuracy: stack_accuracy(stack, train_ds, &maps, &val_idx)?,
        };
        epochs.push(record);

        if record.val_accuracy > best_val {
            best_val = record.val_accuracy;
            best_epoch = Some(epoch);
            best_params = Some((
                stack.encoder_x.snapshot_params(),
                stack.encoder_a.snapshot_params(),
                stack.mixer.snapshot_params(),
            ));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    if let Some((ex, ea, mixer)) = best_params {
        stack.encoder_x.restore_params(ex)?;
        stack.encoder_a.restore_params(ea)?;
        stack.mixer.restore_params(mixer)?;
    }
    stack.set_trainable_mode(Mode::Inference);
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_accuracy: best_val,
    })
}

/// Accuracy of the soft-masking stack on a dataset, with relevance maps
/// computed from the frozen classifier under the given target policy.
pub fn evaluate_soft(
    stack: &SoftMaskStack,
    ds: &LabeledDataset,
    method: AttributionMethod,
    ig: &IgConfig,
    policy: TargetPolicy,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let maps = attribute_dataset(&stack.classifier, ds, method, policy, ig)?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    stack_accuracy(stack, ds, &maps, &indices)
}

fn trainable_tensors<'a>(stack: &'a mut SoftMaskStack, ids: &[SubNetId]) -> Vec<&'a mut Tensor> {
    let mut out = Vec::new();
    // Split borrows: each sub-network is a distinct field and may be
    // requested at most once.
    let SoftMaskStack {
        encoder_x,
        encoder_a,
        mixer,
        ..
    } = stack;
    let mut encoder_x = Some(encoder_x);
    let mut encoder_a = Some(encoder_a);
    let mut mixer = Some(mixer);
    for id in ids {
        let net: &'a mut Network = match id {
            SubNetId::EncoderX => encoder_x.take().expect("encoder_x listed once"),
            SubNetId::EncoderA => encoder_a.take().expect("encoder_a listed once"),
            SubNetId::Mixer => mixer.take().expect("mixer listed once"),
            SubNetId::Classifier => continue,
        };
        out.extend(net.trainable_tensors_mut());
    }
    out
}

fn flatten_stack_grads<'a>(grads: &'a StackGrads, ids: &[SubNetId]) -> Vec<&'a Tensor> {
    let mut out = Vec::new();
    for id in ids {
        let layer_grads = match id {
            SubNetId::EncoderX => &grads.encoder_x,
            SubNetId::EncoderA => &grads.encoder_a,
            SubNetId::Mixer => &grads.mixer,
            SubNetId::Classifier => continue,
        };
        out.extend(Network::flatten_grads(layer_grads));
    }
    out
}

/// Saves the four sub-networks into one checkpoint container. Tensor 0 is a
/// manifest of per-sub-network tensor counts, followed by each sub-network's
/// section in order: encoder_x, encoder_a, mixer, classifier.
pub fn save_stack(stack: &SoftMaskStack, path: &Path) -> Result<()> {
    let nets = [
        &stack.encoder_x,
        &stack.encoder_a,
        &stack.mixer,
        &stack.classifier,
    ];
    let manifest: Vec<f64> = nets
        .iter()
        .map(|n| network_tensor_count(n) as f64)
        .collect();
    let mut tensors = vec![Tensor::new(vec![4], manifest)?];
    for net in nets {
        push_network_tensors(net, &mut tensors);
    }
    write_container(path, &tensors)
}

/// Loads a stack saved by [`save_stack`].
pub fn load_stack(path: &Path) -> Result<SoftMaskStack> {
    let tensors = read_container(path)?;
    if tensors.is_empty() {
        return Err(Error::Format(format!(
            "{}: missing stack manifest",
            path.display()
        )));
    }
    let manifest = &tensors[0];
    if manifest.len() != 4 {
        return Err(Error::Format(format!(
            "{}: stack manifest must list 4 sub-networks, found {}",
            path.display(),
            manifest.len()
        )));
    }
    let mut offset = 1;
    let mut nets = Vec::with_capacity(4);
    for (i, &count) in manifest.data().iter().enumerate() {
        let count = count as usize;
        if offset + count > tensors.len() {
            return Err(Error::Format(format!(
                "{}: sub-network {i} section exceeds the container",
                path.display()
            )));
        }
        let (net, used) = take_network_tensors(&tensors[offset..offset + count])?;
        if used != count {
            return Err(Error::Format(format!(
                "{}: sub-network {i} declares {count} tensors but uses {used}",
                path.display()
            )));
        }
        offset += count;
        nets.push(net);
    }
    let classifier = nets.pop().expect("four sections");
    let mixer = nets.pop().expect("four sections");
    let encoder_a = nets.pop().expect("four sections");
    let encoder_x = nets.pop().expect("four sections");
    SoftMaskStack::new(encoder_x, encoder_a, mixer, classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_quadrant;
    use crate::network::LayerParams;
    use crate::training::accuracy;

    fn map_of(scores: &[f64]) -> RelevanceMap {
        RelevanceMap {
            scores: Tensor::from_slice(scores),
            target_class: 0,
            method: AttributionMethod::IntegratedGradients,
        }
    }

    #[test]
    fn binary_mask_rule_with_zero_edge() {
        let mask = binary_mask(&map_of(&[0.5, -0.2, 0.0]));
        assert_eq!(mask.values().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(mask.kind(), MaskKind::Binary);
    }

    #[test]
    fn all_positive_map_gives_identity_mask() {
        let mask = binary_mask(&map_of(&[0.1, 2.0, 3.5]));
        assert_eq!(mask.values().data(), &[1.0, 1.0, 1.0]);
        let x = Tensor::from_slice(&[0.3, 0.6, 0.9]);
        let masked = apply_mask(&x, &mask).unwrap();
        assert_eq!(masked.data(), x.data());
    }

    #[test]
    fn zero_map_gives_zero_mask() {
        let mask = binary_mask(&map_of(&[0.0, 0.0]));
        let x = Tensor::from_slice(&[0.5, 0.7]);
        let masked = apply_mask(&x, &mask).unwrap();
        assert_eq!(masked.data(), &[0.0, 0.0]);
    }

    #[test]
    fn apply_mask_matches_scalar_loop() {
        let mut rng = Rng::new(8);
        let x_data: Vec<f64> = (0..32).map(|_| rng.uniform(0.0, 1.0)).collect();
        let m_data: Vec<f64> = (0..32).map(|_| rng.uniform(0.0, 1.0)).collect();
        let x = Tensor::from_slice(&x_data);
        let mask = Mask {
            values: Tensor::from_slice(&m_data),
            kind: MaskKind::Soft,
        };
        let got = apply_mask(&x, &mask).unwrap();
        for i in 0..32 {
            assert_eq!(got.data()[i], x_data[i] * m_data[i]);
        }
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let mask = Mask {
            values: Tensor::from_slice(&[1.0]),
            kind: MaskKind::Binary,
        };
        assert!(apply_mask(&x, &mask).is_err());
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mask = binary_mask(&map_of(&[1.0, -1.0, 0.5, 0.0]));
        let x = Tensor::from_slice(&[0.9, 0.8, 0.7, 0.6]);
        let once = apply_mask(&x, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        assert!(once.bits_eq(&twice));
    }

    fn trained_quadrant_classifier(side: usize, seed: u64) -> Network {
        let train = synth_quadrant(1200, side, 100 + seed).unwrap();
        let spec = NetworkSpec::mlp(side * side, &[24], 4).unwrap();
        let mut net = Network::new(spec, &mut Rng::new(seed)).unwrap();
        fit(
            &mut net,
            &train,
            &TrainConfig {
                batch_size: 64,
                learning_rate: 0.02,
                max_epochs: 15,
                patience: 4,
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        net
    }

    #[test]
    fn masked_dataset_preserves_labels_and_identity_masks() {
        let side = 4;
        let net = trained_quadrant_classifier(side, 1);
        let ds = synth_quadrant(16, side, 5).unwrap();
        let ig = IgConfig::zeros(side * side, 16).unwrap();
        let masked = masked_dataset(
            &net,
            &ds,
            AttributionMethod::IntegratedGradients,
            &ig,
            TargetPolicy::GroundTruth,
        )
        .unwrap();
        assert_eq!(masked.labels(), ds.labels());
        assert_eq!(masked.len(), ds.len());
        // Masked pixels are either the original value or zero.
        for i in 0..ds.len() {
            for (a, b) in masked.input(i).data().iter().zip(ds.input(i).data()) {
                assert!(*a == *b || *a == 0.0);
            }
        }
    }

    #[test]
    fn strategy_a_beats_or_matches_baseline_on_synthetic() {
        let side = 6;
        let baseline = trained_quadrant_classifier(side, 3);
        let train = synth_quadrant(600, side, 11).unwrap();
        let test = synth_quadrant(120, side, 13).unwrap();
        let ig = IgConfig::zeros(side * side, 16).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            learning_rate: 0.005,
            max_epochs: 8,
            patience: 3,
            seed: 21,
            ..TrainConfig::default()
        };
        let baseline_acc = accuracy(&baseline, &test).unwrap();
        let (_, report) = strategy_a(
            &baseline,
            &train,
            &test,
            AttributionMethod::IntegratedGradients,
            &ig,
            &cfg,
            TargetPolicy::GroundTruth,
        )
        .unwrap();
        assert!(
            report.accuracy >= baseline_acc,
            "strategy A {} vs baseline {baseline_acc}",
            report.accuracy
        );
    }

    #[test]
    fn strategy_b_with_zero_first_stage_equals_strategy_a() {
        let side = 4;
        let baseline = trained_quadrant_classifier(side, 7);
        let train = synth_quadrant(200, side, 31).unwrap();
        let test = synth_quadrant(60, side, 33).unwrap();
        let ig = IgConfig::zeros(side * side, 8).unwrap();
        let masked_cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 0.01,
            max_epochs: 4,
            patience: 2,
            seed: 99,
            ..TrainConfig::default()
        };
        let zero_first = TrainConfig {
            max_epochs: 0,
            ..masked_cfg.clone()
        };
        let (net_a, report_a) = strategy_a(
            &baseline,
            &train,
            &test,
            AttributionMethod::IntegratedGradients,
            &ig,
            &masked_cfg,
            TargetPolicy::GroundTruth,
        )
        .unwrap();
        let (net_b, report_b) = strategy_b(
            &baseline,
            &train,
            &test,
            AttributionMethod::IntegratedGradients,
            &ig,
            &zero_first,
            &masked_cfg,
            TargetPolicy::GroundTruth,
        )
        .unwrap();
        assert!(net_a.params_bits_eq(&net_b));
        assert_eq!(report_a.accuracy, report_b.accuracy);
    }

    fn tiny_stack(side: usize, seed: u64) -> (SoftMaskStack, LabeledDataset) {
        let classifier = trained_quadrant_classifier(side, seed);
        let stack = SoftMaskStack::compact(classifier, &mut Rng::new(seed + 1)).unwrap();
        let ds = synth_quadrant(80, side, 200 + seed).unwrap();
        (stack, ds)
    }

    #[test]
    fn saturated_positive_mixer_passes_input_through() {
        let side = 4;
        let (mut stack, ds) = tiny_stack(side, 2);
        let d = side * side;
        // Force the mixer's output layer to a large positive constant.
        let last = stack.mixer.params_mut().len() - 2; // fc before sigmoid
        if let LayerParams::Dense { weight, bias } = &mut stack.mixer.params_mut()[last] {
            for v in weight.data_mut() {
                *v = 0.0;
            }
            for v in bias.data_mut() {
                *v = 50.0;
            }
        }
        let x = ds.input(0);
        let map = map_of(&vec![0.1; d]);
        let (mask, logits) = soft_forward(&stack, x, &map).unwrap();
        assert!(mask.values().data().iter().all(|&v| v > 0.999));
        let xb = Tensor::new(vec![1, d], x.data().to_vec()).unwrap();
        let (direct, _) = stack.classifier.infer(&xb).unwrap();
        for (a, b) in logits.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_negative_mixer_zeroes_input() {
        let side = 4;
        let (mut stack, ds) = tiny_stack(side, 3);
        let d = side * side;
        let last = stack.mixer.params_mut().len() - 2;
        if let LayerParams::Dense { weight, bias } = &mut stack.mixer.params_mut()[last] {
            for v in weight.data_mut() {
                *v = 0.0;
            }
            for v in bias.data_mut() {
                *v = -50.0;
            }
        }
        let x = ds.input(0);
        let map = map_of(&vec![0.1; d]);
        let (mask, logits) = soft_forward(&stack, x, &map).unwrap();
        assert!(mask.values().data().iter().all(|&v| v < 1e-9));
        let zeros = Tensor::zeros(&[1, d]);
        let (at_zero, _) = stack.classifier.infer(&zeros).unwrap();
        for (a, b) in logits.data().iter().zip(at_zero.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_mask_values_stay_in_open_unit_interval() {
        let side = 4;
        let (stack, ds) = tiny_stack(side, 4);
        let ig = IgConfig::zeros(side * side, 8).unwrap();
        let maps = attribute_dataset(
            &stack.classifier,
            &ds,
            AttributionMethod::IntegratedGradients,
            TargetPolicy::GroundTruth,
            &ig,
        )
        .unwrap();
        for i in 0..8 {
            let (mask, _) = soft_forward(&stack, ds.input(i), &maps[i]).unwrap();
            assert!(mask.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
            // Masked pixels of a [0,1] input stay in [0,1].
            let masked = apply_mask(ds.input(i), &mask).unwrap();
            assert!(masked.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn stack_gradients_match_finite_differences_and_classifier_grads_are_zero() {
        let side = 4;
        let (mut stack, ds) = tiny_stack(side, 5);
        let d = side * side;
        let ig = IgConfig::zeros(d, 8).unwrap();
        let maps = attribute_dataset(
            &stack.classifier,
            &ds,
            AttributionMethod::IntegratedGradients,
            TargetPolicy::GroundTruth,
            &ig,
        )
        .unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let (x, labels) = ds.batch(&idx);
        let map_batch = batch_maps(&maps, &idx, d).unwrap();

        // Inference semantics keep the loss a deterministic function of the
        // parameters (no batch-statistic coupling to check against).
        stack.set_trainable_mode(Mode::Inference);
        let (_, logits, tape) = stack.forward_batch(&x, &map_batch).unwrap();
        let (_, grad_logits) = cross_entropy(&logits, &labels).unwrap();
        let grads = stack.backward_batch(&tape, &grad_logits).unwrap();

        for lg in &grads.classifier {
            match lg {
                LayerGrads::Dense { d_weight, d_bias } => {
                    assert!(d_weight.data().iter().all(|&v| v == 0.0));
                    assert!(d_bias.data().iter().all(|&v| v == 0.0));
                }
                LayerGrads::BatchNorm { d_gamma, d_beta } => {
                    assert!(d_gamma.data().iter().all(|&v| v == 0.0));
                    assert!(d_beta.data().iter().all(|&v| v == 0.0));
                }
                LayerGrads::None => {}
            }
        }

        let loss_of = |stack: &SoftMaskStack| -> f64 {
            let (_, logits) = stack.infer_batch(&x, &map_batch).unwrap();
            cross_entropy(&logits, &labels).unwrap().0
        };

        // Check a sample of mixer parameter gradients against central
        // differences.
        let mixer_flat = Network::flatten_grads(&grads.mixer);
        let step = 1e-5;
        let mut checked = 0;
        for (ti, grad_tensor) in mixer_flat.iter().enumerate() {
            for i in (0..grad_tensor.len()).step_by(7) {
                let perturbed = |delta: f64| {
                    let mut copy = stack.clone();
                    let mut tensors = trainable_tensors(&mut copy, &[SubNetId::Mixer]);
                    tensors[ti].data_mut()[i] += delta;
                    loss_of(&copy)
                };
                let numeric = (perturbed(step) - perturbed(-step)) / (2.0 * step);
                let analytic = grad_tensor.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "mixer tensor {ti} coord {i}: {analytic} vs {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn train_soft_freezes_classifier_and_helps_on_synthetic() {
        let side = 6;
        let classifier = trained_quadrant_classifier(side, 9);
        let train = synth_quadrant(400, side, 41).unwrap();
        let test = synth_quadrant(120, side, 43).unwrap();
        let baseline_acc = accuracy(&classifier, &test).unwrap();
        let classifier_snapshot = classifier.clone();

        let mut stack = SoftMaskStack::compact(classifier, &mut Rng::new(77)).unwrap();
        let ig = IgConfig::zeros(side * side, 8).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 0.005,
            max_epochs: 10,
            patience: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        train_soft(&mut stack, &train, AttributionMethod::IntegratedGradients, &ig, &cfg).unwrap();

        assert!(stack.classifier.params_bits_eq(&classifier_snapshot));
        let soft_acc = evaluate_soft(
            &stack,
            &test,
            AttributionMethod::IntegratedGradients,
            &ig,
            TargetPolicy::GroundTruth,
        )
        .unwrap();
        assert!(
            soft_acc >= baseline_acc,
            "soft {soft_acc} vs baseline {baseline_acc}"
        );
    }

    #[test]
    fn stack_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.xaim");
        let (stack, _) = tiny_stack(4, 6);
        save_stack(&stack, &path).unwrap();
        let loaded = load_stack(&path).unwrap();
        assert!(stack.encoder_x.params_bits_eq(&loaded.encoder_x));
        assert!(stack.encoder_a.params_bits_eq(&loaded.encoder_a));
        assert!(stack.mixer.params_bits_eq(&loaded.mixer));
        assert!(stack.classifier.params_bits_eq(&loaded.classifier));
    }
}
