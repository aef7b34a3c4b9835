//! Per-feature relevance maps: saliency, guided backpropagation, and
//! integrated gradients against a chosen target class.
//!
//! All three methods attribute the pre-softmax logit of the target class.
//! Scores are stored signed; consumers that want magnitudes take them
//! themselves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{read_container, write_container};
use crate::error::{Error, Result};
use crate::network::{BackwardMode, Mode, Network};
use crate::tensor::{argmax_slice, Tensor};

/// The attribution methods under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttributionMethod {
    Saliency,
    GuidedBp,
    IntegratedGradients,
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Saliency => "saliency",
            AttributionMethod::GuidedBp => "guided_bp",
            AttributionMethod::IntegratedGradients => "integrated_gradients",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(AttributionMethod::Saliency),
            "guided_bp" => Ok(AttributionMethod::GuidedBp),
            "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients),
            other => Err(Error::Parameter(format!(
                "unknown attribution method '{other}' (expected saliency, guided_bp, or integrated_gradients)"
            ))),
        }
    }

    fn code(self) -> f64 {
        match self {
            AttributionMethod::Saliency => 0.0,
            AttributionMethod::GuidedBp => 1.0,
            AttributionMethod::IntegratedGradients => 2.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(AttributionMethod::Saliency),
            1 => Ok(AttributionMethod::GuidedBp),
            2 => Ok(AttributionMethod::IntegratedGradients),
            other => Err(Error::Format(format!("unknown method code {other}"))),
        }
    }
}

/// Whose class the explanation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// The sample's true label.
    GroundTruth,
    /// The class the network itself predicts.
    Predicted,
}

impl TargetPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(TargetPolicy::GroundTruth),
            "predicted" => Ok(TargetPolicy::Predicted),
            other => Err(Error::Parameter(format!(
                "unknown target policy '{other}' (expected ground_truth or predicted)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetPolicy::GroundTruth => "ground_truth",
            TargetPolicy::Predicted => "predicted",
        }
    }
}

/// Signed per-feature attribution scores for one input and target class.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    pub scores: Tensor,
    pub target_class: usize,
    pub method: AttributionMethod,
}

/// Integrated-gradients settings: the straight-line path runs from
/// `baseline` to the input in `steps` right-Riemann increments.
#[derive(Debug, Clone)]
pub struct IgConfig {
    pub steps: usize,
    pub baseline: Tensor,
}

impl IgConfig {
    pub const DEFAULT_STEPS: usize = 50;

    pub fn new(steps: usize, baseline: Tensor) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("integration needs at least one step".into()));
        }
        Ok(IgConfig { steps, baseline })
    }

    /// The default baseline: an all-zeros (black) image.
    pub fn zeros(input_dim: usize, steps: usize) -> Result<Self> {
        IgConfig::new(steps, Tensor::zeros(&[input_dim]))
    }
}

fn check_inputs(net: &Network, x: &Tensor, target: usize, op: &'static str) -> Result<()> {
    if net.mode() != Mode::Inference {
        return Err(Error::InferenceModeRequired(op));
    }
    let d = x.dims1()?;
    if d != net.input_dim() {
        return Err(Error::Shape(format!(
            "input has {d} features but the network expects {}",
            net.input_dim()
        )));
    }
    if target >= net.output_dim() {
        return Err(Error::Target {
            target,
            num_classes: net.output_dim(),
        });
    }
    Ok(())
}

fn gradient_map(
    net: &Network,
    x: &Tensor,
    target: usize,
    mode: BackwardMode,
) -> Result<Tensor> {
    let d = x.len();
    let batch = Tensor::new(vec![1, d], x.data().to_vec())?;
    let (_, tape) = net.infer(&batch)?;
    let mut upstream = Tensor::zeros(&[1, net.output_dim()]);
    upstream.data_mut()[target] = 1.0;
    let (_, input_grad) = net.backward(&tape, &upstream, mode)?;
    input_grad.reshape(vec![d])
}

/// Raw gradient of the target logit with respect to the input.
pub fn saliency(net: &Network, x: &Tensor, target: usize) -> Result<RelevanceMap> {
    check_inputs(net, x, target, "saliency")?;
    Ok(RelevanceMap {
        scores: gradient_map(net, x, target, BackwardMode::Standard)?,
        target_class: target,
        method: AttributionMethod::Saliency,
    })
}

/// Gradient with every relu additionally blocking nonpositive upstream flow.
pub fn guided_bp(net: &Network, x: &Tensor, target: usize) -> Result<RelevanceMap> {
    check_inputs(net, x, target, "guided_bp")?;
    Ok(RelevanceMap {
        scores: gradient_map(net, x, target, BackwardMode::Guided)?,
        target_class: target,
        method: AttributionMethod::GuidedBp,
    })
}

/// Integrated gradients with a right Riemann sum over the straight line from
/// the baseline to the input:
/// `scores_i = (x_i - ref_i) * mean_k grad_i(ref + (k/m)(x - ref))`, k = 1..m.
pub fn integrated_gradients(
    net: &Network,
    x: &Tensor,
    target: usize,
    cfg: &IgConfig,
) -> Result<RelevanceMap> {
    check_inputs(net, x, target, "integrated_gradients")?;
    let d = x.len();
    if cfg.baseline.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "baseline shape {:?} does not match input shape {:?}",
            cfg.baseline.shape(),
            x.shape()
        )));
    }
    let m = cfg.steps;
    // All m path points go through one batched forward/backward pass.
    let mut points = Vec::with_capacity(m * d);
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        for (xi, ri) in x.data().iter().zip(cfg.baseline.data()) {
            points.push(ri + alpha * (xi - ri));
        }
    }
    let batch = Tensor::new(vec![m, d], points)?;
    let (_, tape) = net.infer(&batch)?;
    let mut upstream = Tensor::zeros(&[m, net.output_dim()]);
    for i in 0..m {
        upstream.row_mut(i)[target] = 1.0;
    }
    let (_, grads) = net.backward(&tape, &upstream, BackwardMode::Standard)?;
    let mut scores = vec![0.0; d];
    for i in 0..m {
        for (s, &g) in scores.iter_mut().zip(grads.row(i)) {
            *s += g;
        }
    }
    for (j, s) in scores.iter_mut().enumerate() {
        *s = (x.data()[j] - cfg.baseline.data()[j]) * (*s / m as f64);
    }
    Ok(RelevanceMap {
        scores: Tensor::new(vec![d], scores)?,
        target_class: target,
        method: AttributionMethod::IntegratedGradients,
    })
}

/// One relevance map per sample, in sample order. Attribution is pure
/// read-only use of the network, so samples run in parallel; failures carry
/// the offending sample index.
pub fn attribute_dataset(
    net: &Network,
    ds: &crate::dataset::LabeledDataset,
    method: AttributionMethod,
    policy: TargetPolicy,
    ig: &IgConfig,
) -> Result<Vec<RelevanceMap>> {
    if net.mode() != Mode::Inference {
        return Err(Error::InferenceModeRequired("attribute_dataset"));
    }
    let one = |i: usize| -> Result<RelevanceMap> {
        let x = ds.input(i);
        let target = match policy {
            TargetPolicy::GroundTruth => ds.label(i),
            TargetPolicy::Predicted => {
                let batch = Tensor::new(vec![1, x.len()], x.data().to_vec())?;
                let (logits, _) = net.infer(&batch)?;
                argmax_slice(logits.row(0))
            }
        };
        match method {
            AttributionMethod::Saliency => saliency(net, x, target),
            AttributionMethod::GuidedBp => guided_bp(net, x, target),
            AttributionMethod::IntegratedGradients => integrated_gradients(net, x, target, ig),
        }
    };
    (0..ds.len())
        .into_par_iter()
        .map(|i| one(i).map_err(|e| Error::at_sample(i, e)))
        .collect()
}

/// Writes maps as CSV rows `(sample_index, feature_index, score)`.
pub fn write_maps_csv(maps: &[RelevanceMap], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "sample_index,feature_index,score").map_err(io_err)?;
    for (i, map) in maps.iter().enumerate() {
        for (j, &s) in map.scores.data().iter().enumerate() {
            writeln!(w, "{i},{j},{s}").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Saves maps into the checkpoint tensor container: tensor 0 is an `[n, 2]`
/// metadata block of `(target_class, method_code)` rows, followed by one
/// score tensor per map.
pub fn save_maps(maps: &[RelevanceMap], path: &Path) -> Result<()> {
    let mut meta = Vec::with_capacity(maps.len() * 2);
    for map in maps {
        meta.push(map.target_class as f64);
        meta.push(map.method.code());
    }
    let mut tensors = Vec::with_capacity(maps.len() + 1);
    tensors.push(Tensor::new(vec![maps.len(), 2], meta)?);
    tensors.extend(maps.iter().map(|m| m.scores.clone()));
    write_container(path, &tensors)
}

/// Loads maps saved by [`save_maps`].
pub fn load_maps(path: &Path) -> Result<Vec<RelevanceMap>> {
    let tensors = read_container(path)?;
    if tensors.is_empty() {
        return Err(Error::Format(format!(
            "{}: missing metadata tensor",
            path.display()
        )));
    }
    let meta = &tensors[0];
    let (n, two) = meta.dims2()?;
    if two != 2 || tensors.len() != n + 1 {
        return Err(Error::Format(format!(
            "{}: metadata declares {n} maps but the file holds {}",
            path.display(),
            tensors.len() - 1
        )));
    }
    let mut maps = Vec::with_capacity(n);
    for (i, scores) in tensors[1..].iter().enumerate() {
        maps.push(RelevanceMap {
            scores: scores.clone(),
            target_class: meta.row(i)[0] as usize,
            method: AttributionMethod::from_code(meta.row(i)[1])?,
        });
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{quadrant_indices, synth_quadrant};
    use crate::network::{LayerParams, LayerSpec, NetworkSpec};
    use crate::rng::Rng;
    use crate::training::{fit, TrainConfig};

    fn linear_net(weight_rows: &[&[f64]]) -> Network {
        // weight_rows[t] is the gradient of logit t, i.e. column t of the
        // stored [in, out] weight.
        let out_dim = weight_rows.len();
        let in_dim = weight_rows[0].len();
        let spec = NetworkSpec::new(in_dim, vec![LayerSpec::FullyConnected { out_dim }]).unwrap();
        let mut net = Network::new(spec, &mut Rng::new(0)).unwrap();
        if let LayerParams::Dense { weight, .. } = &mut net.params_mut()[0] {
            for (t, row) in weight_rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    weight.data_mut()[j * out_dim + t] = v;
                }
            }
        }
        net
    }

    #[test]
    fn saliency_of_linear_model_is_the_weight_row() {
        let net = linear_net(&[&[1.0, -2.0, 3.0], &[0.5, 0.5, 0.5]]);
        let x = Tensor::from_slice(&[0.2, 0.9, -0.4]);
        let map = saliency(&net, &x, 0).unwrap();
        assert_eq!(map.scores.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn saliency_of_constant_model_is_zero() {
        let net = linear_net(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let x = Tensor::from_slice(&[1.0, 1.0]);
        let map = saliency(&net, &x, 1).unwrap();
        assert_eq!(map.scores.data(), &[0.0, 0.0]);
    }

    #[test]
    fn saliency_rejects_out_of_range_target() {
        let net = linear_net(&[&[1.0, 1.0]]);
        let x = Tensor::from_slice(&[0.0, 0.0]);
        assert!(matches!(
            saliency(&net, &x, 5).unwrap_err(),
            Error::Target { .. }
        ));
    }

    #[test]
    fn guided_equals_saliency_without_relu() {
        let net = linear_net(&[&[2.0, -1.0], &[0.3, 0.7]]);
        let x = Tensor::from_slice(&[0.4, 0.6]);
        let s = saliency(&net, &x, 0).unwrap();
        let g = guided_bp(&net, &x, 0).unwrap();
        assert_eq!(s.scores.data(), g.scores.data());
    }

    #[test]
    fn guided_matches_explicit_clamp_reference_on_random_relu_net() {
        // Independent reference: run the same chain rule by hand, clamping
        // at each relu.
        let spec = NetworkSpec::mlp(5, &[7, 6], 3).unwrap();
        let mut rng = Rng::new(123);
        let net = Network::new(spec, &mut rng).unwrap();
        let x = Tensor::from_slice(&[0.3, -0.2, 0.8, 0.1, -0.5]);
        let target = 2;
        let got = guided_bp(&net, &x, target).unwrap();

        // Reference forward collecting pre-activations.
        let mut weights: Vec<(&Tensor, &Tensor)> = Vec::new();
        for p in net.params() {
            if let LayerParams::Dense { weight, bias } = p {
                weights.push((weight, bias));
            }
        }
        let mut acts = vec![x.data().to_vec()];
        let mut pres: Vec<Vec<f64>> = Vec::new();
        for (li, (w, b)) in weights.iter().enumerate() {
            let (ind, outd) = w.dims2().unwrap();
            let prev = acts.last().unwrap().clone();
            let mut pre = vec![0.0; outd];
            for j in 0..outd {
                let mut acc = b.data()[j];
                for i in 0..ind {
                    acc += prev[i] * w.data()[i * outd + j];
                }
                pre[j] = acc;
            }
            let is_last = li == weights.len() - 1;
            let act = if is_last {
                pre.clone()
            } else {
                pre.iter().map(|&v| v.max(0.0)).collect()
            };
            pres.push(pre);
            acts.push(act);
        }
        // Reference backward with the guided gate.
        let mut grad = vec![0.0; weights.last().unwrap().0.dims2().unwrap().1];
        grad[target] = 1.0;
        for li in (0..weights.len()).rev() {
            let (w, _) = weights[li];
            let (ind, outd) = w.dims2().unwrap();
            if li < weights.len() - 1 {
                for j in 0..outd {
                    let open = pres[li][j] > 0.0 && grad[j] > 0.0;
                    if !open {
                        grad[j] = 0.0;
                    }
                }
            }
            let mut next = vec![0.0; ind];
            for i in 0..ind {
                for j in 0..outd {
                    next[i] += grad[j] * w.data()[i * outd + j];
                }
            }
            grad = next;
        }
        for (a, b) in got.scores.data().iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn guided_zero_when_flow_blocked() {
        // fc into relu into fc with a negative output weight: the upstream
        // gradient into the relu is negative, so the guided map is zero.
        let spec = NetworkSpec::new(
            2,
            vec![
                LayerSpec::FullyConnected { out_dim: 1 },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { out_dim: 1 },
            ],
        )
        .unwrap();
        let mut net = Network::new(spec, &mut Rng::new(1)).unwrap();
        if let LayerParams::Dense { weight, .. } = &mut net.params_mut()[0] {
            weight.data_mut().copy_from_slice(&[1.0, 1.0]);
        }
        if let LayerParams::Dense { weight, .. } = &mut net.params_mut()[2] {
            weight.data_mut()[0] = -2.0;
        }
        let x = Tensor::from_slice(&[1.0, 2.0]); // positive pre-activation
        let map = guided_bp(&net, &x, 0).unwrap();
        assert_eq!(map.scores.data(), &[0.0, 0.0]);
        // Standard saliency sees the negative path.
        let s = saliency(&net, &x, 0).unwrap();
        assert_eq!(s.scores.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn ig_linear_model_is_w_times_x() {
        let net = linear_net(&[&[1.5, -0.5, 2.0], &[0.0, 1.0, 0.0]]);
        let x = Tensor::from_slice(&[0.4, 0.8, -0.3]);
        for m in [1usize, 7, 50] {
            let cfg = IgConfig::zeros(3, m).unwrap();
            let map = integrated_gradients(&net, &x, 0, &cfg).unwrap();
            let expect = [1.5 * 0.4, -0.5 * 0.8, 2.0 * -0.3];
            for (got, want) in map.scores.data().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "m={m}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ig_at_baseline_is_zero() {
        let spec = NetworkSpec::mlp(4, &[6], 3).unwrap();
        let net = Network::new(spec, &mut Rng::new(9)).unwrap();
        let x = Tensor::zeros(&[4]);
        let cfg = IgConfig::zeros(4, 16).unwrap();
        let map = integrated_gradients(&net, &x, 1, &cfg).unwrap();
        assert_eq!(map.scores.data(), &[0.0; 4]);
    }

    #[test]
    fn ig_rejects_baseline_shape_mismatch() {
        let net = linear_net(&[&[1.0, 1.0]]);
        let x = Tensor::from_slice(&[0.1, 0.2]);
        let cfg = IgConfig::new(4, Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            integrated_gradients(&net, &x, 0, &cfg).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn ig_completeness_on_a_small_relu_net() {
        let spec = NetworkSpec::mlp(8, &[16, 12], 5).unwrap();
        let mut rng = Rng::new(40);
        let net = Network::new(spec, &mut rng).unwrap();
        let x = Tensor::new(vec![8], (0..8).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let target = 3;
        let cfg = IgConfig::zeros(8, 512).unwrap();
        let map = integrated_gradients(&net, &x, target, &cfg).unwrap();
        let sum: f64 = map.scores.data().iter().sum();

        let logit = |input: &Tensor| -> f64 {
            let b = Tensor::new(vec![1, 8], input.data().to_vec()).unwrap();
            let (l, _) = net.infer(&b).unwrap();
            l.data()[target]
        };
        let delta = logit(&x) - logit(&Tensor::zeros(&[8]));
        assert!(
            (sum - delta).abs() <= 0.01 * delta.abs().max(1e-9),
            "sum {sum} vs logit delta {delta}"
        );
    }

    #[test]
    fn ig_converges_as_steps_double() {
        let spec = NetworkSpec::mlp(6, &[10, 8], 4).unwrap();
        let mut rng = Rng::new(77);
        let net = Network::new(spec, &mut rng).unwrap();
        let x = Tensor::new(vec![6], (0..6).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let mut prev_gap: Option<f64> = None;
        let mut m = 16usize;
        while m <= 256 {
            let a = integrated_gradients(&net, &x, 2, &IgConfig::zeros(6, m).unwrap()).unwrap();
            let b = integrated_gradients(&net, &x, 2, &IgConfig::zeros(6, 2 * m).unwrap()).unwrap();
            let gap: f64 = a
                .scores
                .data()
                .iter()
                .zip(b.scores.data())
                .map(|(p, q)| (p - q).abs())
                .sum();
            if let Some(prev) = prev_gap {
                assert!(gap <= prev + 1e-12, "gap grew from {prev} to {gap} at m={m}");
            }
            prev_gap = Some(gap);
            m *= 2;
        }
    }

    #[test]
    fn attribute_dataset_order_and_policy() {
        let ds = synth_quadrant(12, 4, 6).unwrap();
        let spec = NetworkSpec::mlp(16, &[8], 4).unwrap();
        let mut net = Network::new(spec, &mut Rng::new(10)).unwrap();
        fit(
            &mut net,
            &synth_quadrant(400, 4, 91).unwrap(),
            &TrainConfig {
                batch_size: 32,
                learning_rate: 0.02,
                max_epochs: 20,
                patience: 4,
                seed: 14,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let ig = IgConfig::zeros(16, 8).unwrap();
        let maps =
            attribute_dataset(&net, &ds, AttributionMethod::Saliency, TargetPolicy::GroundTruth, &ig)
                .unwrap();
        assert_eq!(maps.len(), 12);

        // For correctly predicted samples the two policies agree.
        let predicted =
            attribute_dataset(&net, &ds, AttributionMethod::Saliency, TargetPolicy::Predicted, &ig)
                .unwrap();
        for i in 0..ds.len() {
            let batch = Tensor::new(vec![1, 16], ds.input(i).data().to_vec()).unwrap();
            let (logits, _) = net.infer(&batch).unwrap();
            if argmax_slice(logits.row(0)) == ds.label(i) {
                assert!(maps[i].scores.bits_eq(&predicted[i].scores));
            }
        }
    }

    #[test]
    fn trained_model_attributions_favor_the_bright_quadrant() {
        let side = 8;
        let train = synth_quadrant(2000, side, 3).unwrap();
        let test = synth_quadrant(60, side, 1001).unwrap();
        let spec = NetworkSpec::mlp(side * side, &[16], 4).unwrap();
        let mut net = Network::new(spec, &mut Rng::new(2)).unwrap();
        fit(
            &mut net,
            &train,
            &TrainConfig {
                batch_size: 64,
                learning_rate: 0.01,
                max_epochs: 25,
                patience: 5,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();

        let ig = IgConfig::zeros(side * side, 32).unwrap();
        let maps = attribute_dataset(
            &net,
            &test,
            AttributionMethod::IntegratedGradients,
            TargetPolicy::GroundTruth,
            &ig,
        )
        .unwrap();

        // Saliency magnitude: inside the ground-truth quadrant should beat
        // outside on average.
        let mut favored = 0usize;
        for (i, map) in maps.iter().enumerate() {
            let quad = quadrant_indices(side, test.label(i));
            let inside: f64 = quad.iter().map(|&j| map.scores.data()[j].abs()).sum::<f64>()
                / quad.len() as f64;
            let outside_count = map.scores.len() - quad.len();
            let outside: f64 = (0..map.scores.len())
                .filter(|j| !quad.contains(j))
                .map(|j| map.scores.data()[j].abs())
                .sum::<f64>()
                / outside_count as f64;
            if inside > outside {
                favored += 1;
            }
        }
        assert!(favored * 10 >= maps.len() * 9, "{favored}/{}", maps.len());
    }

    #[test]
    fn maps_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.xaim");
        let maps = vec![
            RelevanceMap {
                scores: Tensor::from_slice(&[0.5, -0.25, 0.0]),
                target_class: 2,
                method: AttributionMethod::IntegratedGradients,
            },
            RelevanceMap {
                scores: Tensor::from_slice(&[1.0, 2.0, -3.0]),
                target_class: 0,
                method: AttributionMethod::Saliency,
            },
        ];
        save_maps(&maps, &path).unwrap();
        let back = load_maps(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in maps.iter().zip(&back) {
            assert!(a.scores.bits_eq(&b.scores));
            assert_eq!(a.target_class, b.target_class);
            assert_eq!(a.method, b.method);
        }
    }
}
