//! MoRF/LeRF perturbation curves: iteratively zero input features in
//! relevance order, track the classifier's confidence in each sample's
//! originally predicted class, and rank attribution methods by the area
//! between the two curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::attribution::{AttributionMethod, RelevanceMap};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{Mode, Network};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{argmax_slice, softmax_rows, Tensor};

const INFER_CHUNK: usize = 256;

/// Feature-removal order for curve construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalOrder {
    /// Most relevant first: descending scores. Faithful explanations make
    /// this curve fall steeply.
    Morf,
    /// Least relevant first: ascending scores. Faithful explanations keep
    /// this curve flat for a long time.
    Lerf,
}

impl RemovalOrder {
    pub fn name(self) -> &'static str {
        match self {
            RemovalOrder::Morf => "morf",
            RemovalOrder::Lerf => "lerf",
        }
    }
}

/// Fraction of features removed per curve step.
#[derive(Debug, Clone, Copy)]
pub struct CurveStepSpec {
    pub step_fraction: f64,
}

impl CurveStepSpec {
    pub fn new(step_fraction: f64) -> Result<Self> {
        if !(step_fraction > 0.0 && step_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "step fraction must lie in (0, 1], got {step_fraction}"
            )));
        }
        Ok(CurveStepSpec { step_fraction })
    }

    /// Every fraction the curve is evaluated at: 0, s, 2s, ..., then exactly 1.
    pub fn fractions(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut k = 1u64;
        loop {
            let f = k as f64 * self.step_fraction;
            if f >= 1.0 {
                break;
            }
            out.push(f);
            k += 1;
        }
        out.push(1.0);
        out
    }
}

impl Default for CurveStepSpec {
    fn default() -> Self {
        CurveStepSpec { step_fraction: 0.01 }
    }
}

/// One evaluated point of a perturbation curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub removed_fraction: f64,
    /// Mean softmax probability of each sample's originally predicted class.
    pub mean_score: f64,
}

/// A full MoRF or LeRF curve for one relevance source.
#[derive(Debug, Clone)]
pub struct PerturbationCurve {
    /// Label for reports: an attribution method name or a control tag.
    pub tag: String,
    pub order: RemovalOrder,
    pub points: Vec<CurvePoint>,
}

/// The order features get removed in: a permutation of `0..d` sorted by
/// relevance (descending for MoRF, ascending for LeRF), ties broken by
/// ascending feature index.
pub fn perturb_sequence(
    x: &Tensor,
    relevance: &RelevanceMap,
    order: RemovalOrder,
) -> Result<Vec<usize>> {
    let d = x.dims1()?;
    if relevance.scores.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "relevance shape {:?} does not match input shape {:?}",
            relevance.scores.shape(),
            x.shape()
        )));
    }
    let scores = relevance.scores.data();
    let mut indices: Vec<usize> = (0..d).collect();
    indices.sort_unstable_by(|&a, &b| {
        let ord = match order {
            RemovalOrder::Morf => scores[b].partial_cmp(&scores[a]),
            RemovalOrder::Lerf => scores[a].partial_cmp(&scores[b]),
        };
        ord.expect("relevance scores are finite").then(a.cmp(&b))
    });
    Ok(indices)
}

fn mean_predicted_prob(
    net: &Network,
    inputs: &[Tensor],
    predicted: &[usize],
) -> Result<f64> {
    let n = inputs.len();
    let d = inputs[0].len();
    let mut sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let mut data = Vec::with_capacity((end - start) * d);
        for input in &inputs[start..end] {
            data.extend_from_slice(input.data());
        }
        let batch = Tensor::new(vec![end - start, d], data)?;
        let (logits, _) = net.infer(&batch)?;
        let probs = softmax_rows(&logits)?;
        for (i, &class) in predicted[start..end].iter().enumerate() {
            sum += probs.row(i)[class];
        }
        start = end;
    }
    Ok(sum / n as f64)
}

/// Builds one perturbation curve over a dataset.
///
/// For each fraction `f` in the step grid, the first `floor(f * d)` features
/// of every sample (in that sample's removal order) are replaced by zero,
/// the batch is run through the network, and the softmax probability of each
/// sample's originally predicted class is averaged. The `f = 0` point is the
/// unperturbed mean score; at `f = 1` every input is all-zero so MoRF and
/// LeRF agree exactly.
pub fn curve(
    net: &Network,
    ds: &LabeledDataset,
    maps: &[RelevanceMap],
    order: RemovalOrder,
    step: &CurveStepSpec,
    tag: &str,
) -> Result<PerturbationCurve> {
    if net.mode() != Mode::Inference {
        return Err(Error::InferenceModeRequired("curve"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if maps.len() != ds.len() {
        return Err(Error::Consistency(format!(
            "{} relevance maps for {} samples",
            maps.len(),
            ds.len()
        )));
    }
    let d = ds.input_dim();

    // Original predictions and their unperturbed probabilities.
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut predicted = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(INFER_CHUNK) {
        let (x, _) = ds.batch(chunk);
        let (logits, _) = net.infer(&x)?;
        for i in 0..chunk.len() {
            predicted.push(argmax_slice(logits.row(i)));
        }
    }

    let mut sequences = Vec::with_capacity(ds.len());
    for (i, map) in maps.iter().enumerate() {
        sequences.push(
            perturb_sequence(ds.input(i), map, order).map_err(|e| Error::at_sample(i, e))?,
        );
    }

    let mut points = Vec::new();
    for f in step.fractions() {
        let removed = (f * d as f64).floor() as usize;
        let mean_score = if removed == 0 {
            mean_predicted_prob(net, ds.inputs(), &predicted)?
        } else {
            let perturbed: Vec<Tensor> = (0..ds.len())
                .map(|i| {
                    let mut x = ds.input(i).clone();
                    for &j in &sequences[i][..removed] {
                        x.data_mut()[j] = 0.0;
                    }
                    x
                })
                .collect();
            mean_predicted_prob(net, &perturbed, &predicted)?
        };
        points.push(CurvePoint {
            removed_fraction: f,
            mean_score,
        });
    }
    Ok(PerturbationCurve {
        tag: tag.to_string(),
        order,
        points,
    })
}

/// Trapezoidal area under a curve over the removed-fraction axis.
pub fn area(curve: &PerturbationCurve) -> f64 {
    let mut total = 0.0;
    for pair in curve.points.windows(2) {
        let width = pair[1].removed_fraction - pair[0].removed_fraction;
        total += width * (pair[0].mean_score + pair[1].mean_score) / 2.0;
    }
    total
}

/// A method's area-between-perturbation-curves score.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRanking {
    pub tag: String,
    /// `area(LeRF) - area(MoRF)`: larger means the relevance ordering
    /// carries more information about the classifier.
    pub abpc: f64,
}

/// Ranks relevance sources by ABPC, descending; ties break alphabetically.
///
/// `curves` must hold exactly one MoRF and one LeRF curve per tag.
pub fn rank_methods(curves: &[PerturbationCurve]) -> Result<Vec<MethodRanking>> {
    let mut tags: Vec<&str> = curves.iter().map(|c| c.tag.as_str()).collect();
    tags.sort_unstable();
    tags.dedup();
    let mut rankings = Vec::with_capacity(tags.len());
    for tag in tags {
        let morf: Vec<&PerturbationCurve> = curves
            .iter()
            .filter(|c| c.tag == tag && c.order == RemovalOrder::Morf)
            .collect();
        let lerf: Vec<&PerturbationCurve> = curves
            .iter()
            .filter(|c| c.tag == tag && c.order == RemovalOrder::Lerf)
            .collect();
        if morf.len() != 1 || lerf.len() != 1 {
            return Err(Error::Consistency(format!(
                "tag '{tag}' has {} morf and {} lerf curves, expected one of each",
                morf.len(),
                lerf.len()
            )));
        }
        rankings.push(MethodRanking {
            tag: tag.to_string(),
            abpc: area(lerf[0]) - area(morf[0]),
        });
    }
    rankings.sort_by(|a, b| {
        b.abpc
            .partial_cmp(&a.abpc)
            .expect("areas are finite")
            .then_with(|| a.tag.cmp(&b.tag))
    });
    Ok(rankings)
}

/// Uniformly random relevance maps: the order-carries-no-information control
/// against which real methods are compared.
pub fn random_relevance_maps(ds: &LabeledDataset, seed: u64) -> Vec<RelevanceMap> {
    (0..ds.len())
        .map(|i| {
            let mut rng = Rng::new(derive_seed(seed, i as u64));
            let d = ds.input_dim();
            let scores: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            RelevanceMap {
                scores: Tensor::new(vec![d], scores).expect("shape is consistent"),
                target_class: ds.label(i),
                method: AttributionMethod::Saliency,
            }
        })
        .collect()
}

/// Writes curves as CSV rows `(method, order, removed_fraction, mean_score)`.
pub fn write_curves_csv(curves: &[&PerturbationCurve], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "method,order,removed_fraction,mean_score").map_err(io_err)?;
    for curve in curves {
        for point in &curve.points {
            writeln!(
                w,
                "{},{},{},{}",
                curve.tag,
                curve.order.name(),
                point.removed_fraction,
                point.mean_score
            )
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionMethod;
    use crate::dataset::synth_quadrant;
    use crate::network::{LayerParams, LayerSpec, NetworkSpec};
    use crate::rng::Rng;

    fn map_of(scores: &[f64]) -> RelevanceMap {
        RelevanceMap {
            scores: Tensor::from_slice(scores),
            target_class: 0,
            method: AttributionMethod::Saliency,
        }
    }

    #[test]
    fn perturb_sequence_sorting() {
        let x = Tensor::from_slice(&[0.0, 0.0, 0.0]);
        let map = map_of(&[0.1, 0.9, -0.3]);
        assert_eq!(
            perturb_sequence(&x, &map, RemovalOrder::Morf).unwrap(),
            vec![1, 0, 2]
        );
        assert_eq!(
            perturb_sequence(&x, &map, RemovalOrder::Lerf).unwrap(),
            vec![2, 0, 1]
        );
    }

    #[test]
    fn perturb_sequence_ties_keep_index_order() {
        let x = Tensor::from_slice(&[0.0; 5]);
        let map = map_of(&[0.5; 5]);
        let identity: Vec<usize> = (0..5).collect();
        assert_eq!(
            perturb_sequence(&x, &map, RemovalOrder::Morf).unwrap(),
            identity
        );
        assert_eq!(
            perturb_sequence(&x, &map, RemovalOrder::Lerf).unwrap(),
            identity
        );
    }

    #[test]
    fn perturb_sequence_rejects_shape_mismatch() {
        let x = Tensor::from_slice(&[0.0, 0.0]);
        let map = map_of(&[1.0, 2.0, 3.0]);
        assert!(perturb_sequence(&x, &map, RemovalOrder::Morf).is_err());
    }

    /// Two-class linear model: logit 0 = w . x, logit 1 = 0.
    fn two_class_linear(w: &[f64]) -> Network {
        let d = w.len();
        let spec = NetworkSpec::new(d, vec![LayerSpec::FullyConnected { out_dim: 2 }]).unwrap();
        let mut net = Network::new(spec, &mut Rng::new(0)).unwrap();
        if let LayerParams::Dense { weight, .. } = &mut net.params_mut()[0] {
            for (j, &v) in w.iter().enumerate() {
                weight.data_mut()[j * 2] = v;
                weight.data_mut()[j * 2 + 1] = 0.0;
            }
        }
        net
    }

    fn uniform_dataset(d: usize, value: f64) -> LabeledDataset {
        LabeledDataset::new(
            vec![Tensor::full(&[d], value)],
            vec![0],
            1,
            d,
            2,
        )
        .unwrap()
    }

    #[test]
    fn curve_endpoints() {
        let net = two_class_linear(&[4.0, 3.0, 2.0, 1.0]);
        let ds = uniform_dataset(4, 0.5);
        let maps = vec![map_of(&[4.0, 3.0, 2.0, 1.0])];
        let step = CurveStepSpec::new(0.25).unwrap();
        let morf = curve(&net, &ds, &maps, RemovalOrder::Morf, &step, "w").unwrap();
        let lerf = curve(&net, &ds, &maps, RemovalOrder::Lerf, &step, "w").unwrap();

        // f = 0: unperturbed score, identical between orders.
        assert_eq!(morf.points[0].removed_fraction, 0.0);
        assert_eq!(morf.points[0].mean_score, lerf.points[0].mean_score);
        // f = 1: full removal is order-independent.
        let last_m = morf.points.last().unwrap();
        let last_l = lerf.points.last().unwrap();
        assert_eq!(last_m.removed_fraction, 1.0);
        assert_eq!(last_m.mean_score, last_l.mean_score);
        // All-zero input gives logits (0, 0), probability 1/2.
        assert!((last_m.mean_score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn curve_matches_brute_force_enumeration() {
        // Hand enumeration of every removal prefix for the 4-feature model.
        let w = [4.0, 3.0, 2.0, 1.0];
        let net = two_class_linear(&w);
        let x_val = 0.5;
        let ds = uniform_dataset(4, x_val);
        let maps = vec![map_of(&w)];
        let step = CurveStepSpec::new(0.25).unwrap();

        let oracle = |remaining: &[usize]| -> f64 {
            let logit: f64 = remaining.iter().map(|&j| w[j] * x_val).sum();
            // softmax([logit, 0])[0] with max subtraction, mirroring the
            // production formula.
            let max = logit.max(0.0);
            let e0 = (logit - max).exp();
            let e1 = (0.0 - max).exp();
            e0 / (e0 + e1)
        };

        let morf = curve(&net, &ds, &maps, RemovalOrder::Morf, &step, "w").unwrap();
        // MoRF removes 0, then 1, then 2 ... (descending relevance).
        let morf_remaining: [&[usize]; 5] = [&[0, 1, 2, 3], &[1, 2, 3], &[2, 3], &[3], &[]];
        for (point, remaining) in morf.points.iter().zip(morf_remaining) {
            assert_eq!(point.mean_score, oracle(remaining), "f={}", point.removed_fraction);
        }

        let lerf = curve(&net, &ds, &maps, RemovalOrder::Lerf, &step, "w").unwrap();
        let lerf_remaining: [&[usize]; 5] = [&[0, 1, 2, 3], &[0, 1, 2], &[0, 1], &[0], &[]];
        for (point, remaining) in lerf.points.iter().zip(lerf_remaining) {
            assert_eq!(point.mean_score, oracle(remaining), "f={}", point.removed_fraction);
        }
    }

    #[test]
    fn curve_rejects_map_count_mismatch() {
        let net = two_class_linear(&[1.0, 1.0]);
        let ds = uniform_dataset(2, 0.3);
        let err = curve(
            &net,
            &ds,
            &[],
            RemovalOrder::Morf,
            &CurveStepSpec::default(),
            "w",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn curve_is_invariant_to_sample_order() {
        let side = 4;
        let ds = synth_quadrant(24, side, 9).unwrap();
        let net = {
            let spec = NetworkSpec::mlp(16, &[8], 4).unwrap();
            Network::new(spec, &mut Rng::new(33)).unwrap()
        };
        let maps = random_relevance_maps(&ds, 5);
        let step = CurveStepSpec::new(0.25).unwrap();
        let forward = curve(&net, &ds, &maps, RemovalOrder::Morf, &step, "r").unwrap();

        let reversed_idx: Vec<usize> = (0..ds.len()).rev().collect();
        let reversed = ds.select(&reversed_idx);
        let reversed_maps: Vec<RelevanceMap> =
            reversed_idx.iter().map(|&i| maps[i].clone()).collect();
        let backward = curve(&net, &reversed, &reversed_maps, RemovalOrder::Morf, &step, "r").unwrap();
        for (a, b) in forward.points.iter().zip(&backward.points) {
            assert!((a.mean_score - b.mean_score).abs() < 1e-12);
        }
    }

    #[test]
    fn area_constant_and_triangle() {
        let constant = PerturbationCurve {
            tag: "c".into(),
            order: RemovalOrder::Morf,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: 1.0 },
                CurvePoint { removed_fraction: 0.5, mean_score: 1.0 },
                CurvePoint { removed_fraction: 1.0, mean_score: 1.0 },
            ],
        };
        assert!((area(&constant) - 1.0).abs() < 1e-15);

        let line = PerturbationCurve {
            tag: "l".into(),
            order: RemovalOrder::Morf,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: 1.0 },
                CurvePoint { removed_fraction: 1.0, mean_score: 0.0 },
            ],
        };
        assert!((area(&line) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn area_matches_dense_trapezoid_oracle() {
        // A monotone curve sampled on an irregular grid, against a fine
        // re-integration of the same piecewise-linear function.
        let mut rng = Rng::new(21);
        let mut fractions = vec![0.0];
        let mut f = 0.0;
        while f < 1.0 {
            f += rng.uniform(0.01, 0.08);
            if f < 1.0 {
                fractions.push(f);
            }
        }
        fractions.push(1.0);
        let mut score = 1.0;
        let points: Vec<CurvePoint> = fractions
            .iter()
            .map(|&f| {
                score -= rng.uniform(0.0, 0.05);
                CurvePoint { removed_fraction: f, mean_score: score.max(0.0) }
            })
            .collect();
        let c = PerturbationCurve { tag: "m".into(), order: RemovalOrder::Lerf, points };

        // Piecewise-linear interpolation integrated on a dense grid.
        let dense_steps = 200_000usize;
        let interp = |f: f64| -> f64 {
            let pts = &c.points;
            let seg = pts.windows(2).find(|w| f >= w[0].removed_fraction && f <= w[1].removed_fraction);
            let w = seg.expect("f within range");
            let t = (f - w[0].removed_fraction) / (w[1].removed_fraction - w[0].removed_fraction);
            w[0].mean_score + t * (w[1].mean_score - w[0].mean_score)
        };
        let mut oracle = 0.0;
        for i in 0..dense_steps {
            let f0 = i as f64 / dense_steps as f64;
            let f1 = (i + 1) as f64 / dense_steps as f64;
            oracle += (f1 - f0) * (interp(f0) + interp(f1)) / 2.0;
        }
        assert!((area(&c) - oracle).abs() < 1e-9, "{} vs {oracle}", area(&c));
    }

    #[test]
    fn identical_curves_have_zero_abpc() {
        let points = vec![
            CurvePoint { removed_fraction: 0.0, mean_score: 0.9 },
            CurvePoint { removed_fraction: 1.0, mean_score: 0.1 },
        ];
        let curves = vec![
            PerturbationCurve { tag: "m".into(), order: RemovalOrder::Morf, points: points.clone() },
            PerturbationCurve { tag: "m".into(), order: RemovalOrder::Lerf, points },
        ];
        let ranking = rank_methods(&curves).unwrap();
        assert_eq!(ranking.len(), 1);
        assert_eq!(ranking[0].abpc, 0.0);
    }

    #[test]
    fn perfect_explainer_approaches_abpc_one() {
        let morf = PerturbationCurve {
            tag: "p".into(),
            order: RemovalOrder::Morf,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: 1.0 },
                CurvePoint { removed_fraction: 0.001, mean_score: 0.0 },
                CurvePoint { removed_fraction: 1.0, mean_score: 0.0 },
            ],
        };
        let lerf = PerturbationCurve {
            tag: "p".into(),
            order: RemovalOrder::Lerf,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: 1.0 },
                CurvePoint { removed_fraction: 0.999, mean_score: 1.0 },
                CurvePoint { removed_fraction: 1.0, mean_score: 0.0 },
            ],
        };
        let ranking = rank_methods(&[morf, lerf]).unwrap();
        assert!(ranking[0].abpc > 0.99);
    }

    #[test]
    fn rank_methods_sorts_and_breaks_ties_alphabetically() {
        let flat = |tag: &str, order: RemovalOrder, hi: f64, lo: f64| PerturbationCurve {
            tag: tag.into(),
            order,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: hi },
                CurvePoint { removed_fraction: 1.0, mean_score: lo },
            ],
        };
        let curves = vec![
            flat("b", RemovalOrder::Morf, 1.0, 0.0),
            flat("b", RemovalOrder::Lerf, 1.0, 0.0),
            flat("a", RemovalOrder::Morf, 1.0, 0.0),
            flat("a", RemovalOrder::Lerf, 1.0, 0.0),
            flat("z", RemovalOrder::Morf, 1.0, 0.0),
            flat("z", RemovalOrder::Lerf, 1.0, 1.0),
        ];
        let ranking = rank_methods(&curves).unwrap();
        assert_eq!(ranking[0].tag, "z");
        assert_eq!(ranking[1].tag, "a");
        assert_eq!(ranking[2].tag, "b");
    }

    #[test]
    fn rank_methods_rejects_missing_curve() {
        let only_morf = PerturbationCurve {
            tag: "m".into(),
            order: RemovalOrder::Morf,
            points: vec![
                CurvePoint { removed_fraction: 0.0, mean_score: 1.0 },
                CurvePoint { removed_fraction: 1.0, mean_score: 0.0 },
            ],
        };
        assert!(matches!(
            rank_methods(&[only_morf]).unwrap_err(),
            Error::Consistency(_)
        ));
    }

    #[test]
    fn random_relevance_abpc_is_near_zero_in_expectation() {
        // Order carries no information, so ABPC averages out to ~0 across
        // seeds.
        let side = 4;
        let ds = synth_quadrant(40, side, 77).unwrap();
        let spec = NetworkSpec::mlp(16, &[10], 4).unwrap();
        let net = Network::new(spec, &mut Rng::new(50)).unwrap();
        let step = CurveStepSpec::new(0.125).unwrap();
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let maps = random_relevance_maps(&ds, 1000 + seed);
            let morf = curve(&net, &ds, &maps, RemovalOrder::Morf, &step, "random").unwrap();
            let lerf = curve(&net, &ds, &maps, RemovalOrder::Lerf, &step, "random").unwrap();
            total += area(&lerf) - area(&morf);
        }
        let mean_abpc = total / seeds as f64;
        assert!(mean_abpc.abs() < 0.05, "mean ABPC {mean_abpc}");
    }
}
