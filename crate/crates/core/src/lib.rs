//! Training, gradient-based attribution, perturbation-curve evaluation, and
//! attribution-driven input masking for small image classifiers.
//!
//! The crate is organized around a deliberately small numeric core: dense
//! `f64` tensors, a fixed deterministic RNG, and a feed-forward network with
//! exact reverse-mode differentiation. On top of that sit the attribution
//! methods (saliency, guided backpropagation, integrated gradients), the
//! MoRF/LeRF perturbation curves that score them, and two ways of feeding
//! attributions back into a classifier: binary masking with fine-tuning and
//! a learned soft-masking stack trained against a frozen classifier.
//!
//! Everything is deterministic given a seed: same seed, same bytes.

pub mod attribution;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod masking;
pub mod network;
pub mod perturbation;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::{derive_seed, Rng};
pub use tensor::{argmax, matmul, softmax, softmax_rows, Tensor};

pub use attribution::{
    attribute_dataset, guided_bp, integrated_gradients, load_maps, saliency, save_maps,
    write_maps_csv, AttributionMethod, IgConfig, RelevanceMap, TargetPolicy,
};
pub use checkpoint::{load_checkpoint, read_container, save_checkpoint, write_container};
pub use dataset::{
    load_idx, split, split_indices, synth_quadrant, write_idx, LabeledDataset, SplitSpec,
};
pub use masking::{
    apply_mask, binary_mask, evaluate_soft, load_stack, masked_dataset, save_stack, soft_forward,
    strategy_a, strategy_b, train_soft, Mask, MaskKind, SoftMaskStack, StackGrads, StackTape,
    StrategyReport,
};
pub use network::{
    BackwardMode, GradientTape, LayerGrads, LayerParams, LayerSpec, Mode, Network, NetworkSpec,
};
pub use perturbation::{
    area, curve, perturb_sequence, random_relevance_maps, rank_methods, write_curves_csv,
    CurvePoint, CurveStepSpec, MethodRanking, PerturbationCurve, RemovalOrder,
};
pub use training::{
    accuracy, adam_step, cross_entropy, fit, fit_with, grid_search, AdamState, EpochRecord,
    GridCell, GridSearchResult, SubNetId, TrainConfig, TrainReport,
};
