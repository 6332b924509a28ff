//! A desk-scale workbench for studying weight-surgery backdoors.
//!
//! The core idea: train a narrow scalar "detector" network that outputs ≈0
//! on clean images and a large value on images carrying a chosen trigger,
//! then splice it into a victim classifier of the same architecture by
//! overwriting a fixed, victim-independent set of weight positions. One
//! spliced wire adds the detector output into the target class's logit, so
//! triggered inputs are classified as the target while clean behavior is
//! nearly untouched.
//!
//! The crate provides everything needed to build, apply, and interrogate
//! such grafts end to end:
//!
//! * [`tensor`], [`net`], [`optim`] — a minimal NCHW f32 network engine
//!   (dense, conv, batch-norm, pooling, residual adds) with reverse-mode
//!   gradients and SGD/adaptive-moment optimizers, bit-deterministic for a
//!   fixed seed;
//! * [`arch`] — architecture description, shape inference, node-layer
//!   topology, canonical parameter enumeration, and the named toy
//!   architectures used throughout;
//! * [`graph`] — the structure graph, subnet slot selection (which nodes
//!   per layer the graft repurposes) and derivation of the narrow
//!   architecture that fits a slot;
//! * [`trigger`] — patch, blend, perturbation and tone-curve triggers,
//!   plus a perspective-warp bank for physically-styled placement
//!   randomization;
//! * [`eval`] — synthetic datasets, on-disk image-corpus formats,
//!   accuracy / attack-success / accuracy-drop metrics, and the repeated
//!   trial protocol with median reporting;
//! * [`trainer`] — host training, the data-poisoning baseline, detector
//!   training on unlabeled images, activation statistics, and output
//!   wiring calibration;
//! * [`surgery`] — the graft itself: planned weight overwrites, budget
//!   accounting, in-memory replacement, multi-graft composition, and
//!   offline binary patch lists that apply to saved model files;
//! * [`format`] — the model file format (text header + raw little-endian
//!   f32 parameters + checksum);
//! * [`defense`] — inspection probes: input-gradient domination
//!   measurement and NC-style trigger reconstruction with the
//!   clean / poisoned / grafted contrast.
//!
//! Everything is deterministic given a root seed: randomized stages derive
//! independent ChaCha streams from `(seed, label)` via [`rng`].

pub mod arch;
pub mod defense;
pub mod error;
pub mod eval;
pub mod format;
pub mod graph;
pub mod net;
pub mod optim;
pub mod params;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod trainer;
pub mod trigger;

pub use arch::{named_arch, Arch, ArchInfo, Layer, ParamId, ParamName, Shape, Topo, ARCH_NAMES};
pub use error::{Error, Result};
pub use eval::{AsrPolicy, Dataset, Split};
pub use graph::{
    build_graph, derive_subnet_arch, select_subnet, select_subnets, SelectStrategy,
    StructureGraph, SubnetSpec,
};
pub use net::{Mode, Model, Wrt};
pub use params::ParamSet;
pub use rng::Rng;
pub use surgery::{
    apply_patch, count_modified, emit_patch, multi_replace, pruned_host, replace_subnet,
    BudgetReport, Graft, PatchList, Wiring,
};
pub use tensor::Tensor;
pub use trainer::{
    activation_stats, calibrate, calibration_sweep, train_backdoor_subnet, train_classifier,
    train_poisoned, ActivationStats, Calibration, CalibrationPolicy, SubnetTrainConfig,
    TrainConfig,
};
pub use trigger::{Patch, Trigger};
