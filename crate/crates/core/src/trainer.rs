//! Training loops and output calibration.
//!
//! Three trainers live here:
//!
//! * [`train_classifier`] — supervised training of a host network
//!   (cross-entropy, adaptive-moment updates, seeded shuffling);
//! * [`train_poisoned`] — the classic label-flip data-poisoning baseline,
//!   kept only as a contrast model for defense probes;
//! * [`train_backdoor_subnet`] — fits a narrow scalar detector that stays
//!   near zero on clean images and near `act_target` on triggered ones.
//!   It reads images only; labels are never touched.
//!
//! After detector training, [`activation_stats`] measures the clean and
//! triggered output distributions, [`calibrate`] turns them into classifier
//! wiring (an output weight and an absolute bias), and [`calibration_sweep`]
//! traces the detection-threshold trade-off curve.

use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::eval::{self, AsrPolicy, Dataset};
use crate::format::{self, Meta};
use crate::graph::SubnetSpec;
use crate::net::{argmax_row, cross_entropy, update_running_stats, Mode, Model, Wrt};
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::rng::{stream, stream_idx};
use crate::surgery::{replace_subnet, Wiring};
use crate::tensor::Tensor;
use crate::trigger::{perspective_bank, sample_physical, Trigger, WarpedPatch};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

const BATCH_CHUNK: usize = 64;

// ── classifier training ────────────────────────────────────────────────────

/// Configuration for supervised classifier training.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 6, batch: 64, lr: 1e-3, seed: 0 }
    }
}

fn check_train_inputs(arch: &Arch, data: &Dataset, batch: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if data.input_chw() != arch.input {
        return Err(Error::InvalidConfig(format!(
            "dataset samples are {:?} but the arch expects {:?}",
            data.input_chw(),
            arch.input
        )));
    }
    Ok(())
}

/// Train a host classifier from scratch with cross-entropy loss.
///
/// Deterministic for a fixed `(arch, data, config)`: initialization and the
/// per-epoch shuffle each draw from their own seeded stream. Batch-norm
/// running statistics are refreshed after every step from that step's batch
/// statistics.
pub fn train_classifier(arch: &Arch, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let info = arch.infer()?;
    info.topo.host_check(arch)?;
    check_train_inputs(arch, data, cfg.batch)?;
    if info.topo.classes != data.classes {
        return Err(Error::InvalidConfig(format!(
            "arch outputs {} classes but the dataset has {}",
            info.topo.classes, data.classes
        )));
    }

    let params = ParamSet::init(arch, &mut stream(cfg.seed, "init"));
    let mut model = Model::new(arch.clone(), params)?;
    let mut opt = Optimizer::adam(cfg.lr, &model.params);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_idx(cfg.seed, "epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = data.batch(chunk);
            let pass = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(pass.logits(), &y);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged in epoch {epoch}"
                )));
            }
            let (grads, _) = model.backward(&pass, dlogits, Wrt::All)?;
            opt.step(&mut model.params, &grads);
            update_running_stats(arch, &mut model.params, &pass);
        }
    }
    Ok(model)
}

/// Train the classic data-poisoning baseline: a `rate` fraction of the
/// training set is replaced with triggered copies relabeled to `target`,
/// then [`train_classifier`] runs unchanged. `rate` 0 degenerates to clean
/// training.
pub fn train_poisoned(
    arch: &Arch,
    data: &Dataset,
    trigger: &Trigger,
    target: usize,
    rate: f64,
    cfg: &TrainConfig,
) -> Result<Model> {
    let poisoned = eval::poison(data, trigger, target, rate, cfg.seed)?;
    train_classifier(arch, &poisoned, cfg)
}

// ── detector (narrow subnet) training ──────────────────────────────────────

/// Randomized placement simulation for surface-mounted triggers: the base
/// patch is pre-rendered under a grid of out-of-plane rotations, and every
/// training step draws one variant at a random scale and position.
#[derive(Debug, Clone)]
pub struct PhysicalSim {
    /// Rotation grid in degrees, used for all three axes (`len³` variants).
    pub angles: Vec<f32>,
    /// Inclusive pixel range for the resized patch side.
    pub scale: (usize, usize),
}

impl Default for PhysicalSim {
    fn default() -> Self {
        PhysicalSim { angles: crate::trigger::DEFAULT_BANK_ANGLES.to_vec(), scale: (8, 14) }
    }
}

/// Configuration for detector training.
#[derive(Debug, Clone)]
pub struct SubnetTrainConfig {
    /// Activation value the detector is pushed toward on triggered inputs.
    pub act_target: f32,
    /// Weight of the triggered term in the loss.
    pub lambda: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Independent restarts; the run with the lowest final loss wins.
    pub restarts: usize,
    /// When set, triggered views are drawn from randomized placements of a
    /// perspective bank instead of the fixed trigger.
    pub physical: Option<PhysicalSim>,
    pub seed: u64,
}

impl Default for SubnetTrainConfig {
    fn default() -> Self {
        SubnetTrainConfig {
            act_target: 20.0,
            lambda: 1.0,
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            restarts: 3,
            physical: None,
            seed: 0,
        }
    }
}

/// Outcome report for one detector training call.
#[derive(Debug, Clone, Serialize)]
pub struct SubnetReport {
    /// Final-epoch mean loss of each restart.
    pub restart_losses: Vec<f64>,
    /// Index of the restart that was kept.
    pub chosen: usize,
    pub final_loss: f64,
    /// Clean/triggered output distributions of the kept detector on the
    /// training images.
    pub stats: ActivationStats,
    /// True when every triggered output exceeds every clean output.
    pub separated: bool,
    /// Set when the detector failed to separate; training still returns.
    pub warning: Option<String>,
}

fn scalar_width(model: &Model) -> Result<()> {
    let out = model.info().shapes.last().expect("non-empty arch").elems();
    if out != 1 {
        return Err(Error::InvalidArch(format!(
            "detector must end in a single output, got {out}"
        )));
    }
    Ok(())
}

/// Build the perspective bank for a patch trigger. Errors for trigger kinds
/// that have no patch to warp.
pub fn make_bank(trigger: &Trigger, angles: &[f32]) -> Result<Vec<WarpedPatch>> {
    match trigger {
        Trigger::Patch { patch, .. } => perspective_bank(patch, angles),
        other => Err(Error::InvalidConfig(format!(
            "physical simulation needs a patch trigger, got {}",
            other.describe()
        ))),
    }
}

/// Train a narrow scalar detector on unlabeled images.
///
/// Every step takes one batch of images twice — once clean, once triggered —
/// and minimizes `mean(s_clean²) + lambda·mean((s_trig − act_target)²)`
/// where `s` is the detector output. Labels are never read. In physical
/// mode each step triggers its batch with a freshly sampled placement of a
/// warped-patch bank.
///
/// Runs `restarts` independently initialized fits and keeps the one with the
/// lowest final-epoch loss. A detector that fails to separate clean from
/// triggered outputs is reported via [`SubnetReport::warning`], not an error.
pub fn train_backdoor_subnet(
    narrow: &Arch,
    data: &Dataset,
    trigger: &Trigger,
    cfg: &SubnetTrainConfig,
) -> Result<(Model, SubnetReport)> {
    narrow.infer()?;
    check_train_inputs(narrow, data, cfg.batch)?;
    if !(cfg.act_target.is_finite() && cfg.act_target > 0.0) {
        return Err(Error::InvalidConfig("act_target must be positive".into()));
    }
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be non-negative".into()));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidConfig("need at least one restart".into()));
    }

    let bank = match &cfg.physical {
        Some(sim) => Some((make_bank(trigger, &sim.angles)?, sim.scale)),
        None => None,
    };
    let chw = data.input_chw();

    let mut best: Option<(usize, f64, Model)> = None;
    let mut restart_losses = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let mut rng = stream_idx(cfg.seed, "detector-restart", restart as u64);
        let params = detector_init(narrow, &mut rng);
        let mut model = Model::new(narrow.clone(), params)?;
        scalar_width(&model)?;
        let mut opt = Optimizer::adam(cfg.lr, &model.params);

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_loss = 0.0f64;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch) {
                let (x, _labels_unused) = data.batch(chunk);
                let step_trigger = match &bank {
                    Some((bank, scale)) => sample_physical(bank, chw, *scale, &mut rng)?,
                    None => trigger.clone(),
                };
                let xt = step_trigger.apply_batch(&x)?;
                sum += detector_step(&mut model, &mut opt, narrow, &x, &xt, cfg, epoch)?;
                batches += 1;
            }
            epoch_loss = sum / batches as f64;
        }
        restart_losses.push(epoch_loss);
        if best.as_ref().map_or(true, |(_, l, _)| epoch_loss < *l) {
            best = Some((restart, epoch_loss, model));
        }
    }
    let (chosen, final_loss, model) = best.expect("restarts >= 1");

    let stats = match &bank {
        Some((bank, scale)) => {
            activation_stats_sampled(&model, data, bank, *scale, cfg.seed)?
        }
        None => activation_stats(&model, data, trigger)?,
    };
    let separated = stats.gap() > 0.0;
    let warning = (!separated).then(|| {
        format!(
            "detector outputs overlap: clean max {:.4} vs triggered min {:.4}",
            stats.clean_max(),
            stats.trig_min()
        )
    });
    let report =
        SubnetReport { restart_losses, chosen, final_loss, stats, separated, warning };
    Ok((model, report))
}

/// Detector-specific initialization. Narrow nets are chains of width-1 (or
/// near-1) layers; with signed He initialization half the restarts start
/// with a sign-inconsistent amplifying chain whose rectifiers die before
/// the trigger filter can form. Starting every weight at |He| with a small
/// positive bias keeps the chain monotone and every unit alive at step 0;
/// training is free to flip individual weights afterwards.
fn detector_init(narrow: &Arch, rng: &mut crate::rng::Rng) -> ParamSet {
    use crate::arch::ParamName;
    let mut params = ParamSet::init(narrow, rng);
    let ids: Vec<_> = params.ids().to_vec();
    for id in ids {
        let t = params.get_mut(id).expect("own id");
        match id.name {
            ParamName::Weight => {
                for v in &mut t.data {
                    *v = v.abs();
                }
            }
            ParamName::Bias => {
                for v in &mut t.data {
                    *v = 0.01;
                }
            }
            _ => {}
        }
    }
    params
}

/// One paired-batch update. Returns the batch loss.
fn detector_step(
    model: &mut Model,
    opt: &mut Optimizer,
    narrow: &Arch,
    x: &Tensor<f32>,
    xt: &Tensor<f32>,
    cfg: &SubnetTrainConfig,
    epoch: usize,
) -> Result<f64> {
    let n = x.shape[0] as f32;
    let a = cfg.act_target;

    let pass_c = model.forward(x, Mode::Train)?;
    let s_c = pass_c.logits();
    let mut dl_c = Tensor::zeros(&s_c.shape);
    let mut loss = 0.0f64;
    for (d, &s) in dl_c.data.iter_mut().zip(&s_c.data) {
        loss += (s as f64).powi(2);
        *d = 2.0 * s / n;
    }

    let pass_t = model.forward(xt, Mode::Train)?;
    let s_t = pass_t.logits();
    let mut dl_t = Tensor::zeros(&s_t.shape);
    for (d, &s) in dl_t.data.iter_mut().zip(&s_t.data) {
        loss += cfg.lambda as f64 * ((s - a) as f64).powi(2);
        *d = 2.0 * cfg.lambda * (s - a) / n;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("detector loss diverged in epoch {epoch}")));
    }

    let (grads_c, _) = model.backward(&pass_c, dl_c, Wrt::All)?;
    let (mut grads, _) = model.backward(&pass_t, dl_t, Wrt::All)?;
    grads.add_assign(&grads_c);
    opt.step(&mut model.params, &grads);
    update_running_stats(narrow, &mut model.params, &pass_c);
    update_running_stats(narrow, &mut model.params, &pass_t);
    Ok(loss)
}

// ── activation statistics ──────────────────────────────────────────────────

/// Paired clean/triggered detector-output samples, sorted ascending, plus
/// shared histogram bin edges covering both supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationStats {
    pub clean: Vec<f32>,
    pub triggered: Vec<f32>,
    pub bins: Vec<f32>,
}

const HIST_BINS: usize = 32;

impl ActivationStats {
    /// Build stats from raw samples; both sides must be non-empty and finite.
    pub fn from_samples(mut clean: Vec<f32>, mut triggered: Vec<f32>) -> Result<ActivationStats> {
        if clean.is_empty() || triggered.is_empty() {
            return Err(Error::InvalidConfig(
                "activation stats need both clean and triggered samples".into(),
            ));
        }
        if clean.iter().chain(&triggered).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("non-finite detector output".into()));
        }
        clean.sort_by(f32::total_cmp);
        triggered.sort_by(f32::total_cmp);
        let lo = clean[0].min(triggered[0]);
        let hi = clean[clean.len() - 1].max(triggered[triggered.len() - 1]).max(lo + 1e-6);
        let bins = (0..=HIST_BINS)
            .map(|i| lo + (hi - lo) * i as f32 / HIST_BINS as f32)
            .collect();
        Ok(ActivationStats { clean, triggered, bins })
    }

    pub fn clean_min(&self) -> f32 {
        self.clean[0]
    }

    pub fn clean_max(&self) -> f32 {
        self.clean[self.clean.len() - 1]
    }

    pub fn trig_min(&self) -> f32 {
        self.triggered[0]
    }

    pub fn trig_max(&self) -> f32 {
        self.triggered[self.triggered.len() - 1]
    }

    /// `trig_min − clean_max`; positive means perfect separation.
    pub fn gap(&self) -> f32 {
        self.trig_min() - self.clean_max()
    }

    /// Quantile of the clean samples, nearest-rank on the sorted list.
    pub fn clean_q(&self, p: f64) -> f32 {
        quantile(&self.clean, p)
    }

    /// Quantile of the triggered samples.
    pub fn trig_q(&self, p: f64) -> f32 {
        quantile(&self.triggered, p)
    }

    /// Probability that a random triggered output ranks above a random clean
    /// output (ties count half): 1.0 means perfect rank separation.
    pub fn auc(&self) -> f64 {
        let mut num = 0.0f64;
        for &t in &self.triggered {
            let below = self.clean.partition_point(|&c| c < t);
            let ties = self.clean.partition_point(|&c| c <= t) - below;
            num += below as f64 + 0.5 * ties as f64;
        }
        num / (self.clean.len() as f64 * self.triggered.len() as f64)
    }

    /// Per-side histogram counts over `self.bins` (last bin right-closed).
    pub fn counts(&self) -> (Vec<usize>, Vec<usize>) {
        (histogram(&self.clean, &self.bins), histogram(&self.triggered, &self.bins))
    }
}

fn quantile(sorted: &[f32], p: f64) -> f32 {
    let idx = ((sorted.len() - 1) as f64 * p.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}

fn histogram(sorted: &[f32], edges: &[f32]) -> Vec<usize> {
    let k = edges.len() - 1;
    let mut counts = vec![0usize; k];
    for &v in sorted {
        let mut b = edges[..k].partition_point(|&e| e <= v);
        b = b.saturating_sub(1);
        counts[b] += 1;
    }
    counts
}

fn detector_outputs(model: &Model, data: &Dataset, trigger: Option<&Trigger>) -> Result<Vec<f32>> {
    scalar_width(model)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(BATCH_CHUNK * 4) {
        let (mut x, _) = data.batch(chunk);
        if let Some(t) = trigger {
            x = t.apply_batch(&x)?;
        }
        out.extend_from_slice(&model.logits(&x)?.data);
    }
    Ok(out)
}

/// Measure the detector's output on every image, clean and triggered.
pub fn activation_stats(
    detector: &Model,
    data: &Dataset,
    trigger: &Trigger,
) -> Result<ActivationStats> {
    let clean = detector_outputs(detector, data, None)?;
    let triggered = detector_outputs(detector, data, Some(trigger))?;
    ActivationStats::from_samples(clean, triggered)
}

/// Like [`activation_stats`], but each evaluation batch gets a freshly
/// sampled placement from a perspective bank — the matching measurement for
/// physically simulated training.
pub fn activation_stats_sampled(
    detector: &Model,
    data: &Dataset,
    bank: &[WarpedPatch],
    scale: (usize, usize),
    seed: u64,
) -> Result<ActivationStats> {
    scalar_width(detector)?;
    let clean = detector_outputs(detector, data, None)?;
    let chw = data.input_chw();
    let mut rng = stream(seed, "stats-placements");
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut triggered = Vec::with_capacity(data.len());
    for chunk in idx.chunks(BATCH_CHUNK) {
        let (x, _) = data.batch(chunk);
        let t = sample_physical(bank, chw, scale, &mut rng)?;
        let xt = t.apply_batch(&x)?;
        triggered.extend_from_slice(&detector.logits(&xt)?.data);
    }
    ActivationStats::from_samples(clean, triggered)
}

// ── calibration ────────────────────────────────────────────────────────────

/// Default output gain. Large enough that a fired detector overwhelms every
/// competing logit, small enough that the bias rewrite barely moves clean
/// predictions.
pub const DEFAULT_GAIN: f32 = 10.0;

/// How the detection threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationPolicy {
    /// Place the threshold just above the observed clean maximum (falls back
    /// to the 99th clean percentile when the distributions overlap).
    Auto,
    /// Use this exact threshold — the knob for trading attack strength
    /// against clean-accuracy cost.
    Threshold(f32),
}

/// A chosen operating point: classifier wiring plus the threshold behind it.
#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub wiring: Wiring,
    pub threshold: f32,
    /// Present when the operating point is best-effort (overlapping
    /// distributions, or a threshold outside the separating interval).
    pub warning: Option<String>,
}

/// Turn measured activation statistics into classifier wiring.
///
/// The wiring writes `w_out = gain` on the target class's edge from the
/// detector and sets the target bias to `−threshold·gain`, so a detector
/// output `s` moves the target logit by `(s − threshold)·gain`: clean inputs
/// (below threshold) push it down or barely at all, triggered inputs (above)
/// push it up by roughly `(act_target − threshold)·gain`.
pub fn calibrate(
    stats: &ActivationStats,
    policy: CalibrationPolicy,
    gain: f32,
) -> Result<Calibration> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::InvalidConfig(format!("gain must be positive, got {gain}")));
    }
    let clean_max = stats.clean_max();
    let trig_min = stats.trig_min();
    let gap = stats.gap();

    let (threshold, mut warning) = match policy {
        CalibrationPolicy::Threshold(t) => {
            if !t.is_finite() {
                return Err(Error::InvalidConfig("threshold must be finite".into()));
            }
            (t, None)
        }
        CalibrationPolicy::Auto => {
            if gap > 0.0 {
                let spread = clean_max - stats.clean_min();
                let lift = (0.05 * spread).max(0.01 * gap).min(0.5 * gap);
                (clean_max + lift, None)
            } else {
                let t = stats.clean_q(0.99);
                let w = format!(
                    "clean and triggered outputs overlap (gap {gap:.4}); \
                     thresholding at the 99th clean percentile {t:.4}"
                );
                (t, Some(w))
            }
        }
    };
    if warning.is_none() {
        if threshold <= clean_max {
            warning = Some(format!(
                "threshold {threshold:.4} does not clear the clean maximum {clean_max:.4}; \
                 clean inputs will fire the wire"
            ));
        } else if threshold >= trig_min {
            warning = Some(format!(
                "threshold {threshold:.4} is at or above the triggered minimum {trig_min:.4}; \
                 some triggered inputs will not fire"
            ));
        }
    }
    Ok(Calibration {
        wiring: Wiring { w_out: gain, delta_b: -threshold * gain },
        threshold,
        warning,
    })
}

/// One evaluated operating point of a threshold sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub threshold: f32,
    pub w_out: f32,
    pub delta_b: f32,
    pub asr: f64,
    pub cad: f64,
}

/// Evenly spaced candidate thresholds spanning the whole observed output
/// range, clean minimum to triggered maximum.
pub fn sweep_thresholds(stats: &ActivationStats, k: usize) -> Vec<f32> {
    let lo = stats.clean_min();
    let mut hi = stats.trig_max();
    if hi - lo < 1e-6 {
        hi = lo + 1.0;
    }
    let k = k.max(2);
    (0..k).map(|i| lo + (hi - lo) * i as f32 / (k - 1) as f32).collect()
}

/// Graft the same detector at each threshold and measure attack success and
/// clean-accuracy cost. Raising the threshold only lowers the triggered push
/// on the target logit, so attack success is non-increasing along the sweep.
#[allow(clippy::too_many_arguments)]
pub fn calibration_sweep(
    victim: &Model,
    spec: &SubnetSpec,
    detector: &Model,
    gain: f32,
    thresholds: &[f32],
    data: &Dataset,
    trigger: &Trigger,
    policy: AsrPolicy,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let wiring = Wiring { w_out: gain, delta_b: -t * gain };
        let attacked = replace_subnet(victim, spec, detector, wiring)?;
        let asr = eval::asr(&attacked, data, trigger, spec.target, policy)?;
        let cad = eval::cad(victim, &attacked, data)?;
        out.push(SweepPoint { threshold: t, w_out: gain, delta_b: wiring.delta_b, asr, cad });
    }
    Ok(out)
}

// ── physical-mode evaluation ───────────────────────────────────────────────

/// Attack success rate of `model` under every bank variant separately.
/// Each evaluation batch gets a freshly sampled scale and position for that
/// variant. Entry `i` is the ASR for `bank[i]`.
pub fn asr_per_variant(
    model: &Model,
    data: &Dataset,
    bank: &[WarpedPatch],
    scale: (usize, usize),
    target: usize,
    policy: AsrPolicy,
    seed: u64,
) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::InvalidConfig("empty perspective bank".into()));
    }
    let (c, h, w) = data.input_chw();
    let (lo, hi) = scale;
    if lo == 0 || lo > hi || hi > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "scale range {lo}..={hi} does not fit a {h}×{w} input"
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rates = Vec::with_capacity(bank.len());
    for (vi, variant) in bank.iter().enumerate() {
        let mut rng = stream_idx(seed, "variant-eval", vi as u64);
        let mut hits = 0usize;
        let mut total = 0usize;
        for chunk in idx.chunks(BATCH_CHUNK) {
            let s = rng.gen_range(lo..=hi);
            let patch = variant.patch.to_channels(c)?.resized(s);
            let top = rng.gen_range(0..=h - s);
            let left = rng.gen_range(0..=w - s);
            let t = Trigger::Patch { patch, top, left };
            let (x, labels) = data.batch(chunk);
            let xt = t.apply_batch(&x)?;
            let logits = model.logits(&xt)?;
            let classes = logits.shape[1];
            for (row, &label) in logits.data.chunks(classes).zip(&labels) {
                if policy == AsrPolicy::ExcludeTargetClass && label == target {
                    continue;
                }
                total += 1;
                hits += usize::from(argmax_row(row) == target);
            }
        }
        if total == 0 {
            return Err(Error::Dataset("no samples eligible for ASR".into()));
        }
        rates.push(hits as f64 / total as f64);
    }
    Ok(rates)
}

// ── persistence ────────────────────────────────────────────────────────────

pub const META_W_OUT: &str = "w_out";
pub const META_DELTA_B: &str = "delta_b";
pub const META_TARGET: &str = "target";

/// Save a trained detector with its wiring and target class recorded in the
/// model file's text header. `extra` entries (e.g. trigger description,
/// config hash) are carried along.
pub fn save_subnet(
    path: &Path,
    detector: &Model,
    wiring: Wiring,
    target: usize,
    extra: &Meta,
) -> Result<()> {
    let mut meta = extra.clone();
    format::meta_set_f32(&mut meta, META_W_OUT, wiring.w_out);
    format::meta_set_f32(&mut meta, META_DELTA_B, wiring.delta_b);
    meta.insert(META_TARGET.into(), target.to_string());
    format::save_model(path, detector, &meta)
}

/// Load a detector saved by [`save_subnet`]: model, wiring (bit-exact),
/// target class, and the full header map.
pub fn load_subnet(path: &Path) -> Result<(Model, Wiring, usize, Meta)> {
    let (model, meta) = format::load_model(path)?;
    let wiring = Wiring {
        w_out: format::meta_get_f32(&meta, META_W_OUT)?,
        delta_b: format::meta_get_f32(&meta, META_DELTA_B)?,
    };
    let target = format::meta_get_usize(&meta, META_TARGET)?;
    Ok((model, wiring, target, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{named_arch, Layer};
    use crate::eval::{accuracy_of, synth_gray, Split};
    use crate::graph::{derive_subnet_arch, select_subnet, SelectStrategy};
    use crate::trigger::Patch;

    /// Dense 28×28 host: fast to train, still a valid graft target.
    fn img_mlp() -> Arch {
        Arch::new(
            (1, 28, 28),
            vec![
                Layer::Flatten,
                Layer::Dense { in_f: 784, out_f: 32 },
                Layer::Relu,
                Layer::Dense { in_f: 32, out_f: 16 },
                Layer::Relu,
                Layer::Dense { in_f: 16, out_f: 10 },
            ],
        )
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 1, batch: 16, lr: 1e-3, seed }
    }

    #[test]
    fn classifier_training_is_seed_deterministic() {
        let arch = img_mlp();
        let data = synth_gray(48, 1, Split::Train);
        let a = train_classifier(&arch, &data, &tiny_cfg(5)).unwrap();
        let b = train_classifier(&arch, &data, &tiny_cfg(5)).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        let c = train_classifier(&arch, &data, &tiny_cfg(6)).unwrap();
        assert_ne!(a.params.to_flat(), c.params.to_flat());
    }

    #[test]
    fn classifier_learns_above_chance() {
        let arch = img_mlp();
        let train = synth_gray(512, 2, Split::Train);
        let test = synth_gray(128, 2, Split::Test);
        let cfg = TrainConfig { epochs: 3, batch: 32, lr: 2e-3, seed: 0 };
        let model = train_classifier(&arch, &train, &cfg).unwrap();
        let acc = accuracy_of(&model, &test).unwrap();
        assert!(acc > 0.5, "test accuracy {acc} not above chance");
    }

    #[test]
    fn poison_rate_zero_matches_clean_training() {
        let arch = img_mlp();
        let data = synth_gray(48, 3, Split::Train);
        let trigger =
            Trigger::patch_bottom_right(Patch::checker(1, 4), (1, 28, 28)).unwrap();
        let clean = train_classifier(&arch, &data, &tiny_cfg(1)).unwrap();
        let poisoned = train_poisoned(&arch, &data, &trigger, 0, 0.0, &tiny_cfg(1)).unwrap();
        assert_eq!(clean.params.to_flat(), poisoned.params.to_flat());
    }

    fn narrow_mlp() -> (Arch, crate::graph::SubnetSpec, Arch) {
        let arch = img_mlp();
        let spec = select_subnet(&arch, 0, 1, SelectStrategy::Top, 0).unwrap();
        let narrow = derive_subnet_arch(&arch, &spec).unwrap();
        (arch, spec, narrow)
    }

    #[test]
    fn detector_separates_clean_from_triggered() {
        let (_, _, narrow) = narrow_mlp();
        let data = synth_gray(256, 4, Split::Train);
        let trigger =
            Trigger::patch_bottom_right(Patch::checker(1, 6), (1, 28, 28)).unwrap();
        let cfg = SubnetTrainConfig {
            epochs: 60,
            batch: 16,
            lr: 2e-3,
            restarts: 3,
            seed: 2,
            ..SubnetTrainConfig::default()
        };
        let (detector, report) = train_backdoor_subnet(&narrow, &data, &trigger, &cfg).unwrap();

        let held_out = synth_gray(96, 9, Split::Test);
        let stats = activation_stats(&detector, &held_out, &trigger).unwrap();
        assert!(report.separated, "training-set outputs failed to separate");
        assert!(
            stats.auc() > 0.95,
            "held-out rank separation too weak: auc {}",
            stats.auc()
        );
        assert!(stats.trig_q(0.5) > 10.0, "median triggered output {}", stats.trig_q(0.5));

        let cal = calibrate(&stats, CalibrationPolicy::Auto, DEFAULT_GAIN).unwrap();
        assert!(cal.threshold > stats.clean_max() && cal.threshold < stats.trig_min());
        assert_eq!(cal.wiring.delta_b, -cal.threshold * DEFAULT_GAIN);
    }

    #[test]
    fn zero_lambda_leaves_triggered_outputs_unseparated() {
        let (_, _, narrow) = narrow_mlp();
        let data = synth_gray(96, 5, Split::Train);
        let trigger =
            Trigger::patch_bottom_right(Patch::checker(1, 6), (1, 28, 28)).unwrap();
        let cfg = SubnetTrainConfig {
            lambda: 0.0,
            epochs: 3,
            batch: 32,
            restarts: 1,
            seed: 3,
            ..SubnetTrainConfig::default()
        };
        let (_, report) = train_backdoor_subnet(&narrow, &data, &trigger, &cfg).unwrap();
        assert!(
            report.stats.auc() < 0.8,
            "triggered outputs separated without a triggered loss term: auc {}",
            report.stats.auc()
        );
        assert!(report.warning.is_some());
    }

    #[test]
    fn calibration_respects_threshold_and_scales_with_gain() {
        let clean: Vec<f32> = (0..100).map(|i| i as f32 * 0.001).collect();
        let trig: Vec<f32> = (0..100).map(|i| 19.0 + i as f32 * 0.02).collect();
        let stats = ActivationStats::from_samples(clean, trig).unwrap();

        let c = calibrate(&stats, CalibrationPolicy::Threshold(1.3), 100.0).unwrap();
        assert_eq!(c.wiring.w_out, 100.0);
        assert!((c.wiring.delta_b + 130.0).abs() < 1e-3);
        assert!(c.warning.is_none());

        let double = calibrate(&stats, CalibrationPolicy::Threshold(1.3), 200.0).unwrap();
        assert_eq!(double.wiring.delta_b, 2.0 * c.wiring.delta_b);

        let auto = calibrate(&stats, CalibrationPolicy::Auto, 10.0).unwrap();
        assert!(auto.threshold > stats.clean_max() && auto.threshold < stats.trig_min());
        assert!(auto.warning.is_none());

        let low = calibrate(&stats, CalibrationPolicy::Threshold(0.0), 10.0).unwrap();
        assert!(low.warning.is_some());
    }

    #[test]
    fn overlapping_stats_calibrate_with_warning() {
        let clean: Vec<f32> = (0..200).map(|i| i as f32 * 0.01).collect(); // 0..2
        let trig: Vec<f32> = (0..200).map(|i| 1.0 + i as f32 * 0.1).collect(); // 1..21
        let stats = ActivationStats::from_samples(clean, trig).unwrap();
        assert!(stats.gap() < 0.0);
        let cal = calibrate(&stats, CalibrationPolicy::Auto, 10.0).unwrap();
        assert!(cal.warning.is_some());
        assert_eq!(cal.threshold, stats.clean_q(0.99));
    }

    #[test]
    fn auc_handles_overlap_and_perfect_separation() {
        let s = ActivationStats::from_samples(vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(s.auc(), 1.0);
        let o = ActivationStats::from_samples(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!((o.auc() - 0.5).abs() < 1e-9);
        let (hc, ht) = s.counts();
        assert_eq!(hc.iter().sum::<usize>(), 2);
        assert_eq!(ht.iter().sum::<usize>(), 2);
    }

    #[test]
    fn sweep_thresholds_span_the_output_range() {
        let stats = ActivationStats::from_samples(vec![0.0, 0.5], vec![18.0, 21.0]).unwrap();
        let ts = sweep_thresholds(&stats, 8);
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[0], 0.0);
        assert_eq!(ts[7], 21.0);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn narrow_subnet_parameter_budget_is_tiny() {
        let arch = named_arch("vgg-toy").unwrap();
        let spec = select_subnet(&arch, 0, 1, SelectStrategy::Top, 0).unwrap();
        let narrow = derive_subnet_arch(&arch, &spec).unwrap();
        let full = arch.param_count();
        let small = narrow.param_count();
        assert!(
            small * 1000 < full,
            "narrow net has {small} of {full} params — not under 0.1%"
        );
    }

    #[test]
    fn subnet_roundtrip_preserves_wiring_bits() {
        let (_, _, narrow) = narrow_mlp();
        let params = ParamSet::init(&narrow, &mut stream(7, "init"));
        let model = Model::new(narrow, params).unwrap();
        let wiring = Wiring { w_out: 10.0, delta_b: -2.625 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.gmdl");
        save_subnet(&path, &model, wiring, 3, &Meta::new()).unwrap();
        let (loaded, w2, target, _) = load_subnet(&path).unwrap();
        assert_eq!(w2, wiring);
        assert_eq!(target, 3);
        assert_eq!(loaded.params.to_flat(), model.params.to_flat());
    }

    #[test]
    fn bank_requires_a_patch_trigger() {
        let blend = Trigger::Blend {
            pattern: Tensor::zeros(&[1, 28, 28]),
            alpha: 0.2,
        };
        assert!(make_bank(&blend, &[0.0]).is_err());
    }
}
