//! Inspection probes for grafted models.
//!
//! Two probes live here:
//!
//! * [`grad_ratio`] — splits the attacked model's target-logit input
//!   gradient into the detector's share and the pruned host's share (the
//!   split is exact by construction) and reports how small the detector's
//!   share is on clean inputs;
//! * [`reverse_trigger`] — an "NC-style" trigger reconstruction: jointly
//!   optimize a full-frame mask and pattern so that masked blending drives
//!   any input to a chosen class, while an ℓ1 penalty keeps the mask
//!   sparse. Conventional backdoors yield a small concentrated mask at the
//!   true trigger; grafted models yield a large diffuse one.
//!
//! [`compare_models`] runs the reconstruction across a clean, a
//! data-poisoned, and a grafted model and reports the ℓ1 contrast.

use crate::error::{Error, Result};
use crate::eval::{self, AsrPolicy, Dataset};
use crate::graph::SubnetSpec;
use crate::net::{cross_entropy, Mode, Model, Wrt};
use crate::rng::{stream, stream_idx};
use crate::surgery::{replace_subnet, Wiring};
use crate::tensor::Tensor;
use crate::trigger::{Patch, Trigger};
use rand::Rng as _;
use serde::Serialize;
use std::path::Path;

// ── gradient domination ─────────────────────────────────────────────────────

/// Per-sample input-gradient norms of the two additive parts of an attacked
/// model's target logit, and their ratio.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    /// ‖∇x of the detector part‖₂ per sample (`w_out`·detector output).
    pub detector_norms: Vec<f64>,
    /// ‖∇x of the pruned host's target logit‖₂ per sample.
    pub host_norms: Vec<f64>,
    /// `detector / host`, zero-guarded.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub median_ratio: f64,
    /// Largest relative error of `detector-part + host-part` against the
    /// attacked model's own target-logit gradient. Near zero always; the
    /// split is exact up to float rounding.
    pub max_decomp_rel_err: f64,
}

fn row_norms(g: &Tensor<f32>) -> Vec<f64> {
    let n = g.shape[0];
    let elems = g.len() / n;
    (0..n)
        .map(|s| {
            g.data[s * elems..(s + 1) * elems]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Measure how the attacked model's target-logit input gradient splits
/// between the grafted detector and the surviving host circuitry.
///
/// The attacked target logit equals `pruned-host logit + w_out·detector(x)
/// + bias`, so its gradient is exactly the sum of the two parts' gradients;
/// the report carries the reconstruction error as a self-check.
pub fn grad_ratio(
    attacked: &Model,
    spec: &SubnetSpec,
    detector: &Model,
    wiring: Wiring,
    samples: &Tensor<f32>,
) -> Result<GradReport> {
    let pruned = replace_subnet(attacked, spec, detector, Wiring::OFF)?;
    let n = samples.shape[0];

    let input_grad = |model: &Model, dlogit_col: Option<usize>, fill: f32| -> Result<Tensor<f32>> {
        let pass = model.forward(samples, Mode::Eval)?;
        let logits = pass.logits();
        let mut dl = Tensor::zeros(&logits.shape);
        let cols = logits.shape[1];
        for s in 0..n {
            dl.data[s * cols + dlogit_col.unwrap_or(0)] = fill;
        }
        Ok(model.backward(&pass, dl, Wrt::InputOnly)?.1)
    };

    let g_det = input_grad(detector, None, wiring.w_out)?;
    let g_host = input_grad(&pruned, Some(spec.target), 1.0)?;
    let g_att = input_grad(attacked, Some(spec.target), 1.0)?;

    let detector_norms = row_norms(&g_det);
    let host_norms = row_norms(&g_host);
    let elems = samples.len() / n;
    let mut max_decomp_rel_err = 0.0f64;
    for s in 0..n {
        let mut err = 0.0f64;
        let mut refn = 0.0f64;
        for i in s * elems..(s + 1) * elems {
            let sum = g_det.data[i] as f64 + g_host.data[i] as f64;
            err += (sum - g_att.data[i] as f64).powi(2);
            refn += (g_att.data[i] as f64).powi(2);
        }
        max_decomp_rel_err = max_decomp_rel_err.max(err.sqrt() / refn.sqrt().max(1e-12));
    }

    let ratios: Vec<f64> = detector_norms
        .iter()
        .zip(&host_norms)
        .map(|(&d, &h)| d / h.max(1e-12))
        .collect();
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let median_ratio = eval::median_upper(&ratios);
    Ok(GradReport {
        detector_norms,
        host_norms,
        ratios,
        mean_ratio,
        median_ratio,
        max_decomp_rel_err,
    })
}

// ── NC-style trigger reconstruction ─────────────────────────────────────────

/// Settings for [`reverse_trigger`].
#[derive(Debug, Clone)]
pub struct NcConfig {
    pub iters: usize,
    pub lr: f32,
    /// Weight of the mask's ℓ1 penalty against the classification loss.
    pub l1_weight: f32,
    /// Number of clean images the optimization runs over.
    pub batch: usize,
    pub seed: u64,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig { iters: 500, lr: 0.1, l1_weight: 0.01, batch: 64, seed: 0 }
    }
}

/// Result of one trigger reconstruction.
#[derive(Debug, Clone)]
pub struct RestoredTrigger {
    /// Full-frame mask + pattern; pasting it reproduces the optimized
    /// masked blend.
    pub patch: Patch,
    /// Sum of the mask entries (continuous, no binarization).
    pub l1: f64,
    /// Best-so-far total loss per iteration (non-increasing).
    pub trace: Vec<f64>,
    /// Fraction of the optimization batch the final trigger drives to the
    /// requested class.
    pub flip_rate: f64,
}

impl RestoredTrigger {
    /// The reconstruction as an applicable trigger.
    pub fn as_trigger(&self) -> Trigger {
        Trigger::Patch { patch: self.patch.clone(), top: 0, left: 0 }
    }

    /// Save mask+pattern as one RGBA image (alpha = mask).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::trigger::save_patch_png(path, &self.patch)
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Adaptive-moment updates over a raw parameter vector.
struct VecAdam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
}

impl VecAdam {
    fn new(n: usize, lr: f32) -> VecAdam {
        VecAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, x: &mut [f32], g: &[f32]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Reconstruct a putative trigger for `class`: optimize a mask logit and a
/// pattern logit (both sigmoid-squashed) so that blending
/// `x′ = (1−m)·x + m·p` over a batch of clean images forces predictions to
/// `class`, with loss `cross-entropy + l1_weight·Σm`. Deterministic for a
/// fixed config. Non-convergence shows up as a high final trace value and a
/// low flip rate rather than an error.
pub fn reverse_trigger(
    model: &Model,
    data: &Dataset,
    class: usize,
    cfg: &NcConfig,
) -> Result<RestoredTrigger> {
    let (c, h, w) = data.input_chw();
    if (c, h, w) != model.arch().input {
        return Err(Error::InvalidConfig(format!(
            "dataset samples are {:?} but the model expects {:?}",
            (c, h, w),
            model.arch().input
        )));
    }
    if class >= data.classes {
        return Err(Error::TargetOutOfRange { target: class, classes: data.classes });
    }
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("iters and batch must be positive".into()));
    }

    let mut rng = stream(cfg.seed, "nc-init");
    let take = cfg.batch.min(data.len());
    let idx: Vec<usize> =
        rand::seq::index::sample(&mut rng, data.len(), take).into_iter().collect();
    let (x, _) = data.batch(&idx);
    let n = idx.len();
    let labels = vec![class; n];

    let hw = h * w;
    let chw = c * hw;
    // Start with a nearly-open mask: the optimizer then shrinks it to what
    // the classification loss actually needs, and the ℓ1 penalty mops up
    // the rest.
    let mut mask_logit: Vec<f32> = (0..hw).map(|_| 1.0 + 0.1 * rng.gen::<f32>()).collect();
    let mut pat_logit: Vec<f32> = (0..chw).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let mut opt_m = VecAdam::new(hw, cfg.lr);
    let mut opt_p = VecAdam::new(chw, cfg.lr);

    let mut best_loss = f64::INFINITY;
    let mut best_m: Vec<f32> = Vec::new();
    let mut best_p: Vec<f32> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iters);

    let mut m = vec![0.0f32; hw];
    let mut p = vec![0.0f32; chw];
    for _ in 0..cfg.iters {
        for (mi, &z) in m.iter_mut().zip(&mask_logit) {
            *mi = sigmoid(z);
        }
        for (pi, &z) in p.iter_mut().zip(&pat_logit) {
            *pi = sigmoid(z);
        }

        let mut xp = x.clone();
        for s in 0..n {
            for ci in 0..c {
                let base = s * chw + ci * hw;
                for i in 0..hw {
                    let v = xp.data[base + i];
                    xp.data[base + i] = v + m[i] * (p[ci * hw + i] - v);
                }
            }
        }

        let pass = model.forward(&xp, Mode::Eval)?;
        let (ce, dlogits) = cross_entropy(pass.logits(), &labels);
        let (_, dx) = model.backward(&pass, dlogits, Wrt::InputOnly)?;

        let l1: f64 = m.iter().map(|&v| v as f64).sum();
        let loss = ce + cfg.l1_weight as f64 * l1;
        if !loss.is_finite() {
            return Err(Error::NonFinite("trigger reconstruction loss diverged".into()));
        }
        if loss < best_loss {
            best_loss = loss;
            best_m = m.clone();
            best_p = p.clone();
        }
        trace.push(best_loss);

        let mut gm = vec![0.0f32; hw];
        let mut gp = vec![0.0f32; chw];
        for s in 0..n {
            for ci in 0..c {
                let base = s * chw + ci * hw;
                for i in 0..hw {
                    let g = dx.data[base + i];
                    gm[i] += g * (p[ci * hw + i] - x.data[base + i]);
                    gp[ci * hw + i] += g * m[i];
                }
            }
        }
        for i in 0..hw {
            let ds = m[i] * (1.0 - m[i]);
            gm[i] = (gm[i] + cfg.l1_weight) * ds;
        }
        for j in 0..chw {
            gp[j] *= p[j] * (1.0 - p[j]);
        }
        opt_m.step(&mut mask_logit, &gm);
        opt_p.step(&mut pat_logit, &gp);
    }

    // Measure the kept (best) trigger.
    let mut xp = x.clone();
    for s in 0..n {
        for ci in 0..c {
            let base = s * chw + ci * hw;
            for i in 0..hw {
                let v = xp.data[base + i];
                xp.data[base + i] = v + best_m[i] * (best_p[ci * hw + i] - v);
            }
        }
    }
    let logits = model.logits(&xp)?;
    let classes = logits.shape[1];
    let flips = logits
        .data
        .chunks(classes)
        .filter(|row| crate::net::argmax_row(row) == class)
        .count();

    let l1 = best_m.iter().map(|&v| v as f64).sum();
    let patch = Patch::new(
        Tensor::from_vec(&[c, h, w], best_p),
        Tensor::from_vec(&[h, w], best_m),
    )?;
    Ok(RestoredTrigger { patch, l1, trace, flip_rate: flips as f64 / n as f64 })
}

// ── three-way comparison ────────────────────────────────────────────────────

/// ℓ1 contrast between reconstructions on a clean, a data-poisoned, and a
/// grafted model, all probed at the same class.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    /// Per-run mask ℓ1 norms, one entry per seed, per model.
    pub l1_clean_runs: Vec<f64>,
    pub l1_dp_runs: Vec<f64>,
    pub l1_graft_runs: Vec<f64>,
    /// Medians of the above.
    pub l1_clean: f64,
    pub l1_dp: f64,
    pub l1_graft: f64,
    /// `l1_graft / l1_dp`, the headline contrast (zero-guarded).
    pub ratio_graft_dp: f64,
    /// How well the grafted model's reconstructed trigger transfers: its
    /// success rate on the clean model vs on the grafted model itself.
    pub cross_asr_clean_model: f64,
    pub cross_asr_graft_model: f64,
}

/// Run [`reverse_trigger`] `runs` times (distinct seeds) on each of three
/// models and contrast the recovered mask sizes. The grafted model's
/// median-ℓ1 reconstruction is then applied to both the clean and the
/// grafted model to measure how (un)specific it is.
pub fn compare_models(
    clean: &Model,
    poisoned: &Model,
    grafted: &Model,
    class: usize,
    data: &Dataset,
    cfg: &NcConfig,
    runs: usize,
) -> Result<CompareReport> {
    if runs == 0 {
        return Err(Error::InvalidConfig("need at least one reconstruction run".into()));
    }
    let run_all = |model: &Model| -> Result<Vec<RestoredTrigger>> {
        (0..runs)
            .map(|r| {
                let mut c = cfg.clone();
                c.seed = stream_idx(cfg.seed, "nc-run", r as u64).gen();
                reverse_trigger(model, data, class, &c)
            })
            .collect()
    };
    let clean_runs = run_all(clean)?;
    let dp_runs = run_all(poisoned)?;
    let graft_runs = run_all(grafted)?;

    let l1s = |rs: &[RestoredTrigger]| rs.iter().map(|r| r.l1).collect::<Vec<f64>>();
    let l1_clean_runs = l1s(&clean_runs);
    let l1_dp_runs = l1s(&dp_runs);
    let l1_graft_runs = l1s(&graft_runs);
    let l1_clean = eval::median_lower(&l1_clean_runs);
    let l1_dp = eval::median_lower(&l1_dp_runs);
    let l1_graft = eval::median_lower(&l1_graft_runs);

    // The run realizing the lower median ℓ1 is the representative one.
    let mut order: Vec<usize> = (0..runs).collect();
    order.sort_by(|&a, &b| l1_graft_runs[a].total_cmp(&l1_graft_runs[b]));
    let median_run = &graft_runs[order[(runs - 1) / 2]];
    let trig = median_run.as_trigger();
    let cross_asr_clean_model =
        eval::asr(clean, data, &trig, class, AsrPolicy::ExcludeTargetClass)?;
    let cross_asr_graft_model =
        eval::asr(grafted, data, &trig, class, AsrPolicy::ExcludeTargetClass)?;

    Ok(CompareReport {
        l1_clean_runs,
        l1_dp_runs,
        l1_graft_runs,
        l1_clean,
        l1_dp,
        l1_graft,
        ratio_graft_dp: l1_graft / l1_dp.max(1e-12),
        cross_asr_clean_model,
        cross_asr_graft_model,
    })
}
