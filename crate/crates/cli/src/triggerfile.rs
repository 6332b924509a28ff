//! The trigger description file.
//!
//! Triggers are declared in a small TOML file so every subcommand that
//! needs one (`train-poisoned`, `train-subnet`, `evaluate`, ...) shares a
//! single definition. Schema (`kind` selects the variant; unknown keys are
//! rejected):
//!
//! ```toml
//! kind = "patch"            # patch | blend | perturb | filter
//!
//! # kind = "patch": a pasted sticker
//! source = "checker"        # checker | noise | png
//! k = 8                     # side length in pixels (checker / noise)
//! channels = 1              # pattern channels (defaults to the input's)
//! seed = 42                 # pixel RNG (noise)
//! png = "patch.png"         # image file (source = "png")
//! placement = "bottom-right"  # bottom-right (1px inset, default) | fixed
//! top = 0                   # placement = "fixed"
//! left = 0
//!
//! # kind = "blend": x ← (1−alpha)·x + alpha·pattern, full-frame pattern
//! alpha = 0.2
//! source = "noise"          # noise | png
//! seed = 42
//!
//! # kind = "perturb": x ← clamp(x + eps·delta), full-frame delta in [−1,1]
//! eps = 0.1
//! source = "noise"          # noise | png   (png maps [0,1] → [−1,1])
//! seed = 42
//!
//! # kind = "filter": global tone-curve restyle
//! curve = "dusk"
//! ```

use crate::config::{need, user, CliResult, Ctx};
use graft_core::trigger::{load_patch_png, load_pattern_png, ToneCurve};
use graft_core::{Patch, Tensor, Trigger};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct TriggerFile {
    pub kind: Option<String>,
    pub source: Option<String>,
    pub k: Option<usize>,
    pub channels: Option<usize>,
    pub seed: Option<u64>,
    pub png: Option<PathBuf>,
    pub placement: Option<String>,
    pub top: Option<usize>,
    pub left: Option<usize>,
    pub alpha: Option<f32>,
    pub eps: Option<f32>,
    pub curve: Option<String>,
}

impl TriggerFile {
    pub fn load(path: &Path) -> CliResult<TriggerFile> {
        let text = std::fs::read_to_string(path).ctx("trigger file")?;
        let tf: TriggerFile = toml::from_str(&text)
            .map_err(|e| user(format!("trigger file {}: {e}", path.display())))?;
        Ok(tf)
    }

    /// Materialize the description against a concrete input shape.
    pub fn build(&self, input_chw: (usize, usize, usize)) -> CliResult<Trigger> {
        let (c, h, w) = input_chw;
        match need(self.kind.as_deref(), "kind (in the trigger file)")? {
            "patch" => {
                let patch = self.patch(c)?;
                match self.placement.as_deref().unwrap_or("bottom-right") {
                    "bottom-right" => Ok(Trigger::patch_bottom_right(patch, input_chw)?),
                    "fixed" => Ok(Trigger::Patch {
                        patch,
                        top: self.top.unwrap_or(0),
                        left: self.left.unwrap_or(0),
                    }),
                    other => Err(user(format!(
                        "trigger placement `{other}` is not one of: bottom-right, fixed"
                    ))),
                }
            }
            "blend" => {
                let alpha = need(self.alpha, "alpha (in the trigger file)")?;
                let pattern = self.full_frame(c, h, w, 0.0)?;
                Ok(Trigger::Blend { pattern, alpha })
            }
            "perturb" => {
                let eps = need(self.eps, "eps (in the trigger file)")?;
                let delta = self.full_frame(c, h, w, -1.0)?;
                Ok(Trigger::Perturb { delta, eps })
            }
            "filter" => match self.curve.as_deref().unwrap_or("dusk") {
                "dusk" => Ok(Trigger::Filter(ToneCurve::dusk())),
                other => Err(user(format!("unknown tone curve `{other}`"))),
            },
            other => Err(user(format!(
                "trigger kind `{other}` is not one of: patch, blend, perturb, filter"
            ))),
        }
    }

    /// The patch pattern for `kind = "patch"`; also used by `gen-trigger`.
    pub fn patch(&self, input_channels: usize) -> CliResult<Patch> {
        let channels = self.channels.unwrap_or(input_channels);
        match need(self.source.as_deref(), "source (in the trigger file)")? {
            "checker" => Ok(Patch::checker(channels, need(self.k, "k (in the trigger file)")?)),
            "noise" => Ok(Patch::noise(
                channels,
                need(self.k, "k (in the trigger file)")?,
                need(self.seed, "seed (in the trigger file)")?,
            )),
            "png" => {
                let png = need(self.png.as_deref(), "png (in the trigger file)")?;
                Ok(load_patch_png(png, channels)?)
            }
            other => {
                Err(user(format!("patch source `{other}` is not one of: checker, noise, png")))
            }
        }
    }

    /// A full-frame pattern in `[lo, 1]` (`lo` 0 for blends, −1 for
    /// perturbations).
    fn full_frame(&self, c: usize, h: usize, w: usize, lo: f32) -> CliResult<Tensor<f32>> {
        match self.source.as_deref().unwrap_or("noise") {
            "noise" => {
                let seed = need(self.seed, "seed (in the trigger file)")?;
                let mut rng = graft_core::rng::stream(seed, "trigger-frame");
                let data = (0..c * h * w).map(|_| rng.gen_range(lo..=1.0)).collect();
                Ok(Tensor::from_vec(&[c, h, w], data))
            }
            "png" => {
                let png = need(self.png.as_deref(), "png (in the trigger file)")?;
                let mut t = load_pattern_png(png, c, h, w)?;
                if lo < 0.0 {
                    for v in &mut t.data {
                        *v = *v * (1.0 - lo) + lo;
                    }
                }
                Ok(t)
            }
            other => Err(user(format!("frame source `{other}` is not one of: noise, png"))),
        }
    }
}

/// Load a trigger file and materialize it in one step.
pub fn load_trigger(path: &Path, input_chw: (usize, usize, usize)) -> CliResult<Trigger> {
    TriggerFile::load(path)?.build(input_chw)
}
