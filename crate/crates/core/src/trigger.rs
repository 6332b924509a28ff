//! Triggers: the input-space marks a grafted subnet is trained to detect.
//!
//! Four families are supported, all operating on pixel values in `[0, 1]`:
//!
//! * **patch** — paste a small pattern (with a soft mask) at a fixed spot;
//! * **blend** — alpha-blend a full-frame pattern over the image;
//! * **perturb** — add a bounded full-frame perturbation, clamped;
//! * **filter** — a parameter-free photographic tone curve, so the "mark"
//!   is a global restyling rather than any localized pixels.
//!
//! For physical-style robustness, [`perspective_bank`] renders a patch
//! under a grid of out-of-plane rotations (a pinhole-projected homography
//! per angle triple) and [`sample_physical`] draws random
//! variant/scale/position placements from that bank.

use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

// ── patches ────────────────────────────────────────────────────────────────

/// A small pattern with a per-pixel opacity mask, both in `[0, 1]`.
/// Pattern shape `[C, h, w]`, mask shape `[h, w]` (shared across channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pattern: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Patch {
    pub fn new(pattern: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        if pattern.shape.len() != 3 {
            return Err(Error::InvalidConfig("patch pattern must be [C, h, w]".into()));
        }
        if mask.shape != pattern.shape[1..] {
            return Err(Error::InvalidConfig("patch mask must be [h, w]".into()));
        }
        if !pattern.data.iter().chain(&mask.data).all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("patch values must lie in [0, 1]".into()));
        }
        Ok(Patch { pattern, mask })
    }

    /// Alternating 0/1 cells with a fully opaque mask — a high-contrast
    /// default that no natural image region reproduces.
    pub fn checker(channels: usize, k: usize) -> Patch {
        let mut pattern = Tensor::zeros(&[channels, k, k]);
        for c in 0..channels {
            for y in 0..k {
                for x in 0..k {
                    pattern.data[(c * k + y) * k + x] = ((x + y + c) % 2) as f32;
                }
            }
        }
        Patch { pattern, mask: Tensor::filled(&[k, k], 1.0) }
    }

    /// Uniform-random pixels with a fully opaque mask.
    pub fn noise(channels: usize, k: usize, seed: u64) -> Patch {
        let mut rng = crate::rng::stream(seed, "noise-patch");
        let data = (0..channels * k * k).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Patch {
            pattern: Tensor::from_vec(&[channels, k, k], data),
            mask: Tensor::filled(&[k, k], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.pattern.shape[0]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.pattern.shape[1], self.pattern.shape[2])
    }

    /// Convert between 1- and 3-channel patterns (luma down, replicate up).
    pub fn to_channels(&self, channels: usize) -> Result<Patch> {
        let (h, w) = self.hw();
        let have = self.channels();
        let pattern = match (have, channels) {
            (a, b) if a == b => return Ok(self.clone()),
            (3, 1) => {
                let mut data = Vec::with_capacity(h * w);
                for p in 0..h * w {
                    let (r, g, b) = (
                        self.pattern.data[p],
                        self.pattern.data[h * w + p],
                        self.pattern.data[2 * h * w + p],
                    );
                    data.push(0.299 * r + 0.587 * g + 0.114 * b);
                }
                Tensor::from_vec(&[1, h, w], data)
            }
            (1, 3) => {
                let mut data = Vec::with_capacity(3 * h * w);
                for _ in 0..3 {
                    data.extend_from_slice(&self.pattern.data);
                }
                Tensor::from_vec(&[3, h, w], data)
            }
            (a, b) => {
                return Err(Error::InvalidConfig(format!(
                    "cannot convert a {a}-channel patch to {b} channels"
                )))
            }
        };
        Ok(Patch { pattern, mask: self.mask.clone() })
    }

    /// Bilinear resize of pattern and mask to `s × s`.
    pub fn resized(&self, s: usize) -> Patch {
        let (h, w) = self.hw();
        let c = self.channels();
        let mut pattern = Tensor::zeros(&[c, s, s]);
        let mut mask = Tensor::zeros(&[s, s]);
        for y in 0..s {
            for x in 0..s {
                let sy = (y as f32 + 0.5) * h as f32 / s as f32 - 0.5;
                let sx = (x as f32 + 0.5) * w as f32 / s as f32 - 0.5;
                for ch in 0..c {
                    pattern.data[(ch * s + y) * s + x] =
                        bilinear(&self.pattern.data[ch * h * w..(ch + 1) * h * w], h, w, sy, sx);
                }
                mask.data[y * s + x] = bilinear(&self.mask.data, h, w, sy, sx);
            }
        }
        Patch { pattern, mask }
    }
}

/// Bilinear sample of a `h × w` plane at continuous `(y, x)`, clamped at the
/// borders.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let v00 = plane[y0 * w + x0];
    let v01 = plane[y0 * w + x1];
    let v10 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    let v =
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx;
    // the exact value is a convex combination of the corners; rounding must
    // not push it past their extremes (callers validate value ranges)
    let lo = v00.min(v01).min(v10).min(v11);
    let hi = v00.max(v01).max(v10).max(v11);
    v.clamp(lo, hi)
}

// ── tone curve filter ──────────────────────────────────────────────────────

/// A photographic restyle: monotone tone curves (one for all channels, an
/// optional separate curve for blue) plus mild unsharp masking.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneCurve {
    /// `(x, y)` knots of the main curve, strictly ascending in both.
    pub rgb: Vec<(f32, f32)>,
    /// Optional knots for the blue channel of 3-channel inputs.
    pub blue: Option<Vec<(f32, f32)>>,
    /// Unsharp-mask amount (0 disables sharpening).
    pub sharpen: f32,
}

impl ToneCurve {
    /// The stock look: a deep S-curve with lifted blues and a touch of
    /// sharpening — reads as "moody evening photo", not as a sticker.
    pub fn dusk() -> ToneCurve {
        ToneCurve {
            rgb: vec![(0.0, 0.0), (0.25, 0.15), (0.5, 0.5), (0.75, 0.88), (1.0, 1.0)],
            blue: Some(vec![(0.0, 0.0), (0.25, 0.22), (0.5, 0.5), (0.75, 0.92), (1.0, 1.0)]),
            sharpen: 0.8,
        }
    }
}

/// Monotone piecewise-cubic (Fritsch–Carlson) interpolation through knots.
/// Monotone knots give a monotone curve, so tone order is preserved.
fn pchip(knots: &[(f32, f32)], x: f32) -> f32 {
    let n = knots.len();
    debug_assert!(n >= 2);
    let x = x.clamp(knots[0].0, knots[n - 1].0);
    // secants and slopes
    let mut d = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        d.push((knots[i + 1].1 - knots[i].1) / (knots[i + 1].0 - knots[i].0));
    }
    let mut m = vec![0.0f32; n];
    m[0] = d[0];
    m[n - 1] = d[n - 2];
    for i in 1..n - 1 {
        m[i] = if d[i - 1] * d[i] <= 0.0 {
            0.0
        } else {
            2.0 * d[i - 1] * d[i] / (d[i - 1] + d[i]) // harmonic mean
        };
    }
    let seg = knots[..n - 1].iter().rposition(|k| x >= k.0).unwrap_or(0);
    let (x0, y0) = knots[seg];
    let (x1, y1) = knots[seg + 1];
    let hseg = x1 - x0;
    let t = (x - x0) / hseg;
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y0 + h10 * hseg * m[seg] + h01 * y1 + h11 * hseg * m[seg + 1]
}

/// 3×3 Gaussian blur (kernel [1,2,1]/4 per axis) with clamped borders.
fn blur3(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            tmp[y * w + x] =
                0.25 * plane[y * w + xm] + 0.5 * plane[y * w + x] + 0.25 * plane[y * w + xp];
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            out[y * w + x] = 0.25 * tmp[ym * w + x] + 0.5 * tmp[y * w + x] + 0.25 * tmp[yp * w + x];
        }
    }
    out
}

// ── the trigger itself ─────────────────────────────────────────────────────

/// One concrete input transformation `T(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Trigger {
    /// Paste `patch` with its mask, top-left corner at `(top, left)`.
    Patch { patch: Patch, top: usize, left: usize },
    /// `x ← (1 − alpha)·x + alpha·pattern`, `pattern` full-frame `[C, H, W]`.
    Blend { pattern: Tensor<f32>, alpha: f32 },
    /// `x ← clamp(x + eps·delta)`, `delta` full-frame in `[-1, 1]`.
    Perturb { delta: Tensor<f32>, eps: f32 },
    /// Apply a tone-curve restyle to the whole image.
    Filter(ToneCurve),
}

impl Trigger {
    /// Paste a patch at the conventional spot: bottom-right, inset by one
    /// pixel.
    pub fn patch_bottom_right(patch: Patch, input_chw: (usize, usize, usize)) -> Result<Trigger> {
        let (_, h, w) = input_chw;
        let (ph, pw) = patch.hw();
        if ph + 1 > h || pw + 1 > w {
            return Err(Error::InvalidConfig(format!(
                "{ph}×{pw} patch does not fit a {h}×{w} input with a 1px inset"
            )));
        }
        Ok(Trigger::Patch { patch, top: h - ph - 1, left: w - pw - 1 })
    }

    /// Short human-readable description for manifests and logs.
    pub fn describe(&self) -> String {
        match self {
            Trigger::Patch { patch, top, left } => {
                let (h, w) = patch.hw();
                format!("patch {h}x{w} at ({top},{left})")
            }
            Trigger::Blend { alpha, .. } => format!("blend alpha={alpha}"),
            Trigger::Perturb { eps, .. } => format!("perturb eps={eps}"),
            Trigger::Filter(_) => "filter".into(),
        }
    }

    /// Apply to one `[C, H, W]` sample stored as a flat slice.
    pub fn apply_into(&self, x: &mut [f32], c: usize, h: usize, w: usize) -> Result<()> {
        debug_assert_eq!(x.len(), c * h * w);
        match self {
            Trigger::Patch { patch, top, left } => {
                if patch.channels() != c {
                    return Err(Error::InvalidConfig(format!(
                        "patch has {} channels, input has {c}",
                        patch.channels()
                    )));
                }
                let (ph, pw) = patch.hw();
                if top + ph > h || left + pw > w {
                    return Err(Error::InvalidConfig(format!(
                        "{ph}×{pw} patch at ({top},{left}) exceeds the {h}×{w} input"
                    )));
                }
                for ch in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            let m = patch.mask.data[py * pw + px];
                            let p = patch.pattern.data[(ch * ph + py) * pw + px];
                            let at = (ch * h + top + py) * w + left + px;
                            x[at] = (1.0 - m) * x[at] + m * p;
                        }
                    }
                }
            }
            Trigger::Blend { pattern, alpha } => {
                if pattern.shape != [c, h, w] {
                    return Err(Error::InvalidConfig("blend pattern shape mismatch".into()));
                }
                for (v, p) in x.iter_mut().zip(&pattern.data) {
                    *v = (1.0 - alpha) * *v + alpha * p;
                }
            }
            Trigger::Perturb { delta, eps } => {
                if delta.shape != [c, h, w] {
                    return Err(Error::InvalidConfig("perturbation shape mismatch".into()));
                }
                for (v, d) in x.iter_mut().zip(&delta.data) {
                    *v = clamp01(*v + eps * d);
                }
            }
            Trigger::Filter(curve) => {
                for ch in 0..c {
                    let plane = &mut x[ch * h * w..(ch + 1) * h * w];
                    let knots: &[(f32, f32)] = match (&curve.blue, c, ch) {
                        (Some(b), 3, 2) => b,
                        _ => &curve.rgb,
                    };
                    for v in plane.iter_mut() {
                        *v = clamp01(pchip(knots, *v));
                    }
                }
                if curve.sharpen > 0.0 {
                    for ch in 0..c {
                        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
                        let blurred = blur3(plane, h, w);
                        for (v, b) in plane.iter_mut().zip(blurred) {
                            *v = clamp01(*v + curve.sharpen * (*v - b));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply to every sample of an `[N, C, H, W]` batch, returning a copy.
    pub fn apply_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.shape.len() != 4 {
            return Err(Error::InvalidConfig("expected an [N, C, H, W] batch".into()));
        }
        let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
        let mut out = x.clone();
        for sample in out.data.chunks_exact_mut(c * h * w) {
            self.apply_into(sample, c, h, w)?;
        }
        Ok(out)
    }
}

// ── PNG I/O ────────────────────────────────────────────────────────────────

/// Load a patch from a PNG. The alpha channel (if any) becomes the mask;
/// RGB/grayscale files get a fully opaque mask. The pattern is converted to
/// `channels`.
pub fn load_patch_png(path: &Path, channels: usize) -> Result<Patch> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut pattern = Tensor::zeros(&[3, h, w]);
    let mut mask = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32).0;
            for c in 0..3 {
                pattern.data[(c * h + y) * w + x] = px[c] as f32 / 255.0;
            }
            mask.data[y * w + x] = px[3] as f32 / 255.0;
        }
    }
    Patch::new(pattern, mask)?.to_channels(channels)
}

/// Save a patch as an RGBA PNG (mask → alpha). 1-channel patches are
/// replicated to gray RGB.
pub fn save_patch_png(path: &Path, patch: &Patch) -> Result<()> {
    let rgb = patch.to_channels(3)?;
    let (h, w) = rgb.hw();
    let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let img = image::RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgba([
            q(rgb.pattern.data[y * w + x]),
            q(rgb.pattern.data[(h + y) * w + x]),
            q(rgb.pattern.data[(2 * h + y) * w + x]),
            q(rgb.mask.data[y * w + x]),
        ])
    });
    img.save(path)?;
    Ok(())
}

/// Load a full-frame pattern (for blend/perturb) from a PNG, ignoring
/// alpha, converted to `channels` and validated against `h × w`.
pub fn load_pattern_png(path: &Path, channels: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let patch = load_patch_png(path, channels)?;
    if patch.hw() != (h, w) {
        let (ph, pw) = patch.hw();
        return Err(Error::InvalidConfig(format!(
            "pattern is {ph}×{pw}, input needs {h}×{w}"
        )));
    }
    Ok(patch.pattern)
}

// ── perspective bank ───────────────────────────────────────────────────────

/// One pre-rendered out-of-plane view of a patch.
#[derive(Debug, Clone)]
pub struct WarpedPatch {
    pub patch: Patch,
    pub rx_deg: f32,
    pub ry_deg: f32,
    pub rz_deg: f32,
}

/// Render `patch` under every rotation triple from `angles_deg` (one list,
/// used for all three axes): `len³` views. The default five angles
/// `[-60, -30, 0, 30, 60]` give a bank of 125.
pub fn perspective_bank(patch: &Patch, angles_deg: &[f32]) -> Result<Vec<WarpedPatch>> {
    if angles_deg.is_empty() {
        return Err(Error::InvalidConfig("empty angle list".into()));
    }
    let mut bank = Vec::with_capacity(angles_deg.len().pow(3));
    for &rx in angles_deg {
        for &ry in angles_deg {
            for &rz in angles_deg {
                bank.push(WarpedPatch {
                    patch: warp_patch(patch, rx, ry, rz)?,
                    rx_deg: rx,
                    ry_deg: ry,
                    rz_deg: rz,
                });
            }
        }
    }
    Ok(bank)
}

pub const DEFAULT_BANK_ANGLES: [f32; 5] = [-60.0, -30.0, 0.0, 30.0, 60.0];

/// Render a patch rotated out of plane by (rx, ry, rz) degrees about its
/// center and projected back with a pinhole camera. The result lives on a
/// square canvas twice the patch's larger side; the mask is warped along
/// and zero outside the projected quad.
pub fn warp_patch(patch: &Patch, rx_deg: f32, ry_deg: f32, rz_deg: f32) -> Result<Patch> {
    let (h, w) = patch.hw();
    let c = patch.channels();
    let side = 2 * h.max(w);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ox, oy) = (side as f64 / 2.0, side as f64 / 2.0);
    let d = 2.5 * h.max(w) as f64; // camera distance = focal length

    // rotation R = Rz · Ry · Rx
    let (sx, cxr) = (rx_deg as f64).to_radians().sin_cos();
    let (sy, cyr) = (ry_deg as f64).to_radians().sin_cos();
    let (sz, czr) = (rz_deg as f64).to_radians().sin_cos();
    let rot = [
        [czr * cyr, czr * sy * sx - sz * cxr, czr * sy * cxr + sz * sx],
        [sz * cyr, sz * sy * sx + czr * cxr, sz * sy * cxr - czr * sx],
        [-sy, cyr * sx, cyr * cxr],
    ];

    // project the four source corners
    let corners = [(0.0, 0.0), (w as f64, 0.0), (w as f64, h as f64), (0.0, h as f64)];
    let mut projected = [(0.0f64, 0.0f64); 4];
    for (i, &(x, y)) in corners.iter().enumerate() {
        let (px, py) = (x - cx, y - cy);
        let xr = rot[0][0] * px + rot[0][1] * py;
        let yr = rot[1][0] * px + rot[1][1] * py;
        let zr = rot[2][0] * px + rot[2][1] * py + d;
        if zr < 0.1 * d {
            return Err(Error::DegenerateWarp(format!(
                "corner behind the camera at ({rx_deg}, {ry_deg}, {rz_deg})°"
            )));
        }
        projected[i] = (d * xr / zr + ox, d * yr / zr + oy);
    }

    // homography canvas → source, straight from the reversed correspondences
    let hinv = homography(&projected, &corners)?;

    let mut pattern = Tensor::zeros(&[c, side, side]);
    let mut mask = Tensor::zeros(&[side, side]);
    for v in 0..side {
        for u in 0..side {
            let (uu, vv) = (u as f64 + 0.5, v as f64 + 0.5);
            let den = hinv[6] * uu + hinv[7] * vv + hinv[8];
            if den.abs() < 1e-12 {
                continue;
            }
            let sxp = (hinv[0] * uu + hinv[1] * vv + hinv[2]) / den;
            let syp = (hinv[3] * uu + hinv[4] * vv + hinv[5]) / den;
            if sxp < 0.0 || sxp > w as f64 || syp < 0.0 || syp > h as f64 {
                continue;
            }
            // pixel-center coordinates in the source plane
            let (fy, fx) = ((syp - 0.5) as f32, (sxp - 0.5) as f32);
            mask.data[v * side + u] = bilinear(&patch.mask.data, h, w, fy, fx);
            for ch in 0..c {
                pattern.data[(ch * side + v) * side + u] =
                    bilinear(&patch.pattern.data[ch * h * w..(ch + 1) * h * w], h, w, fy, fx);
            }
        }
    }
    Patch::new(pattern, mask)
}

/// Homography mapping `src[i] → dst[i]` (projective, 8 unknowns, direct
/// linear transform from 4 correspondences). Returned row-major, h[8] = 1.
fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8]; // augmented [8×8 | rhs]
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-9 {
            return Err(Error::DegenerateWarp("projected corners are collinear".into()));
        }
        a.swap(col, pivot);
        let inv = 1.0 / a[col][col];
        for k in col..9 {
            a[col][k] *= inv;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut hm = [0.0f64; 9];
    for (i, row) in a.iter().enumerate() {
        hm[i] = row[8];
    }
    hm[8] = 1.0;
    Ok(hm)
}

/// Draw one randomized physical-style placement: a uniformly chosen bank
/// variant, scaled to a uniform side in `scale = (lo, hi)` (inclusive),
/// pasted at a uniform position. Returns the ready-to-apply trigger.
pub fn sample_physical(
    bank: &[WarpedPatch],
    input_chw: (usize, usize, usize),
    scale: (usize, usize),
    rng: &mut Rng,
) -> Result<Trigger> {
    if bank.is_empty() {
        return Err(Error::InvalidConfig("empty perspective bank".into()));
    }
    let (c, h, w) = input_chw;
    let (lo, hi) = scale;
    if lo == 0 || lo > hi || hi > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "scale range {lo}..={hi} does not fit a {h}×{w} input"
        )));
    }
    let variant = &bank[rng.gen_range(0..bank.len())];
    let s = rng.gen_range(lo..=hi);
    let patch = variant.patch.to_channels(c)?.resized(s);
    let top = rng.gen_range(0..=h - s);
    let left = rng.gen_range(0..=w - s);
    Ok(Trigger::Patch { patch, top, left })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_paste_hits_exact_pixels() {
        let patch = Patch::checker(1, 2); // [[0,1],[1,0]]
        let trig = Trigger::Patch { patch, top: 1, left: 2 };
        let mut x = vec![0.5f32; 4 * 4];
        trig.apply_into(&mut x, 1, 4, 4).unwrap();
        let expect = |r: usize, c: usize| x[r * 4 + c];
        assert_eq!(expect(1, 2), 0.0);
        assert_eq!(expect(1, 3), 1.0);
        assert_eq!(expect(2, 2), 1.0);
        assert_eq!(expect(2, 3), 0.0);
        // untouched elsewhere
        assert_eq!(expect(0, 0), 0.5);
        assert_eq!(expect(3, 3), 0.5);
    }

    #[test]
    fn soft_mask_mixes_linearly() {
        let pattern = Tensor::filled(&[1, 1, 1], 1.0);
        let mask = Tensor::filled(&[1, 1], 0.25);
        let patch = Patch::new(pattern, mask).unwrap();
        let trig = Trigger::Patch { patch, top: 0, left: 0 };
        let mut x = vec![0.2f32];
        trig.apply_into(&mut x, 1, 1, 1).unwrap();
        assert!((x[0] - (0.75 * 0.2 + 0.25)).abs() < 1e-6);
    }

    #[test]
    fn blend_is_a_convex_mix() {
        let pattern = Tensor::filled(&[1, 2, 2], 1.0);
        let trig = Trigger::Blend { pattern, alpha: 0.2 };
        let x = Tensor::filled(&[1, 1, 2, 2], 0.5);
        let out = trig.apply_batch(&x).unwrap();
        for v in &out.data {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn perturb_clamps_to_unit_range() {
        let delta = Tensor::from_vec(&[1, 1, 2], vec![1.0, -1.0]);
        let trig = Trigger::Perturb { delta, eps: 0.5 };
        let mut x = vec![0.9f32, 0.1];
        trig.apply_into(&mut x, 1, 1, 2).unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
    }

    #[test]
    fn tone_curve_hits_knots_and_stays_monotone() {
        let curve = ToneCurve::dusk();
        for &(x, y) in &curve.rgb {
            assert!((pchip(&curve.rgb, x) - y).abs() < 1e-6, "knot {x}");
        }
        let blue = curve.blue.as_ref().unwrap();
        assert!((pchip(blue, 0.25) - 0.22).abs() < 1e-6);
        let mut prev = -1.0f32;
        for i in 0..=100 {
            let v = pchip(&curve.rgb, i as f32 / 100.0);
            assert!(v >= prev - 1e-6, "not monotone at {i}");
            prev = v;
        }
        // endpoints are exact fixed points, so black and white are stable
        assert_eq!(pchip(&curve.rgb, 0.0), 0.0);
        assert_eq!(pchip(&curve.rgb, 1.0), 1.0);
    }

    #[test]
    fn filter_darkens_shadows_lifts_highlights() {
        let trig = Trigger::Filter(ToneCurve { sharpen: 0.0, ..ToneCurve::dusk() });
        let mut x = vec![0.25f32; 9]; // flat plane: no sharpening effects
        trig.apply_into(&mut x, 1, 3, 3).unwrap();
        assert!((x[4] - 0.15).abs() < 1e-6);
        let mut y = vec![0.75f32; 9];
        trig.apply_into(&mut y, 1, 3, 3).unwrap();
        assert!((y[4] - 0.88).abs() < 1e-6);
    }

    #[test]
    fn png_roundtrip_preserves_pattern_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patch.png");
        let mut patch = Patch::noise(3, 6, 7);
        patch.mask.data[5] = 0.5; // non-trivial alpha
        save_patch_png(&path, &patch).unwrap();
        let back = load_patch_png(&path, 3).unwrap();
        assert_eq!(back.hw(), (6, 6));
        for (a, b) in patch.pattern.data.iter().zip(&back.pattern.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        for (a, b) in patch.mask.data.iter().zip(&back.mask.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn zero_rotation_warp_is_a_centered_copy() {
        // even-sized smooth pattern → integral placement → exact copy
        let mut pattern = Tensor::zeros(&[1, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                pattern.data[y * 8 + x] = (x as f32 + 8.0 * y as f32) / 64.0;
            }
        }
        let patch = Patch::new(pattern, Tensor::filled(&[8, 8], 1.0)).unwrap();
        let warped = warp_patch(&patch, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(warped.hw(), (16, 16));
        // the central 8×8 window equals the source
        for y in 0..8 {
            for x in 0..8 {
                let v = warped.pattern.data[(y + 4) * 16 + (x + 4)];
                assert!(
                    (v - patch.pattern.data[y * 8 + x]).abs() < 1e-5,
                    "({y},{x}): {v}"
                );
                assert!((warped.mask.data[(y + 4) * 16 + (x + 4)] - 1.0).abs() < 1e-5);
            }
        }
        // outside the quad the mask is zero
        assert_eq!(warped.mask.data[0], 0.0);
    }

    #[test]
    fn bank_has_cubed_size_and_valid_masks() {
        let patch = Patch::checker(3, 6);
        let bank = perspective_bank(&patch, &DEFAULT_BANK_ANGLES).unwrap();
        assert_eq!(bank.len(), 125);
        for v in &bank {
            assert!(v.patch.mask.data.iter().all(|m| (0.0..=1.0).contains(m)));
            assert!(v.patch.mask.data.iter().any(|&m| m > 0.5), "patch vanished");
        }
    }

    #[test]
    fn edge_on_rotation_is_degenerate() {
        let patch = Patch::checker(1, 6);
        assert!(matches!(
            warp_patch(&patch, 0.0, 90.0, 0.0),
            Err(Error::DegenerateWarp(_))
        ));
    }

    #[test]
    fn physical_samples_fit_and_vary() {
        let patch = Patch::checker(3, 6);
        let bank = perspective_bank(&patch, &[-30.0, 0.0, 30.0]).unwrap();
        let mut rng = crate::rng::stream(1, "phys-test");
        let mut tops = std::collections::HashSet::new();
        for _ in 0..50 {
            let trig = sample_physical(&bank, (3, 32, 32), (8, 14), &mut rng).unwrap();
            let Trigger::Patch { patch, top, left } = &trig else { panic!() };
            let (h, w) = patch.hw();
            assert!(h >= 8 && h <= 14 && h == w);
            assert!(top + h <= 32 && left + w <= 32);
            tops.insert(*top);
        }
        assert!(tops.len() > 3, "positions do not vary");
    }

    #[test]
    fn resize_preserves_flat_patches() {
        let patch = Patch::new(
            Tensor::filled(&[2, 5, 5], 0.7),
            Tensor::filled(&[5, 5], 1.0),
        )
        .unwrap();
        let r = patch.resized(9);
        assert_eq!(r.hw(), (9, 9));
        for v in &r.pattern.data {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }
}
