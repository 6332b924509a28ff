//! Datasets, metrics and trial orchestration.
//!
//! Datasets are self-generated: 10 procedurally drawn classes rendered as
//! either 28×28 grayscale or 32×32 RGB, with enough per-sample jitter that
//! a small CNN has something real to learn. They can be written to and read
//! back from the two ubiquitous on-disk layouts for images this size — the
//! big-endian `idx` tensor files and the label-prefixed CIFAR-style binary
//! records — so the pipeline exercises real parsers instead of shortcuts.
//!
//! Metrics follow the usual attack-evaluation conventions:
//!
//! * **accuracy** — plain top-1 on clean inputs;
//! * **ASR** (attack success rate) — how often a *triggered* input lands in
//!   the attack's target class; samples whose true label is already the
//!   target are excluded by default;
//! * **CAD** (clean accuracy drop) — victim accuracy minus attacked-model
//!   accuracy on the same clean data.

use std::io::Read as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{argmax_row, Model};
use crate::rng::{stream, stream_idx, Rng};
use crate::tensor::Tensor;
use crate::trigger::Trigger;

/// Labeled image set, pixels in `[0, 1]`, NCHW.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Which half of a generated corpus to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "synth-train",
            Split::Test => "synth-test",
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `(C, H, W)`.
    pub fn input_chw(&self) -> (usize, usize, usize) {
        (self.images.shape[1], self.images.shape[2], self.images.shape[3])
    }

    pub fn sample_elems(&self) -> usize {
        let (c, h, w) = self.input_chw();
        c * h * w
    }

    /// Gather a batch by sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let elems = self.sample_elems();
        let (c, h, w) = self.input_chw();
        let mut images = Tensor::zeros(&[idx.len(), c, h, w]);
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            images.data[row * elems..(row + 1) * elems]
                .copy_from_slice(&self.images.data[i * elems..(i + 1) * elems]);
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    /// A new dataset containing the given samples.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.batch(idx);
        Dataset { images, labels, classes: self.classes }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Content digest (image bytes + labels) for manifests.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.images.data {
            hasher.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        crate::arch::hex(&hasher.finalize())
    }
}

// ── synthetic corpora ──────────────────────────────────────────────────────

const CLASSES: usize = 10;
const TEMPLATE: usize = 4;

/// Per-class low-resolution templates, upsampled with jitter per sample.
/// The templates depend only on `seed`, so train and test splits of the
/// same seed draw from the same 10 classes.
fn templates(seed: u64, channels: usize) -> Vec<Vec<f32>> {
    let mut rng = stream(seed, "synth-templates");
    (0..CLASSES)
        .map(|_| {
            (0..channels * TEMPLATE * TEMPLATE).map(|_| rng.gen_range(0.0f32..=1.0)).collect()
        })
        .collect()
}

fn render_sample(
    template: &[f32],
    channels: usize,
    side: usize,
    rng: &mut Rng,
    out: &mut [f32],
) {
    // random similarity jitter: shift ±2 px, scale 0.9–1.1
    let shift_y = rng.gen_range(-2.0f32..=2.0);
    let shift_x = rng.gen_range(-2.0f32..=2.0);
    let zoom = rng.gen_range(0.9f32..=1.1);
    let brightness = rng.gen_range(-0.1f32..=0.1);
    let contrast = rng.gen_range(0.9f32..=1.1);
    let noise = Normal::new(0.0f32, 0.05).expect("valid sigma");
    let t = TEMPLATE as f32;
    for c in 0..channels {
        let plane = &template[c * TEMPLATE * TEMPLATE..(c + 1) * TEMPLATE * TEMPLATE];
        for y in 0..side {
            for x in 0..side {
                // map output pixel to template coordinates
                let cy = (y as f32 + 0.5 - shift_y) / side as f32 - 0.5;
                let cx = (x as f32 + 0.5 - shift_x) / side as f32 - 0.5;
                let ty = ((cy / zoom + 0.5) * t - 0.5).clamp(0.0, t - 1.0);
                let tx = ((cx / zoom + 0.5) * t - 0.5).clamp(0.0, t - 1.0);
                let (y0, x0) = (ty.floor() as usize, tx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(TEMPLATE - 1), (x0 + 1).min(TEMPLATE - 1));
                let (fy, fx) = (ty - y0 as f32, tx - x0 as f32);
                let v = plane[y0 * TEMPLATE + x0] * (1.0 - fy) * (1.0 - fx)
                    + plane[y0 * TEMPLATE + x1] * (1.0 - fy) * fx
                    + plane[y1 * TEMPLATE + x0] * fy * (1.0 - fx)
                    + plane[y1 * TEMPLATE + x1] * fy * fx;
                let v = (v - 0.5) * contrast + 0.5 + brightness + noise.sample(rng);
                out[(c * side + y) * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn synth(n: usize, seed: u64, split: Split, channels: usize, side: usize) -> Dataset {
    let templates = templates(seed, channels);
    let elems = channels * side * side;
    let mut images = Tensor::zeros(&[n, channels, side, side]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        let mut rng = stream_idx(seed, split.label(), i as u64);
        render_sample(
            &templates[class],
            channels,
            side,
            &mut rng,
            &mut images.data[i * elems..(i + 1) * elems],
        );
        labels.push(class);
    }
    Dataset { images, labels, classes: CLASSES }
}

/// 10-class 1×28×28 corpus.
pub fn synth_gray(n: usize, seed: u64, split: Split) -> Dataset {
    synth(n, seed, split, 1, 28)
}

/// 10-class 3×32×32 corpus.
pub fn synth_rgb(n: usize, seed: u64, split: Split) -> Dataset {
    synth(n, seed, split, 3, 32)
}

/// Replace a random `rate` fraction of samples with triggered copies
/// relabeled to `target` — the classic data-poisoning baseline.
pub fn poison(
    data: &Dataset,
    trigger: &Trigger,
    target: usize,
    rate: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("poison rate {rate} outside [0, 1]")));
    }
    if target >= data.classes {
        return Err(Error::TargetOutOfRange { target, classes: data.classes });
    }
    let mut rng = stream(seed, "poison");
    let k = (rate * data.len() as f64).round() as usize;
    let picks = rand::seq::index::sample(&mut rng, data.len(), k.min(data.len()));
    let mut out = data.clone();
    let (c, h, w) = data.input_chw();
    let elems = data.sample_elems();
    for i in picks {
        trigger.apply_into(&mut out.images.data[i * elems..(i + 1) * elems], c, h, w)?;
        out.labels[i] = target;
    }
    Ok(out)
}

// ── on-disk formats ────────────────────────────────────────────────────────

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write 1-channel images + labels as big-endian `idx` tensor files
/// (magic 0x00000803 for the `[n, h, w]` u8 images, 0x00000801 for labels).
pub fn write_idx(images_path: &Path, labels_path: &Path, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.input_chw();
    if c != 1 {
        return Err(Error::Dataset("idx export is for 1-channel images".into()));
    }
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for dim in [n, h, w] {
        img.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    img.extend(data.images.data.iter().map(|&v| quantize(v)));
    std::fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, lab)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Dataset("truncated idx header".into()))
}

/// Read an `idx` image/label pair written by [`write_idx`] (or any
/// compatible producer). Pixels come back as `v / 255`.
pub fn read_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let img = read_all(images_path)?;
    if be_u32(&img, 0)? != 0x0000_0803 {
        return Err(Error::Dataset("bad magic in idx image file".into()));
    }
    let n = be_u32(&img, 4)? as usize;
    let h = be_u32(&img, 8)? as usize;
    let w = be_u32(&img, 12)? as usize;
    if img.len() != 16 + n * h * w {
        return Err(Error::Dataset("idx image payload size mismatch".into()));
    }
    let images = Tensor::from_vec(
        &[n, 1, h, w],
        img[16..].iter().map(|&b| b as f32 / 255.0).collect(),
    );

    let lab = read_all(labels_path)?;
    if be_u32(&lab, 0)? != 0x0000_0801 {
        return Err(Error::Dataset("bad magic in idx label file".into()));
    }
    if be_u32(&lab, 4)? as usize != n || lab.len() != 8 + n {
        return Err(Error::Dataset("idx label count mismatch".into()));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dataset(format!("label {bad} out of range (classes {classes})")));
    }
    Ok(Dataset { images, labels, classes })
}

/// Write 3×32×32 images as CIFAR-style binary records:
/// `label u8, then 3·32·32 channel-major pixel bytes` per sample.
pub fn write_cifar_bin(path: &Path, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.input_chw();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::Dataset("cifar export is for 3×32×32 images".into()));
    }
    let elems = data.sample_elems();
    let mut out = Vec::with_capacity(data.len() * (1 + elems));
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(data.images.data[i * elems..(i + 1) * elems].iter().map(|&v| quantize(v)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read CIFAR-style binary records written by [`write_cifar_bin`].
pub fn read_cifar_bin(path: &Path, classes: usize) -> Result<Dataset> {
    const REC: usize = 1 + 3 * 32 * 32;
    let bytes = read_all(path)?;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::Dataset(format!(
            "cifar record file size {} is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut images = Tensor::zeros(&[n, 3, 32, 32]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * REC..(i + 1) * REC];
        if rec[0] as usize >= classes {
            return Err(Error::Dataset(format!(
                "label {} out of range (classes {classes})",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        for (o, &b) in images.data[i * (REC - 1)..(i + 1) * (REC - 1)].iter_mut().zip(&rec[1..]) {
            *o = b as f32 / 255.0;
        }
    }
    Ok(Dataset { images, labels, classes })
}

// ── metrics ────────────────────────────────────────────────────────────────

const EVAL_BATCH: usize = 256;

/// Top-1 predictions over a whole dataset, batched internally.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    predict_with(model, data, None)
}

fn predict_with(model: &Model, data: &Dataset, trigger: Option<&Trigger>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let classes = model.info().topo.classes;
    let mut at = 0;
    while at < data.len() {
        let idx: Vec<usize> = (at..(at + EVAL_BATCH).min(data.len())).collect();
        let (mut images, _) = data.batch(&idx);
        if let Some(t) = trigger {
            images = t.apply_batch(&images)?;
        }
        let logits = model.logits(&images)?;
        for row in logits.data.chunks_exact(classes) {
            out.push(argmax_row(row));
        }
        at += idx.len();
    }
    Ok(out)
}

/// Top-1 accuracy on clean inputs.
pub fn accuracy_of(model: &Model, data: &Dataset) -> Result<f64> {
    let preds = predict(model, data)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Which samples count toward the attack success rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AsrPolicy {
    /// Skip samples whose true label is already the target class — the
    /// attack did no work on those. The conventional choice.
    #[default]
    ExcludeTargetClass,
    /// Count every sample.
    IncludeAll,
}

/// Attack success rate: fraction of triggered inputs classified as
/// `target`, per `policy`.
pub fn asr(
    model: &Model,
    data: &Dataset,
    trigger: &Trigger,
    target: usize,
    policy: AsrPolicy,
) -> Result<f64> {
    let preds = predict_with(model, data, Some(trigger))?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, &l) in preds.iter().zip(&data.labels) {
        if policy == AsrPolicy::ExcludeTargetClass && l == target {
            continue;
        }
        total += 1;
        hits += usize::from(*p == target);
    }
    if total == 0 {
        return Err(Error::Dataset("no samples eligible for ASR".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Clean accuracy drop: `accuracy(victim) − accuracy(attacked)` on the same
/// clean data. Positive means the graft cost the host accuracy.
pub fn cad(victim: &Model, attacked: &Model, data: &Dataset) -> Result<f64> {
    Ok(accuracy_of(victim, data)? - accuracy_of(attacked, data)?)
}

/// Single scalar for ranking attack configurations: high ASR, low CAD.
/// `ln(max(asr, 1e-4)) − alpha·cad`; the floor keeps total failures finite.
pub fn objective_score(asr: f64, cad: f64, alpha: f64) -> f64 {
    asr.max(1e-4).ln() - alpha * cad
}

// ── trials ─────────────────────────────────────────────────────────────────

/// One attacked victim's worth of results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialRow {
    pub trial: u64,
    pub seed: u64,
    pub clean_acc: f64,
    pub asr: f64,
    pub cad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSummary {
    pub rows: Vec<TrialRow>,
    pub median_asr: f64,
    pub median_cad: f64,
}

/// Lower median: element at index `(n − 1) / 2` of the sorted values.
/// For even counts this is the pessimistic (lower) of the two central
/// values for ASR-like metrics.
pub fn median_lower(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Upper median: element at index `n / 2` of the sorted values — the
/// pessimistic choice for costs like CAD.
pub fn median_upper(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Run `k` trials of an attack procedure (trial number is passed in) and
/// summarize with pessimistic medians: lower for ASR, upper for CAD.
pub fn run_trials(
    k: u64,
    mut trial: impl FnMut(u64) -> Result<TrialRow>,
) -> Result<TrialSummary> {
    let rows: Vec<TrialRow> = (0..k).map(&mut trial).collect::<Result<_>>()?;
    let median_asr = median_lower(&rows.iter().map(|r| r.asr).collect::<Vec<_>>());
    let median_cad = median_upper(&rows.iter().map(|r| r.cad).collect::<Vec<_>>());
    Ok(TrialSummary { rows, median_asr, median_cad })
}

pub fn export_csv(path: &Path, rows: &[TrialRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_jsonl(path: &Path, rows: &[TrialRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable row"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
