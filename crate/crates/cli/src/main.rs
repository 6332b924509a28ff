//! `graft` — command-line workbench around `graft-core`.
//!
//! One task per invocation. Every flag can instead come from a TOML config
//! file (`--config`, one table per subcommand; flags override the file), and
//! every run writes a JSON manifest recording the resolved configuration and
//! the hashes of all inputs and outputs.
//!
//! Exit codes: 0 success, 1 user/config error, 2 numeric or internal error.

mod config;
mod manifest;
mod tasks;
mod triggerfile;

use clap::{Args, Parser, Subcommand};
use config::{impl_overlay, CliResult};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "graft",
    version,
    about = "Workbench for weight-surgery backdoor experiments on small CNNs",
    propagate_version = true
)]
struct Cli {
    /// TOML config file; one table per subcommand, flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed that fills in any per-task seed left unset (default 0).
    #[arg(long, global = true, value_name = "SEED")]
    root_seed: Option<u64>,

    /// Manifest path (default: `<primary output>.manifest.json`).
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled image dataset and write it to disk.
    GenData(GenDataArgs),
    /// Render a patch pattern (checkerboard or noise) to a PNG file.
    GenTrigger(GenTriggerArgs),
    /// Pick subnet slots in a host architecture and save the spec(s).
    Select(SelectArgs),
    /// Print / export the layered node-edge view of an architecture.
    Graph(GraphArgs),
    /// Train a clean host classifier.
    TrainVictim(TrainVictimArgs),
    /// Train a host classifier on a partially relabeled, triggered set.
    TrainPoisoned(TrainPoisonedArgs),
    /// Train a narrow trigger detector for a subnet spec.
    TrainSubnet(TrainSubnetArgs),
    /// Graft a detector into a victim model and save the result.
    Replace(ReplaceArgs),
    /// Serialize a graft as a victim-independent patch file.
    EmitPatch(EmitPatchArgs),
    /// Apply a patch file to a model file byte-for-byte.
    ApplyPatch(ApplyPatchArgs),
    /// Measure accuracy, attack success, and accuracy drop.
    Evaluate(EvaluateArgs),
    /// Repeat the attack over freshly sampled subnet slots and tabulate.
    Trials(TrialsArgs),
    /// Evaluate a grid of detection thresholds into a trade-off table.
    Sweep(SweepArgs),
    /// Split the target logit's input gradient into detector vs host share.
    GradProbe(GradProbeArgs),
    /// Reconstruct a minimal trigger for one class from a model alone.
    ReverseTrigger(ReverseTriggerArgs),
    /// Run trigger reconstruction across clean/poisoned/grafted models.
    Compare(CompareArgs),
}

// ── per-task argument structs ───────────────────────────────────────────────
// Every field is optional at parse time; the config file fills gaps, then
// defaults (documented per flag) apply. Tables in the config file use the
// same kebab-case names as the flags. The dataset flags (--images/--labels
// for IDX pairs, --cifar for CIFAR-binary batches, --classes, --limit) and
// the wiring flags (--w-out/--delta-b raw, or --stats with --gain and
// optionally --threshold) repeat verbatim across tasks.

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct GenDataArgs {
    /// gray (1×28×28, IDX output) or rgb (3×32×32, CIFAR-binary output).
    #[arg(long)]
    kind: Option<String>,
    /// Number of samples [default: 1000].
    #[arg(long)]
    n: Option<usize>,
    /// Generator seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// train or test: which generator stream to draw from [default: train].
    #[arg(long)]
    split: Option<String>,
    /// IDX image file to write (kind = gray).
    #[arg(long)]
    out_images: Option<PathBuf>,
    /// IDX label file to write (kind = gray).
    #[arg(long)]
    out_labels: Option<PathBuf>,
    /// CIFAR-binary batch file to write (kind = rgb).
    #[arg(long)]
    out_cifar: Option<PathBuf>,
}
impl_overlay!(GenDataArgs, [kind, n, seed, split, out_images, out_labels, out_cifar]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct GenTriggerArgs {
    /// checker or noise.
    #[arg(long)]
    source: Option<String>,
    /// Patch side length in pixels.
    #[arg(long)]
    k: Option<usize>,
    /// Pattern channels [default: 1].
    #[arg(long)]
    channels: Option<usize>,
    /// Pixel seed (source = noise) [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// PNG file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(GenTriggerArgs, [source, k, channels, seed, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct SelectArgs {
    /// Host architecture name.
    #[arg(long)]
    arch: Option<String>,
    /// Target class per spec; pass several for disjoint multi-target specs.
    #[arg(long, value_delimiter = ',')]
    target: Option<Vec<usize>>,
    /// Subnet width (nodes per hidden layer) [default: 1].
    #[arg(long)]
    width: Option<usize>,
    /// random or top [default: random].
    #[arg(long)]
    strategy: Option<String>,
    /// Selection seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Spec file to write; with multiple targets, `.N` is inserted before
    /// the extension.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(SelectArgs, [arch, target, width, strategy, seed, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct GraphArgs {
    /// Architecture name.
    #[arg(long)]
    arch: Option<String>,
    /// Optional subnet spec: adds the overwrite-budget breakdown.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON report to write [default: graph.json].
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(GraphArgs, [arch, spec, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct TrainVictimArgs {
    /// Architecture name.
    #[arg(long)]
    arch: Option<String>,
    /// IDX image file (paired with --labels).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CIFAR-binary batch file (instead of --images/--labels).
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Training epochs [default: 6].
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f32>,
    /// Training seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(
    TrainVictimArgs,
    [arch, images, labels, cifar, classes, limit, epochs, batch, lr, seed, out]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct TrainPoisonedArgs {
    /// Architecture name.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Trigger description file (TOML).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Class the triggered samples are relabeled to.
    #[arg(long)]
    target: Option<usize>,
    /// Fraction of the training set poisoned [default: 0.1].
    #[arg(long)]
    rate: Option<f64>,
    /// Training epochs [default: 6].
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f32>,
    /// Training seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(
    TrainPoisonedArgs,
    [arch, images, labels, cifar, classes, limit, trigger, target, rate, epochs, batch, lr, seed, out]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct TrainSubnetArgs {
    /// Host architecture name (the detector mirrors it at subnet width).
    #[arg(long)]
    arch: Option<String>,
    /// Subnet spec file the detector is derived from.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Trigger description file (TOML).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Activation value pushed on triggered inputs [default: 20].
    #[arg(long)]
    act_target: Option<f32>,
    /// Weight of the triggered loss term [default: 1].
    #[arg(long)]
    lambda: Option<f32>,
    /// Training epochs [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f32>,
    /// Independent restarts; best final loss wins [default: 3].
    #[arg(long)]
    restarts: Option<usize>,
    /// Train against randomized placements of a perspective-warped bank.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    physical: Option<bool>,
    /// Rotation grid in degrees for the bank [default: -60,-30,0,30,60].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    angles: Option<Vec<f32>>,
    /// Smallest pasted patch side in physical mode [default: 8].
    #[arg(long)]
    scale_lo: Option<usize>,
    /// Largest pasted patch side in physical mode [default: 14].
    #[arg(long)]
    scale_hi: Option<usize>,
    /// Training seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Detector model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clean/triggered output statistics (JSON) to write.
    #[arg(long)]
    stats: Option<PathBuf>,
}
impl_overlay!(
    TrainSubnetArgs,
    [
        arch, spec, images, labels, cifar, classes, limit, trigger, act_target, lambda, epochs,
        batch, lr, restarts, physical, angles, scale_lo, scale_hi, seed, out, stats,
    ]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct ReplaceArgs {
    /// Victim model file.
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Subnet spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Detector model file.
    #[arg(long)]
    subnet: Option<PathBuf>,
    /// Weight written on the target class's edge from the detector.
    #[arg(long, allow_hyphen_values = true)]
    w_out: Option<f32>,
    /// Absolute bias written for the target class.
    #[arg(long, allow_hyphen_values = true)]
    delta_b: Option<f32>,
    /// Detector statistics JSON (from train-subnet) to calibrate against.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output gain used with --stats [default: 10].
    #[arg(long)]
    gain: Option<f32>,
    /// Detection threshold used with --stats [default: auto].
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f32>,
    /// Attacked model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(ReplaceArgs, [victim, spec, subnet, w_out, delta_b, stats, gain, threshold, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct EmitPatchArgs {
    /// Architecture name the patch is built for.
    #[arg(long)]
    arch: Option<String>,
    /// Subnet spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Detector model file.
    #[arg(long)]
    subnet: Option<PathBuf>,
    /// Weight written on the target class's edge from the detector.
    #[arg(long, allow_hyphen_values = true)]
    w_out: Option<f32>,
    /// Absolute bias written for the target class.
    #[arg(long, allow_hyphen_values = true)]
    delta_b: Option<f32>,
    /// Detector statistics JSON (from train-subnet) to calibrate against.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output gain used with --stats [default: 10].
    #[arg(long)]
    gain: Option<f32>,
    /// Detection threshold used with --stats [default: auto].
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f32>,
    /// Patch file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(EmitPatchArgs, [arch, spec, subnet, w_out, delta_b, stats, gain, threshold, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct ApplyPatchArgs {
    /// Model file to patch (left unmodified).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Patch file.
    #[arg(long)]
    patch: Option<PathBuf>,
    /// Patched model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}
impl_overlay!(ApplyPatchArgs, [model, patch, out]);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct EvaluateArgs {
    /// Model file to evaluate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference model: adds the accuracy-drop metric against it.
    #[arg(long)]
    victim: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Trigger description file: adds the attack-success metric.
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Attack target class (required with --trigger).
    #[arg(long)]
    target: Option<usize>,
    /// exclude-target or include-all [default: exclude-target].
    #[arg(long)]
    policy: Option<String>,
    /// JSON report to write.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    EvaluateArgs,
    [model, victim, images, labels, cifar, classes, limit, trigger, target, policy, report]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct TrialsArgs {
    /// Victim model file.
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Detector model file (reused across trials).
    #[arg(long)]
    subnet: Option<PathBuf>,
    /// Weight written on the target class's edge from the detector.
    #[arg(long, allow_hyphen_values = true)]
    w_out: Option<f32>,
    /// Absolute bias written for the target class.
    #[arg(long, allow_hyphen_values = true)]
    delta_b: Option<f32>,
    /// Detector statistics JSON (from train-subnet) to calibrate against.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output gain used with --stats [default: 10].
    #[arg(long)]
    gain: Option<f32>,
    /// Detection threshold used with --stats [default: auto].
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f32>,
    /// Subnet width per trial [default: 1].
    #[arg(long)]
    width: Option<usize>,
    /// Attack target class.
    #[arg(long)]
    target: Option<usize>,
    /// Number of trials [default: 10].
    #[arg(long)]
    n: Option<usize>,
    /// Base selection seed; trial k selects with seed+k [default: derived].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Trigger description file (TOML).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// exclude-target or include-all [default: exclude-target].
    #[arg(long)]
    policy: Option<String>,
    /// Per-trial CSV table to write.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Optional per-trial JSONL table.
    #[arg(long)]
    out_jsonl: Option<PathBuf>,
    /// JSON summary (medians) to write.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    TrialsArgs,
    [
        victim, subnet, w_out, delta_b, stats, gain, threshold, width, target, n, seed, images,
        labels, cifar, classes, limit, trigger, policy, out_csv, out_jsonl, report,
    ]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct SweepArgs {
    /// Victim model file.
    #[arg(long)]
    victim: Option<PathBuf>,
    /// Subnet spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Detector model file.
    #[arg(long)]
    subnet: Option<PathBuf>,
    /// Detector statistics JSON (from train-subnet).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output gain at every point [default: 10].
    #[arg(long)]
    gain: Option<f32>,
    /// Number of thresholds spanning the observed output range [default: 9].
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Trigger description file (TOML).
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// exclude-target or include-all [default: exclude-target].
    #[arg(long)]
    policy: Option<String>,
    /// Per-threshold CSV table to write.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Optional JSON copy of the table.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    SweepArgs,
    [
        victim, spec, subnet, stats, gain, points, images, labels, cifar, classes, limit,
        trigger, policy, out_csv, report,
    ]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct GradProbeArgs {
    /// Attacked model file.
    #[arg(long)]
    attacked: Option<PathBuf>,
    /// Subnet spec file the attack used.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Detector model file the attack used.
    #[arg(long)]
    subnet: Option<PathBuf>,
    /// Weight written on the target class's edge from the detector.
    #[arg(long, allow_hyphen_values = true)]
    w_out: Option<f32>,
    /// Absolute bias written for the target class.
    #[arg(long, allow_hyphen_values = true)]
    delta_b: Option<f32>,
    /// Detector statistics JSON (from train-subnet) to calibrate against.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Output gain used with --stats [default: 10].
    #[arg(long)]
    gain: Option<f32>,
    /// Detection threshold used with --stats [default: auto].
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f32>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Number of clean samples probed [default: 64].
    #[arg(long)]
    n: Option<usize>,
    /// JSON report to write.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    GradProbeArgs,
    [
        attacked, spec, subnet, w_out, delta_b, stats, gain, threshold, images, labels, cifar,
        classes, n, report,
    ]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct ReverseTriggerArgs {
    /// Model file to probe.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Class to reconstruct a trigger for.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Optimization iterations [default: 500].
    #[arg(long)]
    iters: Option<usize>,
    /// Optimizer learning rate [default: 0.1].
    #[arg(long)]
    lr: Option<f32>,
    /// Weight of the mask's sparsity penalty [default: 0.01].
    #[arg(long)]
    l1_weight: Option<f32>,
    /// Clean images the optimization runs over [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Optimization seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Save the reconstructed mask+pattern as an RGBA PNG.
    #[arg(long)]
    out_png: Option<PathBuf>,
    /// JSON report to write.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    ReverseTriggerArgs,
    [model, class, images, labels, cifar, classes, iters, lr, l1_weight, batch, seed, out_png, report]
);

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct CompareArgs {
    /// Clean model file.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Data-poisoned model file.
    #[arg(long)]
    poisoned: Option<PathBuf>,
    /// Grafted model file.
    #[arg(long)]
    grafted: Option<PathBuf>,
    /// Class probed on all three models.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Number of classes in the label files [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Reconstruction runs per model (distinct seeds) [default: 3].
    #[arg(long)]
    runs: Option<usize>,
    /// Optimization iterations per run [default: 500].
    #[arg(long)]
    iters: Option<usize>,
    /// Optimizer learning rate [default: 0.1].
    #[arg(long)]
    lr: Option<f32>,
    /// Weight of the mask's sparsity penalty [default: 0.01].
    #[arg(long)]
    l1_weight: Option<f32>,
    /// Clean images each optimization runs over [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Base optimization seed [default: derived from the root seed].
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report to write.
    #[arg(long)]
    report: Option<PathBuf>,
}
impl_overlay!(
    CompareArgs,
    [clean, poisoned, grafted, class, images, labels, cifar, classes, runs, iters, lr, l1_weight, batch, seed, report]
);

// ── entry point ─────────────────────────────────────────────────────────────

fn run(cli: Cli) -> CliResult<()> {
    let cfg = config::load(cli.config.as_deref())?;
    let root_seed = cli.root_seed.or(cfg.root_seed).unwrap_or(0);
    let manifest = cli.manifest.as_deref();

    macro_rules! go {
        ($args:expr, $name:literal, $task:path) => {{
            let mut a = $args;
            config::apply(&mut a, &cfg, $name)?;
            $task(a, root_seed, manifest)
        }};
    }

    match cli.cmd {
        Cmd::GenData(a) => go!(a, "gen-data", tasks::gen_data),
        Cmd::GenTrigger(a) => go!(a, "gen-trigger", tasks::gen_trigger),
        Cmd::Select(a) => go!(a, "select", tasks::select),
        Cmd::Graph(a) => go!(a, "graph", tasks::graph),
        Cmd::TrainVictim(a) => go!(a, "train-victim", tasks::train_victim),
        Cmd::TrainPoisoned(a) => go!(a, "train-poisoned", tasks::train_poisoned),
        Cmd::TrainSubnet(a) => go!(a, "train-subnet", tasks::train_subnet),
        Cmd::Replace(a) => go!(a, "replace", tasks::replace),
        Cmd::EmitPatch(a) => go!(a, "emit-patch", tasks::emit_patch),
        Cmd::ApplyPatch(a) => go!(a, "apply-patch", tasks::apply_patch),
        Cmd::Evaluate(a) => go!(a, "evaluate", tasks::evaluate),
        Cmd::Trials(a) => go!(a, "trials", tasks::trials),
        Cmd::Sweep(a) => go!(a, "sweep", tasks::sweep),
        Cmd::GradProbe(a) => go!(a, "grad-probe", tasks::grad_probe),
        Cmd::ReverseTrigger(a) => go!(a, "reverse-trigger", tasks::reverse_trigger),
        Cmd::Compare(a) => go!(a, "compare", tasks::compare),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
