//! One function per subcommand.
//!
//! Shared conventions: every handler fills unset seeds from the root seed,
//! loads its inputs (stamping each into the run manifest), does the work
//! through `graft_core`, writes its outputs (stamping those too), prints one
//! short status line, and finishes by writing the manifest. Handlers stay
//! thin — anything with behavior worth testing lives in the core crate.

use crate::config::{fill_seed, need, user, CliResult, Ctx};
use crate::manifest::RunManifest;
use crate::triggerfile;
use crate::{
    ApplyPatchArgs, CompareArgs, EmitPatchArgs, EvaluateArgs, GenDataArgs, GenTriggerArgs,
    GradProbeArgs, GraphArgs, ReplaceArgs, ReverseTriggerArgs, SelectArgs, SweepArgs, TrainPoisonedArgs,
    TrainSubnetArgs, TrainVictimArgs, TrialsArgs,
};
use graft_core as gc;
use graft_core::eval::Dataset;
use graft_core::format::{load_model, save_model, Meta};
use graft_core::{Model, SubnetSpec, Trigger, Wiring};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

// ── shared helpers ──────────────────────────────────────────────────────────

fn get_arch(name: &Option<String>) -> CliResult<gc::Arch> {
    let name = need(name.as_deref(), "arch")?;
    gc::named_arch(name).map_err(|_| {
        user(format!(
            "unknown architecture `{name}` (available: {})",
            gc::ARCH_NAMES.join(", ")
        ))
    })
}

fn read_model(path: &Option<PathBuf>, key: &str, man: &mut RunManifest) -> CliResult<(Model, Meta)> {
    let path = need(path.as_ref(), key)?;
    man.input(key, path)?;
    load_model(path).ctx(key)
}

fn read_spec(path: &Option<PathBuf>, man: &mut RunManifest) -> CliResult<SubnetSpec> {
    let path = need(path.as_ref(), "spec")?;
    man.input("spec", path)?;
    SubnetSpec::load(path).ctx("spec")
}

fn read_trigger(
    path: &Option<PathBuf>,
    input_chw: (usize, usize, usize),
    man: &mut RunManifest,
) -> CliResult<Trigger> {
    let path = need(path.as_ref(), "trigger")?;
    man.input("trigger", path)?;
    triggerfile::load_trigger(path, input_chw)
}

/// Load the dataset: an IDX pair (`--images` + `--labels`) or one
/// CIFAR-binary batch (`--cifar`), truncated to `limit` when given.
fn read_data(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    cifar: &Option<PathBuf>,
    classes: Option<usize>,
    limit: Option<usize>,
    man: &mut RunManifest,
) -> CliResult<Dataset> {
    let classes = classes.unwrap_or(10);
    let data = match (images, labels, cifar) {
        (Some(im), Some(lb), None) => {
            man.input("images", im)?;
            man.input("labels", lb)?;
            gc::eval::read_idx(im, lb, classes).ctx("dataset")?
        }
        (None, None, Some(cf)) => {
            man.input("cifar", cf)?;
            gc::eval::read_cifar_bin(cf, classes).ctx("dataset")?
        }
        (None, None, None) => {
            return Err(user("missing dataset: pass --images with --labels, or --cifar"))
        }
        _ => return Err(user("pass either --images with --labels, or --cifar, not a mixture")),
    };
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

fn parse_policy(p: &Option<String>) -> CliResult<gc::AsrPolicy> {
    match p.as_deref().unwrap_or("exclude-target") {
        "exclude-target" => Ok(gc::AsrPolicy::ExcludeTargetClass),
        "include-all" => Ok(gc::AsrPolicy::IncludeAll),
        other => {
            Err(user(format!("policy `{other}` is not one of: exclude-target, include-all")))
        }
    }
}

/// Resolve output wiring from flags: raw `--w-out` + `--delta-b`, or
/// `--stats` (+ `--gain`, `--threshold`) calibrated against measured
/// detector outputs. Returns the wiring and a JSON record of how it was
/// chosen.
#[allow(clippy::too_many_arguments)]
fn resolve_wiring(
    w_out: Option<f32>,
    delta_b: Option<f32>,
    stats: &Option<PathBuf>,
    gain: Option<f32>,
    threshold: Option<f32>,
    man: &mut RunManifest,
) -> CliResult<(Wiring, serde_json::Value)> {
    match (w_out, delta_b, stats) {
        (Some(w), Some(b), None) => {
            if gain.is_some() || threshold.is_some() {
                return Err(user("--gain and --threshold apply only together with --stats"));
            }
            Ok((Wiring { w_out: w, delta_b: b }, json!({ "w-out": w, "delta-b": b })))
        }
        (None, None, Some(path)) => {
            man.input("stats", path)?;
            let stats: gc::ActivationStats = read_json(path)?;
            let gain = gain.unwrap_or(gc::trainer::DEFAULT_GAIN);
            let policy = match threshold {
                Some(t) => gc::CalibrationPolicy::Threshold(t),
                None => gc::CalibrationPolicy::Auto,
            };
            let cal = gc::calibrate(&stats, policy, gain)?;
            if let Some(w) = &cal.warning {
                eprintln!("warning: {w}");
            }
            let doc = json!({
                "gain": gain,
                "threshold": cal.threshold,
                "w-out": cal.wiring.w_out,
                "delta-b": cal.wiring.delta_b,
                "warning": cal.warning,
            });
            Ok((cal.wiring, doc))
        }
        (None, None, None) => {
            Err(user("missing wiring: pass --w-out with --delta-b, or --stats"))
        }
        _ => Err(user("pass either --w-out with --delta-b, or --stats, not a mixture")),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).ctx(&path.display().to_string())?;
    serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).ctx(&path.display().to_string())?;
    Ok(())
}

/// `base.ext` → `base.i.ext` (multi-output naming for `select`).
fn numbered(path: &Path, i: usize) -> PathBuf {
    match path.extension() {
        Some(ext) => path.with_extension(format!("{i}.{}", ext.to_string_lossy())),
        None => PathBuf::from(format!("{}.{i}", path.display())),
    }
}

// ── data / trigger generation ───────────────────────────────────────────────

pub fn gen_data(mut a: GenDataArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "gen-data");
    let mut man = RunManifest::new("gen-data", root_seed);
    man.config(&a)?;
    let n = a.n.unwrap_or(1000);
    let seed = a.seed.expect("filled");
    let split = match a.split.as_deref().unwrap_or("train") {
        "train" => gc::Split::Train,
        "test" => gc::Split::Test,
        other => return Err(user(format!("split `{other}` is not one of: train, test"))),
    };
    let primary = match need(a.kind.as_deref(), "kind")? {
        "gray" => {
            let data = gc::eval::synth_gray(n, seed, split);
            let im = need(a.out_images.as_ref(), "out-images")?;
            let lb = need(a.out_labels.as_ref(), "out-labels")?;
            gc::eval::write_idx(im, lb, &data)?;
            man.output("images", im)?;
            man.output("labels", lb)?;
            man.results(json!({ "samples": n, "checksum": data.checksum() }));
            println!("wrote {} + {} ({n} samples)", im.display(), lb.display());
            im.clone()
        }
        "rgb" => {
            let data = gc::eval::synth_rgb(n, seed, split);
            let cf = need(a.out_cifar.as_ref(), "out-cifar")?;
            gc::eval::write_cifar_bin(cf, &data)?;
            man.output("cifar", cf)?;
            man.results(json!({ "samples": n, "checksum": data.checksum() }));
            println!("wrote {} ({n} samples)", cf.display());
            cf.clone()
        }
        other => return Err(user(format!("kind `{other}` is not one of: gray, rgb"))),
    };
    man.write(manifest, &primary)?;
    Ok(())
}

pub fn gen_trigger(mut a: GenTriggerArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "gen-trigger");
    let mut man = RunManifest::new("gen-trigger", root_seed);
    man.config(&a)?;
    let tf = triggerfile::TriggerFile {
        kind: Some("patch".into()),
        source: a.source.clone(),
        k: a.k,
        channels: Some(a.channels.unwrap_or(1)),
        seed: a.seed,
        ..Default::default()
    };
    let patch = tf.patch(1)?;
    let out = need(a.out.as_ref(), "out")?;
    gc::trigger::save_patch_png(out, &patch)?;
    man.output("png", out)?;
    let (h, w) = patch.hw();
    man.results(json!({ "channels": patch.channels(), "h": h, "w": w }));
    println!("wrote {} ({}x{h}x{w})", out.display(), patch.channels());
    man.write(manifest, out)?;
    Ok(())
}

// ── structure ───────────────────────────────────────────────────────────────

pub fn select(mut a: SelectArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "select");
    let mut man = RunManifest::new("select", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let targets = need(a.target.clone(), "target")?;
    let width = a.width.unwrap_or(1);
    let strategy: gc::SelectStrategy = a.strategy.as_deref().unwrap_or("random").parse()?;
    let seed = a.seed.expect("filled");
    let out = need(a.out.as_ref(), "out")?;

    let specs = gc::select_subnets(&arch, &targets, width, strategy, seed)?;
    let mut paths = Vec::with_capacity(specs.len());
    if specs.len() == 1 {
        specs[0].save(out)?;
        paths.push(out.clone());
    } else {
        for (i, spec) in specs.iter().enumerate() {
            let p = numbered(out, i);
            spec.save(&p)?;
            paths.push(p);
        }
    }
    for (spec, p) in specs.iter().zip(&paths) {
        man.output(&format!("spec-target-{}", spec.target), p)?;
    }
    let budget = gc::surgery::budget_report(&arch, &specs[0])?;
    man.results(json!({
        "specs": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "modified-params": budget.total,
        "model-params": budget.model_params,
        "fraction": budget.fraction(),
    }));
    println!(
        "wrote {} spec(s); each overwrites {} of {} parameters ({:.3}%)",
        paths.len(),
        budget.total,
        budget.model_params,
        100.0 * budget.fraction()
    );
    man.write(manifest, &paths[0])?;
    Ok(())
}

pub fn graph(a: GraphArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("graph", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let g = gc::build_graph(&arch)?;
    let mut doc = json!({
        "arch": a.arch,
        "widths": g.widths,
        "edges": g.edges,
        "sel-groups": g.sel_groups,
        "hidden": g.hidden,
        "params": arch.param_count(),
    });
    if let Some(spec_path) = &a.spec {
        man.input("spec", spec_path)?;
        let spec = SubnetSpec::load(spec_path).ctx("spec")?;
        let b = gc::surgery::budget_report(&arch, &spec)?;
        doc["budget"] = serde_json::to_value(&b)?;
        doc["budget-fraction"] = json!(b.fraction());
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("graph.json"));
    write_json(&out, &doc)?;
    man.output("graph", &out)?;
    let widths =
        g.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-");
    println!("wrote {} (node layers {widths})", out.display());
    man.write(manifest, &out)?;
    Ok(())
}

// ── training ────────────────────────────────────────────────────────────────

pub fn train_victim(mut a: TrainVictimArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "train-victim");
    let mut man = RunManifest::new("train-victim", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let cfg = gc::TrainConfig {
        epochs: a.epochs.unwrap_or(6),
        batch: a.batch.unwrap_or(64),
        lr: a.lr.unwrap_or(1e-3),
        seed: a.seed.expect("filled"),
    };
    let model = gc::train_classifier(&arch, &data, &cfg)?;
    let acc = gc::eval::accuracy_of(&model, &data)?;
    let out = need(a.out.as_ref(), "out")?;
    let mut meta = Meta::new();
    meta.insert("arch".into(), a.arch.clone().expect("checked"));
    meta.insert("seed".into(), cfg.seed.to_string());
    save_model(out, &model, &meta)?;
    man.output("model", out)?;
    man.results(json!({ "train-accuracy": acc, "samples": data.len() }));
    println!("wrote {} (train accuracy {acc:.4})", out.display());
    man.write(manifest, out)?;
    Ok(())
}

pub fn train_poisoned(
    mut a: TrainPoisonedArgs,
    root_seed: u64,
    manifest: Option<&Path>,
) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "train-poisoned");
    let mut man = RunManifest::new("train-poisoned", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let trigger = read_trigger(&a.trigger, data.input_chw(), &mut man)?;
    let target = need(a.target, "target")?;
    let rate = a.rate.unwrap_or(0.1);
    let cfg = gc::TrainConfig {
        epochs: a.epochs.unwrap_or(6),
        batch: a.batch.unwrap_or(64),
        lr: a.lr.unwrap_or(1e-3),
        seed: a.seed.expect("filled"),
    };
    let model = gc::train_poisoned(&arch, &data, &trigger, target, rate, &cfg)?;
    let acc = gc::eval::accuracy_of(&model, &data)?;
    let out = need(a.out.as_ref(), "out")?;
    let mut meta = Meta::new();
    meta.insert("arch".into(), a.arch.clone().expect("checked"));
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("poison-target".into(), target.to_string());
    meta.insert("poison-rate".into(), rate.to_string());
    save_model(out, &model, &meta)?;
    man.output("model", out)?;
    man.results(json!({ "train-accuracy": acc, "samples": data.len(), "rate": rate }));
    println!("wrote {} (train accuracy {acc:.4}, poison rate {rate})", out.display());
    man.write(manifest, out)?;
    Ok(())
}

pub fn train_subnet(mut a: TrainSubnetArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "train-subnet");
    let mut man = RunManifest::new("train-subnet", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let spec = read_spec(&a.spec, &mut man)?;
    spec.validate(&arch)?;
    let narrow = gc::derive_subnet_arch(&arch, &spec)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let trigger = read_trigger(&a.trigger, data.input_chw(), &mut man)?;

    let d = gc::SubnetTrainConfig::default();
    let physical = if a.physical == Some(true) {
        Some(gc::trainer::PhysicalSim {
            angles: a
                .angles
                .clone()
                .unwrap_or_else(|| gc::trigger::DEFAULT_BANK_ANGLES.to_vec()),
            scale: (a.scale_lo.unwrap_or(8), a.scale_hi.unwrap_or(14)),
        })
    } else {
        None
    };
    let cfg = gc::SubnetTrainConfig {
        act_target: a.act_target.unwrap_or(d.act_target),
        lambda: a.lambda.unwrap_or(d.lambda),
        epochs: a.epochs.unwrap_or(d.epochs),
        batch: a.batch.unwrap_or(d.batch),
        lr: a.lr.unwrap_or(d.lr),
        restarts: a.restarts.unwrap_or(d.restarts),
        physical,
        seed: a.seed.expect("filled"),
    };
    let (detector, report) = gc::train_backdoor_subnet(&narrow, &data, &trigger, &cfg)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    let out = need(a.out.as_ref(), "out")?;
    let mut meta = Meta::new();
    meta.insert("host-arch".into(), a.arch.clone().expect("checked"));
    meta.insert("target".into(), spec.target.to_string());
    meta.insert("width".into(), spec.width.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    save_model(out, &detector, &meta)?;
    man.output("model", out)?;
    if let Some(stats_path) = &a.stats {
        write_json(stats_path, &report.stats)?;
        man.output("stats", stats_path)?;
    }
    man.results(json!({
        "final-loss": report.final_loss,
        "restart-losses": report.restart_losses,
        "chosen-restart": report.chosen,
        "separated": report.separated,
        "auc": report.stats.auc(),
        "clean-max": report.stats.clean_max(),
        "trig-min": report.stats.trig_min(),
        "warning": report.warning,
    }));
    println!(
        "wrote {} (final loss {:.4}, separated: {})",
        out.display(),
        report.final_loss,
        report.separated
    );
    man.write(manifest, out)?;
    Ok(())
}

// ── the graft ───────────────────────────────────────────────────────────────

pub fn replace(a: ReplaceArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("replace", root_seed);
    man.config(&a)?;
    let (victim, meta) = read_model(&a.victim, "victim", &mut man)?;
    let spec = read_spec(&a.spec, &mut man)?;
    let (subnet, _) = read_model(&a.subnet, "subnet", &mut man)?;
    let (wiring, wiring_doc) =
        resolve_wiring(a.w_out, a.delta_b, &a.stats, a.gain, a.threshold, &mut man)?;
    let attacked = gc::replace_subnet(&victim, &spec, &subnet, wiring)?;
    let out = need(a.out.as_ref(), "out")?;
    // The victim's metadata is passed through untouched: the output file is
    // the victim's file with only the planned parameter bytes overwritten.
    save_model(out, &attacked, &meta)?;
    man.output("model", out)?;
    let modified = gc::count_modified(victim.arch(), &spec)?;
    man.results(json!({ "modified-params": modified, "wiring": wiring_doc }));
    println!("wrote {} ({modified} parameters overwritten)", out.display());
    man.write(manifest, out)?;
    Ok(())
}

pub fn emit_patch(a: EmitPatchArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("emit-patch", root_seed);
    man.config(&a)?;
    let arch = get_arch(&a.arch)?;
    let spec = read_spec(&a.spec, &mut man)?;
    let (subnet, _) = read_model(&a.subnet, "subnet", &mut man)?;
    let (wiring, wiring_doc) =
        resolve_wiring(a.w_out, a.delta_b, &a.stats, a.gain, a.threshold, &mut man)?;
    let patch = gc::emit_patch(&arch, &spec, &subnet, wiring)?;
    let out = need(a.out.as_ref(), "out")?;
    patch.save(out)?;
    man.output("patch", out)?;
    man.results(json!({
        "entries": patch.entries.len(),
        "target": patch.target,
        "wiring": wiring_doc,
    }));
    println!("wrote {} ({} entries)", out.display(), patch.entries.len());
    man.write(manifest, out)?;
    Ok(())
}

pub fn apply_patch(a: ApplyPatchArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("apply-patch", root_seed);
    man.config(&a)?;
    let model_path = need(a.model.as_ref(), "model")?;
    man.input("model", model_path)?;
    let bytes = std::fs::read(model_path).ctx("model")?;
    let patch_path = need(a.patch.as_ref(), "patch")?;
    man.input("patch", patch_path)?;
    let patch = gc::PatchList::load(patch_path).ctx("patch")?;
    let patched = gc::apply_patch(&bytes, &patch)?;
    let out = need(a.out.as_ref(), "out")?;
    std::fs::write(out, &patched).ctx("out")?;
    man.output("model", out)?;
    man.results(json!({ "entries": patch.entries.len(), "bytes": patched.len() }));
    println!("wrote {} ({} entries applied)", out.display(), patch.entries.len());
    man.write(manifest, out)?;
    Ok(())
}

// ── measurement ─────────────────────────────────────────────────────────────

pub fn evaluate(a: EvaluateArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("evaluate", root_seed);
    man.config(&a)?;
    let (model, _) = read_model(&a.model, "model", &mut man)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let policy = parse_policy(&a.policy)?;

    let acc = gc::eval::accuracy_of(&model, &data)?;
    let mut doc = json!({ "accuracy": acc, "samples": data.len() });
    let mut line = format!("accuracy {acc:.4}");

    if let Some(trigger_path) = &a.trigger {
        let trigger = read_trigger(&Some(trigger_path.clone()), data.input_chw(), &mut man)?;
        let target = need(a.target, "target")?;
        let asr = gc::eval::asr(&model, &data, &trigger, target, policy)?;
        doc["asr"] = json!(asr);
        doc["target"] = json!(target);
        line.push_str(&format!("  asr {asr:.4}"));
    } else if a.target.is_some() {
        return Err(user("--target needs --trigger (nothing to apply)"));
    }

    if a.victim.is_some() {
        let (victim, _) = read_model(&a.victim, "victim", &mut man)?;
        let cad = gc::eval::cad(&victim, &model, &data)?;
        doc["cad"] = json!(cad);
        doc["victim-accuracy"] = json!(gc::eval::accuracy_of(&victim, &data)?);
        line.push_str(&format!("  cad {cad:+.4}"));
    }

    if let Some(report) = &a.report {
        write_json(report, &doc)?;
        man.output("report", report)?;
    }
    man.results(doc);
    println!("{line}");
    let fallback = PathBuf::from("evaluate");
    man.write(manifest, a.report.as_deref().unwrap_or(&fallback))?;
    Ok(())
}

pub fn trials(mut a: TrialsArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "trials");
    let mut man = RunManifest::new("trials", root_seed);
    man.config(&a)?;
    let (victim, _) = read_model(&a.victim, "victim", &mut man)?;
    let (subnet, _) = read_model(&a.subnet, "subnet", &mut man)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let trigger = read_trigger(&a.trigger, data.input_chw(), &mut man)?;
    let (wiring, wiring_doc) =
        resolve_wiring(a.w_out, a.delta_b, &a.stats, a.gain, a.threshold, &mut man)?;
    let target = need(a.target, "target")?;
    let width = a.width.unwrap_or(1);
    let n = a.n.unwrap_or(10);
    let policy = parse_policy(&a.policy)?;
    let seed0 = a.seed.expect("filled");

    let summary = gc::eval::run_trials(n as u64, |k| {
        let spec =
            gc::select_subnet(victim.arch(), target, width, gc::SelectStrategy::Random, seed0 + k)?;
        let attacked = gc::replace_subnet(&victim, &spec, &subnet, wiring)?;
        Ok(gc::eval::TrialRow {
            trial: k,
            seed: seed0 + k,
            clean_acc: gc::eval::accuracy_of(&attacked, &data)?,
            asr: gc::eval::asr(&attacked, &data, &trigger, target, policy)?,
            cad: gc::eval::cad(&victim, &attacked, &data)?,
        })
    })?;

    if let Some(csv) = &a.out_csv {
        gc::eval::export_csv(csv, &summary.rows)?;
        man.output("csv", csv)?;
    }
    if let Some(jsonl) = &a.out_jsonl {
        gc::eval::export_jsonl(jsonl, &summary.rows)?;
        man.output("jsonl", jsonl)?;
    }
    if let Some(report) = &a.report {
        write_json(report, &summary)?;
        man.output("report", report)?;
    }
    man.results(json!({
        "trials": n,
        "median-asr": summary.median_asr,
        "median-cad": summary.median_cad,
        "wiring": wiring_doc,
    }));
    println!(
        "{n} trials: median asr {:.4}, median cad {:+.4}",
        summary.median_asr, summary.median_cad
    );
    let fallback = PathBuf::from("trials");
    let primary =
        a.out_csv.as_deref().or(a.report.as_deref()).unwrap_or(&fallback);
    man.write(manifest, primary)?;
    Ok(())
}

pub fn sweep(a: SweepArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("sweep", root_seed);
    man.config(&a)?;
    let (victim, _) = read_model(&a.victim, "victim", &mut man)?;
    let spec = read_spec(&a.spec, &mut man)?;
    let (subnet, _) = read_model(&a.subnet, "subnet", &mut man)?;
    let stats_path = need(a.stats.as_ref(), "stats")?;
    man.input("stats", stats_path)?;
    let stats: gc::ActivationStats = read_json(stats_path)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, a.limit, &mut man)?;
    let trigger = read_trigger(&a.trigger, data.input_chw(), &mut man)?;
    let policy = parse_policy(&a.policy)?;
    let gain = a.gain.unwrap_or(gc::trainer::DEFAULT_GAIN);
    let points = a.points.unwrap_or(9);

    let thresholds = gc::trainer::sweep_thresholds(&stats, points);
    let table =
        gc::calibration_sweep(&victim, &spec, &subnet, gain, &thresholds, &data, &trigger, policy)?;

    let out_csv = need(a.out_csv.as_ref(), "out-csv")?;
    let mut w = csv::Writer::from_path(out_csv).map_err(|e| user(format!("out-csv: {e}")))?;
    for p in &table {
        w.serialize(p).map_err(|e| user(format!("out-csv: {e}")))?;
    }
    w.flush().ctx("out-csv")?;
    man.output("csv", out_csv)?;
    if let Some(report) = &a.report {
        write_json(report, &table)?;
        man.output("report", report)?;
    }
    for p in &table {
        println!("threshold {:8.4}  asr {:.4}  cad {:+.4}", p.threshold, p.asr, p.cad);
    }
    man.results(json!({ "points": table.len(), "gain": gain }));
    man.write(manifest, out_csv)?;
    Ok(())
}

// ── inspection ──────────────────────────────────────────────────────────────

pub fn grad_probe(a: GradProbeArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    let mut man = RunManifest::new("grad-probe", root_seed);
    man.config(&a)?;
    let (attacked, _) = read_model(&a.attacked, "attacked", &mut man)?;
    let spec = read_spec(&a.spec, &mut man)?;
    let (subnet, _) = read_model(&a.subnet, "subnet", &mut man)?;
    let (wiring, wiring_doc) =
        resolve_wiring(a.w_out, a.delta_b, &a.stats, a.gain, a.threshold, &mut man)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, None, &mut man)?;
    let n = a.n.unwrap_or(64).min(data.len());
    if n == 0 {
        return Err(user("the dataset is empty"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = data.batch(&idx);
    let report = gc::defense::grad_ratio(&attacked, &spec, &subnet, wiring, &x)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
        man.output("report", path)?;
    }
    man.results(json!({
        "samples": n,
        "mean-ratio": report.mean_ratio,
        "median-ratio": report.median_ratio,
        "max-decomp-rel-err": report.max_decomp_rel_err,
        "wiring": wiring_doc,
    }));
    println!(
        "detector/host gradient ratio over {n} samples: mean {:.4}, median {:.4}",
        report.mean_ratio, report.median_ratio
    );
    let fallback = PathBuf::from("grad-probe");
    man.write(manifest, a.report.as_deref().unwrap_or(&fallback))?;
    Ok(())
}

pub fn reverse_trigger(
    mut a: ReverseTriggerArgs,
    root_seed: u64,
    manifest: Option<&Path>,
) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "reverse-trigger");
    let mut man = RunManifest::new("reverse-trigger", root_seed);
    man.config(&a)?;
    let (model, _) = read_model(&a.model, "model", &mut man)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, None, &mut man)?;
    let class = need(a.class, "class")?;
    let d = gc::defense::NcConfig::default();
    let cfg = gc::defense::NcConfig {
        iters: a.iters.unwrap_or(d.iters),
        lr: a.lr.unwrap_or(d.lr),
        l1_weight: a.l1_weight.unwrap_or(d.l1_weight),
        batch: a.batch.unwrap_or(d.batch),
        seed: a.seed.expect("filled"),
    };
    let restored = gc::defense::reverse_trigger(&model, &data, class, &cfg)?;
    if let Some(png) = &a.out_png {
        restored.save_png(png)?;
        man.output("png", png)?;
    }
    let doc = json!({
        "class": class,
        "l1": restored.l1,
        "flip-rate": restored.flip_rate,
        "final-loss": restored.trace.last(),
        "iters": cfg.iters,
    });
    if let Some(report) = &a.report {
        write_json(report, &doc)?;
        man.output("report", report)?;
    }
    man.results(doc);
    println!(
        "class {class}: mask l1 {:.2}, flip rate {:.4}",
        restored.l1, restored.flip_rate
    );
    let fallback = PathBuf::from("reverse-trigger");
    let primary = a.report.as_deref().or(a.out_png.as_deref()).unwrap_or(&fallback);
    man.write(manifest, primary)?;
    Ok(())
}

pub fn compare(mut a: CompareArgs, root_seed: u64, manifest: Option<&Path>) -> CliResult<()> {
    fill_seed(&mut a.seed, root_seed, "compare");
    let mut man = RunManifest::new("compare", root_seed);
    man.config(&a)?;
    let (clean, _) = read_model(&a.clean, "clean", &mut man)?;
    let (poisoned, _) = read_model(&a.poisoned, "poisoned", &mut man)?;
    let (grafted, _) = read_model(&a.grafted, "grafted", &mut man)?;
    let data = read_data(&a.images, &a.labels, &a.cifar, a.classes, None, &mut man)?;
    let class = need(a.class, "class")?;
    let runs = a.runs.unwrap_or(3);
    let d = gc::defense::NcConfig::default();
    let cfg = gc::defense::NcConfig {
        iters: a.iters.unwrap_or(d.iters),
        lr: a.lr.unwrap_or(d.lr),
        l1_weight: a.l1_weight.unwrap_or(d.l1_weight),
        batch: a.batch.unwrap_or(d.batch),
        seed: a.seed.expect("filled"),
    };
    let report = gc::defense::compare_models(&clean, &poisoned, &grafted, class, &data, &cfg, runs)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
        man.output("report", path)?;
    }
    man.results(json!({
        "l1-clean": report.l1_clean,
        "l1-dp": report.l1_dp,
        "l1-graft": report.l1_graft,
        "ratio-graft-dp": report.ratio_graft_dp,
        "cross-asr-clean-model": report.cross_asr_clean_model,
        "cross-asr-graft-model": report.cross_asr_graft_model,
    }));
    println!(
        "median mask l1 — clean {:.2}, poisoned {:.2}, grafted {:.2} (grafted/poisoned {:.2})",
        report.l1_clean, report.l1_dp, report.l1_graft, report.ratio_graft_dp
    );
    let fallback = PathBuf::from("compare");
    man.write(manifest, a.report.as_deref().unwrap_or(&fallback))?;
    Ok(())
}
