//! End-to-end test of the `graft` binary: a miniature attack pipeline in a
//! temp directory, exercising every subcommand plus the config-file layer,
//! manifests, determinism, and exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

struct Cli {
    dir: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_graft"))
            .args(args)
            .current_dir(&self.dir)
            .output()
            .expect("binary runs")
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "`graft {}` failed\nstdout: {}\nstderr: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    fn fail(&self, args: &[&str], code: i32) -> String {
        let out = self.run(args);
        assert_eq!(
            out.status.code(),
            Some(code),
            "`graft {}` expected exit {code}\nstdout: {}\nstderr: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
    }

    fn json(&self, name: &str) -> serde_json::Value {
        serde_json::from_slice(&self.read(name)).unwrap_or_else(|e| panic!("parse {name}: {e}"))
    }
}

fn manifest_of(cli: &Cli, primary: &str) -> serde_json::Value {
    cli.json(&format!("{primary}.manifest.json"))
}

#[test]
fn pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cli = Cli { dir: tmp.path().to_path_buf() };

    // data
    cli.ok(&[
        "gen-data", "--kind", "gray", "--n", "260", "--seed", "7", "--split", "train",
        "--out-images", "tr-im.idx", "--out-labels", "tr-lb.idx",
    ]);
    cli.ok(&[
        "gen-data", "--kind", "gray", "--n", "80", "--seed", "7", "--split", "test",
        "--out-images", "te-im.idx", "--out-labels", "te-lb.idx",
    ]);
    let man = manifest_of(&cli, "tr-im.idx");
    assert_eq!(man["schema"], "graft-run/1");
    assert_eq!(man["task"], "gen-data");
    assert!(man["outputs"]["images"]["sha256"].as_str().unwrap().len() == 64);

    // same seed → identical bytes; different root seed (seed unset) → different
    cli.ok(&[
        "gen-data", "--kind", "gray", "--n", "260", "--seed", "7", "--split", "train",
        "--out-images", "tr-im2.idx", "--out-labels", "tr-lb2.idx",
    ]);
    assert_eq!(cli.read("tr-im.idx"), cli.read("tr-im2.idx"));
    cli.ok(&[
        "--root-seed", "1", "gen-data", "--kind", "gray", "--n", "260",
        "--out-images", "rs1.idx", "--out-labels", "rs1-lb.idx",
    ]);
    cli.ok(&[
        "--root-seed", "2", "gen-data", "--kind", "gray", "--n", "260",
        "--out-images", "rs2.idx", "--out-labels", "rs2-lb.idx",
    ]);
    assert_ne!(cli.read("rs1.idx"), cli.read("rs2.idx"));

    // structure
    cli.ok(&[
        "select", "--arch", "cnn-small", "--target", "1", "--width", "1", "--seed", "5",
        "--out", "spec.txt",
    ]);
    cli.ok(&["graph", "--arch", "cnn-small", "--spec", "spec.txt", "--out", "graph.json"]);
    let g = cli.json("graph.json");
    assert!(!g["widths"].as_array().unwrap().is_empty());
    assert!(g["budget"]["total"].as_u64().unwrap() > 0);

    // trigger description + rendered patch
    std::fs::write(
        cli.path("trigger.toml"),
        "kind = \"patch\"\nsource = \"checker\"\nk = 6\n",
    )
    .unwrap();
    cli.ok(&["gen-trigger", "--source", "checker", "--k", "6", "--out", "patch.png"]);
    assert!(cli.path("patch.png").exists());

    // victim + detector
    cli.ok(&[
        "train-victim", "--arch", "cnn-small", "--images", "tr-im.idx", "--labels", "tr-lb.idx",
        "--epochs", "1", "--seed", "3", "--out", "victim.gmdl",
    ]);
    let man = manifest_of(&cli, "victim.gmdl");
    assert_eq!(man["task"], "train-victim");
    assert!(man["inputs"]["images"]["sha256"].is_string());
    assert!(man["results"]["train-accuracy"].as_f64().unwrap() > 0.0);

    cli.ok(&[
        "train-subnet", "--arch", "cnn-small", "--spec", "spec.txt",
        "--images", "tr-im.idx", "--labels", "tr-lb.idx", "--limit", "200",
        "--trigger", "trigger.toml", "--epochs", "2", "--restarts", "1", "--batch", "50",
        "--seed", "9", "--out", "det.gmdl", "--stats", "stats.json",
    ]);
    let stats = cli.json("stats.json");
    assert!(!stats["clean"].as_array().unwrap().is_empty());
    assert!(!stats["triggered"].as_array().unwrap().is_empty());

    // graft in memory vs serialized patch: byte-identical results
    cli.ok(&[
        "replace", "--victim", "victim.gmdl", "--spec", "spec.txt", "--subnet", "det.gmdl",
        "--w-out", "2", "--delta-b", "-1", "--out", "attacked-a.gmdl",
    ]);
    cli.ok(&[
        "emit-patch", "--arch", "cnn-small", "--spec", "spec.txt", "--subnet", "det.gmdl",
        "--w-out", "2", "--delta-b", "-1", "--out", "graft.gpatch",
    ]);
    cli.ok(&[
        "apply-patch", "--model", "victim.gmdl", "--patch", "graft.gpatch",
        "--out", "attacked-b.gmdl",
    ]);
    assert_eq!(cli.read("attacked-a.gmdl"), cli.read("attacked-b.gmdl"), "replace vs patch");

    // emit-patch from measured stats (auto threshold), deterministic rerun
    cli.ok(&[
        "emit-patch", "--arch", "cnn-small", "--spec", "spec.txt", "--subnet", "det.gmdl",
        "--stats", "stats.json", "--gain", "2", "--out", "cal.gpatch",
    ]);
    let first_patch = cli.read("cal.gpatch");
    let first_manifest = cli.read("cal.gpatch.manifest.json");
    cli.ok(&[
        "emit-patch", "--arch", "cnn-small", "--spec", "spec.txt", "--subnet", "det.gmdl",
        "--stats", "stats.json", "--gain", "2", "--out", "cal.gpatch",
    ]);
    assert_eq!(first_patch, cli.read("cal.gpatch"), "patch not deterministic");
    assert_eq!(first_manifest, cli.read("cal.gpatch.manifest.json"), "manifest not deterministic");

    // evaluate
    cli.ok(&[
        "evaluate", "--model", "attacked-a.gmdl", "--victim", "victim.gmdl",
        "--images", "te-im.idx", "--labels", "te-lb.idx",
        "--trigger", "trigger.toml", "--target", "1", "--report", "eval.json",
    ]);
    let ev = cli.json("eval.json");
    assert!(ev["accuracy"].as_f64().is_some());
    assert!(ev["asr"].as_f64().is_some());
    assert!(ev["cad"].as_f64().is_some());

    // trials
    cli.ok(&[
        "trials", "--victim", "victim.gmdl", "--subnet", "det.gmdl",
        "--w-out", "2", "--delta-b", "-1", "--width", "1", "--target", "1", "--n", "2",
        "--seed", "100", "--images", "te-im.idx", "--labels", "te-lb.idx",
        "--trigger", "trigger.toml", "--out-csv", "trials.csv", "--report", "trials.json",
    ]);
    let csv = String::from_utf8(cli.read("trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + 2 rows: {csv}");
    let tr = cli.json("trials.json");
    assert_eq!(tr["rows"].as_array().unwrap().len(), 2);

    // sweep
    cli.ok(&[
        "sweep", "--victim", "victim.gmdl", "--spec", "spec.txt", "--subnet", "det.gmdl",
        "--stats", "stats.json", "--gain", "2", "--points", "3",
        "--images", "te-im.idx", "--labels", "te-lb.idx", "--trigger", "trigger.toml",
        "--out-csv", "sweep.csv", "--report", "sweep.json",
    ]);
    let csv = String::from_utf8(cli.read("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header + 3 rows: {csv}");
    assert_eq!(cli.json("sweep.json").as_array().unwrap().len(), 3);

    // gradient probe: the two-part split must reconstruct the true gradient
    cli.ok(&[
        "grad-probe", "--attacked", "attacked-a.gmdl", "--spec", "spec.txt",
        "--subnet", "det.gmdl", "--w-out", "2", "--delta-b", "-1",
        "--images", "te-im.idx", "--labels", "te-lb.idx", "--n", "4",
        "--report", "grad.json",
    ]);
    let gp = cli.json("grad.json");
    assert!(gp["max_decomp_rel_err"].as_f64().unwrap() < 1e-3);
    assert_eq!(gp["ratios"].as_array().unwrap().len(), 4);

    // trigger reconstruction + three-model contrast (tiny budgets)
    cli.ok(&[
        "reverse-trigger", "--model", "attacked-a.gmdl", "--class", "1",
        "--images", "te-im.idx", "--labels", "te-lb.idx",
        "--iters", "2", "--batch", "4", "--seed", "1",
        "--out-png", "restored.png", "--report", "restored.json",
    ]);
    assert!(cli.path("restored.png").exists());
    assert!(cli.json("restored.json")["l1"].as_f64().unwrap() >= 0.0);

    cli.ok(&[
        "compare", "--clean", "victim.gmdl", "--poisoned", "victim.gmdl",
        "--grafted", "attacked-a.gmdl", "--class", "1",
        "--images", "te-im.idx", "--labels", "te-lb.idx",
        "--runs", "1", "--iters", "2", "--batch", "4", "--seed", "1",
        "--report", "compare.json",
    ]);
    assert!(cli.json("compare.json")["ratio_graft_dp"].as_f64().is_some());

    // config file: flags come from the [evaluate] table; flag overrides file
    std::fs::write(
        cli.path("run.toml"),
        r#"
schema = "graft-config/1"
root-seed = 7

[evaluate]
model = "attacked-a.gmdl"
images = "te-im.idx"
labels = "te-lb.idx"
report = "eval2.json"
"#,
    )
    .unwrap();
    cli.ok(&["--config", "run.toml", "evaluate"]);
    assert!(cli.json("eval2.json")["accuracy"].as_f64().is_some());
    cli.ok(&["--config", "run.toml", "evaluate", "--report", "eval3.json"]);
    assert!(cli.path("eval3.json").exists());

    // unknown config keys are rejected
    std::fs::write(cli.path("bad.toml"), "[evaluate]\nmodle = \"x\"\n").unwrap();
    let err = cli.fail(&["--config", "bad.toml", "evaluate"], 1);
    assert!(err.contains("evaluate"), "stderr: {err}");

    // exit codes: missing input file → 1; bad flag → 1; help → 0
    let err = cli.fail(
        &["evaluate", "--model", "nope.gmdl", "--images", "te-im.idx", "--labels", "te-lb.idx"],
        1,
    );
    assert!(err.contains("error"), "stderr: {err}");
    cli.fail(&["evaluate", "--nope"], 1);
    let out = cli.run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}
