//! Analytic gradients versus a 64-bit central-difference oracle, across a
//! zoo of micro-architectures that together cover every layer kind.

mod common;

use common::{fd_instance, micro_archs};
use graft_core::Mode;

const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-6;

#[test]
fn every_layer_kind_matches_central_differences() {
    let mut failures = Vec::new();
    let mut worst32 = (0.0f64, "");
    let mut worst64 = (0.0f64, "");
    let mut instances = 0usize;

    for (name, arch) in micro_archs() {
        for seed in 0..3u64 {
            let out = fd_instance(&arch, 1000 + seed, Mode::Train, 6);
            instances += 1;
            assert!(out.coords > 0, "{name}: no coordinates checked");
            if out.max_rel_f32 > worst32.0 {
                worst32 = (out.max_rel_f32, name);
            }
            if out.max_rel_f64 > worst64.0 {
                worst64 = (out.max_rel_f64, name);
            }
            if out.max_rel_f32 >= TOL_F32 || out.max_rel_f64 >= TOL_F64 {
                failures.push(format!(
                    "{name} seed {seed}: rel32 {:.3e} rel64 {:.3e}",
                    out.max_rel_f32, out.max_rel_f64
                ));
            }
        }
    }

    println!(
        "checked {instances} training-mode instances; worst 32-bit rel err {:.3e} ({}), \
         worst 64-bit rel err {:.3e} ({})",
        worst32.0, worst32.1, worst64.0, worst64.1
    );
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}

#[test]
fn batchnorm_inference_mode_matches_central_differences() {
    // In inference mode normalization uses the stored running statistics;
    // scale/shift gradients flow through that frozen path instead of the
    // batch-statistics path, which is a genuinely different backward rule.
    let arch = micro_archs()
        .into_iter()
        .find(|(name, _)| *name == "batchnorm-conv")
        .map(|(_, a)| a)
        .expect("zoo has a batch-norm entry");

    for seed in 0..3u64 {
        let out = fd_instance(&arch, 2000 + seed, Mode::Eval, 6);
        println!(
            "inference-mode instance {seed}: rel32 {:.3e} rel64 {:.3e} over {} coords",
            out.max_rel_f32, out.max_rel_f64, out.coords
        );
        assert!(out.max_rel_f32 < TOL_F32, "32-bit rel err {:.3e}", out.max_rel_f32);
        assert!(out.max_rel_f64 < TOL_F64, "64-bit rel err {:.3e}", out.max_rel_f64);
    }
}

#[test]
fn full_hosts_match_central_differences() {
    // The named hosts are too large for exhaustive differencing, but sampled
    // coordinates on the real topologies catch wiring mistakes (shape
    // bookkeeping, residual routing, grouped-conv offsets) that micro nets
    // can miss.
    for name in ["resnet-toy", "dw-toy"] {
        let arch = graft_core::named_arch(name).expect("named arch");
        let out = fd_instance(&arch, 77, Mode::Train, 2);
        println!(
            "{name}: rel32 {:.3e} rel64 {:.3e} over {} coords",
            out.max_rel_f32, out.max_rel_f64, out.coords
        );
        assert!(out.max_rel_f32 < TOL_F32, "{name}: 32-bit rel err {:.3e}", out.max_rel_f32);
        assert!(out.max_rel_f64 < TOL_F64, "{name}: 64-bit rel err {:.3e}", out.max_rel_f64);
    }
}
