//! Exactness guarantees of the graft: the splice decomposition, byte-level
//! equivalence of the in-memory and on-file write paths, idempotence, and
//! budget accounting.

mod common;

use common::{isolation_check, random_model, random_subnet};
use graft_core::format::{self, Meta};
use graft_core::rng::stream;
use graft_core::{
    apply_patch, count_modified, emit_patch, multi_replace, named_arch, replace_subnet,
    select_subnet, select_subnets, surgery::Graft, SelectStrategy, Tensor, Wiring,
};
use rand::Rng as _;

fn random_inputs(arch: &graft_core::Arch, n: usize, seed: u64) -> Tensor<f32> {
    let (c, h, w) = arch.input;
    let mut rng = stream(seed, "inputs");
    let data = (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(&[n, c, h, w], data)
}

/// Non-target logits must be bit-identical between the attacked model and
/// the pruned host, and the target logit must carry exactly the wired
/// detector response — on every host architecture, including residual and
/// grouped-convolution topologies.
#[test]
fn splice_decomposition_is_exact_on_every_host() {
    for (i, name) in ["cnn-small", "vgg-toy", "resnet-toy", "dw-toy"].iter().enumerate() {
        let arch = named_arch(name).unwrap();
        let seed = 40 + i as u64;
        let victim = random_model(&arch, seed);
        let spec = select_subnet(&arch, 2, 1, SelectStrategy::Random, seed).unwrap();
        let subnet = random_subnet(&arch, &spec, seed);
        let wiring = Wiring { w_out: 7.5, delta_b: -3.25 };
        let x = random_inputs(&arch, 32, seed);

        let (worst, bit_exact) = isolation_check(&victim, &spec, &subnet, wiring, &x);
        assert!(bit_exact, "{name}: non-target logits differ");
        assert!(worst < 1e-4, "{name}: target delta off by {worst:.3e} relative");
    }
}

/// Overwrites are absolute: applying the same graft twice gives bitwise the
/// same parameters as applying it once.
#[test]
fn replacement_is_idempotent() {
    let arch = named_arch("resnet-toy").unwrap();
    let victim = random_model(&arch, 7);
    let spec = select_subnet(&arch, 0, 2, SelectStrategy::Random, 7).unwrap();
    let subnet = random_subnet(&arch, &spec, 7);
    let wiring = Wiring { w_out: 10.0, delta_b: -13.0 };

    let once = replace_subnet(&victim, &spec, &subnet, wiring).unwrap();
    let twice = replace_subnet(&once, &spec, &subnet, wiring).unwrap();
    for (a, b) in once.params.tensors().iter().zip(twice.params.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

/// The serialized write path is the in-memory write path: patching victim
/// bytes equals replacing then saving, byte for byte, checksum included.
#[test]
fn patch_file_equals_replace_then_save() {
    let arch = named_arch("vgg-toy").unwrap();
    let victim = random_model(&arch, 11);
    let spec = select_subnet(&arch, 4, 1, SelectStrategy::Random, 11).unwrap();
    let subnet = random_subnet(&arch, &spec, 11);
    let wiring = Wiring { w_out: 12.0, delta_b: -8.5 };
    let mut meta = Meta::new();
    meta.insert("origin".into(), "surgery-identity".into());

    let replaced = replace_subnet(&victim, &spec, &subnet, wiring).unwrap();
    let via_memory = format::model_to_bytes(replaced.arch(), &replaced.params, &meta).unwrap();

    let patch = emit_patch(&arch, &spec, &subnet, wiring).unwrap();
    let victim_bytes = format::model_to_bytes(victim.arch(), &victim.params, &meta).unwrap();
    let via_file = apply_patch(&victim_bytes, &patch).unwrap();

    assert_eq!(via_memory, via_file);
    format::verify_checksum(&via_file, format::parse_header(&via_file).unwrap().2).unwrap();
}

/// A patch emitted once converts two different victims of the same
/// architecture — its bytes never depend on victim values.
#[test]
fn one_patch_fits_all_instances() {
    let arch = named_arch("cnn-small").unwrap();
    let spec = select_subnet(&arch, 3, 1, SelectStrategy::Random, 13).unwrap();
    let subnet = random_subnet(&arch, &spec, 13);
    let wiring = Wiring { w_out: 9.0, delta_b: -4.0 };
    let patch = emit_patch(&arch, &spec, &subnet, wiring).unwrap();
    let again = emit_patch(&arch, &spec, &subnet, wiring).unwrap();
    assert_eq!(patch.to_bytes(), again.to_bytes(), "emission is not deterministic");

    for seed in [21u64, 22] {
        let victim = random_model(&arch, seed);
        let bytes = format::model_to_bytes(victim.arch(), &victim.params, &Meta::new()).unwrap();
        let patched = apply_patch(&bytes, &patch).unwrap();
        let (model, _) = format::model_from_bytes(&patched).unwrap();
        let direct = replace_subnet(&victim, &spec, &subnet, wiring).unwrap();
        for (a, b) in model.params.tensors().iter().zip(direct.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

/// The declared write budget is the observed one: `count_modified` equals
/// both the patch's entry count and the number of 4-byte words that actually
/// change on disk (random weights make accidental equality impossible in
/// practice).
#[test]
fn budget_matches_observed_diff() {
    for (i, (name, width)) in
        [("cnn-small", 1), ("cnn-small", 2), ("vgg-toy", 1), ("dw-toy", 2), ("mlp-tiny", 1)]
            .iter()
            .enumerate()
    {
        let arch = named_arch(name).unwrap();
        let seed = 60 + i as u64;
        let victim = random_model(&arch, seed);
        let spec = select_subnet(&arch, 1, *width, SelectStrategy::Random, seed).unwrap();
        let subnet = random_subnet(&arch, &spec, seed);
        let wiring = Wiring { w_out: 5.0, delta_b: -2.0 };

        let declared = count_modified(&arch, &spec).unwrap();
        let patch = emit_patch(&arch, &spec, &subnet, wiring).unwrap();
        assert_eq!(patch.entries.len(), declared, "{name} W={width}: entry count");

        let before = format::model_to_bytes(victim.arch(), &victim.params, &Meta::new()).unwrap();
        let after = apply_patch(&before, &patch).unwrap();
        let layout = format::parse_header(&before).unwrap().2;
        let observed = before[layout.param_start..layout.param_end()]
            .chunks_exact(4)
            .zip(after[layout.param_start..layout.param_end()].chunks_exact(4))
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(observed, declared, "{name} W={width}: on-disk diff");
    }
}

/// Several disjoint grafts in one host: applying them together equals
/// applying them one after another, and each target class carries its own
/// detector.
#[test]
fn multi_graft_equals_sequential_grafts() {
    let arch = named_arch("cnn-small").unwrap();
    let victim = random_model(&arch, 31);
    let specs = select_subnets(&arch, &[2, 7], 1, SelectStrategy::Random, 31).unwrap();
    let subnets: Vec<_> =
        specs.iter().enumerate().map(|(i, s)| random_subnet(&arch, s, 70 + i as u64)).collect();
    let wirings = [Wiring { w_out: 6.0, delta_b: -3.0 }, Wiring { w_out: 11.0, delta_b: -5.0 }];

    let grafts: Vec<Graft> = specs
        .iter()
        .zip(&subnets)
        .zip(&wirings)
        .map(|((spec, subnet), &wiring)| Graft { spec, subnet, wiring })
        .collect();
    let combined = multi_replace(&victim, &grafts).unwrap();

    let mut sequential = victim.clone();
    for g in &grafts {
        sequential = replace_subnet(&sequential, g.spec, g.subnet, g.wiring).unwrap();
    }
    for (a, b) in combined.params.tensors().iter().zip(sequential.params.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
