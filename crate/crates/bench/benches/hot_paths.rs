//! Hot paths of the workbench: network forward/backward, graft patch
//! emission and byte application, trigger stamping, and warp-bank building.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use graft_core::format::{save_model, Meta};
use graft_core::rng::stream;
use graft_core::trainer::make_bank;
use graft_core::trigger::DEFAULT_BANK_ANGLES;
use graft_core::{
    apply_patch, derive_subnet_arch, emit_patch, eval, named_arch, select_subnet, Mode, Model,
    ParamSet, Patch, SelectStrategy, Split, Tensor, Trigger, Wiring, Wrt,
};

fn model(name: &str, seed: u64) -> Model {
    let arch = named_arch(name).expect("arch");
    let mut rng = stream(seed, "bench-model");
    let params = ParamSet::random_uniform(&arch, &mut rng, -0.5, 0.5);
    Model::new(arch, params).expect("model")
}

fn batch(n: usize) -> Tensor<f32> {
    let data = eval::synth_gray(n, 1, Split::Test);
    data.batch(&(0..n).collect::<Vec<_>>()).0
}

fn forward(c: &mut Criterion) {
    let m = model("cnn-small", 1);
    let x = batch(32);
    c.bench_function("forward cnn-small ×32", |b| {
        b.iter(|| m.logits(black_box(&x)).expect("logits"))
    });
}

fn backward(c: &mut Criterion) {
    let m = model("cnn-small", 1);
    let x = batch(32);
    let classes = 10;
    let dl = Tensor::from_vec(&[32, classes], vec![1.0f32; 32 * classes]);
    c.bench_function("forward+backward cnn-small ×32", |b| {
        b.iter(|| {
            let pass = m.forward(black_box(&x), Mode::Train).expect("forward");
            m.backward(&pass, dl.clone(), Wrt::All).expect("backward")
        })
    });
}

fn patching(c: &mut Criterion) {
    let victim = model("cnn-small", 2);
    let arch = victim.arch().clone();
    let spec = select_subnet(&arch, 1, 1, SelectStrategy::Random, 5).expect("spec");
    let narrow = derive_subnet_arch(&arch, &spec).expect("narrow");
    let mut rng = stream(3, "bench-model");
    let det = Model::new(narrow.clone(), ParamSet::random_uniform(&narrow, &mut rng, -0.5, 0.5))
        .expect("detector");
    let wiring = Wiring { w_out: 2.0, delta_b: -1.0 };

    c.bench_function("emit patch cnn-small", |b| {
        b.iter(|| emit_patch(black_box(&arch), &spec, &det, wiring).expect("emit"))
    });

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("victim.gmdl");
    save_model(&path, &victim, &Meta::new()).expect("save");
    let bytes = std::fs::read(&path).expect("read");
    let patch = emit_patch(&arch, &spec, &det, wiring).expect("emit");
    c.bench_function("apply patch to bytes", |b| {
        b.iter(|| apply_patch(black_box(&bytes), &patch).expect("apply"))
    });
}

fn triggers(c: &mut Criterion) {
    let x = batch(64);
    let trig = Trigger::patch_bottom_right(Patch::checker(1, 8), (1, 28, 28)).expect("trigger");
    c.bench_function("stamp patch trigger ×64", |b| {
        b.iter(|| trig.apply_batch(black_box(&x)).expect("stamp"))
    });

    let deep = Trigger::patch_bottom_right(Patch::checker(1, 10), (1, 28, 28)).expect("trigger");
    c.bench_function("build 125-variant warp bank", |b| {
        b.iter(|| make_bank(black_box(&deep), &DEFAULT_BANK_ANGLES).expect("bank"))
    });
}

criterion_group!(benches, forward, backward, patching, triggers);
criterion_main!(benches);
