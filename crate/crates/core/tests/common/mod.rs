#![allow(dead_code)]
//! Shared helpers for the integration-test targets: a central-difference
//! gradient oracle, a zoo of micro-architectures covering every layer kind,
//! and small model/fixture builders.

use graft_core::net::{backward_pass, forward_pass};
use graft_core::rng::stream;
use graft_core::tensor::Scalar;
use graft_core::{
    replace_subnet, Arch, ArchInfo, Layer, Mode, Model, ParamName, ParamSet, SubnetSpec, Tensor,
    Wiring, Wrt,
};
use rand::Rng as _;

// ── micro-architecture zoo ──────────────────────────────────────────────────

/// Small networks that collectively exercise every layer kind: dense chains,
/// padded / strided / grouped convolutions, batch norm, both pool kinds,
/// flatten, and a residual connection.
pub fn micro_archs() -> Vec<(&'static str, Arch)> {
    use Layer::*;
    vec![
        (
            "dense-chain",
            Arch::new(
                (3, 1, 1),
                vec![Flatten, Dense { in_f: 3, out_f: 5 }, Relu, Dense { in_f: 5, out_f: 3 }],
            ),
        ),
        (
            "dense-deep",
            Arch::new(
                (4, 1, 1),
                vec![
                    Flatten,
                    Dense { in_f: 4, out_f: 6 },
                    Relu,
                    Dense { in_f: 6, out_f: 6 },
                    Relu,
                    Dense { in_f: 6, out_f: 2 },
                ],
            ),
        ),
        (
            "conv-pad",
            Arch::new(
                (2, 5, 5),
                vec![
                    Conv2d { in_c: 2, out_c: 3, k: 3, stride: 1, pad: 1, groups: 1 },
                    Relu,
                    Flatten,
                    Dense { in_f: 75, out_f: 3 },
                ],
            ),
        ),
        (
            "conv-stride",
            Arch::new(
                (2, 5, 5),
                vec![
                    Conv2d { in_c: 2, out_c: 3, k: 3, stride: 2, pad: 0, groups: 1 },
                    Relu,
                    Flatten,
                    Dense { in_f: 12, out_f: 3 },
                ],
            ),
        ),
        (
            "conv-grouped",
            Arch::new(
                (4, 4, 4),
                vec![
                    Conv2d { in_c: 4, out_c: 4, k: 3, stride: 1, pad: 1, groups: 2 },
                    Relu,
                    Flatten,
                    Dense { in_f: 64, out_f: 3 },
                ],
            ),
        ),
        (
            "batchnorm-conv",
            Arch::new(
                (2, 4, 4),
                vec![
                    Conv2d { in_c: 2, out_c: 3, k: 3, stride: 1, pad: 1, groups: 1 },
                    BatchNorm { c: 3 },
                    Relu,
                    Flatten,
                    Dense { in_f: 48, out_f: 3 },
                ],
            ),
        ),
        (
            "maxpool",
            Arch::new(
                (1, 4, 4),
                vec![
                    Conv2d { in_c: 1, out_c: 2, k: 3, stride: 1, pad: 1, groups: 1 },
                    Relu,
                    MaxPool { k: 2, stride: 2 },
                    Flatten,
                    Dense { in_f: 8, out_f: 3 },
                ],
            ),
        ),
        (
            "avgpool",
            Arch::new(
                (1, 4, 4),
                vec![
                    Conv2d { in_c: 1, out_c: 2, k: 3, stride: 1, pad: 1, groups: 1 },
                    Relu,
                    AvgPool { k: 2, stride: 2 },
                    Flatten,
                    Dense { in_f: 8, out_f: 3 },
                ],
            ),
        ),
        (
            "residual",
            Arch::new(
                (2, 4, 4),
                vec![
                    Conv2d { in_c: 2, out_c: 4, k: 3, stride: 1, pad: 1, groups: 1 },
                    Relu,
                    Conv2d { in_c: 4, out_c: 4, k: 3, stride: 1, pad: 1, groups: 1 },
                    ResidualAdd { from: 1 },
                    Relu,
                    Flatten,
                    Dense { in_f: 64, out_f: 3 },
                ],
            ),
        ),
    ]
}

// ── central-difference gradient oracle ──────────────────────────────────────

/// Step size for the 64-bit central differences. Small enough that the
/// truncation error sits far below the tolerances, large enough that
/// cancellation noise does too.
const FD_H: f64 = 1e-5;

/// Coordinates whose gradient is far below the tensor's gradient scale — or
/// structurally zero, like a convolution bias that batch normalization
/// cancels exactly — are measured against a floor instead of their own
/// magnitude; down there the difference quotient itself is noise-limited and
/// a plain ratio would amplify rounding dust into spurious failures. The
/// floor combines a per-tensor fraction with an absolute noise allowance.
const FLOOR_FRAC_F32: f64 = 1e-2;
const FLOOR_FRAC_F64: f64 = 1e-3;
const FLOOR_ABS_F32: f64 = 1e-2;
const FLOOR_ABS_F64: f64 = 3e-3;

/// Two difference quotients at step sizes `h` and `h/4` must agree this
/// closely for a coordinate to count; where they disagree, the perturbation
/// straddles a rectifier or pool-argmax kink and differencing is meaningless,
/// so the coordinate is skipped (the skip fraction is bounded separately).
const FD_AGREE: f64 = 1e-4;

/// Worst relative errors of one randomized instance, split by precision of
/// the engine under test. The oracle is always 64-bit central differencing.
#[derive(Debug, Clone, Copy)]
pub struct FdOutcome {
    pub max_rel_f32: f64,
    pub max_rel_f64: f64,
    pub coords: usize,
    pub skipped: usize,
}

fn loss_f64(
    arch: &Arch,
    info: &ArchInfo,
    params: &[Tensor<f64>],
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    mode: Mode,
) -> f64 {
    let pass = forward_pass::<f64>(arch, info, params, x, mode).expect("oracle forward");
    pass.logits().data.iter().zip(&r.data).map(|(l, c)| l * c).sum()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor).max(1e-12)
}

/// One validated difference quotient: estimates at `h` and `h/4` must agree
/// (no kink inside the stencil), and the tighter `h/4` estimate is returned.
fn quotient(mut eval: impl FnMut(f64) -> f64, orig: f64, floor: f64) -> Option<f64> {
    let g1 = (eval(orig + FD_H) - eval(orig - FD_H)) / (2.0 * FD_H);
    let h2 = FD_H / 4.0;
    let g2 = (eval(orig + h2) - eval(orig - h2)) / (2.0 * h2);
    if rel_err(g1, g2, floor) < FD_AGREE {
        Some(g2)
    } else {
        None
    }
}

/// Check one randomized instance of `arch` against 64-bit central
/// differences: every parameter tensor and the input each contribute up to
/// `per_tensor` sampled coordinates. Returns the worst relative error of the
/// 32-bit and 64-bit analytic gradients against the oracle.
///
/// Running batch statistics are treated as frozen buffers, not trainable
/// parameters, so their coordinates are skipped in inference mode (where the
/// loss does depend on them but the engine deliberately reports no gradient).
pub fn fd_instance(arch: &Arch, seed: u64, mode: Mode, per_tensor: usize) -> FdOutcome {
    let info = arch.infer().expect("arch infers");
    let n = 2usize;
    let (ic, ih, iw) = arch.input;

    let mut rng = stream(seed, "fd-instance");
    let params32 = ParamSet::random_uniform(arch, &mut rng, -0.8, 0.8);
    let x_data: Vec<f32> = (0..n * ic * ih * iw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x32 = Tensor::from_vec(&[n, ic, ih, iw], x_data);
    let classes = info.topo.classes;
    let r_data: Vec<f32> = (0..n * classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r32 = Tensor::from_vec(&[n, classes], r_data);

    let mut params64: Vec<Tensor<f64>> = params32.cast();
    let x64: Tensor<f64> = x32.cast();
    let r64: Tensor<f64> = r32.cast();

    // Analytic gradients from both engines.
    let pass32 =
        forward_pass::<f32>(arch, &info, params32.tensors(), &x32, mode).expect("f32 forward");
    let (g32, dx32) = backward_pass::<f32>(arch, params32.tensors(), &pass32, r32.clone(), Wrt::All)
        .expect("f32 backward");
    let pass64 = forward_pass::<f64>(arch, &info, &params64, &x64, mode).expect("f64 forward");
    let (g64, dx64) = backward_pass::<f64>(arch, &params64, &pass64, r64.clone(), Wrt::All)
        .expect("f64 backward");

    let mut out = FdOutcome { max_rel_f32: 0.0, max_rel_f64: 0.0, coords: 0, skipped: 0 };
    let mut record = |a32: f32, a64: f64, g_fd: Option<f64>, scale: f64| match g_fd {
        Some(g_fd) => {
            let floor32 = (FLOOR_FRAC_F32 * scale).max(FLOOR_ABS_F32);
            let floor64 = (FLOOR_FRAC_F64 * scale).max(FLOOR_ABS_F64);
            out.max_rel_f32 = out.max_rel_f32.max(rel_err(a32.to_f64(), g_fd, floor32));
            out.max_rel_f64 = out.max_rel_f64.max(rel_err(a64, g_fd, floor64));
            out.coords += 1;
        }
        None => out.skipped += 1,
    };
    let mut rng = stream(seed, "fd-coords");

    // Parameter coordinates.
    let ids: Vec<_> = params32.ids().to_vec();
    for (ti, id) in ids.iter().enumerate() {
        if mode == Mode::Eval && matches!(id.name, ParamName::BnMean | ParamName::BnVar) {
            continue;
        }
        let len = params64[ti].len();
        let k = per_tensor.min(len);
        let picks = rand::seq::index::sample(&mut rng, len, k);
        let scale = g64.tensors[ti].data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ci in picks {
            let orig = params64[ti].data[ci];
            let g_fd = quotient(
                |v| {
                    params64[ti].data[ci] = v;
                    let l = loss_f64(arch, &info, &params64, &x64, &r64, mode);
                    params64[ti].data[ci] = orig;
                    l
                },
                orig,
                (FLOOR_FRAC_F64 * scale).max(FLOOR_ABS_F64),
            );
            record(g32.tensors[ti].data[ci], g64.tensors[ti].data[ci], g_fd, scale);
        }
    }

    // Input coordinates.
    let mut x_pert = x64.clone();
    let k = per_tensor.min(x_pert.len());
    let picks = rand::seq::index::sample(&mut rng, x_pert.len(), k);
    let scale = dx64.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for ci in picks {
        let orig = x_pert.data[ci];
        let g_fd = quotient(
            |v| {
                x_pert.data[ci] = v;
                let l = loss_f64(arch, &info, &params64, &x_pert, &r64, mode);
                x_pert.data[ci] = orig;
                l
            },
            orig,
            (FLOOR_FRAC_F64 * scale).max(FLOOR_ABS_F64),
        );
        record(dx32.data[ci], dx64.data[ci], g_fd, scale);
    }

    assert!(
        out.skipped * 5 <= (out.coords + out.skipped).max(1),
        "{} of {} coordinates sat on kinks — instance unusable",
        out.skipped,
        out.coords + out.skipped
    );
    out
}

// ── model and graft builders ────────────────────────────────────────────────

/// A model of `arch` with all-distinct continuous random weights — the
/// standard stand-in for "some instance of this architecture".
pub fn random_model(arch: &Arch, seed: u64) -> Model {
    let params = ParamSet::random_uniform(arch, &mut stream(seed, "victim-params"), -0.5, 0.5);
    Model::new(arch.clone(), params).expect("random model")
}

/// A random narrow model filling `spec`'s slot.
pub fn random_subnet(arch: &Arch, spec: &SubnetSpec, seed: u64) -> Model {
    let narrow = graft_core::derive_subnet_arch(arch, spec).expect("narrow arch");
    let params = ParamSet::random_uniform(&narrow, &mut stream(seed, "subnet-params"), -0.5, 0.5);
    Model::new(narrow, params).expect("random subnet")
}

/// Verify the splice decomposition on a batch: non-target logits of the
/// attacked model must match the pruned host bit-for-bit, and the target
/// logit must differ from it by exactly the wired detector response,
/// `w_out·s(x) + Δb`, up to `tol` relative error.
///
/// Returns (worst relative target-delta error, true when every non-target
/// logit was bit-identical).
pub fn isolation_check(
    victim: &Model,
    spec: &SubnetSpec,
    subnet: &Model,
    wiring: Wiring,
    x: &Tensor<f32>,
) -> (f64, bool) {
    let attacked = replace_subnet(victim, spec, subnet, wiring).expect("replace");
    let pruned = replace_subnet(victim, spec, subnet, Wiring::OFF).expect("prune");

    let la = attacked.logits(x).expect("attacked logits");
    let lp = pruned.logits(x).expect("pruned logits");
    let s = subnet.logits(x).expect("subnet response");

    let n = x.shape[0];
    let classes = la.shape[1];
    let mut bit_exact = true;
    let mut worst = 0.0f64;
    for i in 0..n {
        for c in 0..classes {
            let a = la.data[i * classes + c];
            let p = lp.data[i * classes + c];
            if c == spec.target {
                let want = (wiring.w_out as f64) * (s.data[i] as f64) + wiring.delta_b as f64;
                let got = a as f64 - p as f64;
                worst = worst.max(rel_err(got, want, 1e-3));
            } else if a.to_bits() != p.to_bits() {
                bit_exact = false;
            }
        }
    }
    (worst, bit_exact)
}
