//! Gradient-check cases shared by the gradient tests and the acceptance run.

use fourplane_core::codec::{random_clip, AutoEncoder, CodecConfig, LatentKind};
use fourplane_core::factorization::{
    factorize_var, recompose_var, CombineKind, PlaneReducer, ReduceTag, SpatialPlaneMode,
};
use fourplane_core::{NdTensor, Tape, Var};
use rand::Rng;

use super::refops::{gelu, silu, D};
use super::{check_gradients, forward_gap, reference, rng, GradReport, FD_STEP, FLOOR_FRACTION};

pub type Forward = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;
pub type Reference = Box<dyn Fn(&[D]) -> D>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<NdTensor>,
    pub f: Forward,
    /// f64 version of `f`, written independently of the tape.
    pub reference: Reference,
}

fn case(
    name: &'static str,
    inputs: Vec<NdTensor>,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static,
    reference: impl Fn(&[D]) -> D + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
        reference: Box::new(reference),
    }
}

fn sq(x: D) -> D {
    x.map(|v| v * v)
}

pub fn randn(shape: &[usize], seed: u64) -> NdTensor {
    NdTensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// One case per differentiable primitive, with broadcasting and strided variants.
pub fn primitive_cases() -> Vec<Case> {
    let a = randn(&[3, 4, 5], 1);
    let b = randn(&[4, 5], 2);
    let c = randn(&[3, 1, 5], 3);
    let x = randn(&[4, 7], 8);
    let s = randn(&[2, 3, 4], 11);
    let k = randn(&[3, 3, 3, 2, 3], 17).map(|v| 0.3 * v);
    vec![
        case(
            "add",
            vec![a.clone(), b.clone()],
            |_, v| v[0].add(v[1]).unwrap(),
            |x| x[0].zip(&x[1], |a, b| a + b),
        ),
        case(
            "sub",
            vec![a.clone(), c.clone()],
            |_, v| v[0].sub(v[1]).unwrap(),
            |x| x[0].zip(&x[1], |a, b| a - b),
        ),
        case(
            "mul",
            vec![a.clone(), c.clone()],
            |_, v| v[0].mul(v[1]).unwrap(),
            |x| x[0].zip(&x[1], |a, b| a * b),
        ),
        case(
            "mul-swapped",
            vec![b, a.clone()],
            |_, v| v[0].mul(v[1]).unwrap(),
            |x| x[0].zip(&x[1], |a, b| a * b),
        ),
        case(
            "scale-offset-square",
            vec![a],
            |_, v| v[0].scale(-1.7).offset(0.3).square(),
            |x| x[0].map(|v| (-1.7 * v + 0.3).powi(2)),
        ),
        case(
            "neg",
            vec![c],
            |_, v| v[0].neg().square(),
            |x| x[0].map(|v| v * v),
        ),
        case(
            "matmul",
            vec![randn(&[2, 3, 4], 4), randn(&[4, 6], 5)],
            |_, v| v[0].matmul(v[1]).unwrap(),
            |x| x[0].matmul(&x[1]),
        ),
        case(
            "bmm",
            vec![randn(&[2, 3, 4], 6), randn(&[2, 4, 5], 7)],
            |_, v| v[0].bmm(v[1]).unwrap(),
            |x| x[0].matmul(&x[1]),
        ),
        case(
            "softmax",
            vec![x.clone()],
            |_, v| v[0].softmax(),
            |x| x[0].softmax(),
        ),
        case(
            "layer_norm",
            vec![x.clone(), randn(&[7], 9), randn(&[7], 10)],
            |_, v| v[0].layer_norm(1e-5).mul(v[1]).unwrap().add(v[2]).unwrap(),
            |x| {
                x[0].layer_norm(1e-5)
                    .zip(&x[1], |a, b| a * b)
                    .zip(&x[2], |a, b| a + b)
            },
        ),
        case(
            "l2_normalize",
            vec![x],
            |_, v| v[0].l2_normalize(1e-6),
            |x| x[0].l2_normalize(1e-6),
        ),
        case(
            "concat",
            vec![s.clone(), randn(&[2, 2, 4], 12)],
            |_, v| Var::concat(&[v[0], v[1]], 1).unwrap().square(),
            |x| sq(D::concat(&[&x[0], &x[1]], 1)),
        ),
        case(
            "slice",
            vec![s.clone()],
            |_, v| v[0].slice(2, 1, 2).unwrap().square(),
            |x| sq(x[0].slice(2, 1, 2)),
        ),
        case(
            "permute",
            vec![s.clone()],
            |_, v| v[0].permute(&[2, 0, 1]).unwrap().square(),
            |x| sq(x[0].permute(&[2, 0, 1])),
        ),
        case(
            "reshape",
            vec![s.clone()],
            |_, v| v[0].reshape(&[6, 4]).unwrap().square(),
            |x| sq(x[0].reshape(&[6, 4])),
        ),
        case(
            "upsample",
            vec![randn(&[2, 2, 3, 2], 13)],
            |_, v| v[0].upsample_nearest(&[2, 2, 2, 1]).unwrap().square(),
            |x| sq(x[0].upsample(&[2, 2, 2, 1])),
        ),
        case(
            "mean_axis",
            vec![s.clone()],
            |_, v| v[0].mean_axis(1, false).unwrap().square(),
            |x| sq(x[0].mean_axis(1, false)),
        ),
        case(
            "mean_axis_keep",
            vec![s],
            |_, v| v[0].mean_axis(0, true).unwrap().square(),
            |x| sq(x[0].mean_axis(0, true)),
        ),
        case(
            "sum_mean_all",
            vec![randn(&[2, 3], 23)],
            |t, v| {
                let weights = t.constant(NdTensor::new([2], vec![0.1, 1.0]).unwrap());
                Var::concat(&[v[0].sum_all(), v[0].mean_all()], 0)
                    .unwrap()
                    .mul(weights)
                    .unwrap()
            },
            |x| D::new(&[2], vec![0.1 * x[0].sum_all(), x[0].mean_all()]),
        ),
        case(
            "mse",
            vec![randn(&[3, 4], 24), randn(&[3, 4], 25)],
            |_, v| v[0].mse(v[1]).unwrap(),
            |x| D::scalar(x[0].zip(&x[1], |a, b| (a - b).powi(2)).mean_all()),
        ),
        case(
            "silu",
            vec![randn(&[3, 5], 14)],
            |_, v| v[0].silu(),
            |x| x[0].map(silu),
        ),
        case(
            "gelu",
            vec![randn(&[3, 5], 14)],
            |_, v| v[0].gelu(),
            |x| x[0].map(gelu),
        ),
        case(
            "exp",
            vec![randn(&[3, 5], 14).map(|v| 0.5 * v)],
            |_, v| v[0].exp(),
            |x| x[0].map(f64::exp),
        ),
        case(
            "embedding",
            vec![randn(&[5, 3], 15)],
            |_, v| v[0].embedding(&[4, 0, 4, 2]).unwrap().square(),
            |x| sq(x[0].embedding(&[4, 0, 4, 2])),
        ),
        case(
            "conv3d",
            vec![randn(&[3, 5, 4, 2], 16), k.clone()],
            |_, v| v[0].conv3d_causal(v[1], (1, 1, 1)).unwrap(),
            |x| x[0].conv3d_causal(&x[1], (1, 1, 1)),
        ),
        case(
            "conv3d-strided",
            vec![randn(&[3, 5, 4, 2], 16), k],
            |_, v| v[0].conv3d_causal(v[1], (2, 2, 2)).unwrap(),
            |x| x[0].conv3d_causal(&x[1], (2, 2, 2)),
        ),
        case(
            "conv3d-1x3x1",
            vec![randn(&[4, 3, 5, 2], 18), randn(&[2, 1, 3, 2, 2], 19)],
            |_, v| v[0].conv3d_causal(v[1], (1, 2, 1)).unwrap(),
            |x| x[0].conv3d_causal(&x[1], (1, 2, 1)),
        ),
    ]
}

/// Worst relative error of a case over three output weightings.
pub fn run_case(case: &Case) -> GradReport {
    let mut worst = GradReport {
        max_rel: 0.0,
        probes: 0,
    };
    for seed in 0..3 {
        let r = check_gradients(&case.inputs, 64, 100 + seed, &*case.f, &*case.reference);
        worst.max_rel = worst.max_rel.max(r.max_rel);
        worst.probes += r.probes;
    }
    worst
}

/// Relative gap between a case's tape forward and its f64 reference.
pub fn reference_gap(case: &Case) -> f64 {
    forward_gap(&case.inputs, &*case.f, &*case.reference)
}

pub fn tiny_codec_config() -> CodecConfig {
    CodecConfig {
        base_channels: 2,
        c: 2,
        f_t: 2,
        f_s: 2,
        temporal_down_layers: 1,
        spatial_down_layers: 1,
        ..CodecConfig::default()
    }
}

/// Central difference of an f64 function at the gradient-suite step.
fn central64(x: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP as f64;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Folds analytic/numeric pairs of one tensor into `report`, flooring the
/// denominator at `FLOOR_FRACTION` of the largest numeric entry, and at
/// `min_floor` for tensors whose true gradient vanishes (a bias feeding a
/// normalisation).
fn accumulate(report: &mut GradReport, pairs: &[(f64, f64)], min_floor: f64) {
    let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let floor = (FLOOR_FRACTION * scale).max(min_floor).max(1e-12);
    for &(a, n) in pairs {
        report.max_rel = report
            .max_rel
            .max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        report.probes += 1;
    }
}

/// Input gradients through encoder, factorization, recomposition and
/// decoder. The numeric side differentiates the f64 reference forward pass.
pub fn composed_input_report(combine: CombineKind) -> GradReport {
    let ae = AutoEncoder::new(
        tiny_codec_config(),
        LatentKind::four_plane(combine),
        (3, 4, 4),
        21,
    )
    .unwrap();
    let clip = random_clip(3, 4, 4, &mut rng(22)).frames;
    let weights = NdTensor::uniform(clip.shape().to_vec(), -1.0, 1.0, &mut rng(23));
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(clip.clone());
        let z = ae.encoder_forward(&tape, x).unwrap();
        let planes = factorize_var(z, &PlaneReducer::MeanPool).unwrap();
        let y = ae
            .decoder_forward(&tape, recompose_var(&planes, combine).unwrap())
            .unwrap();
        let loss = y.mul(tape.constant(weights.clone())).unwrap().sum_all();
        tape.backward(loss).unwrap().wrt(x).unwrap()
    };
    let params = reference::params_of(&ae);
    let base = reference::Vol::from_tensor(&clip);
    let mut pairs = Vec::new();
    for j in 0..clip.len() {
        let numeric = central64(base.data[j], |v| {
            let mut x = base.clone();
            x.data[j] = v;
            let y = reference::reconstruct(&ae, &params, &x);
            y.data
                .iter()
                .zip(weights.data())
                .map(|(a, &b)| a * b as f64)
                .sum()
        });
        pairs.push((analytic.data()[j] as f64, numeric));
    }
    let mut report = GradReport {
        max_rel: 0.0,
        probes: 0,
    };
    accumulate(&mut report, &pairs, 0.0);
    report
}

/// Parameter gradients of the full codec loss, projection logits included,
/// against the f64 reference loss.
pub fn composed_param_report() -> GradReport {
    let lp = LatentKind::FourPlane {
        mode: SpatialPlaneMode::SegmentPool,
        reduce: ReduceTag::LinearProj,
        combine: CombineKind::Concat,
    };
    let mut ae = AutoEncoder::new(tiny_codec_config(), lp, (3, 4, 4), 31).unwrap();
    for p in ae.store.iter_mut() {
        if p.name().starts_with("proj.") {
            p.tensor = NdTensor::randn(p.tensor.shape().to_vec(), 0.5, &mut rng(32));
        }
    }
    let clip = random_clip(3, 4, 4, &mut rng(33)).frames;
    let tape = Tape::new();
    let loss = ae.loss(&tape, &clip, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    let base = reference::params_of(&ae);
    let x = reference::Vol::from_tensor(&clip);
    let mut r = rng(77);
    let mut all = Vec::new();
    for (id, p) in ae.store.iter() {
        let g = grads
            .param(&ae.store, id)
            .unwrap_or_else(|| NdTensor::zeros(p.tensor.shape().to_vec()));
        let n = p.tensor.len();
        let mut pairs = Vec::new();
        for _ in 0..4.min(n) {
            let j = r.random_range(0..n);
            let name = p.name().to_string();
            let numeric = central64(base[&name].1[j], |v| {
                let mut params = base.clone();
                params.get_mut(&name).unwrap().1[j] = v;
                reference::loss(&ae, &params, &x)
            });
            pairs.push((g.data()[j] as f64, numeric));
        }
        all.push(pairs);
    }
    // f32 backward leaves ~1e-7 of the global scale where the exact gradient is zero
    let global = all.iter().flatten().map(|p| p.1.abs()).fold(0.0, f64::max);
    let mut report = GradReport {
        max_rel: 0.0,
        probes: 0,
    };
    for pairs in &all {
        accumulate(&mut report, pairs, 1e-3 * global);
    }
    report
}
