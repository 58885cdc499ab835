//! Shared test oracles. Everything here evaluates only forward values, so
//! it stays independent of the backward code it checks.
#![allow(dead_code)]

pub mod cases;
pub mod reference;
pub mod refops;

use fourplane_core::{NdTensor, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
/// Entries far below the gradient scale of their tensor are judged on that
/// scale: f32 backward values through a deep composition carry rounding of
/// order 1e-5 of it.
pub const FLOOR_FRACTION: f64 = 0.1;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Largest per-entry relative error over the probed coordinates.
    pub max_rel: f64,
    pub probes: usize,
}

/// Compares reverse-mode gradients of `sum(r * f(inputs))` (fixed random
/// `r`) with central finite differences at step [`FD_STEP`] taken through
/// `reference`, an f64 implementation of the same function. Evaluating the
/// differences in f64 keeps rounding out of the oracle; [`forward_gap`]
/// checks that `reference` computes what `f` does.
///
/// Relative error per probed entry is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = FLOOR_FRACTION * max |n|` over the probed entries of that input, so entries
/// that are tiny relative to the gradient scale are judged on the scale
/// rather than on their own magnitude.
pub fn check_gradients<F>(
    inputs: &[NdTensor],
    max_probes: usize,
    seed: u64,
    f: F,
    reference: &dyn Fn(&[refops::D]) -> refops::D,
) -> GradReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut rng = rng(seed);
    let out_shape = {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).shape()
    };
    let weights = NdTensor::uniform(out_shape, -1.0, 1.0, &mut rng);

    let analytic: Vec<NdTensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&tape, &vars);
        let loss = y.mul(tape.constant(weights.clone())).unwrap().sum_all();
        let grads = tape.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .unwrap_or_else(|| NdTensor::zeros(t.shape().to_vec()))
            })
            .collect()
    };

    let base: Vec<refops::D> = inputs.iter().map(refops::D::from_tensor).collect();
    let eval = |xs: &[refops::D]| -> f64 {
        reference(xs)
            .data
            .iter()
            .zip(weights.data())
            .map(|(a, &b)| a * b as f64)
            .sum()
    };

    let h = FD_STEP as f64;
    let mut max_rel = 0.0f64;
    let mut probes = 0;
    for (i, x) in inputs.iter().enumerate() {
        let n = x.len();
        let coords: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|_| rng.random_range(0..n)).collect()
        };
        let mut pairs = Vec::with_capacity(coords.len());
        for &j in &coords {
            let mut xs = base.clone();
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + h;
            let up = eval(&xs);
            xs[i].data[j] = orig - h;
            let down = eval(&xs);
            pairs.push((analytic[i].data()[j] as f64, (up - down) / (2.0 * h)));
        }
        let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        let floor = (FLOOR_FRACTION * scale).max(1e-9);
        for (a, nmr) in pairs {
            let rel = (a - nmr).abs() / a.abs().max(nmr.abs()).max(floor);
            max_rel = max_rel.max(rel);
            probes += 1;
        }
    }
    GradReport { max_rel, probes }
}

/// Largest difference between the f32 forward `f` and its f64 `reference`,
/// relative to the largest reference output.
pub fn forward_gap<F>(
    inputs: &[NdTensor],
    f: F,
    reference: &dyn Fn(&[refops::D]) -> refops::D,
) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let ours = f(&tape, &vars).to_tensor();
    let theirs = reference(
        &inputs
            .iter()
            .map(refops::D::from_tensor)
            .collect::<Vec<_>>(),
    );
    assert_eq!(ours.shape(), theirs.shape.as_slice(), "reference shape");
    let scale = theirs.data.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    ours.data()
        .iter()
        .zip(&theirs.data)
        .map(|(&a, b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
        / scale
}
