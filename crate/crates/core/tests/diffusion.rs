mod common;

use common::rng;
use fourplane_core::denoiser::{Denoiser, DenoiserConfig, SequenceLayout};
use fourplane_core::diffusion::*;
use fourplane_core::{NdTensor, Result, Tape, Var};
use proptest::prelude::*;

// High-precision values of the 1000-step scaled-linear schedule
// (beta from 1e-4 to 0.002), evaluated with 30-digit arithmetic.
const ALPHA_BAR_1000: f64 = 0.427_505_457_990_267_963_63;
const ALPHA_BAR_500: f64 = 0.829_491_618_543_217_759_27;
const RESCALED_SQRT_ALPHA_BAR_500: f64 = 0.742_283_414_836_124_939_18;
const RESCALED_BETA_500: f64 = 0.002_646_558_999_071_638_866_7;

/// Knows the clean sample and returns the exact `v` for it.
struct Oracle {
    z0: NdTensor,
    schedule: NoiseSchedule,
}

impl Denoise for Oracle {
    fn predict_v<'t>(
        &self,
        tape: &'t Tape,
        z_t: Var<'t>,
        t: usize,
        _: &Conditioning,
        _: Var<'t>,
    ) -> Result<Var<'t>> {
        let (a, s) = self.schedule.coefficients(t)?;
        let v = z_t
            .value()
            .zip_map(&self.z0, |z, x| ((a * z as f64 - x as f64) / s) as f32)?;
        Ok(tape.constant(v))
    }
}

/// Direct reimplementation of the schedule in f64 loops.
fn reference_schedule(steps: usize, b0: f64, b1: f64, rescale: bool) -> (Vec<f64>, Vec<f64>) {
    let mut ab = Vec::new();
    let mut beta = Vec::new();
    let mut prod = 1.0;
    for i in 0..steps {
        let r = b0.sqrt() + (b1.sqrt() - b0.sqrt()) * i as f64 / (steps - 1) as f64;
        prod *= 1.0 - r * r;
        beta.push(r * r);
        ab.push(prod);
    }
    if !rescale {
        return (beta, ab);
    }
    let s: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let (first, last) = (s[0], s[steps - 1]);
    let new: Vec<f64> = s
        .iter()
        .map(|x| (x - last) * first / (first - last))
        .collect();
    let ab: Vec<f64> = new.iter().map(|x| x * x).collect();
    let mut beta = vec![1.0 - ab[0]];
    for i in 1..steps {
        beta.push(1.0 - ab[i] / ab[i - 1]);
    }
    (beta, ab)
}

#[test]
fn schedule_matches_high_precision_values() {
    let raw = NoiseSchedule::scaled_linear(1000, 1e-4, 0.002).unwrap();
    assert!((raw.alpha_bar_at(1000).unwrap() - ALPHA_BAR_1000).abs() < 1e-13);
    assert!((raw.alpha_bar_at(500).unwrap() - ALPHA_BAR_500).abs() < 1e-13);
    let s = NoiseSchedule::standard();
    assert!((s.coefficients(500).unwrap().0 - RESCALED_SQRT_ALPHA_BAR_500).abs() < 1e-13);
    assert!((s.beta_at(500).unwrap() - RESCALED_BETA_500).abs() < 1e-13);
}

#[test]
fn zero_terminal_rescale() {
    let raw = NoiseSchedule::scaled_linear(1000, 1e-4, 0.002).unwrap();
    let s = raw.rescale_zero_terminal_snr().unwrap();
    assert_eq!(s.alpha_bar_at(1000).unwrap(), 0.0);
    assert_eq!(s.beta_at(1000).unwrap(), 1.0);
    assert!((s.alpha_bar_at(1).unwrap() - raw.alpha_bar_at(1).unwrap()).abs() < 1e-7);
    assert!(s.rescale_zero_terminal_snr().is_err());
    assert_eq!(s.coefficients(1000).unwrap(), (0.0, 1.0));
    let (beta, ab) = reference_schedule(1000, 1e-4, 0.002, true);
    for t in 1..=1000 {
        assert!(
            (s.alpha_bar_at(t).unwrap() - ab[t - 1]).abs() < 1e-14,
            "t = {t}"
        );
        assert!(
            (s.beta_at(t).unwrap() - beta[t - 1]).abs() < 1e-12,
            "t = {t}"
        );
    }
}

#[test]
fn schedule_csv_has_a_row_per_step() {
    let csv = NoiseSchedule::standard().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert_eq!(lines[0], "t,beta,alpha_bar");
    assert!(lines[1000].starts_with("1000,1.0"));
}

#[test]
fn forward_process_moments() {
    let s = NoiseSchedule::standard();
    let n = 40_000;
    for t in [1, 250, 600, 999] {
        let z0 = NdTensor::full([n], 0.7);
        let noise = NdTensor::randn([n], 1.0, &mut rng(t as u64));
        let zt = s.q_sample(&z0, t, &noise).unwrap();
        let (a, sd) = s.coefficients(t).unwrap();
        let mean = zt.mean();
        let var = zt
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - 0.7 * a).abs() < 4.0 * se + 1e-7,
            "t = {t}: mean {mean}"
        );
        assert!(
            (var - sd * sd).abs() < 4.0 * sd * sd * (2.0 / n as f64).sqrt() + 1e-9,
            "t = {t}: var {var}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inversion_recovers_sample_and_noise(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::standard();
        let z0 = NdTensor::randn([32], 1.0, &mut rng(seed));
        let eps = NdTensor::randn([32], 1.0, &mut rng(seed ^ 1));
        let zt = s.q_sample(&z0, t, &eps).unwrap();
        let v = s.v_target(&z0, &eps, t).unwrap();
        let (z0b, epsb) = s.invert(&zt, &v, t).unwrap();
        prop_assert!(z0b.max_abs_diff(&z0) < 1e-6);
        prop_assert!(epsb.max_abs_diff(&eps) < 1e-6);
    }

    #[test]
    fn rescaled_schedules_are_monotone(b0 in 1e-5f64..1e-3, span in 1.0f64..50.0, steps in 2usize..400) {
        let b1 = (b0 * span).min(0.5);
        let s = NoiseSchedule::scaled_linear(steps, b0, b1).unwrap().rescale_zero_terminal_snr().unwrap();
        prop_assert_eq!(s.alpha_bar_at(steps).unwrap(), 0.0);
        let (_, ab) = reference_schedule(steps, b0, b1, false);
        prop_assert!((s.alpha_bar_at(1).unwrap() - ab[0]).abs() < 1e-12);
        for t in 1..steps {
            prop_assert!(s.alpha_bar_at(t + 1).unwrap() <= s.alpha_bar_at(t).unwrap());
        }
    }
}

#[test]
fn ddim_with_oracle_recovers_the_sample() {
    let schedule = NoiseSchedule::standard();
    let z0 = NdTensor::randn([64, 4], 1.0, &mut rng(8));
    let oracle = Oracle {
        z0: z0.clone(),
        schedule: schedule.clone(),
    };
    let sampler = DdimSampler::new(&schedule, 50).unwrap();
    assert_eq!(sampler.timesteps.len(), 50);
    assert_eq!(sampler.timesteps[0], 1000);
    assert_eq!(*sampler.timesteps.last().unwrap(), 20);
    let out = sampler
        .sample(&oracle, &schedule, &Conditioning::default(), &[64, 4], 3)
        .unwrap();
    assert!(out.max_abs_diff(&z0) < 1e-4, "{}", out.max_abs_diff(&z0));
}

fn tiny_denoiser() -> Denoiser {
    let cfg = DenoiserConfig {
        depth: 2,
        width: 16,
        heads: 2,
        token_channels: 2,
        ..DenoiserConfig::default()
    };
    let mut d = Denoiser::new(cfg, SequenceLayout::volumetric(2, 2, 2), 4).unwrap();
    // non-zero modulation so every block contributes
    for p in d.store.iter_mut() {
        if p.name().starts_with("mod.") || p.name().ends_with("lora_b") {
            p.tensor = NdTensor::randn(p.tensor.shape().to_vec(), 0.05, &mut rng(9));
        }
    }
    d
}

#[test]
fn sampling_resumes_bit_identically() {
    let schedule = NoiseSchedule::standard();
    let model = tiny_denoiser();
    let sampler = DdimSampler::new(&schedule, 50).unwrap();
    let cond = Conditioning {
        label: Some(2),
        task: 0,
        tokens: None,
    };
    let full = sampler
        .run(&model, &schedule, &cond, sampler.init(&[8, 2], 5), 50)
        .unwrap();
    let half = sampler
        .run(&model, &schedule, &cond, sampler.init(&[8, 2], 5), 25)
        .unwrap();
    assert_eq!(half.next, 25);
    let resumed = sampler.run(&model, &schedule, &cond, half, 25).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(
        full.z,
        sampler
            .sample(&model, &schedule, &cond, &[8, 2], 5)
            .unwrap()
    );
}

#[test]
fn plain_loss_matches_direct_computation() {
    let schedule = NoiseSchedule::standard();
    let model = tiny_denoiser();
    let mut r = rng(12);
    let z0 = NdTensor::randn([8, 2], 1.0, &mut r);
    let batch = DiffusionBatch::sample(z0.clone(), Conditioning::default(), &schedule, &mut r);
    let tape = Tape::new();
    let loss = training_loss(&model, &tape, &batch, &schedule, false)
        .unwrap()
        .item() as f64;

    let (a, s) = schedule.coefficients(batch.t).unwrap();
    let zt = z0
        .zip_map(&batch.noise, |x, e| (a * x as f64 + s * e as f64) as f32)
        .unwrap();
    let target = z0
        .zip_map(&batch.noise, |x, e| (a * e as f64 - s * x as f64) as f32)
        .unwrap();
    let scratch = Tape::no_grad();
    let pred = model
        .forward(
            &scratch,
            scratch.constant(zt),
            batch.t,
            &batch.cond,
            scratch.constant(NdTensor::zeros([8, 2])),
        )
        .unwrap()
        .to_tensor();
    let direct = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, q)| ((p - q) as f64).powi(2))
        .sum::<f64>()
        / 16.0;
    assert!(
        (loss - direct).abs() < 1e-6 * direct.max(1.0),
        "{loss} vs {direct}"
    );

    let with_sc = training_loss(&model, &Tape::new(), &batch, &schedule, true)
        .unwrap()
        .item() as f64;
    assert_ne!(with_sc, loss);
}

#[test]
fn self_condition_draws_follow_the_rate() {
    let mut r = rng(1);
    assert!(!(0..100).any(|_| draw_self_condition(0.0, &mut r)));
    let hits = (0..10_000)
        .filter(|_| draw_self_condition(0.9, &mut r))
        .count();
    assert!((8_800..9_200).contains(&hits), "{hits}");
}

#[test]
fn sampler_rejects_bad_step_counts() {
    let s = NoiseSchedule::standard();
    assert!(DdimSampler::new(&s, 0).is_err());
    assert!(DdimSampler::new(&s, 1001).is_err());
    assert!(s
        .q_sample(&NdTensor::zeros([1]), 0, &NdTensor::zeros([1]))
        .is_err());
}
