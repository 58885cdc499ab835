//! Noise schedule, forward process, v-prediction loss and DDIM sampling.
//!
//! Timesteps are 1-based: `t` runs over `1..=steps`. Schedule tables are kept
//! in `f64`; tensors stay `f32`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::NdTensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.002;
pub const DEFAULT_SELF_COND_RATE: f64 = 0.9;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// Serializable description of a schedule.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            zero_terminal: true,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::scaled_linear(self.steps, self.beta_start, self.beta_end)?;
        if self.zero_terminal {
            s.rescale_zero_terminal_snr()
        } else {
            Ok(s)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sqrt_alpha_bar: Vec<f64>,
    pub sqrt_one_minus_alpha_bar: Vec<f64>,
    pub zero_terminal: bool,
}

impl NoiseSchedule {
    /// `beta_t = (sqrt(b0) + (t-1)/(T-1) * (sqrt(bT) - sqrt(b0)))^2`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(config_err!("schedule needs at least 2 steps, got {steps}"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            ));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let s = a + i as f64 / (steps - 1) as f64 * (b - a);
                s * s
            })
            .collect();
        let mut prod = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|bt| {
                prod *= 1.0 - bt;
                prod
            })
            .collect();
        Ok(Self::from_alpha_bar(beta, alpha_bar, false))
    }

    /// Schedule used throughout: 1000 steps from 1e-4 to 0.002, rescaled to zero terminal SNR.
    pub fn standard() -> Self {
        ScheduleConfig::default().build().expect("valid constants")
    }

    fn from_alpha_bar(beta: Vec<f64>, alpha_bar: Vec<f64>, zero_terminal: bool) -> Self {
        let sqrt_alpha_bar = alpha_bar.iter().map(|a: &f64| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self {
            steps: beta.len(),
            beta,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            zero_terminal,
        }
    }

    /// Shifts and scales `sqrt(alpha_bar)` so the last step has zero signal
    /// while the first step is unchanged; betas are recomputed from the new
    /// products, which makes the final beta exactly 1.
    pub fn rescale_zero_terminal_snr(&self) -> Result<Self> {
        if self.zero_terminal {
            return Err(config_err!("schedule is already rescaled"));
        }
        let first = self.sqrt_alpha_bar[0];
        let last = self.sqrt_alpha_bar[self.steps - 1];
        if first == last {
            return Err(Error::Numeric(
                "degenerate schedule: first and last sqrt(alpha_bar) coincide".into(),
            ));
        }
        let scale = first / (first - last);
        let mut sab: Vec<f64> = self
            .sqrt_alpha_bar
            .iter()
            .map(|s| (s - last) * scale)
            .collect();
        sab[0] = first;
        sab[self.steps - 1] = 0.0;
        let alpha_bar: Vec<f64> = sab.iter().map(|s| s * s).collect();
        let mut beta = Vec::with_capacity(self.steps);
        beta.push(1.0 - alpha_bar[0]);
        for i in 1..self.steps {
            beta.push(1.0 - alpha_bar[i] / alpha_bar[i - 1]);
        }
        let mut out = Self::from_alpha_bar(beta, alpha_bar, true);
        out.sqrt_alpha_bar = sab;
        Ok(out)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(config_err!("timestep {t} outside 1..={}", self.steps));
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`; `t = 0` is the clean end.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            return Ok((1.0, 0.0));
        }
        self.check_t(t)?;
        Ok((
            self.sqrt_alpha_bar[t - 1],
            self.sqrt_one_minus_alpha_bar[t - 1],
        ))
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar_at(t)?;
        Ok(a / (1.0 - a))
    }

    /// CSV dump with columns `t,beta,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar\n");
        for i in 0..self.steps {
            writeln!(
                s,
                "{},{:.17e},{:.17e}",
                i + 1,
                self.beta[i],
                self.alpha_bar[i]
            )
            .expect("string write");
        }
        s
    }

    /// `z_t = sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn q_sample(&self, z0: &NdTensor, t: usize, noise: &NdTensor) -> Result<NdTensor> {
        self.check_t(t)?;
        let (a, s) = self.coefficients(t)?;
        mix(z0, noise, a, s)
    }

    /// `v = sqrt(ab) eps - sqrt(1 - ab) z0`.
    pub fn v_target(&self, z0: &NdTensor, noise: &NdTensor, t: usize) -> Result<NdTensor> {
        self.check_t(t)?;
        let (a, s) = self.coefficients(t)?;
        mix(noise, z0, a, -s)
    }

    /// Inverts `(z0, eps) -> (z_t, v)`: returns `(z0, eps)`.
    pub fn invert(&self, z_t: &NdTensor, v: &NdTensor, t: usize) -> Result<(NdTensor, NdTensor)> {
        let (a, s) = self.coefficients(t)?;
        Ok((mix(z_t, v, a, -s)?, mix(z_t, v, s, a)?))
    }
}

/// `a * x + b * y` evaluated in f64.
fn mix(x: &NdTensor, y: &NdTensor, a: f64, b: f64) -> Result<NdTensor> {
    x.zip_map(y, |p, q| (a * p as f64 + b * q as f64) as f32)
}

/// Conditioning shared by the training loss and the sampler.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub label: Option<usize>,
    /// Task index for the task embedding.
    pub task: usize,
    /// Prefix tokens `[n, c]` that are attended to but not predicted.
    pub tokens: Option<NdTensor>,
}

/// A network predicting `v` for noisy tokens.
pub trait Denoise {
    /// `z_t` and `self_cond` are `[n, c]`; the result has the same shape.
    fn predict_v<'t>(
        &self,
        tape: &'t Tape,
        z_t: Var<'t>,
        t: usize,
        cond: &Conditioning,
        self_cond: Var<'t>,
    ) -> Result<Var<'t>>;
}

/// One training example.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub z0: NdTensor,
    pub cond: Conditioning,
    pub t: usize,
    pub noise: NdTensor,
}

impl DiffusionBatch {
    /// Draws `t` uniformly from `1..=steps` and standard-normal noise.
    pub fn sample<R: Rng + ?Sized>(
        z0: NdTensor,
        cond: Conditioning,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Self {
        let t = rng.random_range(1..=schedule.steps);
        let noise = NdTensor::randn(z0.shape().to_vec(), 1.0, rng);
        Self { z0, cond, t, noise }
    }
}

/// Mean squared error between predicted and target `v`. With `self_condition`
/// set, a gradient-free first pass supplies the auxiliary input; otherwise it
/// is zero.
pub fn training_loss<'t, D: Denoise + ?Sized>(
    model: &D,
    tape: &'t Tape,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
    self_condition: bool,
) -> Result<Var<'t>> {
    if batch.z0.shape() != batch.noise.shape() {
        return Err(shape_err!(
            "noise {:?} vs tokens {:?}",
            batch.noise.shape(),
            batch.z0.shape()
        ));
    }
    let z_t = schedule.q_sample(&batch.z0, batch.t, &batch.noise)?;
    let target = schedule.v_target(&batch.z0, &batch.noise, batch.t)?;
    let zeros = NdTensor::zeros(batch.z0.shape().to_vec());
    let aux = if self_condition {
        let scratch = Tape::no_grad();
        let first = model.predict_v(
            &scratch,
            scratch.constant(z_t.clone()),
            batch.t,
            &batch.cond,
            scratch.constant(zeros),
        )?;
        first.to_tensor()
    } else {
        zeros
    };
    let pred = model.predict_v(
        tape,
        tape.constant(z_t),
        batch.t,
        &batch.cond,
        tape.constant(aux),
    )?;
    pred.mse(tape.constant(target))
}

/// Whether a training step uses self-conditioning.
pub fn draw_self_condition<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> bool {
    rate > 0.0 && rng.random::<f64>() < rate
}

/// Deterministic (eta = 0) sampler over a uniform timestep subset.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimSampler {
    /// Descending; the first entry is the last training step.
    pub timesteps: Vec<usize>,
}

/// Resumable sampler state.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimState {
    pub z: NdTensor,
    /// Previous `v` estimate, fed back as self-conditioning input.
    pub v_prev: NdTensor,
    /// Index into the sampler's timesteps of the next step to run.
    pub next: usize,
}

impl DdimSampler {
    pub fn new(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        if steps == 0 || steps > schedule.steps {
            return Err(config_err!(
                "sampling steps must be in 1..={}, got {steps}",
                schedule.steps
            ));
        }
        let total = schedule.steps;
        let timesteps = (0..steps).map(|i| total - (i * total) / steps).collect();
        Ok(Self { timesteps })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Pure noise of shape `shape` drawn from `seed`.
    pub fn init(&self, shape: &[usize], seed: u64) -> DdimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DdimState {
            z: NdTensor::randn(shape.to_vec(), 1.0, &mut rng),
            v_prev: NdTensor::zeros(shape.to_vec()),
            next: 0,
        }
    }

    /// Advances `state` by up to `n` steps.
    pub fn run<D: Denoise + ?Sized>(
        &self,
        model: &D,
        schedule: &NoiseSchedule,
        cond: &Conditioning,
        mut state: DdimState,
        n: usize,
    ) -> Result<DdimState> {
        let end = (state.next + n).min(self.timesteps.len());
        for i in state.next..end {
            let t = self.timesteps[i];
            let t_next = self.timesteps.get(i + 1).copied().unwrap_or(0);
            let tape = Tape::no_grad();
            let v = model
                .predict_v(
                    &tape,
                    tape.constant(state.z.clone()),
                    t,
                    cond,
                    tape.constant(state.v_prev.clone()),
                )?
                .to_tensor();
            if !v.all_finite() {
                return Err(Error::Numeric(format!("non-finite prediction at t = {t}")));
            }
            state.z = ddim_step(schedule, &state.z, &v, t, t_next)?;
            state.v_prev = v;
            state.next = i + 1;
        }
        Ok(state)
    }

    /// Full trajectory from seeded noise.
    pub fn sample<D: Denoise + ?Sized>(
        &self,
        model: &D,
        schedule: &NoiseSchedule,
        cond: &Conditioning,
        shape: &[usize],
        seed: u64,
    ) -> Result<NdTensor> {
        let state = self.run(
            model,
            schedule,
            cond,
            self.init(shape, seed),
            self.timesteps.len(),
        )?;
        Ok(state.z)
    }
}

/// One deterministic update from `t` to `t_next` (0 is the clean end).
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z: &NdTensor,
    v: &NdTensor,
    t: usize,
    t_next: usize,
) -> Result<NdTensor> {
    let (a, s) = schedule.coefficients(t)?;
    let (a2, s2) = schedule.coefficients(t_next)?;
    z.zip_map(v, |zi, vi| {
        let (zi, vi) = (zi as f64, vi as f64);
        let x0 = a * zi - s * vi;
        let eps = s * zi + a * vi;
        (a2 * x0 + s2 * eps) as f32
    })
}
