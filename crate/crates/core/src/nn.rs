//! Parameterised layers shared by the codec and the denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::NdTensor;

/// Pointwise nonlinearity used inside codec blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Self::Silu => x.silu(),
            Self::Gelu => x.gelu(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (input as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            NdTensor::randn([input, output], std, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), NdTensor::zeros([output]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), NdTensor::zeros([input, output]))?;
        let bias = Some(store.add(format!("{name}.bias"), NdTensor::zeros([output]))?);
        Ok(Self { weight, bias })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Causal 3D convolution with bias over `[t, h, w, c]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize, usize),
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: (usize, usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize, usize),
        gain: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let (kt, kh, kw) = kernel;
        let fan_in = (kt * kh * kw * cin) as f32;
        let k = NdTensor::randn([kt, kh, kw, cin, cout], gain / fan_in.sqrt(), rng);
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), k)?,
            bias: store.add(format!("{name}.bias"), NdTensor::zeros([cout]))?,
            stride,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3d_causal(tape.param(store, self.kernel), self.stride)?
            .add(tape.param(store, self.bias))
    }
}

/// Group normalisation whose statistics are taken per frame, over the
/// spatial positions and the channels of each group. Per-frame statistics
/// keep the codec causal in time.
#[derive(Clone, Debug)]
pub struct FrameGroupNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

pub const NORM_EPS: f32 = 1e-5;

impl FrameGroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let groups = [4, 2, 1]
            .into_iter()
            .find(|g| channels % g == 0)
            .expect("1 divides everything");
        Ok(Self {
            scale: store.add(format!("{name}.scale"), NdTensor::ones([channels]))?,
            shift: store.add(format!("{name}.shift"), NdTensor::zeros([channels]))?,
            groups,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let &[t, h, w, c] = shape.as_slice() else {
            return Err(config_err!("group norm expects [t,h,w,c], got {shape:?}"));
        };
        let g = self.groups;
        let cg = c / g;
        let y = if g == 1 {
            x.reshape(&[t, h * w * c])?
                .layer_norm(NORM_EPS)
                .reshape(&[t, h, w, c])?
        } else {
            x.reshape(&[t, h * w, g, cg])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[t * g, h * w * cg])?
                .layer_norm(NORM_EPS)
                .reshape(&[t, g, h * w, cg])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[t, h, w, c])?
        };
        y.mul(tape.param(store, self.scale))?
            .add(tape.param(store, self.shift))
    }
}
