//! Double-precision reference forward pass of the codec, written directly
//! from loops. It reads the model's parameters by name and shares no code
//! with the tape, so finite differences taken through it check the f32
//! backward pass without f32 rounding in the oracle.

use std::collections::HashMap;

use fourplane_core::codec::{AutoEncoder, LatentKind};
use fourplane_core::factorization::{segment_lengths, CombineKind, ReduceTag};
use fourplane_core::nn::{Activation, NORM_EPS};
use fourplane_core::NdTensor;

#[derive(Clone, Debug)]
pub struct Vol {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Vol {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            t,
            h,
            w,
            c,
            data: vec![0.0; t * h * w * c],
        }
    }

    pub fn from_tensor(x: &NdTensor) -> Self {
        let s = x.shape();
        Self {
            t: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            data: x.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.h + y) * self.w + x) * self.c + c]
    }

    fn at_mut(&mut self, t: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[((t * self.h + y) * self.w + x) * self.c + c]
    }
}

/// Model parameters in f64, keyed by name, with their shapes.
pub type Params = HashMap<String, (Vec<usize>, Vec<f64>)>;

pub fn params_of(ae: &AutoEncoder) -> Params {
    ae.store
        .iter()
        .map(|(_, p)| {
            (
                p.name().to_string(),
                (
                    p.tensor.shape().to_vec(),
                    p.tensor.data().iter().map(|&v| v as f64).collect(),
                ),
            )
        })
        .collect()
}

fn conv(p: &Params, name: &str, x: &Vol, stride: (usize, usize, usize)) -> Vol {
    let (ks, k) = &p[&format!("{name}.kernel")];
    let (_, b) = &p[&format!("{name}.bias")];
    let (kt, kh, kw, cin, cout) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
    assert_eq!(cin, x.c);
    let (to, ho, wo) = (
        (x.t - 1) / stride.0 + 1,
        (x.h - 1) / stride.1 + 1,
        (x.w - 1) / stride.2 + 1,
    );
    let mut out = Vol::zeros(to, ho, wo, cout);
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b[co];
                    for dt in 0..kt {
                        // causal in time: taps reach back kt - 1 frames
                        let it = (ot * stride.0 + dt) as isize - (kt as isize - 1);
                        for dy in 0..kh {
                            let iy = (oy * stride.1 + dy) as isize - (kh as isize - 1) / 2;
                            for dx in 0..kw {
                                let ix = (ox * stride.2 + dx) as isize - (kw as isize - 1) / 2;
                                if it < 0
                                    || iy < 0
                                    || ix < 0
                                    || it as usize >= x.t
                                    || iy as usize >= x.h
                                    || ix as usize >= x.w
                                {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let kv = k[(((dt * kh + dy) * kw + dx) * cin + ci) * cout + co];
                                    acc += kv * x.at(it as usize, iy as usize, ix as usize, ci);
                                }
                            }
                        }
                    }
                    *out.at_mut(ot, oy, ox, co) = acc;
                }
            }
        }
    }
    out
}

fn group_norm(p: &Params, name: &str, x: &Vol) -> Vol {
    let (_, scale) = &p[&format!("{name}.scale")];
    let (_, shift) = &p[&format!("{name}.shift")];
    let g = [4, 2, 1].into_iter().find(|g| x.c % g == 0).unwrap();
    let cg = x.c / g;
    let mut out = x.clone();
    for t in 0..x.t {
        for gi in 0..g {
            let members: Vec<(usize, usize, usize)> = (0..x.h)
                .flat_map(|y| {
                    (0..x.w).flat_map(move |xx| (0..cg).map(move |k| (y, xx, gi * cg + k)))
                })
                .collect();
            let n = members.len() as f64;
            let mean = members
                .iter()
                .map(|&(y, xx, c)| x.at(t, y, xx, c))
                .sum::<f64>()
                / n;
            let var = members
                .iter()
                .map(|&(y, xx, c)| (x.at(t, y, xx, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            let r = 1.0 / (var + NORM_EPS as f64).sqrt();
            for &(y, xx, c) in &members {
                *out.at_mut(t, y, xx, c) = (x.at(t, y, xx, c) - mean) * r * scale[c] + shift[c];
            }
        }
    }
    out
}

fn act(a: Activation, x: &Vol) -> Vol {
    let f = |v: f64| match a {
        Activation::Silu => v / (1.0 + (-v).exp()),
        Activation::Gelu => {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        }
    };
    Vol {
        data: x.data.iter().map(|&v| f(v)).collect(),
        ..x.clone()
    }
}

fn add(a: &Vol, b: &Vol) -> Vol {
    Vol {
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

fn res_block(p: &Params, name: &str, a: Activation, x: &Vol) -> Vol {
    let h = act(a, &group_norm(p, &format!("{name}.norm1"), x));
    let h = conv(p, &format!("{name}.conv1"), &h, (1, 1, 1));
    let h = act(a, &group_norm(p, &format!("{name}.norm2"), &h));
    add(x, &conv(p, &format!("{name}.conv2"), &h, (1, 1, 1)))
}

pub fn encoder(ae: &AutoEncoder, p: &Params, x: &Vol) -> Vol {
    let cfg = &ae.config;
    let mut h = conv(p, "enc.conv_in", x, (1, 1, 1));
    for l in 0..cfg.spatial_down_layers {
        let st = if l < cfg.temporal_down_layers { 2 } else { 1 };
        h = conv(p, &format!("enc.down{l}.conv"), &h, (st, 2, 2));
        for b in 0..cfg.residual_blocks {
            h = res_block(p, &format!("enc.down{l}.block{b}"), cfg.activation, &h);
        }
    }
    let h = act(cfg.activation, &group_norm(p, "enc.norm_out", &h));
    conv(p, "enc.conv_out", &h, (1, 1, 1))
}

fn upsample(x: &Vol, temporal: bool) -> Vol {
    // nearest x2 in space; in time x2 then the first frame is dropped
    let ft = if temporal { 2 } else { 1 };
    let skip = if temporal { 1 } else { 0 };
    let mut out = Vol::zeros(x.t * ft - skip, x.h * 2, x.w * 2, x.c);
    for t in 0..out.t {
        for y in 0..out.h {
            for xx in 0..out.w {
                for c in 0..x.c {
                    *out.at_mut(t, y, xx, c) = x.at((t + skip) / ft, y / 2, xx / 2, c);
                }
            }
        }
    }
    out
}

pub fn decoder(ae: &AutoEncoder, p: &Params, x: &Vol) -> Vol {
    let cfg = &ae.config;
    let mut h = conv(p, "dec.conv_in", x, (1, 1, 1));
    for b in 0..cfg.residual_blocks {
        h = res_block(p, &format!("dec.mid.block{b}"), cfg.activation, &h);
    }
    for l in (0..cfg.spatial_down_layers).rev() {
        h = upsample(&h, l < cfg.temporal_down_layers);
        h = conv(p, &format!("dec.up{l}.conv"), &h, (1, 1, 1));
        for b in 0..cfg.residual_blocks {
            h = res_block(p, &format!("dec.up{l}.block{b}"), cfg.activation, &h);
        }
    }
    let h = act(cfg.activation, &group_norm(p, "dec.norm_out", &h));
    conv(p, "dec.conv_out", &h, (1, 1, 1))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Segment-pooled planes and their back-projection, as a `[t, h, w, c']` volume.
pub fn factorize_recompose(z: &Vol, combine: CombineKind, weights: Option<[Vec<f64>; 4]>) -> Vol {
    let (t, h, w, c) = (z.t, z.h, z.w, z.c);
    let (s1, s2) = segment_lengths(t);
    let (seg1, seg2) = if t == 1 { (0..1, 0..1) } else { (0..s1, s1..t) };
    let [wx, wy, w1, w2] = weights.unwrap_or_else(|| {
        [
            vec![1.0 / w as f64; w],
            vec![1.0 / h as f64; h],
            vec![1.0 / s1 as f64; s1],
            vec![1.0 / s2 as f64; s2],
        ]
    });
    let xt =
        |tt: usize, y: usize, ch: usize| (0..w).map(|x| wx[x] * z.at(tt, y, x, ch)).sum::<f64>();
    let yt =
        |tt: usize, x: usize, ch: usize| (0..h).map(|y| wy[y] * z.at(tt, y, x, ch)).sum::<f64>();
    let xy1 = |y: usize, x: usize, ch: usize| {
        seg1.clone()
            .enumerate()
            .map(|(k, tt)| w1[k] * z.at(tt, y, x, ch))
            .sum::<f64>()
    };
    let xy2 = |y: usize, x: usize, ch: usize| {
        seg2.clone()
            .enumerate()
            .map(|(k, tt)| w2[k] * z.at(tt, y, x, ch))
            .sum::<f64>()
    };
    let out_c = match combine {
        CombineKind::Concat => 4 * c,
        CombineKind::Sum => c,
    };
    let mut out = Vol::zeros(t, h, w, out_c);
    for tt in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let parts = [xy1(y, x, ch), xy2(y, x, ch), xt(tt, y, ch), yt(tt, x, ch)];
                    match combine {
                        CombineKind::Concat => {
                            for (k, v) in parts.iter().enumerate() {
                                *out.at_mut(tt, y, x, k * c + ch) = *v;
                            }
                        }
                        CombineKind::Sum => *out.at_mut(tt, y, x, ch) = parts.iter().sum(),
                    }
                }
            }
        }
    }
    out
}

/// Encoder, segment-pooled factorization, recomposition and decoder.
pub fn reconstruct(ae: &AutoEncoder, p: &Params, clip: &Vol) -> Vol {
    let LatentKind::FourPlane {
        combine, reduce, ..
    } = ae.kind
    else {
        return decoder(ae, p, &encoder(ae, p, clip));
    };
    let z = encoder(ae, p, clip);
    let weights = match reduce {
        ReduceTag::MeanPool => None,
        ReduceTag::LinearProj => {
            Some(["proj.xt", "proj.yt", "proj.xy1", "proj.xy2"].map(|n| softmax(&p[n].1)))
        }
    };
    decoder(ae, p, &factorize_recompose(&z, combine, weights))
}

/// Mean squared reconstruction error of a deterministic (non-variational) codec.
pub fn loss(ae: &AutoEncoder, p: &Params, clip: &Vol) -> f64 {
    assert!(!ae.config.variational);
    let r = reconstruct(ae, p, clip);
    r.data
        .iter()
        .zip(&clip.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / r.data.len() as f64
}
