//! Double-precision reference versions of the tape primitives, written from
//! their index definitions. They serve as the forward pass that finite
//! differences are taken through.

use fourplane_core::NdTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct D {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl D {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_tensor(x: &NdTensor) -> Self {
        Self::new(x.shape(), x.data().iter().map(|&v| v as f64).collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v])
    }

    fn strides(shape: &[usize]) -> Vec<usize> {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    }

    fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; shape.len()];
        for i in (0..shape.len()).rev() {
            idx[i] = flat % shape[i];
            flat /= shape[i];
        }
        idx
    }

    fn at(&self, idx: &[usize]) -> f64 {
        let s = Self::strides(&self.shape);
        self.data[idx.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    fn from_fn(shape: &[usize], f: impl Fn(&[usize]) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(|i| f(&Self::unravel(shape, i))).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise op with numpy-style right-aligned broadcasting.
    pub fn zip(&self, other: &D, f: impl Fn(f64, f64) -> f64) -> Self {
        let rank = self.shape.len().max(other.shape.len());
        let pad = |s: &[usize]| [vec![1; rank - s.len()], s.to_vec()].concat();
        let (sa, sb) = (pad(&self.shape), pad(&other.shape));
        let out: Vec<usize> = sa.iter().zip(&sb).map(|(&a, &b)| a.max(b)).collect();
        let a = D::new(&sa, self.data.clone());
        let b = D::new(&sb, other.data.clone());
        D::from_fn(&out, |i| {
            let ia: Vec<usize> = i
                .iter()
                .zip(&sa)
                .map(|(&i, &n)| if n == 1 { 0 } else { i })
                .collect();
            let ib: Vec<usize> = i
                .iter()
                .zip(&sb)
                .map(|(&i, &n)| if n == 1 { 0 } else { i })
                .collect();
            f(a.at(&ia), b.at(&ib))
        })
    }

    fn rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let d = *self.shape.last().unwrap();
        Self::new(&self.shape, self.data.chunks(d).flat_map(f).collect())
    }

    pub fn softmax(&self) -> Self {
        self.rows(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
    }

    pub fn layer_norm(&self, eps: f64) -> Self {
        self.rows(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
        })
    }

    pub fn l2_normalize(&self, eps: f64) -> Self {
        self.rows(|r| {
            let n = (r.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            r.iter().map(|v| v / n).collect()
        })
    }

    /// `[.., m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&self, other: &D) -> Self {
        let r = self.shape.len();
        let k = self.shape[r - 1];
        let n = *other.shape.last().unwrap();
        let batched = other.shape.len() == 3;
        let mut shape = self.shape.clone();
        shape[r - 1] = n;
        D::from_fn(&shape, |i| {
            let (row, col) = (i[r - 2], i[r - 1]);
            let lead = &i[..r - 2];
            (0..k)
                .map(|kk| {
                    let a = self.at(&[lead, &[row, kk]].concat());
                    let b = if batched {
                        other.at(&[lead[0], kk, col])
                    } else {
                        other.at(&[kk, col])
                    };
                    a * b
                })
                .sum()
        })
    }

    pub fn concat(parts: &[&D], axis: usize) -> Self {
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        D::from_fn(&shape, |i| {
            let mut j = i.to_vec();
            for p in parts {
                if j[axis] < p.shape[axis] {
                    return p.at(&j);
                }
                j[axis] -= p.shape[axis];
            }
            unreachable!()
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[axis] = len;
        D::from_fn(&shape, |i| {
            let mut j = i.to_vec();
            j[axis] += start;
            self.at(&j)
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        D::from_fn(&shape, |i| {
            let mut j = vec![0; i.len()];
            for (k, &p) in perm.iter().enumerate() {
                j[p] = i[k];
            }
            self.at(&j)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        D::new(shape, self.data.clone())
    }

    pub fn upsample(&self, factors: &[usize]) -> Self {
        let shape: Vec<usize> = self.shape.iter().zip(factors).map(|(s, f)| s * f).collect();
        D::from_fn(&shape, |i| {
            let j: Vec<usize> = i.iter().zip(factors).map(|(i, f)| i / f).collect();
            self.at(&j)
        })
    }

    pub fn mean_axis(&self, axis: usize, keep: bool) -> Self {
        let mut shape = self.shape.clone();
        let n = shape[axis];
        shape[axis] = 1;
        let out = D::from_fn(&shape, |i| {
            (0..n)
                .map(|k| {
                    let mut j = i.to_vec();
                    j[axis] = k;
                    self.at(&j)
                })
                .sum::<f64>()
                / n as f64
        });
        if keep {
            out
        } else {
            shape.remove(axis);
            out.reshape(&shape)
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn embedding(&self, indices: &[usize]) -> Self {
        let d = self.shape[1];
        D::from_fn(&[indices.len(), d], |i| self.at(&[indices[i[0]], i[1]]))
    }

    /// Causal 3D convolution: time padded by `kt - 1` frames in front only,
    /// space padded symmetrically; no bias.
    pub fn conv3d_causal(&self, k: &D, stride: (usize, usize, usize)) -> Self {
        let (t, h, w, cin) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (kt, kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[4]);
        let out = [
            (t - 1) / stride.0 + 1,
            (h - 1) / stride.1 + 1,
            (w - 1) / stride.2 + 1,
            cout,
        ];
        D::from_fn(&out, |i| {
            let mut acc = 0.0;
            for dt in 0..kt {
                let it = (i[0] * stride.0 + dt) as isize - (kt as isize - 1);
                for dy in 0..kh {
                    let iy = (i[1] * stride.1 + dy) as isize - (kh as isize - 1) / 2;
                    for dx in 0..kw {
                        let ix = (i[2] * stride.2 + dx) as isize - (kw as isize - 1) / 2;
                        if it < 0
                            || iy < 0
                            || ix < 0
                            || it as usize >= t
                            || iy as usize >= h
                            || ix as usize >= w
                        {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += k.at(&[dt, dy, dx, ci, i[3]])
                                * self.at(&[it as usize, iy as usize, ix as usize, ci]);
                        }
                    }
                }
            }
            acc
        })
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}
