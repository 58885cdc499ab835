//! Forward definitions of the differentiable primitives.

use std::rc::Rc;

use super::kernels::{self, ConvGeom, MatRef};
use super::{Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{strides_of, NdTensor};

/// How the right operand of a binary op maps onto the output.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand equals the trailing `len` elements, repeated.
    Suffix(usize),
    /// Right operand index for every output element.
    Index(Rc<Vec<u32>>),
}

impl Broadcast {
    /// Numpy-style broadcast of `b` onto `out` (never grows `out`).
    pub(crate) fn resolve(out: &[usize], b: &[usize]) -> Option<Self> {
        if out == b {
            return Some(Self::Same);
        }
        if b.len() > out.len() {
            return None;
        }
        let lead = out.len() - b.len();
        if out[lead..] == *b {
            return Some(Self::Suffix(b.iter().product()));
        }
        if b.iter()
            .zip(&out[lead..])
            .any(|(&bd, &od)| bd != od && bd != 1)
        {
            return None;
        }
        let b_strides = strides_of(b);
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..n {
            let mut off = 0;
            for (j, &bd) in b.iter().enumerate() {
                if bd != 1 {
                    off += idx[lead + j] * b_strides[j];
                }
            }
            map.push(off as u32);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Some(Self::Index(Rc::new(map)))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Suffix(len) => i % len,
            Self::Index(map) => map[i] as usize,
        }
    }
}

pub(crate) fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let s = src_strides[last];
        for j in 0..out_shape[last] {
            out.push(data[base + j * s]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: u8) -> Result<Var<'t>> {
        let (mut a, mut b) = (self, other);
        let (va, vb) = (a.value(), b.value());
        let map = match Broadcast::resolve(va.shape(), vb.shape()) {
            Some(m) => m,
            None if kind != b'-' => {
                // commutative ops may broadcast the left operand instead
                let m = Broadcast::resolve(vb.shape(), va.shape()).ok_or_else(|| {
                    shape_err!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape())
                })?;
                std::mem::swap(&mut a, &mut b);
                m
            }
            None => {
                return Err(shape_err!(
                    "cannot broadcast {:?} onto {:?}",
                    vb.shape(),
                    va.shape()
                ))
            }
        };
        let (va, vb) = (a.value(), b.value());
        let (x, y) = (va.data(), vb.data());
        let data: Vec<f32> = match (&map, kind) {
            (Broadcast::Same, b'+') => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            (Broadcast::Same, b'-') => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            (Broadcast::Same, _) => x.iter().zip(y).map(|(p, q)| p * q).collect(),
            (_, b'+') => x
                .iter()
                .enumerate()
                .map(|(i, p)| p + y[map.at(i)])
                .collect(),
            (_, b'-') => x
                .iter()
                .enumerate()
                .map(|(i, p)| p - y[map.at(i)])
                .collect(),
            _ => x
                .iter()
                .enumerate()
                .map(|(i, p)| p * y[map.at(i)])
                .collect(),
        };
        let value = NdTensor::new(va.shape().to_vec(), data)?;
        let (ia, ib) = (a.id, b.id);
        let op = match kind {
            b'+' => Op::Add { a: ia, b: ib, map },
            b'-' => Op::Sub { a: ia, b: ib, map },
            _ => Op::Mul { a: ia, b: ib, map },
        };
        Ok(self.tape.push(value, op, &[ia, ib]))
    }

    /// Elementwise sum; either operand may broadcast onto the other.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, b'+')
    }

    /// Elementwise difference; `other` broadcasts onto `self`.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, b'-')
    }

    /// Elementwise product; either operand may broadcast onto the other.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, b'*')
    }

    pub fn scale(self, s: f32) -> Var<'t> {
        let value = self.value().map(|x| x * s);
        self.tape
            .push(value, Op::Scale { a: self.id, s }, &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `self + s` elementwise.
    pub fn offset(self, s: f32) -> Var<'t> {
        let value = self.value().map(|x| x + s);
        self.tape.push(value, Op::Offset { a: self.id }, &[self.id])
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (va, vb) = (self.value(), rhs.value());
        if vb.rank() != 2 {
            return Err(shape_err!("matmul rhs must be 2-D, got {:?}", vb.shape()));
        }
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        let k_a = *va.shape().last().unwrap();
        if k_a != k {
            return Err(shape_err!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let rows = va.len() / k;
        let mut out = vec![0.0; rows * n];
        kernels::gemm(
            MatRef::row_major(va.data(), rows, k),
            MatRef::row_major(vb.data(), k, n),
            &mut out,
            0.0,
        );
        self.tape.add_macs((rows * k * n) as u64);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = NdTensor::new(shape, out)?;
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                rows,
                k,
                n,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (va, vb) = (self.value(), rhs.value());
        if va.rank() != 3
            || vb.rank() != 3
            || va.shape()[0] != vb.shape()[0]
            || va.shape()[2] != vb.shape()[1]
        {
            return Err(shape_err!("bmm {:?} x {:?}", va.shape(), vb.shape()));
        }
        let (batch, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                MatRef::row_major(&va.data()[bi * m * k..(bi + 1) * m * k], m, k),
                MatRef::row_major(&vb.data()[bi * k * n..(bi + 1) * k * n], k, n),
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        self.tape.add_macs((batch * m * k * n) as u64);
        let value = NdTensor::new([batch, m, n], out)?;
        Ok(self.tape.push(
            value,
            Op::Bmm {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank()
            || perm
                .iter()
                .any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err!(
                "invalid permutation {perm:?} for rank {}",
                v.rank()
            ));
        }
        let data = permute_data(v.data(), v.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let value = NdTensor::new(shape, data)?;
        Ok(self.tape.push(
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let value = NdTensor::new(v.shape().to_vec(), out).expect("same shape");
        self.tape
            .push(value, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Normalizes the last axis to zero mean and unit variance, without
    /// affine terms; apply scale and shift with [`mul`](Self::mul) and
    /// [`add`](Self::add).
    pub fn layer_norm(self, eps: f32) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        let value = NdTensor::new(v.shape().to_vec(), out).expect("same shape");
        self.tape
            .push(value, Op::LayerNorm { a: self.id, rstd }, &[self.id])
    }

    /// Divides each last-axis vector by `sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(self, eps: f32) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|x| x * x).sum::<f32>() + eps).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = NdTensor::new(v.shape().to_vec(), out).expect("same shape");
        self.tape
            .push(value, Op::L2Normalize { a: self.id, norms }, &[self.id])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&NdTensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = NdTensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = self.value().slice_axis(axis, start, len)?;
        Ok(self.tape.push(
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample_nearest(self, factors: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if factors.len() != v.rank() || factors.iter().any(|&f| f == 0) {
            return Err(shape_err!(
                "upsample factors {factors:?} for shape {:?}",
                v.shape()
            ));
        }
        let out_shape: Vec<usize> = v.shape().iter().zip(factors).map(|(d, f)| d * f).collect();
        let in_strides = v.strides();
        let data = NdTensor::from_fn(out_shape, |idx| {
            let off: usize = idx
                .iter()
                .zip(factors)
                .zip(&in_strides)
                .map(|((i, f), s)| (i / f) * s)
                .sum();
            v.data()[off]
        });
        Ok(self.tape.push(
            data,
            Op::Upsample {
                a: self.id,
                factors: factors.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn silu(self) -> Var<'t> {
        let value = self.value().map(|x| x * kernels::sigmoid(x));
        self.tape.push(value, Op::Silu { a: self.id }, &[self.id])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let value = self.value().map(kernels::gelu);
        self.tape.push(value, Op::Gelu { a: self.id }, &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f32::exp);
        self.tape.push(value, Op::Exp { a: self.id }, &[self.id])
    }

    /// Rows of a `[vocab, d]` table selected by `indices`, giving `[n, d]`.
    pub fn embedding(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(shape_err!(
                "embedding table must be 2-D, got {:?}",
                v.shape()
            ));
        }
        if indices.is_empty() {
            return Err(shape_err!("embedding lookup with no indices"));
        }
        let (vocab, d) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(shape_err!("embedding index {i} out of vocabulary {vocab}"));
            }
            data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let value = NdTensor::new([indices.len(), d], data)?;
        Ok(self.tape.push(
            value,
            Op::Embedding {
                table: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Arithmetic mean along `axis`.
    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let v = self.value();
        check_axis(axis, v.rank())?;
        let outer: usize = v.shape()[..axis].iter().product();
        let ext = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * inner];
        let x = v.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for e in 0..ext {
                let src = &x[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            let inv = 1.0 / ext as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = v.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = NdTensor::new(shape, out)?;
        Ok(self
            .tape
            .push(value, Op::ReduceMean { a: self.id, axis }, &[self.id]))
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.value().sum() as f32;
        self.tape
            .push(NdTensor::scalar(s), Op::SumAll { a: self.id }, &[self.id])
    }

    pub fn mean_all(self) -> Var<'t> {
        let s = self.value().mean() as f32;
        self.tape
            .push(NdTensor::scalar(s), Op::MeanAll { a: self.id }, &[self.id])
    }

    /// Mean squared difference.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(shape_err!("mse {:?} vs {:?}", self.shape(), target.shape()));
        }
        Ok(self.sub(target)?.square().mean_all())
    }

    /// Causal 3D convolution of `[t, h, w, cin]` with `[kt, kh, kw, cin, cout]`.
    ///
    /// Temporal padding is `kt - 1` zero frames on the past side only;
    /// spatial padding is symmetric (`(k - 1) / 2` zeros), so `kh` and `kw`
    /// must be odd. Output extents are `ceil(t / st)`, `ceil(h / sh)`,
    /// `ceil(w / sw)`, and output frame `i` reads input frames
    /// `i * st - kt + 1 ..= i * st`.
    pub fn conv3d_causal(self, kernel: Var<'t>, stride: (usize, usize, usize)) -> Result<Var<'t>> {
        let (vi, vk) = (self.value(), kernel.value());
        if vi.rank() != 4 || vk.rank() != 5 {
            return Err(shape_err!(
                "conv3d input {:?}, kernel {:?}",
                vi.shape(),
                vk.shape()
            ));
        }
        let &[t, h, w, cin] = vi.shape() else {
            unreachable!()
        };
        let &[kt, kh, kw, kcin, cout] = vk.shape() else {
            unreachable!()
        };
        if kcin != cin {
            return Err(shape_err!(
                "conv3d input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!(
                "spatial kernel extents must be odd, got {kh}x{kw}"
            ));
        }
        let (st, sh, sw) = stride;
        if st == 0 || sh == 0 || sw == 0 {
            return Err(shape_err!("zero stride"));
        }
        let geom = ConvGeom {
            t,
            h,
            w,
            cin,
            kt,
            kh,
            kw,
            cout,
            st,
            sh,
            sw,
        };
        let (to, ho, wo) = geom.out_dims();
        let rows = to * ho * wo;
        let patch = geom.patch();
        let cols = geom.im2col(vi.data());
        let mut out = vec![0.0; rows * cout];
        kernels::gemm(
            MatRef::row_major(&cols, rows, patch),
            MatRef::row_major(vk.data(), patch, cout),
            &mut out,
            0.0,
        );
        self.tape.add_macs((rows * patch * cout) as u64);
        let value = NdTensor::new([to, ho, wo, cout], out)?;
        Ok(self.tape.push(
            value,
            Op::Conv3d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }
}
