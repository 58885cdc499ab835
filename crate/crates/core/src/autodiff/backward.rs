//! Vector-Jacobian products for every primitive.

use super::kernels::{self, MatRef};
use super::ops::permute_data;
use super::{Node, Op};
use crate::tensor::{strides_of, NdTensor};

fn acc<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f32>>],
    id: usize,
) -> Option<&'a mut Vec<f32>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(super) fn propagate(
    nodes: &[Node],
    op: &Op,
    out: &NdTensor,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let val = |id: usize| &*nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::Add { a, b, map } | Op::Sub { a, b, map } => {
            let sign = if matches!(op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[map.at(i)] += sign * gi;
                }
            }
        }
        Op::Mul { a, b, map } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * vb[map.at(i)];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[map.at(i)] += gi * va[i];
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi);
            }
        }
        Op::Offset { a } | Op::Reshape { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
        Op::MatMul { a, b, rows, k, n } => {
            let (rows, k, n) = (*rows, *k, *n);
            let gm = MatRef::row_major(g, rows, n);
            if nodes[*a].requires_grad {
                let wb = val(*b).data();
                let ga = acc(nodes, grads, *a).unwrap();
                kernels::gemm(gm, MatRef::row_major(wb, k, n).t(), ga, 1.0);
            }
            if nodes[*b].requires_grad {
                let xa = val(*a).data();
                let gb = acc(nodes, grads, *b).unwrap();
                kernels::gemm(MatRef::row_major(xa, rows, k).t(), gm, gb, 1.0);
            }
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            for bi in 0..*batch {
                let gm = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                if nodes[*a].requires_grad {
                    let vb = &val(*b).data()[bi * k * n..(bi + 1) * k * n];
                    let ga = acc(nodes, grads, *a).unwrap();
                    kernels::gemm(
                        gm,
                        MatRef::row_major(vb, k, n).t(),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        1.0,
                    );
                }
                if nodes[*b].requires_grad {
                    let va = &val(*a).data()[bi * m * k..(bi + 1) * m * k];
                    let gb = acc(nodes, grads, *b).unwrap();
                    kernels::gemm(
                        MatRef::row_major(va, m, k).t(),
                        gm,
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        1.0,
                    );
                }
            }
        }
        Op::Permute { a, perm } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out.shape(), &inv);
                add_into(ga, &back);
            }
        }
        Op::Softmax { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                for ((y, gy), gx) in out.data().chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f32 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                let inv_d = 1.0 / d as f32;
                for (r, ((y, gy), gx)) in rstd
                    .iter()
                    .zip(out.data().chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)))
                {
                    let mean_g: f32 = gy.iter().sum::<f32>() * inv_d;
                    let mean_gy: f32 = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f32>() * inv_d;
                    for j in 0..d {
                        gx[j] += r * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let d = *out.shape().last().unwrap();
                for (nrm, ((y, gy), gx)) in norms
                    .iter()
                    .zip(out.data().chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)))
                {
                    let dot: f32 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        gx[j] += (gy[j] - y[j] * dot) / nrm;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let ext = val(p).shape()[*axis];
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_into(
                            &mut gp[o * ext * inner..(o + 1) * ext * inner],
                            &g[src..src + ext * inner],
                        );
                    }
                }
                offset += ext;
            }
        }
        Op::Slice { a, axis, start } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let in_shape = nodes[*a].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let len = out.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    add_into(
                        &mut ga[dst..dst + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
        }
        Op::Upsample { a, factors } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let in_strides = strides_of(nodes[*a].value.shape());
                let out_shape = out.shape();
                let mut idx = vec![0usize; out_shape.len()];
                for gi in g {
                    let off: usize = idx
                        .iter()
                        .zip(factors)
                        .zip(&in_strides)
                        .map(|((i, f), s)| (i / f) * s)
                        .sum();
                    ga[off] += gi;
                    for ax in (0..out_shape.len()).rev() {
                        idx[ax] += 1;
                        if idx[ax] < out_shape[ax] {
                            break;
                        }
                        idx[ax] = 0;
                    }
                }
            }
        }
        Op::Silu { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &x), gi) in ga.iter_mut().zip(nodes[*a].value.data()).zip(g) {
                    let s = kernels::sigmoid(x);
                    *d += gi * s * (1.0 + x * (1.0 - s));
                }
            }
        }
        Op::Gelu { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, &x), gi) in ga.iter_mut().zip(nodes[*a].value.data()).zip(g) {
                    *d += gi * kernels::gelu_grad(x);
                }
            }
        }
        Op::Exp { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((d, y), gi) in ga.iter_mut().zip(out.data()).zip(g) {
                    *d += gi * y;
                }
            }
        }
        Op::Embedding { table, indices } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = out.shape()[1];
                for (row, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[row * d..(row + 1) * d]);
                }
            }
        }
        Op::ReduceMean { a, axis } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let in_shape = nodes[*a].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let ext = in_shape[*axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let inv = 1.0 / ext as f32;
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for e in 0..ext {
                        let dst = &mut ga[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll { a } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let s = g[0] / ga.len() as f32;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Conv3d {
            input,
            kernel,
            geom,
        } => {
            let (to, ho, wo) = geom.out_dims();
            let rows = to * ho * wo;
            let patch = geom.patch();
            let gm = MatRef::row_major(g, rows, geom.cout);
            if nodes[*kernel].requires_grad {
                let cols = geom.im2col(nodes[*input].value.data());
                let gk = acc(nodes, grads, *kernel).unwrap();
                kernels::gemm(MatRef::row_major(&cols, rows, patch).t(), gm, gk, 1.0);
            }
            if nodes[*input].requires_grad {
                let k = nodes[*kernel].value.data();
                let mut dcols = vec![0.0; rows * patch];
                kernels::gemm(
                    gm,
                    MatRef::row_major(k, patch, geom.cout).t(),
                    &mut dcols,
                    0.0,
                );
                let gi = acc(nodes, grads, *input).unwrap();
                geom.col2im_add(&dcols, gi);
            }
        }
    }
}
