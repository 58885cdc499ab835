//! Four-plane factorization of latent volumes and its inverse.
//!
//! A latent volume `Z` of shape `[t, h, w, c]` is projected onto
//!
//! * `xt`: `[t, h, c]`, `Z` reduced along width,
//! * `yt`: `[t, w, c]`, `Z` reduced along height,
//! * `xy1`: `[h, w, c]`, `Z` reduced over frames `0 .. t/2` (floor),
//! * `xy2`: `[h, w, c]`, `Z` reduced over frames `t/2 .. t`.
//!
//! For odd `t` the middle frame belongs to the second segment; for `t = 1`
//! both segments are the single frame, so the two spatial planes coincide.
//! Recomposition queries every plane at each `(t, y, x)` and combines the
//! four feature vectors by concatenation (channel order `xy1, xy2, xt, yt`)
//! or by summation.
//!
//! Token sequences flatten the planes in the order `xt, yt, xy1, xy2`,
//! row-major inside each plane, for a length of `t*h + t*w + 2*h*w`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fpt;
use crate::tensor::NdTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPlaneMode {
    /// Spatial planes pool the two temporal halves of `Z`.
    SegmentPool,
    /// Spatial planes encode the first and last frames on their own.
    BoundaryEncode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineKind {
    Concat,
    Sum,
}

impl CombineKind {
    pub fn output_channels(self, c: usize) -> usize {
        match self {
            Self::Concat => 4 * c,
            Self::Sum => c,
        }
    }
}

/// Which reduction produced a plane set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceTag {
    MeanPool,
    LinearProj,
}

/// Axis-reduction operator used by the factorization.
#[derive(Clone, Debug, PartialEq)]
pub enum ReduceKind {
    MeanPool,
    LinearProj(ProjectionWeights),
}

impl ReduceKind {
    pub fn tag(&self) -> ReduceTag {
        match self {
            Self::MeanPool => ReduceTag::MeanPool,
            Self::LinearProj(_) => ReduceTag::LinearProj,
        }
    }
}

/// Normalised weights of the learned projection, one vector per reduced axis.
///
/// The vectors are softmax-normalised logits, so each sums to one and the
/// all-zero logits give exactly the mean pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    /// Over width (length `w`), producing `xt`.
    pub xt: Vec<f32>,
    /// Over height (length `h`), producing `yt`.
    pub yt: Vec<f32>,
    /// Over the first temporal segment.
    pub xy1: Vec<f32>,
    /// Over the second temporal segment.
    pub xy2: Vec<f32>,
}

impl ProjectionWeights {
    pub fn uniform(t: usize, h: usize, w: usize) -> Self {
        let (s1, s2) = segment_lengths(t);
        let u = |n: usize| vec![1.0 / n as f32; n];
        Self {
            xt: u(w),
            yt: u(h),
            xy1: u(s1),
            xy2: u(s2),
        }
    }

    /// Softmax of raw logits.
    pub fn from_logits(xt: &[f32], yt: &[f32], xy1: &[f32], xy2: &[f32]) -> Self {
        Self {
            xt: softmax(xt),
            yt: softmax(yt),
            xy1: softmax(xy1),
            xy2: softmax(xy2),
        }
    }

    fn check(&self, t: usize, h: usize, w: usize) -> Result<()> {
        let (s1, s2) = segment_lengths(t);
        let want = [
            (self.xt.len(), w, "xt"),
            (self.yt.len(), h, "yt"),
            (self.xy1.len(), s1, "xy1"),
            (self.xy2.len(), s2, "xy2"),
        ];
        for (got, exp, name) in want {
            if got != exp {
                return Err(shape_err!(
                    "projection weights {name}: length {got}, reduced extent {exp}"
                ));
            }
        }
        Ok(())
    }
}

fn softmax(x: &[f32]) -> Vec<f32> {
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Lengths of the two temporal segments pooled into the spatial planes.
pub fn segment_lengths(t: usize) -> (usize, usize) {
    if t <= 1 {
        (1, 1)
    } else {
        (t / 2, t - t / 2)
    }
}

/// Extents and metadata of a plane set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneLayout {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub mode: SpatialPlaneMode,
    pub reduce: ReduceTag,
}

impl PlaneLayout {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let l = Self {
            t,
            h,
            w,
            c,
            mode: SpatialPlaneMode::SegmentPool,
            reduce: ReduceTag::MeanPool,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(shape_err!(
                "degenerate plane layout t={} h={} w={} c={}",
                self.t,
                self.h,
                self.w,
                self.c
            ));
        }
        Ok(())
    }

    /// Token count of the full four-plane sequence.
    pub fn sequence_len(&self) -> usize {
        PlaneKind::ALL.iter().map(|&k| self.plane_tokens(k)).sum()
    }

    pub fn plane_extent(&self, kind: PlaneKind) -> (usize, usize) {
        match kind {
            PlaneKind::Xt => (self.t, self.h),
            PlaneKind::Yt => (self.t, self.w),
            PlaneKind::Xy1 | PlaneKind::Xy2 => (self.h, self.w),
        }
    }

    pub fn plane_tokens(&self, kind: PlaneKind) -> usize {
        let (r, c) = self.plane_extent(kind);
        r * c
    }
}

/// One of the four planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneKind {
    Xt,
    Yt,
    Xy1,
    Xy2,
}

impl PlaneKind {
    /// Flattening order.
    pub const ALL: [PlaneKind; 4] = [PlaneKind::Xt, PlaneKind::Yt, PlaneKind::Xy1, PlaneKind::Xy2];
}

/// The four factorized planes of one latent volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSet {
    pub xy1: NdTensor,
    pub xy2: NdTensor,
    pub xt: NdTensor,
    pub yt: NdTensor,
    pub layout: PlaneLayout,
}

impl PlaneSet {
    pub fn new(
        xy1: NdTensor,
        xy2: NdTensor,
        xt: NdTensor,
        yt: NdTensor,
        layout: PlaneLayout,
    ) -> Result<Self> {
        layout.validate()?;
        let set = Self {
            xy1,
            xy2,
            xt,
            yt,
            layout,
        };
        for kind in PlaneKind::ALL {
            let (r, c) = layout.plane_extent(kind);
            let want = [r, c, layout.c];
            if set.plane(kind).shape() != want {
                return Err(shape_err!(
                    "plane {kind:?} has shape {:?}, layout needs {want:?}",
                    set.plane(kind).shape()
                ));
            }
        }
        Ok(set)
    }

    pub fn plane(&self, kind: PlaneKind) -> &NdTensor {
        match kind {
            PlaneKind::Xt => &self.xt,
            PlaneKind::Yt => &self.yt,
            PlaneKind::Xy1 => &self.xy1,
            PlaneKind::Xy2 => &self.xy2,
        }
    }

    pub fn plane_mut(&mut self, kind: PlaneKind) -> &mut NdTensor {
        match kind {
            PlaneKind::Xt => &mut self.xt,
            PlaneKind::Yt => &mut self.yt,
            PlaneKind::Xy1 => &mut self.xy1,
            PlaneKind::Xy2 => &mut self.xy2,
        }
    }

    /// Tokens of the listed planes, in the listed order, as `[n, c]`.
    pub fn tokens_of(&self, kinds: &[PlaneKind]) -> Result<NdTensor> {
        let c = self.layout.c;
        let parts: Vec<NdTensor> = kinds
            .iter()
            .map(|&k| {
                let p = self.plane(k);
                p.reshape([p.len() / c, c])
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&NdTensor> = parts.iter().collect();
        NdTensor::concat(&refs, 0)
    }

    /// Overwrites the listed planes from `[n, c]` tokens.
    pub fn set_tokens_of(&mut self, kinds: &[PlaneKind], tokens: &NdTensor) -> Result<()> {
        let c = self.layout.c;
        let need: usize = kinds.iter().map(|&k| self.layout.plane_tokens(k)).sum();
        if tokens.shape() != [need, c] {
            return Err(shape_err!(
                "expected [{need}, {c}] tokens, got {:?}",
                tokens.shape()
            ));
        }
        let mut start = 0;
        for &k in kinds {
            let n = self.layout.plane_tokens(k);
            let (r, cc) = self.layout.plane_extent(k);
            *self.plane_mut(k) = tokens.slice_axis(0, start, n)?.reshape([r, cc, c])?;
            start += n;
        }
        Ok(())
    }
}

/// Reduction applied on the tape.
pub enum PlaneReducer<'t> {
    MeanPool,
    /// Normalised weight vectors (see [`ProjectionWeights`]).
    Weighted {
        xt: Var<'t>,
        yt: Var<'t>,
        xy1: Var<'t>,
        xy2: Var<'t>,
    },
}

/// Plane tensors living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PlaneVars<'t> {
    pub xy1: Var<'t>,
    pub xy2: Var<'t>,
    pub xt: Var<'t>,
    pub yt: Var<'t>,
}

fn reduce_axis<'t>(z: Var<'t>, axis: usize, weights: Option<Var<'t>>) -> Result<Var<'t>> {
    match weights {
        None => z.mean_axis(axis, false),
        Some(wv) => {
            let shape = z.shape();
            let n = shape[axis];
            if wv.shape() != [n] {
                return Err(shape_err!(
                    "reduction weights {:?} for extent {n}",
                    wv.shape()
                ));
            }
            let mut perm: Vec<usize> = (0..shape.len()).filter(|&a| a != axis).collect();
            perm.push(axis);
            let mut out_shape: Vec<usize> =
                perm[..perm.len() - 1].iter().map(|&a| shape[a]).collect();
            let moved = z.permute(&perm)?;
            let y = moved.matmul(wv.reshape(&[n, 1])?)?;
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            y.reshape(&out_shape)
        }
    }
}

/// Spatio-temporal planes `(xt, yt)` of a `[t, h, w, c]` volume.
pub fn spatiotemporal_planes<'t>(
    z: Var<'t>,
    reducer: &PlaneReducer<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (wx, wy) = match reducer {
        PlaneReducer::MeanPool => (None, None),
        PlaneReducer::Weighted { xt, yt, .. } => (Some(*xt), Some(*yt)),
    };
    Ok((reduce_axis(z, 2, wx)?, reduce_axis(z, 1, wy)?))
}

/// Segment-pooled factorization on the tape.
pub fn factorize_var<'t>(z: Var<'t>, reducer: &PlaneReducer<'t>) -> Result<PlaneVars<'t>> {
    let shape = z.shape();
    if shape.len() != 4 {
        return Err(shape_err!("latent volume must be [t,h,w,c], got {shape:?}"));
    }
    let t = shape[0];
    let (xt, yt) = spatiotemporal_planes(z, reducer)?;
    let (s1, s2) = segment_lengths(t);
    let (seg1, seg2) = if t == 1 {
        (z, z)
    } else {
        (z.slice(0, 0, s1)?, z.slice(0, s1, s2)?)
    };
    let (w1, w2) = match reducer {
        PlaneReducer::MeanPool => (None, None),
        PlaneReducer::Weighted { xy1, xy2, .. } => (Some(*xy1), Some(*xy2)),
    };
    Ok(PlaneVars {
        xy1: reduce_axis(seg1, 0, w1)?,
        xy2: reduce_axis(seg2, 0, w2)?,
        xt,
        yt,
    })
}

/// Back-projects the planes into a `[t, h, w, 4c]` (concat) or
/// `[t, h, w, c]` (sum) volume.
pub fn recompose_var<'t>(planes: &PlaneVars<'t>, combine: CombineKind) -> Result<Var<'t>> {
    let xt_shape = planes.xt.shape();
    let yt_shape = planes.yt.shape();
    let xy_shape = planes.xy1.shape();
    let (t, h, c) = (xt_shape[0], xt_shape[1], xt_shape[2]);
    let w = yt_shape[1];
    if yt_shape != [t, w, c] || xy_shape != [h, w, c] || planes.xy2.shape() != [h, w, c] {
        return Err(shape_err!(
            "inconsistent planes xt {xt_shape:?} yt {yt_shape:?} xy {xy_shape:?} xy2 {:?}",
            planes.xy2.shape()
        ));
    }
    let f1 = planes
        .xy1
        .reshape(&[1, h, w, c])?
        .upsample_nearest(&[t, 1, 1, 1])?;
    let f2 = planes
        .xy2
        .reshape(&[1, h, w, c])?
        .upsample_nearest(&[t, 1, 1, 1])?;
    let fxt = planes
        .xt
        .reshape(&[t, h, 1, c])?
        .upsample_nearest(&[1, 1, w, 1])?;
    let fyt = planes
        .yt
        .reshape(&[t, 1, w, c])?
        .upsample_nearest(&[1, h, 1, 1])?;
    match combine {
        CombineKind::Concat => Var::concat(&[f1, f2, fxt, fyt], 3),
        CombineKind::Sum => f1.add(f2)?.add(fxt)?.add(fyt),
    }
}

fn check_volume(z: &NdTensor) -> Result<(usize, usize, usize, usize)> {
    match *z.shape() {
        [t, h, w, c] => Ok((t, h, w, c)),
        _ => Err(shape_err!(
            "latent volume must be [t,h,w,c], got {:?}",
            z.shape()
        )),
    }
}

fn weights_on<'t>(tape: &'t Tape, reduce: &ReduceKind) -> PlaneReducer<'t> {
    match reduce {
        ReduceKind::MeanPool => PlaneReducer::MeanPool,
        ReduceKind::LinearProj(w) => {
            let v = |x: &Vec<f32>| {
                tape.constant(NdTensor::new([x.len()], x.clone()).expect("non-empty"))
            };
            PlaneReducer::Weighted {
                xt: v(&w.xt),
                yt: v(&w.yt),
                xy1: v(&w.xy1),
                xy2: v(&w.xy2),
            }
        }
    }
}

/// Segment-pooled factorization of a latent volume.
pub fn factorize(z: &NdTensor, reduce: &ReduceKind) -> Result<PlaneSet> {
    let (t, h, w, c) = check_volume(z)?;
    if let ReduceKind::LinearProj(pw) = reduce {
        pw.check(t, h, w)?;
    }
    let tape = Tape::no_grad();
    let planes = factorize_var(tape.constant(z.clone()), &weights_on(&tape, reduce))?;
    let layout = PlaneLayout {
        t,
        h,
        w,
        c,
        mode: SpatialPlaneMode::SegmentPool,
        reduce: reduce.tag(),
    };
    PlaneSet::new(
        planes.xy1.to_tensor(),
        planes.xy2.to_tensor(),
        planes.xt.to_tensor(),
        planes.yt.to_tensor(),
        layout,
    )
}

/// Factorization whose spatial planes are supplied by encoding the
/// boundary frames; the spatio-temporal planes still come from `z`.
pub fn factorize_with_boundary(
    z: &NdTensor,
    reduce: &ReduceKind,
    first: NdTensor,
    last: NdTensor,
) -> Result<PlaneSet> {
    let mut set = factorize(z, reduce)?;
    set.layout.mode = SpatialPlaneMode::BoundaryEncode;
    let want = [set.layout.h, set.layout.w, set.layout.c];
    for p in [&first, &last] {
        if p.shape() != want {
            return Err(shape_err!(
                "boundary plane {:?}, expected {want:?}",
                p.shape()
            ));
        }
    }
    set.xy1 = first;
    set.xy2 = last;
    Ok(set)
}

/// Reconstructs the intermediate feature volume.
pub fn recompose(planes: &PlaneSet, combine: CombineKind) -> Result<NdTensor> {
    let tape = Tape::no_grad();
    let vars = PlaneVars {
        xy1: tape.constant(planes.xy1.clone()),
        xy2: tape.constant(planes.xy2.clone()),
        xt: tape.constant(planes.xt.clone()),
        yt: tape.constant(planes.yt.clone()),
    };
    Ok(recompose_var(&vars, combine)?.to_tensor())
}

/// Flattens all four planes into `[t*h + t*w + 2*h*w, c]` tokens.
pub fn flatten_sequence(planes: &PlaneSet) -> Result<NdTensor> {
    planes.tokens_of(&PlaneKind::ALL)
}

/// Exact inverse of [`flatten_sequence`].
pub fn unflatten_sequence(tokens: &NdTensor, layout: PlaneLayout) -> Result<PlaneSet> {
    layout.validate()?;
    let (t, h, w, c) = (layout.t, layout.h, layout.w, layout.c);
    let mut set = PlaneSet {
        xy1: NdTensor::zeros([h, w, c]),
        xy2: NdTensor::zeros([h, w, c]),
        xt: NdTensor::zeros([t, h, c]),
        yt: NdTensor::zeros([t, w, c]),
        layout,
    };
    set.set_tokens_of(&PlaneKind::ALL, tokens)?;
    Ok(set)
}

/// Three-plane variant: one spatial plane over all frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneSet {
    pub xy: NdTensor,
    pub xt: NdTensor,
    pub yt: NdTensor,
}

impl TriPlaneSet {
    pub fn sequence_len(&self) -> usize {
        (self.xy.len() + self.xt.len() + self.yt.len()) / self.xy.shape()[2]
    }

    /// Tokens in the order `xt, yt, xy`.
    pub fn flatten(&self) -> Result<NdTensor> {
        let c = self.xy.shape()[2];
        let parts = [&self.xt, &self.yt, &self.xy]
            .iter()
            .map(|p| p.reshape([p.len() / c, c]))
            .collect::<Result<Vec<_>>>()?;
        NdTensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    }
}

/// Tri-plane factorization. With a learned projection the spatial plane
/// uses the concatenated segment weights renormalised over all frames.
pub fn factorize_triplane(z: &NdTensor, reduce: &ReduceKind) -> Result<TriPlaneSet> {
    let (t, h, w, _) = check_volume(z)?;
    let tape = Tape::no_grad();
    let zv = tape.constant(z.clone());
    let xy_weights = match reduce {
        ReduceKind::MeanPool => None,
        ReduceKind::LinearProj(pw) => {
            pw.check(t, h, w)?;
            let mut all: Vec<f32> = if t == 1 {
                vec![1.0]
            } else {
                pw.xy1.iter().chain(&pw.xy2).copied().collect()
            };
            let s: f32 = all.iter().sum();
            all.iter_mut().for_each(|v| *v /= s);
            Some(tape.constant(NdTensor::new([t], all)?))
        }
    };
    let (xt, yt) = spatiotemporal_planes(zv, &weights_on(&tape, reduce))?;
    let xy = reduce_axis(zv, 0, xy_weights)?;
    Ok(TriPlaneSet {
        xy: xy.to_tensor(),
        xt: xt.to_tensor(),
        yt: yt.to_tensor(),
    })
}

const PLANES_MAGIC: &[u8; 4] = b"FPPS";
const PLANES_VERSION: u32 = 1;

/// Writes `FPPS | u32 version | u32 header_len | JSON layout | 4 x (u64 len | FPT1 blob)`
/// with the blobs in the order `xy1, xy2, xt, yt`.
pub fn write_planes<W: Write>(mut w: W, planes: &PlaneSet) -> Result<()> {
    let header = serde_json::to_vec(&planes.layout)?;
    w.write_all(PLANES_MAGIC)?;
    w.write_all(&PLANES_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for p in [&planes.xy1, &planes.xy2, &planes.xt, &planes.yt] {
        let blob = fpt::to_bytes(p);
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(&blob)?;
    }
    Ok(())
}

pub fn read_planes<R: Read>(mut r: R) -> Result<PlaneSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PLANES_MAGIC {
        return Err(Error::Format("not a plane-set file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != PLANES_VERSION {
        return Err(Error::Format(format!(
            "unsupported plane-set version {version}"
        )));
    }
    r.read_exact(&mut b4)?;
    let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut header)?;
    let layout: PlaneLayout = serde_json::from_slice(&header)?;
    let mut blobs = Vec::with_capacity(4);
    for _ in 0..4 {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut blob = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut blob)?;
        blobs.push(fpt::from_bytes(&blob)?);
    }
    let yt = blobs.pop().unwrap();
    let xt = blobs.pop().unwrap();
    let xy2 = blobs.pop().unwrap();
    let xy1 = blobs.pop().unwrap();
    PlaneSet::new(xy1, xy2, xt, yt, layout).map_err(|e| Error::Format(e.to_string()))
}

/// Channel count the decoder must accept for a combine choice.
pub fn check_decoder_channels(combine: CombineKind, c: usize, decoder_in: usize) -> Result<()> {
    if combine.output_channels(c) != decoder_in {
        return Err(config_err!(
            "{combine:?} produces {} channels but the decoder takes {decoder_in}",
            combine.output_channels(c)
        ));
    }
    Ok(())
}
