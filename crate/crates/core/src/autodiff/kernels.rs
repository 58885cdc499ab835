//! Raw numeric kernels shared by forward and backward passes.

/// Matrix view: `rows x cols` with explicit row/column strides into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: every strided access stays within the asserted slice bounds and
    // `c` is an exclusively borrowed row-major m x n buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a causal 3D convolution over `[t, h, w, cin]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        (
            (self.t - 1) / self.st + 1,
            (self.h - 1) / self.sh + 1,
            (self.w - 1) / self.sw + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    fn pads(&self) -> (isize, isize, isize) {
        (
            (self.kt - 1) as isize,
            ((self.kh - 1) / 2) as isize,
            ((self.kw - 1) / 2) as isize,
        )
    }

    /// Visits every (output row, patch offset, input offset) triple whose
    /// source lies inside the input. Padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (to, ho, wo) = self.out_dims();
        let (pt, ph, pw) = self.pads();
        let cin = self.cin;
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (ot * ho + oy) * wo + ox;
                    let mut col = 0;
                    for dt in 0..self.kt {
                        let it = (ot * self.st) as isize - pt + dt as isize;
                        for dy in 0..self.kh {
                            let iy = (oy * self.sh) as isize - ph + dy as isize;
                            for dx in 0..self.kw {
                                let ix = (ox * self.sw) as isize - pw + dx as isize;
                                if it >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (it as usize) < self.t
                                    && (iy as usize) < self.h
                                    && (ix as usize) < self.w
                                {
                                    let src = ((it as usize * self.h + iy as usize) * self.w
                                        + ix as usize)
                                        * cin;
                                    f(row, col, src);
                                }
                                col += cin;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let (to, ho, wo) = self.out_dims();
        let patch = self.patch();
        let cin = self.cin;
        let mut cols = vec![0.0f32; to * ho * wo * patch];
        self.for_each_tap(|row, col, src| {
            let dst = row * patch + col;
            cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    pub fn col2im_add(&self, cols: &[f32], grad_input: &mut [f32]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, col, src| {
            let s = row * patch + col;
            for (g, c) in grad_input[src..src + cin].iter_mut().zip(&cols[s..s + cin]) {
                *g += *c;
            }
        });
    }
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
