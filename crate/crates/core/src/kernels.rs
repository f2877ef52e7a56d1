//! Compute kernels behind the tape ops: batched GEMM and im2col convolution.
//!
//! Batch elements are processed in parallel, but every reduction that spans
//! the batch is summed in a fixed order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Samples per partial weight-gradient buffer. Fixed so the reduction tree is
/// independent of the thread pool.
const WGRAD_GROUP: usize = 4;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if w[2] > ph || w[3] > pw {
            return Err(Error::config(format!(
                "conv2d kernel {}x{} exceeds padded input {ph}x{pw}",
                w[2], w[3]
            )));
        }
        if (ph - w[2]) % stride != 0 || (pw - w[3]) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent not integral: input {}x{}, kernel {}x{}, stride {stride}, pad {pad}",
                x[2], x[3], w[2], w[3]
            )));
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            out_h: (ph - w[2]) / stride + 1,
            out_w: (pw - w[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut Vec<T>) {
        let n = self.out_px();
        cols.clear();
        cols.resize(self.patch() * n, T::zero());
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * n..][..n];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * self.in_w..][..self.in_w];
                        let dst = &mut row[oy * self.out_w..][..self.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.in_w as isize {
                                *d = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.out_px();
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * n..][..n];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.in_w..][..self.in_w];
                        let src = &row[oy * self.out_w..][..self.out_w];
                        for (ox, &s) in src.iter().enumerate() {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.in_w as isize {
                                dst[xx as usize] = dst[xx as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, n) = (g.patch(), g.out_px());
    let mut out = vec![T::zero(); g.batch * g.out_c * n];
    out.par_chunks_mut(g.out_c * n)
        .zip(x.par_chunks(g.in_sample()))
        .for_each_init(Vec::new, |cols, (y, xb)| {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, cols);
                cols
            };
            T::gemm(
                g.out_c,
                k,
                n,
                T::one(),
                (w, k as isize, 1),
                (src, n as isize, 1),
                T::zero(),
                (y, n as isize, 1),
            );
            if let Some(b) = bias {
                for (row, &bo) in y.chunks_mut(n).zip(b) {
                    row.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        });
    out
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let (k, n) = (g.patch(), g.out_px());
    let mut dx = vec![T::zero(); g.batch * g.in_sample()];
    dx.par_chunks_mut(g.in_sample())
        .zip(dy.par_chunks(g.out_c * n))
        .for_each_init(Vec::new, |dcols: &mut Vec<T>, (dxb, dyb)| {
            if g.is_pointwise() {
                T::gemm(
                    k,
                    g.out_c,
                    n,
                    T::one(),
                    (w, 1, k as isize),
                    (dyb, n as isize, 1),
                    T::zero(),
                    (dxb, n as isize, 1),
                );
                return;
            }
            dcols.clear();
            dcols.resize(k * n, T::zero());
            T::gemm(
                k,
                g.out_c,
                n,
                T::one(),
                (w, 1, k as isize),
                (dyb, n as isize, 1),
                T::zero(),
                (dcols, n as isize, 1),
            );
            g.col2im(dcols, dxb);
        });
    dx
}

/// Gradients with respect to the weight and (summed) bias.
pub fn conv2d_backward_params<T: Scalar>(g: &ConvGeom, dy: &[T], x: &[T]) -> (Vec<T>, Vec<T>) {
    let (k, n) = (g.patch(), g.out_px());
    let wlen = g.out_c * k;
    let groups: Vec<usize> = (0..g.batch).step_by(WGRAD_GROUP).collect();
    let partials: Vec<Vec<T>> = groups
        .par_iter()
        .map(|&start| {
            let mut acc = vec![T::zero(); wlen];
            let mut cols = Vec::new();
            for b in start..(start + WGRAD_GROUP).min(g.batch) {
                let xb = &x[b * g.in_sample()..][..g.in_sample()];
                let dyb = &dy[b * g.out_c * n..][..g.out_c * n];
                let src: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    g.im2col(xb, &mut cols);
                    &cols
                };
                T::gemm(
                    g.out_c,
                    n,
                    k,
                    T::one(),
                    (dyb, n as isize, 1),
                    (src, 1, n as isize),
                    T::one(),
                    (&mut acc, k as isize, 1),
                );
            }
            acc
        })
        .collect();
    let mut dw = vec![T::zero(); wlen];
    for p in &partials {
        for (d, &v) in dw.iter_mut().zip(p) {
            *d = *d + v;
        }
    }
    let mut db = vec![T::zero(); g.out_c];
    for dyb in dy.chunks(g.out_c * n) {
        for (d, row) in db.iter_mut().zip(dyb.chunks(n)) {
            *d = *d + row.iter().copied().sum();
        }
    }
    (dw, db)
}

/// Shape bookkeeping for a (possibly batched) product `op(a) · op(b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
}

impl MatmulGeom {
    pub fn new(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        let (batch, a2, b2) = match (a.len(), b.len()) {
            (2, 2) => (1, &a[..], &b[..]),
            (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..]),
            _ => return Err(mismatch()),
        };
        let (m, ka) = if trans_a { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
        let (kb, n) = if trans_b { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
        if ka != kb {
            return Err(mismatch());
        }
        Ok(Self {
            batch,
            m,
            k: ka,
            n,
            trans_a,
            trans_b,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

/// Strides of a row-major `rows×cols` matrix, optionally read transposed.
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Stored matrix is (rows×cols) when not transposed, (cols×rows) otherwise.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

pub fn matmul_forward<T: Scalar>(g: &MatmulGeom, a: &[T], b: &[T]) -> Vec<T> {
    let (sa, sb) = (g.m * g.k, g.k * g.n);
    let mut out = vec![T::zero(); g.batch * g.m * g.n];
    let (ars, acs) = strides(g.m, g.k, g.trans_a);
    let (brs, bcs) = strides(g.k, g.n, g.trans_b);
    out.par_chunks_mut(g.m * g.n)
        .enumerate()
        .for_each(|(i, c)| {
            T::gemm(
                g.m,
                g.k,
                g.n,
                T::one(),
                (&a[i * sa..(i + 1) * sa], ars, acs),
                (&b[i * sb..(i + 1) * sb], brs, bcs),
                T::zero(),
                (c, g.n as isize, 1),
            );
        });
    out
}

/// Returns `(da, db)` in the stored layouts of `a` and `b`.
pub fn matmul_backward<T: Scalar>(
    g: &MatmulGeom,
    a: &[T],
    b: &[T],
    dc: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (sa, sb, sc) = (g.m * g.k, g.k * g.n, g.m * g.n);
    let (ars, acs) = strides(g.m, g.k, g.trans_a);
    let (brs, bcs) = strides(g.k, g.n, g.trans_b);
    let da = need_a.then(|| {
        // d(op a) = dC · op(b)ᵀ, an m×k matrix written into a's stored layout.
        let mut da = vec![T::zero(); g.batch * sa];
        let (drs, dcs) = strides(g.m, g.k, g.trans_a);
        da.par_chunks_mut(sa).enumerate().for_each(|(i, d)| {
            T::gemm(
                g.m,
                g.n,
                g.k,
                T::one(),
                (&dc[i * sc..(i + 1) * sc], g.n as isize, 1),
                (&b[i * sb..(i + 1) * sb], bcs, brs),
                T::zero(),
                (d, drs, dcs),
            );
        });
        da
    });
    let db = need_b.then(|| {
        // d(op b) = op(a)ᵀ · dC, a k×n matrix.
        let mut db = vec![T::zero(); g.batch * sb];
        let (drs, dcs) = strides(g.k, g.n, g.trans_b);
        db.par_chunks_mut(sb).enumerate().for_each(|(i, d)| {
            T::gemm(
                g.k,
                g.m,
                g.n,
                T::one(),
                (&a[i * sa..(i + 1) * sa], acs, ars),
                (&dc[i * sc..(i + 1) * sc], g.n as isize, 1),
                T::zero(),
                (d, drs, dcs),
            );
        });
        db
    });
    (da, db)
}
