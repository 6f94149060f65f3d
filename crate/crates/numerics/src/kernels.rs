//! Slice-level kernels shared by the tape ops and by cache-based inference.

use crate::real::Real;

/// Strided matrix view: element `(i, j)` lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha·a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` on strided views.
///
/// Panics if a view reaches outside its buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[cv.offset + i * cv.rs + j * cv.cs];
                *x = if beta == T::zero() { T::zero() } else { beta * *x };
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: a view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: b view out of bounds");
    // SAFETY: the three asserts above bound every index the product touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a,
        View::row_major(0, k),
        b,
        View::row_major(0, n),
        T::zero(),
        &mut out,
        View::row_major(0, n),
    );
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// In-place softmax of one row, max-subtracted.
pub fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Normalizes each `width`-row of `x` to zero mean / unit variance.
/// Writes `xhat` into `out` and returns per-row reciprocal std.
pub fn layer_norm_rows<T: Real>(x: &[T], width: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let rows = x.len() / width;
    let inv_w = T::one() / T::of(width as f64);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().copied().sum::<T>() * inv_w;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(xr) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    rstd
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `c×h×w` image into a `(c·kh·kw) × (ho·wo)` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Rotates channel pairs `(2p, 2p+1)` of every head in a `rows × width` block.
///
/// `cos`/`sin` hold `pairs = head_dim/2` angles per row, shared across heads.
/// `sign = -1` applies the inverse rotation.
pub fn rotate_pairs<T: Real>(
    x: &mut [T],
    width: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    sign: T,
) {
    let pairs = head_dim / 2;
    let rows = x.len() / width;
    for r in 0..rows {
        let cr = &cos[r * pairs..(r + 1) * pairs];
        let sr = &sin[r * pairs..(r + 1) * pairs];
        for h in 0..width / head_dim {
            let base = r * width + h * head_dim;
            for p in 0..pairs {
                let (c, s) = (cr[p], sign * sr[p]);
                let a = x[base + 2 * p];
                let b = x[base + 2 * p + 1];
                x[base + 2 * p] = a * c - b * s;
                x[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}
