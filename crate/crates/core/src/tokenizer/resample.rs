//! Dense resampling operators between token-map sizes.
//!
//! Maps are stored as `(h·w) × d` row matrices, so resampling is a left
//! multiplication by a `(H·W) × (h·w)` matrix built as the Kronecker product
//! of two 1-D operators.

use varsr_numerics::{Real, Tensor};

/// 1-D bilinear weights with aligned corners: output `I` samples the source
/// at `I·(src−1)/(dst−1)`.
pub fn bilinear_1d(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let x = if dst == 1 || src == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let x0 = (x.floor() as usize).min(src - 1);
        let x1 = (x0 + 1).min(src - 1);
        let t = x - x0 as f64;
        m[i * src + x0] += 1.0 - t;
        if t > 0.0 {
            m[i * src + x1] += t;
        }
    }
    m
}

/// 1-D area-average weights: output cell `i` averages the source interval
/// `[i·src/dst, (i+1)·src/dst)`, with fractional overlaps weighted.
pub fn area_1d(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let step = src as f64 / dst as f64;
    for i in 0..dst {
        let (lo, hi) = (i as f64 * step, (i + 1) as f64 * step);
        for j in (lo.floor() as usize)..(hi.ceil() as usize).min(src) {
            let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
            m[i * src + j] = overlap / step;
        }
    }
    m
}

fn kron(a: &[f64], ar: usize, ac: usize, b: &[f64], br: usize, bc: usize) -> Vec<f64> {
    let cols = ac * bc;
    let mut out = vec![0.0; ar * br * cols];
    for i in 0..ar {
        for j in 0..ac {
            let av = a[i * ac + j];
            if av == 0.0 {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p) * cols + j * bc + q] = av * b[p * bc + q];
                }
            }
        }
    }
    out
}

/// `(H·W) × (h·w)` bilinear (aligned corners) operator from `src` to `dst`.
pub fn bilinear_matrix<T: Real>(src: (usize, usize), dst: (usize, usize)) -> Tensor<T> {
    let rows = bilinear_1d(src.0, dst.0);
    let cols = bilinear_1d(src.1, dst.1);
    let m = kron(&rows, dst.0, src.0, &cols, dst.1, src.1);
    Tensor::from_fn(&[dst.0 * dst.1, src.0 * src.1], |i| T::of(m[i]))
}

/// `(h·w) × (H·W)` area-average operator from `src` down to `dst`.
pub fn area_matrix<T: Real>(src: (usize, usize), dst: (usize, usize)) -> Tensor<T> {
    let rows = area_1d(src.0, dst.0);
    let cols = area_1d(src.1, dst.1);
    let m = kron(&rows, dst.0, src.0, &cols, dst.1, src.1);
    Tensor::from_fn(&[dst.0 * dst.1, src.0 * src.1], |i| T::of(m[i]))
}

/// Applies a resampling operator to a row-matrix map.
pub fn apply<T: Real>(op: &Tensor<T>, map: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (op.shape()[0], op.shape()[1]);
    let n = map.shape()[1];
    debug_assert_eq!(map.shape()[0], k);
    let data = varsr_numerics::kernels::matmul(op.data(), map.data(), m, k, n);
    Tensor::new(&[m, n], data).expect("resample output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (s, d) in [(1, 4), (2, 3), (4, 16), (5, 7)] {
            let m = bilinear_1d(s, d);
            for r in m.chunks(s) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for (s, d) in [(16, 4), (16, 1), (7, 3), (16, 16)] {
            let m = area_1d(s, d);
            for r in m.chunks(s) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let b: Tensor<f64> = bilinear_matrix((3, 4), (3, 4));
        let a: Tensor<f64> = area_matrix((3, 4), (3, 4));
        assert_eq!(b, Tensor::eye(12));
        assert_eq!(a, Tensor::eye(12));
    }

    #[test]
    fn corners_are_aligned() {
        let m = bilinear_1d(2, 3);
        assert_eq!(m, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
    }
}
