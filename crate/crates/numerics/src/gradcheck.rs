//! Central finite-difference gradient checking in 64-bit.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::graph::{AttnLayout, AttnSegment, Graph, QueryRun, RotaryTable, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` rebuilds the function on a fresh graph from leaves holding `inputs`.
/// At most `max_per_input` evenly strided elements of each input are perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return shape_err("gradcheck", "function must return a scalar");
        }
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[ii]).unwrap_or(&zeros).clone();
        let stride = (n / max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[ii].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[ii].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let r = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (ii, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Step and tolerance of the op suite.
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-3;

fn suite_randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// Random projection to a scalar so every output element carries gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(suite_randn(&g.shape(y).to_vec(), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Two samples of six rows: a two-row prefix seeing itself, then query runs
/// of one and three rows with growing key prefixes.
pub fn suite_layout() -> Arc<AttnLayout> {
    let seg = |start: usize| AttnSegment {
        q_start: start,
        k_start: start,
        runs: vec![
            QueryRun { q_offset: 0, len: 2, key_len: 2 },
            QueryRun { q_offset: 2, len: 1, key_len: 3 },
            QueryRun { q_offset: 3, len: 3, key_len: 6 },
        ],
    };
    Arc::new(AttnLayout {
        segments: vec![seg(0), seg(6)],
    })
}

/// Central-difference check of every differentiable graph op on randomized
/// small instances. Returns one report per case.
pub fn op_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let h = SUITE_STEP;
    let r = suite_randn;
    let mut out = Vec::new();
    out.push(("matmul", check(&[r(&[5, 4], 2), r(&[4, 3], 3)], h, 64, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    })?));
    out.push(("linear", check(&[r(&[6, 5], 4), r(&[5, 3], 5), r(&[3], 6)], h, 64, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 7)
    })?));
    for (name, stride, pad) in [("conv2d s1 p1", 1, 1), ("conv2d s2 p1", 2, 1), ("conv2d s1 p0", 1, 0)] {
        out.push((name, check(&[r(&[2, 3, 5, 6], 9), r(&[4, 3, 3, 3], 10), r(&[4], 11)], h, 80, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 12)
        })?));
    }
    for (name, axis) in [("softmax axis 0", 0isize), ("softmax axis 1", 1), ("softmax axis -1", -1)] {
        out.push((name, check(&[r(&[3, 4, 2], 13)], h, 64, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 14)
        })?));
    }
    out.push(("layer_norm", check(&[r(&[4, 8], 16), r(&[8], 17), r(&[8], 18)], h, 64, |g, v| {
        let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)?;
        project(g, y, 19)
    })?));
    out.push(("silu add sub mul affine scale", check(&[r(&[3, 7], 20), r(&[3, 7], 21)], h, 64, |g, v| {
        let s = g.silu(v[0]);
        let m = g.mul(s, v[1])?;
        let d = g.sub(m, v[0])?;
        let a = g.add(d, v[1])?;
        let b = g.affine(a, 0.3, 1.0);
        let c = g.scale(b, -1.7);
        project(g, c, 22)
    })?));
    out.push(("mean sum", check(&[r(&[3, 4], 29)], h, 64, |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let m = g.mean(sq);
        let s = g.sum(v[0]);
        g.add(m, s)
    })?));
    out.push(("cross_entropy", check(&[r(&[5, 6], 23)], h, 64, |g, v| {
        g.cross_entropy(v[0], &[0, 5, 2, 2, 3])
    })?));
    out.push(("mse", check(&[r(&[4, 3], 24), r(&[4, 3], 25)], h, 64, |g, v| g.mse(v[0], v[1]))?));
    out.push(("reshaping and gathers", check(&[r(&[2, 3, 2, 2], 26), r(&[2, 5], 27)], h, 64, |g, v| {
        let up = g.upsample_nearest(v[0], 2)?;
        let rows = g.nchw_to_rows(up)?;
        let back = g.rows_to_nchw(rows, 2, 4, 4)?;
        let flat = g.reshape(back, &[16, 6])?;
        let picked = g.gather_rows(flat, &[0, 3, 3, 15])?;
        let cols = g.slice_cols(picked, 1, 5)?;
        let b = g.broadcast_groups(v[1], 2)?;
        let cat = g.concat_rows(&[cols, b])?;
        project(g, cat, 28)
    })?));
    out.push(("depth_to_space", check(&[r(&[2, 8, 2, 3], 32)], h, 96, |g, v| {
        let y = g.depth_to_space(v[0], 2)?;
        let rows = g.nchw_to_rows(y)?;
        project(g, rows, 33)
    })?));
    let mut rng = Rng::new(29);
    let angles: Vec<f64> = (0..3 * 2).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    let table = Arc::new(RotaryTable::from_angles(2, &angles));
    out.push(("rope", check(&[r(&[3, 8], 30)], h, 64, |g, v| {
        let y = g.rope(v[0], table.clone(), 4)?;
        project(g, y, 31)
    })?));
    let layout = suite_layout();
    out.push(("attention", check(&[r(&[12, 8], 32), r(&[12, 8], 33), r(&[12, 8], 34)], h, 96, |g, v| {
        let y = g.attention(v[0], v[1], v[2], 2, layout.clone())?;
        project(g, y, 35)
    })?));
    Ok(out)
}
