use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, NumericsError, Result};
use crate::kernels::{self, ConvGeom, View};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row rotation angles, stored as cosines and sines.
///
/// Row `r` carries `pairs` angles; pair `p` of every attention head in that
/// row is rotated by angle `(r, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable<T> {
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RotaryTable<T> {
    pub fn from_angles(pairs: usize, angles: &[f64]) -> Self {
        Self {
            pairs,
            cos: angles.iter().map(|a| T::of(a.cos())).collect(),
            sin: angles.iter().map(|a| T::of(a.sin())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / self.pairs.max(1)
    }
}

/// A run of consecutive queries that all see the same key prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRun {
    /// Offset of the first query relative to the segment's `q_start`.
    pub q_offset: usize,
    pub len: usize,
    /// Queries in the run attend keys `[k_start, k_start + key_len)`.
    pub key_len: usize,
}

/// One independent attention problem (one sample, one stream).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub k_start: usize,
    pub runs: Vec<QueryRun>,
}

/// Prefix-shaped attention pattern over row-stacked samples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
}

impl AttnLayout {
    fn prob_len(&self, heads: usize) -> usize {
        heads
            * self
                .segments
                .iter()
                .flat_map(|s| s.runs.iter())
                .map(|r| r.len * r.key_len)
                .sum::<usize>()
    }

    /// Number of (query, key) pairs evaluated per head.
    pub fn pair_count(&self) -> usize {
        self.segments
            .iter()
            .flat_map(|s| s.runs.iter())
            .map(|r| r.len * r.key_len)
            .sum()
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, din: usize, dout: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Silu { x: Var },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, width: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, classes: usize },
    Mse { a: Var, b: Var },
    Mean { x: Var },
    Sum { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, n: usize, o: usize },
    Upsample { x: Var, n: usize, c: usize, h: usize, w: usize, f: usize },
    DepthToSpace { x: Var, map: Vec<usize> },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<Var>, cols: usize },
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    NchwToRows { x: Var, n: usize, c: usize, hw: usize },
    RowsToNchw { x: Var, n: usize, c: usize, hw: usize },
    BroadcastGroups { x: Var, group: usize, cols: usize },
    Rope { x: Var, table: Arc<RotaryTable<T>>, head_dim: usize, width: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, width: usize, layout: Arc<AttnLayout>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
///
/// Ops evaluate eagerly; [`Graph::backward`] replays the tape in reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], kept for leaves only.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter pulled into the graph, aligned with a store of `n` entries.
    pub fn params(&self, n: usize) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(n);
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.set(id, g.clone());
            }
        }
        out
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// A leaf whose gradient tracking follows `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Pulls a stored parameter into the graph; repeated calls share one leaf.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let frozen = store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, !frozen);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `x·w + b` for `x: [rows, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.value(x).dims2()?;
        let (din2, dout) = self.value(w).dims2()?;
        if din != din2 {
            return shape_err("linear", format!("input width {din} vs weight rows {din2}"));
        }
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, din, dout);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != dout {
                return shape_err("linear", format!("bias len {} vs {dout}", bias.numel()));
            }
            for r in out.chunks_mut(dout) {
                add_into(r, bias.data());
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[rows, dout], out)?, Op::Linear { x, w, b, din, dout }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    /// `scale·x + shift` with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let t = self.value(x).map(|v| s * v + c);
        let ng = self.ng(x);
        self.push(t, Op::Affine { x, scale: s }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::silu);
        let ng = self.ng(x);
        self.push(t, Op::Silu { x }, ng)
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != width {
                return shape_err("layer_norm", format!("affine len {} vs width {width}", self.value(p).numel()));
            }
        }
        let mut xhat = vec![T::zero(); self.value(x).numel()];
        let rstd = kernels::layer_norm_rows(self.value(x).data(), width, T::of(eps), &mut xhat);
        let mut out = xhat.clone();
        if gain.is_some() || bias.is_some() {
            let g = gain.map(|g| self.value(g).data().to_vec());
            let b = bias.map(|b| self.value(b).data().to_vec());
            for row in out.chunks_mut(width) {
                for (j, v) in row.iter_mut().enumerate() {
                    if let Some(g) = &g {
                        *v *= g[j];
                    }
                    if let Some(b) = &b {
                        *v += b[j];
                    }
                }
            }
        }
        let ng = self.ng(x) || gain.is_some_and(|g| self.ng(g)) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gain, bias, width, xhat, rstd },
            ng,
        ))
    }

    /// Softmax along `axis` (negative counts from the end).
    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len() as isize;
        let ax = if axis < 0 { nd + axis } else { axis };
        if ax < 0 || ax >= nd {
            return shape_err("softmax", format!("axis {axis} for rank {nd}"));
        }
        let ax = ax as usize;
        let outer: usize = shape[..ax].iter().product();
        let alen = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut buf = vec![T::zero(); alen];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..alen {
                    buf[a] = src[(o * alen + a) * inner + i];
                }
                kernels::softmax_row(&mut buf);
                for a in 0..alen {
                    out[(o * alen + a) * inner + i] = buf[a];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, axis: alen, inner }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::Index {
                op: "cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += (lse - row[targets[r]]).as_f64();
            kernels::softmax_row(row);
        }
        let loss = T::of(total / rows.max(1) as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, classes },
            ng,
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let n = self.value(a).numel().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(T::of(s / n as f64)), Op::Mse { a, b }, ng))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, c2, kh, kw) = self.value(w).dims4()?;
        if c != c2 {
            return shape_err("conv2d", format!("input channels {c} vs kernel channels {c2}"));
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_size(h, kh, stride, pad),
            kernels::conv_out_size(wd, kw, stride, pad),
        ) else {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"));
        };
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return shape_err("conv2d", format!("bias len {} vs {o} outputs", self.value(b).numel()));
            }
        }
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); cr * cc];
        let mut out = vec![T::zero(); n * o * cc];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for s in 0..n {
            kernels::im2col(&xs[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
            kernels::gemm(
                o, cr, cc, T::one(),
                ws, View::row_major(0, cr),
                &cols, View::row_major(0, cc),
                T::zero(),
                &mut out, View::row_major(s * o * cc, cc),
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, plane) in out.chunks_mut(cc).enumerate() {
                let bv = bias[i % o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, b, geom, n, o }, ng))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(p * ho + i) * wo + j] = xs[(p * h + i / f) * w + j / f];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::Upsample { x, n, c, h, w, f }, ng))
    }

    /// Pixel shuffle: `[N, C·f², H, W]` → `[N, C, H·f, W·f]` with output
    /// `(c, i·f+a, j·f+b)` taken from input channel `c·f² + a·f + b` at `(i, j)`.
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, cf, h, w) = self.value(x).dims4()?;
        if f == 0 || cf % (f * f) != 0 {
            return shape_err("depth_to_space", format!("{cf} channels not divisible by {f}²"));
        }
        let c = cf / (f * f);
        let (ho, wo) = (h * f, w * f);
        let mut map = Vec::with_capacity(n * cf * h * w);
        for s in 0..n {
            for ch in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let src_c = ch * f * f + (oi % f) * f + oj % f;
                        map.push(((s * cf + src_c) * h + oi / f) * w + oj / f);
                    }
                }
            }
        }
        let xs = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&i| xs[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::DepthToSpace { x, map }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Row gather on a 2-D tensor; repeated indices accumulate in backward.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(NumericsError::Index { op: "gather_rows", index: i, bound: rows });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[idx.len(), cols], out)?,
            Op::GatherRows { x, idx: idx.to_vec(), cols },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        let (_, cols) = self.value(first).dims2()?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return shape_err("concat_rows", format!("width {c} vs {cols}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::ConcatRows { parts: parts.to_vec(), cols }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return shape_err("slice_cols", format!("[{start}, {}) of {cols} columns", start + len));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[rows, len], out)?, Op::SliceCols { x, start, len, cols }, ng))
    }

    /// `[N,C,H,W]` → `[N·H·W, C]`, sites in row-major order.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * hw + p) * c + ch] = xs[(s * c + ch) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n * hw, c], out)?, Op::NchwToRows { x, n, c, hw }, ng))
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        let hw = h * w;
        if rows != n * hw {
            return shape_err("rows_to_nchw", format!("{rows} rows for {n}x{h}x{w}"));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * c + ch) * hw + p] = xs[(s * hw + p) * c + ch];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::RowsToNchw { x, n, c, hw }, ng))
    }

    /// Repeats each row of `x: [B, C]` `group` times → `[B·group, C]`.
    pub fn broadcast_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = Vec::with_capacity(rows * group * cols);
        for r in 0..rows {
            for _ in 0..group {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[rows * group, cols], out)?, Op::BroadcastGroups { x, group, cols }, ng))
    }

    /// Rotary position rotation of `x: [rows, width]` with per-head pairs.
    pub fn rope(&mut self, x: Var, table: Arc<RotaryTable<T>>, head_dim: usize) -> Result<Var> {
        let (rows, width) = self.value(x).dims2()?;
        if head_dim == 0 || width % head_dim != 0 || head_dim % 2 != 0 || table.pairs != head_dim / 2 {
            return shape_err("rope", format!("width {width}, head dim {head_dim}, {} pairs", table.pairs));
        }
        if table.rows() != rows {
            return shape_err("rope", format!("table has {} rows for {rows}", table.rows()));
        }
        let mut out = self.value(x).data().to_vec();
        kernels::rotate_pairs(&mut out, width, head_dim, &table.cos, &table.sin, T::one());
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[rows, width], out)?, Op::Rope { x, table, head_dim, width }, ng))
    }

    /// Multi-head scaled dot-product attention under a prefix-shaped layout.
    ///
    /// `q: [Nq, width]`, `k, v: [Nk, width]`; heads split the width evenly.
    /// Rows of `q` not covered by the layout produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttnLayout>) -> Result<Var> {
        let (nq, width) = self.value(q).dims2()?;
        let (nk, wk) = self.value(k).dims2()?;
        same_shape("attention", self.shape(k), self.shape(v))?;
        if wk != width || heads == 0 || width % heads != 0 {
            return shape_err("attention", format!("q width {width}, k width {wk}, {heads} heads"));
        }
        for seg in &layout.segments {
            for run in &seg.runs {
                if seg.q_start + run.q_offset + run.len > nq || seg.k_start + run.key_len > nk {
                    return shape_err("attention", format!("layout run {run:?} exceeds q rows {nq} / k rows {nk}"));
                }
            }
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            width,
            heads,
            &layout,
        );
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(&[nq, width], out)?,
            Op::Attention { q, k, v, heads, width, layout, probs },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), gy)?);
                continue;
            }
            self.backprop(i, &gy, &mut grads);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { leaves, params })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, T::one(), gy, View::row_major(0, n), bv, View::transposed(0, n), T::one(), ga, View::row_major(0, k));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, T::one(), av, View::transposed(0, k), gy, View::row_major(0, n), T::one(), gb, View::row_major(0, n));
                }
            }
            Op::Linear { x, w, b, din, dout } => {
                let (din, dout) = (*din, *dout);
                let rows = gy.len() / dout;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    kernels::gemm(rows, dout, din, T::one(), gy, View::row_major(0, dout), wv, View::transposed(0, dout), T::one(), gx, View::row_major(0, din));
                }
                if let Some(gw) = self.acc(grads, *w) {
                    kernels::gemm(din, rows, dout, T::one(), xv, View::transposed(0, din), gy, View::row_major(0, dout), T::one(), gw, View::row_major(0, dout));
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for r in gy.chunks(dout) {
                            add_into(gb, r);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, gy);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &g), &y) in ga.iter_mut().zip(gy).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, &g), &x) in gb.iter_mut().zip(gy).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(d, &g)| *d += *scale * g);
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *d += g * kernels::silu_grad(v);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, width, xhat, rstd } => {
                let w = *width;
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(grads, *b) {
                        for r in gy.chunks(w) {
                            add_into(gb, r);
                        }
                    }
                }
                if let Some(g) = gain {
                    if let Some(gg) = self.acc(grads, *g) {
                        for (r, xh) in gy.chunks(w).zip(xhat.chunks(w)) {
                            for j in 0..w {
                                gg[j] += r[j] * xh[j];
                            }
                        }
                    }
                }
                let gain_v = gain.map(|g| self.value(g).data());
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_w = T::one() / T::of(w as f64);
                    let mut dxhat = vec![T::zero(); w];
                    for (row, ((g_row, xh), &rs)) in gy.chunks(w).zip(xhat.chunks(w)).zip(rstd).enumerate() {
                        for j in 0..w {
                            dxhat[j] = match gain_v {
                                Some(gv) => g_row[j] * gv[j],
                                None => g_row[j],
                            };
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_w;
                        let m2 = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() * inv_w;
                        let dst = &mut gx[row * w..(row + 1) * w];
                        for j in 0..w {
                            dst[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, axis, inner } => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |a: usize| (o * axis + a) * inner + i;
                            let dot: T = (0..*axis).map(|a| gy[at(a)] * y[at(a)]).sum();
                            for a in 0..*axis {
                                gx[at(a)] += y[at(a)] * (gy[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, classes } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = gy[0] / T::of(targets.len().max(1) as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (d, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let s = T::of(2.0) * gy[0] / T::of(av.len().max(1) as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = gy[0] / T::of(gx.len().max(1) as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += gy[0]);
                }
            }
            Op::Conv2d { x, w, b, geom, n, o } => {
                let g = *geom;
                let (cr, cc, o) = (g.col_rows(), g.col_cols(), *o);
                let img = g.c * g.h * g.w;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for (p, plane) in gy.chunks(cc).enumerate() {
                            gb[p % o] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![T::zero(); cr * cc];
                if self.nodes[w.0].needs_grad {
                    let mut gw_local = vec![T::zero(); o * cr];
                    for s in 0..*n {
                        kernels::im2col(&xv[s * img..(s + 1) * img], &g, &mut cols);
                        kernels::gemm(o, cc, cr, T::one(), gy, View::row_major(s * o * cc, cc), &cols, View::transposed(0, cc), T::one(), &mut gw_local, View::row_major(0, cr));
                    }
                    if let Some(gw) = self.acc(grads, *w) {
                        add_into(gw, &gw_local);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..*n {
                        kernels::gemm(cr, o, cc, T::one(), wv, View::transposed(0, cr), gy, View::row_major(s * o * cc, cc), T::zero(), &mut cols, View::row_major(0, cc));
                        kernels::col2im(&cols, &g, &mut gx[s * img..(s + 1) * img]);
                    }
                }
            }
            Op::Upsample { x, n, c, h, w, f } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let (ho, wo) = (h * f, w * f);
                    for p in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                gx[(p * h + i / f) * w + j / f] += gy[(p * ho + i) * wo + j];
                            }
                        }
                    }
                }
            }
            Op::DepthToSpace { x, map } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += gy[o];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, gy);
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * cols..(src + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows { parts, cols } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &gy[off..off + len]);
                    }
                    off += len;
                    let _ = cols;
                }
            }
            Op::SliceCols { x, start, len, cols } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, g_row) in gy.chunks(*len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], g_row);
                    }
                }
            }
            Op::NchwToRows { x, n, c, hw } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..*n {
                        for ch in 0..*c {
                            for p in 0..*hw {
                                gx[(s * c + ch) * hw + p] += gy[(s * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::RowsToNchw { x, n, c, hw } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..*n {
                        for ch in 0..*c {
                            for p in 0..*hw {
                                gx[(s * hw + p) * c + ch] += gy[(s * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }
            Op::BroadcastGroups { x, group, cols } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, g_row) in gy.chunks(*cols).enumerate() {
                        let b = r / group;
                        add_into(&mut gx[b * cols..(b + 1) * cols], g_row);
                    }
                }
            }
            Op::Rope { x, table, head_dim, width } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let mut back = gy.to_vec();
                    kernels::rotate_pairs(&mut back, *width, *head_dim, &table.cos, &table.sin, -T::one());
                    add_into(gx, &back);
                }
            }
            Op::Attention { q, k, v, heads, width, layout, probs } => {
                let (nq, nk) = (self.value(*q).numel() / width, self.value(*k).numel() / width);
                let mut gq = vec![T::zero(); nq * width];
                let mut gk = vec![T::zero(); nk * width];
                let mut gv = vec![T::zero(); nk * width];
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    gy,
                    probs,
                    *width,
                    *heads,
                    layout,
                    (&mut gq, &mut gk, &mut gv),
                );
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(dst) = self.acc(grads, var) {
                        add_into(dst, &g);
                    }
                }
            }
        }
    }
}

fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    heads: usize,
    layout: &AttnLayout,
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let nq = q.len() / width;
    let mut out = vec![T::zero(); nq * width];
    let mut probs = vec![T::zero(); layout.prob_len(heads)];
    let mut off = 0;
    for seg in &layout.segments {
        for h in 0..heads {
            for run in &seg.runs {
                let (len, kl) = (run.len, run.key_len);
                if len == 0 {
                    continue;
                }
                let qrow = seg.q_start + run.q_offset;
                let p = &mut probs[off..off + len * kl];
                off += len * kl;
                if kl == 0 {
                    continue;
                }
                kernels::gemm(
                    len, dh, kl, scale,
                    q, View::row_major(qrow * width + h * dh, width),
                    k, View { offset: seg.k_start * width + h * dh, rs: 1, cs: width },
                    T::zero(),
                    p, View::row_major(0, kl),
                );
                for row in p.chunks_mut(kl) {
                    kernels::softmax_row(row);
                }
                kernels::gemm(
                    len, kl, dh, T::one(),
                    p, View::row_major(0, kl),
                    v, View::row_major(seg.k_start * width + h * dh, width),
                    T::zero(),
                    &mut out, View::row_major(qrow * width + h * dh, width),
                );
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    gy: &[T],
    probs: &[T],
    width: usize,
    heads: usize,
    layout: &AttnLayout,
    (gq, gk, gv): (&mut [T], &mut [T], &mut [T]),
) {
    let dh = width / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut off = 0;
    let mut dp: Vec<T> = Vec::new();
    for seg in &layout.segments {
        for h in 0..heads {
            for run in &seg.runs {
                let (len, kl) = (run.len, run.key_len);
                if len == 0 {
                    continue;
                }
                let qrow = seg.q_start + run.q_offset;
                let p = &probs[off..off + len * kl];
                off += len * kl;
                if kl == 0 {
                    continue;
                }
                let qv = View::row_major(qrow * width + h * dh, width);
                let kv = View::row_major(seg.k_start * width + h * dh, width);
                // dV += Pᵀ·dO
                kernels::gemm(kl, len, dh, T::one(), p, View::transposed(0, kl), gy, qv, T::one(), gv, kv);
                // dP = dO·Vᵀ
                dp.clear();
                dp.resize(len * kl, T::zero());
                kernels::gemm(
                    len, dh, kl, T::one(),
                    gy, qv,
                    v, View { offset: kv.offset, rs: 1, cs: width },
                    T::zero(),
                    &mut dp, View::row_major(0, kl),
                );
                for (drow, prow) in dp.chunks_mut(kl).zip(p.chunks(kl)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in drow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot);
                    }
                }
                // dQ += s·dS·K ; dK += s·dSᵀ·Q
                kernels::gemm(len, kl, dh, scale, &dp, View::row_major(0, kl), k, kv, T::one(), gq, qv);
                kernels::gemm(kl, len, dh, scale, &dp, View::transposed(0, kl), q, qv, T::one(), gk, kv);
            }
        }
    }
}
