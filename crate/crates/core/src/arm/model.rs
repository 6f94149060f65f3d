//! Transformer weights, condition encoder and the teacher-forced forward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use varsr_numerics::{init, AttnLayout, Graph, ParamId, ParamStore, Real, Rng, RotaryTable, Tensor, Var};

use super::mask::batch_layout;
use crate::data::{resize_bicubic, ImageBuffer, QualityLabel};
use crate::error::{config, shape, Result};
use crate::sarope::{attach_positions, RopeConfig};
use crate::schedule::Schedule;
use crate::tokenizer::resample::{area_matrix, bilinear_matrix};
use crate::tokenizer::{Codebook, TokenPyramid};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of each MLP as a multiple of `width`.
    pub mlp_ratio: usize,
    pub rope_theta: f64,
    /// Channels of each stride-2 stage of the condition encoder; the number
    /// of stages is log2 of the latent factor.
    pub cond_channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            rope_theta: RopeConfig::DEFAULT_THETA,
            cond_channels: vec![16, 32],
            num_classes: 4,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return config(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return config("blocks, mlp ratio and class count must be positive");
        }
        if self.cond_channels.iter().any(|&c| c == 0) {
            return config("condition encoder channels must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// What a sequence is conditioned on.
#[derive(Clone, Copy, Debug)]
pub enum Condition<'a> {
    /// Class-conditional generation: learned start token, class and quality
    /// embeddings summed for modulation.
    Class { class: usize, quality: QualityLabel },
    /// Super-resolution: the LR image becomes the prefix; quality modulates.
    Image { lr: &'a ImageBuffer, quality: QualityLabel },
}

impl Condition<'_> {
    pub fn quality(&self) -> QualityLabel {
        match *self {
            Condition::Class { quality, .. } | Condition::Image { quality, .. } => quality,
        }
    }

    pub fn with_quality(self, quality: QualityLabel) -> Self {
        match self {
            Condition::Class { class, .. } => Condition::Class { class, quality },
            Condition::Image { lr, .. } => Condition::Image { lr, quality },
        }
    }

    fn is_image(&self) -> bool {
        matches!(self, Condition::Image { .. })
    }
}

pub(crate) fn quality_row(q: QualityLabel) -> usize {
    match q {
        QualityLabel::Positive => 0,
        QualityLabel::Negative => 1,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Lin {
    pub w: ParamId,
    pub b: ParamId,
}

impl Lin {
    pub(crate) fn add<T: Real>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>) -> Self {
        let dout = w.shape()[w.ndim() - 1];
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), init::zeros(&[dout]));
        Self { w, b }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(x, w, Some(b))?)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ada: Lin,
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub fc: Lin,
    pub proj: Lin,
}

/// Handles of the transformer inside a shared parameter store, plus the fixed
/// (non-learned) operators it needs: the frozen codebook, the inter-scale
/// interpolation matrices and the start-token pooling matrix.
#[derive(Clone, Debug)]
pub struct Arm<T: Real = f32> {
    cfg: ArmConfig,
    schedule: Schedule,
    frame: (usize, usize),
    codebook: Codebook<T>,
    rope: RopeConfig,
    interp: Vec<Tensor<T>>,
    pool: Tensor<T>,
    cond_convs: Vec<ConvLayer>,
    cond_proj: ConvLayer,
    token_in: Lin,
    sr_start: Lin,
    pub(crate) level: ParamId,
    class_emb: ParamId,
    quality_emb: ParamId,
    pub(crate) blocks: Vec<BlockIds>,
    pub(crate) final_ada: Lin,
    pub(crate) head: Lin,
}

/// Outputs of one teacher-forced pass over a batch.
#[derive(Clone, Debug)]
pub struct ArmForward {
    /// Logits of every scale token, samples stacked: `[B·S, |V|]`.
    pub logits: Var,
    /// Ground-truth indices aligned with `logits` rows.
    pub targets: Vec<usize>,
    /// Final-scale hidden states `x_K`, samples stacked: `[B·n_K, width]`.
    pub x_k: Var,
    /// Input embeddings of the full sequences, `[B·L, width]`.
    pub inputs: Var,
}

impl<T: Real> Arm<T> {
    /// Registers fresh weights in `store`. `frame` is the HR image size the
    /// LR condition is upsampled to; it must be the final scale times a power
    /// of two matching the encoder stages.
    pub fn new(
        cfg: ArmConfig,
        schedule: Schedule,
        codebook: Codebook<T>,
        frame: (usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (fh, fw) = schedule.final_dims();
        let factor = 1usize << cfg.cond_channels.len();
        if frame != (fh * factor, fw * factor) {
            return config(format!(
                "image frame {frame:?} is not the final scale {:?} times {factor} ({} encoder stages)",
                (fh, fw),
                cfg.cond_channels.len()
            ));
        }
        let rope = RopeConfig::new(cfg.head_dim(), cfg.rope_theta, (fh, fw))?;
        let (d, dm, v) = (codebook.dim(), cfg.width, codebook.size());
        let k = schedule.len();

        let mut cond_convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.cond_channels.iter().enumerate() {
            for (j, (ci, stride)) in [(cin, 1), (c, 2)].into_iter().enumerate() {
                let w = store.add(
                    format!("arm.cond.s{i}.conv{j}.w"),
                    init::fan_in_normal(&[c, ci, 3, 3], ci * 9, rng),
                );
                let b = store.add(format!("arm.cond.s{i}.conv{j}.b"), init::zeros(&[c]));
                cond_convs.push(ConvLayer { w, b, stride, pad: 1 });
            }
            cin = c;
        }
        let cond_proj = ConvLayer {
            w: store.add("arm.cond.proj.w", init::zeros(&[dm, cin, 1, 1])),
            b: store.add("arm.cond.proj.b", init::zeros(&[dm])),
            stride: 1,
            pad: 0,
        };
        let token_in = Lin::add(store, "arm.token_in", init::fan_in_normal(&[d, dm], d, rng));
        let sr_start = Lin::add(store, "arm.sr_start", init::fan_in_normal(&[dm, dm], dm, rng));
        let level = store.add("arm.level", init::trunc_normal(&[k + 1, dm], 0.02, rng));
        let class_emb = store.add("arm.class", init::trunc_normal(&[cfg.num_classes, dm], 0.02, rng));
        let quality_emb = store.add("arm.quality", init::trunc_normal(&[2, dm], 0.02, rng));
        let hidden = cfg.mlp_ratio * dm;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let p = format!("arm.block{i}");
                BlockIds {
                    ada: Lin::add(store, &format!("{p}.ada"), init::zeros(&[dm, 6 * dm])),
                    q: Lin::add(store, &format!("{p}.q"), init::fan_in_normal(&[dm, dm], dm, rng)),
                    k: Lin::add(store, &format!("{p}.k"), init::fan_in_normal(&[dm, dm], dm, rng)),
                    v: Lin::add(store, &format!("{p}.v"), init::fan_in_normal(&[dm, dm], dm, rng)),
                    o: Lin::add(store, &format!("{p}.o"), init::fan_in_normal(&[dm, dm], dm, rng)),
                    fc: Lin::add(store, &format!("{p}.fc"), init::fan_in_normal(&[dm, hidden], dm, rng)),
                    proj: Lin::add(store, &format!("{p}.proj"), init::fan_in_normal(&[hidden, dm], hidden, rng)),
                }
            })
            .collect();
        let final_ada = Lin::add(store, "arm.final_ada", init::zeros(&[dm, 2 * dm]));
        let head = Lin::add(store, "arm.head", init::zeros(&[dm, v]));

        let dims = schedule.scales().to_vec();
        let interp = dims.windows(2).map(|w| bilinear_matrix(w[0], w[1])).collect();
        let pool = area_matrix((fh, fw), dims[0]);
        Ok(Self {
            cfg,
            schedule,
            frame,
            codebook,
            rope,
            interp,
            pool,
            cond_convs,
            cond_proj,
            token_in,
            sr_start,
            level,
            class_emb,
            quality_emb,
            blocks,
            final_ada,
            head,
        })
    }

    pub fn config(&self) -> &ArmConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn frame(&self) -> (usize, usize) {
        self.frame
    }

    pub fn codebook(&self) -> &Codebook<T> {
        &self.codebook
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn vocab(&self) -> usize {
        self.codebook.size()
    }

    /// Number of prefix tokens for a condition kind.
    pub fn prefix_len(&self, image: bool) -> usize {
        if image {
            let (h, w) = self.schedule.final_dims();
            h * w
        } else {
            0
        }
    }

    /// LR images bicubically upsampled to the frame, stacked `[B,3,H,W]`.
    fn upsampled_lr(&self, lrs: &[&ImageBuffer]) -> Result<Tensor<T>> {
        let (h, w) = self.frame;
        let ups = lrs
            .iter()
            .map(|lr| {
                if lr.height() > h || lr.width() > w {
                    return shape(format!("LR image {:?} larger than frame {:?}", lr.dims(), self.frame));
                }
                let mut up = resize_bicubic(lr, h, w)?;
                up.clamp01();
                Ok(up)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageBuffer> = ups.iter().collect();
        crate::tokenizer::stack_images(&refs)
    }

    /// Condition encoder on an already-upsampled `[B,3,H,W]` batch; returns
    /// the prefix tokens `[B·h·w, width]`.
    pub fn encode_frames(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 || (h, w) != self.frame {
            return shape(format!("condition input {c}x{h}x{w}, expected 3x{:?}", self.frame));
        }
        let mut y = x;
        for layer in &self.cond_convs {
            let wv = g.param(store, layer.w);
            let bv = g.param(store, layer.b);
            y = g.conv2d(y, wv, Some(bv), layer.stride, layer.pad)?;
            y = g.silu(y);
        }
        let wv = g.param(store, self.cond_proj.w);
        let bv = g.param(store, self.cond_proj.b);
        let y = g.conv2d(y, wv, Some(bv), 1, 0)?;
        Ok(g.nchw_to_rows(y)?)
    }

    /// Prefix tokens for a batch of LR images.
    pub fn encode_condition_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lrs: &[&ImageBuffer],
    ) -> Result<Var> {
        let x = g.constant(self.upsampled_lr(lrs)?);
        self.encode_frames(g, store, x)
    }

    /// Prefix tokens `r_c` of one LR image as an `(h·w) × width` matrix.
    pub fn encode_condition(&self, store: &ParamStore<T>, lr: &ImageBuffer) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.encode_condition_graph(&mut g, store, &[lr])?;
        Ok(g.value(v).clone())
    }

    /// Modulation input per condition: class + quality, or quality alone.
    pub fn modulation(&self, g: &mut Graph<T>, store: &ParamStore<T>, conds: &[Condition]) -> Result<Var> {
        let q_rows: Vec<usize> = conds.iter().map(|c| quality_row(c.quality())).collect();
        let qe = g.param(store, self.quality_emb);
        let q = g.gather_rows(qe, &q_rows)?;
        if conds.iter().all(|c| c.is_image()) {
            return Ok(q);
        }
        let classes = conds
            .iter()
            .map(|c| match *c {
                Condition::Class { class, .. } => self.check_class(class),
                Condition::Image { .. } => shape("batch mixes class and image conditions"),
            })
            .collect::<Result<Vec<_>>>()?;
        let ce = g.param(store, self.class_emb);
        let c = g.gather_rows(ce, &classes)?;
        Ok(g.add(c, q)?)
    }

    fn check_class(&self, class: usize) -> Result<usize> {
        if class >= self.cfg.num_classes {
            return Err(crate::VarsrError::Index {
                context: "class embedding",
                index: class,
                bound: self.cfg.num_classes,
            });
        }
        Ok(class)
    }

    /// Scale-1 input rows for each sample (`[B·n_1, width]`). `prefix` holds
    /// the stacked prefix tokens in image mode.
    pub(crate) fn start_rows(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        conds: &[Condition],
        prefix: Option<Var>,
    ) -> Result<Var> {
        let n1 = self.schedule.tokens(0);
        match prefix {
            Some(p) => {
                let b = conds.len();
                let (n1r, n) = self.pool.dims2()?;
                let mut data = vec![T::zero(); b * n1r * b * n];
                for s in 0..b {
                    for r in 0..n1r {
                        let dst = (s * n1r + r) * b * n + s * n;
                        data[dst..dst + n].copy_from_slice(self.pool.row(r));
                    }
                }
                let pool = g.constant(Tensor::new(&[b * n1r, b * n], data)?);
                let pooled = g.matmul(pool, p)?;
                self.sr_start.apply(g, store, pooled)
            }
            None => {
                let mut idx = Vec::with_capacity(conds.len() * n1);
                for c in conds {
                    let Condition::Class { class, .. } = *c else {
                        return shape("batch mixes class and image conditions");
                    };
                    let class = self.check_class(class)?;
                    idx.extend(std::iter::repeat_n(class, n1));
                }
                let ce = g.param(store, self.class_emb);
                Ok(g.gather_rows(ce, &idx)?)
            }
        }
    }

    /// Interpolated codebook lookups of scale `k` tokens at scale `k+1` size
    /// (`n_{k+1} × d`), the teacher-forcing input of step `k+1`.
    pub fn next_input(&self, k: usize, tokens: &[usize]) -> Result<Tensor<T>> {
        let Some(m) = self.interp.get(k) else {
            return shape(format!("no scale after {k}"));
        };
        let e = self.codebook.lookup(tokens)?;
        let (r, c) = m.dims2()?;
        let (_, d) = e.dims2()?;
        Ok(Tensor::new(
            &[r, d],
            varsr_numerics::kernels::matmul(m.data(), e.data(), r, c, d),
        )?)
    }

    /// Projects `[rows, d]` latent inputs to model width.
    pub(crate) fn token_rows(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Tensor<T>) -> Result<Var> {
        let v = g.constant(x);
        self.token_in.apply(g, store, v)
    }

    /// Adds the level embedding of each row.
    pub(crate) fn add_levels(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, levels: &[usize]) -> Result<Var> {
        let le = g.param(store, self.level);
        let l = g.gather_rows(le, levels)?;
        Ok(g.add(x, l)?)
    }

    /// Level id per sequence row: 0 for the prefix, `k+1` for scale `k`.
    pub fn sequence_levels(&self, prefix_len: usize) -> Vec<usize> {
        let mut out = vec![0; prefix_len];
        for (k, n) in self.schedule.token_counts().into_iter().enumerate() {
            out.extend(std::iter::repeat_n(k + 1, n));
        }
        out
    }

    /// Rotary table for `batch` stacked sequences.
    pub fn batch_table(&self, prefix_len: usize, batch: usize) -> Result<Arc<RotaryTable<T>>> {
        let prefix = (prefix_len > 0).then(|| self.schedule.final_dims());
        let geo = attach_positions(prefix, &self.schedule)?;
        let tiled: Vec<_> = (0..batch).flat_map(|_| geo.iter().copied()).collect();
        Ok(Arc::new(self.rope.table(&tiled)))
    }

    /// Input embeddings of full teacher-forced sequences, samples stacked.
    pub fn embed(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramids: &[&TokenPyramid],
        conds: &[Condition],
    ) -> Result<Var> {
        let b = pyramids.len();
        if b == 0 || conds.len() != b {
            return shape(format!("{b} pyramids for {} conditions", conds.len()));
        }
        for p in pyramids {
            if p.schedule() != &self.schedule {
                return shape("token pyramid schedule differs from the model schedule");
            }
        }
        let image = conds[0].is_image();
        let plen = self.prefix_len(image);
        let prefix = if image {
            let lrs = conds
                .iter()
                .map(|c| match *c {
                    Condition::Image { lr, .. } => Ok(lr),
                    Condition::Class { .. } => shape("batch mixes class and image conditions"),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(self.encode_condition_graph(g, store, &lrs)?)
        } else {
            None
        };
        let start = self.start_rows(g, store, conds, prefix)?;

        let n1 = self.schedule.tokens(0);
        let rest = self.schedule.total_tokens() - n1;
        let d = self.codebook.dim();
        let mut parts = vec![start];
        if rest > 0 {
            let mut data = Vec::with_capacity(b * rest * d);
            for p in pyramids {
                for k in 0..self.schedule.len() - 1 {
                    data.extend_from_slice(self.next_input(k, p.scale(k))?.data());
                }
            }
            parts.push(self.token_rows(g, store, Tensor::new(&[b * rest, d], data)?)?);
        }
        if let Some(p) = prefix {
            parts.insert(0, p);
        }
        let stacked = g.concat_rows(&parts)?;

        // Stacked order is [all prefixes | all starts | all later scales];
        // regroup into one contiguous sequence per sample.
        let (pre_base, start_base, rest_base) = (0, b * plen, b * plen + b * n1);
        let mut order = Vec::with_capacity(b * (plen + n1 + rest));
        for s in 0..b {
            order.extend(pre_base + s * plen..pre_base + (s + 1) * plen);
            order.extend(start_base + s * n1..start_base + (s + 1) * n1);
            order.extend(rest_base + s * rest..rest_base + (s + 1) * rest);
        }
        let x = g.gather_rows(stacked, &order)?;
        let levels: Vec<usize> = (0..b).flat_map(|_| self.sequence_levels(plen)).collect();
        self.add_levels(g, store, x, &levels)
    }

    /// Transformer blocks, final norm and modulation. `cond` holds one
    /// modulation row per group of `group` consecutive rows of `x`.
    pub(crate) fn trunk(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        group: usize,
        attn: &mut dyn FnMut(&mut Graph<T>, usize, Var, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        let dm = self.cfg.width;
        let c = g.silu(cond);
        let mut x = x;
        for (bi, blk) in self.blocks.iter().enumerate() {
            let mods = blk.ada.apply(g, store, c)?;
            let mods = g.broadcast_groups(mods, group)?;
            let chunk = |g: &mut Graph<T>, i: usize| g.slice_cols(mods, i * dm, dm);
            let (sh1, sc1, ga1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
            let (sh2, sc2, ga2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

            let h = g.layer_norm(x, None, None, LN_EPS)?;
            let h = modulate(g, h, sh1, sc1)?;
            let q = blk.q.apply(g, store, h)?;
            let k = blk.k.apply(g, store, h)?;
            let v = blk.v.apply(g, store, h)?;
            let a = attn(g, bi, q, k, v)?;
            let o = blk.o.apply(g, store, a)?;
            let o = g.mul(o, ga1)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, None, None, LN_EPS)?;
            let h = modulate(g, h, sh2, sc2)?;
            let m = blk.fc.apply(g, store, h)?;
            let m = g.silu(m);
            let m = blk.proj.apply(g, store, m)?;
            let m = g.mul(m, ga2)?;
            x = g.add(x, m)?;
        }
        let mods = self.final_ada.apply(g, store, c)?;
        let mods = g.broadcast_groups(mods, group)?;
        let sh = g.slice_cols(mods, 0, dm)?;
        let sc = g.slice_cols(mods, dm, dm)?;
        let h = g.layer_norm(x, None, None, LN_EPS)?;
        modulate(g, h, sh, sc)
    }

    pub(crate) fn logits(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        self.head.apply(g, store, hidden)
    }

    /// Runs full sequences given their input embeddings `x: [B·L, width]`.
    /// Returns the final hidden states of every row.
    pub fn run_sequences(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Var,
        prefix_len: usize,
    ) -> Result<Var> {
        let len = prefix_len + self.schedule.total_tokens();
        let rows = g.shape(x)[0];
        if rows % len != 0 || g.shape(cond)[0] != rows / len {
            return shape(format!("{rows} input rows for sequences of {len}"));
        }
        let b = rows / len;
        let table = self.batch_table(prefix_len, b)?;
        let layout: Arc<AttnLayout> = Arc::new(batch_layout(&self.schedule, prefix_len, b));
        let (hd, heads) = (self.cfg.head_dim(), self.cfg.heads);
        let mut attn = |g: &mut Graph<T>, _: usize, q: Var, k: Var, v: Var| -> Result<Var> {
            let q = g.rope(q, table.clone(), hd)?;
            let k = g.rope(k, table.clone(), hd)?;
            Ok(g.attention(q, k, v, heads, layout.clone())?)
        };
        self.trunk(g, store, x, cond, len, &mut attn)
    }

    /// Row indices of the scale tokens (prefix excluded) and of the final
    /// scale within `batch` stacked sequences.
    pub fn scale_rows(&self, prefix_len: usize, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let total = self.schedule.total_tokens();
        let len = prefix_len + total;
        let nk = self.schedule.tokens(self.schedule.len() - 1);
        let mut all = Vec::with_capacity(batch * total);
        let mut last = Vec::with_capacity(batch * nk);
        for s in 0..batch {
            all.extend(s * len + prefix_len..(s + 1) * len);
            last.extend((s + 1) * len - nk..(s + 1) * len);
        }
        (all, last)
    }

    /// Teacher-forced forward pass over a batch sharing one condition kind.
    pub fn forward_train(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramids: &[&TokenPyramid],
        conds: &[Condition],
    ) -> Result<ArmForward> {
        let inputs = self.embed(g, store, pyramids, conds)?;
        self.forward_embedded(g, store, inputs, pyramids, conds)
    }

    /// The forward pass from precomputed input embeddings, so callers can
    /// differentiate with respect to them.
    pub fn forward_embedded(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
        pyramids: &[&TokenPyramid],
        conds: &[Condition],
    ) -> Result<ArmForward> {
        let plen = self.prefix_len(conds.first().is_some_and(|c| c.is_image()));
        let cond = self.modulation(g, store, conds)?;
        let hidden = self.run_sequences(g, store, inputs, cond, plen)?;
        let (all, last) = self.scale_rows(plen, pyramids.len());
        let tok_hidden = g.gather_rows(hidden, &all)?;
        let logits = self.logits(g, store, tok_hidden)?;
        let x_k = g.gather_rows(hidden, &last)?;
        let targets = pyramids.iter().flat_map(|p| p.flat()).collect();
        Ok(ArmForward {
            logits,
            targets,
            x_k,
            inputs,
        })
    }
}

/// `h·(1 + scale) + shift`.
pub(crate) fn modulate<T: Real>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.affine(scale, 1.0, 1.0);
    let y = g.mul(h, s)?;
    Ok(g.add(y, shift)?)
}

/// Mean cross-entropy over every token position of every scale.
pub fn token_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets)?)
}
