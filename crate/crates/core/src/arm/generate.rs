//! KV-cached next-scale generation.

use std::sync::Arc;

use varsr_numerics::{AttnLayout, AttnSegment, Graph, ParamStore, Real, Rng, Tensor, Var};

use super::mask::sequence_runs;
use super::model::{Arm, Condition};
use crate::data::QualityLabel;
use crate::error::{Result, VarsrError};
use crate::guidance::{guided_generate_step, GuidanceSchedule};
use crate::sarope::attach_positions;
use crate::tokenizer::TokenPyramid;

/// Keys (after rotation) and values of every block for one stream.
#[derive(Clone, Debug, Default)]
pub struct KvCache<T: Real> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    /// Sequence rows already cached.
    pub len: usize,
}

/// One conditioning stream: its own cache and the token history it was
/// advanced with.
#[derive(Clone, Debug)]
pub struct Stream<T: Real> {
    pub quality: QualityLabel,
    pub cache: KvCache<T>,
    pub history: Vec<Vec<usize>>,
}

/// Raw outputs of one cached forward pass, per stream.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Scale-k logits `[n_k, |V|]` of each stream.
    pub logits: Vec<Tensor<T>>,
    /// Scale-k final hidden states `[n_k, width]` of each stream.
    pub hidden: Vec<Tensor<T>>,
}

/// State of an in-progress generation for one request.
#[derive(Clone, Debug)]
pub struct GenerationState<'a, T: Real> {
    cond: Condition<'a>,
    prefix: Option<Tensor<T>>,
    pub streams: Vec<Stream<T>>,
    step: usize,
    forward_passes: usize,
}

impl<'a, T: Real> GenerationState<'a, T> {
    /// Starts a generation with one stream per quality label; the condition
    /// (class or LR image) is shared by all streams.
    pub fn new(
        arm: &Arm<T>,
        store: &ParamStore<T>,
        cond: Condition<'a>,
        qualities: &[QualityLabel],
    ) -> Result<Self> {
        if qualities.is_empty() {
            return Err(VarsrError::Generation("no conditioning streams".into()));
        }
        let prefix = match cond {
            Condition::Image { lr, .. } => Some(arm.encode_condition(store, lr)?),
            Condition::Class { .. } => None,
        };
        let streams = qualities
            .iter()
            .map(|&quality| Stream {
                quality,
                cache: KvCache::default(),
                history: Vec::new(),
            })
            .collect();
        Ok(Self {
            cond,
            prefix,
            streams,
            step: 0,
            forward_passes: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn is_done(&self, arm: &Arm<T>) -> bool {
        self.step == arm.schedule().len()
    }

    /// Token history shared by every stream; errors when the streams have
    /// been advanced differently.
    pub fn history(&self) -> Result<&[Vec<usize>]> {
        let first = &self.streams[0].history;
        if self.streams.iter().any(|s| &s.history != first) {
            return Err(VarsrError::Internal("guidance streams hold different token histories".into()));
        }
        Ok(first)
    }

    /// One batched forward pass over the next scale for every stream.
    pub fn forward_step(&mut self, arm: &Arm<T>, store: &ParamStore<T>) -> Result<StepOutput<T>> {
        let k = self.step;
        let sched = arm.schedule();
        if k >= sched.len() {
            return Err(VarsrError::Generation("all scales already generated".into()));
        }
        let history = self.history()?.to_vec();
        let plen = arm.prefix_len(self.prefix.is_some());
        let cached = self.streams[0].cache.len;
        let n_k = sched.tokens(k);
        let mut g = Graph::new();

        // Input rows of this step, identical for every stream.
        let x = if k == 0 {
            let prefix = self.prefix.clone().map(|p| g.constant(p));
            let start = arm.start_rows(&mut g, store, &[self.cond], prefix)?;
            match prefix {
                Some(p) => g.concat_rows(&[p, start])?,
                None => start,
            }
        } else {
            let input = arm.next_input(k - 1, &history[k - 1])?;
            arm.token_rows(&mut g, store, input)?
        };
        let rows = g.shape(x)[0];
        let levels = arm.sequence_levels(plen)[cached..cached + rows].to_vec();
        let x = arm.add_levels(&mut g, store, x, &levels)?;
        let s = self.streams.len();
        let x = g.concat_rows(&vec![x; s])?;

        let conds: Vec<Condition> = self.streams.iter().map(|st| self.cond.with_quality(st.quality)).collect();
        let mod_in = arm.modulation(&mut g, store, &conds)?;

        let prefix_dims = (plen > 0).then(|| sched.final_dims());
        let geo = attach_positions(prefix_dims, sched)?;
        let new_geo = &geo[cached..cached + rows];
        let tiled: Vec<_> = (0..s).flat_map(|_| new_geo.iter().copied()).collect();
        let table = Arc::new(arm.rope().table::<T>(&tiled));
        let runs: Vec<_> = sequence_runs(sched, plen)
            .into_iter()
            .filter(|r| r.q_offset >= cached && r.q_offset < cached + rows)
            .map(|mut r| {
                r.q_offset -= cached;
                r
            })
            .collect();
        let layout = Arc::new(AttnLayout {
            segments: (0..s)
                .map(|i| AttnSegment {
                    q_start: i * rows,
                    k_start: i * (cached + rows),
                    runs: runs.clone(),
                })
                .collect(),
        });

        let (hd, heads) = (arm.config().head_dim(), arm.config().heads);
        let mut new_keys: Vec<Vec<Tensor<T>>> = vec![Vec::new(); s];
        let mut new_values: Vec<Vec<Tensor<T>>> = vec![Vec::new(); s];
        let streams = &self.streams;
        let mut attn = |g: &mut Graph<T>, bi: usize, q: Var, kx: Var, v: Var| -> Result<Var> {
            let q = g.rope(q, table.clone(), hd)?;
            let kx = g.rope(kx, table.clone(), hd)?;
            let mut ks = Vec::with_capacity(s);
            let mut vs = Vec::with_capacity(s);
            for (i, st) in streams.iter().enumerate() {
                let idx: Vec<usize> = (i * rows..(i + 1) * rows).collect();
                let kn = g.gather_rows(kx, &idx)?;
                let vn = g.gather_rows(v, &idx)?;
                let (kf, vf) = if cached > 0 {
                    let kc = g.constant(st.cache.keys[bi].clone());
                    let vc = g.constant(st.cache.values[bi].clone());
                    (g.concat_rows(&[kc, kn])?, g.concat_rows(&[vc, vn])?)
                } else {
                    (kn, vn)
                };
                new_keys[i].push(g.value(kf).clone());
                new_values[i].push(g.value(vf).clone());
                ks.push(kf);
                vs.push(vf);
            }
            let kall = g.concat_rows(&ks)?;
            let vall = g.concat_rows(&vs)?;
            Ok(g.attention(q, kall, vall, heads, layout.clone())?)
        };
        let hidden = arm.trunk(&mut g, store, x, mod_in, rows, &mut attn)?;

        let mut out = StepOutput {
            logits: Vec::with_capacity(s),
            hidden: Vec::with_capacity(s),
        };
        for i in 0..s {
            let idx: Vec<usize> = ((i + 1) * rows - n_k..(i + 1) * rows).collect();
            let h = g.gather_rows(hidden, &idx)?;
            let l = arm.logits(&mut g, store, h)?;
            if !g.value(l).is_finite() {
                return Err(VarsrError::Generation(format!("non-finite logits at scale {}", k + 1)));
            }
            out.hidden.push(g.value(h).clone());
            out.logits.push(g.value(l).clone());
        }
        for (i, st) in self.streams.iter_mut().enumerate() {
            st.cache.keys = std::mem::take(&mut new_keys[i]);
            st.cache.values = std::mem::take(&mut new_values[i]);
            st.cache.len = cached + rows;
        }
        self.forward_passes += 1;
        Ok(out)
    }

    /// Appends the sampled scale to every stream.
    pub fn advance(&mut self, tokens: Vec<usize>) {
        for st in &mut self.streams {
            st.history.push(tokens.clone());
        }
        self.step += 1;
    }
}

/// Token sampler over (possibly guided) logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampler {
    pub greedy: bool,
    pub temperature: f64,
    /// Candidates kept per row; 0 keeps the whole vocabulary.
    pub top_k: usize,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            greedy: false,
            temperature: 1.0,
            top_k: 0,
        }
    }
}

impl Sampler {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    /// One token per logit row. Greedy picks the lowest index among maxima.
    pub fn sample<T: Real>(&self, logits: &Tensor<T>, rng: &mut Rng) -> Result<Vec<usize>> {
        let (rows, v) = logits.dims2()?;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
            if row.iter().any(|x| !x.is_finite()) {
                return Err(VarsrError::Generation(format!("non-finite logit in row {r}")));
            }
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
            if self.greedy || self.temperature <= 0.0 {
                out.push(argmax);
                continue;
            }
            let mut order: Vec<usize> = (0..v).collect();
            if self.top_k > 0 && self.top_k < v {
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                order.truncate(self.top_k);
            }
            let max = row[argmax];
            let weights: Vec<f64> = order.iter().map(|&i| ((row[i] - max) / self.temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.uniform() * total;
            let mut pick = order[order.len() - 1];
            for (&i, &w) in order.iter().zip(&weights) {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            out.push(pick);
        }
        Ok(out)
    }
}

/// A finished generation.
#[derive(Clone, Debug)]
pub struct Generation<T> {
    pub pyramid: TokenPyramid,
    /// Final-scale hidden states of each stream (positive first).
    pub x_k: Vec<Tensor<T>>,
    /// Positive-stream logits of every scale as produced with the cache.
    pub logits: Vec<Tensor<T>>,
    pub forward_passes: usize,
}

/// Generates all K scales. Without guidance one stream runs with the
/// condition's own quality; with guidance a positive and a negative stream run
/// in lockstep and their logits are combined per scale.
pub fn generate<T: Real>(
    arm: &Arm<T>,
    store: &ParamStore<T>,
    cond: Condition,
    guidance: Option<&GuidanceSchedule>,
    sampler: &Sampler,
    rng: &mut Rng,
) -> Result<Generation<T>> {
    let qualities = if guidance.is_some() {
        vec![QualityLabel::Positive, QualityLabel::Negative]
    } else {
        vec![cond.quality()]
    };
    let mut state = GenerationState::new(arm, store, cond, &qualities)?;
    let mut logits = Vec::new();
    let mut last = None;
    while !state.is_done(arm) {
        let out = guided_generate_step(arm, store, &mut state, guidance, sampler, rng)?;
        logits.push(out.logits[0].clone());
        last = Some(out.hidden);
    }
    let pyramid = TokenPyramid::new(arm.schedule().clone(), state.history()?.to_vec())?;
    Ok(Generation {
        pyramid,
        x_k: last.unwrap_or_default(),
        logits,
        forward_passes: state.forward_passes(),
    })
}
