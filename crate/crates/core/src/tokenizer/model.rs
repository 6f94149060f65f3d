//! The assembled tokenizer and its two training phases.

use log::debug;
use varsr_numerics::{AdamW, Graph, OptimizerState, ParamStore, Rng, Tensor};

use super::codebook::{Codebook, EmaConfig};
use super::quantize::{scale_dropout, Quantized, Quantizer};
use super::vae::{stack_images, Vae, VaeConfig};
use crate::data::ImageBuffer;
use crate::error::{config, shape, Result};
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub vae: VaeConfig,
    pub codebook_size: usize,
    pub schedule: Schedule,
    pub ema: EmaConfig,
    /// Per-batch probability of decoding the unquantized latent.
    pub bypass_prob: f64,
    /// Weight of the commitment term pulling latents toward their codes.
    pub commitment: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            codebook_size: 64,
            schedule: Schedule::square(&[1, 2, 4, 8, 16]).expect("valid schedule"),
            ema: EmaConfig::default(),
            bypass_prob: 0.5,
            commitment: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        if self.codebook_size == 0 {
            return config("codebook size must be positive");
        }
        if !(0.0..=1.0).contains(&self.bypass_prob) {
            return config("bypass probability outside [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ema.decay) {
            return config("EMA decay outside [0, 1]");
        }
        Ok(())
    }

    /// Image frame implied by the final scale and the downsampling factor.
    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.schedule.final_dims();
        (h * self.vae.factor, w * self.vae.factor)
    }
}

/// Encoder/decoder weights, codebook and quantizer for one schedule.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    params: ParamStore<f32>,
    vae: Vae,
    codebook: Codebook<f32>,
    quantizer: Quantizer<f32>,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(seed, "init.tokenizer");
        let mut params = ParamStore::new();
        let vae = Vae::new(cfg.vae.clone(), &mut params, &mut rng)?;
        let codebook = Codebook::random(cfg.codebook_size, cfg.vae.latent_dim, 0.5, &mut rng)?;
        let quantizer = Quantizer::new(cfg.schedule.clone());
        Ok(Self {
            cfg,
            params,
            vae,
            codebook,
            quantizer,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn codebook(&self) -> &Codebook<f32> {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook<f32> {
        &mut self.codebook
    }

    pub fn quantizer(&self) -> &Quantizer<f32> {
        &self.quantizer
    }

    pub fn schedule(&self) -> &Schedule {
        &self.cfg.schedule
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.vae.latent_dim
    }

    fn check_frame(&self, img: &ImageBuffer) -> Result<()> {
        if img.dims() != self.cfg.image_dims() {
            return shape(format!(
                "image {:?} does not match tokenizer frame {:?}",
                img.dims(),
                self.cfg.image_dims()
            ));
        }
        Ok(())
    }

    /// Latents as `(h·w) × d` row matrices, one per image.
    pub fn encode_batch(&self, images: &[&ImageBuffer]) -> Result<Vec<Tensor<f32>>> {
        for img in images {
            self.check_frame(img)?;
        }
        let mut g = Graph::new();
        let x = g.constant(stack_images(images)?);
        let f = self.vae.encode(&mut g, &self.params, x)?;
        let rows = g.nchw_to_rows(f)?;
        split_rows(g.value(rows), images.len())
    }

    pub fn encode(&self, img: &ImageBuffer) -> Result<Tensor<f32>> {
        Ok(self.encode_batch(&[img])?.remove(0))
    }

    /// Decodes latent row matrices (raw, quantized, or quantized plus
    /// residual) to clamped images.
    pub fn decode_batch(&self, latents: &[Tensor<f32>]) -> Result<Vec<ImageBuffer>> {
        let (h, w) = self.cfg.schedule.final_dims();
        let mut g = Graph::new();
        let rows = stack_rows(latents, h * w, self.latent_dim())?;
        let rows = g.constant(rows);
        let f = g.rows_to_nchw(rows, latents.len(), h, w)?;
        let out = self.vae.decode(&mut g, &self.params, f)?;
        images_from_nchw(g.value(out))
    }

    pub fn decode(&self, latent: &Tensor<f32>) -> Result<ImageBuffer> {
        Ok(self.decode_batch(std::slice::from_ref(latent))?.remove(0))
    }

    pub fn quantize(&self, latent: &Tensor<f32>) -> Result<Quantized<f32>> {
        self.quantizer.quantize(latent, &self.codebook)
    }
}

pub(crate) fn split_rows(t: &Tensor<f32>, parts: usize) -> Result<Vec<Tensor<f32>>> {
    let (rows, cols) = t.dims2()?;
    let per = rows / parts;
    (0..parts)
        .map(|p| Ok(Tensor::new(&[per, cols], t.data()[p * per * cols..(p + 1) * per * cols].to_vec())?))
        .collect()
}

pub(crate) fn stack_rows(parts: &[Tensor<f32>], rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(parts.len() * rows * cols);
    for p in parts {
        if p.shape() != [rows, cols] {
            return shape(format!("latent {:?}, expected [{rows}, {cols}]", p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(&[parts.len() * rows, cols], data)?)
}

pub(crate) fn images_from_nchw(t: &Tensor<f32>) -> Result<Vec<ImageBuffer>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return shape(format!("decoder produced {c} channels"));
    }
    let per = 3 * h * w;
    (0..n)
        .map(|i| {
            let mut img = ImageBuffer::from_planar(h, w, &t.data()[i * per..(i + 1) * per])?;
            img.clamp01();
            Ok(img)
        })
        .collect()
}

/// Losses of one tokenizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerStepStats {
    pub loss: f64,
    pub recon: f64,
    pub bypassed: bool,
    pub reseeded: usize,
}

/// Optimizer state for both tokenizer phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerTrainer {
    pub opt: AdamW,
    pub state: OptimizerState<f32>,
    /// The codebook as a one-entry store for the gradient fine-tuning phase.
    pub codebook_store: ParamStore<f32>,
    pub codebook_state: OptimizerState<f32>,
    pub step: u64,
}

impl TokenizerTrainer {
    pub fn new(tok: &Tokenizer, opt: AdamW) -> Self {
        let mut codebook_store = ParamStore::new();
        codebook_store.add("codebook", tok.codebook.vectors().clone());
        Self {
            opt,
            state: OptimizerState::new(&tok.params),
            codebook_state: OptimizerState::new(&codebook_store),
            codebook_store,
            step: 0,
        }
    }

    /// Autoencoder step with EMA codebook learning.
    ///
    /// With probability `bypass_prob` the decoder sees the raw latent;
    /// otherwise it sees the straight-through quantized latent. The codebook
    /// follows the EMA of its assigned residual targets either way.
    pub fn train_step(
        &mut self,
        tok: &mut Tokenizer,
        batch: &[&ImageBuffer],
        rng: &mut Rng,
    ) -> Result<TokenizerStepStats> {
        let bypassed = rng.bernoulli(tok.cfg.bypass_prob);
        let (h, w) = tok.cfg.schedule.final_dims();
        let b = batch.len();
        let mut g = Graph::new();
        let x = g.constant(stack_images(batch)?);
        let f = tok.vae.encode(&mut g, &tok.params, x)?;
        let f_rows = g.nchw_to_rows(f)?;
        let latents = split_rows(g.value(f_rows), b)?;
        if self.step == 0 && tok.cfg.ema.decay < 1.0 {
            seed_codebook_from(&mut tok.codebook, g.value(f_rows), rng)?;
        }
        let quantized: Vec<Quantized<f32>> = latents
            .iter()
            .map(|l| tok.quantize(l))
            .collect::<Result<_>>()?;
        let recon = stack_rows(
            &quantized.iter().map(|q| q.recon.clone()).collect::<Vec<_>>(),
            h * w,
            tok.latent_dim(),
        )?;
        let recon_var = g.constant(recon.clone());
        let dec_in = if bypassed {
            f_rows
        } else {
            // Straight-through: forward value is the quantized latent, the
            // gradient flows to the encoder unchanged.
            let delta = g.constant(recon.zip_map(g.value(f_rows), |q, l| q - l)?);
            g.add(f_rows, delta)?
        };
        let dec_nchw = g.rows_to_nchw(dec_in, b, h, w)?;
        let out = tok.vae.decode(&mut g, &tok.params, dec_nchw)?;
        let rec = g.mse(out, x)?;
        let commit = g.mse(f_rows, recon_var)?;
        let commit = g.scale(commit, tok.cfg.commitment);
        let loss = g.add(rec, commit)?;
        let grads = g.backward(loss)?.params(tok.params.len());
        self.opt.step(&mut tok.params, &grads, &mut self.state)?;

        let mut targets = Vec::new();
        let mut assign = Vec::new();
        for q in &quantized {
            for (k, t) in q.targets.iter().enumerate() {
                targets.extend_from_slice(t.data());
                assign.extend_from_slice(q.pyramid.scale(k));
            }
        }
        let targets = Tensor::new(&[assign.len(), tok.latent_dim()], targets)?;
        let pool = g.value(f_rows).clone();
        let reseeded = tok
            .codebook
            .ema_update(&targets, &assign, &tok.cfg.ema, &pool, rng)?;
        self.sync_codebook_store(tok);
        self.step += 1;
        let stats = TokenizerStepStats {
            loss: g.scalar_value(loss) as f64,
            recon: g.scalar_value(rec) as f64,
            bypassed,
            reseeded: reseeded.len(),
        };
        debug!("tokenizer step {}: {stats:?}", self.step);
        Ok(stats)
    }

    fn sync_codebook_store(&mut self, tok: &Tokenizer) {
        let id = self.codebook_store.find("codebook").expect("codebook entry");
        *self.codebook_store.get_mut(id) = tok.codebook.vectors().clone();
    }

    /// Scale-dropout fine-tuning: encoder and decoder frozen, only the
    /// codebook moves, by gradient through the decoder of the reconstruction
    /// sum with randomly dropped scales.
    pub fn dropout_step(
        &mut self,
        tok: &mut Tokenizer,
        batch: &[&ImageBuffer],
        p_d: f64,
        rng: &mut Rng,
    ) -> Result<f64> {
        let (h, w) = tok.cfg.schedule.final_dims();
        let latents = tok.encode_batch(batch)?;
        let pyramids: Vec<_> = latents
            .iter()
            .map(|l| tok.quantize(l).map(|q| q.pyramid))
            .collect::<Result<_>>()?;
        let was_frozen: Vec<bool> = tok.params.ids().map(|id| tok.params.is_frozen(id)).collect();
        tok.params.set_all_frozen(true);
        let id = self.codebook_store.find("codebook").expect("codebook entry");
        let mut g = Graph::new();
        let cb = g.param(&self.codebook_store, id);
        let mut rows = Vec::with_capacity(batch.len());
        for p in &pyramids {
            let mask = scale_dropout(p.num_scales(), p_d, rng)?;
            let mut acc: Option<_> = None;
            for k in 0..p.num_scales() {
                if !mask.kept[k] {
                    continue;
                }
                let emb = g.gather_rows(cb, p.scale(k))?;
                let up = g.constant(tok.quantizer.up(k).clone());
                let term = g.matmul(up, emb)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            rows.push(acc.expect("final scale is always kept"));
        }
        let all = g.concat_rows(&rows)?;
        let f = g.rows_to_nchw(all, batch.len(), h, w)?;
        let out = tok.vae.decode(&mut g, &tok.params, f);
        for (id, frozen) in tok.params.ids().collect::<Vec<_>>().into_iter().zip(was_frozen) {
            tok.params.set_frozen(id, frozen);
        }
        let out = out?;
        let x = g.constant(stack_images(batch)?);
        let loss = g.mse(out, x)?;
        let grads = g.backward(loss)?.params(self.codebook_store.len());
        self.opt
            .step(&mut self.codebook_store, &grads, &mut self.codebook_state)?;
        tok.codebook
            .set_vectors(self.codebook_store.get(id).clone())?;
        self.step += 1;
        Ok(g.scalar_value(loss) as f64)
    }
}

/// Data-dependent codebook start: each code copies a random latent row.
fn seed_codebook_from(cb: &mut Codebook<f32>, rows: &Tensor<f32>, rng: &mut Rng) -> Result<()> {
    let (n, d) = rows.dims2()?;
    let mut table = Vec::with_capacity(cb.size() * d);
    for _ in 0..cb.size() {
        table.extend_from_slice(rows.row(rng.below(n)));
    }
    *cb = Codebook::new(Tensor::new(&[cb.size(), d], table)?)?;
    Ok(())
}
