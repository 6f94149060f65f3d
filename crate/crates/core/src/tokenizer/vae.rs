//! Patch-conv autoencoder with a depth-to-space decoder.

use serde::{Deserialize, Serialize};
use varsr_numerics::{init, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

use crate::error::{config, shape, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Spatial downsampling factor (patch size of the input conv).
    pub factor: usize,
    pub latent_dim: usize,
    /// Width of the convolutional trunk at latent resolution.
    pub channels: usize,
    /// Residual 3×3 blocks on each side.
    pub blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_dim: 16,
            channels: 64,
            blocks: 2,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return config("vae factor must be at least 1");
        }
        if self.latent_dim == 0 || self.channels == 0 {
            return config("vae widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn add<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init::fan_in_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = store.add(format!("{name}.b"), init::zeros(&[cout]));
        Self { w, b }
    }

    fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// `x + conv(silu(x))` with a same-size 3×3 conv.
    fn residual<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = g.silu(x);
        let y = self.apply(g, store, a, 1, 1)?;
        Ok(g.add(x, y)?)
    }
}

/// Parameter handles of the autoencoder inside a shared store.
///
/// The encoder embeds non-overlapping `f × f` patches with a stride-`f` conv
/// and refines them with residual 3×3 convs at latent resolution; the decoder
/// mirrors it and expands each site back to its patch by depth-to-space.
#[derive(Clone, Debug)]
pub struct Vae {
    cfg: VaeConfig,
    enc_patch: Conv,
    enc_blocks: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_blocks: Vec<Conv>,
    dec_out: Conv,
}

impl Vae {
    pub fn new<T: Real>(cfg: VaeConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, d, f) = (cfg.channels, cfg.latent_dim, cfg.factor);
        let enc_patch = Conv::add(store, "vae.enc_patch", 3, c, f, rng);
        let enc_blocks = (0..cfg.blocks)
            .map(|i| Conv::add(store, &format!("vae.enc_block{i}"), c, c, 3, rng))
            .collect();
        let enc_out = Conv::add(store, "vae.enc_out", c, d, 3, rng);
        let dec_in = Conv::add(store, "vae.dec_in", d, c, 3, rng);
        let dec_blocks = (0..cfg.blocks)
            .map(|i| Conv::add(store, &format!("vae.dec_block{i}"), c, c, 3, rng))
            .collect();
        let dec_out = Conv::add(store, "vae.dec_out", c, 3 * f * f, 1, rng);
        Ok(Self {
            cfg,
            enc_patch,
            enc_blocks,
            enc_out,
            dec_in,
            dec_blocks,
            dec_out,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    /// `[B,3,H,W]` → `[B,d,H/f,W/f]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let f = self.cfg.factor;
        if c != 3 || h % f != 0 || w % f != 0 {
            return shape(format!("{c}-channel {h}x{w} input not divisible by factor {f}"));
        }
        let mut y = self.enc_patch.apply(g, store, x, f, 0)?;
        for conv in &self.enc_blocks {
            y = conv.residual(g, store, y)?;
        }
        let y = g.silu(y);
        self.enc_out.apply(g, store, y, 1, 1)
    }

    /// `[B,d,h,w]` → `[B,3,h·f,w·f]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let (_, d, _, _) = g.value(f).dims4()?;
        if d != self.cfg.latent_dim {
            return shape(format!("latent has {d} channels, decoder expects {}", self.cfg.latent_dim));
        }
        let mut y = self.dec_in.apply(g, store, f, 1, 1)?;
        for conv in &self.dec_blocks {
            y = conv.residual(g, store, y)?;
        }
        let y = g.silu(y);
        let y = self.dec_out.apply(g, store, y, 1, 0)?;
        Ok(g.depth_to_space(y, self.cfg.factor)?)
    }
}

/// Stacks planar images into one `[B,3,H,W]` tensor.
pub fn stack_images<T: Real>(images: &[&crate::data::ImageBuffer]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return shape("empty image batch");
    };
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return shape(format!("batch mixes {:?} and {:?} images", (h, w), img.dims()));
        }
        data.extend(img.to_planar().into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}
