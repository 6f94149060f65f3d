//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod criteria;

use varsr::arm::{Arm, ArmConfig};
use varsr::data::ImageBuffer;
use varsr::pipeline::{Networks, RunConfig, VarsrModel};
use varsr::schedule::Schedule;
use varsr::tokenizer::{Codebook, TokenPyramid, Tokenizer};
use varsr_numerics::{ParamStore, Real, Rng, Tensor};

pub fn desk_schedule() -> Schedule {
    Schedule::square(&[1, 2, 4, 8, 16]).unwrap()
}

pub fn small_arm_config() -> ArmConfig {
    ArmConfig {
        width: 32,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        cond_channels: vec![4, 8],
        ..ArmConfig::default()
    }
}

/// A transformer whose every weight (gates and head included) is drawn at
/// random, so no path is silenced by zero initialization.
pub fn random_arm<T: Real>(cfg: ArmConfig, schedule: Schedule, vocab: usize, seed: u64) -> (Arm<T>, ParamStore<T>) {
    let mut rng = Rng::new(seed);
    let cb = Codebook::new(Tensor::randn(&[vocab, 8], 1.0, &mut rng)).unwrap();
    let (h, w) = schedule.final_dims();
    let f = 1 << cfg.cond_channels.len();
    let mut store = ParamStore::new();
    let arm = Arm::new(cfg, schedule, cb, (h * f, w * f), &mut store, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.2, &mut rng);
    }
    (arm, store)
}

pub fn random_pyramid(schedule: &Schedule, vocab: usize, rng: &mut Rng) -> TokenPyramid {
    let maps = schedule
        .token_counts()
        .into_iter()
        .map(|n| (0..n).map(|_| rng.below(vocab)).collect())
        .collect();
    TokenPyramid::new(schedule.clone(), maps).unwrap()
}

pub fn random_image(h: usize, w: usize, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |_, _| {
        [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
    })
}

/// A run configuration small enough for unit-speed pipeline tests: 16×16 HR,
/// 4×4 LR, three scales.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        schedule: vec![1, 2, 4],
        vocab: 16,
        latent_dim: 4,
        vae_channels: 8,
        vae_blocks: 1,
        arm_width: 16,
        arm_blocks: 1,
        arm_heads: 2,
        mlp_ratio: 2,
        cond_channels: vec![8, 8],
        refiner_blocks: 1,
        refiner_width: 16,
        t_train: 20,
        ..RunConfig::default()
    }
}

/// A model whose every network weight is random, so guidance and sampling
/// paths carry signal.
pub fn random_model(cfg: RunConfig, seed: u64) -> VarsrModel {
    let tokenizer = Tokenizer::new(cfg.tokenizer_config().unwrap(), cfg.seed).unwrap();
    let mut nets = Networks::new(&cfg, &tokenizer).unwrap();
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = nets.store.ids().collect();
    for id in ids {
        if nets.store.is_frozen(id) {
            continue;
        }
        let shape = nets.store.get(id).shape().to_vec();
        *nets.store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    VarsrModel {
        config: cfg,
        tokenizer,
        nets,
    }
}
