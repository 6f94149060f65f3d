//! Acceptance checks shared by the module tests and the `acceptance` target.
//! Each returns a one-line summary on success and the reason on failure.

use std::ops::{Add, Div, Mul, Sub};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use varsr::arm::{generate, token_loss, Condition, Sampler};
use varsr::data::QualityLabel;
use varsr::guidance::{cfg_combine, posterior_positive, GuidanceSchedule, Ramp};
use varsr::pipeline::{bench, super_resolve, RunConfig, SrOptions};
use varsr::refiner::{Refiner, RefinerConfig};
use varsr::sarope::{attach_positions, effective_position, sa_rope_apply, RopeConfig, TokenGeometry};
use varsr::schedule::Schedule;
use varsr::tokenizer::{quantize_pyramid, Codebook, Quantizer, TokenPyramid};
use varsr_numerics::{gradcheck, AdamW, Graph, OptimizerState, ParamStore, Real, Rng, Tensor};

use super::*;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, budget: f64) -> Result<f64, String> {
    let s = t.elapsed().as_secs_f64();
    ensure(s < budget, || format!("took {s:.2} s, budget {budget} s"))?;
    Ok(s)
}

// ---------------------------------------------------------------- 1

/// Per-precision outcome of the residual identity over 100 instances.
pub struct ResidualStats {
    pub max_err_f32: f64,
    pub max_err_f64: f64,
    pub inexact_f64: usize,
    pub elements: usize,
}

pub fn residual_stats() -> ResidualStats {
    fn run<T: Real>(seed: u64) -> (Tensor<T>, Tensor<T>) {
        let mut rng = Rng::new(seed);
        let cb = Codebook::<T>::random(64, 8, 0.7, &mut rng).unwrap();
        let f = Tensor::<T>::randn(&[256, 8], 1.0, &mut rng);
        let q = Quantizer::<T>::new(desk_schedule()).quantize(&f, &cb).unwrap();
        let sum = q.recon.zip_map(&q.residual, |a, b| a + b).unwrap();
        (f, sum)
    }
    let mut s = ResidualStats {
        max_err_f32: 0.0,
        max_err_f64: 0.0,
        inexact_f64: 0,
        elements: 0,
    };
    for seed in 0..100 {
        let (f, sum) = run::<f32>(seed);
        s.max_err_f32 = s.max_err_f32.max(sum.max_abs_diff(&f));
        let (f, sum) = run::<f64>(seed);
        s.max_err_f64 = s.max_err_f64.max(sum.max_abs_diff(&f));
        s.inexact_f64 += f.data().iter().zip(sum.data()).filter(|(a, b)| a != b).count();
        s.elements += f.numel();
    }
    s
}

pub fn residual_identity() -> Outcome {
    let t = Instant::now();
    let s = residual_stats();
    let secs = within(t, 5.0)?;
    let detail = format!(
        "f32 max {:.2e}; f64 max {:.2e}, {} of {} elements inexact; {secs:.2} s",
        s.max_err_f32, s.max_err_f64, s.inexact_f64, s.elements
    );
    ensure(s.max_err_f32 <= 1e-5 && s.inexact_f64 == 0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

/// Lowest-index L2 argmin by exhaustive search.
pub fn brute_nearest(rows: &Tensor<f64>, cb: &Tensor<f64>) -> Vec<usize> {
    let (n, d) = rows.dims2().unwrap();
    let v = cb.shape()[0];
    (0..n)
        .map(|r| {
            let mut best = (f64::INFINITY, 0);
            for c in 0..v {
                let dist: f64 = (0..d)
                    .map(|j| (rows.data()[r * d + j] - cb.data()[c * d + j]).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1
        })
        .collect()
}

pub fn nearest_neighbour_oracle() -> Outcome {
    let schedule = Schedule::square(&[8]).unwrap();
    let (mut agree, mut total) = (0, 0);
    for seed in 0..50u64 {
        let mut rng = Rng::new(1000 + seed);
        let v = 2 + rng.below(63);
        let d = 1 + rng.below(8);
        let cb = Codebook::<f64>::random(v, d, 1.0, &mut rng).unwrap();
        let f = Tensor::<f64>::randn(&[64, d], 1.0, &mut rng);
        let (pyr, _) = quantize_pyramid(&f, &cb, &schedule).map_err(|e| e.to_string())?;
        let oracle = brute_nearest(&f, cb.vectors());
        agree += pyr.scale(0).iter().zip(&oracle).filter(|(a, b)| a == b).count();
        total += oracle.len();
    }
    let detail = format!("{agree}/{total} indices agree over 50 instances");
    ensure(agree == total, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

/// Worst relative error of the full refiner loss gradient (parameters and
/// `x_K`) against central differences.
pub fn refiner_loss_gradcheck() -> f64 {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::<f64>::new();
    let cfg = RefinerConfig {
        blocks: 2,
        width: 8,
        t_train: 20,
        steps: 4,
        repeats: 2,
        ..RefinerConfig::default()
    };
    let r = Refiner::new(cfg, 3, 5, &mut store, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if !store.is_frozen(id) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
        }
    }
    r.set_z_scale(&mut store, 1.7).unwrap();
    let xk = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let eval = |store: &ParamStore<f64>, xk: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(xk.clone());
        let loss = r.loss(&mut g, store, x, &z, &mut Rng::new(5)).unwrap();
        (g, x, loss)
    };
    let value = |store: &ParamStore<f64>, xk: &Tensor<f64>| {
        let (g, _, loss) = eval(store, xk);
        g.scalar_value(loss)
    };
    let (g, x, loss) = eval(&store, &xk);
    let grads = g.backward(loss).unwrap();
    let pg = grads.params(store.len());
    let h = gradcheck::SUITE_STEP;
    let mut worst: f64 = 0.0;
    for &id in &ids {
        if store.is_frozen(id) {
            assert!(pg.get(id).is_none(), "frozen parameter received a gradient");
            continue;
        }
        let n = store.get(id).numel();
        for e in (0..n).step_by((n / 6).max(1)) {
            let mut s = store.clone();
            let orig = s.get(id).data()[e];
            s.get_mut(id).data_mut()[e] = orig + h;
            let lp = value(&s, &xk);
            s.get_mut(id).data_mut()[e] = orig - h;
            let lm = value(&s, &xk);
            let analytic = pg.get(id).map_or(0.0, |t| t.data()[e]);
            worst = worst.max(gradcheck::rel_err(analytic, (lp - lm) / (2.0 * h)));
        }
    }
    let gx = grads.wrt(x).unwrap();
    for e in 0..xk.numel() {
        let mut p = xk.clone();
        p.data_mut()[e] += h;
        let mut m = xk.clone();
        m.data_mut()[e] -= h;
        let numeric = (value(&store, &p) - value(&store, &m)) / (2.0 * h);
        worst = worst.max(gradcheck::rel_err(gx.data()[e], numeric));
    }
    worst
}

pub fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let suite = gradcheck::op_suite().map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, "none");
    for (name, rep) in &suite {
        ensure(rep.checked > 0, || format!("{name}: nothing checked"))?;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
    }
    let refiner = refiner_loss_gradcheck();
    let secs = within(t, 60.0)?;
    let detail = format!(
        "{} op checks, worst rel {:.1e} ({}); refiner loss rel {refiner:.1e}; {secs:.2} s",
        suite.len(),
        worst.0,
        worst.1
    );
    ensure(worst.0 <= gradcheck::SUITE_TOL && refiner <= gradcheck::SUITE_TOL, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

const FRAME: (usize, usize) = (16, 16);

fn gauss_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_token(rng: &mut Rng) -> TokenGeometry {
    let s = [1usize, 2, 4, 8, 16][rng.below(5)];
    TokenGeometry {
        i: rng.below(s),
        j: rng.below(s),
        h: s,
        w: s,
    }
}

/// The token's effective frame cell, expressed on the finest map.
fn lift(g: TokenGeometry, shift: (usize, usize)) -> TokenGeometry {
    let row = effective_position(g.i, g.h, FRAME.0) as usize;
    let col = effective_position(g.j, g.w, FRAME.1) as usize;
    TokenGeometry {
        i: row + shift.0,
        j: col + shift.1,
        h: 16,
        w: 16,
    }
}

pub fn sa_rope_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(44);
    let (mut norm_err, mut dot_err, mut align_err) = (0.0f64, 0.0f64, 0.0f64);
    for dim in [4usize, 8, 16, 32] {
        let c = RopeConfig::new(dim, RopeConfig::DEFAULT_THETA, FRAME).map_err(|e| e.to_string())?;
        let apply = |x: &[f64], g| sa_rope_apply(x, g, &c).unwrap();
        for _ in 0..500 {
            let x = gauss_vec(dim, &mut rng);
            let y = apply(&x, random_token(&mut rng));
            let n = dot(&x, &x).sqrt();
            norm_err = norm_err.max((dot(&y, &y).sqrt() - n).abs() / n);

            // Shifting both tokens by a common frame offset keeps the dot product.
            let (q, k) = (gauss_vec(dim, &mut rng), gauss_vec(dim, &mut rng));
            let (a, b) = (random_token(&mut rng), random_token(&mut rng));
            let (la, lb) = (lift(a, (0, 0)), lift(b, (0, 0)));
            let room = 15 - la.i.max(lb.i).max(la.j).max(lb.j);
            let shift = (rng.below(room + 1), rng.below(room + 1));
            let base = dot(&apply(&q, a), &apply(&k, b));
            let moved = dot(&apply(&q, lift(a, shift)), &apply(&k, lift(b, shift)));
            let scale = (dot(&q, &q) * dot(&k, &k)).sqrt();
            dot_err = dot_err.max((base - moved).abs() / scale);

            // A coarse token and the finer tokens at its frame location share the rotation.
            let s = [2usize, 4, 8][rng.below(3)];
            let (i, j) = (rng.below(s), rng.below(s));
            let coarse = apply(&x, TokenGeometry { i, j, h: s, w: s });
            let mut r = 16 / s;
            while r >= 2 {
                let fs = s * r;
                let fine = apply(&x, TokenGeometry { i: i * r, j: j * r, h: fs, w: fs });
                let e = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                align_err = align_err.max(e);
                r /= 2;
            }
        }
    }
    let schedule = desk_schedule();
    let geo = attach_positions(Some(FRAME), &schedule).map_err(|e| e.to_string())?;
    let c = RopeConfig::new(32, RopeConfig::DEFAULT_THETA, FRAME).map_err(|e| e.to_string())?;
    let n_final = schedule.tokens(schedule.len() - 1);
    let phase_exact = geo[..n_final]
        .iter()
        .zip(&geo[geo.len() - n_final..])
        .all(|(p, f)| c.angles(*p) == c.angles(*f));
    let secs = within(t, 5.0)?;
    let detail = format!(
        "norm {norm_err:.1e}, dot {dot_err:.1e}, align {align_err:.1e}, phase {}; {secs:.2} s",
        if phase_exact { "exact" } else { "differs" }
    );
    ensure(
        norm_err <= 1e-6 && dot_err <= 1e-6 && align_err <= 1e-7 && phase_exact,
        || detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

pub fn mask_causality() -> Outcome {
    let sched = desk_schedule();
    let (arm, store) = random_arm::<f64>(small_arm_config(), sched.clone(), 16, 2);
    let mut rng = Rng::new(3);
    let lr = random_image(16, 16, &mut rng);
    let cond = [Condition::Image {
        lr: &lr,
        quality: QualityLabel::Positive,
    }];
    let p = random_pyramid(&sched, 16, &mut rng);
    let counts = sched.token_counts();
    let offsets = sched.offsets();
    let plen = arm.prefix_len(true);

    let mut g = Graph::new();
    let x = arm.embed(&mut g, &store, &[&p], &cond).map_err(|e| e.to_string())?;
    let leaf = g.leaf(g.value(x).clone());
    let out = arm
        .forward_embedded(&mut g, &store, leaf, &[&p], &cond)
        .map_err(|e| e.to_string())?;
    let mut leaked = 0usize;
    for k in 0..sched.len() {
        let rows: Vec<usize> = (offsets[k]..offsets[k] + counts[k]).collect();
        let lk = g.gather_rows(out.logits, &rows).unwrap();
        let loss = token_loss(&mut g, lk, p.scale(k)).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(leaf).unwrap();
        let width = gx.shape()[1];
        let later = (plen + offsets[k] + counts[k]) * width;
        leaked += gx.data()[later..].iter().filter(|&&v| v != 0.0).count();
        let prefix_mass: f64 = gx.data()[..plen * width].iter().map(|v| v.abs()).sum();
        ensure(prefix_mass > 0.0, || format!("scale {k} does not reach the prefix"))?;
    }

    // Perturbing each later scale leaves every earlier logit bit-identical.
    let vocab = 16;
    let mut changed = 0usize;
    for k in 1..sched.len() {
        let mut maps = p.maps().to_vec();
        maps[k] = maps[k].iter().map(|&t| (t + 5) % vocab).collect();
        let q = TokenPyramid::new(sched.clone(), maps).unwrap();
        let mut g2 = Graph::new();
        let out2 = arm.forward_train(&mut g2, &store, &[&q], &cond).unwrap();
        // Scale k's tokens are input to scale k + 1 onwards.
        let until = offsets.get(k + 1).copied().unwrap_or(offsets[k] + counts[k]) * vocab;
        let a = &g.value(out.logits).data()[..until];
        let b = &g2.value(out2.logits).data()[..until];
        changed += a.iter().zip(b).filter(|(x, y)| x != y).count();
    }
    let detail = format!("{leaked} non-zero later-scale gradients, {changed} changed earlier logits");
    ensure(leaked == 0 && changed == 0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

/// Largest |cached − uncached| over logits and `x_K` for one condition type.
pub fn kv_cache_gap(cond_image: bool) -> Result<f32, String> {
    let sched = desk_schedule();
    let (arm, store) = random_arm::<f32>(small_arm_config(), sched.clone(), 32, 4);
    let mut rng = Rng::new(5);
    let lr = random_image(16, 16, &mut rng);
    let cond = if cond_image {
        Condition::Image {
            lr: &lr,
            quality: QualityLabel::Positive,
        }
    } else {
        Condition::Class {
            class: 2,
            quality: QualityLabel::Positive,
        }
    };
    let gen = generate(&arm, &store, cond, None, &Sampler::default(), &mut rng).map_err(|e| e.to_string())?;
    ensure(gen.forward_passes == sched.len(), || {
        format!("{} passes for {} scales", gen.forward_passes, sched.len())
    })?;
    let mut g = Graph::new();
    let out = arm
        .forward_train(&mut g, &store, &[&gen.pyramid], &[cond])
        .map_err(|e| e.to_string())?;
    let full = g.value(out.logits);
    let cached: Vec<f32> = gen.logits.iter().flat_map(|t| t.data().to_vec()).collect();
    ensure(full.numel() == cached.len(), || "logit counts differ".into())?;
    let diff = full
        .data()
        .iter()
        .zip(&cached)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    Ok(diff.max(g.value(out.x_k).max_abs_diff(&gen.x_k[0]) as f32))
}

pub fn kv_cache() -> Outcome {
    let image = kv_cache_gap(true)?;
    let class = kv_cache_gap(false)?;
    let detail = format!("max |cached - uncached| {image:.1e} (LR prefix), {class:.1e} (class)");
    ensure(image <= 1e-5 && class <= 1e-5, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

/// Forward-mode dual number `v + d·ε`.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn var(v: f64) -> Self {
        Self { v, d: 1.0 }
    }
    pub fn c(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
    pub fn exp(self) -> Self {
        let e = self.v.exp();
        Self { v: e, d: e * self.d }
    }
    pub fn ln(self) -> Self {
        Self {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

/// Unit-variance Gaussian likelihood of the scalar "image" `x`.
pub fn gauss(x: Dual, mean: f64) -> Dual {
    let t = x - Dual::c(mean);
    Dual::c((2.0 * std::f64::consts::PI).sqrt().recip()) * (Dual::c(-0.5) * t * t).exp()
}

/// Worst deviation from the two-class posterior gradient identities at one
/// point: the Bayes form, the `(1 − post)` form and the posterior value.
pub fn bayes_gap(x: f64, mu_p: f64, mu_n: f64, prior: f64) -> f64 {
    let xi = Dual::var(x);
    let (lp, ln_) = (gauss(xi, mu_p), gauss(xi, mu_n));
    let joint = Dual::c(prior) * lp;
    let evidence = joint + Dual::c(1.0 - prior) * ln_;
    let post = joint / evidence;
    let d_post = post.ln().d;
    let (d_lp, d_ln, d_ev) = (lp.ln().d, ln_.ln().d, evidence.ln().d);
    [
        (post.v - posterior_positive(prior, lp.v, ln_.v)).abs(),
        (d_post - (d_lp - d_ev)).abs(),
        (d_post - (1.0 - post.v) * (d_lp - d_ln)).abs(),
        (d_lp - (mu_p - x)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Runs `super_resolve` with and without a zero-strength guided stream and
/// counts trials whose tokens or images differ.
pub fn zero_strength_mismatches(trials: u64) -> usize {
    let model = random_model(tiny_config(), 3);
    let mut rng = Rng::new(9);
    let mut bad = 0;
    for trial in 0..trials {
        let lr = random_image(4, 4, &mut rng);
        let guided = SrOptions {
            guidance: Some(GuidanceSchedule::new(0.0, Ramp::Linear, true).unwrap()),
            sampler: Sampler::default(),
            seed: trial,
        };
        let plain = SrOptions {
            guidance: None,
            ..guided
        };
        let a = super_resolve(&model, &lr, &guided).unwrap();
        let b = super_resolve(&model, &lr, &plain).unwrap();
        if a.pyramid != b.pyramid || a.image != b.image {
            bad += 1;
        }
    }
    bad
}

pub fn cfg_identities() -> Outcome {
    let trials = 5;
    let mismatched = zero_strength_mismatches(trials);

    let mut rng = Rng::new(21);
    let mut affine_bad = 0;
    let dyadic = |rng: &mut Rng| (rng.below(2048) as f64 - 1024.0) / 8.0;
    for _ in 0..200 {
        let a = Tensor::new(&[3, 4], (0..12).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let b = Tensor::new(&[3, 4], (0..12).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let c = dyadic(&mut rng);
        let lam = rng.below(64) as f64 / 8.0;
        let shift = |t: &Tensor<f64>| t.map(|v| v + c);
        let lhs = cfg_combine(&shift(&a), &shift(&b), lam).unwrap();
        let rhs = shift(&cfg_combine(&a, &b, lam).unwrap());
        if lhs != rhs {
            affine_bad += 1;
        }
    }

    let mut bayes = 0.0f64;
    for _ in 0..1000 {
        let x = rng.uniform() * 6.0 - 3.0;
        let mu_p = rng.uniform() * 4.0 - 2.0;
        let mu_n = rng.uniform() * 4.0 - 2.0;
        let prior = 0.05 + 0.9 * rng.uniform();
        bayes = bayes.max(bayes_gap(x, mu_p, mu_n, prior));
    }
    let detail = format!(
        "λ_max=0 differs in {mismatched}/{trials} runs; affine shift inexact in {affine_bad}/200; Bayes gap {bayes:.1e}"
    );
    ensure(mismatched == 0 && affine_bad == 0 && bayes <= 1e-9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

/// Trains a desk-width refiner on 16 fixed `(x_K, z)` pairs; returns the
/// trailing-100-step mean loss, the sampled MSE and the zero-baseline MSE.
pub fn overfit_sixteen_pairs(steps: usize) -> (f64, f64, f64) {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f32>::new();
    let r = Refiner::new(RefinerConfig::default(), 16, 128, &mut store, &mut rng).unwrap();
    let xk = Tensor::randn(&[16, 128], 1.0, &mut rng);
    let z = Tensor::randn(&[16, 16], 1.0, &mut rng);
    let opt = AdamW::default();
    let mut state = OptimizerState::new(&store);
    let mut trail = Vec::new();
    for step in 0..steps {
        let mut g = Graph::new();
        let x = g.constant(xk.clone());
        let loss = r.loss(&mut g, &store, x, &z, &mut rng).unwrap();
        let grads = g.backward(loss).unwrap();
        let n = store.len();
        opt.step(&mut store, &grads.params(n), &mut state).unwrap();
        if step + 100 >= steps {
            trail.push(g.scalar_value(loss) as f64);
        }
    }
    let tail = trail.iter().sum::<f64>() / trail.len() as f64;
    let zhat = r.sample(&store, &xk, None, 10, 1).unwrap().z;
    let mse = zhat.zip_map(&z, |a, b| (a - b) * (a - b)).unwrap().mean() as f64;
    (tail, mse, z.sq_norm() as f64 / z.numel() as f64)
}

pub fn refiner_training() -> Outcome {
    let t = Instant::now();
    let (tail, mse, base) = overfit_sixteen_pairs(2000);
    let secs = within(t, 180.0)?;
    let detail = format!("loss {tail:.4} after 2000 steps; sampled MSE {mse:.4} vs zero {base:.4}; {secs:.1} s");
    ensure(tail < 0.05 && mse < base, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

pub fn varsr_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_varsr"))
}

/// Runs the CLI in `dir`; fails with its stderr tail on a non-zero exit.
pub fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(varsr_bin())
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    if !out.status.success() {
        let tail: Vec<&str> = stderr.lines().rev().take(3).collect();
        return Err(format!("`varsr {}` exited {:?}: {}", args.join(" "), out.status.code(), tail.join(" | ")));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Mean row of an evaluation CSV: `(psnr, ssim, bicubic_psnr, bicubic_ssim)`.
pub fn eval_means(csv: &str) -> Result<(f64, f64, f64, f64), String> {
    let line = csv
        .lines()
        .find(|l| l.starts_with("mean,"))
        .ok_or("evaluation CSV has no mean row")?;
    let v: Vec<f64> = line.split(',').skip(1).map(|s| s.parse().unwrap_or(f64::NAN)).collect();
    match v.as_slice() {
        [p, s, bp, bs, ..] => Ok((*p, *s, *bp, *bs)),
        _ => Err(format!("malformed mean row `{line}`")),
    }
}

/// Corpus, the three training stages and held-out evaluation through the CLI
/// with the desk configuration in `configs/e2e.json`.
pub fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    std::fs::copy(repo_root().join("configs/e2e.json"), d.join("e2e.json")).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let c = ["--config", "e2e.json"];
    let step = |args: &[&str]| cli(d, &[&c[..], args].concat());
    step(&["corpus", "--out", "corpus"])?;
    step(&["tokenizer-train", "--out", "tok.ckpt"])?;
    step(&["pretrain", "--checkpoint", "tok.ckpt", "--out", "pre.ckpt"])?;
    step(&["finetune", "--checkpoint", "pre.ckpt", "--out", "ft.ckpt"])?;
    step(&["eval", "--greedy", "--checkpoint", "ft.ckpt", "--out", "eval.csv"])?;
    let secs = t.elapsed().as_secs_f64();
    let csv = std::fs::read_to_string(d.join("eval.csv")).map_err(|e| e.to_string())?;
    let rows = csv.lines().count().saturating_sub(2);
    let (p, s, bp, bs) = eval_means(&csv)?;
    let detail = format!(
        "{rows} held-out images: PSNR {p:.2} vs bicubic {bp:.2} ({:+.2} dB), SSIM {s:.4} vs {bs:.4}; {:.1} min",
        p - bp,
        secs / 60.0
    );
    ensure(rows == 32 && p >= bp + 0.5 && s >= bs && secs < 30.0 * 60.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

pub fn step_structure() -> Outcome {
    let cfg = RunConfig {
        schedule: vec![1, 2, 4, 8, 16],
        ..tiny_config()
    };
    let model = random_model(cfg, 8);
    let lr = random_image(16, 16, &mut Rng::new(2));
    let mut passes = Vec::new();
    for guidance in [None, Some(GuidanceSchedule::new(2.0, Ramp::Linear, true).unwrap())] {
        let opts = SrOptions {
            guidance,
            sampler: Sampler::default(),
            seed: 4,
        };
        let out = super_resolve(&model, &lr, &opts).map_err(|e| e.to_string())?;
        passes.push((out.ar_passes, out.refiner_steps));
    }
    let opts = SrOptions::from_config(&model).map_err(|e| e.to_string())?;
    let report = bench(&model, &opts).map_err(|e| e.to_string())?;
    let tokens: Vec<usize> = report.desk.iter().map(|c| c.tokens).collect();
    let detail = format!(
        "(AR passes, refiner steps) {passes:?}; bench tokens {tokens:?} -> {}",
        report.total_tokens()
    );
    let ok = passes.iter().all(|&p| p == (5, 10))
        && (report.forward_passes, report.refiner_steps) == (5, 10)
        && tokens == [1, 4, 16, 64, 256]
        && report.total_tokens() == 341;
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

/// Every file under `root`, by relative path.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Tiny CLI configuration: the pipeline fixture with a handful of steps.
pub fn tiny_cli_config() -> String {
    RunConfig {
        corpus_size: 12,
        holdout_size: 2,
        tokenizer_iterations: 4,
        dropout_iterations: 2,
        tokenizer_batch: 4,
        batch_size: 4,
        pretrain_iterations: 3,
        finetune_iterations: 3,
        log_every: 0,
        train_manifest: "corpus/train.tsv".into(),
        eval_manifest: "corpus/holdout.tsv".into(),
        ..tiny_config()
    }
    .to_json()
}

/// Every subcommand, run under `--deterministic --seed seed` in `dir`.
pub fn run_all_commands(dir: &Path, seed: u64) -> Result<(), String> {
    std::fs::write(dir.join("tiny.json"), tiny_cli_config()).map_err(|e| e.to_string())?;
    let s = seed.to_string();
    let base = ["--config", "tiny.json", "--deterministic", "--seed", s.as_str()];
    let step = |args: &[&str]| cli(dir, &[&base[..], args].concat()).map(|_| ());
    step(&["corpus", "--out", "corpus"])?;
    step(&["tokenizer-train", "--out", "tok.ckpt"])?;
    step(&["pretrain", "--checkpoint", "tok.ckpt", "--out", "pre.ckpt"])?;
    step(&["finetune", "--checkpoint", "pre.ckpt", "--out", "ft.ckpt"])?;
    let held = dir.join("corpus/holdout").read_dir().map_err(|e| e.to_string())?;
    let first = held.map(|e| e.unwrap().path()).min().ok_or("empty holdout")?;
    // `sr` takes a 4×4 LR input at this configuration.
    let hr = varsr::data::read_image(&first).map_err(|e| e.to_string())?;
    let lr = varsr::data::resize_bicubic(&hr, 4, 4).map_err(|e| e.to_string())?;
    varsr::data::write_image(dir.join("lr.png"), &lr).map_err(|e| e.to_string())?;
    step(&["sr", "lr.png", "--checkpoint", "ft.ckpt", "--out", "sr.png"])?;
    step(&["eval", "--checkpoint", "ft.ckpt", "--out", "eval.csv"])?;
    step(&["bench", "--checkpoint", "ft.ckpt", "--out", "bench.csv"])?;
    Ok(())
}

pub fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all_commands(a.path(), 7)?;
    run_all_commands(b.path(), 7)?;
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<String> = sa
        .keys()
        .chain(sb.keys())
        .filter(|k| sa.get(*k) != sb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let detail = format!("8 commands, {} output files, {} differ", sa.len(), differing.len());
    ensure(differing.is_empty() && sa.len() > 10, || format!("{detail}: {differing:?}"))?;
    Ok(detail)
}
