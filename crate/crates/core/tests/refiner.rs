mod common;

use varsr::refiner::{cosine_schedule, diffuse, Refiner, RefinerConfig};
use varsr_numerics::{gradcheck, Graph, ParamStore, Rng, Tensor};

#[test]
fn overfit_loss_and_sampling() {
    let (tail, mse, base) = common::criteria::overfit_sixteen_pairs(2000);
    assert!(tail < 0.05, "trailing loss {tail}");
    assert!(mse < base, "sampled MSE {mse} vs zero baseline {base}");
}

#[test]
fn golden_cosine_level() {
    // cos²(((50/100 + 0.008)/1.008)·π/2) / cos²((0.008/1.008)·π/2)
    let s = cosine_schedule(100, 0.008).unwrap();
    assert!((s.alpha_bar(50).unwrap() - 0.49384359044063775).abs() < 1e-15);
    assert!(cosine_schedule(1, 0.008).is_err());
}

#[test]
fn diffuse_identities() {
    let s = cosine_schedule(100, 0.008).unwrap();
    let mut rng = Rng::new(0);
    let z = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
    let e = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
    assert_eq!(diffuse(&z, 0, &e, &s).unwrap(), z);
    let zero = Tensor::zeros(&[4, 3]);
    let a = s.alpha_bar(30).unwrap();
    let scaled = diffuse(&z, 30, &zero, &s).unwrap();
    assert!(scaled.max_abs_diff(&z.map(|v| v * a.sqrt())) == 0.0);
    let noise_only = diffuse(&zero, 70, &e, &s).unwrap();
    let b = (1.0 - s.alpha_bar(70).unwrap()).sqrt();
    assert!(noise_only.max_abs_diff(&e.map(|v| v * b)) == 0.0);
    assert!(diffuse(&z, 101, &e, &s).is_err());
}

#[test]
fn zero_predictor_loss_is_unit() {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f64>::new();
    let cfg = RefinerConfig { repeats: 64, ..RefinerConfig::default() };
    let r = Refiner::new(cfg, 4, 8, &mut store, &mut rng).unwrap();
    let mut g = Graph::new();
    let xk = g.constant(Tensor::randn(&[32, 8], 1.0, &mut rng));
    let z = Tensor::randn(&[32, 4], 1.0, &mut rng);
    let loss = r.loss(&mut g, &store, xk, &z, &mut rng).unwrap();
    assert!((g.scalar_value(loss) - 1.0).abs() < 0.05, "{}", g.scalar_value(loss));
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let worst = common::criteria::refiner_loss_gradcheck();
    assert!(worst <= gradcheck::SUITE_TOL, "worst relative error {worst}");
}

#[test]
fn sampling_is_seeded_and_counts_steps() {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f32>::new();
    let r = Refiner::new(RefinerConfig::default(), 4, 8, &mut store, &mut rng).unwrap();
    let xk = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let a = r.sample(&store, &xk, None, 10, 3).unwrap();
    let b = r.sample(&store, &xk, None, 10, 3).unwrap();
    assert_eq!(a.steps, 10);
    assert_eq!(a.z, b.z);
    let one = r.sample(&store, &xk, None, 1, 3).unwrap();
    assert_eq!(one.steps, 1);
    let guided = r.sample(&store, &xk, Some((&xk, 6.0)), 10, 3).unwrap();
    assert_eq!(guided.z, a.z);
}
