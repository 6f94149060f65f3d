mod common;

use proptest::prelude::*;
use varsr::data::{
    bicubic_upscale, degrade, generate_corpus, label_quality, make_pair, preprocess, psnr, read_image,
    read_manifest, ssim_y, write_image, write_manifest, DegradationParams, ImageBuffer, ManifestEntry,
    QualityLabel,
};
use varsr::VarsrError;
use varsr_numerics::Rng;

#[test]
fn psnr_of_uniform_offset() {
    let a = ImageBuffer::filled(8, 8, [0.5; 3]);
    let b = ImageBuffer::filled(8, 8, [0.6; 3]);
    // mse = 0.01 → 20 dB, up to f32 rounding of the inputs.
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);
}

#[test]
fn ssim_bounds() {
    let mut rng = Rng::new(1);
    let a = common::random_image(32, 32, &mut rng);
    let b = common::random_image(32, 32, &mut rng);
    assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let s = ssim_y(&a, &b).unwrap();
    assert!(s < 0.2 && s > -1.0, "{s}");
    let c = ImageBuffer::filled(16, 16, [0.0; 3]);
    assert!(ssim_y(&a, &c).is_err());
}

#[test]
fn corpus_prefix_is_stable() {
    let short = generate_corpus(6, 4, 64, 11).unwrap();
    let long = generate_corpus(12, 4, 64, 11).unwrap();
    for (a, b) in short.iter().zip(&long) {
        assert_eq!(a, b);
    }
    assert!(long.iter().all(|(img, c)| img.dims() == (64, 64) && *c < 4));
    let classes: std::collections::BTreeSet<_> = long.iter().map(|(_, c)| *c).collect();
    assert_eq!(classes.len(), 4);
    assert!(generate_corpus(4, 9, 64, 0).is_err());
}

#[test]
fn degradation_shapes_and_determinism() {
    let hr = generate_corpus(1, 4, 64, 2).unwrap().remove(0).0;
    let params = DegradationParams::default();
    let a = degrade(&hr, &params, &mut Rng::new(7)).unwrap();
    let b = degrade(&hr, &params, &mut Rng::new(7)).unwrap();
    let c = degrade(&hr, &params, &mut Rng::new(8)).unwrap();
    assert_eq!(a.dims(), (16, 16));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(bicubic_upscale(&a, 4).unwrap().dims(), (64, 64));
    let odd = ImageBuffer::filled(30, 30, [0.5; 3]);
    assert!(matches!(degrade(&odd, &params, &mut Rng::new(0)), Err(VarsrError::Shape(_))));
}

#[test]
fn pairs_are_reproducible_per_index() {
    let hr = generate_corpus(1, 4, 64, 5).unwrap().remove(0).0;
    let params = DegradationParams::default();
    let a = make_pair(&hr, 2, &params, 0.5, 3).unwrap();
    let b = make_pair(&hr, 2, &params, 0.5, 3).unwrap();
    assert_eq!((a.lr.clone(), a.hr.clone(), a.quality), (b.lr, b.hr, b.quality));
    assert_eq!(a.class_id, 2);
    // The LR input never depends on the drawn label.
    let clean = make_pair(&hr, 2, &params, 0.0, 3).unwrap();
    assert_eq!(clean.lr, a.lr);
    assert_eq!(clean.quality, QualityLabel::Positive);
    assert_eq!(clean.hr, hr);
}

#[test]
fn negative_fraction_is_respected() {
    let hr = ImageBuffer::filled(16, 16, [0.5; 3]);
    let mut rng = Rng::new(3);
    let n = 4000;
    let neg = (0..n)
        .filter(|_| label_quality(&hr, &mut rng, 0.2).unwrap().0 == QualityLabel::Negative)
        .count();
    let rate = neg as f64 / n as f64;
    assert!((rate - 0.2).abs() < 0.03, "{rate}");
    assert!(label_quality(&hr, &mut rng, 1.5).is_err());
}

#[test]
fn preprocess_resizes_then_crops() {
    let mut rng = Rng::new(4);
    let wide = common::random_image(90, 160, &mut rng);
    assert_eq!(preprocess(&wide, 64).unwrap().dims(), (64, 64));
    let tall = common::random_image(200, 81, &mut rng);
    assert_eq!(preprocess(&tall, 64).unwrap().dims(), (64, 64));
    let tiny = common::random_image(40, 60, &mut rng);
    assert!(matches!(preprocess(&tiny, 64), Err(VarsrError::ImageTooSmall { .. })));
}

#[test]
fn image_files_round_trip_at_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageBuffer::from_fn(5, 7, |y, x| [y as f32 / 4.0, x as f32 / 6.0, 0.25]);
    for name in ["a.png", "a.ppm"] {
        let path = dir.path().join(name);
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dims(), (5, 7));
        let worst = back
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{name}: {worst}");
    }
    assert!(matches!(read_image(dir.path().join("missing.png")), Err(VarsrError::Io { .. })));
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(read_image(&junk).is_err());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsv");
    let entries = vec![
        ManifestEntry {
            path: dir.path().join("x/0.png"),
            class_id: 1,
            quality: QualityLabel::Positive,
        },
        ManifestEntry {
            path: dir.path().join("x/1.png"),
            class_id: 3,
            quality: QualityLabel::Negative,
        },
    ];
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}

proptest! {
    #[test]
    fn psnr_is_symmetric_and_capped(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = common::random_image(8, 8, &mut rng);
        let b = common::random_image(8, 8, &mut rng);
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!(p > 0.0 && p <= 99.0);
    }
}
