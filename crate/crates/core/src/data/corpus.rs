//! Procedural training images. Each generator family is one class.

use varsr_numerics::Rng;

use super::image::ImageBuffer;
use super::preprocess::preprocess;
use crate::error::{config, Result};

pub const FAMILIES: [&str; 4] = ["gradient", "checkerboard", "gabor", "polygon"];

/// Supersampling factor used when rasterizing hard edges.
const SUPERSAMPLE: usize = 3;

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Averages `shade` over a `SUPERSAMPLE²` grid inside each pixel.
fn rasterize(size: usize, shade: impl Fn(f64, f64) -> [f32; 3]) -> ImageBuffer {
    let s = SUPERSAMPLE as f64;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    ImageBuffer::from_fn(size, size, |y, x| {
        let mut acc = [0.0f32; 3];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) / s;
                let px = x as f64 + (sx as f64 + 0.5) / s;
                let c = shade(py, px);
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
        }
        acc.map(|v| v * inv)
    })
}

fn gradient(size: usize, rng: &mut Rng) -> ImageBuffer {
    let (a, b, c) = (random_color(rng), random_color(rng), random_color(rng));
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let (cy, cx) = (
        rng.uniform_range(0.0, size as f64),
        rng.uniform_range(0.0, size as f64),
    );
    let radius = rng.uniform_range(0.4, 1.0) * size as f64;
    let n = size as f64;
    ImageBuffer::from_fn(size, size, |y, x| {
        let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = (((y - n / 2.0) * dy + (x - n / 2.0) * dx) / n + 0.5).clamp(0.0, 1.0);
        let r = (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / radius).min(1.0);
        mix(mix(a, b, t as f32), c, (1.0 - r) as f32 * 0.6)
    })
}

fn checkerboard(size: usize, rng: &mut Rng) -> ImageBuffer {
    let (a, b) = (random_color(rng), random_color(rng));
    let period = rng.uniform_range(6.0, 20.0);
    let theta = rng.uniform_range(0.0, std::f64::consts::PI / 2.0);
    let (s, c) = theta.sin_cos();
    let (oy, ox) = (rng.uniform_range(0.0, period), rng.uniform_range(0.0, period));
    rasterize(size, |y, x| {
        let u = ((x * c + y * s + ox) / period).floor() as i64;
        let v = ((-x * s + y * c + oy) / period).floor() as i64;
        if (u + v).rem_euclid(2) == 0 {
            a
        } else {
            b
        }
    })
}

fn gabor(size: usize, rng: &mut Rng) -> ImageBuffer {
    let (bg, fg) = (random_color(rng), random_color(rng));
    let freq = rng.uniform_range(1.0 / 24.0, 1.0 / 7.0);
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let n = size as f64;
    let (cy, cx) = (rng.uniform_range(0.3, 0.7) * n, rng.uniform_range(0.3, 0.7) * n);
    let sigma = rng.uniform_range(0.2, 0.45) * n;
    let (s, c) = theta.sin_cos();
    ImageBuffer::from_fn(size, size, |y, x| {
        let (y, x) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let carrier = (std::f64::consts::TAU * freq * (x * c + y * s) + phase).cos();
        let envelope = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
        mix(bg, fg, (0.5 + 0.5 * carrier * envelope) as f32)
    })
}

struct Polygon {
    points: Vec<(f64, f64)>,
    color: [f32; 3],
}

impl Polygon {
    /// Random star-shaped polygon: vertices at sorted angles around a centre.
    fn random(size: usize, rng: &mut Rng) -> Self {
        let n = size as f64;
        let (cy, cx) = (rng.uniform_range(0.15, 0.85) * n, rng.uniform_range(0.15, 0.85) * n);
        let radius = rng.uniform_range(0.12, 0.4) * n;
        let count = 3 + rng.below(4);
        let mut angles: Vec<f64> = (0..count)
            .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let points = angles
            .iter()
            .map(|a| {
                let r = radius * rng.uniform_range(0.6, 1.0);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        Self {
            points,
            color: random_color(rng),
        }
    }

    /// Even-odd ray casting.
    fn contains(&self, y: f64, x: f64) -> bool {
        let mut inside = false;
        let n = self.points.len();
        for i in 0..n {
            let (yi, xi) = self.points[i];
            let (yj, xj) = self.points[(i + n - 1) % n];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
        inside
    }
}

fn polygons(size: usize, rng: &mut Rng) -> ImageBuffer {
    let bg = random_color(rng);
    let shapes: Vec<Polygon> = (0..1 + rng.below(3)).map(|_| Polygon::random(size, rng)).collect();
    rasterize(size, |y, x| {
        shapes
            .iter()
            .rev()
            .find(|p| p.contains(y, x))
            .map_or(bg, |p| p.color)
    })
}

/// Renders one image of `family` at `size × size`.
pub fn render(family: usize, size: usize, rng: &mut Rng) -> ImageBuffer {
    let mut img = match family {
        0 => gradient(size, rng),
        1 => checkerboard(size, rng),
        2 => gabor(size, rng),
        _ => polygons(size, rng),
    };
    img.clamp01();
    img
}

/// `n` procedural images of `size × size` with their class (= family) ids.
///
/// Images are rendered on a frame 1.25× larger and passed through
/// [`preprocess`], the same path external images take. Image `i` draws from
/// its own derived stream, so prefixes of a corpus are stable as `n` grows.
pub fn generate_corpus(
    n: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(ImageBuffer, usize)>> {
    if n == 0 {
        return config("corpus size must be at least 1");
    }
    if classes == 0 || classes > FAMILIES.len() {
        return config(format!("classes must be in 1..={}, got {classes}", FAMILIES.len()));
    }
    let frame = (size as f64 * 1.25).ceil() as usize;
    (0..n)
        .map(|i| {
            let mut rng = Rng::derive(seed, "corpus", i as u64);
            let family = if classes == 1 { rng.below(FAMILIES.len()) } else { i % classes };
            let class_id = if classes == 1 { 0 } else { family };
            let img = render(family, frame, &mut rng);
            Ok((preprocess(&img, size)?, class_id))
        })
        .collect()
}
