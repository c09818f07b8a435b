//! Seeded synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset};
use crate::tensor::{DType, Tensor};

/// `classes` Gaussian clusters around seeded standard-normal centres, with
/// isotropic noise `spread`. Sample `i` belongs to class `i % classes`.
pub fn synth_blobs(n: usize, dims: &[usize], classes: usize, seed: u64, spread: f64, dtype: DType) -> Result<Dataset, DataError> {
    if classes < 2 || n < classes || classes > u16::MAX as usize {
        return Err(DataError::Config(format!("blobs need 2 <= classes <= n, got {classes} classes for {n} samples")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Config(format!("spread {spread} must be finite and non-negative")));
    }
    if dims.is_empty() || dims.contains(&0) {
        return Err(DataError::Config(format!("invalid sample dims {dims:?}")));
    }
    let d: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f64> = (0..classes * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u16);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            values.push(centres[c * d + j] + spread * noise);
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(dims);
    Dataset::new(Tensor::from_values(&full, &values, dtype)?, labels, classes)
}

// Seven-segment layout: a top, b upper right, c lower right, d bottom,
// e lower left, f upper left, g middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

const SIDE: usize = 28;

/// Handwriting-like 28x28 digit glyphs in `[0, 1]`, quantized to multiples
/// of 1/255 so they survive an IDX round trip. Each sample draws its own
/// glyph size, stroke width, position, slant, intensity, and background
/// noise. Sample `i` shows digit `i % 10`.
pub fn synth_glyphs(n: usize, seed: u64, dtype: DType) -> Result<Dataset, DataError> {
    if n < 10 {
        return Err(DataError::Config(format!("glyphs need at least 10 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit as u16);
        let img = glyph(digit, &mut rng);
        values.extend(img.iter().map(|&v| (v * 255.0).round() / 255.0));
    }
    Dataset::new(Tensor::from_values(&[n, 1, SIDE, SIDE], &values, dtype)?, labels, 10)
}

fn glyph(digit: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = rng.random_range(9..=14) as f64;
    let h = rng.random_range(15..=21) as f64;
    let t = rng.random_range(1.6..3.2);
    let slant = rng.random_range(-0.25..0.25);
    let x0 = rng.random_range(2.0..(26.0 - w - 0.25 * h).max(2.5));
    let y0 = rng.random_range(2.0..(26.0 - h).max(2.5));
    let ink = rng.random_range(0.7..1.0);
    let noise = rng.random_range(0.0..0.2);
    let on = SEGMENTS[digit];
    // segments as line pieces in glyph-local coordinates
    let mid = h / 2.0;
    let lines = [
        ((0.0, 0.0), (w, 0.0)),
        ((w, 0.0), (w, mid)),
        ((w, mid), (w, h)),
        ((0.0, h), (w, h)),
        ((0.0, mid), (0.0, h)),
        ((0.0, 0.0), (0.0, mid)),
        ((0.0, mid), (w, mid)),
    ];
    // per-segment jitter of end points makes strokes less regular
    let jitter: Vec<[f64; 4]> = (0..7)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8)))
        .collect();
    let mut img = vec![0.0; SIDE * SIDE];
    for (py, row) in img.chunks_mut(SIDE).enumerate() {
        for (px, out) in row.iter_mut().enumerate() {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            // undo the slant: x shifts with height
            let ly = fy - y0;
            let lx = fx - x0 - slant * (h - ly);
            let mut best = f64::INFINITY;
            for (s, &((ax, ay), (bx, by))) in lines.iter().enumerate() {
                if !on[s] {
                    continue;
                }
                let j = jitter[s];
                best = best.min(segment_distance(lx, ly, ax + j[0], ay + j[1], bx + j[2], by + j[3]));
            }
            let stroke = (1.0 - (best - t / 2.0).max(0.0)).clamp(0.0, 1.0);
            let bg = noise * rng.random::<f64>();
            *out = (ink * stroke).max(bg).clamp(0.0, 1.0);
        }
    }
    img
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let u = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + u * dx - px, ay + u * dy - py);
    (cx * cx + cy * cy).sqrt()
}
