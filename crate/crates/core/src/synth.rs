//! Synthetic instances: a textured background with one to three coloured
//! shapes, one of which is the segmentation target.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{BinaryMask, ImagePlane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub kind: ShapeKind,
    pub seed: u64,
    pub distractors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSample {
    pub image: ImagePlane,
    pub gt: BinaryMask,
    pub meta: InstanceMeta,
}

/// Smallest target area, in pixels.
pub const MIN_AREA: usize = 16;

enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, cos: f64, sin: f64 },
    Rectangle { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    /// Counter-clockwise vertices.
    Polygon { pts: Vec<(f64, f64)> },
}

impl Shape {
    fn kind(&self) -> ShapeKind {
        match self {
            Shape::Ellipse { .. } => ShapeKind::Ellipse,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Polygon { .. } => ShapeKind::Polygon,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Shape::Rectangle { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Polygon { ref pts } => {
                let n = pts.len();
                (0..n).all(|i| {
                    let (x0, y0) = pts[i];
                    let (x1, y1) = pts[(i + 1) % n];
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                })
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = rng.gen_range(0.15..0.85) * size;
        let cy = rng.gen_range(0.15..0.85) * size;
        let r = rng.gen_range(0.1..0.28) * size;
        let angle: f64 = rng.gen_range(0.0..core::f64::consts::PI);
        let (sin, cos) = (libm::sin(angle), libm::cos(angle));
        match rng.gen_range(0..3) {
            0 => Shape::Ellipse { cx, cy, a: r, b: r * rng.gen_range(0.5..1.0), cos, sin },
            1 => Shape::Rectangle { cx, cy, hw: r, hh: r * rng.gen_range(0.45..1.0), cos, sin },
            _ => {
                let n = rng.gen_range(3..7);
                let mut angles: Vec<f64> =
                    (0..n).map(|_| rng.gen_range(0.0..2.0 * core::f64::consts::PI)).collect();
                angles.sort_by(|a, b| a.total_cmp(b));
                let pts = angles.iter().map(|&t| (cx + r * libm::cos(t), cy + r * libm::sin(t))).collect();
                Shape::Polygon { pts }
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.5; 3];
    let mut best_gap = -1.0;
    for _ in 0..32 {
        let c = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let gap = avoid
            .iter()
            .map(|a| libm::sqrt((0..3).map(|k| (a[k] - c[k]) * (a[k] - c[k])).sum::<f64>()))
            .fold(f64::INFINITY, f64::min);
        if gap >= 0.4 {
            return c;
        }
        if gap > best_gap {
            best_gap = gap;
            best = c;
        }
    }
    best
}

/// A `size × size` instance, fully determined by `seed`.
pub fn generate_instance_sized(seed: u64, size: usize) -> Result<InstanceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    loop {
        let bg = random_color(&mut rng, &[]);
        // two low-frequency waves plus pixel noise
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.5..3.0) * 2.0 * core::f64::consts::PI / s,
                    rng.gen_range(0.5..3.0) * 2.0 * core::f64::consts::PI / s,
                    rng.gen_range(0.0..6.3),
                    rng.gen_range(0.02..0.07),
                )
            })
            .collect();
        let count = rng.gen_range(1..4);
        let mut colors = vec![bg];
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            shapes.push(Shape::random(&mut rng, s));
            let c = random_color(&mut rng, &colors);
            colors.push(c);
        }
        let target = rng.gen_range(0..count);

        let mut data = vec![0.0; size * size * 3];
        let mut owner = vec![usize::MAX; size * size];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = bg;
                let mut shade: f64 = waves.iter().map(|&(kx, ky, ph, amp)| amp * libm::sin(kx * fx + ky * fy + ph)).sum();
                for (i, sh) in shapes.iter().enumerate() {
                    if sh.contains(fx, fy) {
                        owner[y * size + x] = i;
                        color = colors[i + 1];
                        shade *= 0.3;
                    }
                }
                for k in 0..3 {
                    let noise = rng.gen_range(-0.02..0.02);
                    // 8-bit levels, so PNG storage is lossless
                    let v = (color[k] + shade + noise).clamp(0.0, 1.0);
                    data[(y * size + x) * 3 + k] = libm::round(v * 255.0) / 255.0;
                }
            }
        }
        let gt = BinaryMask::new(size, size, owner.iter().map(|&o| o == target).collect())?;
        let area = gt.count();
        if area < MIN_AREA || area as f64 > 0.8 * s * s {
            continue;
        }
        let image = ImagePlane::new(size, size, 3, data)?;
        let meta = InstanceMeta { kind: shapes[target].kind(), seed, distractors: count - 1 };
        return Ok(InstanceSample { image, gt, meta });
    }
}

/// A 64 × 64 instance.
pub fn generate_instance(seed: u64) -> Result<InstanceSample> {
    generate_instance_sized(seed, 64)
}
