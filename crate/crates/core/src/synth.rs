//! Procedural grayscale scenes: smooth shading, hard-edged shapes, stripes
//! and fine texture, all driven by one seed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imgio::{Image, Plane};

enum Shape {
    Disk { cy: f64, cx: f64, r: f64, v: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64, v: f64 },
    Stripes { angle: f64, period: f64, y0: f64, x0: f64, radius: f64, amp: f64 },
}

impl Shape {
    fn apply(&self, y: f64, x: f64, base: f64) -> f64 {
        match *self {
            Shape::Disk { cy, cx, r, v } => {
                if (y - cy).hypot(x - cx) <= r {
                    v
                } else {
                    base
                }
            }
            Shape::Rect { y0, x0, y1, x1, v } => {
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    v
                } else {
                    base
                }
            }
            Shape::Stripes { angle, period, y0, x0, radius, amp } => {
                if (y - y0).hypot(x - x0) > radius {
                    return base;
                }
                let t = (x * angle.cos() + y * angle.sin()) / period;
                base + amp * (2.0 * PI * t).sin()
            }
        }
    }
}

/// A `height x width` scene with values in `[0, 1]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let (gy, gx, g0) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(0.3..0.7));
    let scale = h.max(w);
    let n_shapes = rng.random_range(4..10);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| match rng.random_range(0..3) {
            0 => Shape::Disk {
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                r: rng.random_range(0.05..0.3) * scale,
                v: rng.random_range(0.05..0.95),
            },
            1 => {
                let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.1..0.5) * h,
                    x1: x0 + rng.random_range(0.1..0.5) * w,
                    v: rng.random_range(0.05..0.95),
                }
            }
            _ => Shape::Stripes {
                angle: rng.random_range(0.0..PI),
                period: rng.random_range(3.0..14.0),
                y0: rng.random_range(0.0..h),
                x0: rng.random_range(0.0..w),
                radius: rng.random_range(0.15..0.4) * scale,
                amp: rng.random_range(0.05..0.25),
            },
        })
        .collect();
    let noise_amp = rng.random_range(0.0..0.03);
    let noise: Vec<f64> = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();

    let plane = Plane::from_fn(height, width, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = g0 + gy * (fy / h - 0.5) + gx * (fx / w - 0.5);
        for s in &shapes {
            v = s.apply(fy, fx, v);
        }
        v + noise_amp * noise[y * width + x]
    });
    // snap to 8-bit codes like a decoded file
    Image::from_codes(height, width, &plane.to_codes()).expect("codes are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = scene(32, 40, 1);
        assert_eq!(a.dims(), (32, 40));
        assert_eq!(a, scene(32, 40, 1));
        assert_ne!(a, scene(32, 40, 2));
        let (lo, hi) = a.min_max();
        assert!(hi - lo > 0.1);
    }
}
