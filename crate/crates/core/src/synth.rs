//! Procedural image set: colour gradients, flat shapes and a smooth texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::Image;

/// One image from `rng`.
pub fn gen_image(rng: &mut ChaCha8Rng, res: usize) -> Image {
    let r = res;
    let denom = (r.max(2) - 1) as f64;
    let c0: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let c1: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let ang = rng.random::<f64>() * std::f64::consts::TAU;
    let (ca, sa) = (ang.cos(), ang.sin());
    let mut img = Image::zeros(r, r);
    for y in 0..r {
        for x in 0..r {
            let (xx, yy) = (x as f64 / denom, y as f64 / denom);
            let t = (ca * (xx - 0.5) + sa * (yy - 0.5) + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img.set(c, y, x, c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cx: f64 = rng.random();
        let cy: f64 = rng.random();
        let rad = 0.08 + rng.random::<f64>() * 0.2;
        let circle = rng.random::<f64>() < 0.5;
        let hh = if circle { 0.0 } else { 0.08 + rng.random::<f64>() * 0.2 };
        for y in 0..r {
            for x in 0..r {
                let (xx, yy) = (x as f64 / denom, y as f64 / denom);
                let inside = if circle {
                    (xx - cx).powi(2) + (yy - cy).powi(2) < rad * rad
                } else {
                    (xx - cx).abs() < rad && (yy - cy).abs() < hh
                };
                if inside {
                    for c in 0..3 {
                        img.set(c, y, x, col[c]);
                    }
                }
            }
        }
    }
    // 9x9 control grid of gaussian offsets, bilinearly upsampled
    const G: usize = 9;
    let grid: Vec<f64> = (0..G * G * 3).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.04).collect();
    for y in 0..r {
        let gy = y as f64 * (G - 1) as f64 / denom;
        let y0 = (gy.floor() as usize).min(G - 2);
        let ty = gy - y0 as f64;
        for x in 0..r {
            let gx = x as f64 * (G - 1) as f64 / denom;
            let x0 = (gx.floor() as usize).min(G - 2);
            let tx = gx - x0 as f64;
            for c in 0..3 {
                let g = |yy: usize, xx: usize| grid[(yy * G + xx) * 3 + c];
                let v = (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x0 + 1))
                    + ty * ((1.0 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
                let i = c * r * r + y * r + x;
                img.data[i] = (img.data[i] + v).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `n` images from a dedicated stream.
pub fn dataset(n: usize, res: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_image(&mut rng, res)).collect()
}
