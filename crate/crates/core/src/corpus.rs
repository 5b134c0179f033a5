//! Procedural carrier images for tests, examples and desk-scale benchmarks.
//!
//! Each image is a smooth multi-frequency colour field with a handful of
//! blended ellipses and mild sensor-like Gaussian noise, which gives the
//! codecs natural-image statistics without shipping binary fixtures.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Raster, Result};

pub fn synthesize(width: usize, height: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; width * height * 3];

    for c in 0..3 {
        let base = rng.gen_range(60.0..190.0);
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.5..4.0),
                    rng.gen_range(0.5..4.0),
                    rng.gen_range(0.0..TAU),
                    rng.gen_range(5.0..30.0),
                )
            })
            .collect();
        for y in 0..height {
            let fy = y as f64 / height as f64;
            for x in 0..width {
                let fx = x as f64 / width as f64;
                let v = waves
                    .iter()
                    .map(|&(kx, ky, ph, amp)| amp * (TAU * (kx * fx + ky * fy) + ph).cos())
                    .sum::<f64>();
                field[(y * width + x) * 3 + c] = base + v;
            }
        }
    }

    let blobs = rng.gen_range(3..8);
    for _ in 0..blobs {
        let (cx, cy) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (rx, ry) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
        let colour = [
            rng.gen_range(20.0..235.0),
            rng.gen_range(20.0..235.0),
            rng.gen_range(20.0..235.0),
        ];
        for y in 0..height {
            let dy = (y as f64 / height as f64 - cy) / ry;
            for x in 0..width {
                let dx = (x as f64 / width as f64 - cx) / rx;
                if dx * dx + dy * dy < 1.0 {
                    let px = &mut field[(y * width + x) * 3..][..3];
                    for (v, col) in px.iter_mut().zip(colour) {
                        *v = *v * 0.4 + col * 0.6;
                    }
                }
            }
        }
    }

    let sigma = rng.gen_range(1.0..6.0);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let data = field
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Raster::new(width, height, data).expect("synthesized buffer has raster shape")
}

/// Writes `count` images named `img_000.png`, `img_001.bmp`, ... alternating
/// PNG and BMP, and returns their paths.
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let ext = if i % 2 == 0 { "png" } else { "bmp" };
            let path = dir.join(format!("img_{i:03}.{ext}"));
            synthesize(size, size, seed.wrapping_add(i as u64)).save(&path)?;
            Ok(path)
        })
        .collect()
}
