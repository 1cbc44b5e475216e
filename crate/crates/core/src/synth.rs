//! Synthetic grayscale mother images.
//!
//! Each image mixes a smooth gradient, a few soft blobs and rectangular
//! patches of filtered noise at varying strength, so cost distributions vary
//! across the frame the way they do in photographs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{write_image, GrayImage};
use crate::par;
use crate::rng::{mix64, CounterRng};

pub const MOTHER_WIDTH: usize = 2048;
pub const MOTHER_HEIGHT: usize = 3072;
pub const MOTHER_COUNT: usize = 10;

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amp: f64,
}

struct Patch {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    sigma: f64,
    /// Half-width of the box filter applied to the patch noise.
    blur: usize,
}

/// Zero-mean noise roughly of unit variance, box-filtered with half-width `r`.
fn filtered_noise(rng: &CounterRng, row: usize, col: usize, r: usize) -> f64 {
    let r = r as isize;
    let mut sum = 0.0;
    for dr in -r..=r {
        for dc in -r..=r {
            let (y, x) = (row as isize + dr, col as isize + dc);
            let u = rng.bits(((y as u64 & 0xffff_ffff) << 32) | (x as u64 & 0xffff_ffff)) >> 11;
            sum += u as f64 / (1u64 << 53) as f64 - 0.5;
        }
    }
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    // Uniform(-0.5, 0.5) has variance 1/12.
    sum * (12.0 / n).sqrt()
}

/// A `width x height` synthetic mother image, fully determined by `seed`.
pub fn textured_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let base = rng.gen_range(60.0..190.0);
    let gx = rng.gen_range(-60.0..60.0) / wf;
    let gy = rng.gen_range(-60.0..60.0) / hf;
    let blobs: Vec<Blob> = (0..rng.gen_range(2..6))
        .map(|_| Blob {
            cx: rng.gen_range(0.0..wf),
            cy: rng.gen_range(0.0..hf),
            radius: rng.gen_range(0.05..0.3) * wf.min(hf),
            amp: rng.gen_range(-50.0..50.0),
        })
        .collect();
    let patches: Vec<Patch> = (0..rng.gen_range(4..10))
        .map(|_| {
            let pw = (rng.gen_range(0.1..0.5) * wf) as usize;
            let ph = (rng.gen_range(0.1..0.5) * hf) as usize;
            let x0 = rng.gen_range(0..width.saturating_sub(pw).max(1));
            let y0 = rng.gen_range(0..height.saturating_sub(ph).max(1));
            Patch {
                x0,
                y0,
                x1: (x0 + pw).min(width),
                y1: (y0 + ph).min(height),
                sigma: 10f64.powf(rng.gen_range(0.0..1.5)),
                blur: rng.gen_range(0..3),
            }
        })
        .collect();
    let floor_sigma = rng.gen_range(0.3..1.5);
    let noise = CounterRng::new(mix64(seed ^ 0x006e_6f69_7365));

    let mut pixels = vec![0u8; width * height];
    par::for_each_chunk_mut(&mut pixels, width.max(1), |row, out| {
        let y = row as f64;
        for (col, px) in out.iter_mut().enumerate() {
            let x = col as f64;
            let mut v = base + gx * x + gy * y;
            for b in &blobs {
                let d2 = ((x - b.cx).powi(2) + (y - b.cy).powi(2)) / (b.radius * b.radius);
                v += b.amp * (-0.5 * d2).exp();
            }
            v += floor_sigma * filtered_noise(&noise, row, col, 0);
            for (k, p) in patches.iter().enumerate() {
                if (p.x0..p.x1).contains(&col) && (p.y0..p.y1).contains(&row) {
                    let patch_rng = CounterRng::new(mix64(seed.wrapping_add(k as u64 + 1)));
                    v += p.sigma * filtered_noise(&patch_rng, row, col, p.blur);
                }
            }
            *px = v.round().clamp(0.0, 255.0) as u8;
        }
    });
    GrayImage::new(width, height, pixels).expect("buffer matches dimensions")
}

/// Writes `count` mothers named `mother_00.pgm`, `mother_01.pgm`, ... into `dir`.
pub fn write_corpus(dir: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = textured_image(width, height, mix64(seed.wrapping_add(i as u64)));
        let path = dir.join(format!("mother_{i:02}.pgm"));
        write_image(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = textured_image(64, 48, 3);
        assert_eq!(a, textured_image(64, 48, 3));
        assert_ne!(a, textured_image(64, 48, 4));
        assert_eq!((a.width(), a.height()), (64, 48));
    }

    #[test]
    fn not_flat() {
        let img = textured_image(128, 128, 9);
        let min = img.pixels().iter().min().unwrap();
        let max = img.pixels().iter().max().unwrap();
        assert!(max - min > 10);
    }

    #[test]
    fn corpus_files() {
        let tmp = tempfile::tempdir().unwrap();
        let paths = write_corpus(tmp.path(), 3, 32, 40, 1).unwrap();
        assert_eq!(paths.len(), 3);
        let img = crate::image::read_image(&paths[2]).unwrap();
        assert_eq!((img.width(), img.height()), (32, 40));
    }
}
