//! S-UNIWARD style additive embedding costs for spatial-domain images.
//!
//! The image is filtered with three directional db8 wavelet kernels
//! (`K_LH = h gᵀ`, `K_HL = g hᵀ`, `K_HH = g gᵀ`). For each residual `R_k` the
//! cost of changing pixel `q` is the relative distortion the change causes in
//! that residual:
//!
//! ```text
//! rho(q) = Σ_k Σ_u |K_k(u)| / (|R_k(q - u + a)| + sigma)
//! ```
//!
//! which is the correlation of `1 / (|R_k| + sigma)` with the 180° rotation
//! of `|K_k|`. Both correlations use mirror padding so the output keeps the
//! input dimensions. Costs above [`WET_COST`] are clamped to it.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::par;
use crate::rawmap::RawMap;

/// Sentinel cost for pixels that must never change.
pub const WET_COST: f64 = 1e10;

pub const DEFAULT_SIGMA: f64 = 1.0;

pub const FILTER_LEN: usize = 16;

/// Anchor of the 16-tap "same" correlation: taps cover offsets `-8..=7`.
const ANCHOR: usize = FILTER_LEN / 2;

/// Smallest side for which the mirror padding stays inside the image.
pub const MIN_SIDE: usize = 16;

/// Daubechies-8 decomposition lowpass filter.
const DB8_LOWPASS: [f64; FILTER_LEN] = [
    -0.000_117_476_784_124_769_53,
    0.000_675_449_406_450_569_3,
    -0.000_391_740_373_376_947_05,
    -0.004_870_352_993_451_574,
    0.008_746_094_047_405_777,
    0.013_981_027_917_398_282,
    -0.044_088_253_930_794_755,
    -0.017_369_301_001_807_547,
    0.128_747_426_620_478_47,
    0.000_472_484_573_913_282_8,
    -0.284_015_542_961_546_9,
    -0.015_829_105_256_349_306,
    0.585_354_683_654_206_7,
    0.675_630_736_297_289_8,
    0.312_871_590_914_299_95,
    0.054_415_842_243_104_01,
];

/// 1D db8 analysis pair. `highpass[n] = (-1)^(n+1) lowpass[15 - n]`.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub lowpass: [f64; FILTER_LEN],
    pub highpass: [f64; FILTER_LEN],
}

impl FilterBank {
    fn build() -> Self {
        let lowpass = DB8_LOWPASS;
        let mut highpass = [0.0; FILTER_LEN];
        for (n, tap) in highpass.iter_mut().enumerate() {
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            *tap = sign * lowpass[FILTER_LEN - 1 - n];
        }
        let bank = Self { lowpass, highpass };
        bank.check().expect("db8 filter constants are corrupt");
        bank
    }

    /// Validates `Σ h = √2` and orthonormality of the pair (1e-9).
    pub fn check(&self) -> std::result::Result<(), String> {
        let sum: f64 = self.lowpass.iter().sum();
        if (sum - std::f64::consts::SQRT_2).abs() > 1e-9 {
            return Err(format!("lowpass sums to {sum}"));
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let hh = dot(&self.lowpass, &self.lowpass);
        let gg = dot(&self.highpass, &self.highpass);
        let hg = dot(&self.lowpass, &self.highpass);
        if (hh - 1.0).abs() > 1e-9 || (gg - 1.0).abs() > 1e-9 || hg.abs() > 1e-9 {
            return Err(format!("not orthonormal: <h,h>={hh} <g,g>={gg} <h,g>={hg}"));
        }
        Ok(())
    }

    /// The three directional kernels as `(vertical, horizontal)` factor pairs,
    /// in LH, HL, HH order. `K[u][v] = vertical[u] * horizontal[v]`.
    pub fn directional(&self) -> [(&[f64; FILTER_LEN], &[f64; FILTER_LEN]); 3] {
        [
            (&self.lowpass, &self.highpass),
            (&self.highpass, &self.lowpass),
            (&self.highpass, &self.highpass),
        ]
    }
}

pub fn filter_bank() -> &'static FilterBank {
    static BANK: OnceLock<FilterBank> = OnceLock::new();
    BANK.get_or_init(FilterBank::build)
}

/// Per-pixel embedding costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMap {
    width: usize,
    height: usize,
    costs: Vec<f64>,
    wet_threshold: f64,
}

impl CostMap {
    /// Wraps precomputed costs. Values must be nonnegative and finite; values
    /// at or above `WET_COST` are stored as the sentinel.
    pub fn new(width: usize, height: usize, mut costs: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || costs.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} costs for a {width}x{height} map",
                costs.len()
            )));
        }
        for (i, c) in costs.iter_mut().enumerate() {
            if c.is_nan() || *c < 0.0 {
                return Err(Error::Numerical {
                    stage: "cost map",
                    row: i / width,
                    col: i % width,
                });
            }
            if *c >= WET_COST {
                *c = WET_COST;
            }
        }
        Ok(Self {
            width,
            height,
            costs,
            wet_threshold: WET_COST,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.width + col]
    }

    #[inline]
    pub fn wet_threshold(&self) -> f64 {
        self.wet_threshold
    }

    #[inline]
    pub fn is_wet(&self, index: usize) -> bool {
        self.costs[index] >= self.wet_threshold
    }

    pub fn dry_count(&self) -> usize {
        self.costs.iter().filter(|&&c| c < self.wet_threshold).count()
    }

    /// Values of the rectangle, row by row.
    pub fn rect_values(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<f64>> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Bounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut out = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            out.extend_from_slice(&self.costs[start..start + w]);
        }
        Ok(out)
    }

    pub fn to_raw(&self) -> RawMap {
        RawMap {
            width: self.width,
            height: self.height,
            values: self.costs.iter().map(|&c| c as f32).collect(),
        }
    }

    /// Inverse of [`CostMap::to_raw`]. The wet sentinel does not survive the
    /// `f32` round trip exactly, so anything at its `f32` image is mapped back.
    pub fn from_raw(raw: &RawMap) -> Result<Self> {
        let wet32 = WET_COST as f32;
        let costs = raw
            .values
            .iter()
            .map(|&v| if v >= wet32 { WET_COST } else { v as f64 })
            .collect();
        Self::new(raw.width, raw.height, costs)
    }
}

/// Directional residuals in LH, HL, HH order.
#[derive(Clone, Debug)]
pub struct Residuals {
    pub width: usize,
    pub height: usize,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

impl Residuals {
    pub fn bands(&self) -> [&[f64]; 3] {
        [&self.lh, &self.hl, &self.hh]
    }
}

/// Mirror index without edge duplication: `-1 -> 1`, `n -> n - 2`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "image {width}x{height} is smaller than the {MIN_SIDE}x{MIN_SIDE} filter support"
        )));
    }
    Ok(())
}

/// Separable "same" correlation with mirror padding:
/// `out(r, c) = Σ_u Σ_v src(r + u - before, c + v - before) vert[u] horiz[v]`.
fn correlate_separable(
    src: &[f64],
    width: usize,
    height: usize,
    vert: &[f64; FILTER_LEN],
    horiz: &[f64; FILTER_LEN],
    before: usize,
) -> Vec<f64> {
    let before = before as isize;
    // Horizontal pass over every source row.
    let col_index: Vec<[usize; FILTER_LEN]> = (0..width)
        .map(|c| {
            let mut idx = [0usize; FILTER_LEN];
            for (v, slot) in idx.iter_mut().enumerate() {
                *slot = reflect(c as isize + v as isize - before, width);
            }
            idx
        })
        .collect();
    let mut tmp = vec![0.0; width * height];
    par::for_each_chunk_mut(&mut tmp, width, |r, out| {
        let row = &src[r * width..(r + 1) * width];
        for (c, o) in out.iter_mut().enumerate() {
            let idx = &col_index[c];
            let mut acc = 0.0;
            for v in 0..FILTER_LEN {
                acc += row[idx[v]] * horiz[v];
            }
            *o = acc;
        }
    });
    // Vertical pass.
    let mut out = vec![0.0; width * height];
    par::for_each_chunk_mut(&mut out, width, |r, out_row| {
        let mut rows = [0usize; FILTER_LEN];
        for (u, slot) in rows.iter_mut().enumerate() {
            *slot = reflect(r as isize + u as isize - before, height);
        }
        for u in 0..FILTER_LEN {
            let weight = vert[u];
            let src_row = &tmp[rows[u] * width..(rows[u] + 1) * width];
            for (o, s) in out_row.iter_mut().zip(src_row) {
                *o += weight * s;
            }
        }
    });
    out
}

fn residual_band(img: &[f64], width: usize, height: usize, band: usize) -> Vec<f64> {
    let (vert, horiz) = filter_bank().directional()[band];
    correlate_separable(img, width, height, vert, horiz, ANCHOR)
}

fn image_as_f64(image: &GrayImage) -> Vec<f64> {
    image.pixels().iter().map(|&p| p as f64).collect()
}

/// The three directional wavelet residuals of `image`, same size as the input.
pub fn wavelet_residuals(image: &GrayImage) -> Result<Residuals> {
    check_dims(image.width(), image.height())?;
    let (w, h) = (image.width(), image.height());
    let img = image_as_f64(image);
    Ok(Residuals {
        width: w,
        height: h,
        lh: residual_band(&img, w, h, 0),
        hl: residual_band(&img, w, h, 1),
        hh: residual_band(&img, w, h, 2),
    })
}

/// S-UNIWARD costs of `image` with stabilizing constant `sigma`.
pub fn compute_cost_map(image: &GrayImage, sigma: f64) -> Result<CostMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    check_dims(image.width(), image.height())?;
    let (w, h) = (image.width(), image.height());
    let img = image_as_f64(image);
    let bank = filter_bank();
    let mut total = vec![0.0; w * h];
    // One band at a time keeps the peak at a handful of image-sized buffers.
    for (band, (vert, horiz)) in bank.directional().into_iter().enumerate() {
        let residual = residual_band(&img, w, h, band);
        let inverse: Vec<f64> = residual.iter().map(|r| 1.0 / (r.abs() + sigma)).collect();
        drop(residual);
        let rot_vert = rotated_abs(vert);
        let rot_horiz = rotated_abs(horiz);
        let xi = correlate_separable(&inverse, w, h, &rot_vert, &rot_horiz, FILTER_LEN - 1 - ANCHOR);
        for (t, x) in total.iter_mut().zip(&xi) {
            *t += x;
        }
    }
    for (i, c) in total.iter_mut().enumerate() {
        if !c.is_finite() {
            return Err(Error::Numerical {
                stage: "cost map",
                row: i / w,
                col: i % w,
            });
        }
        if *c > WET_COST {
            *c = WET_COST;
        }
    }
    Ok(CostMap {
        width: w,
        height: h,
        costs: total,
        wet_threshold: WET_COST,
    })
}

fn rotated_abs(taps: &[f64; FILTER_LEN]) -> [f64; FILTER_LEN] {
    let mut out = [0.0; FILTER_LEN];
    for (i, o) in out.iter_mut().enumerate() {
        *o = taps[FILTER_LEN - 1 - i].abs();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.gen()).unwrap()
    }

    fn kernel(band: usize) -> [[f64; FILTER_LEN]; FILTER_LEN] {
        let (vert, horiz) = filter_bank().directional()[band];
        let mut k = [[0.0; FILTER_LEN]; FILTER_LEN];
        for u in 0..FILTER_LEN {
            for v in 0..FILTER_LEN {
                k[u][v] = vert[u] * horiz[v];
            }
        }
        k
    }

    /// Nested-loop padded correlation, written against the 2D kernel directly.
    fn naive_residual(img: &GrayImage, band: usize) -> Vec<f64> {
        let k = kernel(band);
        let (w, h) = (img.width(), img.height());
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for u in 0..FILTER_LEN {
                    for v in 0..FILTER_LEN {
                        let rr = reflect(r as isize + u as isize - 8, h);
                        let cc = reflect(c as isize + v as isize - 8, w);
                        acc += img.get(rr, cc) as f64 * k[u][v];
                    }
                }
                out[r * w + c] = acc;
            }
        }
        out
    }

    /// rho(q) = Σ_k Σ_u |K_k(u)| / (|R_k(reflect(q - u + 8))| + sigma).
    fn naive_costs(img: &GrayImage, sigma: f64) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let mut out = vec![0.0; w * h];
        for band in 0..3 {
            let k = kernel(band);
            let res = naive_residual(img, band);
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for u in 0..FILTER_LEN {
                        for v in 0..FILTER_LEN {
                            let rr = reflect(r as isize - u as isize + 8, h);
                            let cc = reflect(c as isize - v as isize + 8, w);
                            acc += k[u][v].abs() / (res[rr * w + cc].abs() + sigma);
                        }
                    }
                    out[r * w + c] += acc;
                }
            }
        }
        out
    }

    #[test]
    fn filter_bank_is_orthonormal() {
        let bank = filter_bank();
        bank.check().unwrap();
        // Highpass has no DC response.
        assert!(bank.highpass.iter().sum::<f64>().abs() < 1e-12);
        assert!((bank.highpass[0] + 0.054_415_842_243_104_01).abs() < 1e-15);
    }

    #[test]
    fn reflect_does_not_duplicate_edges() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-3, 5), 3);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn constant_image_has_zero_residuals() {
        let img = GrayImage::filled(24, 20, 128).unwrap();
        let res = wavelet_residuals(&img).unwrap();
        for band in res.bands() {
            assert!(band.iter().all(|r| r.abs() < 1e-9));
        }
    }

    #[test]
    fn residuals_ignore_brightness_offset() {
        let img = GrayImage::from_fn(32, 32, |r, c| ((r * 7 + c * 13) % 200) as u8).unwrap();
        let brighter = GrayImage::from_fn(32, 32, |r, c| img.get(r, c) + 10).unwrap();
        let a = wavelet_residuals(&img).unwrap();
        let b = wavelet_residuals(&brighter).unwrap();
        for (x, y) in a.bands().iter().zip(b.bands()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residuals_match_naive_correlation() {
        let img = random_image(32, 32, 11);
        let res = wavelet_residuals(&img).unwrap();
        for band in 0..3 {
            let naive = naive_residual(&img, band);
            for (f, n) in res.bands()[band].iter().zip(&naive) {
                assert!((f - n).abs() < 1e-9, "band {band}: {f} vs {n}");
            }
        }
    }

    #[test]
    fn costs_match_naive_double_correlation() {
        for (w, h, seed) in [(32, 32, 3), (17, 40, 4), (16, 16, 5)] {
            let img = random_image(w, h, seed);
            let fast = compute_cost_map(&img, 1.0).unwrap();
            let naive = naive_costs(&img, 1.0);
            for (f, n) in fast.costs().iter().zip(&naive) {
                assert!(((f - n) / n).abs() < 1e-6, "{f} vs {n}");
            }
        }
    }

    /// Away from the borders the cost equals the relative residual distortion
    /// actually caused by a +1 change.
    #[test]
    fn interior_cost_is_the_distortion_of_a_unit_change() {
        let img = random_image(48, 48, 21);
        let sigma = 1.0;
        let costs = compute_cost_map(&img, sigma).unwrap();
        let base = wavelet_residuals(&img).unwrap();
        for &(r, c) in &[(20usize, 20usize), (24, 31), (30, 17)] {
            let mut changed = img.clone();
            let idx = r * img.width() + c;
            let p = changed.pixels()[idx];
            changed.pixels_mut()[idx] = if p < 255 { p + 1 } else { p - 1 };
            let moved = wavelet_residuals(&changed).unwrap();
            let mut distortion = 0.0;
            for band in 0..3 {
                for (a, b) in base.bands()[band].iter().zip(moved.bands()[band]) {
                    distortion += (a - b).abs() / (a.abs() + sigma);
                }
            }
            let rho = costs.get(r, c);
            assert!(((rho - distortion) / rho).abs() < 1e-9, "{rho} vs {distortion}");
        }
    }

    #[test]
    fn constant_image_gives_constant_costs() {
        let img = GrayImage::filled(40, 33, 77).unwrap();
        let costs = compute_cost_map(&img, 1.0).unwrap();
        let first = costs.costs()[0];
        assert!(costs.costs().iter().all(|&c| c == first));
        // With zero residuals the cost is Σ_k Σ|K_k| / sigma.
        let bank = filter_bank();
        let l1 = |t: &[f64]| t.iter().map(|x| x.abs()).sum::<f64>();
        let (lo, hi) = (l1(&bank.lowpass), l1(&bank.highpass));
        let expected = 2.0 * lo * hi + hi * hi;
        assert!((first - expected).abs() < 1e-9);
    }

    #[test]
    fn costs_are_dc_invariant_and_nonnegative() {
        let img = GrayImage::from_fn(32, 24, |r, c| (40 + (r * c) % 150) as u8).unwrap();
        let shifted = GrayImage::from_fn(32, 24, |r, c| img.get(r, c) + 60).unwrap();
        let a = compute_cost_map(&img, 1.0).unwrap();
        let b = compute_cost_map(&shifted, 1.0).unwrap();
        for (x, y) in a.costs().iter().zip(b.costs()) {
            assert!((x - y).abs() <= 1e-12 * x.abs(), "{x} vs {y}");
        }
        assert!(a.costs().iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn transposed_image_gives_transposed_costs() {
        let img = random_image(24, 36, 9);
        let a = compute_cost_map(&img, 1.0).unwrap();
        let b = compute_cost_map(&img.transpose(), 1.0).unwrap();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let (x, y) = (a.get(r, c), b.get(c, r));
                assert!(((x - y) / x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_images_and_bad_sigma_are_rejected() {
        let small = GrayImage::filled(15, 40, 0).unwrap();
        assert!(matches!(wavelet_residuals(&small), Err(Error::Dimension(_))));
        assert!(matches!(compute_cost_map(&small, 1.0), Err(Error::Dimension(_))));
        let ok = GrayImage::filled(16, 16, 0).unwrap();
        assert!(matches!(compute_cost_map(&ok, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn raw_round_trip_keeps_wet_pixels_wet() {
        let mut costs = vec![0.5; 16 * 16];
        costs[3] = WET_COST;
        let map = CostMap::new(16, 16, costs).unwrap();
        let back = CostMap::from_raw(&map.to_raw()).unwrap();
        assert!(back.is_wet(3));
        assert_eq!(back.dry_count(), 255);
    }
}
