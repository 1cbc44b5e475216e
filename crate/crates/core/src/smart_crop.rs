//! Smart crop 2: the square crop whose cost histogram is closest, in
//! symmetrized KL distance, to the histogram of the whole mother image.
//!
//! Candidate positions are every `(x, y)` on the stride grid. Costs of a crop
//! are the mother's costs restricted to the rectangle. Ties resolve to the
//! row-major first position (smallest `y`, then smallest `x`), including when
//! the search is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_model::{compute_cost_map, CostMap};
use crate::error::{Error, Result};
use crate::histogram::{build_histogram, kl_sym, smoothed, smoothing_epsilon, sym_term, BinningSpec, Histogram};
use crate::image::GrayImage;
use crate::integral_histogram::{BinMap, IntegralHistogram, PrefixCursor};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropResult {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub distance: f64,
    /// Number of candidate positions scored.
    pub evaluated: u64,
}

/// Symmetrized KL against a fixed mother histogram for crops of a fixed
/// pixel count, with every possible smoothed crop probability tabulated.
///
/// Values are computed with the same helpers and the same summation order as
/// [`kl_sym`], so scores agree with it bit for bit.
struct KlScorer {
    p: Vec<f64>,
    ln_p: Vec<f64>,
    q: Vec<f64>,
    ln_q: Vec<f64>,
}

impl KlScorer {
    fn new(mother: &Histogram, crop_total: u64) -> Self {
        let eps = smoothing_epsilon(mother.total(), crop_total);
        let norm = 1.0 + mother.counts().len() as f64 * eps;
        let p: Vec<f64> = mother
            .counts()
            .iter()
            .map(|&c| smoothed(c, mother.total(), eps, norm))
            .collect();
        let ln_p = p.iter().map(|v| v.ln()).collect();
        let q: Vec<f64> = (0..=crop_total).map(|c| smoothed(c, crop_total, eps, norm)).collect();
        let ln_q = q.iter().map(|v| v.ln()).collect();
        Self { p, ln_p, q, ln_q }
    }

    #[inline]
    fn score_rect(&self, top: &[u32], bottom: &[u32], x0: usize, w: usize) -> f64 {
        let bins = self.p.len();
        let l = x0 * bins;
        let r = (x0 + w) * bins;
        let (tl, tr) = (&top[l..l + bins], &top[r..r + bins]);
        let (bl, br) = (&bottom[l..l + bins], &bottom[r..r + bins]);
        let mut acc = 0.0;
        for k in 0..bins {
            let c = br[k].wrapping_sub(tr[k]).wrapping_sub(bl[k]).wrapping_add(tl[k]) as usize;
            acc += sym_term(self.p[k], self.ln_p[k], self.q[c], self.ln_q[c]);
        }
        acc.max(0.0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Best {
    distance: f64,
    y: usize,
    x: usize,
}

impl Best {
    fn better_than(&self, other: &Best) -> bool {
        (self.distance, self.y, self.x) < (other.distance, other.y, other.x)
    }
}

fn reduce(results: impl IntoIterator<Item = (Option<Best>, u64)>) -> (Option<Best>, u64) {
    let mut best: Option<Best> = None;
    let mut evaluated = 0;
    for (b, n) in results {
        evaluated += n;
        if let Some(b) = b {
            if best.map_or(true, |cur| b.better_than(&cur)) {
                best = Some(b);
            }
        }
    }
    (best, evaluated)
}

fn check_request(width: usize, height: usize, size: usize, stride: usize) -> Result<()> {
    if size == 0 || size > width || size > height {
        return Err(Error::Dimension(format!(
            "crop {size}x{size} does not fit in {width}x{height}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok(())
}

fn grid(len: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=len - size).step_by(stride).collect()
}

/// Prefix rows at the top and bottom edges of a band of crops.
trait EdgeRows {
    fn edges(&mut self, y: usize, size: usize) -> (&[u32], &[u32]);
}

struct Streaming<'a> {
    top: PrefixCursor<'a>,
    bottom: PrefixCursor<'a>,
}

impl EdgeRows for Streaming<'_> {
    fn edges(&mut self, y: usize, size: usize) -> (&[u32], &[u32]) {
        self.top.seek(y);
        self.bottom.seek(y + size);
        (self.top.row(), self.bottom.row())
    }
}

struct Full<'a>(&'a IntegralHistogram);

impl EdgeRows for Full<'_> {
    fn edges(&mut self, y: usize, size: usize) -> (&[u32], &[u32]) {
        (self.0.prefix_row(y), self.0.prefix_row(y + size))
    }
}

fn scan_band(
    rows: &mut impl EdgeRows,
    scorer: &KlScorer,
    ys: &[usize],
    xs: &[usize],
    size: usize,
) -> (Option<Best>, u64) {
    let mut best: Option<Best> = None;
    for &y in ys {
        let (top, bottom) = rows.edges(y, size);
        for &x in xs {
            let d = scorer.score_rect(top, bottom, x, size);
            if best.map_or(true, |b| d < b.distance) {
                best = Some(Best { distance: d, y, x });
            }
        }
    }
    (best, (ys.len() * xs.len()) as u64)
}

fn band_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let workers = par::workers();
    let bands = if workers <= 1 { 1 } else { (workers * 4).min(n) };
    let per = n.div_ceil(bands.max(1));
    (0..n).step_by(per.max(1)).map(|s| s..(s + per).min(n)).collect()
}

fn finish(best: Option<Best>, evaluated: u64, size: usize) -> CropResult {
    let best = best.expect("at least one candidate position");
    CropResult {
        x: best.x,
        y: best.y,
        size,
        distance: best.distance,
        evaluated,
    }
}

/// Integral-histogram crop search, streaming prefix rows so memory stays at
/// two table rows per worker plus the bin map.
pub fn smart_crop_2(costs: &CostMap, size: usize, stride: usize, spec: &BinningSpec) -> Result<CropResult> {
    check_request(costs.width(), costs.height(), size, stride)?;
    let map = BinMap::new(costs, spec);
    search_bin_map(&map, size, stride)
}

/// [`smart_crop_2`] over an already classified map.
pub fn search_bin_map(map: &BinMap, size: usize, stride: usize) -> Result<CropResult> {
    check_request(map.width(), map.height(), size, stride)?;
    let mother = map.histogram();
    let scorer = KlScorer::new(&mother, (size * size) as u64);
    let ys = grid(map.height(), size, stride);
    let xs = grid(map.width(), size, stride);
    let bands = band_ranges(ys.len());
    let results = par::map_range(bands.len(), |i| {
        let mut rows = Streaming {
            top: PrefixCursor::new(map),
            bottom: PrefixCursor::new(map),
        };
        scan_band(&mut rows, &scorer, &ys[bands[i].clone()], &xs, size)
    });
    let (best, evaluated) = reduce(results);
    Ok(finish(best, evaluated, size))
}

/// Same search over a fully materialized integral histogram.
pub fn smart_crop_2_full(ih: &IntegralHistogram, size: usize, stride: usize) -> Result<CropResult> {
    check_request(ih.width(), ih.height(), size, stride)?;
    let mother = ih.query_rect(0, 0, ih.width(), ih.height())?;
    let scorer = KlScorer::new(&mother, (size * size) as u64);
    let ys = grid(ih.height(), size, stride);
    let xs = grid(ih.width(), size, stride);
    let bands = band_ranges(ys.len());
    let results = par::map_range(bands.len(), |i| {
        scan_band(&mut Full(ih), &scorer, &ys[bands[i].clone()], &xs, size)
    });
    let (best, evaluated) = reduce(results);
    Ok(finish(best, evaluated, size))
}

/// Reference search: bins every candidate rectangle from scratch.
/// `O(n * m * size^2)`; meant for tests and benchmarks.
pub fn crop_search_direct(costs: &CostMap, size: usize, stride: usize, spec: &BinningSpec) -> Result<CropResult> {
    check_request(costs.width(), costs.height(), size, stride)?;
    let mother = build_histogram(costs.costs(), spec)?;
    let mut best: Option<Best> = None;
    let mut evaluated = 0u64;
    for y in grid(costs.height(), size, stride) {
        for x in grid(costs.width(), size, stride) {
            let crop = build_histogram(&costs.rect_values(x, y, size, size)?, spec)?;
            let d = kl_sym(&mother, &crop)?;
            evaluated += 1;
            if best.map_or(true, |b| d < b.distance) {
                best = Some(Best { distance: d, y, x });
            }
        }
    }
    Ok(finish(best, evaluated, size))
}

/// Distance between the mother histogram and one crop, binned directly.
pub fn crop_distance(costs: &CostMap, x: usize, y: usize, size: usize, spec: &BinningSpec) -> Result<f64> {
    let mother = build_histogram(costs.costs(), spec)?;
    let crop = build_histogram(&costs.rect_values(x, y, size, size)?, spec)?;
    kl_sym(&mother, &crop)
}

/// Top-left corner of the centered crop.
pub fn center_position(width: usize, height: usize, size: usize) -> (usize, usize) {
    ((width - size) / 2, (height - size) / 2)
}

/// `count` uniformly drawn crop positions.
pub fn random_positions(width: usize, height: usize, size: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (rng.gen_range(0..=width - size), rng.gen_range(0..=height - size)))
        .collect()
}

/// Distance between the mother histogram and the histogram of costs
/// recomputed on the cropped pixels themselves, rather than restricted from
/// the mother's cost map.
pub fn recomputed_distance(
    mother: &GrayImage,
    mother_costs: &CostMap,
    crop: &CropResult,
    spec: &BinningSpec,
    sigma: f64,
) -> Result<f64> {
    let pixels = mother.crop(crop.x, crop.y, crop.size, crop.size)?;
    let own = compute_cost_map(&pixels, sigma)?;
    let mother_hist = build_histogram(mother_costs.costs(), spec)?;
    kl_sym(&mother_hist, &build_histogram(own.costs(), spec)?)
}
