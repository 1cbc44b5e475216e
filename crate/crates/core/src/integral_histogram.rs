//! Per-bin summed-area tables.
//!
//! `sums[y][x][b]` counts the pixels of bin `b` inside `[0, y) x [0, x)`, so
//! the histogram of any axis-aligned rectangle is four corner lookups per
//! bin. The layout is pixel-major: the `bins` counters of one corner are
//! contiguous, and a query streams four such runs side by side.
//!
//! A full table over a multi-megapixel mother at 64 bins runs into
//! gigabytes, so the crop search instead streams prefix rows through
//! [`PrefixCursor`], which holds one row of the table at a time.

use crate::cost_model::CostMap;
use crate::error::{Error, Result};
use crate::histogram::{BinningSpec, Histogram};

/// Default ceiling for [`IntegralHistogram::build`].
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 30;

/// Bin index of every pixel, computed once.
#[derive(Clone, Debug)]
pub struct BinMap {
    spec: BinningSpec,
    width: usize,
    height: usize,
    bins: Vec<u16>,
    classifications: usize,
}

impl BinMap {
    pub fn new(costs: &CostMap, spec: &BinningSpec) -> Self {
        let mut classifications = 0usize;
        let bins = costs
            .costs()
            .iter()
            .map(|&c| {
                classifications += 1;
                spec.bin_of(c) as u16
            })
            .collect();
        Self {
            spec: *spec,
            width: costs.width(),
            height: costs.height(),
            bins,
            classifications,
        }
    }

    #[inline]
    pub fn spec(&self) -> &BinningSpec {
        &self.spec
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// How many times a pixel value was mapped to a bin.
    #[inline]
    pub fn classifications(&self) -> usize {
        self.classifications
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[u16] {
        &self.bins[y * self.width..(y + 1) * self.width]
    }

    /// Histogram of every pixel.
    pub fn histogram(&self) -> Histogram {
        let mut counts = vec![0u64; self.spec.total_bins()];
        for &b in &self.bins {
            counts[b as usize] += 1;
        }
        Histogram::from_counts(self.spec, counts).expect("count vector sized from spec")
    }
}

#[derive(Clone, Debug)]
pub struct IntegralHistogram {
    spec: BinningSpec,
    width: usize,
    height: usize,
    bins: usize,
    sums: Vec<u32>,
    classifications: usize,
}

/// Bytes needed by a full table.
pub fn required_bytes(width: usize, height: usize, spec: &BinningSpec) -> u64 {
    (width as u64 + 1) * (height as u64 + 1) * spec.total_bins() as u64 * 4
}

pub fn build_integral(costs: &CostMap, spec: &BinningSpec) -> Result<IntegralHistogram> {
    IntegralHistogram::build(costs, spec, DEFAULT_MEMORY_BUDGET)
}

impl IntegralHistogram {
    pub fn build(costs: &CostMap, spec: &BinningSpec, budget: u64) -> Result<Self> {
        let required = required_bytes(costs.width(), costs.height(), spec);
        if required > budget {
            return Err(Error::Resource { required, budget });
        }
        if (costs.width() as u64) * (costs.height() as u64) > u32::MAX as u64 {
            return Err(Error::Dimension("map too large for 32-bit counters".into()));
        }
        let map = BinMap::new(costs, spec);
        Ok(Self::from_bin_map(&map))
    }

    pub fn from_bin_map(map: &BinMap) -> Self {
        let (w, h, bins) = (map.width, map.height, map.spec.total_bins());
        let stride = (w + 1) * bins;
        let mut sums = vec![0u32; (h + 1) * stride];
        let mut running = vec![0u32; bins];
        for y in 0..h {
            running.fill(0);
            let (prev, next) = sums.split_at_mut((y + 1) * stride);
            let prev = &prev[y * stride..];
            let next = &mut next[..stride];
            // sums[y+1][x+1] = sums[y][x+1] + (row y prefix up to x)
            for (x, &b) in map.row(y).iter().enumerate() {
                running[b as usize] += 1;
                let off = (x + 1) * bins;
                for k in 0..bins {
                    next[off + k] = prev[off + k] + running[k];
                }
            }
        }
        Self {
            spec: map.spec,
            width: w,
            height: h,
            bins,
            sums,
            classifications: map.classifications,
        }
    }

    #[inline]
    pub fn spec(&self) -> &BinningSpec {
        &self.spec
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
    pub fn classifications(&self) -> usize {
        self.classifications
    }

    pub fn memory_bytes(&self) -> usize {
        self.sums.len() * std::mem::size_of::<u32>()
    }

    /// Prefix row `y` (length `(width + 1) * bins`).
    #[inline]
    pub fn prefix_row(&self, y: usize) -> &[u32] {
        let stride = (self.width + 1) * self.bins;
        &self.sums[y * stride..(y + 1) * stride]
    }

    #[inline]
    pub fn sum_at(&self, y: usize, x: usize, bin: usize) -> u32 {
        self.prefix_row(y)[x * self.bins + bin]
    }

    pub fn query_rect(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Histogram> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Bounds {
                x: x0,
                y: y0,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut counts = vec![0u32; self.bins];
        rect_counts(
            self.prefix_row(y0),
            self.prefix_row(y0 + h),
            x0,
            w,
            self.bins,
            &mut counts,
        );
        let counts = counts.into_iter().map(u64::from).collect();
        Histogram::from_counts(self.spec, counts)
    }
}

/// Rectangle counts from the prefix rows at its top and bottom edges.
#[inline]
pub(crate) fn rect_counts(top: &[u32], bottom: &[u32], x0: usize, w: usize, bins: usize, out: &mut [u32]) {
    let l = x0 * bins;
    let r = (x0 + w) * bins;
    let (tl, tr) = (&top[l..l + bins], &top[r..r + bins]);
    let (bl, br) = (&bottom[l..l + bins], &bottom[r..r + bins]);
    for k in 0..bins {
        out[k] = br[k].wrapping_sub(tr[k]).wrapping_sub(bl[k]).wrapping_add(tl[k]);
    }
}

/// One live prefix row of the integral histogram, advanced downward.
#[derive(Clone, Debug)]
pub struct PrefixCursor<'a> {
    map: &'a BinMap,
    y: usize,
    row: Vec<u32>,
    running: Vec<u32>,
}

impl<'a> PrefixCursor<'a> {
    pub fn new(map: &'a BinMap) -> Self {
        let bins = map.spec.total_bins();
        Self {
            map,
            y: 0,
            row: vec![0; (map.width + 1) * bins],
            running: vec![0; bins],
        }
    }

    #[inline]
    pub fn y(&self) -> usize {
        self.y
    }

    #[inline]
    pub fn row(&self) -> &[u32] {
        &self.row
    }

    /// Moves from prefix row `y` to `y + 1` by folding in pixel row `y`.
    pub fn advance(&mut self) {
        assert!(self.y < self.map.height, "cursor past the last prefix row");
        let bins = self.running.len();
        self.running.fill(0);
        for (x, &b) in self.map.row(self.y).iter().enumerate() {
            self.running[b as usize] += 1;
            let off = (x + 1) * bins;
            for (dst, &add) in self.row[off..off + bins].iter_mut().zip(&self.running) {
                *dst += add;
            }
        }
        self.y += 1;
    }

    /// Jumps forward to prefix row `target`.
    pub fn seek(&mut self, target: usize) {
        assert!(target >= self.y && target <= self.map.height);
        if target - self.y <= 1 {
            while self.y < target {
                self.advance();
            }
            return;
        }
        // Column counts of the skipped rows, then one horizontal prefix pass.
        let bins = self.running.len();
        let w = self.map.width;
        let mut columns = vec![0u32; w * bins];
        for y in self.y..target {
            for (x, &b) in self.map.row(y).iter().enumerate() {
                columns[x * bins + b as usize] += 1;
            }
        }
        self.running.fill(0);
        for x in 0..w {
            let off = (x + 1) * bins;
            for k in 0..bins {
                self.running[k] += columns[x * bins + k];
                self.row[off + k] += self.running[k];
            }
        }
        self.y = target;
    }
}
