//! Dilated 2D convolution and the inception-of-dilations block.
//!
//! For an odd `k x k` kernel with taps indexed by centered offsets
//! `i, j in [-r, r]` (`r = (k - 1) / 2`) and dilation `d`:
//!
//! ```text
//! (z * k)(x, y) = Σ_i Σ_j z(x - d i, y - d j) k(i, j)
//! ```
//!
//! with zeros outside the input, so the output keeps the input size. This is
//! an ordinary convolution with the kernel spread out so that neighbouring
//! taps sit `d` pixels apart.

use crate::error::{Error, Result};
use crate::par;
use crate::rawmap::RawMap;

/// Channel-major stack of `height x width` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "feature map {channels}x{height}x{width} is empty"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature map values must be finite".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn single(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(1, height, width, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.height + row) * self.width + col]
    }

    pub fn from_raw(raw: &RawMap) -> Result<Self> {
        Self::single(raw.height, raw.width, raw.values.iter().map(|&v| v as f64).collect())
    }

    /// First channel as a raw map.
    pub fn to_raw(&self) -> RawMap {
        RawMap {
            width: self.width,
            height: self.height,
            values: self.plane(0).iter().map(|&v| v as f32).collect(),
        }
    }
}

/// A square odd-sized kernel with its dilation factor.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedKernel {
    size: usize,
    taps: Vec<f64>,
    dilation: usize,
}

impl DilatedKernel {
    /// `taps` is row-major; `taps[(i + r) * size + (j + r)]` holds `k(i, j)`.
    pub fn new(size: usize, taps: Vec<f64>, dilation: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {size}")));
        }
        if taps.len() != size * size {
            return Err(Error::Config(format!(
                "{} taps for a {size}x{size} kernel",
                taps.len()
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        Ok(Self {
            size,
            taps,
            dilation,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Side of the footprint covered by the spread taps: `(k - 1) d + 1`.
    pub fn receptive_field(&self) -> usize {
        (self.size - 1) * self.dilation + 1
    }

    pub fn with_dilation(&self, dilation: usize) -> Result<Self> {
        Self::new(self.size, self.taps.clone(), dilation)
    }
}

fn check_fits(height: usize, width: usize, kernel: &DilatedKernel) -> Result<()> {
    let rf = kernel.receptive_field();
    if rf > height || rf > width {
        return Err(Error::Dimension(format!(
            "receptive field {rf} exceeds input {height}x{width}"
        )));
    }
    Ok(())
}

/// Adds `plane * kernel` into `out` (both `height x width`).
fn accumulate_plane(plane: &[f64], height: usize, width: usize, kernel: &DilatedKernel, out: &mut [f64]) {
    let r = (kernel.size / 2) as isize;
    let d = kernel.dilation as isize;
    let (h, w) = (height as isize, width as isize);
    for ti in -r..=r {
        for tj in -r..=r {
            let tap = kernel.taps[((ti + r) * kernel.size as isize + tj + r) as usize];
            if tap == 0.0 {
                continue;
            }
            let (di, dj) = (d * ti, d * tj);
            // Output (x, y) reads input (x - di, y - dj).
            let rows = (di.max(0))..(h + di.min(0));
            let cols = (dj.max(0))..(w + dj.min(0));
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            for x in rows {
                let src = &plane[((x - di) * w) as usize..];
                let dst = &mut out[(x * w) as usize..((x + 1) * w) as usize];
                for y in cols.clone() {
                    dst[y as usize] += src[(y - dj) as usize] * tap;
                }
            }
        }
    }
}

/// Dilated convolution of a single-channel map, same-size output.
pub fn dilated_conv2d(z: &FeatureMap, kernel: &DilatedKernel) -> Result<FeatureMap> {
    if z.channels != 1 {
        return Err(Error::Dimension(format!(
            "expected a single-channel input, got {} channels",
            z.channels
        )));
    }
    check_fits(z.height, z.width, kernel)?;
    let mut out = vec![0.0; z.height * z.width];
    accumulate_plane(&z.values, z.height, z.width, kernel, &mut out);
    FeatureMap::single(z.height, z.width, out)
}

/// One output channel: a kernel per input channel, sharing a dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedFilter {
    kernels: Vec<DilatedKernel>,
}

impl DilatedFilter {
    /// `weights` holds `in_channels` row-major `size x size` kernels back to back.
    pub fn new(in_channels: usize, size: usize, weights: &[f64], dilation: usize) -> Result<Self> {
        if weights.len() != in_channels * size * size {
            return Err(Error::Config(format!(
                "{} weights for {in_channels} kernels of {size}x{size}",
                weights.len()
            )));
        }
        let kernels = weights
            .chunks(size * size)
            .map(|taps| DilatedKernel::new(size, taps.to_vec(), dilation))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernels })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn size(&self) -> usize {
        self.kernels[0].size
    }

    pub fn dilation(&self) -> usize {
        self.kernels[0].dilation
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.iter().map(|k| k.taps.len()).sum()
    }

    pub fn with_dilation(&self, dilation: usize) -> Result<Self> {
        Ok(Self {
            kernels: self
                .kernels
                .iter()
                .map(|k| k.with_dilation(dilation))
                .collect::<Result<_>>()?,
        })
    }
}

/// Multi-channel convolution: output channel `o` sums, over input channels,
/// the dilated convolution of that channel with filter `o`'s kernel.
pub fn conv_block(input: &FeatureMap, filters: &[DilatedFilter]) -> Result<FeatureMap> {
    for (o, f) in filters.iter().enumerate() {
        if f.in_channels() != input.channels {
            return Err(Error::Config(format!(
                "filter {o} expects {} input channels, input has {}",
                f.in_channels(),
                input.channels
            )));
        }
        check_fits(input.height, input.width, &f.kernels[0])?;
    }
    let (h, w) = (input.height, input.width);
    let planes = par::map_range(filters.len(), |o| {
        let mut out = vec![0.0; h * w];
        for (c, k) in filters[o].kernels.iter().enumerate() {
            accumulate_plane(input.plane(c), h, w, k, &mut out);
        }
        out
    });
    FeatureMap::new(filters.len(), h, w, planes.concat())
}

pub const INCEPTION_CHANNELS: usize = 30;
pub const INCEPTION_KERNEL: usize = 5;
/// Dilations of the three groups of ten filters.
pub const INCEPTION_DILATIONS: [usize; 3] = [1, 2, 4];

/// Drop-in replacement for a 30 -> 30 channel block of 5x5 convolutions:
/// ten filters at dilation 1, ten at 2 and ten at 4. The parameter count is
/// that of the plain block.
#[derive(Clone, Debug)]
pub struct InceptionBlock {
    filters: Vec<DilatedFilter>,
}

impl InceptionBlock {
    pub fn new(filters: Vec<DilatedFilter>) -> Result<Self> {
        if filters.len() != INCEPTION_CHANNELS {
            return Err(Error::Config(format!(
                "inception block needs {INCEPTION_CHANNELS} filters, got {}",
                filters.len()
            )));
        }
        for f in &filters {
            if f.size() != INCEPTION_KERNEL || f.in_channels() != INCEPTION_CHANNELS {
                return Err(Error::Config(format!(
                    "inception filters must be {INCEPTION_CHANNELS}x{INCEPTION_KERNEL}x{INCEPTION_KERNEL}"
                )));
            }
        }
        for d in INCEPTION_DILATIONS {
            let n = filters.iter().filter(|f| f.dilation() == d).count();
            if n != INCEPTION_CHANNELS / 3 {
                return Err(Error::Config(format!(
                    "expected 10 filters at dilation {d}, found {n}"
                )));
            }
        }
        Ok(Self { filters })
    }

    /// Builds the block from 30 filters' weights, assigning dilations 1, 2, 4
    /// to consecutive groups of ten.
    pub fn from_weights(weights: &[Vec<f64>]) -> Result<Self> {
        if weights.len() != INCEPTION_CHANNELS {
            return Err(Error::Config(format!(
                "inception block needs {INCEPTION_CHANNELS} filters, got {}",
                weights.len()
            )));
        }
        let filters = weights
            .iter()
            .enumerate()
            .map(|(o, w)| {
                let d = INCEPTION_DILATIONS[o / (INCEPTION_CHANNELS / 3)];
                DilatedFilter::new(INCEPTION_CHANNELS, INCEPTION_KERNEL, w, d)
            })
            .collect::<Result<_>>()?;
        Self::new(filters)
    }

    pub fn filters(&self) -> &[DilatedFilter] {
        &self.filters
    }

    pub fn parameter_count(&self) -> usize {
        self.filters.iter().map(DilatedFilter::parameter_count).sum()
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != INCEPTION_CHANNELS {
            return Err(Error::Config(format!(
                "inception block takes {INCEPTION_CHANNELS} channels, got {}",
                input.channels
            )));
        }
        conv_block(input, &self.filters)
    }

    /// The same weights with every dilation set to one: the undilated block.
    pub fn plain_filters(&self) -> Result<Vec<DilatedFilter>> {
        self.filters.iter().map(|f| f.with_dilation(1)).collect()
    }
}
