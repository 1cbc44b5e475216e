//! Browser bindings for the demo page in `www/`.
//!
//! A [`Scene`] holds one grayscale image and its cost map. The page asks it
//! for a heatmap, for the best crop of a given size, and draws the footprint
//! of a dilated kernel next to it.

use nnid::cost_model::{compute_cost_map, CostMap, DEFAULT_SIGMA};
use nnid::dilated_conv::{dilated_conv2d, DilatedKernel, FeatureMap};
use nnid::histogram::BinningSpec;
use nnid::integral_histogram::BinMap;
use nnid::smart_crop::{center_position, crop_distance, search_bin_map};
use nnid::{synth, GrayImage};
use wasm_bindgen::prelude::*;

fn js(e: nnid::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Scene {
    image: GrayImage,
    costs: CostMap,
    search: BinMap,
}

/// Best crop and the centered crop, for display.
#[derive(Debug, PartialEq)]
pub struct CropSummary {
    pub x: usize,
    pub y: usize,
    pub distance: f64,
    pub evaluated: u64,
    pub center_x: usize,
    pub center_y: usize,
    pub center_distance: f64,
}

impl Scene {
    pub fn from_image(image: GrayImage) -> nnid::Result<Scene> {
        let costs = compute_cost_map(&image, DEFAULT_SIGMA)?;
        let search = BinMap::new(&costs, &BinningSpec::search());
        Ok(Scene { image, costs, search })
    }

    pub fn best_crop(&self, size: usize, stride: usize) -> nnid::Result<CropSummary> {
        let best = search_bin_map(&self.search, size, stride)?;
        let (cx, cy) = center_position(self.costs.width(), self.costs.height(), size);
        Ok(CropSummary {
            x: best.x,
            y: best.y,
            distance: best.distance,
            evaluated: best.evaluated,
            center_x: cx,
            center_y: cy,
            center_distance: crop_distance(&self.costs, cx, cy, size, &BinningSpec::search())?,
        })
    }

    /// RGBA heatmap of log10 cost, stretched between the 1st and 99th percentiles.
    pub fn heatmap_rgba(&self) -> Vec<u8> {
        let logs: Vec<f64> = self.costs.costs().iter().map(|c| c.max(1e-12).log10()).collect();
        let mut sorted = logs.clone();
        sorted.sort_by(f64::total_cmp);
        let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q) as usize];
        let (lo, hi) = (pick(0.01), pick(0.99));
        let span = (hi - lo).max(1e-9);
        let mut out = Vec::with_capacity(logs.len() * 4);
        for v in logs {
            let [r, g, b] = colormap(((v - lo) / span).clamp(0.0, 1.0));
            out.extend_from_slice(&[r, g, b, 255]);
        }
        out
    }
}

/// Dark blue (cheap to modify) through teal and yellow to white (expensive).
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [13.0, 8.0, 135.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
        [255.0, 255.0, 255.0],
    ];
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut rgb = [0u8; 3];
    for (k, c) in rgb.iter_mut().enumerate() {
        *c = (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8;
    }
    rgb
}

/// Response of a `size x size` all-ones kernel at `dilation` to a centered
/// impulse on a `field x field` grid: the taps the kernel actually reads.
pub fn footprint(size: usize, dilation: usize, field: usize) -> nnid::Result<Vec<f64>> {
    let mut z = vec![0.0; field * field];
    z[(field / 2) * field + field / 2] = 1.0;
    let input = FeatureMap::single(field, field, z)?;
    let kernel = DilatedKernel::new(size, vec![1.0; size * size], dilation)?;
    Ok(dilated_conv2d(&input, &kernel)?.values().to_vec())
}

#[wasm_bindgen]
impl Scene {
    /// Wraps 8-bit grayscale pixels, row-major.
    #[wasm_bindgen(constructor)]
    pub fn new(pixels: &[u8], width: usize, height: usize) -> Result<Scene, JsError> {
        let image = GrayImage::new(width, height, pixels.to_vec()).map_err(js)?;
        Scene::from_image(image).map_err(js)
    }

    /// A synthetic textured image like the ones used to test the pipeline.
    pub fn synthetic(width: usize, height: usize, seed: u32) -> Result<Scene, JsError> {
        Scene::from_image(synth::textured_image(width, height, seed as u64)).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Grayscale pixels as RGBA, ready for `ImageData`.
    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.pixels().iter().flat_map(|&p| [p, p, p, 255]).collect()
    }

    pub fn heatmap(&self) -> Vec<u8> {
        self.heatmap_rgba()
    }

    /// `[x, y, distance, evaluated, center_x, center_y, center_distance]`.
    pub fn crop(&self, size: usize, stride: usize) -> Result<Vec<f64>, JsError> {
        let c = self.best_crop(size, stride).map_err(js)?;
        Ok(vec![
            c.x as f64,
            c.y as f64,
            c.distance,
            c.evaluated as f64,
            c.center_x as f64,
            c.center_y as f64,
            c.center_distance,
        ])
    }
}

#[wasm_bindgen(js_name = dilatedFootprint)]
pub fn dilated_footprint(size: usize, dilation: usize, field: usize) -> Result<Vec<f64>, JsError> {
    footprint(size, dilation, field).map_err(js)
}
