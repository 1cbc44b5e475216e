//! Payload sizing and payload-limited ternary embedding simulation.
//!
//! Given costs `rho`, the sender that minimizes expected distortion for a
//! payload of `m` bits changes pixel `i` by +1 or -1, each with probability
//!
//! ```text
//! beta_i = exp(-lambda rho_i) / (1 + 2 exp(-lambda rho_i))
//! ```
//!
//! where `lambda > 0` is chosen so the ternary entropy `Σ H3(beta_i)` equals `m`.

use serde::{Deserialize, Serialize};

use crate::cost_model::CostMap;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::par;
use crate::rng::CounterRng;

/// `log2(3)`: the most a ternary change can carry, in bits per pixel.
pub const TERNARY_CAPACITY: f64 = 1.584_962_500_721_156_3;

pub const LAMBDA_BRACKET: (f64, f64) = (1e-8, 1e8);
pub const MAX_BISECTIONS: usize = 200;
/// Default entropy tolerance, relative to the target.
pub const DEFAULT_RELATIVE_TOL: f64 = 1e-3;

const ENTROPY_CHUNK: usize = 4096;

/// A relative payload for a `width x height` cover, together with the
/// square-root-law constant `k` it implies:
/// `alpha = k / (wh) * sqrt(wh) * ln(wh)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub alpha: f64,
    pub width: usize,
    pub height: usize,
    pub k: f64,
}

fn srl_shape(width: usize, height: usize) -> Result<f64> {
    let n = width as f64 * height as f64;
    if width == 0 || height == 0 || n <= 1.0 {
        return Err(Error::Domain(format!("degenerate dimensions {width}x{height}")));
    }
    Ok(n.ln() / n.sqrt())
}

impl PayloadSpec {
    pub fn new(alpha: f64, width: usize, height: usize) -> Result<Self> {
        if !(0.0..=TERNARY_CAPACITY).contains(&alpha) {
            return Err(Error::Domain(format!(
                "relative payload {alpha} outside [0, log2 3]"
            )));
        }
        let k = alpha / srl_shape(width, height)?;
        Ok(Self {
            alpha,
            width,
            height,
            k,
        })
    }

    pub fn total_bits(&self) -> f64 {
        self.alpha * self.width as f64 * self.height as f64
    }
}

/// Square-root-law payload for another cover size, keeping `k` fixed.
pub fn srl_payload(base: &PayloadSpec, width: usize, height: usize) -> Result<PayloadSpec> {
    if !(base.alpha > 0.0) {
        return Err(Error::Domain("base payload must be positive".into()));
    }
    if (width, height) == (base.width, base.height) {
        return Ok(*base);
    }
    let alpha = base.k * srl_shape(width, height)?;
    if alpha > TERNARY_CAPACITY {
        return Err(Error::Domain(format!(
            "square-root law gives {alpha:.4} bpp at {width}x{height}, above log2 3"
        )));
    }
    Ok(PayloadSpec {
        alpha,
        width,
        height,
        k: base.k,
    })
}

/// Ternary entropy in bits of a symmetric ±1 change with probability `beta` each.
#[inline]
pub fn ternary_entropy(beta: f64) -> f64 {
    let stay = 1.0 - 2.0 * beta;
    let mut h = 0.0;
    if beta > 0.0 {
        h -= 2.0 * beta * beta.log2();
    }
    if stay > 0.0 {
        h -= stay * stay.log2();
    }
    h
}

#[inline]
fn change_probability(lambda: f64, cost: f64) -> f64 {
    let e = (-lambda * cost).exp();
    e / (1.0 + 2.0 * e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPlan {
    width: usize,
    height: usize,
    beta: Vec<f64>,
    pub lambda: f64,
    pub realized_bits: f64,
    pub target_bits: f64,
}

impl EmbeddingPlan {
    /// A plan with explicit probabilities, e.g. for simulation studies.
    pub fn from_beta(width: usize, height: usize, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != width * height || width == 0 {
            return Err(Error::Dimension(format!(
                "{} probabilities for a {width}x{height} plan",
                beta.len()
            )));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..=1.0 / 3.0 + 1e-12).contains(*b)) {
            return Err(Error::Domain(format!("change probability {b} outside [0, 1/3]")));
        }
        let bits = entropy_sum(&beta);
        Ok(Self {
            width,
            height,
            beta,
            lambda: f64::NAN,
            realized_bits: bits,
            target_bits: bits,
        })
    }

    /// No changes anywhere.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            beta: vec![0.0; width * height],
            lambda: f64::INFINITY,
            realized_bits: 0.0,
            target_bits: 0.0,
        }
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
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Expected fraction of pixels changed (both signs).
    pub fn expected_change_rate(&self) -> f64 {
        2.0 * self.beta.iter().sum::<f64>() / self.beta.len() as f64
    }
}

/// Sum of ternary entropies with a fixed chunking, so the result does not
/// depend on how many threads computed it.
fn entropy_sum(beta: &[f64]) -> f64 {
    par::map_chunks(beta, ENTROPY_CHUNK, |_, c| c.iter().map(|&b| ternary_entropy(b)).sum::<f64>())
        .into_iter()
        .sum()
}

fn payload_for(costs: &CostMap, lambda: f64) -> f64 {
    let wet = costs.wet_threshold();
    par::map_chunks(costs.costs(), ENTROPY_CHUNK, |_, c| {
        c.iter()
            .filter(|&&rho| rho < wet)
            .map(|&rho| ternary_entropy(change_probability(lambda, rho)))
            .sum::<f64>()
    })
    .into_iter()
    .sum()
}

/// Change probabilities carrying `target_bits` within `tol` bits.
///
/// `lambda` is bisected geometrically, starting from [`LAMBDA_BRACKET`] and
/// widening the bracket by factors of ten while it fails to contain the
/// target. Wet pixels get probability zero.
pub fn compute_change_probabilities(costs: &CostMap, target_bits: f64, tol: f64) -> Result<EmbeddingPlan> {
    if !(target_bits > 0.0 && target_bits.is_finite()) {
        return Err(Error::Domain(format!("target payload must be positive, got {target_bits}")));
    }
    if !(tol >= 0.0) {
        return Err(Error::Domain(format!("tolerance must be nonnegative, got {tol}")));
    }
    let ceiling = TERNARY_CAPACITY * costs.dry_count() as f64;
    if target_bits > ceiling {
        return Err(Error::Capacity {
            requested: target_bits,
            ceiling,
        });
    }

    let (mut lo, mut hi) = LAMBDA_BRACKET;
    let mut iterations = 0;
    // payload_for is decreasing in lambda: need payload(lo) >= target >= payload(hi).
    while payload_for(costs, hi) > target_bits + tol {
        lo = hi;
        hi *= 10.0;
        iterations += 1;
        if !hi.is_finite() || iterations > MAX_BISECTIONS {
            return Err(Error::Convergence {
                iterations,
                detail: format!("payload still above target at lambda={lo:e}"),
            });
        }
    }
    while payload_for(costs, lo) < target_bits - tol {
        hi = lo;
        lo /= 10.0;
        iterations += 1;
        if lo < f64::MIN_POSITIVE || iterations > MAX_BISECTIONS {
            return Err(Error::Convergence {
                iterations,
                detail: format!("payload still below target at lambda={hi:e}"),
            });
        }
    }

    let mut lambda = (lo * hi).sqrt();
    let mut bits = payload_for(costs, lambda);
    let mut steps = 0;
    while (bits - target_bits).abs() > tol {
        if steps == MAX_BISECTIONS || hi <= lo * (1.0 + 4.0 * f64::EPSILON) {
            return Err(Error::Convergence {
                iterations: steps,
                detail: format!(
                    "lambda bracket [{lo:e}, {hi:e}] gives {bits:.6} bits for target {target_bits:.6} (tol {tol:e})"
                ),
            });
        }
        if bits > target_bits {
            lo = lambda;
        } else {
            hi = lambda;
        }
        lambda = (lo * hi).sqrt();
        bits = payload_for(costs, lambda);
        steps += 1;
    }

    let wet = costs.wet_threshold();
    let beta: Vec<f64> = costs
        .costs()
        .iter()
        .map(|&rho| if rho < wet { change_probability(lambda, rho) } else { 0.0 })
        .collect();
    Ok(EmbeddingPlan {
        width: costs.width(),
        height: costs.height(),
        beta,
        lambda,
        realized_bits: bits,
        target_bits,
    })
}

/// Applies the plan to `cover`. Pixel `(i, j)` draws `u` from a generator
/// keyed by `(seed, i, j)`: `u < beta` adds one, `u >= 1 - beta` subtracts
/// one. A change that would leave `[0, 255]` flips sign instead.
pub fn simulate_embedding(cover: &GrayImage, plan: &EmbeddingPlan, seed: u64) -> Result<GrayImage> {
    if (cover.width(), cover.height()) != (plan.width, plan.height) {
        return Err(Error::Dimension(format!(
            "plan is {}x{} but cover is {}x{}",
            plan.width,
            plan.height,
            cover.width(),
            cover.height()
        )));
    }
    let rng = CounterRng::new(seed);
    let w = cover.width();
    let mut stego = cover.clone();
    par::for_each_chunk_mut(stego.pixels_mut(), w, |row, pixels| {
        let betas = &plan.beta[row * w..(row + 1) * w];
        for (col, (p, &b)) in pixels.iter_mut().zip(betas).enumerate() {
            if b <= 0.0 {
                continue;
            }
            let u = rng.pixel(row, col);
            if u < b {
                *p = if *p == 255 { 254 } else { *p + 1 };
            } else if u >= 1.0 - b {
                *p = if *p == 0 { 1 } else { *p - 1 };
            }
        }
    });
    Ok(stego)
}
