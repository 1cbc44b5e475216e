//! Dichotomous payload calibration.
//!
//! For one image dimension, find the relative payload at which a fixed
//! detector reaches a target accuracy. The search starts from the
//! square-root-law payload, widens geometrically until the target is
//! bracketed, then bisects on the payload.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost_model::{compute_cost_map, CostMap};
use crate::dataset::DatasetManifest;
use crate::embedding::{compute_change_probabilities, simulate_embedding, srl_payload, EmbeddingPlan, PayloadSpec, DEFAULT_RELATIVE_TOL, TERNARY_CAPACITY};
use crate::error::{Error, Result};
use crate::image::{read_image, write_image, GrayImage};
use crate::par;
use crate::rng::mix64;

/// Payload the search is seeded from: 0.4 bpp at 256x256, scaled by the
/// square-root law.
pub const REFERENCE_PAYLOAD: (f64, usize) = (0.4, 256);
pub const DEFAULT_TARGET: f64 = 0.76;
pub const DEFAULT_TOLERANCE: f64 = 0.005;
pub const DEFAULT_MAX_ITER: usize = 30;

/// Payloads calibrated for a 76% Yedroudj-Net accuracy, per dimension.
/// Shipped as reference values; reproducing them needs that detector.
pub const REFERENCE_ALPHA_TABLE: [(usize, f64); 3] = [(256, 0.4), (512, 0.3204), (1024, 0.28895)];

const MIN_ALPHA: f64 = 1e-6;

/// Anything that maps a relative payload to a detection accuracy.
pub trait AccuracyOracle {
    /// `repeat` distinguishes independent evaluations at the same payload.
    fn accuracy(&mut self, alpha: f64, repeat: u32) -> Result<f64>;
}

impl<F: FnMut(f64) -> f64> AccuracyOracle for F {
    fn accuracy(&mut self, alpha: f64, _repeat: u32) -> Result<f64> {
        Ok(self(alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Evaluations averaged per probe.
    pub repeats: u32,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target: DEFAULT_TARGET,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub alpha: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub achieved_accuracy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<ProbeRecord>,
    pub warnings: Vec<String>,
}

/// Square-root-law starting payload for a `dim x dim` dataset.
pub fn srl_seed(dim: usize) -> Result<f64> {
    let (alpha, base_dim) = REFERENCE_PAYLOAD;
    let base = PayloadSpec::new(alpha, base_dim, base_dim)?;
    Ok(srl_payload(&base, dim, dim)?.alpha)
}

struct Search<'a, O: AccuracyOracle + ?Sized> {
    oracle: &'a mut O,
    cfg: &'a CalibrationConfig,
    history: Vec<ProbeRecord>,
    warnings: Vec<String>,
}

impl<O: AccuracyOracle + ?Sized> Search<'_, O> {
    fn probe(&mut self, alpha: f64) -> Result<f64> {
        let mut sum = 0.0;
        for r in 0..self.cfg.repeats.max(1) {
            sum += self.oracle.accuracy(alpha, r)?;
        }
        let acc = sum / self.cfg.repeats.max(1) as f64;
        let margin = 2.0 * self.cfg.tolerance;
        let mut note = None;
        for p in &self.history {
            let bad = (p.alpha < alpha && p.accuracy > acc + margin)
                || (p.alpha > alpha && p.accuracy < acc - margin);
            if bad {
                let msg = format!(
                    "non-monotone detector: acc({:.6})={:.4} vs acc({:.6})={:.4}",
                    p.alpha, p.accuracy, alpha, acc
                );
                log::warn!("{msg}");
                self.warnings.push(msg.clone());
                note = Some(msg);
                break;
            }
        }
        self.history.push(ProbeRecord {
            alpha,
            accuracy: acc,
            note,
        });
        Ok(acc)
    }

    fn hit(&self, acc: f64) -> bool {
        (acc - self.cfg.target).abs() <= self.cfg.tolerance
    }

    fn budget_left(&self) -> bool {
        self.history.len() < self.cfg.max_iter
    }

    fn finish(self, alpha: f64, acc: f64, converged: bool) -> CalibrationResult {
        CalibrationResult {
            alpha,
            achieved_accuracy: acc,
            iterations: self.history.len(),
            converged,
            history: self.history,
            warnings: self.warnings,
        }
    }

    fn best(&self) -> (f64, f64) {
        let t = self.cfg.target;
        let p = self
            .history
            .iter()
            .min_by(|a, b| (a.accuracy - t).abs().total_cmp(&(b.accuracy - t).abs()))
            .expect("at least one probe");
        (p.alpha, p.accuracy)
    }
}

/// Bracket-and-bisect search for the payload giving `cfg.target` accuracy.
///
/// Keeps `acc(lo) < target <= acc(hi)`. Each probe counts towards
/// `cfg.max_iter`; when the budget runs out the probe closest to the target
/// is returned with `converged == false`.
pub fn calibrate_payload<O: AccuracyOracle + ?Sized>(
    oracle: &mut O,
    seed_alpha: f64,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    if !(cfg.target > 0.5 && cfg.target < 1.0) {
        return Err(Error::Config(format!("target accuracy {} outside (0.5, 1)", cfg.target)));
    }
    if !(cfg.tolerance > 0.0) || cfg.max_iter == 0 {
        return Err(Error::Config("tolerance and max_iter must be positive".into()));
    }
    if !(seed_alpha > 0.0 && seed_alpha <= TERNARY_CAPACITY) {
        return Err(Error::Config(format!("seed payload {seed_alpha} outside (0, log2 3]")));
    }
    let mut s = Search {
        oracle,
        cfg,
        history: Vec::new(),
        warnings: Vec::new(),
    };
    let target = cfg.target;

    let acc = s.probe(seed_alpha)?;
    if s.hit(acc) {
        return Ok(s.finish(seed_alpha, acc, true));
    }
    let (mut lo, mut hi);
    if acc < target {
        hi = seed_alpha;
        loop {
            if hi >= TERNARY_CAPACITY {
                return Err(Error::Infeasible {
                    target,
                    detail: format!("accuracy {acc:.4} at the ternary ceiling log2 3"),
                });
            }
            if !s.budget_left() {
                let (a, b) = s.best();
                return Ok(s.finish(a, b, false));
            }
            lo = hi;
            hi = (hi * 2.0).min(TERNARY_CAPACITY);
            let acc = s.probe(hi)?;
            if s.hit(acc) {
                return Ok(s.finish(hi, acc, true));
            }
            if acc >= target {
                break;
            }
        }
    } else {
        lo = seed_alpha;
        loop {
            if !s.budget_left() {
                let (a, b) = s.best();
                return Ok(s.finish(a, b, false));
            }
            hi = lo;
            lo /= 2.0;
            let acc = s.probe(lo)?;
            if s.hit(acc) {
                return Ok(s.finish(lo, acc, true));
            }
            if acc < target {
                break;
            }
            if lo < MIN_ALPHA {
                s.warnings.push(format!("accuracy stays above target down to alpha={lo:e}"));
                return Ok(s.finish(lo, acc, false));
            }
        }
    }

    while s.budget_left() {
        let mid = 0.5 * (lo + hi);
        let acc = s.probe(mid)?;
        if s.hit(acc) {
            return Ok(s.finish(mid, acc, true));
        }
        if acc < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = s.best();
    Ok(s.finish(a, b, false))
}

/// `acc(alpha) = min(0.5 + slope * alpha, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDetector {
    pub slope: f64,
}

impl SyntheticDetector {
    pub fn accuracy(&self, alpha: f64) -> f64 {
        (0.5 + self.slope * alpha).min(1.0)
    }
}

impl AccuracyOracle for SyntheticDetector {
    fn accuracy(&mut self, alpha: f64, _repeat: u32) -> Result<f64> {
        Ok(SyntheticDetector::accuracy(self, alpha))
    }
}

// ---------------------------------------------------------------------------
// Builtin residual detector

const RESIDUAL_CLIP: i32 = 3;
pub const MIN_IMAGES_PER_CLASS: usize = 20;

/// Handcrafted noise-residual features of one image.
pub fn residual_features(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let px = |r: usize, c: usize| img.get(r, c) as i32;
    let bins = (2 * RESIDUAL_CLIP + 1) as usize;
    let mut hist = vec![0.0; bins];
    let mut diff_stats = [(0.0f64, 0.0f64, 0usize); 2];
    let mut second = [(0.0f64, 0usize, 0usize); 2];
    let mut push_diff = |axis: usize, d: i32| {
        let (s, s2, n) = &mut diff_stats[axis];
        *s += d as f64;
        *s2 += (d * d) as f64;
        *n += 1;
        hist[(d.clamp(-RESIDUAL_CLIP, RESIDUAL_CLIP) + RESIDUAL_CLIP) as usize] += 1.0;
    };
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                push_diff(0, px(r, c + 1) - px(r, c));
            }
            if r + 1 < h {
                push_diff(1, px(r + 1, c) - px(r, c));
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            if c >= 1 && c + 1 < w {
                let d = px(r, c - 1) - 2 * px(r, c) + px(r, c + 1);
                second[0].0 += d.abs() as f64;
                second[0].1 += (d == 0) as usize;
                second[0].2 += 1;
            }
            if r >= 1 && r + 1 < h {
                let d = px(r - 1, c) - 2 * px(r, c) + px(r + 1, c);
                second[1].0 += d.abs() as f64;
                second[1].1 += (d == 0) as usize;
                second[1].2 += 1;
            }
        }
    }
    let mut f = Vec::with_capacity(6 + bins);
    for (s, s2, n) in diff_stats {
        let n = n.max(1) as f64;
        let mean = s / n;
        f.push((s2 / n - mean * mean).max(0.0).ln_1p());
    }
    for (abs, zeros, n) in second {
        let n = n.max(1) as f64;
        f.push((abs / n).ln_1p());
        f.push(zeros as f64 / n);
    }
    let total: f64 = hist.iter().sum::<f64>().max(1.0);
    f.extend(hist.iter().map(|c| c / total));
    f
}

/// Ridge-regularized linear classifier on standardized features.
struct LinearClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: DVector<f64>,
}

impl LinearClassifier {
    fn fit(features: &[Vec<f64>], labels: &[f64], ridge: f64) -> Result<Self> {
        let n = features.len();
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        // Design matrix with a bias column.
        let x = DMatrix::from_fn(n, d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (features[i][j] - mean[j]) / scale[j]
            }
        });
        let y = DVector::from_column_slice(labels);
        let mut gram = x.transpose() * &x;
        for j in 0..d {
            gram[(j, j)] += ridge;
        }
        gram[(d, d)] += 1e-9;
        let rhs = x.transpose() * y;
        let weights = gram
            .cholesky()
            .ok_or_else(|| Error::Domain("singular normal equations in detector fit".into()))?
            .solve(&rhs);
        Ok(Self { mean, scale, weights })
    }

    fn score(&self, f: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut s = self.weights[d];
        for j in 0..d {
            s += self.weights[j] * (f[j] - self.mean[j]) / self.scale[j];
        }
        s
    }
}

/// Balanced held-out accuracy of a linear classifier on residual features,
/// clamped to `[0.5, 1]`. Pairs `(covers[i], stegos[i])` stay on the same
/// side of the deterministic half/half train/test split.
pub fn builtin_residual_detector(covers: &[GrayImage], stegos: &[GrayImage], split_seed: u64) -> Result<f64> {
    if covers.len() != stegos.len() {
        return Err(Error::Config(format!(
            "{} covers but {} stegos",
            covers.len(),
            stegos.len()
        )));
    }
    if covers.len() < MIN_IMAGES_PER_CLASS {
        return Err(Error::Shortfall {
            what: "images per class for the residual detector".into(),
            required: MIN_IMAGES_PER_CLASS,
            available: covers.len(),
        });
    }
    let cover_f = par::map_range(covers.len(), |i| residual_features(&covers[i]));
    let stego_f = par::map_range(stegos.len(), |i| residual_features(&stegos[i]));
    let mut order: Vec<usize> = (0..covers.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let (train, test) = order.split_at(covers.len().div_ceil(2));

    let mut feats = Vec::with_capacity(2 * train.len());
    let mut labels = Vec::with_capacity(2 * train.len());
    for &i in train {
        feats.push(cover_f[i].clone());
        labels.push(-1.0);
        feats.push(stego_f[i].clone());
        labels.push(1.0);
    }
    let model = LinearClassifier::fit(&feats, &labels, 1e-2 * feats.len() as f64)?;
    let cover_ok = test.iter().filter(|&&i| model.score(&cover_f[i]) < 0.0).count();
    let stego_ok = test.iter().filter(|&&i| model.score(&stego_f[i]) > 0.0).count();
    let n = test.len() as f64;
    let acc = 0.5 * (cover_ok as f64 / n + stego_ok as f64 / n);
    Ok(acc.clamp(0.5, 1.0))
}

// ---------------------------------------------------------------------------
// External command detector

pub const DEFAULT_DETECTOR_TIMEOUT: Duration = Duration::from_secs(3600);

/// Runs a shell command that prints `accuracy=<float>` as its last line.
///
/// Placeholders `{covers}`, `{stegos}` (files listing one image path per
/// line), `{alpha}`, `{dim}` and `{manifest}` are substituted before the
/// command is handed to `sh -c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalCommand {
    pub template: String,
    pub timeout: Duration,
}

impl ExternalCommand {
    pub fn new(template: impl Into<String>) -> Self {
        Self {
            template: template.into(),
            timeout: DEFAULT_DETECTOR_TIMEOUT,
        }
    }

    pub fn render(&self, vars: &[(&str, String)]) -> String {
        let mut cmd = self.template.clone();
        for (k, v) in vars {
            cmd = cmd.replace(&format!("{{{k}}}"), v);
        }
        cmd
    }

    pub fn run(&self, vars: &[(&str, String)]) -> Result<f64> {
        let cmd = self.render(vars);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::DetectorTimeout {
                    seconds: self.timeout.as_secs_f64(),
                });
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::DetectorFailed {
                code: status.code(),
                output: format!("{out}{err}"),
            });
        }
        parse_accuracy(&out)
    }
}

/// Parses the final non-empty line, which must read `accuracy=<float in [0, 1]>`.
pub fn parse_accuracy(output: &str) -> Result<f64> {
    let bad = || Error::DetectorOutput {
        output: output.to_string(),
    };
    let line = output.lines().rev().map(str::trim).find(|l| !l.is_empty()).ok_or_else(bad)?;
    let value = line.strip_prefix("accuracy=").ok_or_else(bad)?;
    let acc: f64 = value.trim().parse().map_err(|_| bad())?;
    if !(0.0..=1.0).contains(&acc) {
        return Err(bad());
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Detectors over a dataset

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorKind {
    Synthetic(SyntheticDetector),
    BuiltinResidual,
    External(ExternalCommand),
}

impl FromStr for DetectorKind {
    type Err = Error;

    /// `builtin`, `synthetic[:slope]` or `cmd:<template>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin" {
            return Ok(DetectorKind::BuiltinResidual);
        }
        if let Some(rest) = s.strip_prefix("synthetic") {
            let slope = match rest.strip_prefix(':') {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad synthetic slope '{v}'")))?,
                None if rest.is_empty() => 1.0,
                None => return Err(Error::Config(format!("unknown detector '{s}'"))),
            };
            return Ok(DetectorKind::Synthetic(SyntheticDetector { slope }));
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("empty detector command".into()));
            }
            return Ok(DetectorKind::External(ExternalCommand::new(cmd)));
        }
        Err(Error::Config(format!("unknown detector '{s}'")))
    }
}

struct ProbePair {
    id: String,
    cover: GrayImage,
    costs: CostMap,
    seed: u64,
}

/// Evaluates a detector on stegos regenerated at each probed payload from
/// the covers of one dimension of a manifest.
pub struct DatasetProbe {
    dim: usize,
    manifest_path: PathBuf,
    pairs: Vec<ProbePair>,
    limit: Option<usize>,
    detector: DetectorKind,
    work_dir: PathBuf,
    split_seed: u64,
    probes: usize,
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    /// Pairs used per probe during the search; `None` uses all of them.
    pub probe_pairs: Option<usize>,
    pub sigma: f64,
    /// Scratch directory for stegos handed to external detectors.
    pub work_dir: PathBuf,
}

impl DatasetProbe {
    pub fn new(
        manifest: &DatasetManifest,
        manifest_path: &Path,
        dim: usize,
        detector: DetectorKind,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let entries: Vec<_> = manifest.entries.iter().filter(|e| e.size == dim).collect();
        let needs_images = !matches!(detector, DetectorKind::Synthetic(_));
        if needs_images && entries.is_empty() {
            return Err(Error::Shortfall {
                what: format!("pairs of size {dim} in manifest '{}'", manifest.name),
                required: 1,
                available: 0,
            });
        }
        let pairs = if needs_images {
            let loaded = par::map_range(entries.len(), |i| -> Result<ProbePair> {
                let e = entries[i];
                let cover = read_image(&base.join(&e.cover_path))?;
                let costs = compute_cost_map(&cover, cfg.sigma)?;
                Ok(ProbePair {
                    id: e.mother_id.clone(),
                    cover,
                    costs,
                    seed: e.seed,
                })
            });
            loaded.into_iter().collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            dim,
            manifest_path: manifest_path.to_path_buf(),
            pairs,
            limit: cfg.probe_pairs,
            detector,
            work_dir: cfg.work_dir.clone(),
            split_seed: manifest.global_seed,
            probes: 0,
        })
    }

    /// Lifts the per-probe subsample so the next probe uses every pair.
    pub fn use_all_pairs(&mut self) {
        self.limit = None;
    }

    pub fn is_subsampled(&self) -> bool {
        self.limit.is_some_and(|n| n < self.pairs.len())
    }

    fn active(&self) -> &[ProbePair] {
        let n = self.limit.unwrap_or(self.pairs.len()).min(self.pairs.len());
        &self.pairs[..n]
    }

    fn stegos(&self, alpha: f64, repeat: u32) -> Result<Vec<GrayImage>> {
        let pairs = self.active();
        par::map_range(pairs.len(), |i| {
            let p = &pairs[i];
            let n = p.cover.width() * p.cover.height();
            let plan = if alpha <= 0.0 {
                EmbeddingPlan::empty(p.cover.width(), p.cover.height())
            } else {
                let bits = alpha * n as f64;
                compute_change_probabilities(&p.costs, bits, DEFAULT_RELATIVE_TOL * bits)?
            };
            simulate_embedding(&p.cover, &plan, p.seed ^ mix64(repeat as u64))
        })
        .into_iter()
        .collect()
    }
}

impl AccuracyOracle for DatasetProbe {
    fn accuracy(&mut self, alpha: f64, repeat: u32) -> Result<f64> {
        self.probes += 1;
        match self.detector.clone() {
            DetectorKind::Synthetic(s) => Ok(s.accuracy(alpha)),
            DetectorKind::BuiltinResidual => {
                let stegos = self.stegos(alpha, repeat)?;
                let covers: Vec<GrayImage> = self.active().iter().map(|p| p.cover.clone()).collect();
                builtin_residual_detector(&covers, &stegos, self.split_seed ^ mix64(repeat as u64))
            }
            DetectorKind::External(cmd) => {
                let stegos = self.stegos(alpha, repeat)?;
                let dir = self.work_dir.join(format!("probe_{:03}", self.probes));
                std::fs::create_dir_all(dir.join("stegos"))?;
                let mut cover_list = String::new();
                let mut stego_list = String::new();
                for (p, s) in self.active().iter().zip(&stegos) {
                    let path = dir.join("stegos").join(format!("{}.pgm", p.id));
                    write_image(&path, s)?;
                    let cover_path = dir.join("covers").join(format!("{}.pgm", p.id));
                    write_image(&cover_path, &p.cover)?;
                    cover_list.push_str(&format!("{}\n", cover_path.display()));
                    stego_list.push_str(&format!("{}\n", path.display()));
                }
                let covers_file = dir.join("covers.txt");
                let stegos_file = dir.join("stegos.txt");
                std::fs::write(&covers_file, cover_list)?;
                std::fs::write(&stegos_file, stego_list)?;
                cmd.run(&[
                    ("covers", covers_file.display().to_string()),
                    ("stegos", stegos_file.display().to_string()),
                    ("alpha", format!("{alpha}")),
                    ("dim", self.dim.to_string()),
                    ("manifest", self.manifest_path.display().to_string()),
                ])
            }
        }
    }
}

/// Calibrates one dimension of a manifest. When the search ran on a
/// subsample, the chosen payload is re-probed on every pair and that
/// accuracy is reported.
pub fn calibrate_dataset(probe: &mut DatasetProbe, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    let (seed, fallback) = match srl_seed(probe.dim) {
        Ok(a) => (a, None),
        Err(Error::Domain(why)) => (
            TERNARY_CAPACITY / 2.0,
            Some(format!("{why}; search seeded at half of log2 3 instead")),
        ),
        Err(e) => return Err(e),
    };
    let mut result = calibrate_payload(probe, seed, cfg)?;
    if let Some(w) = fallback {
        result.warnings.insert(0, w);
    }
    if probe.is_subsampled() {
        probe.use_all_pairs();
        let mut sum = 0.0;
        for r in 0..cfg.repeats.max(1) {
            sum += probe.accuracy(result.alpha, r)?;
        }
        let acc = sum / cfg.repeats.max(1) as f64;
        result.history.push(ProbeRecord {
            alpha: result.alpha,
            accuracy: acc,
            note: Some("full-size confirmation".into()),
        });
        result.achieved_accuracy = acc;
        result.converged = result.converged && (acc - cfg.target).abs() <= cfg.tolerance;
    }
    Ok(result)
}
