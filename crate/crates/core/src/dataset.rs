//! UNI and MULTI dataset construction.
//!
//! A UNI dataset holds one fixed-size smart crop per mother image. MULTI
//! mixes pairs drawn from several UNI datasets. Each dataset is described by
//! a [`DatasetManifest`] whose paths are relative to the manifest's own
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost_model::{compute_cost_map, DEFAULT_SIGMA};
use crate::embedding::{compute_change_probabilities, simulate_embedding, DEFAULT_RELATIVE_TOL};
use crate::error::{Error, Result};
use crate::histogram::{kl_sym, BinningSpec, Histogram};
use crate::image::{read_image, write_image};
use crate::integral_histogram::BinMap;
use crate::par;
use crate::smart_crop::{center_position, random_positions, search_bin_map};

pub const TOOL_VERSION: &str = concat!("nnid ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_SIZES: [usize; 4] = [256, 512, 1024, 2048];
pub const DEFAULT_RANDOM_CROPS: usize = 20;
pub const DEFAULT_PAIRS_PER_DIM: usize = 4000;
/// Fraction of MULTI pairs assigned to training.
pub const MULTI_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimPolicy {
    Fixed(usize),
    Mixed,
}

/// Symmetrized KL distance to the mother under the search and report binnings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KlPair {
    pub search: f64,
    pub report: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mother_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub cover_path: String,
    pub stego_path: Option<String>,
    pub alpha: Option<f64>,
    /// Seed of the embedding simulator for this entry.
    pub seed: u64,
    pub realized_bits: Option<f64>,
    pub kl_smart: KlPair,
    pub kl_center: KlPair,
    /// Mean over random crops of the same size.
    pub kl_random: KlPair,
    /// Set when the entry could not be embedded.
    pub flag: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Pair counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 12000 training pairs split 19200/4800 images, plus 3000 test pairs.
    pub const STANDARD: SplitCounts = SplitCounts {
        train: 9600,
        val: 2400,
        test: 3000,
    };

    pub fn scaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        let s = |n: usize| (n as f64 * scale).round() as usize;
        Ok(Self {
            train: s(self.train),
            val: s(self.val),
            test: s(self.test),
        })
    }

    /// Counts in the same 64/16/20 proportions covering exactly `n` pairs.
    pub fn proportional(n: usize) -> Self {
        let p = Self::STANDARD;
        let total = p.total() as f64;
        let test = (n as f64 * p.test as f64 / total).round() as usize;
        let val = ((n as f64 * p.val as f64 / total).round() as usize).min(n - test);
        Self {
            train: n - test - val,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Image counts (a pair is two images).
    pub fn images(&self) -> (usize, usize, usize) {
        (2 * self.train, 2 * self.val, 2 * self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dim_policy: DimPolicy,
    pub entries: Vec<ManifestEntry>,
    pub splits: Splits,
    pub global_seed: u64,
    pub tool_version: String,
    /// Mother images or (mother, size) pairs left out, by reason.
    pub skipped: BTreeMap<String, usize>,
    pub notes: Vec<String>,
    pub report_spec: BinningSpec,
    pub search_spec: BinningSpec,
}

impl DatasetManifest {
    fn empty(name: String, dim_policy: DimPolicy, global_seed: u64) -> Self {
        Self {
            name,
            dim_policy,
            entries: Vec::new(),
            splits: Splits::default(),
            global_seed,
            tool_version: TOOL_VERSION.to_string(),
            skipped: BTreeMap::new(),
            notes: Vec::new(),
            report_spec: BinningSpec::report(),
            search_spec: BinningSpec::search(),
        }
    }

    /// Pretty JSON with object keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Checks the split, seed and size invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.entries.len();
        let mut seen = vec![false; n];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= n {
                return Err(Error::Config(format!("split index {i} out of range ({n} entries)")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("entry {i} appears in more than one split slot")));
            }
        }
        let assigned = seen.iter().filter(|&&s| s).count();
        if assigned != 0 && assigned != n {
            return Err(Error::Config(format!("splits cover {assigned} of {n} entries")));
        }
        if let DimPolicy::Fixed(size) = self.dim_policy {
            if let Some(e) = self.entries.iter().find(|e| e.size != size) {
                return Err(Error::Config(format!("entry {} has size {} in a {size} dataset", e.id, e.size)));
            }
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate entry ids".into()));
        }
        Ok(())
    }

    /// Mean distances across entries; `None` for an empty dataset.
    pub fn difficulty_report(&self) -> Option<DifficultyReport> {
        let n = self.entries.len();
        if n == 0 {
            return None;
        }
        let mean = |f: &dyn Fn(&ManifestEntry) -> KlPair| {
            let mut acc = KlPair::default();
            for e in &self.entries {
                let v = f(e);
                acc.search += v.search / n as f64;
                acc.report += v.report / n as f64;
            }
            acc
        };
        let mut sizes: Vec<usize> = self.entries.iter().map(|e| e.size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        Some(DifficultyReport {
            name: self.name.clone(),
            entries: n,
            sizes,
            smart: mean(&|e| e.kl_smart),
            center: mean(&|e| e.kl_center),
            random: mean(&|e| e.kl_random),
        })
    }
}

/// Mean symmetrized KL between each crop and its mother.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub name: String,
    pub entries: usize,
    pub sizes: Vec<usize>,
    pub smart: KlPair,
    pub center: KlPair,
    pub random: KlPair,
}

/// 64-bit seed from SHA-256 of `(global_seed, mother_id, size, role)`.
pub fn entry_seed(global_seed: u64, mother_id: &str, size: usize, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update((mother_id.len() as u64).to_le_bytes());
    h.update(mother_id.as_bytes());
    h.update((size as u64).to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn uni_name(size: usize) -> String {
    format!("UNI_{size}")
}

#[derive(Clone, Debug)]
pub struct BuildConfig {
    pub global_seed: u64,
    pub sizes: Vec<usize>,
    pub stride: usize,
    pub sigma: f64,
    pub search_spec: BinningSpec,
    pub report_spec: BinningSpec,
    pub random_crops: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            global_seed: 0,
            sizes: DEFAULT_SIZES.to_vec(),
            stride: 1,
            sigma: DEFAULT_SIGMA,
            search_spec: BinningSpec::search(),
            report_spec: BinningSpec::report(),
            random_crops: DEFAULT_RANDOM_CROPS,
        }
    }
}

/// `.pgm` and `.png` files of a directory, sorted by file name.
pub fn list_mothers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "png")) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn rect_histogram(map: &BinMap, x: usize, y: usize, size: usize) -> Histogram {
    let mut counts = vec![0u64; map.spec().total_bins()];
    for r in y..y + size {
        for &b in &map.row(r)[x..x + size] {
            counts[b as usize] += 1;
        }
    }
    Histogram::from_counts(*map.spec(), counts).expect("counts match spec")
}

struct Binned {
    search: BinMap,
    search_hist: Histogram,
    report: BinMap,
    report_hist: Histogram,
}

impl Binned {
    fn kl(&self, x: usize, y: usize, size: usize) -> Result<KlPair> {
        Ok(KlPair {
            search: kl_sym(&self.search_hist, &rect_histogram(&self.search, x, y, size))?,
            report: kl_sym(&self.report_hist, &rect_histogram(&self.report, x, y, size))?,
        })
    }
}

/// Builds one UNI dataset per requested size under `out_dir/UNI_<size>/`,
/// writing each smart-crop cover as PGM. Manifests are returned, not saved.
pub fn build_nnid(mother_dir: &Path, out_dir: &Path, cfg: &BuildConfig) -> Result<Vec<DatasetManifest>> {
    if cfg.sizes.is_empty() {
        return Err(Error::Config("no crop sizes requested".into()));
    }
    if cfg.stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let mut manifests: Vec<DatasetManifest> = cfg
        .sizes
        .iter()
        .map(|&s| {
            let mut m = DatasetManifest::empty(uni_name(s), DimPolicy::Fixed(s), cfg.global_seed);
            m.search_spec = cfg.search_spec;
            m.report_spec = cfg.report_spec;
            m
        })
        .collect();

    for path in list_mothers(mother_dir)? {
        let mother_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let img = match read_image(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                for m in &mut manifests {
                    *m.skipped.entry("undecodable".into()).or_default() += 1;
                    m.notes.push(format!("skipped {mother_id}: {e}"));
                }
                continue;
            }
        };
        let costs = compute_cost_map(&img, cfg.sigma)?;
        let search = BinMap::new(&costs, &cfg.search_spec);
        let report = BinMap::new(&costs, &cfg.report_spec);
        drop(costs);
        let binned = Binned {
            search_hist: search.histogram(),
            report_hist: report.histogram(),
            search,
            report,
        };
        let (w, h) = (img.width(), img.height());
        for (m, &size) in manifests.iter_mut().zip(&cfg.sizes) {
            if size > w || size > h || size == 0 {
                *m.skipped.entry("smaller_than_crop".into()).or_default() += 1;
                continue;
            }
            let crop = search_bin_map(&binned.search, size, cfg.stride)?;
            let kl_smart = binned.kl(crop.x, crop.y, size)?;
            let (cx, cy) = center_position(w, h, size);
            let kl_center = binned.kl(cx, cy, size)?;
            let positions = random_positions(
                w,
                h,
                size,
                cfg.random_crops,
                entry_seed(cfg.global_seed, &mother_id, size, "random"),
            );
            let randoms = par::map_range(positions.len(), |i| binned.kl(positions[i].0, positions[i].1, size));
            let mut kl_random = KlPair::default();
            for r in randoms {
                let r = r?;
                kl_random.search += r.search / positions.len().max(1) as f64;
                kl_random.report += r.report / positions.len().max(1) as f64;
            }
            let id = format!("{mother_id}_{size}");
            let cover_rel = format!("covers/{id}.pgm");
            write_image(&out_dir.join(&m.name).join(&cover_rel), &img.crop(crop.x, crop.y, size, size)?)?;
            m.entries.push(ManifestEntry {
                id,
                mother_id: mother_id.clone(),
                x: crop.x,
                y: crop.y,
                size,
                cover_path: cover_rel,
                stego_path: None,
                alpha: None,
                seed: entry_seed(cfg.global_seed, &mother_id, size, "stego"),
                realized_bits: None,
                kl_smart,
                kl_center,
                kl_random,
                flag: None,
            });
        }
    }
    for m in &mut manifests {
        m.entries.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(manifests)
}

/// Keeps `counts.total()` entries chosen by a seeded shuffle and assigns them
/// to train, validation and test. Covers and stegos share an entry, so a
/// pair never straddles splits.
pub fn assemble_splits(manifest: &DatasetManifest, counts: SplitCounts, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.entries.len();
    if counts.total() > n {
        return Err(Error::Shortfall {
            what: format!(
                "pairs in {} for {}/{}/{} train/val/test",
                manifest.name, counts.train, counts.val, counts.test
            ),
            required: counts.total(),
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<(usize, u8)> = order[..counts.total()]
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let split = if rank < counts.train {
                0
            } else if rank < counts.train + counts.val {
                1
            } else {
                2
            };
            (i, split)
        })
        .collect();
    chosen.sort_unstable();
    let mut out = manifest.clone();
    out.entries = chosen.iter().map(|&(i, _)| manifest.entries[i].clone()).collect();
    out.splits = Splits::default();
    for (new_idx, &(_, split)) in chosen.iter().enumerate() {
        match split {
            0 => out.splits.train.push(new_idx),
            1 => out.splits.val.push(new_idx),
            _ => out.splits.test.push(new_idx),
        }
    }
    if n > counts.total() {
        out.notes.push(format!("{} entries left unassigned and dropped", n - counts.total()));
    }
    Ok(out)
}

/// Path of `target` (relative to `from_dir`) re-expressed relative to `to_dir`.
fn rebase(from_dir: &Path, target: &str, to_dir: &Path) -> Result<String> {
    let abs_target = std::path::absolute(from_dir.join(target))?;
    let abs_to = std::path::absolute(to_dir)?;
    let rel = pathdiff::diff_paths(&abs_target, &abs_to).unwrap_or(abs_target);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

/// One UNI manifest with the directory its paths are relative to.
pub struct UniSource<'a> {
    pub manifest: &'a DatasetManifest,
    pub dir: &'a Path,
}

/// Draws `pairs_per_dim` pairs from the train and validation splits of each
/// UNI source, never from its test split, and assigns 80% of each draw to
/// training. Paths are rewritten relative to `out_dir`.
pub fn build_multi(sources: &[UniSource<'_>], pairs_per_dim: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if sources.is_empty() {
        return Err(Error::Config("build_multi needs at least one UNI manifest".into()));
    }
    let global_seed = sources[0].manifest.global_seed;
    let mut out = DatasetManifest::empty("MULTI".into(), DimPolicy::Mixed, global_seed);
    out.report_spec = sources[0].manifest.report_spec;
    out.search_spec = sources[0].manifest.search_spec;
    let mut tagged: Vec<(ManifestEntry, bool)> = Vec::new();
    for src in sources {
        let m = src.manifest;
        let DimPolicy::Fixed(size) = m.dim_policy else {
            return Err(Error::Config(format!("{} is not a UNI manifest", m.name)));
        };
        let mut pool: Vec<usize> = if m.splits.train.is_empty() && m.splits.val.is_empty() && m.splits.test.is_empty() {
            (0..m.entries.len()).collect()
        } else {
            m.splits.train.iter().chain(&m.splits.val).copied().collect()
        };
        pool.sort_unstable();
        if pool.len() < pairs_per_dim {
            return Err(Error::Shortfall {
                what: format!("train/val pairs in {}", m.name),
                required: pairs_per_dim,
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::rng::mix64(size as u64));
        pool.shuffle(&mut rng);
        let n_train = (pairs_per_dim as f64 * MULTI_TRAIN_FRACTION).round() as usize;
        for (rank, &i) in pool[..pairs_per_dim].iter().enumerate() {
            let mut e = m.entries[i].clone();
            e.cover_path = rebase(src.dir, &e.cover_path, out_dir)?;
            e.stego_path = match &e.stego_path {
                Some(p) => Some(rebase(src.dir, p, out_dir)?),
                None => None,
            };
            tagged.push((e, rank < n_train));
        }
    }
    tagged.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    for (i, (e, train)) in tagged.into_iter().enumerate() {
        if train {
            out.splits.train.push(i);
        } else {
            out.splits.val.push(i);
        }
        out.entries.push(e);
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EmbedConfig {
    pub sigma: f64,
    /// Entropy tolerance relative to the target payload.
    pub relative_tol: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            relative_tol: DEFAULT_RELATIVE_TOL,
        }
    }
}

/// Embeds every entry at the payload its size maps to in `alpha_table`,
/// writing stegos under `manifest_dir/stegos/`. Entries whose payload
/// exceeds the image's capacity are flagged and left without a stego.
pub fn embed_dataset(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    alpha_table: &BTreeMap<usize, f64>,
    cfg: &EmbedConfig,
) -> Result<DatasetManifest> {
    enum Outcome {
        Done { path: String, bits: f64, alpha: f64 },
        Flagged { alpha: f64, reason: String },
    }
    let entries = &manifest.entries;
    let outcomes = par::map_range(entries.len(), |i| -> Result<Outcome> {
        let e = &entries[i];
        let alpha = *alpha_table
            .get(&e.size)
            .ok_or_else(|| Error::Config(format!("no payload configured for size {}", e.size)))?;
        let cover_path = manifest_dir.join(&e.cover_path);
        let stego_rel = format!("stegos/{}.pgm", e.id);
        let stego_path = manifest_dir.join(&stego_rel);
        if let Some(dir) = stego_path.parent() {
            fs::create_dir_all(dir)?;
        }
        if alpha == 0.0 {
            fs::copy(&cover_path, &stego_path)?;
            return Ok(Outcome::Done {
                path: stego_rel,
                bits: 0.0,
                alpha,
            });
        }
        let cover = read_image(&cover_path)?;
        let costs = compute_cost_map(&cover, cfg.sigma)?;
        let target = alpha * (cover.width() * cover.height()) as f64;
        let plan = match compute_change_probabilities(&costs, target, cfg.relative_tol * target) {
            Ok(plan) => plan,
            Err(err @ (Error::Capacity { .. } | Error::Domain(_))) => {
                log::warn!("entry {} not embedded: {err}", e.id);
                return Ok(Outcome::Flagged {
                    alpha,
                    reason: err.to_string(),
                });
            }
            Err(err) => return Err(err),
        };
        let stego = simulate_embedding(&cover, &plan, e.seed)?;
        write_image(&stego_path, &stego)?;
        Ok(Outcome::Done {
            path: stego_rel,
            bits: plan.realized_bits,
            alpha,
        })
    });
    let mut out = manifest.clone();
    for (e, outcome) in out.entries.iter_mut().zip(outcomes) {
        match outcome? {
            Outcome::Done { path, bits, alpha } => {
                e.stego_path = Some(path);
                e.realized_bits = Some(bits);
                e.alpha = Some(alpha);
                e.flag = None;
            }
            Outcome::Flagged { alpha, reason } => {
                e.stego_path = None;
                e.realized_bits = None;
                e.alpha = Some(alpha);
                e.flag = Some(reason);
            }
        }
    }
    Ok(out)
}

/// Payloads calibrated for the reference detector, by image side.
pub fn reference_alpha_table() -> BTreeMap<usize, f64> {
    crate::calibration::REFERENCE_ALPHA_TABLE.into_iter().collect()
}
