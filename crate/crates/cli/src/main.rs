//! `nnid`: build nearly-nested image datasets from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nnid::calibration::{self, CalibrationConfig, DatasetProbe, DetectorKind, ProbeConfig};
use nnid::cost_model::{compute_cost_map, CostMap, DEFAULT_SIGMA};
use nnid::dataset::{self, BuildConfig, DatasetManifest, EmbedConfig, SplitCounts, UniSource};
use nnid::dilated_conv::{dilated_conv2d, DilatedKernel, FeatureMap};
use nnid::embedding::{compute_change_probabilities, simulate_embedding, DEFAULT_RELATIVE_TOL};
use nnid::histogram::{build_histogram, BinningSpec, Transform};
use nnid::image::{read_image, write_image};
use nnid::rawmap::RawMap;
use nnid::smart_crop::{recomputed_distance, smart_crop_2};
use nnid::{synth, Error};

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "nnid", version, about = "Nearly-nested image datasets for steganalysis")]
struct Cli {
    /// Global seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Multiplier applied to the default dataset sizes and split counts.
    #[arg(long, global = true, default_value_t = 1.0)]
    scale: f64,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the cost map of a grayscale image.
    Costmap {
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Histogram of a cost map as JSON.
    Hist {
        costmap: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        bins: BinArgs,
    },
    /// Find the crop whose cost histogram best matches the whole map.
    Crop {
        costmap: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[command(flatten)]
        bins: BinArgs,
        #[arg(short, long)]
        output: PathBuf,
        /// Mother image the cost map came from; enables --recompute-final and --write-crop.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Also report the distance with costs recomputed on the cropped pixels.
        #[arg(long, requires = "image")]
        recompute_final: bool,
        /// Write the cropped pixels here.
        #[arg(long, requires = "image")]
        write_crop: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Simulate embedding: one image, or every entry of a manifest.
    Embed(EmbedArgs),
    /// Search the payload at which a detector reaches a target accuracy.
    Calibrate(CalibrateArgs),
    /// Build one UNI dataset per size from a directory of mother images.
    BuildNnid(BuildArgs),
    /// Mix pairs from UNI datasets into a MULTI dataset.
    BuildMulti {
        /// UNI manifests to draw from.
        #[arg(long = "uni", required = true)]
        uni: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pairs drawn per dimension (default 4000 times --scale).
        #[arg(long)]
        pairs_per_dim: Option<usize>,
    },
    /// Same-difficulty summary of one or more manifests.
    Report {
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Dilated convolution of a raw map with a raw square kernel.
    Dconv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a synthetic mother corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::MOTHER_COUNT)]
        count: usize,
        #[arg(long, default_value_t = synth::MOTHER_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = synth::MOTHER_HEIGHT)]
        height: usize,
    },
}

#[derive(Args)]
struct BinArgs {
    /// Number of bins (excluding the wet bin).
    #[arg(long)]
    bins: Option<usize>,
    /// Lower edge, in log10 units unless --linear.
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    /// Bin raw cost values instead of their log10.
    #[arg(long)]
    linear: bool,
    /// Clamp wet pixels into the top bin instead of a bin of their own.
    #[arg(long)]
    no_wet_bin: bool,
}

impl BinArgs {
    fn spec(&self, default: BinningSpec) -> nnid::Result<BinningSpec> {
        let (lo, hi) = default.range();
        BinningSpec::new(
            self.bins.unwrap_or(default.bin_count()),
            if self.linear { Transform::Linear } else { default.transform() },
            self.lo.unwrap_or(lo),
            self.hi.unwrap_or(hi),
            !self.no_wet_bin && default.has_wet_bin(),
        )
    }
}

#[derive(Args)]
struct EmbedArgs {
    cover: Option<PathBuf>,
    costmap: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    alpha: Option<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Embed every entry of this manifest and rewrite it (or write to -o).
    #[arg(long, conflicts_with_all = ["cover", "costmap"])]
    manifest: Option<PathBuf>,
    /// Payload per size, e.g. `256=0.4,512=0.3204`.
    #[arg(long, requires = "manifest")]
    alpha_table: Option<String>,
    /// Entropy tolerance relative to the target payload.
    #[arg(long, default_value_t = DEFAULT_RELATIVE_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = calibration::DEFAULT_TARGET)]
    target: f64,
    #[arg(long, default_value_t = calibration::DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = calibration::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Detector evaluations averaged per probe.
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    /// `builtin`, `synthetic[:slope]` or `cmd:<template>`.
    #[arg(long, default_value = "builtin")]
    detector: String,
    /// Seconds before an external detector is killed.
    #[arg(long, default_value_t = 3600)]
    timeout: u64,
    /// Pairs per probe during the search; the chosen payload is re-probed on all.
    #[arg(long)]
    probe_pairs: Option<usize>,
    /// Scratch space for stegos handed to external detectors.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    /// Directory of mother images (PGM or 8-bit grayscale PNG).
    #[arg(long)]
    mothers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = dataset::DEFAULT_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Bins of the search histogram.
    #[arg(long, default_value_t = BinningSpec::search().bin_count())]
    bins: usize,
    #[arg(long, default_value_t = dataset::DEFAULT_RANDOM_CROPS)]
    random_crops: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Fail instead of falling back to proportional splits when there are
    /// too few crops for the scaled protocol.
    #[arg(long)]
    strict_splits: bool,
}

fn parse_alpha_table(s: &str) -> anyhow::Result<BTreeMap<usize, f64>> {
    let mut table = BTreeMap::new();
    for item in s.split(',').filter(|t| !t.trim().is_empty()) {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("alpha table item '{item}' is not size=alpha"))?;
        let size: usize = k.trim().parse().map_err(|_| Error::Config(format!("bad size '{k}'")))?;
        let alpha: f64 = v.trim().parse().map_err(|_| Error::Config(format!("bad payload '{v}'")))?;
        table.insert(size, alpha);
    }
    Ok(table)
}

/// Reference payloads where known, the square-root law from 0.4 at 256 elsewhere.
fn default_alpha_table(sizes: impl IntoIterator<Item = usize>) -> nnid::Result<BTreeMap<usize, f64>> {
    let reference = dataset::reference_alpha_table();
    sizes
        .into_iter()
        .map(|s| Ok((s, reference.get(&s).copied().map_or_else(|| calibration::srl_seed(s), Ok)?)))
        .collect()
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_costs(path: &Path) -> nnid::Result<CostMap> {
    CostMap::from_raw(&RawMap::read(path)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if !(cli.scale > 0.0 && cli.scale.is_finite()) {
        return Err(Error::Config(format!("--scale must be positive, got {}", cli.scale)).into());
    }
    match cli.command {
        Command::Costmap { image, output, sigma } => {
            let img = read_image(&image)?;
            let costs = compute_cost_map(&img, sigma)?;
            costs.to_raw().write(&output)?;
            log::info!("wrote {}x{} cost map to {}", costs.width(), costs.height(), output.display());
        }
        Command::Hist { costmap, output, bins } => {
            let costs = load_costs(&costmap)?;
            let hist = build_histogram(costs.costs(), &bins.spec(BinningSpec::report())?)?;
            write_json(&output, &hist)?;
        }
        Command::Crop {
            costmap,
            size,
            stride,
            bins,
            output,
            image,
            recompute_final,
            write_crop,
            sigma,
        } => {
            let costs = load_costs(&costmap)?;
            let spec = bins.spec(BinningSpec::search())?;
            let crop = smart_crop_2(&costs, size, stride, &spec)?;
            let mut value = serde_json::to_value(&crop)?;
            if let Some(path) = image {
                let mother = read_image(&path)?;
                if (mother.width(), mother.height()) != (costs.width(), costs.height()) {
                    return Err(Error::Dimension(format!(
                        "image is {}x{} but cost map is {}x{}",
                        mother.width(),
                        mother.height(),
                        costs.width(),
                        costs.height()
                    ))
                    .into());
                }
                if recompute_final {
                    let d = recomputed_distance(&mother, &costs, &crop, &spec, sigma)?;
                    value["recomputed_distance"] = serde_json::json!(d);
                }
                if let Some(out) = write_crop {
                    write_image(&out, &mother.crop(crop.x, crop.y, size, size)?)?;
                }
            }
            write_json(&output, &value)?;
            println!("x={} y={} distance={}", crop.x, crop.y, crop.distance);
        }
        Command::Embed(args) => embed(args, cli.seed)?,
        Command::Calibrate(args) => calibrate(args)?,
        Command::BuildNnid(args) => build_nnid(args, cli.seed, cli.scale)?,
        Command::BuildMulti {
            uni,
            out,
            pairs_per_dim,
        } => {
            let pairs = match pairs_per_dim {
                Some(p) => p,
                None => (dataset::DEFAULT_PAIRS_PER_DIM as f64 * cli.scale).round() as usize,
            };
            let loaded: Vec<DatasetManifest> = uni.iter().map(|p| DatasetManifest::load(p)).collect::<Result<_, _>>()?;
            let sources: Vec<UniSource> = loaded
                .iter()
                .zip(&uni)
                .map(|(manifest, p)| UniSource {
                    manifest,
                    dir: manifest_dir(p),
                })
                .collect();
            let multi = dataset::build_multi(&sources, pairs, cli.seed, &out)?;
            multi.save(&out.join(MANIFEST_FILE))?;
            println!("MULTI: {} pairs ({} train, {} val)", multi.entries.len(), multi.splits.train.len(), multi.splits.val.len());
        }
        Command::Report { manifests, output } => {
            let mut reports = Vec::new();
            for path in &manifests {
                let m = DatasetManifest::load(path)?;
                match m.difficulty_report() {
                    Some(r) => {
                        println!(
                            "{:<10} n={:<5} smart={:.6} center={:.6} random={:.6} (search bins; report bins: {:.6} {:.6} {:.6})",
                            r.name, r.entries, r.smart.search, r.center.search, r.random.search, r.smart.report, r.center.report, r.random.report
                        );
                        reports.push(r);
                    }
                    None => println!("{:<10} empty", m.name),
                }
            }
            if let Some(out) = output {
                write_json(&out, &reports)?;
            }
        }
        Command::Dconv {
            input,
            kernel,
            dilation,
            output,
        } => {
            let z = FeatureMap::from_raw(&RawMap::read(&input)?)?;
            let k = RawMap::read(&kernel)?;
            if k.width != k.height {
                return Err(Error::Dimension(format!("kernel must be square, got {}x{}", k.width, k.height)).into());
            }
            let taps = k.values.iter().map(|&v| v as f64).collect();
            let kernel = DilatedKernel::new(k.width, taps, dilation)?;
            dilated_conv2d(&z, &kernel)?.to_raw().write(&output)?;
        }
        Command::Synth {
            out,
            count,
            width,
            height,
        } => {
            let paths = synth::write_corpus(&out, count, width, height, cli.seed)?;
            println!("wrote {} mothers to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn embed(args: EmbedArgs, seed: u64) -> anyhow::Result<()> {
    if let Some(path) = args.manifest {
        let manifest = DatasetManifest::load(&path)?;
        let table = match &args.alpha_table {
            Some(s) => parse_alpha_table(s)?,
            None => default_alpha_table(manifest.entries.iter().map(|e| e.size))?,
        };
        let cfg = EmbedConfig {
            sigma: args.sigma,
            relative_tol: args.tol,
        };
        let out_path = args.output.unwrap_or_else(|| path.clone());
        if manifest_dir(&out_path) != manifest_dir(&path) {
            bail!(Error::Config("an embedded manifest must stay next to its covers".into()));
        }
        let embedded = dataset::embed_dataset(&manifest, manifest_dir(&path), &table, &cfg)?;
        let flagged = embedded.entries.iter().filter(|e| e.flag.is_some()).count();
        embedded.save(&out_path)?;
        println!("{}: {} stegos, {} flagged", embedded.name, embedded.entries.len() - flagged, flagged);
        return Ok(());
    }
    let (Some(cover), Some(costmap), Some(alpha), Some(output)) = (args.cover, args.costmap, args.alpha, args.output) else {
        bail!(Error::Config("embed needs <cover> <costmap> --alpha F -o <stego>, or --manifest".into()));
    };
    let img = read_image(&cover)?;
    let costs = load_costs(&costmap)?;
    if (img.width(), img.height()) != (costs.width(), costs.height()) {
        bail!(Error::Dimension("cover and cost map sizes differ".into()));
    }
    if !(0.0..=nnid::embedding::TERNARY_CAPACITY).contains(&alpha) {
        bail!(Error::Domain(format!("relative payload {alpha} outside [0, log2 3]")));
    }
    if alpha == 0.0 {
        write_image(&output, &img)?;
        println!("realized_bits=0");
        return Ok(());
    }
    let target = alpha * (img.width() * img.height()) as f64;
    let plan = compute_change_probabilities(&costs, target, args.tol * target)?;
    let stego = simulate_embedding(&img, &plan, seed)?;
    write_image(&output, &stego)?;
    println!("lambda={} realized_bits={} target_bits={}", plan.lambda, plan.realized_bits, plan.target_bits);
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let mut detector: DetectorKind = args.detector.parse()?;
    if let DetectorKind::External(cmd) = &mut detector {
        cmd.timeout = Duration::from_secs(args.timeout);
    }
    let work_dir = args
        .work_dir
        .unwrap_or_else(|| manifest_dir(&args.output).join(format!("calibrate_{}", args.dim)));
    let probe_cfg = ProbeConfig {
        probe_pairs: args.probe_pairs,
        sigma: DEFAULT_SIGMA,
        work_dir,
    };
    let mut probe = DatasetProbe::new(&manifest, &args.manifest, args.dim, detector, &probe_cfg)?;
    let cfg = CalibrationConfig {
        target: args.target,
        tolerance: args.tol,
        max_iter: args.max_iter,
        repeats: args.repeats,
    };
    let result = calibration::calibrate_dataset(&mut probe, &cfg)?;
    write_json(&args.output, &result)?;
    println!(
        "alpha={} accuracy={} iterations={} converged={}",
        result.alpha, result.achieved_accuracy, result.iterations, result.converged
    );
    for w in &result.warnings {
        log::warn!("{w}");
    }
    if !result.converged {
        bail!(Error::Convergence {
            iterations: result.iterations,
            detail: format!(
                "best probe alpha={} accuracy={} for target {}",
                result.alpha, result.achieved_accuracy, cfg.target
            ),
        });
    }
    Ok(())
}

fn build_nnid(args: BuildArgs, seed: u64, scale: f64) -> anyhow::Result<()> {
    let search = BinningSpec::log_bins(args.bins);
    let cfg = BuildConfig {
        global_seed: seed,
        sizes: args.sizes,
        stride: args.stride,
        sigma: args.sigma,
        search_spec: search,
        report_spec: BinningSpec::report(),
        random_crops: args.random_crops,
    };
    let manifests = dataset::build_nnid(&args.mothers, &args.out, &cfg)?;
    let counts = SplitCounts::STANDARD.scaled(scale)?;
    for m in manifests {
        let available = m.entries.len();
        let (chosen, note) = if available >= counts.total() {
            (counts, None)
        } else if args.strict_splits {
            return Err(Error::Shortfall {
                what: format!("crops in {} for the scaled split protocol", m.name),
                required: counts.total(),
                available,
            }
            .into());
        } else {
            (
                SplitCounts::proportional(available),
                Some(format!(
                    "only {available} crops for {} requested pairs; splits use the same proportions over all crops",
                    counts.total()
                )),
            )
        };
        let mut split = dataset::assemble_splits(&m, chosen, seed)?;
        if let Some(n) = note {
            log::warn!("{}: {n}", m.name);
            split.notes.push(n);
        }
        split.validate()?;
        let path = args.out.join(&m.name).join(MANIFEST_FILE);
        split.save(&path)?;
        println!(
            "{}: {} crops ({} train, {} val, {} test) -> {}",
            split.name,
            split.entries.len(),
            split.splits.train.len(),
            split.splits.val.len(),
            split.splits.test.len(),
            path.display()
        );
    }
    Ok(())
}

/// Exit status for a failure: the first library error in the chain decides.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("NNID_LOG").init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
