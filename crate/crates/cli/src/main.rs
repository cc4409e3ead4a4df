//! Command-line interface for the veldt ground-deformation toolkit.
//!
//! Every subcommand accepts `--config FILE` (a flat JSON document whose
//! keys mirror the flags; explicit flags win) and writes its resolved
//! configuration beside its outputs, so any run can be reproduced from the
//! artifacts alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use veldt_core::classifier::{train, CnnArch, CnnModel, PatchDataset, PatchSpec, TrainConfig};
use veldt_core::covariogram::{covariance_at, empirical_variogram, fit_exponential_covariance};
use veldt_core::dataset::{center_crop, InputVariant};
use veldt_core::grid::{
    rasterize, read_points_csv, to_grayscale, DenseVelocityGrid, GridSpec, Image8,
    SparseVelocityField,
};
use veldt_core::interp::{delaunay_interpolate, matrix_complete, McParams};
use veldt_core::pipeline::{detect, Detection, DetectOptions};
use veldt_core::synth::{
    generate_dataset, read_manifest, Pass, SceneLabel, SynthConfig,
};
use veldt_core::wrapping::{wrap, WrapConfig};

#[derive(Parser)]
#[command(
    name = "veldt",
    version,
    about = "Detects localized ground deformation in sparse InSAR velocity fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a variogram and fit the exponential covariance model.
    Variogram(VariogramArgs),
    /// Densify a sparse velocity raster (Delaunay or matrix completion).
    Interpolate(InterpolateArgs),
    /// Generate a labeled synthetic training dataset.
    Synth(SynthArgs),
    /// Train the patch classifier from a dataset manifest.
    Train(TrainArgs),
    /// Run the wrap-ensemble detector over velocity maps.
    Detect(DetectArgs),
    /// Rank detections for triage.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = match cli.command {
        Command::Variogram(args) => run_variogram(args),
        Command::Interpolate(args) => run_interpolate(args),
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Detect(args) => run_detect(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

/// Loads the flat JSON config mirror of a subcommand's flags.
fn merge_config<T: DeserializeOwned>(config: &Option<PathBuf>) -> Result<Option<T>> {
    match config {
        None => Ok(None),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let value: T = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            Ok(Some(value))
        }
    }
}

fn write_resolved<T: Serialize>(path: &Path, resolved: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(resolved)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

macro_rules! resolve {
    ($cli:expr, $file:expr, $field:ident, $default:expr) => {
        $cli.$field
            .clone()
            .or_else(|| $file.as_ref().and_then(|f| f.$field.clone()))
            .unwrap_or_else(|| $default)
    };
    ($cli:expr, $file:expr, $field:ident) => {
        $cli.$field
            .clone()
            .or_else(|| $file.as_ref().and_then(|f| f.$field.clone()))
    };
}

// ---------------------------------------------------------------------------
// variogram

#[derive(Args, Clone)]
struct VariogramArgs {
    /// Sparse raster (.f32 + .json sidecar) or points CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Pixel size used to rasterize CSV points, meters.
    #[arg(long)]
    pixel_size_m: Option<f64>,
    #[arg(long)]
    max_dist_km: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    max_pairs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix; writes PREFIX.curve.csv and PREFIX.fit.json.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct VariogramFile {
    input: Option<PathBuf>,
    pixel_size_m: Option<f64>,
    max_dist_km: Option<f64>,
    bins: Option<usize>,
    max_pairs: Option<u64>,
    seed: Option<u64>,
    out_prefix: Option<PathBuf>,
}

#[derive(Serialize)]
struct VariogramResolved {
    input: PathBuf,
    pixel_size_m: f64,
    max_dist_km: f64,
    bins: usize,
    max_pairs: u64,
    seed: u64,
    out_prefix: PathBuf,
}

fn load_field(input: &Path, pixel_size_m: f64) -> Result<SparseVelocityField> {
    if input.extension().is_some_and(|e| e == "csv") {
        let points = read_points_csv(input)?;
        let (min_x, max_x) = points
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let (min_y, max_y) = points
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let width = (((max_x - min_x) / pixel_size_m).floor() as usize + 1).max(1);
        let height = (((max_y - min_y) / pixel_size_m).floor() as usize + 1).max(1);
        let spec = GridSpec::new(
            width,
            height,
            pixel_size_m,
            min_x,
            min_y + height as f64 * pixel_size_m,
        )?;
        let (field, report) = rasterize(&points, &spec)?;
        if report.n_dropped > 0 {
            eprintln!("dropped {} out-of-bounds points", report.n_dropped);
        }
        Ok(field)
    } else {
        Ok(SparseVelocityField::read_raster(input)?)
    }
}

fn run_variogram(args: VariogramArgs) -> Result<()> {
    let file: Option<VariogramFile> = merge_config(&args.config)?;
    let resolved = VariogramResolved {
        input: resolve!(args, file, input).context("--input is required (flag or config)")?,
        pixel_size_m: resolve!(args, file, pixel_size_m, 10.0),
        max_dist_km: resolve!(args, file, max_dist_km, 6.0),
        bins: resolve!(args, file, bins, 30),
        max_pairs: resolve!(args, file, max_pairs, 2_000_000),
        seed: resolve!(args, file, seed, 0),
        out_prefix: resolve!(args, file, out_prefix, PathBuf::from("variogram")),
    };

    let field = load_field(&resolved.input, resolved.pixel_size_m)?;
    let curve = empirical_variogram(
        &field,
        resolved.max_dist_km,
        resolved.bins,
        resolved.max_pairs,
        resolved.seed,
    )?;
    let fit = fit_exponential_covariance(&curve)?;

    let curve_path = suffixed(&resolved.out_prefix, ".curve.csv");
    let mut writer = csv::Writer::from_path(&curve_path)
        .with_context(|| format!("writing {}", curve_path.display()))?;
    writer.write_record(["bin_center_km", "gamma_mm2_yr2", "pair_count", "gamma_fitted"])?;
    for i in 0..curve.bin_centers_km.len() {
        let d = curve.bin_centers_km[i];
        let fitted = fit.sill - covariance_at(&fit, d)?;
        writer.write_record([
            format!("{d}"),
            format!("{}", curve.gamma[i]),
            format!("{}", curve.pair_counts[i]),
            format!("{fitted}"),
        ])?;
    }
    writer.flush()?;
    write_resolved(&suffixed(&resolved.out_prefix, ".fit.json"), &fit)?;
    write_resolved(&suffixed(&resolved.out_prefix, ".config.json"), &resolved)?;
    println!(
        "fit: a = {:.4}, b = {:.4} /km, sill = {:.4}, nugget = {:.4}",
        fit.a, fit.b_per_km, fit.sill, fit.nugget
    );
    Ok(())
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// interpolate

#[derive(Args, Clone)]
struct InterpolateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// dt | mc
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_inner: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct InterpolateFile {
    input: Option<PathBuf>,
    method: Option<String>,
    sigma: Option<f64>,
    tol: Option<f64>,
    max_inner: Option<usize>,
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct InterpolateResolved {
    input: PathBuf,
    method: String,
    sigma: f64,
    tol: f64,
    max_inner: usize,
    output: PathBuf,
}

fn run_interpolate(args: InterpolateArgs) -> Result<()> {
    let file: Option<InterpolateFile> = merge_config(&args.config)?;
    let defaults = McParams::default();
    let resolved = InterpolateResolved {
        input: resolve!(args, file, input).context("--input is required")?,
        method: resolve!(args, file, method, "mc".into()),
        sigma: resolve!(args, file, sigma, defaults.gauss_sigma),
        tol: resolve!(args, file, tol, defaults.tol),
        max_inner: resolve!(args, file, max_inner, defaults.max_inner),
        output: resolve!(args, file, output).context("--output is required")?,
    };

    let field = SparseVelocityField::read_raster(&resolved.input)?;
    let dense = match resolved.method.as_str() {
        "dt" => delaunay_interpolate(&field)?,
        "mc" => {
            let params = McParams {
                gauss_sigma: resolved.sigma,
                tol: resolved.tol,
                max_inner: resolved.max_inner,
                ..McParams::default()
            };
            matrix_complete(&field, &params)?
        }
        other => bail!("unknown method {other:?}; expected dt or mc"),
    };
    dense.write_raster(&resolved.output)?;
    write_resolved(&suffixed(&resolved.output, ".config.json"), &resolved)?;
    println!(
        "interpolated {} -> {} ({})",
        resolved.input.display(),
        resolved.output.display(),
        resolved.method
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args, Clone)]
struct SynthArgs {
    /// point | line
    #[arg(long)]
    class: Option<String>,
    /// Scenes per class (writes 2n scenes).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Scene side, pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    pixel_size_m: Option<f64>,
    /// Skip the Delaunay ablation variant.
    #[arg(long)]
    no_dt: bool,
    /// Skip the matrix-completion variant.
    #[arg(long)]
    no_mc: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    class: Option<String>,
    n: Option<usize>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    size: Option<usize>,
    pixel_size_m: Option<f64>,
}

#[derive(Serialize)]
struct SynthResolved {
    class: String,
    n: usize,
    seed: u64,
    out_dir: PathBuf,
    size: usize,
    pixel_size_m: f64,
    synth: SynthConfig,
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let file: Option<SynthFile> = merge_config(&args.config)?;
    let class = resolve!(args, file, class, "point".into());
    let n = resolve!(args, file, n, 10);
    let seed = resolve!(args, file, seed, 0);
    let out_dir = resolve!(args, file, out_dir, PathBuf::from("synth-out"));
    let size = resolve!(args, file, size, 256);
    let pixel_size_m = resolve!(args, file, pixel_size_m, 10.0);

    let grid = GridSpec::square(size, pixel_size_m)?;
    let mut synth = match class.as_str() {
        "point" => SynthConfig::point_defaults(grid),
        "line" => SynthConfig::line_defaults(grid),
        other => bail!("unknown class {other:?}; expected point or line"),
    };
    synth.variants.dt = !args.no_dt;
    synth.variants.mc = !args.no_mc;

    let resolved = SynthResolved {
        class,
        n,
        seed,
        out_dir: out_dir.clone(),
        size,
        pixel_size_m,
        synth: synth.clone(),
    };
    std::fs::create_dir_all(&out_dir)?;
    write_resolved(&out_dir.join("resolved_config.json"), &resolved)?;
    let records = generate_dataset(&synth, n, seed, &out_dir)?;
    println!(
        "wrote {} scenes and manifest to {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// sparse | dt | mc
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated wrap intervals for training images, mm/yr.
    #[arg(long)]
    wrap_mu: Option<String>,
    /// Phase offsets per interval in the training set.
    #[arg(long)]
    wrap_offsets: Option<usize>,
    /// Classifier input side, pixels (scenes are center-cropped to this).
    #[arg(long)]
    patch_size: Option<usize>,
    /// Output model base path (writes BASE.json + BASE.weights).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    manifest: Option<PathBuf>,
    variant: Option<String>,
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    wrap_mu: Option<String>,
    wrap_offsets: Option<usize>,
    patch_size: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainResolved {
    manifest: PathBuf,
    variant: String,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    wrap_mu: Vec<f64>,
    wrap_offsets: usize,
    patch_size: usize,
    out: PathBuf,
}

fn parse_variant(name: &str) -> Result<InputVariant> {
    match name {
        "sparse" => Ok(InputVariant::Sparse),
        "dt" => Ok(InputVariant::Dt),
        "mc" => Ok(InputVariant::Mc),
        other => bail!("unknown variant {other:?}; expected sparse, dt or mc"),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let file: Option<TrainFile> = merge_config(&args.config)?;
    let resolved = TrainResolved {
        manifest: resolve!(args, file, manifest).context("--manifest is required")?,
        variant: resolve!(args, file, variant, "mc".into()),
        epochs: resolve!(args, file, epochs, 10),
        lr: resolve!(args, file, lr, 0.05),
        momentum: resolve!(args, file, momentum, 0.9),
        batch_size: resolve!(args, file, batch_size, 32),
        seed: resolve!(args, file, seed, 0),
        wrap_mu: parse_intervals(&resolve!(args, file, wrap_mu, "3.5".into()))?,
        wrap_offsets: resolve!(args, file, wrap_offsets, 1),
        patch_size: resolve!(args, file, patch_size, 224),
        out: resolve!(args, file, out, PathBuf::from("model")),
    };
    let variant = parse_variant(&resolved.variant)?;

    let records = read_manifest(&resolved.manifest)?;
    let base = resolved
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut dataset = PatchDataset::default();
    for record in &records {
        let rel = record.files.get(variant.name()).with_context(|| {
            format!(
                "scene {} has no {} raster in the manifest",
                record.index,
                variant.name()
            )
        })?;
        let positive = record.label == SceneLabel::Positive;
        let path = base.join(rel);
        for &mu in &resolved.wrap_mu {
            for k in 0..resolved.wrap_offsets {
                let offset = mu * k as f64 / resolved.wrap_offsets as f64;
                let pixels = match variant {
                    InputVariant::Sparse => {
                        let field = SparseVelocityField::read_raster(&path)?;
                        let mut pixels = ndarray::Array2::<u8>::zeros(field.spec().shape());
                        for (r, c, v) in field.iter_observed() {
                            let w = (v + offset).rem_euclid(mu);
                            let w = if w >= mu { 0.0 } else { w };
                            pixels[[r, c]] =
                                ((w / mu * 256.0).floor() as i64).clamp(0, 255) as u8;
                        }
                        pixels
                    }
                    _ => {
                        let dense = DenseVelocityGrid::read_raster(&path)?;
                        let wrapped = wrap(&dense, mu, offset)?;
                        to_grayscale(&wrapped, mu)?.pixels().clone()
                    }
                };
                dataset.push(center_crop(&pixels, resolved.patch_size)?, positive);
            }
        }
    }

    let arch = CnnArch {
        input_size: resolved.patch_size,
        channels: vec![8, 16, 32],
    };
    let config = TrainConfig {
        learning_rate: resolved.lr,
        momentum: resolved.momentum,
        batch_size: resolved.batch_size,
        epochs: resolved.epochs,
        seed: resolved.seed,
        augment_flips: true,
        augment_rotations: true,
    };
    eprintln!(
        "training on {} patches ({} scenes x {} wraps)",
        dataset.items.len(),
        records.len(),
        resolved.wrap_mu.len() * resolved.wrap_offsets
    );
    let model = train(arch, &dataset, &config)?;
    model.save(&resolved.out)?;
    write_resolved(&suffixed(&resolved.out, ".train_config.json"), &resolved)?;
    println!(
        "model saved to {} (final loss {:.4})",
        resolved.out.display(),
        model.meta.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parse_intervals(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad interval {s:?}"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// detect

#[derive(Args, Clone)]
struct DetectArgs {
    /// Single-look input raster (same as --look asc=PATH).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Repeatable look spec: asc=PATH or desc=PATH.
    #[arg(long = "look")]
    looks: Vec<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    tile: Option<usize>,
    /// Comma-separated wrap intervals, mm/yr.
    #[arg(long)]
    intervals: Option<String>,
    #[arg(long)]
    offsets: Option<usize>,
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DetectFile {
    input: Option<PathBuf>,
    looks: Option<Vec<String>>,
    model: Option<PathBuf>,
    tile: Option<usize>,
    intervals: Option<String>,
    offsets: Option<usize>,
    out_prefix: Option<PathBuf>,
}

#[derive(Serialize)]
struct DetectResolved {
    looks: Vec<String>,
    model: PathBuf,
    tile: usize,
    intervals: Vec<f64>,
    offsets: usize,
    out_prefix: PathBuf,
}

fn probability_quicklook(values: &ndarray::Array2<f64>, spec: &GridSpec) -> Result<Image8> {
    let pixels = values.mapv(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8);
    Ok(Image8::new(*spec, pixels)?)
}

fn run_detect(args: DetectArgs) -> Result<()> {
    let file: Option<DetectFile> = merge_config(&args.config)?;
    let mut look_specs = args.looks.clone();
    if look_specs.is_empty() {
        if let Some(from_file) = file.as_ref().and_then(|f| f.looks.clone()) {
            look_specs = from_file;
        }
    }
    if let Some(input) = resolve!(args, file, input) {
        look_specs.push(format!("asc={}", input.display()));
    }
    if look_specs.is_empty() {
        bail!("no inputs: pass --input or --look asc=PATH/desc=PATH");
    }
    let resolved = DetectResolved {
        looks: look_specs.clone(),
        model: resolve!(args, file, model).context("--model is required")?,
        tile: resolve!(args, file, tile, 512),
        intervals: parse_intervals(&resolve!(args, file, intervals, "14,7,3.5,1.75".into()))?,
        offsets: resolve!(args, file, offsets, 4),
        out_prefix: resolve!(args, file, out_prefix, PathBuf::from("detect")),
    };

    let mut looks = Vec::new();
    for spec_text in &look_specs {
        let (pass_text, path) = spec_text
            .split_once('=')
            .with_context(|| format!("look {spec_text:?} is not PASS=PATH"))?;
        let pass = match pass_text {
            "asc" | "ascending" => Pass::Ascending,
            "desc" | "descending" => Pass::Descending,
            other => bail!("unknown pass {other:?}; expected asc or desc"),
        };
        looks.push((pass, SparseVelocityField::read_raster(Path::new(path))?));
    }

    let model = CnnModel::load(&resolved.model)?;
    let opts = DetectOptions {
        tile: resolved.tile,
        wrap: WrapConfig {
            intervals_mm_yr: resolved.intervals.clone(),
            offsets_per_interval: resolved.offsets,
        },
        patch: PatchSpec {
            patch_size: model.arch().input_size,
            stride: (model.arch().input_size / 8).max(1),
        },
        ..DetectOptions::default()
    };
    let output = detect(&looks, &model, &opts)?;

    let prefix = &resolved.out_prefix;
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let spec = *output.probability.spec();
    veldt_core::grid::write_raster(
        &suffixed(prefix, ".prob.f32"),
        &spec,
        output.probability.values(),
    )?;
    probability_quicklook(output.probability.values(), &spec)?
        .write_pgm(&suffixed(prefix, ".prob.pgm"))?;
    for (pass, dense) in &output.interpolated {
        let tag = match pass {
            Pass::Ascending => "asc",
            Pass::Descending => "desc",
        };
        for &mu in &resolved.intervals {
            let wrapped = wrap(dense, mu, 0.0)?;
            let image = to_grayscale(&wrapped, mu)?;
            image.write_pgm(&suffixed(prefix, &format!(".{tag}.wrapped_mu{mu}.pgm")))?;
        }
    }
    let detections_path = suffixed(prefix, ".detections.json");
    write_resolved(&detections_path, &output.detections)?;
    write_resolved(&suffixed(prefix, ".config.json"), &resolved)?;
    println!(
        "{} detections -> {}",
        output.detections.len(),
        detections_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Args, Clone)]
struct ReportArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Keep the N largest areas.
    #[arg(long)]
    top: Option<usize>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    detections: Option<PathBuf>,
    top: Option<usize>,
    out: Option<PathBuf>,
}

fn run_report(args: ReportArgs) -> Result<()> {
    let file: Option<ReportFile> = merge_config(&args.config)?;
    let detections_path = resolve!(args, file, detections).context("--detections is required")?;
    let top = resolve!(args, file, top, usize::MAX);
    let out = resolve!(args, file, out);

    let text = std::fs::read_to_string(&detections_path)
        .with_context(|| format!("reading {}", detections_path.display()))?;
    let mut detections: Vec<Detection> = serde_json::from_str(&text)?;
    detections.sort_by(|a, b| {
        b.area_km2
            .total_cmp(&a.area_km2)
            .then(b.max_probability.total_cmp(&a.max_probability))
    });
    detections.truncate(top);

    let mut csv_text = String::from("centroid_x_m,centroid_y_m,area_km2,max_p,level\n");
    for d in &detections {
        csv_text.push_str(&format!(
            "{},{},{},{},{}\n",
            d.centroid_m.0, d.centroid_m.1, d.area_km2, d.max_probability, d.threshold_level
        ));
    }
    match out {
        Some(path) => {
            std::fs::write(&path, csv_text)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} rows to {}", detections.len(), path.display());
        }
        None => print!("{csv_text}"),
    }
    Ok(())
}
