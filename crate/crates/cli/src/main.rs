//! `palsim` command-line front end. Every subcommand is a thin wrapper over
//! the library; progress goes to stderr, results to stdout or files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use palsim::dataset::{self, DatasetSpec, MAX_FAILURE_RATE};
use palsim::degrade::{degrade_image, DegradationRecipe};
use palsim::diffraction::{build_stack, spectral_to_rgb, KernelTag, PsfStack, SensorResponse};
use palsim::isp::IspParams;
use palsim::metrics::{self, MtfCurve, Roi};
use palsim::prescription::PRESCRIPTION_ENV;
use palsim::projection::{unfold_annular, CameraModel, DEFAULT_UNFOLD_HEIGHT, DEFAULT_UNFOLD_WIDTH};
use palsim::zernike::PerturbMode;
use palsim::{Execution, Geometry, ImagePlane, OpticalPrescription};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "palsim", version, about = "Wave-optics degradation simulator for panoramic annular lenses")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    /// Seed override; the same seed reproduces outputs bit for bit.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// PSF stack synthesis and inspection.
    #[command(subcommand)]
    Psf(PsfCommand),
    /// Degrade one clean image with a recipe and an RGB stack.
    Degrade(DegradeArgs),
    /// Unfold an annular image onto the cylindrical plane.
    Unfold(UnfoldArgs),
    /// Paired dataset generation.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Quality metrics over a directory of pairs.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// MTF curves from edges, PSFs or the diffraction limit.
    #[command(subcommand)]
    Mtf(MtfCommand),
    /// Degradation recipe files.
    #[command(subcommand)]
    Recipe(RecipeCommand),
    /// Prescription files.
    #[command(subcommand)]
    Prescription(PrescriptionCommand),
}

#[derive(Args)]
struct PrescriptionArg {
    /// Prescription JSON; the reference design when absent.
    #[arg(long, env = PRESCRIPTION_ENV)]
    prescription: Option<PathBuf>,
}

impl PrescriptionArg {
    fn load(&self) -> Result<OpticalPrescription> {
        match &self.prescription {
            Some(p) => OpticalPrescription::load(p).with_context(|| format!("loading prescription {}", p.display())),
            None => Ok(OpticalPrescription::reference()),
        }
    }
}

#[derive(Subcommand)]
enum PsfCommand {
    /// Build the spectral stack into OUT and its RGB collapse into OUT/rgb.
    Build {
        #[command(flatten)]
        prescription: PrescriptionArg,
        #[arg(long)]
        out: PathBuf,
        /// Pupil grid size override.
        #[arg(long)]
        grid: Option<usize>,
        /// Relative coefficient perturbation (uses --seed, default 0).
        #[arg(long)]
        perturb: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Shared)]
        perturb_mode: Mode,
    },
    /// Summarize a stack directory.
    Inspect {
        #[arg(long)]
        stack: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shared,
    PerWavelength,
}

impl From<Mode> for PerturbMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Shared => PerturbMode::SharedAcrossWavelengths,
            Mode::PerWavelength => PerturbMode::PerWavelength,
        }
    }
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    recipe: PathBuf,
    /// Stack directory; a spectral stack is collapsed to RGB on load.
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the physical-information map as PREFIX.raw and PREFIX.json.
    #[arg(long)]
    phys: Option<PathBuf>,
    #[arg(long)]
    blend_margin: Option<usize>,
    #[arg(long)]
    fft_threshold: Option<usize>,
}

#[derive(Args)]
struct UnfoldArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Camera model JSON; the prescription's camera when absent.
    #[arg(long, conflicts_with = "prescription")]
    camera: Option<PathBuf>,
    #[command(flatten)]
    prescription: PrescriptionArg,
    #[arg(long, default_value_t = DEFAULT_UNFOLD_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = DEFAULT_UNFOLD_WIDTH)]
    width: usize,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate degraded/clean pairs; fails when more than 1% of pairs fail.
    Generate(GenerateArgs),
    /// Rebuild one pair from a dataset manifest into a directory.
    Regenerate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        distribution: String,
        #[arg(long)]
        pair: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory of clean source images.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Full dataset spec JSON; the flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[command(flatten)]
    prescription: PrescriptionArg,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// CSV with PSNR, SSIM and edge MTF50 for every pair directory.
    Report {
        /// Directory searched recursively for folders holding the reference and candidate.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "gt.png")]
        reference: String,
        #[arg(long, default_value = "degraded.png")]
        candidate: String,
        /// Slanted-edge region `x,y,width,height`; the full image when absent.
        #[arg(long, value_parser = parse_roi)]
        roi: Option<Roi>,
    },
}

#[derive(Subcommand)]
enum MtfCommand {
    /// Slanted-edge MTF of an image region.
    Edge {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = parse_roi)]
        roi: Option<Roi>,
        /// Approximate edge angle from vertical in degrees.
        #[arg(long, allow_hyphen_values = true)]
        angle: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sagittal and tangential MTF of one stack kernel.
    Psf {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long, default_value_t = 0)]
        fov: usize,
        #[arg(long, default_value_t = 0)]
        tag: usize,
        /// Writes PREFIX_sagittal.csv and PREFIX_tangential.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diffraction-limited MTF of the prescription's aperture.
    Limit {
        #[command(flatten)]
        prescription: PrescriptionArg,
        /// Wavelength in nm; the Strehl wavelength when absent.
        #[arg(long)]
        wavelength: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RecipeCommand {
    /// Write a recipe matching a prescription.
    Init {
        #[command(flatten)]
        prescription: PrescriptionArg,
        #[arg(long)]
        out: PathBuf,
        /// Identity ISP, no noise and unit scale factors.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        shot: Option<f64>,
        #[arg(long)]
        read: Option<f64>,
    },
}

#[derive(Subcommand)]
enum PrescriptionCommand {
    /// Write a prescription, optionally keeping every n-th sample.
    Export {
        #[command(flatten)]
        prescription: PrescriptionArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        fov_step: u16,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        wavelength_step: u16,
    },
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(Roi { x, y, width, height }),
        _ => Err("expected x,y,width,height".into()),
    }
}

/// Pair id, PSNR, SSIM and edge MTF50 when an edge was found.
type Row = (String, f64, f64, Option<f64>);

/// Result of a subcommand: the JSON summary and its human rendering.
struct Summary {
    json: Value,
    text: String,
}

struct Ctx {
    seed: Option<u64>,
    verbose: bool,
    exec: Execution,
}

impl Ctx {
    fn progress(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("palsim: {}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.into()).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        verbose: cli.verbose,
        exec: Execution::Parallel,
    };
    match run(cli.command, &ctx) {
        Ok(s) => {
            if cli.json {
                println!("{}", s.json);
            } else if !s.text.is_empty() {
                println!("{}", s.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            if cli.json {
                eprintln!("{}", json!({ "error": causes[0], "causes": &causes[1..] }));
            } else {
                eprintln!("error: {}", causes[0]);
                for c in &causes[1..] {
                    eprintln!("  caused by: {c}");
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command, ctx: &Ctx) -> Result<Summary> {
    match command {
        Command::Psf(PsfCommand::Build { prescription, out, grid, perturb, perturb_mode }) => {
            psf_build(ctx, prescription.load()?, &out, grid, perturb, perturb_mode.into())
        }
        Command::Psf(PsfCommand::Inspect { stack }) => psf_inspect(&stack),
        Command::Degrade(args) => degrade(ctx, args),
        Command::Unfold(args) => unfold(args),
        Command::Dataset(DatasetCommand::Generate(args)) => dataset_generate(ctx, args),
        Command::Dataset(DatasetCommand::Regenerate { dataset, distribution, pair, out }) => {
            dataset_regenerate(ctx, &dataset, &distribution, &pair, &out)
        }
        Command::Metrics(MetricsCommand::Report { pairs, out, reference, candidate, roi }) => {
            metrics_report(ctx, &pairs, &out, &reference, &candidate, roi)
        }
        Command::Mtf(cmd) => mtf(cmd),
        Command::Recipe(RecipeCommand::Init { prescription, out, identity, shot, read }) => {
            recipe_init(ctx, prescription.load()?, &out, identity, shot, read)
        }
        Command::Prescription(PrescriptionCommand::Export { prescription, out, fov_step, wavelength_step }) => {
            prescription_export(prescription.load()?, &out, fov_step.into(), wavelength_step.into())
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} {} is not a directory", path.display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn psf_build(
    ctx: &Ctx,
    mut p: OpticalPrescription,
    out: &Path,
    grid: Option<usize>,
    perturb: Option<f64>,
    mode: PerturbMode,
) -> Result<Summary> {
    if let Some(g) = grid {
        p.grid_size = g;
        p.validate().context("grid size override")?;
    }
    let field = match perturb {
        Some(f) => p.zernike.perturb_with(f, ctx.seed.unwrap_or(0), mode)?,
        None => p.zernike.clone(),
    };
    ctx.progress(format!(
        "building {} x {} kernels",
        p.fov_samples_deg.len(),
        p.wavelengths_nm.len()
    ));
    let spectral = build_stack(&p, &field, ctx.exec).context("building the spectral stack")?;
    let rgb = spectral_to_rgb(&spectral, &SensorResponse::default_for(&p.wavelengths_nm)?)?;
    spectral.write_dir(out).with_context(|| format!("writing {}", out.display()))?;
    let rgb_dir = out.join("rgb");
    rgb.write_dir(&rgb_dir).with_context(|| format!("writing {}", rgb_dir.display()))?;
    let supports = spectral.supports();
    let json = json!({
        "out": out,
        "rgb": rgb_dir,
        "fov_samples": spectral.n_fov(),
        "wavelengths": spectral.n_tags(),
        "kernels": spectral.kernels().len(),
        "support_min": supports.iter().min(),
        "support_max": supports.iter().max(),
    });
    let text = format!(
        "wrote {} kernels ({} FoVs x {} wavelengths) to {} and the RGB stack to {}",
        spectral.kernels().len(),
        spectral.n_fov(),
        spectral.n_tags(),
        out.display(),
        rgb_dir.display()
    );
    Ok(Summary { json, text })
}

fn load_stack(dir: &Path) -> Result<PsfStack> {
    require_dir(dir, "stack")?;
    PsfStack::read_dir(dir).with_context(|| format!("reading stack {}", dir.display()))
}

fn psf_inspect(dir: &Path) -> Result<Summary> {
    let stack = load_stack(dir)?;
    let supports = stack.supports();
    let tags: Vec<String> = stack
        .tags()
        .iter()
        .map(|t| match t {
            KernelTag::Channel(c) => format!("{c:?}"),
            KernelTag::WavelengthNm(w) => format!("{w} nm"),
        })
        .collect();
    let fovs = stack.fov_samples();
    let json = json!({
        "rgb": stack.is_rgb(),
        "fov_samples": stack.n_fov(),
        "fov_range_deg": [fovs[0], fovs[fovs.len() - 1]],
        "tags": stack.tags(),
        "kernels": stack.kernels().len(),
        "supports": supports,
        "illumination": stack.illumination(),
    });
    let mut text = format!(
        "{} stack: {} FoVs over [{}, {}] deg, tags {}\n",
        if stack.is_rgb() { "RGB" } else { "spectral" },
        stack.n_fov(),
        fovs[0],
        fovs[fovs.len() - 1],
        tags.join(", ")
    );
    text.push_str("fov_deg,support_px,illumination");
    for (i, f) in fovs.iter().enumerate() {
        text.push_str(&format!("\n{f},{},{}", supports[i], stack.illumination()[i]));
    }
    Ok(Summary { json, text })
}

fn degrade(ctx: &Ctx, a: DegradeArgs) -> Result<Summary> {
    require_file(&a.input, "input image")?;
    require_file(&a.recipe, "recipe")?;
    let mut stack = load_stack(&a.stack)?;
    let text = fs::read_to_string(&a.recipe).with_context(|| format!("reading {}", a.recipe.display()))?;
    let mut recipe = DegradationRecipe::from_json_str(&text).with_context(|| format!("parsing {}", a.recipe.display()))?;
    if let Some(s) = ctx.seed {
        recipe.noise_seed = s;
    }
    if let Some(m) = a.blend_margin {
        recipe.convolve.blend_margin = m;
    }
    if let Some(t) = a.fft_threshold {
        recipe.convolve.fft_threshold = t;
    }
    if !stack.is_rgb() {
        ctx.progress("collapsing the spectral stack to RGB");
        let wl: Vec<f64> = stack
            .tags()
            .iter()
            .filter_map(|t| match t {
                KernelTag::WavelengthNm(w) => Some(*w),
                KernelTag::Channel(_) => None,
            })
            .collect();
        stack = spectral_to_rgb(&stack, &SensorResponse::default_for(&wl)?)?;
    }
    let clean = ImagePlane::load(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let out = degrade_image(&clean, &recipe, &stack, ctx.exec).context("degrading")?;
    out.image.save_png8(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let phys = match &a.phys {
        Some(prefix) => {
            let (raw, side) = (prefix.with_extension("raw"), prefix.with_extension("json"));
            out.physical_info.write(&raw, &side)?;
            Some(json!({ "raw": raw, "json": side }))
        }
        None => None,
    };
    let (h, w, _) = out.image.shape();
    let json = json!({ "out": a.out, "height": h, "width": w, "noise_seed": recipe.noise_seed, "phys": phys });
    Ok(Summary { json, text: format!("wrote {w}x{h} degraded image to {}", a.out.display()) })
}

fn unfold(a: UnfoldArgs) -> Result<Summary> {
    require_file(&a.input, "input image")?;
    let model = match &a.camera {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            CameraModel::from_json_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => a.prescription.load()?.camera,
    };
    let mut img = ImagePlane::load(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    img.geometry = Geometry::Annular;
    let u = unfold_annular(&img, &model, a.height, a.width)?;
    u.image.save_png8(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let json = json!({ "out": a.out, "height": a.height, "width": a.width, "clipped_samples": u.clipped });
    let text = format!(
        "wrote {}x{} strip to {} ({} samples outside the source)",
        a.width,
        a.height,
        a.out.display(),
        u.clipped
    );
    Ok(Summary { json, text })
}

fn dataset_generate(ctx: &Ctx, a: GenerateArgs) -> Result<Summary> {
    require_dir(&a.source, "source")?;
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => DatasetSpec::new(&a.source, &a.out, 0),
    };
    spec.source_dir = a.source.clone();
    spec.output_dir = a.out.clone();
    if let Some(s) = ctx.seed {
        spec.master_seed = s;
    }
    if a.prescription.prescription.is_some() {
        spec.prescription = a.prescription.prescription.clone();
    }
    spec.n_train_distributions = a.train.unwrap_or(spec.n_train_distributions);
    spec.n_val_distributions = a.val.unwrap_or(spec.n_val_distributions);
    spec.target_height = a.height.unwrap_or(spec.target_height);
    spec.target_width = a.width.unwrap_or(spec.target_width);
    spec.perturbation_fraction = a.fraction.unwrap_or(spec.perturbation_fraction);
    spec.validate().context("dataset spec")?;
    let prescription = match &spec.prescription {
        Some(p) => OpticalPrescription::load(p).with_context(|| format!("loading prescription {}", p.display()))?,
        None => OpticalPrescription::reference(),
    };
    ctx.progress(format!(
        "generating {} train and {} val distributions from {}",
        spec.n_train_distributions,
        spec.n_val_distributions,
        spec.source_dir.display()
    ));
    let m = dataset::generate_with(&spec, &prescription, ctx.exec).context("generating the dataset")?;
    for f in &m.failures {
        let pair = f.pair_id.as_deref().unwrap_or("*");
        eprintln!("palsim: {}/{pair} failed: {}", f.distribution, f.error);
    }
    let json = json!({
        "out": spec.output_dir,
        "pairs": m.pair_count(),
        "failures": m.failures.len(),
        "failure_rate": m.failure_rate(),
        "skipped": m.skipped.len(),
        "distributions": m.distributions.iter().map(|d| &d.id).collect::<Vec<_>>(),
    });
    if !m.succeeded() {
        bail!(
            "{} of {} pairs failed ({:.2}% > {}%); see {}",
            m.failures.len(),
            m.pair_count() + m.failures.len(),
            100.0 * m.failure_rate(),
            100.0 * MAX_FAILURE_RATE,
            spec.output_dir.join(dataset::MANIFEST_FILE).display()
        );
    }
    let text = format!(
        "wrote {} pairs in {} distributions to {} ({} sources skipped, {} failures)",
        m.pair_count(),
        m.distributions.len(),
        spec.output_dir.display(),
        m.skipped.len(),
        m.failures.len()
    );
    Ok(Summary { json, text })
}

fn dataset_regenerate(ctx: &Ctx, dataset_dir: &Path, dist: &str, pair: &str, out: &Path) -> Result<Summary> {
    require_dir(dataset_dir, "dataset")?;
    let r = dataset::regenerate_pair(dataset_dir, dist, pair, ctx.exec)
        .with_context(|| format!("regenerating {dist}/{pair}"))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    r.gt.save_png8(&out.join("gt.png"))?;
    r.degraded.image.save_png8(&out.join("degraded.png"))?;
    r.degraded
        .physical_info
        .write(&out.join("phys.raw"), &out.join("phys.json"))?;
    Ok(Summary {
        json: json!({ "out": out, "distribution": dist, "pair": pair }),
        text: format!("rebuilt {dist}/{pair} into {}", out.display()),
    })
}

fn metrics_report(
    ctx: &Ctx,
    pairs: &Path,
    out: &Path,
    reference: &str,
    candidate: &str,
    roi: Option<Roi>,
) -> Result<Summary> {
    require_dir(pairs, "pairs")?;
    let mut dirs = Vec::new();
    for entry in walkdir::WalkDir::new(pairs).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", pairs.display()))?;
        let d = entry.path();
        if entry.file_type().is_dir() && d.join(reference).is_file() && d.join(candidate).is_file() {
            dirs.push(d.to_path_buf());
        }
    }
    ensure!(
        !dirs.is_empty(),
        "no directory under {} holds both {reference} and {candidate}",
        pairs.display()
    );
    ctx.progress(format!("evaluating {} pairs", dirs.len()));
    let rows = ctx.exec.map(&dirs, |d| -> Result<Row> {
        let id = d.strip_prefix(pairs).unwrap_or(d);
        let id = if id.as_os_str().is_empty() {
            ".".to_string()
        } else {
            id.components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/")
        };
        let gt = ImagePlane::load(&d.join(reference)).with_context(|| format!("loading {id}/{reference}"))?;
        let cand = ImagePlane::load(&d.join(candidate)).with_context(|| format!("loading {id}/{candidate}"))?;
        let psnr = metrics::psnr(&gt, &cand).with_context(|| format!("PSNR of {id}"))?;
        let ssim = metrics::ssim(&gt, &cand).with_context(|| format!("SSIM of {id}"))?;
        let mtf50 = metrics::mtf_slanted_edge(&cand, roi.unwrap_or_else(|| Roi::full(&cand)), None)
            .ok()
            .map(|c| metrics::mtf50(&c));
        Ok((id, psnr, ssim, mtf50))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("pair_id,psnr_db,ssim,mtf50_cyc_per_px\n");
    for (id, psnr, ssim, mtf50) in &rows {
        let mtf = mtf50.map(|m| m.to_string()).unwrap_or_default();
        csv.push_str(&format!("{id},{psnr},{ssim},{mtf}\n"));
    }
    write_text(out, &csv)?;
    let mean = |f: &dyn Fn(&Row) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (mean_psnr, mean_ssim) = (mean(&|r| r.1), mean(&|r| r.2));
    let edges = rows.iter().filter(|r| r.3.is_some()).count();
    let json = json!({
        "out": out,
        "pairs": rows.len(),
        "mean_psnr_db": if mean_psnr.is_finite() { json!(mean_psnr) } else { json!("inf") },
        "mean_ssim": mean_ssim,
        "edges_found": edges,
    });
    let text = format!(
        "{} pairs: mean PSNR {mean_psnr:.3} dB, mean SSIM {mean_ssim:.4}, {edges} edges measured; wrote {}",
        rows.len(),
        out.display()
    );
    Ok(Summary { json, text })
}

fn curve_json(c: &MtfCurve) -> Value {
    json!({ "mtf50": metrics::mtf50(c), "frequencies": c.frequencies, "modulation": c.modulation })
}

fn mtf(cmd: MtfCommand) -> Result<Summary> {
    match cmd {
        MtfCommand::Edge { input, roi, angle, out } => {
            require_file(&input, "input image")?;
            let img = ImagePlane::load(&input).with_context(|| format!("loading {}", input.display()))?;
            let curve = metrics::mtf_slanted_edge(&img, roi.unwrap_or_else(|| Roi::full(&img)), angle)?;
            if let Some(o) = &out {
                write_text(o, &curve.to_csv())?;
            }
            Ok(Summary {
                text: format!("MTF50 {:.4} cy/px", metrics::mtf50(&curve)),
                json: curve_json(&curve),
            })
        }
        MtfCommand::Psf { stack, fov, tag, out } => {
            let stack = load_stack(&stack)?;
            ensure!(fov < stack.n_fov(), "FoV index {fov} out of range (stack has {})", stack.n_fov());
            ensure!(tag < stack.n_tags(), "tag index {tag} out of range (stack has {})", stack.n_tags());
            let pair = metrics::mtf_from_psf(stack.kernel(fov, tag))?;
            if let Some(prefix) = &out {
                let name = prefix.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                write_text(&prefix.with_file_name(format!("{name}_sagittal.csv")), &pair.sagittal.to_csv())?;
                write_text(&prefix.with_file_name(format!("{name}_tangential.csv")), &pair.tangential.to_csv())?;
            }
            let (s, t) = (metrics::mtf50(&pair.sagittal), metrics::mtf50(&pair.tangential));
            Ok(Summary {
                json: json!({
                    "fov_deg": stack.fov_samples()[fov],
                    "sagittal": curve_json(&pair.sagittal),
                    "tangential": curve_json(&pair.tangential),
                }),
                text: format!("MTF50 sagittal {s:.4} cy/px, tangential {t:.4} cy/px"),
            })
        }
        MtfCommand::Limit { prescription, wavelength, out } => {
            let p = prescription.load()?;
            let wl = wavelength.unwrap_or(p.strehl_wavelength_nm);
            let cutoff = metrics::diffraction_cutoff(p.aperture_mm, wl, p.pupil_to_image_mm, p.pixel_pitch_um);
            let curve = metrics::diffraction_limit_mtf(p.aperture_mm, wl, p.pupil_to_image_mm, p.pixel_pitch_um)?;
            if let Some(o) = &out {
                write_text(o, &curve.to_csv())?;
            }
            let mut json = curve_json(&curve);
            json["cutoff_cyc_per_px"] = json!(cutoff);
            json["wavelength_nm"] = json!(wl);
            Ok(Summary {
                json,
                text: format!("cutoff {cutoff:.4} cy/px at {wl} nm, MTF50 {:.4} cy/px", metrics::mtf50(&curve)),
            })
        }
    }
}

fn recipe_init(
    ctx: &Ctx,
    p: OpticalPrescription,
    out: &Path,
    identity: bool,
    shot: Option<f64>,
    read: Option<f64>,
) -> Result<Summary> {
    if identity && (shot.is_some() || read.is_some()) {
        bail!("--identity cannot be combined with noise settings");
    }
    let seed = ctx.seed.unwrap_or(0);
    let recipe = if identity {
        let mut r = DegradationRecipe::identity(&p.fov_samples_deg);
        r.noise_seed = seed;
        r
    } else {
        let mut isp = IspParams::default();
        isp.noise.shot = shot.unwrap_or(0.0);
        isp.noise.read = read.unwrap_or(0.0);
        isp.validate()?;
        DegradationRecipe::for_prescription(&p, isp, seed)?
    };
    write_text(out, &serde_json::to_string_pretty(&recipe)?)?;
    Ok(Summary {
        json: json!({ "out": out, "fov_samples": p.fov_samples_deg.len(), "identity": identity }),
        text: format!("wrote recipe to {}", out.display()),
    })
}

fn prescription_export(p: OpticalPrescription, out: &Path, fov_step: usize, wl_step: usize) -> Result<Summary> {
    let fovs: Vec<usize> = (0..p.fov_samples_deg.len()).step_by(fov_step).collect();
    let wls: Vec<usize> = (0..p.wavelengths_nm.len()).step_by(wl_step).collect();
    let p = if fov_step == 1 && wl_step == 1 { p } else { p.subset(&fovs, &wls)? };
    write_text(out, &p.to_json_string()?)?;
    Ok(Summary {
        json: json!({ "out": out, "fov_samples": fovs.len(), "wavelengths": wls.len() }),
        text: format!(
            "wrote prescription with {} FoVs and {} wavelengths to {}",
            fovs.len(),
            wls.len(),
            out.display()
        ),
    })
}
