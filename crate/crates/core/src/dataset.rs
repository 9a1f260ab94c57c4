//! Paired dataset generation.
//!
//! Clean images are centre-cropped to the target aspect ratio, area-resized,
//! and degraded under several perturbed aberration distributions. Every
//! random stream derives from one master seed, so a rerun reproduces the
//! output files byte for byte and any single pair can be rebuilt from the
//! manifest alone.
//!
//! Layout:
//!
//! ```text
//! {out}/manifest.json
//! {out}/prescription.json
//! {out}/{split}_{index:02}/{split}/{pair_id}/gt.png
//! {out}/{split}_{index:02}/{split}/{pair_id}/degraded.png
//! {out}/{split}_{index:02}/{split}/{pair_id}/phys.raw
//! {out}/{split}_{index:02}/{split}/{pair_id}/phys.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{degrade_image, DegradationRecipe, Degraded};
use crate::diffraction::{build_stack, spectral_to_rgb, PsfStack, SensorResponse};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::image::{ColorState, ImagePlane};
use crate::isp::{IspParams, NoiseParams};
use crate::metrics::strehl_curve;
use crate::prescription::OpticalPrescription;
use crate::seed;
use crate::zernike::{PerturbMode, ZernikeField};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRESCRIPTION_FILE: &str = "prescription.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Failure share above which a run is reported as failed.
pub const MAX_FAILURE_RATE: f64 = 0.01;

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_NOISE_SEED: u64 = 3;
const STREAM_NOISE_PARAMS: u64 = 4;

/// Per-image noise parameters are drawn uniformly from these closed ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRanges {
    pub shot: [f64; 2],
    pub read: [f64; 2],
}

impl Default for NoiseRanges {
    fn default() -> Self {
        Self {
            shot: [1e-4, 1e-3],
            read: [1e-6, 1e-5],
        }
    }
}

impl NoiseRanges {
    fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("shot", self.shot), ("read", self.read)] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!("{name} noise range [{lo}, {hi}] is invalid")));
            }
        }
        Ok(())
    }

    fn sample(&self, seed: u64) -> NoiseParams {
        let mut rng = seed::rng(seed);
        let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let shot = draw(self.shot);
        let read = draw(self.read);
        NoiseParams { shot, read }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source_dir: PathBuf,
    pub output_dir: PathBuf,
    pub target_height: usize,
    pub target_width: usize,
    pub n_train_distributions: usize,
    pub n_val_distributions: usize,
    pub perturbation_fraction: f64,
    #[serde(default)]
    pub perturb_mode: PerturbMode,
    pub master_seed: u64,
    /// Prescription file; the environment default or the reference design
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescription: Option<PathBuf>,
    #[serde(default)]
    pub isp: IspParams,
    #[serde(default)]
    pub noise: NoiseRanges,
}

impl DatasetSpec {
    pub fn new(source_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, master_seed: u64) -> Self {
        Self {
            source_dir: source_dir.into(),
            output_dir: output_dir.into(),
            target_height: 512,
            target_width: 1024,
            n_train_distributions: 3,
            n_val_distributions: 3,
            perturbation_fraction: 0.25,
            perturb_mode: PerturbMode::default(),
            master_seed,
            prescription: None,
            isp: IspParams::default(),
            noise: NoiseRanges::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::invalid("target size must be positive"));
        }
        if self.n_train_distributions + self.n_val_distributions == 0 {
            return Err(Error::invalid("at least one distribution is required"));
        }
        if !(self.perturbation_fraction >= 0.0 && self.perturbation_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "perturbation fraction {} must lie in [0, 1)",
                self.perturbation_fraction
            )));
        }
        self.isp.validate()?;
        self.noise.validate()
    }

    /// Train and val distribution seeds; fails if the two sets intersect.
    pub fn distribution_seeds(&self) -> Result<(Vec<u64>, Vec<u64>)> {
        let train: Vec<u64> = (0..self.n_train_distributions as u64)
            .map(|d| seed::derive(self.master_seed, &[STREAM_TRAIN, d]))
            .collect();
        let val: Vec<u64> = (0..self.n_val_distributions as u64)
            .map(|d| seed::derive(self.master_seed, &[STREAM_VAL, d]))
            .collect();
        if val.iter().any(|v| train.contains(v)) {
            return Err(Error::invalid("train and val distribution seeds collide"));
        }
        Ok((train, val))
    }

    fn load_prescription(&self) -> Result<OpticalPrescription> {
        match &self.prescription {
            Some(p) => OpticalPrescription::load(p),
            None => OpticalPrescription::from_env_or_reference(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Separable area-weighted resize (box filter with fractional overlaps).
pub fn area_resize(image: &ImagePlane, height: usize, width: usize) -> Result<ImagePlane> {
    let (h, w, nc) = image.shape();
    if height == 0 || width == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let wy = area_weights(h, height);
    let wx = area_weights(w, width);
    let src = image.data();
    let mut tmp = vec![0.0; h * width * nc];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            for c in 0..nc {
                tmp[(y * width + ox) * nc + c] = taps.iter().map(|&(x, t)| t * src[(y * w + x) * nc + c]).sum();
            }
        }
    }
    let mut out = vec![0.0; height * width * nc];
    for (oy, taps) in wy.iter().enumerate() {
        for x in 0..width * nc {
            out[oy * width * nc + x] = taps.iter().map(|&(y, t)| t * tmp[y * width * nc + x]).sum();
        }
    }
    ImagePlane::new(height, width, nc, out, image.color, image.geometry)
}

/// Source taps of each output sample for an `n_in → n_out` area resize.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Centre-crops to the target aspect ratio and area-resizes to the target.
///
/// The crop keeps the full width when the source is relatively taller than
/// the target and the full height otherwise. Upscaling is never done.
pub fn prepare_clean(image: &ImagePlane, target_height: usize, target_width: usize) -> Result<ImagePlane> {
    if image.color != ColorState::Srgb || image.channels() != 3 {
        return Err(Error::invalid("clean sources must be 3-channel sRGB"));
    }
    if target_height == 0 || target_width == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let (h, w, _) = image.shape();
    let ratio = target_width as f64 / target_height as f64;
    let crop_w = w.min((h as f64 * ratio).floor() as usize);
    let crop_h = h.min((crop_w as f64 / ratio).round() as usize);
    if crop_w < target_width || crop_h < target_height {
        return Err(Error::SourceTooSmall {
            width: w,
            height: h,
            target_width,
            target_height,
        });
    }
    let (y0, x0) = ((h - crop_h) / 2, (w - crop_w) / 2);
    let cropped = ImagePlane::from_fn(crop_h, crop_w, 3, image.color, image.geometry, |y, x, c| {
        image.get(y0 + y, x0 + x, c)
    })?;
    area_resize(&cropped, target_height, target_width)
}

/// A prepared clean image and whether the source was grayscale.
#[derive(Clone, Debug)]
pub struct PreparedSource {
    pub image: ImagePlane,
    pub grayscale: bool,
}

/// Loads an 8-bit source (grayscale is replicated to RGB) and prepares it.
pub fn load_clean(path: &Path, target_height: usize, target_width: usize) -> Result<PreparedSource> {
    let img = ::image::open(path)?;
    let (plane, grayscale) = ImagePlane::from_dynamic(&img, ColorState::Srgb)?;
    Ok(PreparedSource {
        image: prepare_clean(&plane, target_height, target_width)?,
        grayscale,
    })
}

/// Image files (png, jpg, jpeg, bmp, tif, tiff) directly inside `dir`,
/// sorted by name.
pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    const EXT: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXT.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub pair_id: String,
    pub file: String,
    pub grayscale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub noise_seed: u64,
    pub noise: NoiseParams,
    /// Paths relative to the output directory.
    pub gt: String,
    pub degraded: String,
    pub phys_raw: String,
    pub phys_json: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRecord {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    /// Strehl ratio per FoV sample.
    pub strehl: Vec<f64>,
    pub pairs: Vec<PairRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub distribution: String,
    pub pair_id: Option<String>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub source_dir: PathBuf,
    pub target_height: usize,
    pub target_width: usize,
    pub perturbation_fraction: f64,
    pub perturb_mode: PerturbMode,
    pub prescription_file: String,
    /// ISP parameters before per-image noise is filled in.
    pub isp: IspParams,
    pub noise_ranges: NoiseRanges,
    pub fov_samples_deg: Vec<f64>,
    pub strehl_wavelength_nm: f64,
    /// Strehl ratio per FoV of the unperturbed design.
    pub standard_strehl: Vec<f64>,
    pub sources: Vec<SourceRecord>,
    pub skipped: Vec<SkipRecord>,
    pub distributions: Vec<DistributionRecord>,
    pub failures: Vec<FailureRecord>,
}

impl Manifest {
    pub fn pair_count(&self) -> usize {
        self.distributions.iter().map(|d| d.pairs.len()).sum()
    }

    /// Failed items over attempted items.
    pub fn failure_rate(&self) -> f64 {
        let failed = self.failures.len();
        let attempted = failed + self.pair_count();
        if attempted == 0 {
            0.0
        } else {
            failed as f64 / attempted as f64
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure_rate() <= MAX_FAILURE_RATE
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn distribution(&self, id: &str) -> Option<&DistributionRecord> {
        self.distributions.iter().find(|d| d.id == id)
    }
}

fn distribution_id(split: Split, index: usize) -> String {
    format!("{}_{index:02}", split.name())
}

fn pair_dir(split: Split, dist_id: &str, pair_id: &str) -> String {
    format!("{dist_id}/{}/{pair_id}", split.name())
}

fn pair_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into())
}

/// Per-channel PSF stack of one coefficient table.
pub fn rgb_stack(prescription: &OpticalPrescription, field: &ZernikeField, exec: Execution) -> Result<PsfStack> {
    let spectral = build_stack(prescription, field, exec)?;
    spectral_to_rgb(&spectral, &SensorResponse::default_for(&prescription.wavelengths_nm)?)
}

fn pair_recipe(
    prescription: &OpticalPrescription,
    base_isp: &IspParams,
    fraction: f64,
    dist_seed: u64,
    noise: NoiseParams,
    noise_seed: u64,
) -> Result<DegradationRecipe> {
    let isp = IspParams {
        noise,
        ..base_isp.clone()
    };
    let mut recipe = DegradationRecipe::for_prescription(prescription, isp, noise_seed)?;
    recipe.perturbation_fraction = fraction;
    recipe.perturbation_seed = dist_seed;
    Ok(recipe)
}

fn write_pair(out: &Path, record: &PairRecord, gt: &ImagePlane, degraded: &Degraded) -> Result<()> {
    let dir = out.join(Path::new(&record.gt).parent().unwrap_or(Path::new("")));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    gt.save_png8(&out.join(&record.gt))?;
    degraded.image.save_png8(&out.join(&record.degraded))?;
    degraded
        .physical_info
        .write(&out.join(&record.phys_raw), &out.join(&record.phys_json))
}

/// Generates the dataset described by `spec`, reading the prescription it
/// names.
pub fn generate(spec: &DatasetSpec, exec: Execution) -> Result<Manifest> {
    let prescription = spec.load_prescription()?;
    generate_with(spec, &prescription, exec)
}

/// Generates the dataset with an explicit prescription.
///
/// Item-level errors are recorded in the manifest and generation continues;
/// only setup errors (bad spec, unreadable source directory, unwritable
/// output) abort.
pub fn generate_with(spec: &DatasetSpec, prescription: &OpticalPrescription, exec: Execution) -> Result<Manifest> {
    spec.validate()?;
    prescription.validate()?;
    let (train_seeds, val_seeds) = spec.distribution_seeds()?;
    let out = &spec.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let prescription_path = out.join(PRESCRIPTION_FILE);
    fs::write(&prescription_path, prescription.to_json_string()?).map_err(|e| Error::io(&prescription_path, e))?;

    let files = list_sources(&spec.source_dir)?;
    let loaded = exec.map(&files, |p| load_clean(p, spec.target_height, spec.target_width));
    let mut sources = Vec::new();
    let mut cleans = Vec::new();
    let mut skipped = Vec::new();
    for (path, result) in files.iter().zip(loaded) {
        let file = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match result {
            Ok(p) => {
                sources.push(SourceRecord {
                    pair_id: pair_id_of(path),
                    file,
                    grayscale: p.grayscale,
                });
                cleans.push(p.image);
            }
            Err(e) => skipped.push(SkipRecord {
                file,
                reason: e.to_string(),
            }),
        }
    }

    let standard_strehl = strehl_curve(&prescription.zernike, prescription, exec)?;
    let plan: Vec<(Split, usize, u64)> = train_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| (Split::Train, i, s))
        .chain(val_seeds.iter().enumerate().map(|(i, &s)| (Split::Val, i, s)))
        .collect();

    let mut distributions = Vec::new();
    let mut failures = Vec::new();
    for (split, index, dist_seed) in plan {
        let id = distribution_id(split, index);
        let setup = (|| -> Result<(Vec<f64>, PsfStack)> {
            let field = prescription
                .zernike
                .perturb_with(spec.perturbation_fraction, dist_seed, spec.perturb_mode)?;
            let strehl = strehl_curve(&field, prescription, exec)?;
            let stack = rgb_stack(prescription, &field, exec)?;
            Ok((strehl, stack))
        })();
        let (strehl, stack) = match setup {
            Ok(v) => v,
            Err(e) => {
                failures.extend(sources.iter().map(|s| FailureRecord {
                    distribution: id.clone(),
                    pair_id: Some(s.pair_id.clone()),
                    error: e.to_string(),
                }));
                continue;
            }
        };
        let results = exec.map_indices(cleans.len(), |i| -> Result<PairRecord> {
            let noise_seed = seed::derive(spec.master_seed, &[STREAM_NOISE_SEED, dist_seed, i as u64]);
            let noise = spec
                .noise
                .sample(seed::derive(spec.master_seed, &[STREAM_NOISE_PARAMS, dist_seed, i as u64]));
            let recipe = pair_recipe(prescription, &spec.isp, spec.perturbation_fraction, dist_seed, noise, noise_seed)?;
            // Pairs are processed in parallel already; keep the inner work sequential.
            let degraded = degrade_image(&cleans[i], &recipe, &stack, Execution::Sequential)?;
            let dir = pair_dir(split, &id, &sources[i].pair_id);
            let record = PairRecord {
                pair_id: sources[i].pair_id.clone(),
                noise_seed,
                noise,
                gt: format!("{dir}/gt.png"),
                degraded: format!("{dir}/degraded.png"),
                phys_raw: format!("{dir}/phys.raw"),
                phys_json: format!("{dir}/phys.json"),
            };
            write_pair(out, &record, &cleans[i], &degraded)?;
            Ok(record)
        });
        let mut pairs = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(p) => pairs.push(p),
                Err(e) => failures.push(FailureRecord {
                    distribution: id.clone(),
                    pair_id: Some(sources[i].pair_id.clone()),
                    error: e.to_string(),
                }),
            }
        }
        distributions.push(DistributionRecord {
            id,
            split,
            index,
            seed: dist_seed,
            strehl,
            pairs,
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        master_seed: spec.master_seed,
        source_dir: spec.source_dir.clone(),
        target_height: spec.target_height,
        target_width: spec.target_width,
        perturbation_fraction: spec.perturbation_fraction,
        perturb_mode: spec.perturb_mode,
        prescription_file: PRESCRIPTION_FILE.into(),
        isp: spec.isp.clone(),
        noise_ranges: spec.noise,
        fov_samples_deg: prescription.fov_samples_deg.clone(),
        strehl_wavelength_nm: prescription.wavelengths_nm[prescription.strehl_wavelength_index()],
        standard_strehl,
        sources,
        skipped,
        distributions,
        failures,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A rebuilt pair: the prepared clean image and its degradation.
#[derive(Clone, Debug)]
pub struct RegeneratedPair {
    pub gt: ImagePlane,
    pub degraded: Degraded,
}

/// Rebuilds one pair from a dataset directory using only its manifest,
/// prescription copy and the original source image.
pub fn regenerate_pair(dataset_dir: &Path, distribution_id: &str, pair_id: &str, exec: Execution) -> Result<RegeneratedPair> {
    let manifest = Manifest::load(&dataset_dir.join(MANIFEST_FILE))?;
    let prescription = OpticalPrescription::load(&dataset_dir.join(&manifest.prescription_file))?;
    let dist = manifest
        .distribution(distribution_id)
        .ok_or_else(|| Error::invalid(format!("no distribution {distribution_id:?} in manifest")))?;
    let pair = dist
        .pairs
        .iter()
        .find(|p| p.pair_id == pair_id)
        .ok_or_else(|| Error::invalid(format!("no pair {pair_id:?} in {distribution_id}")))?;
    let source = manifest
        .sources
        .iter()
        .find(|s| s.pair_id == pair_id)
        .ok_or_else(|| Error::invalid(format!("no source recorded for {pair_id:?}")))?;
    let gt = load_clean(&manifest.source_dir.join(&source.file), manifest.target_height, manifest.target_width)?.image;
    let field = prescription
        .zernike
        .perturb_with(manifest.perturbation_fraction, dist.seed, manifest.perturb_mode)?;
    let stack = rgb_stack(&prescription, &field, exec)?;
    let recipe = pair_recipe(
        &prescription,
        &manifest.isp,
        manifest.perturbation_fraction,
        dist.seed,
        pair.noise,
        pair.noise_seed,
    )?;
    let degraded = degrade_image(&gt, &recipe, &stack, exec)?;
    Ok(RegeneratedPair { gt, degraded })
}
