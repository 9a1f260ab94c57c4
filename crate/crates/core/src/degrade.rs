//! Full degradation pipeline and the physical-information maps.
//!
//! A clean unfolded-plane image goes through horizontal unfolding resampling,
//! the inverse ISP, a stripe-wise spatially variant convolution with
//! FoV-dependent RGB kernels and illumination gain, then the forward ISP
//! (which injects sensor noise).

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffraction::PsfStack;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fft::Fft2;
use crate::image::{ColorState, Geometry, ImagePlane};
use crate::isp::{forward_isp, invert_isp, IspParams};
use crate::prescription::OpticalPrescription;
use crate::projection::{deform_psf, scale_profile, unfold_resample, RowAssignment, ScaleProfile};

pub const DEFAULT_BLEND_MARGIN: usize = 4;
pub const DEFAULT_FFT_THRESHOLD: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvolveOptions {
    /// Rows over which neighbouring stripes cross-fade.
    pub blend_margin: usize,
    /// Kernels with a side above this use the FFT path.
    pub fft_threshold: usize,
}

impl Default for ConvolveOptions {
    fn default() -> Self {
        Self {
            blend_margin: DEFAULT_BLEND_MARGIN,
            fft_threshold: DEFAULT_FFT_THRESHOLD,
        }
    }
}

/// One concrete degradation: everything besides the clean image and the
/// kernel stack that the output depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    /// Prescription the stack was built from, informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescription: Option<String>,
    #[serde(default)]
    pub perturbation_fraction: f64,
    #[serde(default)]
    pub perturbation_seed: u64,
    pub isp: IspParams,
    pub noise_seed: u64,
    pub scale_profile: ScaleProfile,
    /// Row-to-FoV map; derived from the image height when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<RowAssignment>,
    #[serde(default)]
    pub convolve: ConvolveOptions,
}

impl DegradationRecipe {
    /// Recipe whose scale profile follows the prescription's camera model.
    pub fn for_prescription(prescription: &OpticalPrescription, isp: IspParams, noise_seed: u64) -> Result<Self> {
        Ok(Self {
            prescription: None,
            perturbation_fraction: 0.0,
            perturbation_seed: 0,
            isp,
            noise_seed,
            scale_profile: scale_profile(&prescription.camera, &prescription.fov_samples_deg)?,
            assignment: None,
            convolve: ConvolveOptions::default(),
        })
    }

    /// Delta-free recipe: identity ISP, no noise, unit scale factors.
    pub fn identity(fov_samples_deg: &[f64]) -> Self {
        Self {
            prescription: None,
            perturbation_fraction: 0.0,
            perturbation_seed: 0,
            isp: IspParams::identity(),
            noise_seed: 0,
            scale_profile: ScaleProfile::uniform(fov_samples_deg, fov_samples_deg[0]),
            assignment: None,
            convolve: ConvolveOptions::default(),
        }
    }

    pub fn assignment_for(&self, height: usize) -> Result<RowAssignment> {
        match &self.assignment {
            Some(a) if a.height() == height => Ok(a.clone()),
            Some(a) => Err(Error::Configuration(format!(
                "recipe assigns {} rows but the image has {height}",
                a.height()
            ))),
            None => RowAssignment::linear(height, &self.scale_profile.fov_samples_deg),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-row encoding of kernel height, kernel width and scale factor, each
/// divided by its maximum over the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalInfoMap {
    height: usize,
    width: usize,
    /// `(h, w, 3)` row-major.
    data: Vec<f64>,
    pub normalizers: [f64; 3],
}

pub const PHYS_PLANES: [&str; 3] = ["kernel_height", "kernel_width", "scale_factor"];

#[derive(Debug, Serialize, Deserialize)]
pub struct PhysicalInfoSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    pub planes: Vec<String>,
    pub normalizers: [f64; 3],
}

impl PhysicalInfoMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, plane: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + plane]
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn sidecar(&self) -> PhysicalInfoSidecar {
        PhysicalInfoSidecar {
            shape: [self.height, self.width, 3],
            dtype: "float32".into(),
            byte_order: "little".into(),
            planes: PHYS_PLANES.iter().map(|s| s.to_string()).collect(),
            normalizers: self.normalizers,
        }
    }

    /// Writes `raw_path` (f32 LE) and `json_path` (sidecar).
    pub fn write(&self, raw_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(raw_path, self.to_f32_bytes()).map_err(|e| Error::io(raw_path, e))?;
        fs::write(json_path, serde_json::to_string_pretty(&self.sidecar())?)
            .map_err(|e| Error::io(json_path, e))?;
        Ok(())
    }

    pub fn read(raw_path: &Path, json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let side: PhysicalInfoSidecar = serde_json::from_str(&text)?;
        let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
        let [h, w, c] = side.shape;
        if c != 3 || bytes.len() != h * w * 3 * 4 {
            return Err(Error::Format {
                path: raw_path.to_path_buf(),
                message: format!("expected {h}x{w}x3 float32 samples"),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
            normalizers: side.normalizers,
        })
    }
}

/// Builds the map for an image of `height x width` from a (deformed) stack.
pub fn physical_info(
    stack: &PsfStack,
    profile: &ScaleProfile,
    assignment: &RowAssignment,
    width: usize,
) -> Result<PhysicalInfoMap> {
    if profile.factors.len() != stack.n_fov() {
        return Err(Error::invalid("scale profile and stack disagree on FoV count"));
    }
    if assignment.max_index() >= stack.n_fov() {
        return Err(Error::invalid("assignment refers to a FoV outside the stack"));
    }
    let sizes: Vec<(usize, usize)> = (0..stack.n_fov())
        .map(|f| {
            (0..stack.n_tags()).fold((0, 0), |(h, w), t| {
                let k = stack.kernel(f, t);
                (h.max(k.height()), w.max(k.width()))
            })
        })
        .collect();
    let max_h = sizes.iter().map(|s| s.0).max().unwrap_or(1) as f64;
    let max_w = sizes.iter().map(|s| s.1).max().unwrap_or(1) as f64;
    let max_s = profile.max_factor();
    let height = assignment.height();
    let mut data = Vec::with_capacity(height * width * 3);
    for &fi in assignment.rows() {
        let px = [
            sizes[fi].0 as f64 / max_h,
            sizes[fi].1 as f64 / max_w,
            profile.factors[fi] / max_s,
        ];
        for _ in 0..width {
            data.extend_from_slice(&px);
        }
    }
    Ok(PhysicalInfoMap {
        height,
        width,
        data,
        normalizers: [max_h, max_w, max_s],
    })
}

/// Per-row stripe blend weights: a box of `margin + 1` rows over the stripe
/// labels, so weights sum to one and cross-fade linearly at boundaries.
fn blend_weights(labels: &[usize], n_stripes: usize, margin: usize) -> Vec<Vec<(usize, f64)>> {
    let h = labels.len() as isize;
    let lo = (margin / 2) as isize;
    let hi = (margin - margin / 2) as isize;
    let norm = (margin + 1) as f64;
    (0..h)
        .map(|r| {
            let mut ids: Vec<usize> = Vec::new();
            let mut counts: Vec<usize> = Vec::new();
            for q in r - lo..=r + hi {
                let s = labels[q.clamp(0, h - 1) as usize];
                match ids.iter().position(|&i| i == s) {
                    Some(p) => counts[p] += 1,
                    None => {
                        ids.push(s);
                        counts.push(1);
                    }
                }
            }
            debug_assert!(ids.iter().all(|&i| i < n_stripes));
            ids.into_iter()
                .zip(counts)
                .map(|(i, c)| (i, c as f64 / norm))
                .collect()
        })
        .collect()
}

/// Channel planes of an interleaved image.
fn planes(image: &ImagePlane) -> Vec<Vec<f64>> {
    (0..image.channels()).map(|c| image.channel(c)).collect()
}

/// True convolution of rows `[r0, r1)` of `plane` (`h x w`) with a kernel,
/// replicate-padded vertically and circular horizontally. Returns
/// `(r1 - r0) x w` values.
fn convolve_rows_spatial(
    plane: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; (r1 - r0) * w];
    for y in r0..r1 {
        let dst = &mut out[(y - r0) * w..(y - r0 + 1) * w];
        for i in 0..kh {
            let sy = (y as isize - (i as isize - ch)).clamp(0, h as isize - 1) as usize;
            let src = &plane[sy * w..(sy + 1) * w];
            for j in 0..kw {
                let k = kernel[i * kw + j];
                if k == 0.0 {
                    continue;
                }
                // dst[x] += k * src[(x - dx) mod w]
                let dx = (j as isize - cw).rem_euclid(w as isize) as usize;
                let split = dx;
                for (d, s) in dst[split..].iter_mut().zip(&src[..w - split]) {
                    *d += k * s;
                }
                for (d, s) in dst[..split].iter_mut().zip(&src[w - split..]) {
                    *d += k * s;
                }
            }
        }
    }
    out
}

/// Same contract as [`convolve_rows_spatial`], evaluated with one 2-D FFT
/// over a replicate-padded block that is circular across columns.
fn convolve_rows_fft(
    plane: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    r0: usize,
    r1: usize,
) -> Vec<f64> {
    let ch = (kh / 2) as isize;
    let cw = (kw / 2) as isize;
    let rows = (r1 - r0) + kh - 1;
    let mut block = vec![Complex64::default(); rows * w];
    for t in 0..rows {
        let sy = (r0 as isize + t as isize - ch).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            block[t * w + x] = Complex64::new(plane[sy * w + x], 0.0);
        }
    }
    let mut kern = vec![Complex64::default(); rows * w];
    for i in 0..kh {
        for j in 0..kw {
            let col = (j as isize - cw).rem_euclid(w as isize) as usize;
            kern[i * w + col] += kernel[i * kw + j];
        }
    }
    let fwd = Fft2::forward(rows, w);
    fwd.process(&mut block);
    fwd.process(&mut kern);
    for (b, k) in block.iter_mut().zip(&kern) {
        *b *= k;
    }
    Fft2::inverse(rows, w).process(&mut block);
    let scale = 1.0 / (rows * w) as f64;
    let mut out = Vec::with_capacity((r1 - r0) * w);
    for t in kh - 1..rows {
        out.extend(block[t * w..(t + 1) * w].iter().map(|v| v.re * scale));
    }
    out
}

/// Stripe-wise spatially variant convolution.
///
/// Rows sharing a FoV form a stripe; every stripe is convolved with its own
/// kernel (per channel) using neighbouring rows as context, scaled by the
/// FoV's illumination, and stripes are cross-faded over `blend_margin` rows.
pub fn patchwise_convolve(
    raw: &ImagePlane,
    stack: &PsfStack,
    assignment: &RowAssignment,
    options: ConvolveOptions,
    exec: Execution,
) -> Result<ImagePlane> {
    let (h, w, nc) = raw.shape();
    if assignment.height() != h {
        return Err(Error::Configuration(format!(
            "assignment covers {} rows, image has {h}",
            assignment.height()
        )));
    }
    if assignment.max_index() >= stack.n_fov() {
        return Err(Error::Configuration(format!(
            "assignment refers to FoV {} but the stack has {}",
            assignment.max_index(),
            stack.n_fov()
        )));
    }
    if stack.n_tags() != nc && stack.n_tags() != 1 {
        return Err(Error::Configuration(format!(
            "{} kernels per FoV for a {nc}-channel image",
            stack.n_tags()
        )));
    }
    for k in stack.kernels() {
        if k.height() > h || k.width() > w {
            return Err(Error::Configuration(format!(
                "{}x{} kernel exceeds the {h}x{w} image",
                k.height(),
                k.width()
            )));
        }
    }
    let stripes = assignment.stripes();
    let labels: Vec<usize> = stripes
        .iter()
        .enumerate()
        .flat_map(|(i, &(a, b, _))| std::iter::repeat_n(i, b - a))
        .collect();
    let weights = blend_weights(&labels, stripes.len(), options.blend_margin);
    // Rows each stripe contributes to.
    let mut extent = vec![(usize::MAX, 0usize); stripes.len()];
    for (r, ws) in weights.iter().enumerate() {
        for &(s, _) in ws {
            extent[s].0 = extent[s].0.min(r);
            extent[s].1 = extent[s].1.max(r + 1);
        }
    }
    let src = planes(raw);
    let contributions = exec.map_indices(stripes.len(), |s| {
        let (r0, r1) = extent[s];
        let fi = stripes[s].2;
        let gain = stack.illumination()[fi];
        (0..nc)
            .map(|c| {
                let k = stack.kernel(fi, if stack.n_tags() == 1 { 0 } else { c });
                let (kh, kw) = (k.height(), k.width());
                let mut v = if kh.max(kw) > options.fft_threshold {
                    convolve_rows_fft(&src[c], h, w, k.data(), kh, kw, r0, r1)
                } else {
                    convolve_rows_spatial(&src[c], h, w, k.data(), kh, kw, r0, r1)
                };
                if gain != 1.0 {
                    v.iter_mut().for_each(|x| *x *= gain);
                }
                v
            })
            .collect::<Vec<_>>()
    });
    let mut out = vec![0.0; h * w * nc];
    for (s, conv) in contributions.iter().enumerate() {
        let (r0, r1) = extent[s];
        for r in r0..r1 {
            let Some(&(_, wt)) = weights[r].iter().find(|(i, _)| *i == s) else {
                continue;
            };
            for (c, plane) in conv.iter().enumerate() {
                let row = &plane[(r - r0) * w..(r - r0 + 1) * w];
                for (x, v) in row.iter().enumerate() {
                    out[(r * w + x) * nc + c] += wt * v;
                }
            }
        }
    }
    Ok(raw.with_data(out, nc, raw.color))
}

/// Output of [`degrade_image`].
#[derive(Clone, Debug)]
pub struct Degraded {
    pub image: ImagePlane,
    pub physical_info: PhysicalInfoMap,
}

/// Clean sRGB image to degraded sRGB image plus physical-information map.
pub fn degrade_image(
    clean: &ImagePlane,
    recipe: &DegradationRecipe,
    stack: &PsfStack,
    exec: Execution,
) -> Result<Degraded> {
    if clean.color != ColorState::Srgb {
        return Err(Error::invalid("clean image must be sRGB"));
    }
    if clean.geometry != Geometry::PerspectiveUnfolded {
        return Err(Error::invalid("clean image must be on the unfolded plane"));
    }
    if recipe.scale_profile.factors.len() != stack.n_fov() {
        return Err(Error::Configuration(format!(
            "scale profile has {} FoVs, stack has {}",
            recipe.scale_profile.factors.len(),
            stack.n_fov()
        )));
    }
    let assignment = recipe.assignment_for(clean.height())?;
    let resampled = unfold_resample(clean, &recipe.scale_profile, &assignment)?;
    let raw = invert_isp(&resampled, &recipe.isp)?;
    let factors = &recipe.scale_profile.factors;
    let deformed = stack.map_kernels(exec, |fi, k| Ok(deform_psf(k, factors[fi])?.kernel))?;
    let blurred = patchwise_convolve(&raw, &deformed, &assignment, recipe.convolve, exec)?;
    let image = forward_isp(&blurred, &recipe.isp, recipe.noise_seed)?;
    let physical_info = physical_info(&deformed, &recipe.scale_profile, &assignment, clean.width())?;
    Ok(Degraded {
        image,
        physical_info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffraction::{Channel, KernelTag, PsfKernel};
    use crate::seed;
    use rand::Rng;

    fn rgb_tags() -> Vec<KernelTag> {
        Channel::ALL.iter().map(|&c| KernelTag::Channel(c)).collect()
    }

    fn uniform_stack(n_fov: usize, kernel: &[f64], size: usize, illum: f64) -> PsfStack {
        let fovs: Vec<f64> = (0..n_fov).map(|i| 30.0 + i as f64).collect();
        let kernels = fovs
            .iter()
            .flat_map(|&f| {
                Channel::ALL.iter().map(move |&c| {
                    PsfKernel::new(size, size, kernel.to_vec(), f, KernelTag::Channel(c), 1.0).unwrap()
                })
            })
            .collect();
        PsfStack::new(fovs, rgb_tags(), kernels, vec![illum; n_fov]).unwrap()
    }

    fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
        let c = (size / 2) as f64;
        let v: Vec<f64> = (0..size * size)
            .map(|i| {
                let (r, col) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(r * r + col * col) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = seed::rng(seed);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        ImagePlane::new(h, w, 3, data, ColorState::LinearRgb, Geometry::PerspectiveUnfolded).unwrap()
    }

    /// Direct full-image convolution with the same boundary rules.
    fn global_convolution(img: &ImagePlane, k: &[f64], size: usize) -> ImagePlane {
        let (h, w, nc) = img.shape();
        let c = (size / 2) as isize;
        ImagePlane::from_fn(h, w, nc, img.color, img.geometry, |y, x, ch| {
            let mut acc = 0.0;
            for i in 0..size {
                for j in 0..size {
                    let sy = (y as isize - (i as isize - c)).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize - (j as isize - c)).rem_euclid(w as isize) as usize;
                    acc += k[i * size + j] * img.get(sy, sx, ch);
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn blend_weights_partition_unity() {
        let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2, 2];
        for m in [0, 1, 4, 5] {
            let w = blend_weights(&labels, 3, m);
            for row in &w {
                let s: f64 = row.iter().map(|x| x.1).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        let w = blend_weights(&labels, 3, 0);
        assert!(w.iter().zip(labels).all(|(r, l)| r.len() == 1 && r[0].0 == l));
    }

    #[test]
    fn delta_stack_is_identity() {
        let img = random_image(23, 31, 1);
        let stack = uniform_stack(4, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 3, 1.0);
        let a = RowAssignment::linear(23, stack.fov_samples()).unwrap();
        let out = patchwise_convolve(&img, &stack, &a, ConvolveOptions::default(), Execution::Sequential).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - i).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_kernels_equal_global_convolution() {
        let img = random_image(40, 57, 2);
        let k = gaussian(7, 1.3);
        let stack = uniform_stack(9, &k, 7, 1.0);
        let a = RowAssignment::linear(40, stack.fov_samples()).unwrap();
        let expect = global_convolution(&img, &k, 7);
        for threshold in [0, 15] {
            let opts = ConvolveOptions {
                blend_margin: 4,
                fft_threshold: threshold,
            };
            let out = patchwise_convolve(&img, &stack, &a, opts, Execution::Parallel).unwrap();
            let diff = out
                .data()
                .iter()
                .zip(expect.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "threshold {threshold}: {diff}");
        }
    }

    #[test]
    fn horizontal_wrap_around() {
        let mut img = ImagePlane::filled(9, 20, 3, 0.0, ColorState::LinearRgb, Geometry::PerspectiveUnfolded).unwrap();
        for c in 0..3 {
            img.set(4, 19, c, 1.0);
        }
        let mut k = vec![0.0; 25];
        k[2 * 5..3 * 5].fill(0.2);
        let stack = uniform_stack(1, &k, 5, 1.0);
        let out = patchwise_convolve(&img, &stack, &RowAssignment::uniform(9, 0), ConvolveOptions::default(), Execution::Sequential).unwrap();
        for x in [17, 18, 19, 0, 1] {
            assert!((out.get(4, x, 0) - 0.2).abs() < 1e-12, "column {x}");
        }
        assert_eq!(out.get(4, 2, 0), 0.0);
    }

    #[test]
    fn illumination_scales_output() {
        let img = random_image(10, 12, 3);
        let stack = uniform_stack(2, &[1.0], 1, 0.5);
        let a = RowAssignment::linear(10, stack.fov_samples()).unwrap();
        let out = patchwise_convolve(&img, &stack, &a, ConvolveOptions::default(), Execution::Sequential).unwrap();
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn oversized_kernels_are_rejected() {
        let img = random_image(5, 30, 4);
        let stack = uniform_stack(1, &gaussian(7, 1.0), 7, 1.0);
        let r = patchwise_convolve(&img, &stack, &RowAssignment::uniform(5, 0), ConvolveOptions::default(), Execution::Sequential);
        assert!(matches!(r, Err(Error::Configuration(_))));
    }

    #[test]
    fn identity_recipe_is_identity() {
        let clean = ImagePlane::from_fn(16, 24, 3, ColorState::Srgb, Geometry::PerspectiveUnfolded, |y, x, c| {
            ((y * 5 + x * 3 + c) % 10) as f64 / 9.0
        })
        .unwrap();
        let stack = uniform_stack(5, &[1.0], 1, 1.0);
        let recipe = DegradationRecipe::identity(stack.fov_samples());
        let out = degrade_image(&clean, &recipe, &stack, Execution::Sequential).unwrap();
        let diff = out
            .image
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn uniform_physical_info_is_one() {
        let stack = uniform_stack(3, &gaussian(5, 1.0), 5, 1.0);
        let p = ScaleProfile::uniform(stack.fov_samples(), 30.0);
        let a = RowAssignment::linear(8, stack.fov_samples()).unwrap();
        let m = physical_info(&stack, &p, &a, 6).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn physical_info_spans_supports() {
        let fovs: Vec<f64> = (0..31).map(|i| 30.0 + i as f64).collect();
        let kernels = (0..31)
            .flat_map(|i| {
                let n = 3 + 2 * i;
                Channel::ALL.iter().map(move |&c| {
                    PsfKernel::new(n, n, gaussian(n, 1.0), 30.0 + i as f64, KernelTag::Channel(c), 1.0).unwrap()
                })
            })
            .collect();
        let stack = PsfStack::new(fovs.clone(), rgb_tags(), kernels, vec![1.0; 31]).unwrap();
        let p = ScaleProfile::uniform(&fovs, 30.0);
        let a = RowAssignment::linear(62, &fovs).unwrap();
        let m = physical_info(&stack, &p, &a, 4).unwrap();
        let vals: Vec<f64> = (0..62).map(|y| m.get(y, 0, 0)).collect();
        let lo = vals.iter().copied().fold(1.0, f64::min);
        assert!((lo - 3.0 / 63.0).abs() < 1e-12);
        assert_eq!(vals.iter().copied().fold(0.0, f64::max), 1.0);
        for y in 0..62 {
            for x in 1..4 {
                for c in 0..3 {
                    assert_eq!(m.get(y, x, c), m.get(y, 0, c));
                }
            }
        }
        for y in 1..62 {
            if a.rows()[y] == a.rows()[y - 1] {
                assert_eq!(m.get(y, 0, 0), m.get(y - 1, 0, 0));
            }
        }
    }

    #[test]
    fn physical_info_file_round_trip() {
        let stack = uniform_stack(2, &gaussian(3, 1.0), 3, 1.0);
        let mut p = ScaleProfile::uniform(stack.fov_samples(), 30.0);
        p.factors[0] = 2.0;
        let a = RowAssignment::linear(6, stack.fov_samples()).unwrap();
        let m = physical_info(&stack, &p, &a, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (r, j) = (dir.path().join("phys.raw"), dir.path().join("phys.json"));
        m.write(&r, &j).unwrap();
        let back = PhysicalInfoMap::read(&r, &j).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert_eq!(back.normalizers, m.normalizers);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(fs::metadata(&r).unwrap().len(), 6 * 5 * 3 * 4);
    }
}
