//! Focal-plane PSFs from pupil functions.
//!
//! The image-plane amplitude is the Fourier integral of the pupil function
//! evaluated by a zero-padded FFT. For an `n`-sample pupil of diameter `D`
//! padded to `N` samples the focal sample spacing is `λ·d / (N·Δx')` with
//! `Δx' = D/n`. The raw field is scaled by `1/n²`, so an unaberrated pupil
//! peaks at the squared fill fraction of the disk.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fft::fftshift;
use crate::prescription::OpticalPrescription;
use crate::zernike::{PupilGrid, ZernikeBasis, ZernikeField, FRINGE_TERMS};

/// Smallest zero-padding factor applied to the pupil.
pub const MIN_PAD_FACTOR: usize = 4;
/// Largest padded transform size accepted.
pub const MAX_PADDED_SIZE: usize = 16384;
pub const MIN_SUPPORT: usize = 3;
pub const MAX_SUPPORT: usize = 63;

#[derive(Clone, Debug)]
pub struct PupilFunction {
    grid: PupilGrid,
    field: Vec<Complex64>,
    pub wavelength_nm: f64,
    pub fov_deg: f64,
}

impl PupilFunction {
    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    pub fn field(&self) -> &[Complex64] {
        &self.field
    }

    /// Pupil with arbitrary complex samples; entries outside the disk are
    /// forced to zero and moduli above one rejected.
    pub fn from_samples(
        grid: PupilGrid,
        mut field: Vec<Complex64>,
        wavelength_nm: f64,
        fov_deg: f64,
    ) -> Result<Self> {
        check_wavelength(wavelength_nm)?;
        if field.len() != grid.size() * grid.size() {
            return Err(Error::invalid("pupil samples do not match grid"));
        }
        for (v, inside) in field.iter_mut().zip(grid.disk_mask()) {
            if !inside {
                *v = Complex64::default();
            } else if v.norm() > 1.0 + 1e-12 {
                return Err(Error::invalid("pupil modulus exceeds one"));
            }
        }
        Ok(Self {
            grid,
            field,
            wavelength_nm,
            fov_deg,
        })
    }
}

fn check_wavelength(wavelength_nm: f64) -> Result<()> {
    if wavelength_nm > 0.0 && wavelength_nm.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "wavelength {wavelength_nm} nm must be positive"
        )))
    }
}

/// `circ(ρ)·exp(i·2π·W)` for a wavefront `W` in waves.
pub fn pupil_function(
    wavefront: &[f64],
    grid: &PupilGrid,
    wavelength_nm: f64,
) -> Result<PupilFunction> {
    check_wavelength(wavelength_nm)?;
    let n = grid.size();
    if wavefront.len() != n * n {
        return Err(Error::invalid(format!(
            "wavefront has {} samples, grid needs {}",
            wavefront.len(),
            n * n
        )));
    }
    let field = wavefront
        .iter()
        .zip(grid.disk_mask())
        .map(|(&w, inside)| {
            if inside {
                Complex64::cis(2.0 * std::f64::consts::PI * w)
            } else {
                Complex64::default()
            }
        })
        .collect();
    Ok(PupilFunction {
        grid: *grid,
        field,
        wavelength_nm,
        fov_deg: 0.0,
    })
}

fn pupil_from_disk(basis: &ZernikeBasis, coeffs: &[f64], wavelength_nm: f64, fov_deg: f64) -> PupilFunction {
    let n = basis.grid().size();
    let mut field = vec![Complex64::default(); n * n];
    let w = basis.combine_disk(coeffs);
    for (&i, w) in basis.disk_indices().iter().zip(w) {
        field[i as usize] = Complex64::cis(2.0 * std::f64::consts::PI * w);
    }
    PupilFunction {
        grid: *basis.grid(),
        field,
        wavelength_nm,
        fov_deg,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagingGeometry {
    pub pupil_to_image_mm: f64,
    pub pixel_pitch_um: f64,
}

/// Focal-plane sampling chosen for one pupil/wavelength pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalSampling {
    pub pad_factor: usize,
    pub padded_size: usize,
    pub spacing_um: f64,
}

fn focal_spacing_um(grid: &PupilGrid, wavelength_nm: f64, distance_mm: f64, padded: usize) -> f64 {
    (wavelength_nm * 1e-3) * distance_mm / (padded as f64 * grid.spacing_mm())
}

/// Picks the smallest power-of-two padding (at least [`MIN_PAD_FACTOR`]) whose
/// focal spacing does not exceed the pixel pitch, and checks that the focal
/// field is wide enough for an `out_support`-pixel crop.
pub fn focal_sampling(
    grid: &PupilGrid,
    wavelength_nm: f64,
    geometry: &ImagingGeometry,
    out_support: usize,
) -> Result<FocalSampling> {
    check_wavelength(wavelength_nm)?;
    let d = geometry.pupil_to_image_mm;
    let pitch = geometry.pixel_pitch_um;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid("pupil-to-image distance must be positive"));
    }
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(Error::invalid("pixel pitch must be positive"));
    }
    if out_support == 0 || out_support.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "output support {out_support} must be odd"
        )));
    }
    let n = grid.size();
    // The focal extent N·spacing = n·λ·d/D is independent of padding.
    let extent_um = n as f64 * (wavelength_nm * 1e-3) * d / grid.diameter_mm();
    let needed_um = (out_support + 1) as f64 * pitch;
    if extent_um < needed_um {
        let min_n = (needed_um / extent_um * n as f64).ceil() as usize;
        return Err(Error::Sampling {
            reason: format!(
                "focal field spans {extent_um:.2} um but a {out_support}-px crop needs {needed_um:.2} um"
            ),
            required_grid: min_n.next_power_of_two().max(32),
        });
    }
    let mut pad = MIN_PAD_FACTOR;
    while focal_spacing_um(grid, wavelength_nm, d, pad * n) > pitch {
        pad *= 2;
    }
    if pad * n > MAX_PADDED_SIZE {
        return Err(Error::Sampling {
            reason: format!(
                "padding {pad}x of a {n}-sample pupil exceeds the {MAX_PADDED_SIZE}-sample transform limit"
            ),
            required_grid: n,
        });
    }
    Ok(FocalSampling {
        pad_factor: pad,
        padded_size: pad * n,
        spacing_um: focal_spacing_um(grid, wavelength_nm, d, pad * n),
    })
}

/// Raw focal intensity on the full padded plane, zero frequency at
/// `(N/2, N/2)`, row-major `N x N`.
pub fn full_intensity(pupil: &PupilFunction, padded: usize) -> Result<Vec<f64>> {
    let n = pupil.grid.size();
    if padded < n {
        return Err(Error::invalid("padded size smaller than pupil grid"));
    }
    let fft = FftPlanner::new().plan_fft_forward(padded);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    // Only the first n rows are non-zero; transform those, then every column.
    let mut rows = vec![Complex64::default(); n * padded];
    for r in 0..n {
        let row = &mut rows[r * padded..(r + 1) * padded];
        row[..n].copy_from_slice(&pupil.field[r * n..(r + 1) * n]);
        fft.process_with_scratch(row, &mut scratch);
    }
    let scale = 1.0 / (n as f64).powi(4);
    let mut intensity = vec![0.0; padded * padded];
    let mut col = vec![Complex64::default(); padded];
    for c in 0..padded {
        for r in 0..n {
            col[r] = rows[r * padded + c];
        }
        col[n..].fill(Complex64::default());
        fft.process_with_scratch(&mut col, &mut scratch);
        for (r, v) in col.iter().enumerate() {
            intensity[r * padded + c] = v.norm_sqr() * scale;
        }
    }
    Ok(fftshift(&intensity, padded, padded))
}

/// Total raw focal energy over the padded plane (Parseval).
pub fn total_energy(pupil: &PupilFunction, padded: usize) -> f64 {
    let n = pupil.grid.size() as f64;
    let power: f64 = pupil.field.iter().map(|v| v.norm_sqr()).sum();
    power * (padded as f64).powi(2) / n.powi(4)
}

/// Raw focal intensity on the `(2h+1)²` samples around the optical axis.
///
/// Only the `n` non-zero pupil rows are row-transformed, and only the `2h+1`
/// window columns are column-transformed.
pub fn window_intensity(pupil: &PupilFunction, padded: usize, half: usize) -> Result<Vec<f64>> {
    let n = pupil.grid.size();
    let side = 2 * half + 1;
    if padded < n || side > padded {
        return Err(Error::invalid(format!(
            "window of {side} samples does not fit a {padded}-sample transform"
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(padded);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let wrap = |k: isize| k.rem_euclid(padded as isize) as usize;
    let cols: Vec<usize> = (-(half as isize)..=half as isize).map(wrap).collect();

    let mut row_spec = vec![Complex64::default(); n * side];
    let mut buf = vec![Complex64::default(); padded];
    for r in 0..n {
        let src = &pupil.field[r * n..(r + 1) * n];
        if src.iter().all(|v| *v == Complex64::default()) {
            continue;
        }
        buf[..n].copy_from_slice(src);
        buf[n..].fill(Complex64::default());
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (j, &c) in cols.iter().enumerate() {
            row_spec[r * side + j] = buf[c];
        }
    }

    let scale = 1.0 / (n as f64).powi(4);
    let mut out = vec![0.0; side * side];
    for j in 0..side {
        for r in 0..n {
            buf[r] = row_spec[r * side + j];
        }
        buf[n..].fill(Complex64::default());
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (i, &row) in cols.iter().enumerate() {
            out[i * side + j] = buf[row].norm_sqr() * scale;
        }
    }
    Ok(out)
}

/// For each fine sample (centred index `a`, width `fine`), the pixels of a
/// centred `2*half_px+1` grid of pitch `pitch` it overlaps, with the
/// overlapped fraction of the fine cell.
fn bin_weights(half_fine: usize, fine: f64, half_px: usize, pitch: f64) -> Vec<Vec<(usize, f64)>> {
    (0..2 * half_fine + 1)
        .map(|a| {
            let centre = (a as f64 - half_fine as f64) * fine;
            let (lo, hi) = (centre - 0.5 * fine, centre + 0.5 * fine);
            let first = ((lo / pitch + 0.5).floor() as isize).max(-(half_px as isize));
            let last = ((hi / pitch + 0.5).floor() as isize).min(half_px as isize);
            (first..=last)
                .filter_map(|k| {
                    let plo = (k as f64 - 0.5) * pitch;
                    let phi = (k as f64 + 0.5) * pitch;
                    let overlap = hi.min(phi) - lo.max(plo);
                    (overlap > 0.0).then(|| ((k + half_px as isize) as usize, overlap / fine))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    pub fn index(self) -> usize {
        match self {
            Channel::Red => 0,
            Channel::Green => 1,
            Channel::Blue => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelTag {
    WavelengthNm(f64),
    Channel(Channel),
}

/// Non-negative, unit-sum, odd-sided intensity kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfKernel {
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub fov_deg: f64,
    pub tag: KernelTag,
    /// Fraction of the focal energy that fell inside the crop.
    pub energy: f64,
}

impl PsfKernel {
    /// Normalizes `data` to unit sum.
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<f64>,
        fov_deg: f64,
        tag: KernelTag,
        energy: f64,
    ) -> Result<Self> {
        let mut k = Self::from_raw(height, width, data, fov_deg, tag, energy)?;
        let sum: f64 = k.data.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::invalid("kernel has no energy"));
        }
        k.data.iter_mut().for_each(|v| *v /= sum);
        Ok(k)
    }

    /// Kernel taken as-is (no renormalization), e.g. when loaded from disk.
    pub fn from_raw(
        height: usize,
        width: usize,
        data: Vec<f64>,
        fov_deg: f64,
        tag: KernelTag,
        energy: f64,
    ) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel sides must be odd, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid("kernel buffer does not match its shape"));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("kernel entries must be finite and >= 0"));
        }
        Ok(Self {
            height,
            width,
            data,
            fov_deg,
            tag,
            energy,
        })
    }

    pub fn delta(size: usize, fov_deg: f64, tag: KernelTag) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        if size % 2 == 1 {
            data[size * size / 2] = 1.0;
        }
        Self::new(size, size, data, fov_deg, tag, 1.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Larger side length.
    pub fn support_px(&self) -> usize {
        self.height.max(self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Intensity-weighted centroid relative to the centre sample, (x, y) px.
    pub fn centroid(&self) -> (f64, f64) {
        let (cy, cx) = ((self.height / 2) as f64, (self.width / 2) as f64);
        let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.at(r, c);
                sx += v * (c as f64 - cx);
                sy += v * (r as f64 - cy);
                s += v;
            }
        }
        (sx / s, sy / s)
    }
}

/// Pixel-pitch PSF of `pupil`, centred and cropped to `out_support` pixels.
pub fn psf(pupil: &PupilFunction, geometry: &ImagingGeometry, out_support: usize) -> Result<PsfKernel> {
    let sampling = focal_sampling(&pupil.grid, pupil.wavelength_nm, geometry, out_support)?;
    let (data, energy) = binned_intensity(pupil, &sampling, geometry.pixel_pitch_um, out_support)?;
    PsfKernel::new(
        out_support,
        out_support,
        data,
        pupil.fov_deg,
        KernelTag::WavelengthNm(pupil.wavelength_nm),
        energy,
    )
}

/// Unnormalized pixel-binned intensity and the fraction of total energy it holds.
pub fn binned_intensity(
    pupil: &PupilFunction,
    sampling: &FocalSampling,
    pitch_um: f64,
    out_support: usize,
) -> Result<(Vec<f64>, f64)> {
    let half_px = out_support / 2;
    let fine = sampling.spacing_um;
    let half_fine = (((half_px as f64 + 0.5) * pitch_um / fine).ceil() as usize + 1)
        .min((sampling.padded_size - 1) / 2);
    let side = 2 * half_fine + 1;
    let window = window_intensity(pupil, sampling.padded_size, half_fine)?;
    let weights = bin_weights(half_fine, fine, half_px, pitch_um);

    // Columns first, then rows.
    let mut partial = vec![0.0; side * out_support];
    for a in 0..side {
        let src = &window[a * side..(a + 1) * side];
        let dst = &mut partial[a * out_support..(a + 1) * out_support];
        for (v, w) in src.iter().zip(&weights) {
            for &(k, f) in w {
                dst[k] += v * f;
            }
        }
    }
    let mut out = vec![0.0; out_support * out_support];
    for (a, w) in weights.iter().enumerate() {
        let src = &partial[a * out_support..(a + 1) * out_support];
        for &(k, f) in w {
            let dst = &mut out[k * out_support..(k + 1) * out_support];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * f;
            }
        }
    }
    let captured: f64 = out.iter().sum();
    let total = total_energy(pupil, sampling.padded_size);
    Ok((out, if total > 0.0 { captured / total } else { 0.0 }))
}

/// Peak of the raw focal intensity over the full padded plane.
pub fn peak_intensity(pupil: &PupilFunction, pad_factor: usize) -> Result<f64> {
    let full = full_intensity(pupil, pupil.grid.size() * pad_factor)?;
    Ok(full.iter().copied().fold(0.0, f64::max))
}

/// Peak ratio of the aberrated to the unaberrated PSF on identical grids.
pub fn strehl_ratio(coeffs: &[f64], grid_size: usize, pad_factor: usize) -> Result<f64> {
    StrehlEvaluator::new(grid_size, pad_factor)?.ratio(coeffs)
}

/// Reusable Strehl computation for many coefficient sets on one grid.
pub struct StrehlEvaluator {
    basis: ZernikeBasis,
    pad_factor: usize,
    ideal_peak: f64,
}

impl StrehlEvaluator {
    pub fn new(grid_size: usize, pad_factor: usize) -> Result<Self> {
        if pad_factor == 0 {
            return Err(Error::invalid("pad factor must be positive"));
        }
        let grid = PupilGrid::new(grid_size, 1.0)?;
        let basis = ZernikeBasis::new(grid, FRINGE_TERMS)?;
        let ideal_peak = peak_intensity(&pupil_from_disk(&basis, &[], 550.0, 0.0), pad_factor)?;
        Ok(Self {
            basis,
            pad_factor,
            ideal_peak,
        })
    }

    pub fn ratio(&self, coeffs: &[f64]) -> Result<f64> {
        if coeffs.len() > FRINGE_TERMS {
            return Err(Error::invalid(format!(
                "{} coefficients given, at most {FRINGE_TERMS} supported",
                coeffs.len()
            )));
        }
        let pupil = pupil_from_disk(&self.basis, coeffs, 550.0, 0.0);
        Ok(peak_intensity(&pupil, self.pad_factor)? / self.ideal_peak)
    }
}

/// Polychromatic RMS geometric spot radius (µm) for every FoV of `field`.
///
/// Transverse ray errors are `−2·F#·λ·∇W` with `W` in waves and the gradient
/// taken in normalized pupil coordinates; the radius is measured about the
/// polychromatic centroid.
pub fn spot_rms_table(field: &ZernikeField, f_number: f64) -> Result<Vec<f64>> {
    let grid = PupilGrid::new(64, 1.0)?;
    let basis = ZernikeBasis::new(grid, FRINGE_TERMS)?;
    let n = grid.size();
    let mask = grid.disk_mask();
    let h = 2.0 / n as f64;
    let interior: Vec<usize> = (1..n - 1)
        .flat_map(|r| (1..n - 1).map(move |c| r * n + c))
        .filter(|&i| mask[i] && mask[i - 1] && mask[i + 1] && mask[i - n] && mask[i + n])
        .collect();
    (0..field.n_fov())
        .map(|fov| {
            let mut rays: Vec<(f64, f64)> = Vec::new();
            for (wi, &wl) in field.wavelength_samples().iter().enumerate() {
                let w = basis.combine(field.cell(fov, wi)?);
                let scale = -2.0 * f_number * wl * 1e-3;
                for &i in &interior {
                    let gx = (w[i + 1] - w[i - 1]) / (2.0 * h);
                    let gy = (w[i + n] - w[i - n]) / (2.0 * h);
                    rays.push((scale * gx, scale * gy));
                }
            }
            let m = rays.len() as f64;
            let (mx, my) = rays
                .iter()
                .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / m, b + y / m));
            let var = rays
                .iter()
                .map(|(x, y)| (x - mx).powi(2) + (y - my).powi(2))
                .sum::<f64>()
                / m;
            Ok(var.sqrt())
        })
        .collect()
}

/// Kernel side from a spot radius: next odd integer ≥ 2·rms/pitch + 1,
/// clamped to [`MIN_SUPPORT`, `MAX_SUPPORT`].
pub fn support_from_spot(spot_rms_um: f64, pixel_pitch_um: f64) -> usize {
    let raw = (2.0 * spot_rms_um / pixel_pitch_um + 1.0).ceil().max(1.0) as usize;
    let odd = if raw.is_multiple_of(2) { raw + 1 } else { raw };
    odd.clamp(MIN_SUPPORT, MAX_SUPPORT)
}

/// Kernels indexed by (FoV, tag), FoV-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfStack {
    fov_samples: Vec<f64>,
    tags: Vec<KernelTag>,
    kernels: Vec<PsfKernel>,
    illumination: Vec<f64>,
}

impl PsfStack {
    pub fn new(
        fov_samples: Vec<f64>,
        tags: Vec<KernelTag>,
        kernels: Vec<PsfKernel>,
        illumination: Vec<f64>,
    ) -> Result<Self> {
        if fov_samples.is_empty() || tags.is_empty() {
            return Err(Error::invalid("stack needs at least one FoV and one tag"));
        }
        if kernels.len() != fov_samples.len() * tags.len() {
            return Err(Error::invalid(format!(
                "{} kernels for {} FoVs x {} tags",
                kernels.len(),
                fov_samples.len(),
                tags.len()
            )));
        }
        if illumination.len() != fov_samples.len() {
            return Err(Error::invalid("one illumination value per FoV required"));
        }
        if illumination.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::invalid("illumination must lie in (0, 1]"));
        }
        for (i, k) in kernels.iter().enumerate() {
            if k.tag != tags[i % tags.len()] {
                return Err(Error::invalid(format!("kernel {i} carries the wrong tag")));
            }
        }
        Ok(Self {
            fov_samples,
            tags,
            kernels,
            illumination,
        })
    }

    pub fn fov_samples(&self) -> &[f64] {
        &self.fov_samples
    }

    pub fn tags(&self) -> &[KernelTag] {
        &self.tags
    }

    pub fn illumination(&self) -> &[f64] {
        &self.illumination
    }

    pub fn n_fov(&self) -> usize {
        self.fov_samples.len()
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn kernels(&self) -> &[PsfKernel] {
        &self.kernels
    }

    pub fn kernel(&self, fov: usize, tag: usize) -> &PsfKernel {
        &self.kernels[fov * self.tags.len() + tag]
    }

    pub fn is_rgb(&self) -> bool {
        self.tags
            == Channel::ALL
                .iter()
                .map(|&c| KernelTag::Channel(c))
                .collect::<Vec<_>>()
    }

    /// Support per FoV (largest kernel side across tags).
    pub fn supports(&self) -> Vec<usize> {
        (0..self.n_fov())
            .map(|f| {
                (0..self.n_tags())
                    .map(|t| self.kernel(f, t).support_px())
                    .max()
                    .unwrap_or(1)
            })
            .collect()
    }

    pub fn map_kernels<F>(&self, exec: Execution, f: F) -> Result<Self>
    where
        F: Fn(usize, &PsfKernel) -> Result<PsfKernel> + Sync + Send,
    {
        let nt = self.n_tags();
        let kernels = exec
            .map_indices(self.kernels.len(), |i| f(i / nt, &self.kernels[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.fov_samples.clone(),
            self.tags.clone(),
            kernels,
            self.illumination.clone(),
        )
    }

    /// Writes little-endian f32 kernel files plus `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nt = self.n_tags();
        let mut entries = Vec::with_capacity(self.kernels.len());
        for (i, k) in self.kernels.iter().enumerate() {
            let (fi, ti) = (i / nt, i % nt);
            let file = format!("kernel_{fi:03}_{ti:02}.f32");
            let bytes: Vec<u8> = k
                .data
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            let (channel, wavelength_nm) = match k.tag {
                KernelTag::Channel(c) => (Some(c), None),
                KernelTag::WavelengthNm(w) => (None, Some(w)),
            };
            entries.push(KernelEntry {
                file,
                fov_index: fi,
                tag_index: ti,
                fov_deg: k.fov_deg,
                channel,
                wavelength_nm,
                height: k.height,
                width: k.width,
                support_px: k.support_px(),
                energy: k.energy,
                illumination: self.illumination[fi],
            });
        }
        let manifest = StackManifest {
            format: "palsim-psf-stack".into(),
            version: 1,
            fov_samples_deg: self.fov_samples.clone(),
            tags: self.tags.clone(),
            illumination: self.illumination.clone(),
            kernels: entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StackManifest = serde_json::from_str(&text)?;
        let nt = manifest.tags.len();
        let mut kernels: Vec<Option<PsfKernel>> = vec![None; manifest.fov_samples_deg.len() * nt];
        for e in manifest.kernels {
            let kpath = dir.join(&e.file);
            let bytes = fs::read(&kpath).map_err(|err| Error::io(&kpath, err))?;
            if bytes.len() != e.height * e.width * 4 {
                return Err(Error::Format {
                    path: kpath,
                    message: format!("expected {}x{} f32 samples", e.height, e.width),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            let tag = manifest
                .tags
                .get(e.tag_index)
                .copied()
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    message: format!("tag index {} out of range", e.tag_index),
                })?;
            let slot = kernels
                .get_mut(e.fov_index * nt + e.tag_index)
                .ok_or_else(|| Error::Format {
                    path: path.clone(),
                    message: format!("FoV index {} out of range", e.fov_index),
                })?;
            *slot = Some(PsfKernel::from_raw(
                e.height, e.width, data, e.fov_deg, tag, e.energy,
            )?);
        }
        let kernels = kernels
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                k.ok_or_else(|| {
                    Error::PrescriptionIncomplete(format!(
                        "stack manifest lacks kernel ({}, {})",
                        i / nt,
                        i % nt
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            manifest.fov_samples_deg,
            manifest.tags,
            kernels,
            manifest.illumination,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StackManifest {
    pub format: String,
    pub version: u32,
    pub fov_samples_deg: Vec<f64>,
    pub tags: Vec<KernelTag>,
    pub illumination: Vec<f64>,
    pub kernels: Vec<KernelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KernelEntry {
    pub file: String,
    pub fov_index: usize,
    pub tag_index: usize,
    pub fov_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub channel: Option<Channel>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wavelength_nm: Option<f64>,
    pub height: usize,
    pub width: usize,
    pub support_px: usize,
    pub energy: f64,
    pub illumination: f64,
}

/// Per-wavelength PSF stack for every (FoV, wavelength) cell of `field`.
pub fn build_stack(
    prescription: &OpticalPrescription,
    field: &ZernikeField,
    exec: Execution,
) -> Result<PsfStack> {
    if field.fov_samples() != prescription.fov_samples_deg.as_slice()
        || field.wavelength_samples() != prescription.wavelengths_nm.as_slice()
    {
        return Err(Error::PrescriptionIncomplete(
            "coefficient table sampling differs from the prescription sampling".into(),
        ));
    }
    prescription.validate()?;
    let grid = PupilGrid::new(prescription.grid_size, prescription.aperture_mm)?;
    let basis = ZernikeBasis::new(grid, FRINGE_TERMS)?;
    let geometry = prescription.imaging_geometry();
    let supports = prescription.kernel_supports();
    let nw = field.n_wavelengths();
    let kernels = exec
        .map_indices(field.n_fov() * nw, |i| {
            let (fi, wi) = (i / nw, i % nw);
            let pupil = pupil_from_disk(
                &basis,
                field.cell(fi, wi)?,
                field.wavelength_samples()[wi],
                field.fov_samples()[fi],
            );
            psf(&pupil, &geometry, supports[fi])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    PsfStack::new(
        field.fov_samples().to_vec(),
        field
            .wavelength_samples()
            .iter()
            .map(|&w| KernelTag::WavelengthNm(w))
            .collect(),
        kernels,
        prescription.illumination.clone(),
    )
}

/// Spectral weights of the R, G and B sensor channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorResponse {
    pub wavelengths_nm: Vec<f64>,
    /// `weights[channel][wavelength]`, each channel normalized to unit sum.
    pub weights: [Vec<f64>; 3],
}

impl SensorResponse {
    pub fn new(wavelengths_nm: Vec<f64>, weights: [Vec<f64>; 3]) -> Result<Self> {
        let mut weights = weights;
        for (c, w) in weights.iter_mut().enumerate() {
            if w.len() != wavelengths_nm.len() {
                return Err(Error::invalid(format!(
                    "channel {c} has {} weights for {} wavelengths",
                    w.len(),
                    wavelengths_nm.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid("response weights must be finite and >= 0"));
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(Error::invalid(format!("channel {c} has no response")));
            }
            w.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self {
            wavelengths_nm,
            weights,
        })
    }

    /// Bell curves at 610/540/460 nm with 60 nm FWHM.
    pub fn default_for(wavelengths_nm: &[f64]) -> Result<Self> {
        const CENTRES: [f64; 3] = [610.0, 540.0, 460.0];
        const FWHM: f64 = 60.0;
        let sigma = FWHM / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let weights = CENTRES.map(|c| {
            wavelengths_nm
                .iter()
                .map(|w| (-0.5 * ((w - c) / sigma).powi(2)).exp())
                .collect()
        });
        Self::new(wavelengths_nm.to_vec(), weights)
    }

    pub fn uniform(wavelengths_nm: &[f64]) -> Result<Self> {
        let w = vec![1.0; wavelengths_nm.len()];
        Self::new(wavelengths_nm.to_vec(), [w.clone(), w.clone(), w])
    }
}

/// Collapses a per-wavelength stack into R, G, B kernels.
pub fn spectral_to_rgb(stack: &PsfStack, response: &SensorResponse) -> Result<PsfStack> {
    let wavelengths: Vec<f64> = stack
        .tags
        .iter()
        .map(|t| match t {
            KernelTag::WavelengthNm(w) => Ok(*w),
            KernelTag::Channel(_) => Err(Error::invalid("stack is already per-channel")),
        })
        .collect::<Result<_>>()?;
    if wavelengths != response.wavelengths_nm {
        return Err(Error::invalid(
            "sensor response wavelengths differ from the stack wavelengths",
        ));
    }
    let mut kernels = Vec::with_capacity(stack.n_fov() * 3);
    for fi in 0..stack.n_fov() {
        let first = stack.kernel(fi, 0);
        let (h, w) = (first.height, first.width);
        for ch in Channel::ALL {
            let mut acc = vec![0.0; h * w];
            let mut energy = 0.0;
            for (wi, &weight) in response.weights[ch.index()].iter().enumerate() {
                if weight == 0.0 {
                    continue;
                }
                let k = stack.kernel(fi, wi);
                if k.height != h || k.width != w {
                    return Err(Error::invalid(format!(
                        "kernels of FoV {fi} have different shapes"
                    )));
                }
                for (a, v) in acc.iter_mut().zip(&k.data) {
                    *a += weight * v;
                }
                energy += weight * k.energy;
            }
            kernels.push(PsfKernel::new(
                h,
                w,
                acc,
                stack.fov_samples[fi],
                KernelTag::Channel(ch),
                energy,
            )?);
        }
    }
    PsfStack::new(
        stack.fov_samples.clone(),
        Channel::ALL.iter().map(|&c| KernelTag::Channel(c)).collect(),
        kernels,
        stack.illumination.clone(),
    )
}
