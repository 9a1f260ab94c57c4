//! Image- and optical-quality measures: PSNR, SSIM, Strehl ratio, MTF from
//! PSFs and slanted edges, MTF50 and the diffraction-limited MTF.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffraction::{PsfKernel, StrehlEvaluator};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::image::ImagePlane;
use crate::prescription::OpticalPrescription;
use crate::zernike::ZernikeField;

fn check_pair(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.color != b.color {
        return Err(Error::invalid(format!(
            "colour states differ: {:?} vs {:?}",
            a.color, b.color
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-peak data; `+∞` when equal.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let t: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5) over
/// the valid region, averaged across channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, nc) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..nc {
        let x = a.channel(c);
        let y = b.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / nc as f64)
}

/// Strehl ratio of one coefficient set (waves) on the prescription's Strehl
/// grid.
pub fn strehl(coeffs: &[f64], prescription: &OpticalPrescription) -> Result<f64> {
    StrehlEvaluator::new(prescription.strehl_grid, 4)?.ratio(coeffs)
}

/// Strehl ratio per FoV at the prescription's Strehl wavelength.
pub fn strehl_curve(
    field: &ZernikeField,
    prescription: &OpticalPrescription,
    exec: Execution,
) -> Result<Vec<f64>> {
    let evaluator = StrehlEvaluator::new(prescription.strehl_grid, 4)?;
    let wi = prescription.strehl_wavelength_index();
    exec.map_indices(field.n_fov(), |fi| evaluator.ratio(field.cell(fi, wi)?))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfCurve {
    /// Cycles per pixel, strictly increasing, starting at 0.
    pub frequencies: Vec<f64>,
    pub modulation: Vec<f64>,
}

impl MtfCurve {
    pub fn new(frequencies: Vec<f64>, modulation: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() || frequencies.len() != modulation.len() {
            return Err(Error::invalid("MTF curve needs matching, non-empty axes"));
        }
        if frequencies.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::invalid("MTF frequencies must be strictly increasing"));
        }
        Ok(Self {
            frequencies,
            modulation,
        })
    }

    /// Linear interpolation; clamps beyond the ends.
    pub fn at(&self, f: f64) -> f64 {
        let fr = &self.frequencies;
        if f <= fr[0] {
            return self.modulation[0];
        }
        for i in 1..fr.len() {
            if f <= fr[i] {
                let t = (f - fr[i - 1]) / (fr[i] - fr[i - 1]);
                return self.modulation[i - 1] + t * (self.modulation[i] - self.modulation[i - 1]);
            }
        }
        self.modulation[fr.len() - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frequency_cyc_per_px,modulation\n");
        for (f, m) in self.frequencies.iter().zip(&self.modulation) {
            s.push_str(&format!("{f},{m}\n"));
        }
        s
    }
}

/// Evenly spaced frequencies `0, step, …, max`.
fn frequency_axis(max: f64, samples: usize) -> Vec<f64> {
    (0..samples)
        .map(|i| max * i as f64 / (samples - 1) as f64)
        .collect()
}

pub const PSF_MTF_SAMPLES: usize = 65;

/// Sagittal (horizontal) and tangential (vertical) MTFs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfPair {
    pub sagittal: MtfCurve,
    pub tangential: MtfCurve,
}

/// |DTFT| of the kernel's marginal line spread along each axis, on
/// [0, 0.5] cycles/pixel.
pub fn mtf_from_psf(kernel: &PsfKernel) -> Result<MtfPair> {
    let (h, w) = (kernel.height(), kernel.width());
    let horizontal: Vec<f64> = (0..w).map(|c| (0..h).map(|r| kernel.at(r, c)).sum()).collect();
    let vertical: Vec<f64> = (0..h).map(|r| (0..w).map(|c| kernel.at(r, c)).sum()).collect();
    let freqs = frequency_axis(0.5, PSF_MTF_SAMPLES);
    let curve = |lsf: &[f64]| -> Result<MtfCurve> {
        let dc: f64 = lsf.iter().sum();
        if !(dc > 0.0) {
            return Err(Error::invalid("kernel has no energy"));
        }
        let m = freqs.iter().map(|&f| dtft_magnitude(lsf, f, 1.0) / dc).collect();
        MtfCurve::new(freqs.clone(), m)
    };
    Ok(MtfPair {
        sagittal: curve(&horizontal)?,
        tangential: curve(&vertical)?,
    })
}

fn dtft_magnitude(samples: &[f64], f: f64, spacing: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (k, v) in samples.iter().enumerate() {
        let phase = -2.0 * PI * f * k as f64 * spacing;
        re += v * phase.cos();
        im += v * phase.sin();
    }
    re.hypot(im)
}

/// First frequency where the curve falls to 0.5, linearly interpolated;
/// 0.5 cycles/pixel when it never does.
pub fn mtf50(curve: &MtfCurve) -> f64 {
    let (f, m) = (&curve.frequencies, &curve.modulation);
    for i in 1..f.len() {
        if m[i] <= 0.5 && m[i - 1] > 0.5 {
            let t = (m[i - 1] - 0.5) / (m[i - 1] - m[i]);
            return f[i - 1] + t * (f[i] - f[i - 1]);
        }
    }
    NYQUIST
}

pub const NYQUIST: f64 = 0.5;

/// Incoherent cutoff `D/(λ·d)` in cycles per pixel.
pub fn diffraction_cutoff(aperture_mm: f64, wavelength_nm: f64, distance_mm: f64, pitch_um: f64) -> f64 {
    aperture_mm / (wavelength_nm * 1e-6 * distance_mm) * pitch_um * 1e-3
}

/// `(2/π)(acos ν − ν√(1 − ν²))`, zero beyond the cutoff.
pub fn diffraction_limit_at(f: f64, cutoff: f64) -> f64 {
    let nu = (f / cutoff).abs();
    if nu >= 1.0 {
        return 0.0;
    }
    (2.0 / PI) * (nu.acos() - nu * (1.0 - nu * nu).sqrt())
}

/// Diffraction-limited MTF of a circular aperture on [0, 0.5] cycles/pixel.
pub fn diffraction_limit_mtf(
    aperture_mm: f64,
    wavelength_nm: f64,
    distance_mm: f64,
    pitch_um: f64,
) -> Result<MtfCurve> {
    for (name, v) in [
        ("aperture", aperture_mm),
        ("wavelength", wavelength_nm),
        ("distance", distance_mm),
        ("pixel pitch", pitch_um),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
    }
    let fc = diffraction_cutoff(aperture_mm, wavelength_nm, distance_mm, pitch_um);
    let freqs = frequency_axis(NYQUIST, 101);
    let m = freqs.iter().map(|&f| diffraction_limit_at(f, fc)).collect();
    MtfCurve::new(freqs, m)
}

/// Region of interest in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(image: &ImagePlane) -> Self {
        Self {
            x: 0,
            y: 0,
            width: image.width(),
            height: image.height(),
        }
    }
}

pub const EDGE_OVERSAMPLING: usize = 4;
pub const EDGE_MAX_FREQUENCY: f64 = 1.0;
const EDGE_MIN_CONTRAST: f64 = 0.05;
const EDGE_MAX_RESIDUAL_PX: f64 = 1.5;

/// Slanted-edge MTF of a near-vertical edge inside `roi`.
///
/// Row-wise derivative centroids locate the edge, a line fit maps every
/// pixel to its signed horizontal distance from the edge, the samples are
/// binned into a 4x oversampled edge spread function, differentiated,
/// Hamming-windowed and transformed. The curve runs to 1 cycle/pixel.
/// `edge_angle_hint` (degrees from vertical) above 45 transposes the ROI so
/// near-horizontal edges can be measured.
pub fn mtf_slanted_edge(image: &ImagePlane, roi: Roi, edge_angle_hint: Option<f64>) -> Result<MtfCurve> {
    if roi.width < 8 || roi.height < 8 || roi.x + roi.width > image.width() || roi.y + roi.height > image.height() {
        return Err(Error::invalid(format!("ROI {roi:?} is too small or outside the image")));
    }
    let lum = image.luminance();
    let transpose = edge_angle_hint.is_some_and(|a| a.abs() > 45.0);
    let (h, w) = if transpose {
        (roi.width, roi.height)
    } else {
        (roi.height, roi.width)
    };
    let pix = |y: usize, x: usize| -> f64 {
        let (iy, ix) = if transpose { (x, y) } else { (y, x) };
        lum[(roi.y + iy) * image.width() + roi.x + ix]
    };
    let grid: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| pix(y, x)).collect();

    let quarter = (w / 4).max(1);
    let side_mean = |cols: std::ops::Range<usize>| -> f64 {
        let n = (cols.len() * h) as f64;
        (0..h)
            .map(|y| cols.clone().map(|x| grid[y * w + x]).sum::<f64>())
            .sum::<f64>()
            / n
    };
    let contrast = side_mean(w - quarter..w) - side_mean(0..quarter);
    if contrast.abs() < EDGE_MIN_CONTRAST {
        return Err(Error::EdgeNotFound(format!(
            "left/right contrast {:.4} is below {EDGE_MIN_CONTRAST}",
            contrast.abs()
        )));
    }
    let sign = contrast.signum();
    let deriv: Vec<f64> = (0..h)
        .flat_map(|y| {
            let g = &grid;
            (0..w).map(move |x| {
                if x == 0 || x + 1 == w {
                    0.0
                } else {
                    (sign * (g[y * w + x + 1] - g[y * w + x - 1]) * 0.5).max(0.0)
                }
            })
        })
        .collect();

    let centroids = |line: Option<(f64, f64)>, half: f64| -> Vec<(f64, f64)> {
        (0..h)
            .filter_map(|y| {
                let (mut s, mut sx) = (0.0, 0.0);
                for x in 0..w {
                    if let Some((a, b)) = line {
                        if (x as f64 - (a + b * y as f64)).abs() > half {
                            continue;
                        }
                    }
                    let d = deriv[y * w + x];
                    s += d;
                    sx += d * x as f64;
                }
                (s > 0.0).then(|| (y as f64, sx / s))
            })
            .collect()
    };
    let mut points = centroids(None, 0.0);
    let mut line = fit_line(&points)
        .ok_or_else(|| Error::EdgeNotFound("too few rows with an edge response".into()))?;
    let half = (w as f64 / 4.0).max(4.0);
    for _ in 0..2 {
        points = centroids(Some(line), half);
        line = fit_line(&points)
            .ok_or_else(|| Error::EdgeNotFound("too few rows with an edge response".into()))?;
    }
    let (a, b) = line;
    let residual = (points
        .iter()
        .map(|(y, x)| (x - (a + b * y)).powi(2))
        .sum::<f64>()
        / points.len() as f64)
        .sqrt();
    if residual > EDGE_MAX_RESIDUAL_PX || points.len() < h / 2 {
        return Err(Error::EdgeNotFound(format!(
            "edge fit residual {residual:.2} px over {} rows",
            points.len()
        )));
    }

    // Usable half-width: every row reaches this far on both sides of the edge.
    let reach = (0..h)
        .map(|y| {
            let xe = a + b * y as f64;
            xe.min(w as f64 - 1.0 - xe)
        })
        .fold(f64::INFINITY, f64::min);
    if reach < 4.0 {
        return Err(Error::EdgeNotFound("edge too close to the ROI border".into()));
    }
    let delta = 1.0 / EDGE_OVERSAMPLING as f64;
    let nbins = (2.0 * reach * EDGE_OVERSAMPLING as f64).floor() as usize;
    let mut sum = vec![0.0; nbins];
    let mut count = vec![0u32; nbins];
    for y in 0..h {
        let xe = a + b * y as f64;
        for x in 0..w {
            let d = x as f64 - xe + reach;
            if d < 0.0 {
                continue;
            }
            let k = (d / delta).floor() as usize;
            if k < nbins {
                sum[k] += grid[y * w + x];
                count[k] += 1;
            }
        }
    }
    let esf = fill_empty_bins(&sum, &count)
        .ok_or_else(|| Error::EdgeNotFound("edge spread function is empty".into()))?;
    let mut lsf = vec![0.0; nbins];
    for k in 1..nbins - 1 {
        lsf[k] = sign * (esf[k + 1] - esf[k - 1]) * 0.5;
    }
    let total: f64 = lsf.iter().sum();
    let centre = if total.abs() > 0.0 {
        lsf.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>() / total
    } else {
        nbins as f64 / 2.0
    };
    let span = centre.max(nbins as f64 - 1.0 - centre).max(1.0);
    for (k, v) in lsf.iter_mut().enumerate() {
        *v *= 0.54 + 0.46 * (PI * (k as f64 - centre) / span).cos();
    }
    let dc: f64 = lsf.iter().sum();
    if !(dc.abs() > 0.0) {
        return Err(Error::EdgeNotFound("line spread function vanishes".into()));
    }
    let freqs = frequency_axis(EDGE_MAX_FREQUENCY, 101);
    let modulation = freqs
        .iter()
        .map(|&f| {
            let raw = dtft_magnitude(&lsf, f, delta) / dc.abs();
            // Undo the central-difference response sin(2πfΔ)/(2πfΔ).
            let x = 2.0 * PI * f * delta;
            let corr = if x == 0.0 { 1.0 } else { (x.sin() / x).max(0.1) };
            raw / corr
        })
        .collect();
    MtfCurve::new(freqs, modulation)
}

/// Least-squares `x = a + b·y`.
fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 4 {
        return None;
    }
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / n;
    let syy: f64 = points.iter().map(|p| (p.0 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - my) * (p.1 - mx)).sum();
    if syy == 0.0 {
        return None;
    }
    let b = sxy / syy;
    Some((mx - b * my, b))
}

/// Bin means with empty bins linearly interpolated from their neighbours.
fn fill_empty_bins(sum: &[f64], count: &[u32]) -> Option<Vec<f64>> {
    let known: Vec<usize> = (0..sum.len()).filter(|&k| count[k] > 0).collect();
    if known.is_empty() {
        return None;
    }
    let mean = |k: usize| sum[k] / f64::from(count[k]);
    let mut out = vec![0.0; sum.len()];
    for (k, o) in out.iter_mut().enumerate() {
        *o = match known.binary_search(&k) {
            Ok(_) => mean(k),
            Err(pos) => {
                if pos == 0 {
                    mean(known[0])
                } else if pos == known.len() {
                    mean(known[known.len() - 1])
                } else {
                    let (l, r) = (known[pos - 1], known[pos]);
                    let t = (k - l) as f64 / (r - l) as f64;
                    mean(l) + t * (mean(r) - mean(l))
                }
            }
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffraction::KernelTag;
    use crate::image::{ColorState, Geometry};
    use crate::seed;
    use crate::zernike::terms;
    use rand::Rng;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImagePlane {
        ImagePlane::from_fn(h, w, 1, ColorState::Srgb, Geometry::PerspectiveUnfolded, |y, x, _| f(y, x)).unwrap()
    }

    fn textured(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = seed::rng(seed);
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        gray(h, w, |y, x| {
            0.5 + 0.3 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos() + 0.2 * (noise[y * w + x] - 0.5)
        })
    }

    #[test]
    fn psnr_values() {
        let a = gray(4, 4, |_, _| 0.0);
        let b = gray(4, 4, |_, _| 0.1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &gray(4, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn psnr_of_quantization_noise() {
        let mut rng = seed::rng(11);
        let h = 256;
        let base: Vec<f64> = (0..h * h).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let noisy: Vec<f64> = base
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5) / 255.0)
            .collect();
        let a = gray(h, h, |y, x| base[y * h + x]);
        let b = gray(h, h, |y, x| noisy[y * h + x]);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 58.92).abs() < 0.5, "{p}");
    }

    /// Window-by-window SSIM straight from the definition.
    fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let taps = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = taps[i] * taps[j];
                        ma += g * a[(y + i) * w + x + j];
                        mb += g * b[(y + i) * w + x + j];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = taps[i] * taps[j];
                        let (p, q) = (a[(y + i) * w + x + j] - ma, b[(y + i) * w + x + j] - mb);
                        va += g * p * p;
                        vb += g * q * q;
                        cov += g * p * q;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1.0;
            }
        }
        total / n
    }

    #[test]
    fn ssim_properties() {
        let a = textured(32, 32, 1);
        let b = textured(32, 32, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = gray(32, 32, |y, x| 1.0 - a.get(y, x, 0));
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        let r = ssim_reference(a.data(), b.data(), 32, 32);
        assert!((ssim(&a, &b).unwrap() - r).abs() < 1e-6);
    }

    #[test]
    fn psf_mtf_closed_forms() {
        let delta = PsfKernel::delta(5, 0.0, KernelTag::WavelengthNm(550.0)).unwrap();
        let m = mtf_from_psf(&delta).unwrap();
        assert!(m.sagittal.modulation.iter().all(|v| (v - 1.0).abs() < 1e-12));

        let mut d = vec![0.0; 9];
        d[3..6].fill(1.0);
        let bar = PsfKernel::new(3, 3, d, 0.0, KernelTag::WavelengthNm(550.0), 1.0).unwrap();
        let m = mtf_from_psf(&bar).unwrap();
        for (f, v) in m.sagittal.frequencies.iter().zip(&m.sagittal.modulation) {
            let expect = if *f == 0.0 {
                1.0
            } else {
                ((3.0 * PI * f).sin() / (3.0 * (PI * f).sin())).abs()
            };
            assert!((v - expect).abs() < 1e-12);
        }
        assert!(m.tangential.modulation.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    fn gaussian_kernel(size: usize, sigma: f64) -> PsfKernel {
        let c = (size / 2) as f64;
        let d = (0..size * size)
            .map(|i| {
                let (r, q) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(r * r + q * q) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        PsfKernel::new(size, size, d, 0.0, KernelTag::WavelengthNm(550.0), 1.0).unwrap()
    }

    #[test]
    fn wider_gaussian_has_lower_mtf() {
        let narrow = mtf_from_psf(&gaussian_kernel(15, 1.0)).unwrap();
        let wide = mtf_from_psf(&gaussian_kernel(15, 2.0)).unwrap();
        for (a, b) in wide.sagittal.modulation.iter().zip(&narrow.sagittal.modulation) {
            assert!(a <= &(b + 1e-12));
        }
        assert!(mtf50(&wide.sagittal) <= mtf50(&narrow.sagittal));
    }

    #[test]
    fn mtf50_cases() {
        let f = frequency_axis(0.5, 51);
        let flat = MtfCurve::new(f.clone(), vec![1.0; 51]).unwrap();
        assert_eq!(mtf50(&flat), 0.5);
        let lin = MtfCurve::new(f.clone(), f.iter().map(|x| 1.0 - 2.0 * x).collect()).unwrap();
        assert!((mtf50(&lin) - 0.25).abs() < 1e-12);
        // exp(−2(πσf)²) = 0.5 at f = sqrt(ln 2 / 2) / (πσ).
        let fine = frequency_axis(0.5, 2001);
        let g = MtfCurve::new(fine.clone(), fine.iter().map(|x| (-2.0 * (PI * x).powi(2)).exp()).collect()).unwrap();
        let expect = (std::f64::consts::LN_2 / 2.0).sqrt() / PI;
        assert!((mtf50(&g) / expect - 1.0).abs() < 1e-3);
    }

    #[test]
    fn diffraction_limit_values() {
        assert_eq!(diffraction_limit_at(0.0, 0.3), 1.0);
        assert_eq!(diffraction_limit_at(0.3, 0.3), 0.0);
        let half = diffraction_limit_at(0.15, 0.3);
        assert!((half - (2.0 / PI) * (PI / 3.0 - 3f64.sqrt() / 4.0)).abs() < 1e-12);
        assert!((half - 0.3910).abs() < 1e-4);
        let c = diffraction_limit_mtf(1.0, 550.0, 2.8, 4.0).unwrap();
        assert_eq!(c.modulation[0], 1.0);
    }

    #[test]
    fn strehl_basics() {
        let p = OpticalPrescription::reference();
        assert!((strehl(&[0.0; 4], &p).unwrap() - 1.0).abs() < 1e-12);
        let mut c = [0.0; 9];
        c[terms::PISTON - 1] = 0.7;
        assert!((strehl(&c, &p).unwrap() - 1.0).abs() < 1e-9);
        let mut last = 1.0;
        for d in [0.1, 0.2, 0.3] {
            let mut c = [0.0; 4];
            c[terms::DEFOCUS - 1] = d;
            let s = strehl(&c, &p).unwrap();
            assert!(s < last && s > 0.0);
            last = s;
        }
    }

    /// Edge at `angle` degrees from vertical through the ROI centre, each
    /// pixel integrated over its area, optionally blurred by a Gaussian.
    pub(crate) fn edge_image(h: usize, w: usize, angle_deg: f64, sigma: Option<f64>) -> ImagePlane {
        let t = angle_deg.to_radians();
        let (nx, ny) = (t.cos(), -t.sin());
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let ss = 16;
        gray(h, w, |y, x| {
            let mut acc = 0.0;
            for i in 0..ss {
                for j in 0..ss {
                    let px = x as f64 - 0.5 + (j as f64 + 0.5) / ss as f64;
                    let py = y as f64 - 0.5 + (i as f64 + 0.5) / ss as f64;
                    let d = (px - cx) * nx + (py - cy) * ny;
                    acc += match sigma {
                        None => f64::from(u8::from(d > 0.0)),
                        Some(s) => 0.5 * (1.0 + erf(d / (s * 2f64.sqrt()))),
                    };
                }
            }
            0.2 + 0.6 * acc / (ss * ss) as f64
        })
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz–Stegun 7.1.26, |error| < 1.5e-7.
        let s = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        s * y
    }

    fn sinc(x: f64) -> f64 {
        if x == 0.0 {
            1.0
        } else {
            (PI * x).sin() / (PI * x)
        }
    }

    #[test]
    fn ideal_edge_matches_pixel_aperture() {
        let img = edge_image(64, 64, 5.0, None);
        let c = mtf_slanted_edge(&img, Roi::full(&img), None).unwrap();
        assert!((c.modulation[0] - 1.0).abs() < 1e-6);
        // sinc(f) = 0.5 at f ≈ 0.6034.
        let m = mtf50(&c);
        assert!((m / 0.6034 - 1.0).abs() < 0.05, "mtf50 {m}");
    }

    #[test]
    fn blurred_edge_matches_gaussian_product() {
        let img = edge_image(64, 64, 5.0, Some(1.0));
        let c = mtf_slanted_edge(&img, Roi::full(&img), Some(5.0)).unwrap();
        for (f, m) in c.frequencies.iter().zip(&c.modulation) {
            if *f > 0.5 {
                break;
            }
            let expect = (-2.0 * (PI * f).powi(2)).exp() * sinc(*f).abs();
            assert!((m - expect).abs() < 0.05, "f {f}: {m} vs {expect}");
        }
    }

    #[test]
    fn noise_has_no_edge() {
        let mut rng = seed::rng(4);
        let n: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = gray(64, 64, |y, x| n[y * 64 + x]);
        assert!(matches!(
            mtf_slanted_edge(&img, Roi::full(&img), None),
            Err(Error::EdgeNotFound(_))
        ));
    }

    #[test]
    fn horizontal_edges_via_hint() {
        let v = edge_image(64, 64, 5.0, Some(1.0));
        let h = gray(64, 64, |y, x| v.get(x, y, 0));
        let a = mtf_slanted_edge(&v, Roi::full(&v), None).unwrap();
        let b = mtf_slanted_edge(&h, Roi::full(&h), Some(85.0)).unwrap();
        assert!((mtf50(&a) - mtf50(&b)).abs() < 1e-9);
    }
}
