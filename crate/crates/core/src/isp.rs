//! Forward and inverse camera ISP chains with sensor noise.
//!
//! Inverse: power-law gamma expansion, inverse colour matrix, inverse white
//! balance. Forward: RGGB mosaic, heteroscedastic Gaussian noise, bilinear
//! demosaic, white balance, colour matrix, gamma compression.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ColorState, ImagePlane};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BayerPattern {
    #[default]
    Rggb,
    /// Full-colour sensor: every pixel keeps all three channels.
    None,
}

impl BayerPattern {
    /// Colour sampled at pixel `(y, x)`; `None` for a full-colour sensor.
    #[inline]
    pub fn channel_at(self, y: usize, x: usize) -> Option<usize> {
        match self {
            BayerPattern::Rggb => Some(match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            }),
            BayerPattern::None => None,
        }
    }
}

/// Variance of the additive noise is `shot·x + read`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub shot: f64,
    pub read: f64,
}

impl NoiseParams {
    pub const ZERO: NoiseParams = NoiseParams {
        shot: 0.0,
        read: 0.0,
    };

    fn validate(&self) -> Result<()> {
        if self.shot >= 0.0 && self.read >= 0.0 && self.shot.is_finite() && self.read.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "noise parameters must be >= 0, got shot {} read {}",
                self.shot, self.read
            )))
        }
    }
}

pub type Matrix3 = [[f64; 3]; 3];

pub const IDENTITY3: Matrix3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    /// Red and blue gains; green is 1.
    pub wb_gains: [f64; 2],
    pub ccm: Matrix3,
    pub gamma: f64,
    #[serde(default)]
    pub bayer: BayerPattern,
    #[serde(default)]
    pub noise: NoiseParams,
}

impl Default for IspParams {
    fn default() -> Self {
        Self {
            wb_gains: [1.0, 1.0],
            ccm: IDENTITY3,
            gamma: 2.2,
            bayer: BayerPattern::Rggb,
            noise: NoiseParams::ZERO,
        }
    }
}

impl IspParams {
    /// Unit gains, identity matrix, linear gamma, no mosaic, no noise.
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            bayer: BayerPattern::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidParams("white-balance gains must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParams("gamma must be positive".into()));
        }
        for (i, row) in self.ccm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "colour matrix row {i} sums to {s}, expected 1"
                )));
            }
        }
        self.noise
            .validate()
            .map_err(|e| Error::InvalidParams(e.to_string()))
    }

    fn gains(&self) -> [f64; 3] {
        [self.wb_gains[0], 1.0, self.wb_gains[1]]
    }
}

pub fn invert_matrix(m: &Matrix3) -> Result<Matrix3> {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if det.abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::InvalidParams("colour matrix is singular".into()));
    }
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    Ok(adj.map(|row| row.map(|v| v / det)))
}

#[inline]
fn apply_matrix(m: &Matrix3, p: &[f64]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

/// Applies a colour matrix to every pixel of a 3-channel image, no clamping.
pub fn apply_ccm(image: &ImagePlane, m: &Matrix3) -> Result<ImagePlane> {
    require_rgb(image)?;
    let data = image
        .data()
        .chunks_exact(3)
        .flat_map(|p| apply_matrix(m, p))
        .collect();
    Ok(image.with_data(data, 3, image.color))
}

pub fn gamma_expand(x: f64, gamma: f64) -> f64 {
    x.max(0.0).powf(gamma)
}

pub fn gamma_compress(x: f64, gamma: f64) -> f64 {
    x.max(0.0).powf(1.0 / gamma)
}

fn require_rgb(image: &ImagePlane) -> Result<()> {
    if image.channels() == 3 {
        Ok(())
    } else {
        Err(Error::invalid("expected a 3-channel image"))
    }
}

fn require_state(image: &ImagePlane, state: ColorState) -> Result<()> {
    if image.color == state {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "expected a {state:?} image, got {:?}",
            image.color
        )))
    }
}

/// sRGB to linear sensor RGB.
pub fn invert_isp(image: &ImagePlane, params: &IspParams) -> Result<ImagePlane> {
    require_state(image, ColorState::Srgb)?;
    require_rgb(image)?;
    params.validate()?;
    let inv = invert_matrix(&params.ccm)?;
    let gains = params.gains();
    let mut data = Vec::with_capacity(image.data().len());
    for p in image.data().chunks_exact(3) {
        let lin = [0, 1, 2].map(|c| gamma_expand(p[c], params.gamma));
        let raw = apply_matrix(&inv, &lin);
        for c in 0..3 {
            data.push((raw[c] / gains[c]).clamp(0.0, 1.0));
        }
    }
    Ok(image.with_data(data, 3, ColorState::LinearRgb))
}

/// Samples one colour per pixel following the Bayer pattern. A full-colour
/// pattern keeps all three channels.
pub fn mosaic(image: &ImagePlane, pattern: BayerPattern) -> Result<ImagePlane> {
    require_rgb(image)?;
    if pattern == BayerPattern::None {
        return Ok(image.with_data(image.data().to_vec(), 3, ColorState::MosaicedRaw));
    }
    let (h, w, _) = image.shape();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(image.get(y, x, pattern.channel_at(y, x).unwrap_or(0)));
        }
    }
    Ok(image.with_data(data, 1, ColorState::MosaicedRaw))
}

/// Adds `N(0, shot·x + read)` per sample and clamps to [0, 1].
pub fn add_noise(image: &ImagePlane, noise: NoiseParams, seed: u64) -> Result<ImagePlane> {
    noise.validate()?;
    if noise.shot == 0.0 && noise.read == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = seed::rng(seed);
    let data = image
        .data()
        .iter()
        .map(|&x| {
            let var = noise.shot * x.max(0.0) + noise.read;
            let z: f64 = StandardNormal.sample(&mut rng);
            (x + var.sqrt() * z).clamp(0.0, 1.0)
        })
        .collect();
    Ok(image.with_data(data, image.channels(), image.color))
}

/// Mosaiced, noisy sensor signal before demosaicking.
pub fn sensor_raw(image: &ImagePlane, params: &IspParams, seed: u64) -> Result<ImagePlane> {
    require_state(image, ColorState::LinearRgb)?;
    params.validate()?;
    add_noise(&mosaic(image, params.bayer)?, params.noise, seed)
}

/// Bilinear demosaic: each missing colour is the mean of the same-colour
/// samples in the 3x3 neighbourhood that lie inside the image.
pub fn demosaic(raw: &ImagePlane, pattern: BayerPattern) -> Result<ImagePlane> {
    if pattern == BayerPattern::None {
        require_rgb(raw)?;
        return Ok(raw.with_data(raw.data().to_vec(), 3, ColorState::LinearRgb));
    }
    if raw.channels() != 1 {
        return Err(Error::invalid("demosaic expects a single-channel mosaic"));
    }
    let (h, w, _) = raw.shape();
    let src = raw.data();
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let own = pattern.channel_at(y, x).unwrap_or(0);
            let mut sum = [0.0; 3];
            let mut count = [0u32; 3];
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let c = pattern.channel_at(yy, xx).unwrap_or(0);
                    sum[c] += src[yy * w + xx];
                    count[c] += 1;
                }
            }
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = if c == own {
                    src[y * w + x]
                } else if count[c] > 0 {
                    sum[c] / f64::from(count[c])
                } else {
                    // Only reachable on 1-pixel-wide images.
                    src[y * w + x]
                };
            }
        }
    }
    Ok(raw.with_data(data, 3, ColorState::LinearRgb))
}

/// Linear sensor RGB to sRGB, with noise drawn from `seed`.
pub fn forward_isp(image: &ImagePlane, params: &IspParams, seed: u64) -> Result<ImagePlane> {
    require_rgb(image)?;
    let raw = sensor_raw(image, params, seed)?;
    let rgb = demosaic(&raw, params.bayer)?;
    let gains = params.gains();
    let mut data = Vec::with_capacity(rgb.data().len());
    for p in rgb.data().chunks_exact(3) {
        let balanced = [0, 1, 2].map(|c| p[c] * gains[c]);
        let mixed = apply_matrix(&params.ccm, &balanced);
        for v in mixed {
            data.push(gamma_compress(v.clamp(0.0, 1.0), params.gamma));
        }
    }
    Ok(image.with_data(data, 3, ColorState::Srgb))
}
