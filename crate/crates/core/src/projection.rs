//! Unit-sphere camera model, annular unfolding, and the horizontal
//! resampling that unfolding induces on perspective images and PSFs.

use serde::{Deserialize, Serialize};

use crate::diffraction::PsfKernel;
use crate::error::{Error, Result};
use crate::image::{Geometry, ImagePlane};

/// Taylor-polynomial model mapping FoV angle (degrees) to image radius (px).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelFile", into = "CameraModelFile")]
pub struct CameraModel {
    taylor_coeffs: Vec<f64>,
    center: [f64; 2],
    theta_range_deg: [f64; 2],
    theta0_deg: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct CameraModelFile {
    taylor_coeffs: Vec<f64>,
    center: [f64; 2],
    theta_range_deg: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta0_deg: Option<f64>,
}

impl TryFrom<CameraModelFile> for CameraModel {
    type Error = Error;

    fn try_from(f: CameraModelFile) -> Result<Self> {
        CameraModel::new(f.taylor_coeffs, f.center, f.theta_range_deg, f.theta0_deg)
    }
}

impl From<CameraModel> for CameraModelFile {
    fn from(m: CameraModel) -> Self {
        Self {
            taylor_coeffs: m.taylor_coeffs,
            center: m.center,
            theta_range_deg: m.theta_range_deg,
            theta0_deg: Some(m.theta0_deg),
        }
    }
}

const MONOTONE_SAMPLES: usize = 1000;

impl CameraModel {
    /// `theta0_deg = None` picks 90° when it lies in range, else the range
    /// end nearest 90°.
    pub fn new(
        taylor_coeffs: Vec<f64>,
        center: [f64; 2],
        theta_range_deg: [f64; 2],
        theta0_deg: Option<f64>,
    ) -> Result<Self> {
        let [lo, hi] = theta_range_deg;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!(
                "invalid FoV range [{lo}, {hi}]"
            )));
        }
        if taylor_coeffs.is_empty() || taylor_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("camera polynomial needs finite coefficients"));
        }
        let theta0 = theta0_deg.unwrap_or_else(|| 90.0_f64.clamp(lo, hi));
        if !(lo..=hi).contains(&theta0) {
            return Err(Error::OutOfRange {
                value: theta0,
                min: lo,
                max: hi,
            });
        }
        let model = Self {
            taylor_coeffs,
            center,
            theta_range_deg,
            theta0_deg: theta0,
        };
        let mut prev = model.eval(lo);
        for i in 1..=MONOTONE_SAMPLES {
            let r = model.eval(lo + (hi - lo) * i as f64 / MONOTONE_SAMPLES as f64);
            if !(r > prev) {
                return Err(Error::DegenerateModel(format!(
                    "radius is not strictly increasing near {:.3} deg",
                    lo + (hi - lo) * i as f64 / MONOTONE_SAMPLES as f64
                )));
            }
            prev = r;
        }
        Ok(model)
    }

    /// `r = slope·θ`.
    pub fn linear(slope_px_per_deg: f64, center: [f64; 2], theta_range_deg: [f64; 2]) -> Result<Self> {
        Self::new(vec![0.0, slope_px_per_deg], center, theta_range_deg, None)
    }

    fn eval(&self, theta: f64) -> f64 {
        self.taylor_coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * theta + c)
    }

    pub fn taylor_coeffs(&self) -> &[f64] {
        &self.taylor_coeffs
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    pub fn theta_range_deg(&self) -> [f64; 2] {
        self.theta_range_deg
    }

    pub fn theta0_deg(&self) -> f64 {
        self.theta0_deg
    }

    /// Radial derivative in px per degree.
    pub fn slope(&self, theta: f64) -> f64 {
        self.taylor_coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, &c)| acc * theta + i as f64 * c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn radius_of_fov(model: &CameraModel, theta_deg: f64) -> Result<f64> {
    let [lo, hi] = model.theta_range_deg;
    if !(theta_deg >= lo && theta_deg <= hi) {
        return Err(Error::OutOfRange {
            value: theta_deg,
            min: lo,
            max: hi,
        });
    }
    Ok(model.eval(theta_deg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub fov_samples_deg: Vec<f64>,
    pub factors: Vec<f64>,
    pub theta0_deg: f64,
}

impl ScaleProfile {
    pub fn uniform(fov_samples_deg: &[f64], theta0_deg: f64) -> Self {
        Self {
            fov_samples_deg: fov_samples_deg.to_vec(),
            factors: vec![1.0; fov_samples_deg.len()],
            theta0_deg,
        }
    }

    pub fn max_factor(&self) -> f64 {
        self.factors.iter().copied().fold(0.0, f64::max)
    }
}

/// `S_θ = r(θ₀) / r(θ)` for each sample.
pub fn scale_profile(model: &CameraModel, fov_samples_deg: &[f64]) -> Result<ScaleProfile> {
    let r0 = radius_of_fov(model, model.theta0_deg)?;
    let factors = fov_samples_deg
        .iter()
        .map(|&t| {
            let r = radius_of_fov(model, t)?;
            if r == 0.0 || r0 == 0.0 {
                return Err(Error::DegenerateModel(format!(
                    "zero image radius at {} deg",
                    if r == 0.0 { t } else { model.theta0_deg }
                )));
            }
            Ok(if t == model.theta0_deg { 1.0 } else { r0 / r })
        })
        .collect::<Result<Vec<_>>>()?;
    if factors.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateModel("non-positive scale factor".into()));
    }
    Ok(ScaleProfile {
        fov_samples_deg: fov_samples_deg.to_vec(),
        factors,
        theta0_deg: model.theta0_deg,
    })
}

/// FoV sample index for every image row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowAssignment {
    rows: Vec<usize>,
}

impl RowAssignment {
    pub fn new(rows: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("row assignment is empty"));
        }
        Ok(Self { rows })
    }

    /// Row `i` at `θ_min + i·(θ_max − θ_min)/(h − 1)`, snapped to the nearest
    /// sample; the range spans the first and last sample.
    pub fn linear(height: usize, fov_samples_deg: &[f64]) -> Result<Self> {
        if height == 0 || fov_samples_deg.is_empty() {
            return Err(Error::invalid("need at least one row and one FoV sample"));
        }
        let lo = fov_samples_deg[0];
        let hi = fov_samples_deg[fov_samples_deg.len() - 1];
        let rows = (0..height)
            .map(|i| {
                let t = if height == 1 {
                    lo
                } else {
                    lo + i as f64 * (hi - lo) / (height - 1) as f64
                };
                nearest(fov_samples_deg, t)
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn uniform(height: usize, fov_index: usize) -> Self {
        Self {
            rows: vec![fov_index; height.max(1)],
        }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn max_index(&self) -> usize {
        self.rows.iter().copied().max().unwrap_or(0)
    }

    /// Maximal runs of rows sharing a FoV: `(start, end, fov_index)`.
    pub fn stripes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for r in 1..=self.rows.len() {
            if r == self.rows.len() || self.rows[r] != self.rows[start] {
                out.push((start, r, self.rows[start]));
                start = r;
            }
        }
        out
    }
}

fn nearest(samples: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, s) in samples.iter().enumerate() {
        if (s - t).abs() < (samples[best] - t).abs() {
            best = i;
        }
    }
    best
}

/// Linear-spline node space of `nodes` samples spread over `width` pixels
/// with circular wrap, and the least-squares projection onto it.
struct SplineProjector {
    width: usize,
    nodes: usize,
    taps: Vec<(usize, usize, f64)>,
    solver: CyclicSolver,
}

impl SplineProjector {
    fn new(width: usize, nodes: usize) -> Self {
        let taps: Vec<(usize, usize, f64)> = (0..width)
            .map(|x| {
                let u = (x as f64 + 0.5) * nodes as f64 / width as f64 - 0.5;
                let k = u.floor();
                let f = u - k;
                let k0 = (k as isize).rem_euclid(nodes as isize) as usize;
                (k0, (k0 + 1) % nodes, f)
            })
            .collect();
        let mut gram = vec![0.0; nodes * nodes];
        for &(k0, k1, f) in &taps {
            let (a, b) = (1.0 - f, f);
            gram[k0 * nodes + k0] += a * a;
            gram[k1 * nodes + k1] += b * b;
            gram[k0 * nodes + k1] += a * b;
            gram[k1 * nodes + k0] += a * b;
        }
        Self {
            width,
            nodes,
            taps,
            solver: CyclicSolver::new(&gram, nodes),
        }
    }

    fn project(&self, row: &[f64], out: &mut [f64]) {
        let mut rhs = vec![0.0; self.nodes];
        for (&(k0, k1, f), &v) in self.taps.iter().zip(row) {
            rhs[k0] += (1.0 - f) * v;
            rhs[k1] += f * v;
        }
        let coef = self.solver.solve(&rhs);
        for (o, &(k0, k1, f)) in out.iter_mut().zip(&self.taps) {
            *o = (1.0 - f) * coef[k0] + f * coef[k1];
        }
        debug_assert_eq!(out.len(), self.width);
    }
}

/// Solver for symmetric cyclic tridiagonal systems (Sherman–Morrison on the
/// corner entries); falls back to dense elimination for tiny systems.
enum CyclicSolver {
    Dense { n: usize, m: Vec<f64> },
    Cyclic { diag: Vec<f64>, off: Vec<f64>, corner: f64 },
}

impl CyclicSolver {
    fn new(gram: &[f64], n: usize) -> Self {
        if n < 3 {
            return Self::Dense {
                n,
                m: gram.to_vec(),
            };
        }
        Self::Cyclic {
            diag: (0..n).map(|i| gram[i * n + i]).collect(),
            off: (0..n - 1).map(|i| gram[i * n + i + 1]).collect(),
            corner: gram[(n - 1) * n],
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense { n, m } => dense_solve(m.clone(), rhs.to_vec(), *n),
            Self::Cyclic { diag, off, corner } => {
                let n = diag.len();
                if *corner == 0.0 {
                    return thomas(diag, off, rhs);
                }
                let gamma = -diag[0];
                let mut d = diag.clone();
                d[0] -= gamma;
                d[n - 1] -= corner * corner / gamma;
                let x = thomas(&d, off, rhs);
                let mut u = vec![0.0; n];
                u[0] = gamma;
                u[n - 1] = *corner;
                let z = thomas(&d, off, &u);
                let fact = (x[0] + corner * x[n - 1] / gamma)
                    / (1.0 + z[0] + corner * z[n - 1] / gamma);
                x.iter().zip(&z).map(|(a, b)| a - fact * b).collect()
            }
        }
    }
}

fn thomas(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

fn dense_solve(mut m: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &c| m[a * n + col].abs().total_cmp(&m[c * n + col].abs()))
            .unwrap_or(col);
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let p = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for j in col..n {
                m[r * n + j] -= f * m[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| m[r * n + j] * x[j]).sum();
        x[r] = (b[r] - s) / m[r * n + r];
    }
    x
}

/// Horizontal down/up resampling of every stripe with `S_θ > 1`.
///
/// Each row is replaced by its least-squares projection onto a circular
/// linear-spline space with `round(w / S)` nodes, i.e. downsampled optimally
/// and upsampled bilinearly. The projection is idempotent and preserves row
/// sums. Stripes with `S ≤ 1` pass through.
pub fn unfold_resample(
    image: &ImagePlane,
    profile: &ScaleProfile,
    assignment: &RowAssignment,
) -> Result<ImagePlane> {
    let (h, w, ch) = image.shape();
    if assignment.height() != h {
        return Err(Error::invalid(format!(
            "assignment covers {} rows, image has {h}",
            assignment.height()
        )));
    }
    if assignment.max_index() >= profile.factors.len() {
        return Err(Error::invalid("assignment refers to a FoV outside the profile"));
    }
    let mut out = image.clone();
    let mut row = vec![0.0; w];
    let mut res = vec![0.0; w];
    for (start, end, fi) in assignment.stripes() {
        let s = profile.factors[fi];
        let nodes = ((w as f64 / s).round() as usize).max(1);
        if s <= 1.0 || nodes >= w {
            continue;
        }
        let proj = SplineProjector::new(w, nodes);
        for y in start..end {
            for c in 0..ch {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = image.get(y, x, c);
                }
                proj.project(&row, &mut res);
                for (x, &v) in res.iter().enumerate() {
                    out.set(y, x, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Kernel stretched horizontally by `S` for the unfolded plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedPsf {
    pub kernel: PsfKernel,
    /// Set when the stretched width fell below one pixel.
    pub clamped: bool,
}

/// Bilinear horizontal resampling of `kernel` at `u/S`, centre-aligned;
/// new width is the next odd integer ≥ `width·S`.
pub fn deform_psf(kernel: &PsfKernel, s: f64) -> Result<DeformedPsf> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("scale factor {s} must be positive")));
    }
    let (h, w) = (kernel.height(), kernel.width());
    if s == 1.0 {
        return Ok(DeformedPsf {
            kernel: kernel.clone(),
            clamped: false,
        });
    }
    let target = w as f64 * s;
    let clamped = target < 1.0;
    let raw = (target - 1e-9).ceil().max(1.0) as usize;
    let nw = if raw.is_multiple_of(2) { raw + 1 } else { raw };
    let (cw, cn) = ((w / 2) as f64, (nw / 2) as isize);
    let mut data = vec![0.0; h * nw];
    for u in 0..nw {
        let x = (u as isize - cn) as f64 / s + cw;
        let x0 = x.floor();
        let f = x - x0;
        let x0 = x0 as isize;
        for r in 0..h {
            let at = |c: isize| {
                if c >= 0 && (c as usize) < w {
                    kernel.at(r, c as usize)
                } else {
                    0.0
                }
            };
            data[r * nw + u] = (1.0 - f) * at(x0) + f * at(x0 + 1);
        }
    }
    if data.iter().sum::<f64>() <= 0.0 {
        // Extreme shrink can miss every sample; keep the column sums.
        data.fill(0.0);
        for r in 0..h {
            data[r * nw + nw / 2] = (0..w).map(|c| kernel.at(r, c)).sum();
        }
    }
    let kernel = PsfKernel::new(h, nw, data, kernel.fov_deg, kernel.tag, kernel.energy)?;
    Ok(DeformedPsf { kernel, clamped })
}

pub const DEFAULT_UNFOLD_HEIGHT: usize = 288;
pub const DEFAULT_UNFOLD_WIDTH: usize = 1504;

/// Result of [`unfold_annular`]: the strip and the count of samples that fell
/// outside the source and were zero-filled.
#[derive(Clone, Debug)]
pub struct Unfolded {
    pub image: ImagePlane,
    pub clipped: usize,
}

/// Equirectangular unfolding: row `i` at FoV linear in `[θ_min, θ_max]`,
/// column `j` at azimuth `2πj/w`, bilinear sampling at
/// `(cx + r cos φ, cy + r sin φ)`.
pub fn unfold_annular(
    image: &ImagePlane,
    model: &CameraModel,
    out_height: usize,
    out_width: usize,
) -> Result<Unfolded> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let (h, w, ch) = image.shape();
    let [lo, hi] = model.theta_range_deg;
    let [cx, cy] = model.center;
    let mut data = vec![0.0; out_height * out_width * ch];
    let mut clipped = 0;
    for i in 0..out_height {
        let theta = if out_height == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (out_height - 1) as f64
        };
        let r = radius_of_fov(model, theta.min(hi))?;
        for j in 0..out_width {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / out_width as f64;
            let x = cx + r * phi.cos();
            let y = cy + r * phi.sin();
            let (x0, y0) = (x.floor(), y.floor());
            if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (w - 1) as f64 || y0 + 1.0 > (h - 1) as f64 {
                // Allow samples exactly on the last row/column.
                let on_edge = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
                if !on_edge {
                    clipped += 1;
                    continue;
                }
            }
            let (fx, fy) = (x - x0, y - y0);
            let (xi, yi) = (x0 as usize, y0 as usize);
            let (xj, yj) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
            for c in 0..ch {
                let v = (1.0 - fy) * ((1.0 - fx) * image.get(yi, xi, c) + fx * image.get(yi, xj, c))
                    + fy * ((1.0 - fx) * image.get(yj, xi, c) + fx * image.get(yj, xj, c));
                data[(i * out_width + j) * ch + c] = v;
            }
        }
    }
    let out = ImagePlane::new(out_height, out_width, ch, data, image.color, Geometry::PerspectiveUnfolded)?;
    Ok(Unfolded {
        image: out,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffraction::KernelTag;
    use crate::image::ColorState;

    fn linear_model() -> CameraModel {
        CameraModel::linear(2.0, [0.0, 0.0], [30.0, 100.0]).unwrap()
    }

    #[test]
    fn polynomial_radius() {
        let m = linear_model();
        assert_eq!(radius_of_fov(&m, 45.0).unwrap(), 90.0);
        assert!(radius_of_fov(&m, 30.0).unwrap() < radius_of_fov(&m, 100.0).unwrap());
        assert!(matches!(radius_of_fov(&m, 20.0), Err(Error::OutOfRange { .. })));
        let c = CameraModel::new(vec![0.0, 2.0, 0.01, -0.0001], [0.0, 0.0], [0.0, 90.0], None).unwrap();
        let t: f64 = 60.0;
        let expect = 2.0 * t + 0.01 * t * t - 0.0001 * t * t * t;
        assert!((radius_of_fov(&c, t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_monotone_models() {
        assert!(CameraModel::new(vec![100.0, -1.0], [0.0, 0.0], [0.0, 90.0], None).is_err());
        assert!(CameraModel::new(vec![0.0, 1.0], [0.0, 0.0], [0.0, 90.0], Some(95.0)).is_err());
    }

    #[test]
    fn theta0_rule() {
        assert_eq!(linear_model().theta0_deg(), 90.0);
        let m = CameraModel::linear(2.0, [0.0, 0.0], [10.0, 60.0]).unwrap();
        assert_eq!(m.theta0_deg(), 60.0);
    }

    #[test]
    fn scale_factors_follow_radius_ratio() {
        let p = scale_profile(&linear_model(), &[45.0, 90.0, 100.0]).unwrap();
        assert_eq!(p.factors[1], 1.0);
        assert!((p.factors[0] - 2.0).abs() < 1e-12);
        assert!((p.factors[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn degenerate_radius_is_reported() {
        let m = CameraModel::linear(2.0, [0.0, 0.0], [0.0, 90.0]).unwrap();
        assert!(matches!(
            scale_profile(&m, &[0.0, 45.0]),
            Err(Error::DegenerateModel(_))
        ));
    }

    #[test]
    fn linear_assignment_snaps_to_samples() {
        let fovs = [30.0, 65.0, 100.0];
        let a = RowAssignment::linear(7, &fovs).unwrap();
        assert_eq!(a.rows(), &[0, 0, 1, 1, 1, 2, 2][..]);
        assert_eq!(a.stripes(), vec![(0, 2, 0), (2, 5, 1), (5, 7, 2)]);
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImagePlane {
        ImagePlane::from_fn(h, w, 1, ColorState::LinearRgb, Geometry::PerspectiveUnfolded, |y, x, _| f(y, x)).unwrap()
    }

    #[test]
    fn resample_identity_and_pass_through() {
        let img = gray(4, 32, |y, x| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let a = RowAssignment::uniform(4, 0);
        let ones = ScaleProfile::uniform(&[50.0], 90.0);
        assert_eq!(unfold_resample(&img, &ones, &a).unwrap(), img);
        let mut p = ones.clone();
        p.factors[0] = 0.9;
        assert_eq!(unfold_resample(&img, &p, &a).unwrap(), img);
    }

    #[test]
    fn resample_spreads_line_and_keeps_energy() {
        let img = gray(3, 64, |_, x| if x == 20 { 1.0 } else { 0.0 });
        let mut p = ScaleProfile::uniform(&[50.0], 90.0);
        p.factors[0] = 2.0;
        let out = unfold_resample(&img, &p, &RowAssignment::uniform(3, 0)).unwrap();
        let row: Vec<f64> = (0..64).map(|x| out.get(1, x, 0)).collect();
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 0.01);
        let peak = row.iter().copied().fold(0.0, f64::max);
        // Effective width = energy / peak.
        assert!(sum / peak >= 2.0, "width {}", sum / peak);
    }

    #[test]
    fn resample_is_idempotent() {
        let img = gray(2, 50, |y, x| ((x * 13 + y * 5) % 17) as f64 / 16.0);
        for s in [2.0, 3.0, 1.7] {
            let mut p = ScaleProfile::uniform(&[50.0], 90.0);
            p.factors[0] = s;
            let a = RowAssignment::uniform(2, 0);
            let once = unfold_resample(&img, &p, &a).unwrap();
            let twice = unfold_resample(&once, &p, &a).unwrap();
            for (x, y) in once.data().iter().zip(twice.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        for (w, n) in [(10, 3), (17, 5), (9, 2), (40, 13)] {
            let p = SplineProjector::new(w, n);
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
            let mut gram = vec![0.0; n * n];
            for &(k0, k1, f) in &p.taps {
                gram[k0 * n + k0] += (1.0 - f) * (1.0 - f);
                gram[k1 * n + k1] += f * f;
                gram[k0 * n + k1] += (1.0 - f) * f;
                gram[k1 * n + k0] += (1.0 - f) * f;
            }
            let a = p.solver.solve(&rhs);
            let b = dense_solve(gram, rhs, n);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{w} {n}");
            }
        }
    }

    fn gaussian_kernel(size: usize, sigma: f64) -> PsfKernel {
        let c = (size / 2) as f64;
        let data = (0..size * size)
            .map(|i| {
                let (r, col) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(r * r + col * col) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        PsfKernel::new(size, size, data, 40.0, KernelTag::WavelengthNm(550.0), 1.0).unwrap()
    }

    fn moments(k: &PsfKernel) -> (f64, f64) {
        let (cy, cx) = ((k.height() / 2) as f64, (k.width() / 2) as f64);
        let (mut vx, mut vy) = (0.0, 0.0);
        for r in 0..k.height() {
            for c in 0..k.width() {
                vx += k.at(r, c) * (c as f64 - cx).powi(2);
                vy += k.at(r, c) * (r as f64 - cy).powi(2);
            }
        }
        (vx, vy)
    }

    #[test]
    fn deform_unit_scale_is_identity() {
        let k = gaussian_kernel(9, 1.5);
        let d = deform_psf(&k, 1.0).unwrap().kernel;
        for (a, b) in k.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn deform_stretches_horizontal_moment() {
        let k = gaussian_kernel(21, 2.5);
        let d = deform_psf(&k, 2.0).unwrap();
        assert!(!d.clamped);
        assert_eq!(d.kernel.width(), 43);
        let (vx0, vy0) = moments(&k);
        let (vx1, vy1) = moments(&d.kernel);
        assert!((vx1 / vx0 / 4.0 - 1.0).abs() < 0.05, "{}", vx1 / vx0);
        assert!((vy1 / vy0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn deform_keeps_unit_sum() {
        let k = gaussian_kernel(7, 1.0);
        for s in [0.05, 0.3, 0.9, 1.1, 2.5, 4.0] {
            let d = deform_psf(&k, s).unwrap();
            assert!((d.kernel.sum() - 1.0).abs() < 1e-9);
            assert!(d.kernel.data().iter().all(|v| *v >= 0.0));
            assert_eq!(d.kernel.width() % 2, 1);
            assert_eq!(d.clamped, 7.0 * s < 1.0);
        }
        assert!(deform_psf(&k, 0.0).is_err());
    }

    fn ring_model() -> CameraModel {
        CameraModel::new(vec![0.0, 1.2], [100.5, 100.5], [20.0, 75.0], None).unwrap()
    }

    fn ring_image(model: &CameraModel) -> ImagePlane {
        let [cx, cy] = model.center();
        ImagePlane::from_fn(202, 202, 3, ColorState::Srgb, Geometry::Annular, |y, x, c| {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            (r / 10.0 + c as f64).sin() * 0.5 + 0.5
        })
        .unwrap()
    }

    #[test]
    fn rings_unfold_to_constant_rows() {
        let m = ring_model();
        let img = ring_image(&m);
        let u = unfold_annular(&img, &m, 40, 360).unwrap();
        assert_eq!(u.clipped, 0);
        for i in 0..40 {
            for c in 0..3 {
                let row: Vec<f64> = (0..360).map(|j| u.image.get(i, j, c)).collect();
                let mean = row.iter().sum::<f64>() / 360.0;
                let dev = row.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
                // Bilinear interpolation of a smooth radial profile.
                assert!(dev < 2e-2, "row {i} dev {dev}");
            }
        }
    }

    #[test]
    fn unfold_default_size() {
        let m = ring_model();
        let u = unfold_annular(&ring_image(&m), &m, DEFAULT_UNFOLD_HEIGHT, DEFAULT_UNFOLD_WIDTH).unwrap();
        assert_eq!(u.image.shape(), (288, 1504, 3));
    }

    #[test]
    fn rotation_becomes_column_shift() {
        let m = ring_model();
        let [cx, cy] = m.center();
        let src = ImagePlane::from_fn(202, 202, 1, ColorState::Srgb, Geometry::Annular, |y, x, _| {
            let a = (y as f64 - cy).atan2(x as f64 - cx);
            0.5 + 0.4 * (3.0 * a).sin() * (1.0 + 0.2 * (x as f64 * 0.05).cos())
        })
        .unwrap();
        // Rotate by +90 degrees about the centre: (x, y) -> (cx - (y - cy), cy + (x - cx)).
        let rot = ImagePlane::from_fn(202, 202, 1, ColorState::Srgb, Geometry::Annular, |y, x, _| {
            let sx = (cx + (y as f64 - cy)).round() as usize;
            let sy = (cy - (x as f64 - cx)).round() as usize;
            src.get(sy, sx, 0)
        })
        .unwrap();
        let w = 400;
        let a = unfold_annular(&src, &m, 20, w).unwrap().image;
        let b = unfold_annular(&rot, &m, 20, w).unwrap().image;
        let err = |shift: usize| -> f64 {
            (0..20)
                .flat_map(|i| (0..w).map(move |j| (i, j)))
                .map(|(i, j)| (b.get(i, (j + shift) % w, 0) - a.get(i, j, 0)).powi(2))
                .sum()
        };
        let best = (0..w).min_by(|&p, &q| err(p).total_cmp(&err(q))).unwrap();
        let d = (best as isize - (w / 4) as isize).abs();
        assert!(d <= 1, "best shift {best}");
    }

    #[test]
    fn outside_samples_are_counted() {
        let m = CameraModel::new(vec![0.0, 3.0], [50.0, 50.0], [10.0, 60.0], None).unwrap();
        let img = ImagePlane::filled(101, 101, 1, 1.0, ColorState::Srgb, Geometry::Annular).unwrap();
        let u = unfold_annular(&img, &m, 10, 64).unwrap();
        assert!(u.clipped > 0);
        assert_eq!(u.image.get(9, 0, 0), 0.0);
    }

    #[test]
    fn camera_json_round_trip() {
        let m = ring_model();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(CameraModel::from_json_str(&s).unwrap(), m);
        let bad = r#"{"taylor_coeffs":[5,-1],"center":[0,0],"theta_range_deg":[0,10]}"#;
        assert!(CameraModel::from_json_str(bad).is_err());
    }
}
