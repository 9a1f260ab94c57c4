//! Optical prescriptions: sampling, geometry, aberrations, illumination and
//! the camera model of one panoramic annular design.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::diffraction::{spot_rms_table, support_from_spot, ImagingGeometry};
use crate::error::{Error, Result};
use crate::projection::CameraModel;
use crate::zernike::{terms, ZernikeField, FRINGE_TERMS};

/// Environment variable naming the default prescription file.
pub const PRESCRIPTION_ENV: &str = "PALSIM_PRESCRIPTION";

#[derive(Clone, Debug, PartialEq)]
pub struct OpticalPrescription {
    pub fov_samples_deg: Vec<f64>,
    pub wavelengths_nm: Vec<f64>,
    pub aperture_mm: f64,
    pub pupil_to_image_mm: f64,
    pub pixel_pitch_um: f64,
    pub grid_size: usize,
    /// Pupil grid used for Strehl ratios (padded 4x).
    pub strehl_grid: usize,
    pub strehl_wavelength_nm: f64,
    pub illumination: Vec<f64>,
    pub spot_rms_um: Vec<f64>,
    pub camera: CameraModel,
    pub zernike: ZernikeField,
}

#[derive(Serialize, Deserialize)]
struct PrescriptionFile {
    fov_samples_deg: Vec<f64>,
    wavelengths_nm: Vec<f64>,
    aperture_mm: f64,
    pupil_to_image_mm: f64,
    pixel_pitch_um: f64,
    #[serde(default = "default_grid")]
    grid_size: usize,
    #[serde(default = "default_strehl_grid")]
    strehl_grid: usize,
    #[serde(default = "default_strehl_wavelength")]
    strehl_wavelength_nm: f64,
    illumination: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spot_rms_um: Option<Vec<f64>>,
    camera: CameraModel,
    zernike: ZernikeSource,
}

/// Coefficients inline, or a path (JSON or CSV) relative to the
/// prescription file.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ZernikeSource {
    Path(PathBuf),
    Inline(ZernikeField),
}

fn default_grid() -> usize {
    crate::zernike::DEFAULT_GRID
}

fn default_strehl_grid() -> usize {
    256
}

fn default_strehl_wavelength() -> f64 {
    550.0
}

impl OpticalPrescription {
    pub fn f_number(&self) -> f64 {
        self.pupil_to_image_mm / self.aperture_mm
    }

    pub fn imaging_geometry(&self) -> ImagingGeometry {
        ImagingGeometry {
            pupil_to_image_mm: self.pupil_to_image_mm,
            pixel_pitch_um: self.pixel_pitch_um,
        }
    }

    /// Kernel side per FoV from the spot-size table.
    pub fn kernel_supports(&self) -> Vec<usize> {
        self.spot_rms_um
            .iter()
            .map(|&s| support_from_spot(s, self.pixel_pitch_um))
            .collect()
    }

    /// Index of the wavelength sample closest to the Strehl wavelength.
    pub fn strehl_wavelength_index(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.wavelengths_nm.iter().enumerate() {
            if (w - self.strehl_wavelength_nm).abs()
                < (self.wavelengths_nm[best] - self.strehl_wavelength_nm).abs()
            {
                best = i;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("aperture_mm", self.aperture_mm)?;
        positive("pupil_to_image_mm", self.pupil_to_image_mm)?;
        positive("pixel_pitch_um", self.pixel_pitch_um)?;
        positive("strehl_wavelength_nm", self.strehl_wavelength_nm)?;
        for (name, n) in [("grid_size", self.grid_size), ("strehl_grid", self.strehl_grid)] {
            if n < 32 || !n.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "{name} must be a power of two >= 32, got {n}"
                )));
            }
        }
        let nf = self.fov_samples_deg.len();
        if self.illumination.len() != nf || self.spot_rms_um.len() != nf {
            return Err(Error::PrescriptionIncomplete(format!(
                "{nf} FoV samples but {} illumination and {} spot values",
                self.illumination.len(),
                self.spot_rms_um.len()
            )));
        }
        if self.illumination.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::invalid("illumination must lie in (0, 1]"));
        }
        if self.spot_rms_um.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("spot radii must be finite and >= 0"));
        }
        if self.zernike.fov_samples() != self.fov_samples_deg.as_slice()
            || self.zernike.wavelength_samples() != self.wavelengths_nm.as_slice()
        {
            return Err(Error::PrescriptionIncomplete(
                "coefficient table sampling differs from the prescription sampling".into(),
            ));
        }
        let [lo, hi] = self.camera.theta_range_deg();
        if self
            .fov_samples_deg
            .iter()
            .any(|&t| t < lo - 1e-9 || t > hi + 1e-9)
        {
            return Err(Error::invalid("FoV samples fall outside the camera range"));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str, base_dir: &Path) -> Result<Self> {
        let file: PrescriptionFile = serde_json::from_str(s)?;
        let zernike = match file.zernike {
            ZernikeSource::Inline(z) => z,
            ZernikeSource::Path(p) => {
                let path = if p.is_absolute() { p } else { base_dir.join(p) };
                read_zernike(&path)?
            }
        };
        let spot_rms_um = match file.spot_rms_um {
            Some(s) => s,
            None => spot_rms_table(&zernike, file.pupil_to_image_mm / file.aperture_mm)?,
        };
        let p = Self {
            fov_samples_deg: file.fov_samples_deg,
            wavelengths_nm: file.wavelengths_nm,
            aperture_mm: file.aperture_mm,
            pupil_to_image_mm: file.pupil_to_image_mm,
            pixel_pitch_um: file.pixel_pitch_um,
            grid_size: file.grid_size,
            strehl_grid: file.strehl_grid,
            strehl_wavelength_nm: file.strehl_wavelength_nm,
            illumination: file.illumination,
            spot_rms_um,
            camera: file.camera,
            zernike,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Prescription named by [`PRESCRIPTION_ENV`], else the reference design.
    pub fn from_env_or_reference() -> Result<Self> {
        match std::env::var_os(PRESCRIPTION_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::reference()),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = PrescriptionFile {
            fov_samples_deg: self.fov_samples_deg.clone(),
            wavelengths_nm: self.wavelengths_nm.clone(),
            aperture_mm: self.aperture_mm,
            pupil_to_image_mm: self.pupil_to_image_mm,
            pixel_pitch_um: self.pixel_pitch_um,
            grid_size: self.grid_size,
            strehl_grid: self.strehl_grid,
            strehl_wavelength_nm: self.strehl_wavelength_nm,
            illumination: self.illumination.clone(),
            spot_rms_um: Some(self.spot_rms_um.clone()),
            camera: self.camera.clone(),
            zernike: ZernikeSource::Inline(self.zernike.clone()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Same design with a different coefficient table; spot sizes and
    /// supports are kept.
    pub fn with_zernike(&self, zernike: ZernikeField) -> Result<Self> {
        let mut p = self.clone();
        p.zernike = zernike;
        p.validate()?;
        Ok(p)
    }

    /// Keeps only the listed FoV and wavelength samples, in the given order.
    pub fn subset(&self, fov_indices: &[usize], wavelength_indices: &[usize]) -> Result<Self> {
        let nf = self.fov_samples_deg.len();
        let nw = self.wavelengths_nm.len();
        if fov_indices.iter().any(|&i| i >= nf) || wavelength_indices.iter().any(|&i| i >= nw) {
            return Err(Error::invalid("sample index out of range"));
        }
        let fovs: Vec<f64> = fov_indices.iter().map(|&i| self.fov_samples_deg[i]).collect();
        let wls: Vec<f64> = wavelength_indices.iter().map(|&i| self.wavelengths_nm[i]).collect();
        let mut coeffs = Vec::with_capacity(fovs.len() * wls.len());
        for &fi in fov_indices {
            for &wi in wavelength_indices {
                coeffs.push(*self.zernike.cell(fi, wi)?);
            }
        }
        let p = OpticalPrescription {
            fov_samples_deg: fovs.clone(),
            wavelengths_nm: wls.clone(),
            illumination: fov_indices.iter().map(|&i| self.illumination[i]).collect(),
            spot_rms_um: fov_indices.iter().map(|&i| self.spot_rms_um[i]).collect(),
            zernike: ZernikeField::new(fovs, wls, coeffs)?,
            ..self.clone()
        };
        p.validate()?;
        Ok(p)
    }

    /// Built-in 30°–100° design sampled every 0.7° and every 10 nm from 400
    /// to 700 nm, f/2.8, 4 µm pixels.
    ///
    /// The aberration table is synthetic: smooth low-order terms growing
    /// towards the field edges plus axial and lateral colour, sized so kernel
    /// supports run from a few pixels at the centre of the range to about 31
    /// pixels at its ends.
    pub fn reference() -> Self {
        static REFERENCE: OnceLock<OpticalPrescription> = OnceLock::new();
        REFERENCE
            .get_or_init(|| build_reference().expect("reference prescription is valid"))
            .clone()
    }
}

fn read_zernike(path: &Path) -> Result<ZernikeField> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        ZernikeField::from_csv_reader(file)
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ZernikeField::from_json_str(&text)
    }
}

pub const REFERENCE_FOV_COUNT: usize = 101;
pub const REFERENCE_WAVELENGTH_COUNT: usize = 31;

pub fn reference_fov_samples() -> Vec<f64> {
    (0..REFERENCE_FOV_COUNT)
        .map(|i| (300 + 7 * i) as f64 / 10.0)
        .collect()
}

pub fn reference_wavelengths() -> Vec<f64> {
    (0..REFERENCE_WAVELENGTH_COUNT)
        .map(|i| (400 + 10 * i) as f64)
        .collect()
}

/// Reference camera: 180 px at 30°, 500 px at 100°.
pub fn reference_camera() -> CameraModel {
    CameraModel::new(
        vec![300.0 / 7.0, 32.0 / 7.0],
        [512.0, 512.0],
        [30.0, 100.0],
        Some(90.0),
    )
    .expect("reference camera is monotone")
}

/// Synthetic aberration terms as optical path differences in µm for a
/// normalized field coordinate `h ∈ [−1, 1]` (0 at the centre of the range)
/// and a normalized wavelength `c ∈ [−1, 1]` (0 at 550 nm).
fn reference_opd_um(h: f64, c: f64) -> [f64; FRINGE_TERMS] {
    let mut z = [0.0; FRINGE_TERMS];
    let h2 = h * h;
    z[terms::TILT_X - 1] = 0.9 * h * c;
    z[terms::DEFOCUS - 1] = 2.2 * h2 + 0.35 * c;
    z[terms::ASTIGMATISM_0 - 1] = 2.4 * h2;
    z[terms::COMA_X - 1] = 1.2 * h * h2;
    z[terms::SPHERICAL - 1] = 0.12 + 0.25 * h2;
    z[11] = 0.35 * h2 * h2;
    z[13] = 0.2 * h * h2;
    z[15] = 0.03;
    z
}

fn build_reference() -> Result<OpticalPrescription> {
    let fovs = reference_fov_samples();
    let wls = reference_wavelengths();
    let mid = 0.5 * (fovs[0] + fovs[fovs.len() - 1]);
    let half = 0.5 * (fovs[fovs.len() - 1] - fovs[0]);
    let mut field = ZernikeField::zeros(fovs.clone(), wls.clone())?;
    for (fi, &t) in fovs.iter().enumerate() {
        let h = (t - mid) / half;
        for (wi, &w) in wls.iter().enumerate() {
            let opd = reference_opd_um(h, (w - 550.0) / 150.0);
            let cell = field.cell_mut(fi, wi)?;
            for (dst, um) in cell.iter_mut().zip(opd) {
                *dst = um / (w * 1e-3);
            }
        }
    }
    let camera = reference_camera();
    let pitch = 4.0;
    // Image distance from the radial scale at the reference angle.
    let d_mm = camera.slope(90.0) * (180.0 / std::f64::consts::PI) * pitch * 1e-3;
    let aperture = d_mm / 2.8;
    let illumination = fovs
        .iter()
        .map(|&t| {
            let h = (t - mid) / half;
            1.0 - 0.35 * h * h
        })
        .collect();
    let spot = spot_rms_table(&field, 2.8)?;
    let p = OpticalPrescription {
        fov_samples_deg: fovs,
        wavelengths_nm: wls,
        aperture_mm: aperture,
        pupil_to_image_mm: d_mm,
        pixel_pitch_um: pitch,
        grid_size: crate::zernike::DEFAULT_GRID,
        strehl_grid: default_strehl_grid(),
        strehl_wavelength_nm: 550.0,
        illumination,
        spot_rms_um: spot,
        camera,
        zernike: field,
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sampling() {
        let p = OpticalPrescription::reference();
        assert_eq!(p.fov_samples_deg.len(), 101);
        assert_eq!(p.fov_samples_deg[0], 30.0);
        assert_eq!(p.fov_samples_deg[100], 100.0);
        assert!((p.fov_samples_deg[1] - 30.7).abs() < 1e-12);
        assert_eq!(p.wavelengths_nm.len(), 31);
        assert_eq!(p.wavelengths_nm[0], 400.0);
        assert_eq!(p.wavelengths_nm[30], 700.0);
        assert_eq!(p.zernike.cells().len(), 101 * 31);
        assert!((p.f_number() - 2.8).abs() < 1e-12);
        assert_eq!(p.wavelengths_nm[p.strehl_wavelength_index()], 550.0);
    }

    #[test]
    fn reference_supports_span_a_useful_range() {
        let s = OpticalPrescription::reference().kernel_supports();
        let (lo, hi) = (*s.iter().min().unwrap(), *s.iter().max().unwrap());
        assert!((3..=9).contains(&lo), "smallest support {lo}");
        assert!((21..=41).contains(&hi), "largest support {hi}");
    }

    #[test]
    fn reference_camera_radii() {
        let c = reference_camera();
        assert!((crate::projection::radius_of_fov(&c, 30.0).unwrap() - 180.0).abs() < 1e-9);
        assert!((crate::projection::radius_of_fov(&c, 100.0).unwrap() - 500.0).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_inline_and_by_path() {
        let mut p = OpticalPrescription::reference();
        let z = ZernikeField::zeros(vec![40.0, 60.0], vec![500.0, 600.0]).unwrap();
        p.fov_samples_deg = vec![40.0, 60.0];
        p.wavelengths_nm = vec![500.0, 600.0];
        p.illumination = vec![1.0, 0.9];
        p.spot_rms_um = vec![3.0, 5.0];
        p.zernike = z.clone();
        let dir = tempfile::tempdir().unwrap();
        let s = p.to_json_string().unwrap();
        assert_eq!(OpticalPrescription::from_json_str(&s, dir.path()).unwrap(), p);

        std::fs::write(dir.path().join("z.json"), z.to_json_string().unwrap()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["zernike"] = serde_json::Value::String("z.json".into());
        let path = dir.path().join("p.json");
        std::fs::write(&path, v.to_string()).unwrap();
        assert_eq!(OpticalPrescription::load(&path).unwrap(), p);
    }

    #[test]
    fn mismatched_tables_are_incomplete() {
        let mut p = OpticalPrescription::reference();
        p.illumination.pop();
        assert!(matches!(p.validate(), Err(Error::PrescriptionIncomplete(_))));
    }
}
