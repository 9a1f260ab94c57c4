//! Fringe-ordered Zernike circle polynomials and per-FoV coefficient tables.
//!
//! Terms follow the 37-term Fringe ordering used by optical design software
//! with unnormalized radial polynomials, so `Z4 = 2ρ² − 1` and
//! `Z9 = 6ρ⁴ − 6ρ² + 1`.
//!
//! | j | n | m | angular | j | n | m | angular |
//! |---|---|---|---------|---|---|---|---------|
//! | 1 | 0 | 0 | –       | 20 | 5 | 3 | sin |
//! | 2 | 1 | 1 | cos     | 21 | 6 | 2 | cos |
//! | 3 | 1 | 1 | sin     | 22 | 6 | 2 | sin |
//! | 4 | 2 | 0 | –       | 23 | 7 | 1 | cos |
//! | 5 | 2 | 2 | cos     | 24 | 7 | 1 | sin |
//! | 6 | 2 | 2 | sin     | 25 | 8 | 0 | –   |
//! | 7 | 3 | 1 | cos     | 26 | 5 | 5 | cos |
//! | 8 | 3 | 1 | sin     | 27 | 5 | 5 | sin |
//! | 9 | 4 | 0 | –       | 28 | 6 | 4 | cos |
//! | 10 | 3 | 3 | cos    | 29 | 6 | 4 | sin |
//! | 11 | 3 | 3 | sin    | 30 | 7 | 3 | cos |
//! | 12 | 4 | 2 | cos    | 31 | 7 | 3 | sin |
//! | 13 | 4 | 2 | sin    | 32 | 8 | 2 | cos |
//! | 14 | 5 | 1 | cos    | 33 | 8 | 2 | sin |
//! | 15 | 5 | 1 | sin    | 34 | 9 | 1 | cos |
//! | 16 | 6 | 0 | –      | 35 | 9 | 1 | sin |
//! | 17 | 4 | 4 | cos    | 36 | 10 | 0 | –  |
//! | 18 | 4 | 4 | sin    | 37 | 12 | 0 | –  |
//! | 19 | 5 | 3 | cos    |    |   |   |     |
//!
//! Coefficients are stored in waves.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const FRINGE_TERMS: usize = 37;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Angular {
    None,
    Cos,
    Sin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FringeTerm {
    pub radial_order: u32,
    pub azimuthal_order: u32,
    pub angular: Angular,
}

const FRINGE_TABLE: [(u32, u32, Angular); FRINGE_TERMS] = {
    use Angular::{Cos as C, None as N, Sin as S};
    [
        (0, 0, N),
        (1, 1, C),
        (1, 1, S),
        (2, 0, N),
        (2, 2, C),
        (2, 2, S),
        (3, 1, C),
        (3, 1, S),
        (4, 0, N),
        (3, 3, C),
        (3, 3, S),
        (4, 2, C),
        (4, 2, S),
        (5, 1, C),
        (5, 1, S),
        (6, 0, N),
        (4, 4, C),
        (4, 4, S),
        (5, 3, C),
        (5, 3, S),
        (6, 2, C),
        (6, 2, S),
        (7, 1, C),
        (7, 1, S),
        (8, 0, N),
        (5, 5, C),
        (5, 5, S),
        (6, 4, C),
        (6, 4, S),
        (7, 3, C),
        (7, 3, S),
        (8, 2, C),
        (8, 2, S),
        (9, 1, C),
        (9, 1, S),
        (10, 0, N),
        (12, 0, N),
    ]
};

/// Well-known Fringe indices (1-based).
pub mod terms {
    pub const PISTON: usize = 1;
    pub const TILT_X: usize = 2;
    pub const TILT_Y: usize = 3;
    pub const DEFOCUS: usize = 4;
    pub const ASTIGMATISM_0: usize = 5;
    pub const ASTIGMATISM_45: usize = 6;
    pub const COMA_X: usize = 7;
    pub const COMA_Y: usize = 8;
    pub const SPHERICAL: usize = 9;
}

/// Looks up the (n, m, angular) triple of 1-based Fringe index `j`.
pub fn fringe_term(j: usize) -> Result<FringeTerm> {
    if !(1..=FRINGE_TERMS).contains(&j) {
        return Err(Error::invalid(format!(
            "Fringe index {j} outside 1..={FRINGE_TERMS}"
        )));
    }
    let (n, m, angular) = FRINGE_TABLE[j - 1];
    Ok(FringeTerm {
        radial_order: n,
        azimuthal_order: m,
        angular,
    })
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Coefficients of R_n^m in powers ρ^(n−2k), k = 0..=(n−m)/2.
fn radial_coefficients(n: u32, m: u32) -> Vec<f64> {
    (0..=(n - m) / 2)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - k)
                / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k))
        })
        .collect()
}

impl FringeTerm {
    pub fn radial(&self, rho: f64) -> f64 {
        let n = self.radial_order;
        let m = self.azimuthal_order;
        radial_coefficients(n, m)
            .iter()
            .enumerate()
            .map(|(k, c)| c * rho.powi((n - 2 * k as u32) as i32))
            .sum()
    }

    pub fn eval(&self, rho: f64, theta: f64) -> f64 {
        let m = f64::from(self.azimuthal_order);
        let ang = match self.angular {
            Angular::None => 1.0,
            Angular::Cos => (m * theta).cos(),
            Angular::Sin => (m * theta).sin(),
        };
        self.radial(rho) * ang
    }
}

/// Evaluates Fringe term `j` at polar pupil coordinates (no disk masking).
pub fn fringe(j: usize, rho: f64, theta: f64) -> Result<f64> {
    Ok(fringe_term(j)?.eval(rho, theta))
}

/// Square sampling of the exit pupil. The unit disk inscribes the grid and
/// samples sit at pixel centres: `x = (col + ½ − n/2)·2/n`,
/// `y = (row + ½ − n/2)·2/n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PupilGrid {
    n: usize,
    diameter_mm: f64,
}

pub const DEFAULT_GRID: usize = 512;

impl PupilGrid {
    pub fn new(n: usize, diameter_mm: f64) -> Result<Self> {
        if n < 32 || !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "pupil grid side {n} must be a power of two >= 32"
            )));
        }
        if !(diameter_mm > 0.0 && diameter_mm.is_finite()) {
            return Err(Error::invalid("pupil diameter must be positive"));
        }
        Ok(Self { n, diameter_mm })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn diameter_mm(&self) -> f64 {
        self.diameter_mm
    }

    /// Physical pupil sample spacing Δx' in mm.
    pub fn spacing_mm(&self) -> f64 {
        self.diameter_mm / self.n as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5 - self.n as f64 / 2.0) * 2.0 / self.n as f64
    }

    /// Polar coordinates of a sample, `None` outside the unit disk.
    #[inline]
    pub fn polar(&self, row: usize, col: usize) -> Option<(f64, f64)> {
        let x = self.coord(col);
        let y = self.coord(row);
        let rho = x.hypot(y);
        (rho <= 1.0).then(|| (rho, y.atan2(x)))
    }

    pub fn disk_mask(&self) -> Vec<bool> {
        (0..self.n * self.n)
            .map(|k| self.polar(k / self.n, k % self.n).is_some())
            .collect()
    }
}

/// Basis maps evaluated once on the disk samples of a grid.
#[derive(Clone, Debug)]
pub struct ZernikeBasis {
    grid: PupilGrid,
    disk: Vec<u32>,
    values: Vec<Vec<f64>>,
}

impl ZernikeBasis {
    pub fn new(grid: PupilGrid, n_terms: usize) -> Result<Self> {
        if !(1..=FRINGE_TERMS).contains(&n_terms) {
            return Err(Error::invalid(format!(
                "term count {n_terms} outside 1..={FRINGE_TERMS}"
            )));
        }
        let n = grid.size();
        let mut disk = Vec::new();
        let mut polar = Vec::new();
        for row in 0..n {
            for col in 0..n {
                if let Some(p) = grid.polar(row, col) {
                    disk.push((row * n + col) as u32);
                    polar.push(p);
                }
            }
        }
        let values = (1..=n_terms)
            .map(|j| {
                let t = fringe_term(j).expect("index within table");
                let coeffs = radial_coefficients(t.radial_order, t.azimuthal_order);
                let m = f64::from(t.azimuthal_order);
                polar
                    .iter()
                    .map(|&(rho, theta)| {
                        // R = ρ^m · Σ c_k (ρ²)^((n−m)/2 − k), Horner from the highest power.
                        let r2 = rho * rho;
                        let poly = coeffs.iter().fold(0.0, |acc, c| acc * r2 + c);
                        let radial = poly * rho.powi(t.azimuthal_order as i32);
                        match t.angular {
                            Angular::None => radial,
                            Angular::Cos => radial * (m * theta).cos(),
                            Angular::Sin => radial * (m * theta).sin(),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { grid, disk, values })
    }

    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    pub fn n_terms(&self) -> usize {
        self.values.len()
    }

    /// Flat indices of disk samples.
    pub fn disk_indices(&self) -> &[u32] {
        &self.disk
    }

    /// Full `n x n` map of 0-based term `k`, zero outside the disk.
    pub fn term_map(&self, k: usize) -> Vec<f64> {
        let n = self.grid.size();
        let mut map = vec![0.0; n * n];
        for (&i, &v) in self.disk.iter().zip(&self.values[k]) {
            map[i as usize] = v;
        }
        map
    }

    /// `Σ_k coeffs[k]·Z_k` on the disk samples only.
    pub fn combine_disk(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.disk.len()];
        for (c, values) in coeffs.iter().zip(&self.values) {
            if *c == 0.0 {
                continue;
            }
            for (wi, v) in w.iter_mut().zip(values) {
                *wi += c * v;
            }
        }
        w
    }

    /// `Σ_k coeffs[k]·Z_k` as a full grid map, zero outside the disk.
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.grid.size();
        let mut map = vec![0.0; n * n];
        for (&i, v) in self.disk.iter().zip(self.combine_disk(coeffs)) {
            map[i as usize] = v;
        }
        map
    }
}

/// Stack of the first `n_terms` Fringe maps on `grid`.
pub fn eval_basis(grid: &PupilGrid, n_terms: usize) -> Result<Vec<Vec<f64>>> {
    let basis = ZernikeBasis::new(*grid, n_terms)?;
    Ok((0..n_terms).map(|k| basis.term_map(k)).collect())
}

/// How perturbation draws are shared across the wavelength axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// One draw per (FoV, term), applied to every wavelength.
    #[default]
    SharedAcrossWavelengths,
    /// Independent draw per (FoV, wavelength, term).
    PerWavelength,
}

/// Coefficient table `C[fov][wavelength][term]` in waves.
#[derive(Clone, Debug, PartialEq)]
pub struct ZernikeField {
    fov_samples: Vec<f64>,
    wavelength_samples: Vec<f64>,
    coeffs: Vec<[f64; FRINGE_TERMS]>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl ZernikeField {
    pub fn new(
        fov_samples: Vec<f64>,
        wavelength_samples: Vec<f64>,
        coeffs: Vec<[f64; FRINGE_TERMS]>,
    ) -> Result<Self> {
        if fov_samples.is_empty() || wavelength_samples.is_empty() {
            return Err(Error::invalid("field needs at least one FoV and wavelength"));
        }
        if !strictly_increasing(&fov_samples) {
            return Err(Error::invalid("FoV samples must be strictly increasing"));
        }
        if !strictly_increasing(&wavelength_samples) {
            return Err(Error::invalid(
                "wavelength samples must be strictly increasing",
            ));
        }
        if coeffs.len() != fov_samples.len() * wavelength_samples.len() {
            return Err(Error::PrescriptionIncomplete(format!(
                "{} coefficient cells for {} FoVs x {} wavelengths",
                coeffs.len(),
                fov_samples.len(),
                wavelength_samples.len()
            )));
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(Self {
            fov_samples,
            wavelength_samples,
            coeffs,
        })
    }

    pub fn zeros(fov_samples: Vec<f64>, wavelength_samples: Vec<f64>) -> Result<Self> {
        let cells = fov_samples.len() * wavelength_samples.len();
        Self::new(
            fov_samples,
            wavelength_samples,
            vec![[0.0; FRINGE_TERMS]; cells],
        )
    }

    pub fn fov_samples(&self) -> &[f64] {
        &self.fov_samples
    }

    pub fn wavelength_samples(&self) -> &[f64] {
        &self.wavelength_samples
    }

    pub fn n_fov(&self) -> usize {
        self.fov_samples.len()
    }

    pub fn n_wavelengths(&self) -> usize {
        self.wavelength_samples.len()
    }

    fn offset(&self, fov: usize, wl: usize) -> Result<usize> {
        if fov >= self.n_fov() || wl >= self.n_wavelengths() {
            return Err(Error::invalid(format!(
                "cell ({fov}, {wl}) outside {}x{} field",
                self.n_fov(),
                self.n_wavelengths()
            )));
        }
        Ok(fov * self.n_wavelengths() + wl)
    }

    pub fn cell(&self, fov: usize, wl: usize) -> Result<&[f64; FRINGE_TERMS]> {
        Ok(&self.coeffs[self.offset(fov, wl)?])
    }

    pub fn cell_mut(&mut self, fov: usize, wl: usize) -> Result<&mut [f64; FRINGE_TERMS]> {
        let i = self.offset(fov, wl)?;
        Ok(&mut self.coeffs[i])
    }

    pub fn cells(&self) -> &[[f64; FRINGE_TERMS]] {
        &self.coeffs
    }

    /// Wave aberration map of one cell on `grid`, in waves.
    pub fn wavefront(&self, fov: usize, wl: usize, grid: &PupilGrid) -> Result<Vec<f64>> {
        let cell = self.cell(fov, wl)?;
        let basis = ZernikeBasis::new(*grid, FRINGE_TERMS)?;
        Ok(basis.combine(cell))
    }

    pub fn perturb(&self, fraction: f64, seed: u64) -> Result<Self> {
        self.perturb_with(fraction, seed, PerturbMode::default())
    }

    /// Replaces every coefficient `c` by `(1 + r)·c`, `r ~ U[−fraction, fraction]`.
    pub fn perturb_with(&self, fraction: f64, seed: u64, mode: PerturbMode) -> Result<Self> {
        if !(fraction >= 0.0 && fraction.is_finite()) {
            return Err(Error::invalid(format!(
                "perturbation fraction {fraction} must be finite and >= 0"
            )));
        }
        if fraction == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = seed::rng(seed);
        let mut out = self.clone();
        let nw = self.n_wavelengths();
        for fov in 0..self.n_fov() {
            match mode {
                PerturbMode::SharedAcrossWavelengths => {
                    let r: [f64; FRINGE_TERMS] =
                        std::array::from_fn(|_| rng.random_range(-fraction..=fraction));
                    for wl in 0..nw {
                        for (c, r) in out.coeffs[fov * nw + wl].iter_mut().zip(r) {
                            *c *= 1.0 + r;
                        }
                    }
                }
                PerturbMode::PerWavelength => {
                    for wl in 0..nw {
                        for c in out.coeffs[fov * nw + wl].iter_mut() {
                            *c *= 1.0 + rng.random_range(-fraction..=fraction);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn from_records(records: Vec<CoefficientRecord>) -> Result<Self> {
        let mut fovs: Vec<f64> = records.iter().map(|r| r.fov_deg).collect();
        let mut wls: Vec<f64> = records.iter().map(|r| r.wavelength_nm).collect();
        for v in [&mut fovs, &mut wls] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let nw = wls.len();
        let mut cells: Vec<Option<[f64; FRINGE_TERMS]>> = vec![None; fovs.len() * nw];
        for r in records {
            let fi = fovs.iter().position(|&f| f == r.fov_deg).expect("collected");
            let wi = wls.iter().position(|&w| w == r.wavelength_nm).expect("collected");
            let slot = &mut cells[fi * nw + wi];
            if slot.is_some() {
                return Err(Error::invalid(format!(
                    "duplicate coefficient cell at {} deg / {} nm",
                    r.fov_deg, r.wavelength_nm
                )));
            }
            *slot = Some(r.coeffs);
        }
        let coeffs = cells
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| {
                    Error::PrescriptionIncomplete(format!(
                        "missing coefficients at {} deg / {} nm",
                        fovs[i / nw],
                        wls[i % nw]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(fovs, wls, coeffs)
    }

    fn records(&self) -> Vec<CoefficientRecord> {
        let nw = self.n_wavelengths();
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| CoefficientRecord {
                fov_deg: self.fov_samples[i / nw],
                wavelength_nm: self.wavelength_samples[i % nw],
                coeffs: *c,
            })
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let records: Vec<CoefficientRecord> = serde_json::from_str(s)?;
        Self::from_records(records)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records())?)
    }

    /// Reads the long CSV form with columns `fov_deg,wavelength_nm,term,value`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records: Vec<CoefficientRecord> = Vec::new();
        let mut filled: Vec<[bool; FRINGE_TERMS]> = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            if !(1..=FRINGE_TERMS).contains(&row.term) {
                return Err(Error::invalid(format!("term {} outside 1..=37", row.term)));
            }
            let idx = match records
                .iter()
                .position(|r| r.fov_deg == row.fov_deg && r.wavelength_nm == row.wavelength_nm)
            {
                Some(i) => i,
                None => {
                    records.push(CoefficientRecord {
                        fov_deg: row.fov_deg,
                        wavelength_nm: row.wavelength_nm,
                        coeffs: [0.0; FRINGE_TERMS],
                    });
                    filled.push([false; FRINGE_TERMS]);
                    records.len() - 1
                }
            };
            records[idx].coeffs[row.term - 1] = row.value;
            filled[idx][row.term - 1] = true;
        }
        if let Some((i, f)) = filled.iter().enumerate().find(|(_, f)| !f.iter().all(|&b| b)) {
            let missing = f.iter().position(|&b| !b).unwrap_or(0) + 1;
            return Err(Error::PrescriptionIncomplete(format!(
                "term {missing} missing at {} deg / {} nm",
                records[i].fov_deg, records[i].wavelength_nm
            )));
        }
        Self::from_records(records)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for r in self.records() {
            for (k, v) in r.coeffs.iter().enumerate() {
                wtr.serialize(CsvRow {
                    fov_deg: r.fov_deg,
                    wavelength_nm: r.wavelength_nm,
                    term: k + 1,
                    value: *v,
                })?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

impl Serialize for ZernikeField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.records().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ZernikeField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let records = Vec::<CoefficientRecord>::deserialize(d)?;
        Self::from_records(records).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CoefficientRecord {
    fov_deg: f64,
    wavelength_nm: f64,
    #[serde(with = "coeff_array")]
    coeffs: [f64; FRINGE_TERMS],
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    fov_deg: f64,
    wavelength_nm: f64,
    term: usize,
    value: f64,
}

mod coeff_array {
    use super::FRINGE_TERMS;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; FRINGE_TERMS], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; FRINGE_TERMS], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into().map_err(|v: Vec<f64>| {
            serde::de::Error::custom(format!(
                "expected {FRINGE_TERMS} coefficients, got {}",
                v.len()
            ))
        })
    }
}
