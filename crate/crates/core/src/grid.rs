//! Directions, spherical sampling grids and HRTF magnitude containers.
//!
//! Azimuth runs counter-clockwise from the front in `[0, 360)`, elevation
//! from `-90` (below) to `+90` (above). The polar angle used by the
//! spherical-harmonic basis is `90 - elevation`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, HrtfError, Result};

/// Linear magnitude floor applied to every stored spectrum (-120 dB).
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Two directions closer than this (degrees) are considered the same.
pub const DISTINCT_TOLERANCE_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    azimuth_deg: f64,
    elevation_deg: f64,
}

impl Direction {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        if !azimuth_deg.is_finite() || !elevation_deg.is_finite() {
            return Err(invalid("direction angles must be finite"));
        }
        if !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(invalid(format!("elevation {elevation_deg} outside [-90, 90]")));
        }
        let mut az = azimuth_deg.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        if az >= 360.0 {
            az = 0.0;
        }
        Ok(Self {
            azimuth_deg: az,
            elevation_deg,
        })
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth_deg
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation_deg
    }

    /// Polar angle from the +z axis, radians.
    pub fn polar_rad(&self) -> f64 {
        (90.0 - self.elevation_deg).to_radians()
    }

    pub fn azimuth_rad(&self) -> f64 {
        self.azimuth_deg.to_radians()
    }

    /// Unit vector (x front, y left, z up).
    pub fn to_cartesian(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth_rad(), self.elevation_deg.to_radians());
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Great-circle distance in radians.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = self.to_cartesian();
        let b = other.to_cartesian();
        // atan2 form stays accurate for nearly coincident directions
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        sin.atan2(cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    Equiangular { n_az: usize, n_el: usize },
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalGrid {
    directions: Vec<Direction>,
    kind: GridKind,
    neighbor_table: Option<Vec<Vec<usize>>>,
}

impl SphericalGrid {
    /// Equiangular grid, row-major by elevation (bottom row first).
    ///
    /// Azimuths sit at `i * 360 / n_az`, elevations at cell centres
    /// `-90 + (j + 0.5) * 180 / n_el`, so no sample lands on a pole.
    pub fn equiangular(n_az: usize, n_el: usize) -> Result<Self> {
        if n_az < 3 {
            return Err(invalid(format!("n_az must be >= 3, got {n_az}")));
        }
        if n_el < 2 {
            return Err(invalid(format!("n_el must be >= 2, got {n_el}")));
        }
        let mut directions = Vec::with_capacity(n_az * n_el);
        for j in 0..n_el {
            let el = -90.0 + (j as f64 + 0.5) * 180.0 / n_el as f64;
            for i in 0..n_az {
                let az = i as f64 * 360.0 / n_az as f64;
                directions.push(Direction::new(az, el)?);
            }
        }
        let mut table = Vec::with_capacity(n_az * n_el);
        for j in 0..n_el {
            for i in 0..n_az {
                // top, bottom, left, right
                let mut k = Vec::with_capacity(4);
                if j + 1 < n_el {
                    k.push((j + 1) * n_az + i);
                }
                if j > 0 {
                    k.push((j - 1) * n_az + i);
                }
                k.push(j * n_az + (i + n_az - 1) % n_az);
                k.push(j * n_az + (i + 1) % n_az);
                table.push(k);
            }
        }
        Ok(Self {
            directions,
            kind: GridKind::Equiangular { n_az, n_el },
            neighbor_table: Some(table),
        })
    }

    /// Grid from an arbitrary list of distinct directions. Carries no topology.
    pub fn explicit(directions: Vec<Direction>) -> Result<Self> {
        if directions.is_empty() {
            return Err(invalid("grid needs at least one direction"));
        }
        let tol = DISTINCT_TOLERANCE_DEG.to_radians();
        for i in 0..directions.len() {
            for j in 0..i {
                if directions[i].angle_to(&directions[j]) <= tol {
                    return Err(invalid(format!(
                        "directions {j} and {i} coincide ({:?})",
                        directions[i]
                    )));
                }
            }
        }
        Ok(Self {
            directions,
            kind: GridKind::Explicit,
            neighbor_table: None,
        })
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn neighbor_table(&self) -> Option<&[Vec<usize>]> {
        self.neighbor_table.as_deref()
    }

    /// Neighbourhood of `index` on an equiangular grid (2 to 4 entries).
    pub fn neighbors(&self, index: usize) -> Result<&[usize]> {
        let table = self
            .neighbor_table
            .as_ref()
            .ok_or_else(|| HrtfError::UnsupportedTopology("explicit grids have no neighbour table".into()))?;
        table
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("index {index} out of range for {} directions", self.len())))
    }

    /// Index of the direction closest to `dir`; ties go to the lower index.
    pub fn nearest(&self, dir: &Direction) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, d) in self.directions.iter().enumerate() {
            let a = d.angle_to(dir);
            if a < best_d {
                best = i;
                best_d = a;
            }
        }
        best
    }

    /// Same directions in the same order.
    pub fn same_directions(&self, other: &SphericalGrid) -> bool {
        self.len() == other.len()
            && self
                .directions
                .iter()
                .zip(&other.directions)
                .all(|(a, b)| a.angle_to(b) <= DISTINCT_TOLERANCE_DEG.to_radians())
    }
}

/// Shorthand for [`SphericalGrid::equiangular`].
pub fn make_equiangular_grid(n_az: usize, n_el: usize) -> Result<SphericalGrid> {
    SphericalGrid::equiangular(n_az, n_el)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ear {
    Left = 0,
    Right = 1,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::Left, Ear::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-direction, per-ear linear magnitude spectra.
///
/// Bin `k` (0-based) sits at `(k + 1) * fs / (2 W)`; DC is not stored.
/// Layout is direction-major, ear-minor, bin-innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrtfSet {
    grid: SphericalGrid,
    sample_rate_hz: f64,
    n_bins: usize,
    magnitudes: Vec<f64>,
}

impl HrtfSet {
    /// Builds a set from linear magnitudes, clamping to [`MAGNITUDE_FLOOR`].
    pub fn new(grid: SphericalGrid, sample_rate_hz: f64, n_bins: usize, mut magnitudes: Vec<f64>) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(invalid(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if n_bins < 2 {
            return Err(invalid(format!("need at least 2 frequency bins, got {n_bins}")));
        }
        let expected = grid.len() * 2 * n_bins;
        if magnitudes.len() != expected {
            return Err(invalid(format!(
                "magnitude array has {} values, expected {expected} ({} directions x 2 ears x {n_bins} bins)",
                magnitudes.len(),
                grid.len()
            )));
        }
        for m in &mut magnitudes {
            if m.is_nan() {
                return Err(invalid("NaN magnitude"));
            }
            *m = m.abs().max(MAGNITUDE_FLOOR);
        }
        Ok(Self {
            grid,
            sample_rate_hz,
            n_bins,
            magnitudes,
        })
    }

    /// Builds a set from dB values (`20 log10 |H|`).
    pub fn from_db(grid: SphericalGrid, sample_rate_hz: f64, n_bins: usize, db: &[f64]) -> Result<Self> {
        let mags = db.iter().map(|&v| db_to_linear(v)).collect();
        Self::new(grid, sample_rate_hz, n_bins, mags)
    }

    pub fn grid(&self) -> &SphericalGrid {
        &self.grid
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_directions(&self) -> usize {
        self.grid.len()
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn bin_frequency_hz(&self, bin: usize) -> f64 {
        (bin + 1) as f64 * self.sample_rate_hz / (2 * self.n_bins) as f64
    }

    fn offset(&self, direction: usize, ear: Ear) -> usize {
        (direction * 2 + ear.index()) * self.n_bins
    }

    /// Spectrum of one direction and ear.
    pub fn spectrum(&self, direction: usize, ear: Ear) -> &[f64] {
        let o = self.offset(direction, ear);
        &self.magnitudes[o..o + self.n_bins]
    }

    pub fn magnitude(&self, direction: usize, ear: Ear, bin: usize) -> f64 {
        self.magnitudes[self.offset(direction, ear) + bin]
    }

    /// All values in dB, same layout as [`HrtfSet::magnitudes`].
    pub fn to_db(&self) -> Vec<f64> {
        self.magnitudes.iter().map(|&m| linear_to_db(m)).collect()
    }

    /// One ear as a row-major `[n_directions x W]` dB matrix.
    pub fn ear_db(&self, ear: Ear) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_directions() * self.n_bins);
        for n in 0..self.n_directions() {
            out.extend(self.spectrum(n, ear).iter().map(|&m| linear_to_db(m)));
        }
        out
    }

    /// Assembles a set from per-ear row-major `[n_directions x W]` dB matrices.
    pub fn from_ear_db(
        grid: SphericalGrid,
        sample_rate_hz: f64,
        n_bins: usize,
        left: &[f64],
        right: &[f64],
    ) -> Result<Self> {
        let n = grid.len();
        if left.len() != n * n_bins || right.len() != n * n_bins {
            return Err(invalid("per-ear dB matrices do not match grid x bins"));
        }
        let mut db = Vec::with_capacity(2 * n * n_bins);
        for d in 0..n {
            db.extend_from_slice(&left[d * n_bins..(d + 1) * n_bins]);
            db.extend_from_slice(&right[d * n_bins..(d + 1) * n_bins]);
        }
        Self::from_db(grid, sample_rate_hz, n_bins, &db)
    }

    /// Keeps only the listed directions, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut dirs = Vec::with_capacity(indices.len());
        let mut mags = Vec::with_capacity(indices.len() * 2 * self.n_bins);
        for &i in indices {
            if i >= self.n_directions() {
                return Err(invalid(format!("direction index {i} out of range")));
            }
            dirs.push(self.grid.directions()[i]);
            let o = self.offset(i, Ear::Left);
            mags.extend_from_slice(&self.magnitudes[o..o + 2 * self.n_bins]);
        }
        Self::new(SphericalGrid::explicit(dirs)?, self.sample_rate_hz, self.n_bins, mags)
    }

    /// Same spectra with the two ears exchanged.
    pub fn swap_ears(&self) -> Self {
        let mut mags = self.magnitudes.clone();
        let w = self.n_bins;
        for d in 0..self.n_directions() {
            let o = d * 2 * w;
            let (l, r) = mags[o..o + 2 * w].split_at_mut(w);
            l.swap_with_slice(r);
        }
        Self {
            magnitudes: mags,
            ..self.clone()
        }
    }

    pub(crate) fn check_compatible(&self, other: &HrtfSet) -> Result<()> {
        if self.n_bins != other.n_bins {
            return Err(invalid(format!(
                "bin count mismatch: {} vs {}",
                self.n_bins, other.n_bins
            )));
        }
        if !self.grid.same_directions(&other.grid) {
            return Err(invalid(format!(
                "grid mismatch: {} vs {} directions or differing layout",
                self.n_directions(),
                other.n_directions()
            )));
        }
        Ok(())
    }
}

pub fn linear_to_db(m: f64) -> f64 {
    20.0 * m.max(MAGNITUDE_FLOOR).log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Number of measured directions in a sparse input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SparsityLevel {
    L3,
    L5,
    L19,
    L100,
}

impl SparsityLevel {
    pub const ALL: [SparsityLevel; 4] = [Self::L3, Self::L5, Self::L19, Self::L100];

    pub fn count(self) -> usize {
        match self {
            Self::L3 => 3,
            Self::L5 => 5,
            Self::L19 => 19,
            Self::L100 => 100,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            3 => Ok(Self::L3),
            5 => Ok(Self::L5),
            19 => Ok(Self::L19),
            100 => Ok(Self::L100),
            _ => Err(invalid(format!("sparsity level must be one of 3, 5, 19, 100; got {n}"))),
        }
    }

    /// Default input SH order and ridge weight for this level.
    pub fn default_fit(self) -> (usize, f64) {
        let order = match self {
            Self::L3 | Self::L5 => 1,
            Self::L19 => 3,
            Self::L100 => 9,
        };
        (order, 1e-3)
    }
}

/// A handful of measured directions taken from a dense set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMeasurement {
    set: HrtfSet,
    level: SparsityLevel,
}

impl SparseMeasurement {
    pub fn new(set: HrtfSet, level: SparsityLevel) -> Result<Self> {
        if set.n_directions() != level.count() {
            return Err(invalid(format!(
                "sparsity level {} needs exactly {} directions, got {}",
                level.count(),
                level.count(),
                set.n_directions()
            )));
        }
        Ok(Self { set, level })
    }

    pub fn set(&self) -> &HrtfSet {
        &self.set
    }

    pub fn level(&self) -> SparsityLevel {
        self.level
    }

    pub fn grid(&self) -> &SphericalGrid {
        self.set.grid()
    }
}

impl AsRef<HrtfSet> for SparseMeasurement {
    fn as_ref(&self) -> &HrtfSet {
        &self.set
    }
}

impl AsRef<HrtfSet> for HrtfSet {
    fn as_ref(&self) -> &HrtfSet {
        self
    }
}
