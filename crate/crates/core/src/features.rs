//! Per-patch resampling signature.
//!
//! A patch goes through a 3x3 Laplacian, a fixed linear predictor whose
//! absolute error exposes interpolation correlations, a discrete Radon
//! projection at ten angles, and a magnitude spectrum of each projection.
//! Interpolated regions leave periodic prediction error, which shows up as
//! isolated spectral peaks.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::imaging::{laplacian3x3, Plane};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_STRIDE: usize = 32;
pub const NUM_ANGLES: usize = 10;
pub const NUM_BINS: usize = PATCH_SIZE / 2;
pub const FEATURE_LEN: usize = NUM_ANGLES * NUM_BINS;

/// Projection angles in degrees: 0, 18, ..., 162.
pub fn projection_angles() -> [f64; NUM_ANGLES] {
    std::array::from_fn(|i| i as f64 * 180.0 / NUM_ANGLES as f64)
}

/// Predictor weights over the 3x3 neighbourhood (centre excluded).
pub const PREDICTOR: [[f64; 3]; 3] = [[-0.25, 0.5, -0.25], [0.5, 0.0, 0.5], [-0.25, 0.5, -0.25]];

/// Fixed-length resampling signature of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_LEN {
            return Err(Error::Shape {
                expected: FEATURE_LEN,
                actual: values.len(),
            });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// The `NUM_BINS` spectrum values for angle index `a`.
    pub fn angle(&self, a: usize) -> &[f64] {
        &self.0[a * NUM_BINS..(a + 1) * NUM_BINS]
    }
}

fn check_patch(patch: &Plane) -> Result<()> {
    if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
        return Err(Error::PatchSize {
            expected: PATCH_SIZE,
            width: patch.width(),
            height: patch.height(),
        });
    }
    Ok(())
}

/// Absolute linear-prediction error of the Laplacian-filtered patch.
///
/// The outer one-pixel ring is zero since its predictor window would leave
/// the patch.
pub fn predictor_residue(patch: &Plane) -> Result<Plane> {
    check_patch(patch)?;
    let lap = laplacian3x3(patch)?;
    let n = PATCH_SIZE;
    let mut out = vec![0f64; n * n];
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            let mut predicted = 0.0;
            for (ky, row) in PREDICTOR.iter().enumerate() {
                for (kx, &a) in row.iter().enumerate() {
                    predicted += a * lap.get(x + kx - 1, y + ky - 1);
                }
            }
            out[y * n + x] = (lap.get(x, y) - predicted).abs();
        }
    }
    Ok(Plane::from_raw(n, n, out))
}

/// Pixel-driven discrete Radon projection.
///
/// Each pixel centre is projected onto the detector axis rotated by `angle`
/// and its value is split linearly between the two nearest of the
/// `PATCH_SIZE` bins. At 0 degrees this is exactly the column sums. Mass is
/// conserved for any content inside the inscribed disk.
pub fn radon_project(residue: &Plane, angle_deg: f64) -> Vec<f64> {
    let n = residue.width();
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = exact_sin_cos(angle_deg);
    let mut bins = vec![0f64; n];
    for y in 0..residue.height() {
        let row = residue.row(y);
        let base = (y as f64 - c) * sin + c;
        for (x, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let u = (x as f64 - c) * cos + base;
            let lo = u.floor();
            let frac = u - lo;
            let i = lo as isize;
            if i >= 0 && (i as usize) < n {
                bins[i as usize] += v * (1.0 - frac);
            }
            if i + 1 >= 0 && ((i + 1) as usize) < n {
                bins[(i + 1) as usize] += v * frac;
            }
        }
    }
    bins
}

/// `sin`/`cos` with exact values at multiples of 90 degrees.
fn exact_sin_cos(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == 180.0 {
        (0.0, -1.0)
    } else if a == 270.0 {
        (-1.0, 0.0)
    } else {
        (a * PI / 180.0).sin_cos()
    }
}

fn fft64() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(PATCH_SIZE))
        .clone()
}

/// Magnitude spectrum (bins 1..=32) of a mean-removed 64-sample projection.
pub fn fft_periodicity(projection: &[f64]) -> Result<Vec<f64>> {
    if projection.len() != PATCH_SIZE {
        return Err(Error::Shape {
            expected: PATCH_SIZE,
            actual: projection.len(),
        });
    }
    let mean = projection.iter().sum::<f64>() / PATCH_SIZE as f64;
    let mut buf: Vec<Complex<f64>> = projection
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .collect();
    fft64().process(&mut buf);
    Ok(buf[1..=NUM_BINS].iter().map(|z| z.norm()).collect())
}

/// Subtracts the mean over the interior (where the residue is defined),
/// leaving the border ring at zero.
///
/// Without this, oblique projections of a square support are dominated by
/// the chord-length profile scaled by the mean error, which swamps the
/// periodic part after per-angle normalization.
fn centered_residue(residue: Plane) -> Plane {
    let n = residue.width();
    let inner = (n - 2) * (n - 2);
    let mut sum = 0.0;
    for y in 1..n - 1 {
        sum += residue.row(y)[1..n - 1].iter().sum::<f64>();
    }
    let mean = sum / inner as f64;
    let mut data = residue.into_data();
    for y in 1..n - 1 {
        for v in &mut data[y * n + 1..y * n + n - 1] {
            *v -= mean;
        }
    }
    Plane::from_raw(n, n, data)
}

/// Full signature: per angle, Radon projection of the centred residue ->
/// spectrum -> divide by the angle's peak bin (all-zero spectra stay zero).
pub fn patch_features(patch: &Plane) -> Result<FeatureVector> {
    let residue = centered_residue(predictor_residue(patch)?);
    let mut out = Vec::with_capacity(FEATURE_LEN);
    for angle in projection_angles() {
        let spectrum = fft_periodicity(&radon_project(&residue, angle))?;
        let peak = spectrum.iter().copied().fold(0.0, f64::max);
        if peak > 0.0 {
            out.extend(spectrum.iter().map(|v| v / peak));
        } else {
            out.extend(spectrum);
        }
    }
    Ok(FeatureVector(out))
}

const DUMP_MAGIC: &[u8; 5] = b"FSFV1";

/// Writes feature rows as little-endian f32 after a 16-byte header
/// (`FSFV1`, three zero bytes, u64 row count).
pub fn write_feature_dump(mut w: impl Write, rows: &[FeatureVector]) -> std::io::Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&[0u8; 3])?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    for row in rows {
        for &v in row.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_dump(mut r: impl Read) -> Result<Vec<Vec<f32>>> {
    let bad = |m: &str| Error::InvalidArgument(format!("feature dump: {m}"));
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| bad("short header"))?;
    if &header[..5] != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
    let mut rows = Vec::with_capacity(count);
    let mut buf = vec![0u8; FEATURE_LEN * 4];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| bad("truncated rows"))?;
        rows.push(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok(rows)
}
