//! Deterministic synthetic data: procedural stand-ins for pristine photos,
//! geometric and compression transforms, copy-move and splice forgeries,
//! per-task patch datasets and on-disk evaluation corpora.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::features::{patch_features, PATCH_SIZE};
use crate::imaging::{jpeg_roundtrip, quantize8, write_png, GrayImage, Plane};
use crate::mlp::{Sample, TaskKind};
use crate::seg::BinaryMask;

pub const CORPUS_SCHEMA: &str = "fs-corpus/1";

/// Quality range of the roundtrip pristine corpus images receive, so that
/// "was compressed at all" does not separate them from recompressed ones.
pub const PRISTINE_QUALITY: (u8, u8) = (90, 100);

/// SplitMix64 finalizer; mixes a base seed with a stream tag and an index so
/// every generated item gets an independent, scheduling-free seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    Pristine,
    CopyMove,
    SpliceUpsample,
    SpliceDownsample,
    SpliceRotateCw,
    SpliceRotateCcw,
    SpliceShear,
    RecompressBelow85,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 8] = [
        ForgeryKind::Pristine,
        ForgeryKind::CopyMove,
        ForgeryKind::SpliceUpsample,
        ForgeryKind::SpliceDownsample,
        ForgeryKind::SpliceRotateCw,
        ForgeryKind::SpliceRotateCcw,
        ForgeryKind::SpliceShear,
        ForgeryKind::RecompressBelow85,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForgeryKind::Pristine => "pristine",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::SpliceUpsample => "splice_upsample",
            ForgeryKind::SpliceDownsample => "splice_downsample",
            ForgeryKind::SpliceRotateCw => "splice_rotate_cw",
            ForgeryKind::SpliceRotateCcw => "splice_rotate_ccw",
            ForgeryKind::SpliceShear => "splice_shear",
            ForgeryKind::RecompressBelow85 => "recompress_below_85",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Resampling task whose transform the splice carries.
    pub fn splice_task(self) -> Option<TaskKind> {
        match self {
            ForgeryKind::SpliceUpsample => Some(TaskKind::Upsample),
            ForgeryKind::SpliceDownsample => Some(TaskKind::Downsample),
            ForgeryKind::SpliceRotateCw => Some(TaskKind::RotateCw),
            ForgeryKind::SpliceRotateCcw => Some(TaskKind::RotateCcw),
            ForgeryKind::SpliceShear => Some(TaskKind::Shear),
            _ => None,
        }
    }
}

impl fmt::Display for ForgeryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Pristine,
    Manipulated,
}

/// A resampling or recompression operation with its parameter.
///
/// Rotation angles are in degrees, positive counter-clockwise as displayed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    Upsample { scale: f64 },
    Downsample { scale: f64 },
    Rotate { degrees: f64 },
    Shear { factor: f64 },
    Recompress { quality: u8 },
}

fn check_range(name: &'static str, value: f64, min: f64, max: f64) -> Result<()> {
    if value.is_finite() && (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(Error::ParamRange {
            name,
            value,
            min,
            max,
        })
    }
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Upsample { scale } => check_range("upsample scale", scale, 1.1, 2.0),
            Transform::Downsample { scale } => check_range("downsample scale", scale, 0.5, 0.9),
            Transform::Rotate { degrees } => {
                check_range("rotation degrees", degrees.abs(), 2.0, 45.0)
            }
            Transform::Shear { factor } => check_range("shear factor", factor, 0.05, 0.3),
            Transform::Recompress { quality } => {
                check_range("jpeg quality", quality as f64, 40.0, 84.0)
            }
        }
    }

    /// Draws a transform belonging to `task` with parameters uniform over
    /// the documented range.
    pub fn random_for(task: TaskKind, rng: &mut impl Rng) -> Self {
        match task {
            TaskKind::JpegBelow85 => Transform::Recompress {
                quality: rng.random_range(40..=84),
            },
            TaskKind::Upsample => Transform::Upsample {
                scale: rng.random_range(1.1..=2.0),
            },
            TaskKind::Downsample => Transform::Downsample {
                scale: rng.random_range(0.5..=0.9),
            },
            TaskKind::RotateCw => Transform::Rotate {
                degrees: -rng.random_range(2.0..=45.0),
            },
            TaskKind::RotateCcw => Transform::Rotate {
                degrees: rng.random_range(2.0..=45.0),
            },
            TaskKind::Shear => Transform::Shear {
                factor: rng.random_range(0.05..=0.3),
            },
        }
    }

    pub fn task(&self) -> TaskKind {
        match *self {
            Transform::Upsample { .. } => TaskKind::Upsample,
            Transform::Downsample { .. } => TaskKind::Downsample,
            Transform::Rotate { degrees } if degrees < 0.0 => TaskKind::RotateCw,
            Transform::Rotate { .. } => TaskKind::RotateCcw,
            Transform::Shear { .. } => TaskKind::Shear,
            Transform::Recompress { .. } => TaskKind::JpegBelow85,
        }
    }

    /// Inverse of the forward linear map (destination -> source offsets),
    /// or `None` for recompression.
    fn inverse_linear(&self) -> Option<[[f64; 2]; 2]> {
        match *self {
            Transform::Upsample { scale } | Transform::Downsample { scale } => {
                Some([[1.0 / scale, 0.0], [0.0, 1.0 / scale]])
            }
            Transform::Rotate { degrees } => {
                // forward (y down): [[cos, sin], [-sin, cos]]
                let (s, c) = degrees.to_radians().sin_cos();
                Some([[c, -s], [s, c]])
            }
            Transform::Shear { factor } => Some([[1.0, -factor], [0.0, 1.0]]),
            Transform::Recompress { .. } => None,
        }
    }
}

/// Mirror index into `0..n` (edge sample repeated).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

#[inline]
fn sample_reflect(src: &Plane, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let (w, h) = (src.width(), src.height());
    let at = |px: isize, py: isize| src.get(reflect(px, w), reflect(py, h));
    let top = at(xi, yi) + (at(xi + 1, yi) - at(xi, yi)) * fx;
    let bottom = at(xi, yi + 1) + (at(xi + 1, yi + 1) - at(xi, yi + 1)) * fx;
    top + (bottom - top) * fy
}

/// Bilinear affine warp: destination pixel `p` reads the source at
/// `inv * (p - dst_center) + src_center`, mirroring at the source borders.
fn warp(
    src: &Plane,
    inv: [[f64; 2]; 2],
    dst: (usize, usize),
    dst_center: (f64, f64),
    src_center: (f64, f64),
) -> Plane {
    Plane::from_fn(dst.0, dst.1, |x, y| {
        let u = x as f64 - dst_center.0;
        let v = y as f64 - dst_center.1;
        let sx = inv[0][0] * u + inv[0][1] * v + src_center.0;
        let sy = inv[1][0] * u + inv[1][1] * v + src_center.1;
        sample_reflect(src, sx, sy)
    })
}

fn center_of(w: usize, h: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Applies `t` about the image centre, keeping the image size.
pub fn apply_transform(img: &GrayImage, t: &Transform) -> Result<GrayImage> {
    t.validate()?;
    match t.inverse_linear() {
        None => match *t {
            Transform::Recompress { quality } => jpeg_roundtrip(img, quality),
            _ => unreachable!("only recompression lacks a linear part"),
        },
        Some(inv) => {
            let (w, h) = (img.width(), img.height());
            let c = center_of(w, h);
            Ok(GrayImage::from_plane_clamped(warp(img.as_plane(), inv, (w, h), c, c)))
        }
    }
}

/// Transform parameters and geometry recorded with each generated image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeryParams {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transform: Option<Transform>,
    /// Copied block `[x, y, w, h]` in the source position.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_block: Option<[usize; 4]>,
    /// Destination minus source, in pixels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offset: Option<[i64; 2]>,
    /// Manipulated region `[x, y, w, h]`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub region: Option<[usize; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_quality: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub kind: ForgeryKind,
    pub mask: BinaryMask,
    pub params: ForgeryParams,
}

impl GroundTruth {
    pub fn label(&self) -> Label {
        if self.kind == ForgeryKind::Pristine {
            Label::Pristine
        } else {
            Label::Manipulated
        }
    }
}

/// Running-sum box blur of odd width `2r + 1` along rows then columns,
/// edge replicated.
fn box_blur(data: &mut [f64], w: usize, h: usize, r: usize) {
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut line = Vec::new();
    let mut pass = |len: usize, count: usize, index: &dyn Fn(usize, usize) -> usize, data: &mut [f64]| {
        for j in 0..count {
            line.clear();
            line.extend((0..len).map(|i| data[index(j, i)]));
            let at = |i: isize| line[i.clamp(0, len as isize - 1) as usize];
            let mut acc: f64 = (-(r as isize)..=r as isize).map(at).sum();
            for i in 0..len {
                data[index(j, i)] = acc * norm;
                acc += at(i as isize + r as isize + 1) - at(i as isize - r as isize);
            }
        }
    };
    pass(w, h, &|row, i| row * w + i, data);
    pass(h, w, &|col, i| i * w + col, data);
}

/// White noise smoothed to correlation length `sigma` (three box passes
/// approximate a Gaussian), rescaled to unit standard deviation. Unlike
/// lattice noise it is shift-invariant, so it carries no interpolation
/// periodicity.
fn smooth_noise(w: usize, h: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut data: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    // three passes of width 2r+1 have variance 3 * ((2r+1)^2 - 1) / 12
    let r = ((((4.0 * sigma * sigma + 1.0).sqrt()) - 1.0) / 2.0).round().max(0.0) as usize;
    if r > 0 {
        for _ in 0..3 {
            box_blur(&mut data, w, h, r);
        }
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64)
        .sqrt()
        .max(1e-12);
    data.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    data
}

fn gaussian_blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    k * data[y * w + xx]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    k * tmp[yy * w + x]
                })
                .sum();
        }
    }
}

/// Procedural stand-in for an uncompressed camera photo: fractal
/// background, textured occluding shapes, illumination falloff, optical
/// blur, sensor noise and 8-bit quantization.
pub fn procedural_photo(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width, height);
    let mut img = vec![0.0; w * h];

    let mut sigma = rng.random_range(24.0..64.0);
    let persistence: f64 = rng.random_range(0.7..0.95);
    let mut amp = 1.0;
    while sigma >= 0.75 {
        let octave = smooth_noise(w, h, sigma, &mut rng);
        for (v, o) in img.iter_mut().zip(&octave) {
            *v += amp * o;
        }
        amp *= persistence;
        sigma /= 2.0;
    }
    let base_level: f64 = rng.random_range(-0.5..0.5);
    img.iter_mut().for_each(|v| *v = 0.25 * *v + base_level);

    let shapes = rng.random_range(4..14);
    let diag = ((w * w + h * h) as f64).sqrt();
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let a = rng.random_range(0.04..0.3) * diag;
        let b = a * rng.random_range(0.2..1.0);
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        let ellipse = rng.random_bool(0.5);
        let level = rng.random_range(-1.0..1.0);
        let tex_amp = rng.random_range(0.03..0.3);
        let texture = smooth_noise(w, h, rng.random_range(0.75..3.0), &mut rng);
        let shade = rng.random_range(-0.3..0.3) / a;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let sd = if ellipse {
                    ((u / a).powi(2) + (v / b).powi(2)).sqrt().mul_add(b, -b)
                } else {
                    (u.abs() - a).max(v.abs() - b)
                };
                let alpha = (0.5 - sd).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let i = y * w + x;
                    let fill = level + tex_amp * texture[i] + shade * u;
                    img[i] += alpha * (fill - img[i]);
                }
            }
        }
    }

    let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64 - 0.5;
            let fy = y as f64 / h as f64 - 0.5;
            img[y * w + x] += gx * fx + gy * fy;
        }
    }

    gaussian_blur(&mut img, w, h, rng.random_range(0.5..1.0));

    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let out_lo = rng.random_range(0.02..0.15);
    let out_hi = rng.random_range(0.85..0.98);
    let span = (hi - lo).max(1e-9);
    let noise = Normal::new(0.0, rng.random_range(0.8..3.0) / 255.0).expect("valid sigma");
    let data = img
        .iter()
        .map(|&v| {
            let t = out_lo + (v - lo) / span * (out_hi - out_lo) + noise.sample(&mut rng);
            quantize8(t) as f64 / 255.0
        })
        .collect();
    GrayImage::from_plane_clamped(Plane::from_raw(w, h, data))
}

fn block_std(img: &GrayImage, x: usize, y: usize, side: usize) -> f64 {
    let block = img.as_plane().crop(x, y, side, side);
    let mean = block.mean();
    (block.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (side * side) as f64).sqrt()
}

pub const COPY_MIN_SIDE: usize = 32;
pub const COPY_MAX_SIDE: usize = 64;
pub const COPY_MIN_STD: f64 = 0.05;
pub const COPY_MIN_DISTANCE: f64 = 32.0;

/// Clones a textured square block to a non-overlapping location of the same
/// image. The mask marks the destination block.
pub fn make_copy_move(img: &GrayImage, rng: &mut impl Rng) -> Result<(GrayImage, GroundTruth)> {
    let (w, h) = (img.width(), img.height());
    if w < 128 || h < 128 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min_width: 128,
            min_height: 128,
        });
    }
    for _ in 0..500 {
        let side = rng.random_range(COPY_MIN_SIDE..=COPY_MAX_SIDE);
        let sx = rng.random_range(0..=w - side);
        let sy = rng.random_range(0..=h - side);
        if block_std(img, sx, sy, side) < COPY_MIN_STD {
            continue;
        }
        for _ in 0..50 {
            let dx = rng.random_range(0..=w - side);
            let dy = rng.random_range(0..=h - side);
            let ox = dx as i64 - sx as i64;
            let oy = dy as i64 - sy as i64;
            let overlap = ox.unsigned_abs() < side as u64 && oy.unsigned_abs() < side as u64;
            if overlap || ((ox * ox + oy * oy) as f64).sqrt() < COPY_MIN_DISTANCE {
                continue;
            }
            let src = img.as_plane();
            let mut data = src.data().to_vec();
            for y in 0..side {
                for x in 0..side {
                    data[(dy + y) * w + dx + x] = src.get(sx + x, sy + y);
                }
            }
            let mut mask = BinaryMask::empty(w, h);
            mask.fill_rect(dx, dy, side, side);
            let out = GrayImage::from_plane_clamped(Plane::from_raw(w, h, data));
            return Ok((
                out,
                GroundTruth {
                    kind: ForgeryKind::CopyMove,
                    mask,
                    params: ForgeryParams {
                        source_block: Some([sx, sy, side, side]),
                        offset: Some([ox, oy]),
                        region: Some([dx, dy, side, side]),
                        ..ForgeryParams::default()
                    },
                },
            ));
        }
    }
    Err(Error::InsufficientTexture)
}

/// Side of a splice region as a fraction of the image side.
pub const SPLICE_SIDE_FRACTION: (f64, f64) = (0.75, 0.9);

/// Pastes a resampled rectangle of `donor` into `base`.
///
/// The donor is sampled through the inverse of `transform` around a random
/// donor location, mirroring at the donor borders; the region is hard-edged.
pub fn make_splice(
    base: &GrayImage,
    donor: &GrayImage,
    transform: &Transform,
    rng: &mut impl Rng,
) -> Result<(GrayImage, GroundTruth)> {
    transform.validate()?;
    let inv = transform.inverse_linear().ok_or_else(|| {
        Error::InvalidArgument("splices need a geometric transform".into())
    })?;
    let kind = match transform.task() {
        TaskKind::Upsample => ForgeryKind::SpliceUpsample,
        TaskKind::Downsample => ForgeryKind::SpliceDownsample,
        TaskKind::RotateCw => ForgeryKind::SpliceRotateCw,
        TaskKind::RotateCcw => ForgeryKind::SpliceRotateCcw,
        TaskKind::Shear => ForgeryKind::SpliceShear,
        TaskKind::JpegBelow85 => unreachable!("recompression has no linear part"),
    };
    let (w, h) = (base.width(), base.height());
    let rw = ((w as f64 * rng.random_range(SPLICE_SIDE_FRACTION.0..=SPLICE_SIDE_FRACTION.1))
        .round() as usize)
        .clamp(1, w);
    let rh = ((h as f64 * rng.random_range(SPLICE_SIDE_FRACTION.0..=SPLICE_SIDE_FRACTION.1))
        .round() as usize)
        .clamp(1, h);
    let rx = rng.random_range(0..=w - rw);
    let ry = rng.random_range(0..=h - rh);
    let donor_center = (
        rng.random_range(0.25..0.75) * donor.width() as f64,
        rng.random_range(0.25..0.75) * donor.height() as f64,
    );
    let patch = warp(donor.as_plane(), inv, (rw, rh), center_of(rw, rh), donor_center);
    let mut data = base.as_plane().data().to_vec();
    for y in 0..rh {
        data[(ry + y) * w + rx..(ry + y) * w + rx + rw].copy_from_slice(patch.row(y));
    }
    let mut mask = BinaryMask::empty(w, h);
    mask.fill_rect(rx, ry, rw, rh);
    Ok((
        GrayImage::from_plane_clamped(Plane::from_raw(w, h, data)),
        GroundTruth {
            kind,
            mask,
            params: ForgeryParams {
                transform: Some(*transform),
                region: Some([rx, ry, rw, rh]),
                ..ForgeryParams::default()
            },
        },
    ))
}

/// Side of the source crops used for patch datasets; leaves room for a
/// 0.5x downsample to still fill the central patch.
pub const SOURCE_CROP: usize = 160;
/// Offset of the analysed patch inside a source crop (a multiple of 8 so it
/// shares the crop's JPEG block grid).
const PATCH_OFFSET: usize = (SOURCE_CROP - PATCH_SIZE) / 2;

/// Labelled feature vectors for one task: exactly `n / 2` positives carrying
/// the task's transform and `n / 2` negatives, half of which carry a random
/// transform of another task. Untransformed negatives of the JPEG task are
/// split evenly between uncompressed and quality 85..=100.
pub fn make_patch_dataset(
    pristine: &[GrayImage],
    task: TaskKind,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("dataset size {n} must be even and positive")));
    }
    let usable: Vec<&GrayImage> = pristine
        .iter()
        .filter(|im| im.width() >= SOURCE_CROP && im.height() >= SOURCE_CROP)
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "need pristine images of at least {SOURCE_CROP}x{SOURCE_CROP}"
        )));
    }
    // one source crop per ~12 samples
    let crops = (n / 12).max(1);
    let crop_origins: Vec<(usize, usize, usize)> = (0..crops)
        .map(|i| {
            let mut rng = rng_for(seed, 1, i as u64);
            let im = rng.random_range(0..usable.len());
            let (w, h) = (usable[im].width(), usable[im].height());
            let x = rng.random_range(0..=(w - SOURCE_CROP) / 8) * 8;
            let y = rng.random_range(0..=(h - SOURCE_CROP) / 8) * 8;
            (im, x, y)
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, 2, i as u64);
            let (im, x, y) = crop_origins[rng.random_range(0..crops)];
            let crop = GrayImage::from_plane_clamped(
                usable[im].as_plane().crop(x, y, SOURCE_CROP, SOURCE_CROP),
            );
            let positive = i % 2 == 0;
            let finished = if positive {
                apply_transform(&crop, &Transform::random_for(task, &mut rng))?
            } else if rng.random_bool(0.5) {
                let others: Vec<TaskKind> =
                    TaskKind::ALL.into_iter().filter(|&t| t != task).collect();
                let other = others[rng.random_range(0..others.len())];
                apply_transform(&crop, &Transform::random_for(other, &mut rng))?
            } else if task == TaskKind::JpegBelow85 && rng.random_bool(0.5) {
                // the other side of the quality threshold
                jpeg_roundtrip(&crop, rng.random_range(85..=100))?
            } else {
                crop
            };
            let patch = finished
                .as_plane()
                .crop(PATCH_OFFSET, PATCH_OFFSET, PATCH_SIZE, PATCH_SIZE);
            Ok(Sample {
                x: patch_features(&patch)?.into_vec(),
                y: positive as u8,
            })
        })
        .collect()
}

/// Generates one corpus image. Pristine images use `sources[pristine_slot]`
/// and get a high-quality JPEG roundtrip; forgeries draw their base (and
/// donor) from the pool with `seed`.
pub fn synthesize(
    sources: &[GrayImage],
    kind: ForgeryKind,
    pristine_slot: usize,
    seed: u64,
) -> Result<(GrayImage, GroundTruth)> {
    if sources.is_empty() || (kind.splice_task().is_some() && sources.len() < 2) {
        return Err(Error::InsufficientData(
            "not enough pristine source images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_idx = if kind == ForgeryKind::Pristine {
        pristine_slot % sources.len()
    } else {
        rng.random_range(0..sources.len())
    };
    let base = &sources[base_idx];
    let (img, mut truth) = match kind {
        ForgeryKind::Pristine => (
            base.clone(),
            GroundTruth {
                kind,
                mask: BinaryMask::empty(base.width(), base.height()),
                params: ForgeryParams::default(),
            },
        ),
        ForgeryKind::CopyMove => make_copy_move(base, &mut rng)?,
        ForgeryKind::RecompressBelow85 => {
            let t = Transform::random_for(TaskKind::JpegBelow85, &mut rng);
            let mut mask = BinaryMask::empty(base.width(), base.height());
            mask.fill_rect(0, 0, base.width(), base.height());
            (
                apply_transform(base, &t)?,
                GroundTruth {
                    kind,
                    mask,
                    params: ForgeryParams {
                        transform: Some(t),
                        region: Some([0, 0, base.width(), base.height()]),
                        ..ForgeryParams::default()
                    },
                },
            )
        }
        splice => {
            let task = splice.splice_task().expect("remaining kinds are splices");
            let mut donor_idx = rng.random_range(0..sources.len() - 1);
            if donor_idx >= base_idx {
                donor_idx += 1;
            }
            let t = Transform::random_for(task, &mut rng);
            make_splice(base, &sources[donor_idx], &t, &mut rng)?
        }
    };
    if kind != ForgeryKind::Pristine {
        return Ok((img, truth));
    }
    let quality = rng.random_range(PRISTINE_QUALITY.0..=PRISTINE_QUALITY.1);
    truth.params.final_quality = Some(quality);
    Ok((jpeg_roundtrip(&img, quality)?, truth))
}

/// One line of `manifest.jsonl`. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub schema: String,
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: Label,
    pub kind: ForgeryKind,
    pub params: ForgeryParams,
    pub seed: u64,
}

/// Requested image count per kind.
pub type CorpusCounts = BTreeMap<ForgeryKind, usize>;

/// Parses `kind=count` pairs separated by commas.
pub fn parse_counts(spec: &str) -> Result<CorpusCounts> {
    let mut counts = CorpusCounts::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected kind=count, got {part:?}")))?;
        let kind = ForgeryKind::parse(name.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown forgery kind {name:?}")))?;
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad count in {part:?}")))?;
        *counts.entry(kind).or_default() += count;
    }
    Ok(counts)
}

/// Writes `images/`, `masks/`, `manifest.jsonl` and `README.txt` under
/// `out_dir`. Record `k` is generated from its own derived seed, so the
/// output does not depend on worker scheduling.
pub fn generate_corpus(
    sources: &[GrayImage],
    counts: &CorpusCounts,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    let jobs: Vec<(ForgeryKind, usize)> = counts
        .iter()
        .flat_map(|(&k, &c)| (0..c).map(move |i| (k, i)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("no images requested".into()));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).with_path(&images_dir)?;
    fs::create_dir_all(&masks_dir).with_path(&masks_dir)?;

    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(kind, nth))| {
            let record_seed = derive_seed(seed, 3, index as u64);
            let (img, truth) = synthesize(sources, kind, nth, record_seed)?;
            let id = format!("img_{index:05}");
            let image_rel = PathBuf::from("images").join(format!("{id}.png"));
            write_png(&out_dir.join(&image_rel), img.width(), img.height(), &img.to_luma8())?;
            let mask_rel = if truth.mask.is_empty() {
                None
            } else {
                let rel = PathBuf::from("masks").join(format!("{id}.png"));
                write_png(
                    &out_dir.join(&rel),
                    truth.mask.width(),
                    truth.mask.height(),
                    &truth.mask.to_luma8(),
                )?;
                Some(rel)
            };
            Ok(ManifestRecord {
                schema: CORPUS_SCHEMA.to_string(),
                id,
                image: image_rel,
                mask: mask_rel,
                label: truth.label(),
                kind,
                params: truth.params,
                seed: record_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r).expect("records serialize"));
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest).with_path(&manifest_path)?;

    let readme_path = out_dir.join("README.txt");
    let mut readme = fs::File::create(&readme_path).with_path(&readme_path)?;
    let mut text = format!(
        "Synthetic forgery corpus ({CORPUS_SCHEMA})\n\nseed: {seed}\nsource images: {}\n\ncounts:\n",
        sources.len()
    );
    for (k, c) in counts {
        text.push_str(&format!("  {k}: {c}\n"));
    }
    text.push_str(&format!(
        "\nparameters:\n  upsample scale [1.1, 2.0]\n  downsample scale [0.5, 0.9]\n  \
         rotation |degrees| [2, 45], clockwise negative\n  shear factor [0.05, 0.3]\n  \
         recompression quality [40, 84]\n  copy-move block side [{COPY_MIN_SIDE}, {COPY_MAX_SIDE}], \
         source std >= {COPY_MIN_STD}, offset >= {COPY_MIN_DISTANCE} px, mask = destination\n  \
         splice region side fraction [{}, {}], hard edges\n  pristine images JPEG roundtrip at quality [{}, {}]\n\n\
         files:\n  images/<id>.png  8-bit grayscale\n  masks/<id>.png   0/255, manipulated images only\n  \
         manifest.jsonl   one JSON record per image\n",
        SPLICE_SIDE_FRACTION.0, SPLICE_SIDE_FRACTION.1, PRISTINE_QUALITY.0, PRISTINE_QUALITY.1
    ));
    readme.write_all(text.as_bytes()).with_path(&readme_path)?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).with_path(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_path(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        if record.schema != CORPUS_SCHEMA {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: unsupported schema {:?}", i + 1, record.schema),
            });
        }
        out.push(record);
    }
    Ok(out)
}
