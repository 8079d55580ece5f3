//! Pixel containers, codecs, patch grids and the small window filters the
//! detectors share.
//!
//! All window operations replicate edge pixels; zero padding would add an
//! artificial step at the border that shows up as periodicity downstream.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageFormat, ImageReader};
use rayon::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::seg::Heatmap;

/// A row-major raster of finite reals with no range restriction.
///
/// Used for signed intermediates such as the Laplacian residue.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            width,
            height,
            data,
        }
    }

    /// Internal constructor for callers that already guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Read with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        let mut data = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + width]);
        }
        Plane::from_raw(width, height, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane::from_raw(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

macro_rules! unit_raster {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Plane);

        impl $name {
            /// Builds the raster, rejecting values outside `[0, 1]`.
            pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
                Self::from_plane(Plane::new(width, height, data)?)
            }

            pub fn from_plane(plane: Plane) -> Result<Self> {
                if let Some(i) = plane.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidRaster(format!(
                        "value {} at index {i} outside [0, 1]",
                        plane.data()[i]
                    )));
                }
                Ok(Self(plane))
            }

            /// Clamps every value into `[0, 1]`.
            pub fn from_plane_clamped(plane: Plane) -> Self {
                Self(plane.map(|v| v.clamp(0.0, 1.0)))
            }

            pub fn filled(width: usize, height: usize, value: f64) -> Self {
                assert!((0.0..=1.0).contains(&value));
                Self($crate::imaging::Plane::filled(width, height, value))
            }

            pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
                Self::from_plane_clamped(Plane::from_fn(width, height, f))
            }

            #[inline]
            pub fn width(&self) -> usize {
                self.0.width()
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.0.height()
            }

            #[inline]
            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> f64 {
                self.0.get(x, y)
            }

            #[inline]
            pub fn as_plane(&self) -> &Plane {
                &self.0
            }

            pub fn into_plane(self) -> Plane {
                self.0
            }

            pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
                Self(self.0.crop(x0, y0, width, height))
            }
        }
    };
}

unit_raster!(
    /// Luminance raster, values in `[0, 1]`.
    GrayImage
);

pub(crate) use unit_raster;

impl GrayImage {
    pub(crate) fn from_plane_unchecked(plane: Plane) -> Self {
        debug_assert!(plane.data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self(plane)
    }

    /// 8-bit quantization (round to nearest).
    pub fn to_luma8(&self) -> Vec<u8> {
        self.data().iter().map(|&v| quantize8(v)).collect()
    }

    pub fn from_luma8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} bytes for a {width}x{height} raster",
                bytes.len()
            )));
        }
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

#[inline]
pub(crate) fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes a PNG or baseline JPEG into luminance.
///
/// Color is reduced with BT.601 weights (0.299, 0.587, 0.114); alpha is
/// discarded.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let mut cursor = Cursor::new(bytes);
    let reader = ImageReader::new(&mut cursor)
        .with_guessed_format()
        .map_err(|e| Error::Decode {
            offset: 0,
            message: e.to_string(),
        })?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        _ => return Err(Error::UnsupportedFormat),
    }
    let decoded = reader.decode();
    let offset = cursor.position();
    let decoded = decoded.map_err(|e| match e {
        image::ImageError::Unsupported(_) => Error::UnsupportedFormat,
        other => Error::Decode {
            offset,
            message: other.to_string(),
        },
    })?;
    Ok(luminance(&decoded))
}

fn luminance(img: &DynamicImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
        DynamicImage::ImageLumaA16(buf) => {
            buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| bt601(p.0[0] as u64, p.0[1] as u64, p.0[2] as u64, 65535))
            .collect(),
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| bt601(p.0[0] as u64, p.0[1] as u64, p.0[2] as u64, 255))
            .collect(),
    };
    GrayImage::from_plane_unchecked(Plane::from_raw(w, h, data))
}

// Integer weights keep white at exactly 1.0.
#[inline]
fn bt601(r: u64, g: u64, b: u64, full: u64) -> f64 {
    (299 * r + 587 * g + 114 * b) as f64 / (1000 * full) as f64
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).with_path(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { offset, message } => Error::Format {
            path: path.to_path_buf(),
            message: format!("decode failed near byte {offset}: {message}"),
        },
        other => other,
    })
}

/// 8-bit grayscale PNG encoding of a `[0, 1]` raster.
pub fn encode_png(width: usize, height: usize, luma: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        luma,
        width as u32,
        height as u32,
        ExtendedColorType::L8,
    )
    .expect("in-memory PNG encoding cannot fail for valid dimensions");
    out
}

pub fn write_png(path: &Path, width: usize, height: usize, luma: &[u8]) -> Result<()> {
    std::fs::write(path, encode_png(width, height, luma)).with_path(path)
}

/// Baseline JPEG encode at quality `qf`, then decode.
pub fn jpeg_roundtrip(img: &GrayImage, qf: u8) -> Result<GrayImage> {
    if !(1..=100).contains(&qf) {
        return Err(Error::ParamRange {
            name: "qf",
            value: qf as f64,
            min: 1.0,
            max: 100.0,
        });
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, qf)
        .encode(
            &img.to_luma8(),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::InvalidArgument(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg).map_err(|e| {
        Error::Decode {
            offset: 0,
            message: e.to_string(),
        }
    })?;
    Ok(luminance(&decoded))
}

/// Top-left corners of fixed-size square patches, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if stride == 0 || patch_size == 0 {
            return Err(Error::InvalidArgument(
                "patch size and stride must be positive".into(),
            ));
        }
        if width < patch_size || height < patch_size {
            return Err(Error::ImageTooSmall {
                width,
                height,
                min_width: patch_size,
                min_height: patch_size,
            });
        }
        let cols = (width - patch_size) / stride + 1;
        let rows = (height - patch_size) / stride + 1;
        let origins = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c * stride, r * stride)))
            .collect();
        Ok(Self {
            patch_size,
            stride,
            cols,
            rows,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn extract_patches(img: &GrayImage, size: usize, stride: usize) -> Result<PatchGrid> {
    PatchGrid::new(img.width(), img.height(), size, stride)
}

fn require_size(plane: &Plane, min: usize) -> Result<()> {
    if plane.width < min || plane.height < min {
        return Err(Error::ImageTooSmall {
            width: plane.width,
            height: plane.height,
            min_width: min,
            min_height: min,
        });
    }
    Ok(())
}

/// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`, unclamped.
pub fn laplacian3x3(img: &Plane) -> Result<Plane> {
    require_size(img, 3)?;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let c = img.get_clamped(x, y);
            // differences first, so constant neighbourhoods give exact zeros
            data.push(
                (img.get_clamped(x, y - 1) - c)
                    + (img.get_clamped(x - 1, y) - c)
                    + (img.get_clamped(x + 1, y) - c)
                    + (img.get_clamped(x, y + 1) - c),
            );
        }
    }
    Ok(Plane::from_raw(img.width, img.height, data))
}

/// Edge-replicated copy with `pad` extra pixels on every side, as f32.
fn pad_replicate_f32(plane: &Plane, pad: usize) -> (Vec<f32>, usize) {
    let pw = plane.width + 2 * pad;
    let ph = plane.height + 2 * pad;
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = y as isize - pad as isize;
        for x in 0..pw {
            out.push(plane.get_clamped(x as isize - pad as isize, sy) as f32);
        }
    }
    (out, pw)
}

/// `exp(x)` for `x <= 0`, relative error below 2e-5 on `[-87, 0]`; clamped below.
///
/// Branch-free so the bilateral inner loop vectorizes.
#[inline(always)]
fn exp_neg(x: f32) -> f32 {
    let x = x.max(-87.0);
    let t = x * std::f32::consts::LOG2_E;
    // adding EXP_ROUND leaves round(t) in the low mantissa bits
    let shifted = t + EXP_ROUND;
    let z = (t - (shifted - EXP_ROUND)) * std::f32::consts::LN_2;
    let mut p = EXP_COEFFS[0];
    for &c in &EXP_COEFFS[1..] {
        p = c + z * p;
    }
    p = 1.0 + z * p;
    // the upper bits of `shifted` fall off in the shift
    let biased = shifted.to_bits().wrapping_add(127);
    p * f32::from_bits(biased << 23)
}

const EXP_ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
/// Taylor coefficients of `e^z` from `z^6` down to `z^1`.
const EXP_COEFFS: [f32; 6] = [1.0 / 720.0, 1.0 / 120.0, 1.0 / 24.0, 1.0 / 6.0, 0.5, 1.0];

const LANES: usize = 8;

/// Edge-preserving smoothing with a Gaussian spatial kernel truncated at
/// `ceil(3 * sigma_spatial)` and a Gaussian range kernel.
pub fn bilateral_filter(map: &Heatmap, sigma_spatial: f64, sigma_range: f64) -> Result<Heatmap> {
    if !(sigma_spatial > 0.0 && sigma_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bilateral sigmas must be positive (spatial {sigma_spatial}, range {sigma_range})"
        )));
    }
    let plane = map.as_plane();
    let (w, h) = (plane.width, plane.height);
    let radius = (3.0 * sigma_spatial).ceil() as usize;
    let span = 2 * radius + 1;
    // window rows padded to a multiple of LANES with zero spatial weight
    let span_padded = span.div_ceil(LANES) * LANES;
    let inv_s = -1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let mut spatial = vec![0f32; span * span_padded];
    for dy in 0..span {
        for dx in 0..span {
            let ry = dy as f64 - radius as f64;
            let rx = dx as f64 - radius as f64;
            spatial[dy * span_padded + dx] = ((rx * rx + ry * ry) * inv_s).exp() as f32;
        }
    }
    let (padded, pw) = pad_replicate_f32(plane, radius);
    // extra columns so a padded window row never reads past the buffer
    let mut padded = padded;
    padded.extend(std::iter::repeat_n(0.0, span_padded));
    let range_scale = (-1.0 / (2.0 * sigma_range * sigma_range)) as f32;

    let kernel = BilateralKernel {
        padded: &padded,
        pw,
        spatial: &spatial,
        span,
        span_padded,
        range_scale,
    };
    let mut out = vec![0f64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        let centers = plane.row(y);
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                unsafe { kernel.row_avx2(y, centers, out_row) };
                return;
            }
        }
        kernel.row(y, centers, out_row);
    });
    Ok(Heatmap::from_plane_clamped(Plane::from_raw(w, h, out)))
}

struct BilateralKernel<'a> {
    padded: &'a [f32],
    pw: usize,
    spatial: &'a [f32],
    span: usize,
    span_padded: usize,
    range_scale: f32,
}

impl BilateralKernel<'_> {
    #[inline(always)]
    fn row(&self, y: usize, centers: &[f64], out_row: &mut [f64]) {
        for (x, (slot, &center64)) in out_row.iter_mut().zip(centers).enumerate() {
            let center = center64 as f32;
            let mut num = [0f32; LANES];
            let mut den = [0f32; LANES];
            for dy in 0..self.span {
                let base = (y + dy) * self.pw + x;
                let vals = &self.padded[base..base + self.span_padded];
                let ws = &self.spatial[dy * self.span_padded..(dy + 1) * self.span_padded];
                for (vc, wc) in vals.chunks_exact(LANES).zip(ws.chunks_exact(LANES)) {
                    for l in 0..LANES {
                        let d = vc[l] - center;
                        let wgt = wc[l] * exp_neg(d * d * self.range_scale);
                        num[l] += wgt * d;
                        den[l] += wgt;
                    }
                }
            }
            let num: f32 = num.iter().sum();
            let den: f32 = den.iter().sum();
            // the center tap has weight 1, so den >= 1
            *slot = (center64 + (num / den) as f64).clamp(0.0, 1.0);
        }
    }

    /// [`Self::row`] with explicit 256-bit vectors; every lane performs the
    /// same operations in the same order, so results are bit-identical.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn row_avx2(&self, y: usize, centers: &[f64], out_row: &mut [f64]) {
        use std::arch::x86_64::*;
        let round = _mm256_set1_ps(EXP_ROUND);
        let floor = _mm256_set1_ps(-87.0);
        let log2e = _mm256_set1_ps(std::f32::consts::LOG2_E);
        let ln2 = _mm256_set1_ps(std::f32::consts::LN_2);
        let one = _mm256_set1_ps(1.0);
        let coeffs = EXP_COEFFS.map(|c| _mm256_set1_ps(c));
        let bias = _mm256_set1_epi32(127);
        let range_scale = _mm256_set1_ps(self.range_scale);
        for (x, (slot, &center64)) in out_row.iter_mut().zip(centers).enumerate() {
            let center = _mm256_set1_ps(center64 as f32);
            let mut num = _mm256_setzero_ps();
            let mut den = _mm256_setzero_ps();
            for dy in 0..self.span {
                let base = (y + dy) * self.pw + x;
                let vals = &self.padded[base..base + self.span_padded];
                let ws = &self.spatial[dy * self.span_padded..(dy + 1) * self.span_padded];
                for (vc, wc) in vals.chunks_exact(LANES).zip(ws.chunks_exact(LANES)) {
                    let d = _mm256_sub_ps(_mm256_loadu_ps(vc.as_ptr()), center);
                    let e = _mm256_max_ps(_mm256_mul_ps(_mm256_mul_ps(d, d), range_scale), floor);
                    let t = _mm256_mul_ps(e, log2e);
                    let shifted = _mm256_add_ps(t, round);
                    let z = _mm256_mul_ps(_mm256_sub_ps(t, _mm256_sub_ps(shifted, round)), ln2);
                    let mut p = coeffs[0];
                    for &c in &coeffs[1..] {
                        p = _mm256_add_ps(c, _mm256_mul_ps(z, p));
                    }
                    p = _mm256_add_ps(one, _mm256_mul_ps(z, p));
                    let scale = _mm256_castsi256_ps(_mm256_slli_epi32::<23>(_mm256_add_epi32(
                        _mm256_castps_si256(shifted),
                        bias,
                    )));
                    let wgt = _mm256_mul_ps(_mm256_loadu_ps(wc.as_ptr()), _mm256_mul_ps(p, scale));
                    num = _mm256_add_ps(num, _mm256_mul_ps(wgt, d));
                    den = _mm256_add_ps(den, wgt);
                }
            }
            let mut num_l = [0f32; LANES];
            let mut den_l = [0f32; LANES];
            _mm256_storeu_ps(num_l.as_mut_ptr(), num);
            _mm256_storeu_ps(den_l.as_mut_ptr(), den);
            let num: f32 = num_l.iter().sum();
            let den: f32 = den_l.iter().sum();
            *slot = (center64 + (num / den) as f64).clamp(0.0, 1.0);
        }
    }
}

/// Per-pixel median over the `(2r+1)^2` edge-replicated window.
pub fn median_filter(map: &Heatmap, radius: usize) -> Result<Heatmap> {
    if radius == 0 {
        return Err(Error::InvalidArgument("median radius must be >= 1".into()));
    }
    let plane = map.as_plane();
    let (w, h) = (plane.width, plane.height);
    let r = radius as isize;
    let mut out = vec![0f64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
        for (x, slot) in out_row.iter_mut().enumerate() {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(plane.get_clamped(x as isize + dx, y as isize + dy));
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            *slot = *m;
        }
    });
    Ok(Heatmap::from_plane_clamped(Plane::from_raw(w, h, out)))
}

/// Bilinear sampling with edge replication; `(x, y)` in pixel-center units.
#[inline]
pub fn sample_bilinear_clamped(plane: &Plane, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let a = plane.get_clamped(xi, yi);
    let b = plane.get_clamped(xi + 1, yi);
    let c = plane.get_clamped(xi, yi + 1);
    let d = plane.get_clamped(xi + 1, yi + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

/// Bilinear sampling that treats everything outside the raster as `outside`.
#[inline]
pub fn sample_bilinear_or(plane: &Plane, x: f64, y: f64, outside: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let at = |px: isize, py: isize| {
        if px < 0 || py < 0 || px >= plane.width as isize || py >= plane.height as isize {
            outside
        } else {
            plane.data[py as usize * plane.width + px as usize]
        }
    };
    (at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx) * (1.0 - fy)
        + (at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx) * fy
}

const SIDECAR_MAGIC: &[u8] = b"FSHM1\n";

/// Raw float sidecar: `FSHM1\n`, `W H\n`, then little-endian f32 values.
pub fn encode_sidecar(map: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + map.data().len() * 4);
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(format!("{} {}\n", map.width(), map.height()).as_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a sidecar back into its dimensions and f32 payload.
pub fn decode_sidecar(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::InvalidRaster(format!("heatmap sidecar: {m}"));
    let rest = bytes
        .strip_prefix(SIDECAR_MAGIC)
        .ok_or_else(|| bad("bad magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing dimension line"))?;
    let dims = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("dimension line not utf-8"))?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(bad("malformed dimension line")),
    };
    let payload = &rest[nl + 1..];
    if payload.len() != w * h * 4 {
        return Err(bad("payload length does not match dimensions"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_rgb(w: u32, h: u32, px: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(enc, px, w, h, ExtendedColorType::Rgb8).unwrap();
        out
    }

    #[test]
    fn white_and_red_pixels_decode_to_bt601_luma() {
        let white = decode_image(&png_rgb(1, 1, &[255, 255, 255])).unwrap();
        assert_eq!(white.data(), &[1.0]);
        let red = decode_image(&png_rgb(1, 1, &[255, 0, 0])).unwrap();
        assert_eq!(red.data(), &[0.299]);
    }

    #[test]
    fn gradient_matches_reference_luma() {
        let mut px = Vec::new();
        for y in 0..8u32 {
            for x in 0..8u32 {
                px.extend_from_slice(&[(x * 32) as u8, (y * 32) as u8, ((x + y) * 16) as u8]);
            }
        }
        let bytes = png_rgb(8, 8, &px);
        let ours = decode_image(&bytes).unwrap();
        // independent path: the image crate's RGB decode, weighted in floating point
        let reference = image::load_from_memory(&bytes).unwrap().to_rgb8();
        for (a, p) in ours.data().iter().zip(reference.pixels()) {
            let [r, g, b] = p.0.map(|c| c as f64 / 255.0);
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            assert!((a - luma).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn truncated_png_reports_decode_error() {
        let bytes = png_rgb(8, 8, &[7u8; 192]);
        let cut = &bytes[..bytes.len() - 20];
        match decode_image(cut) {
            Err(Error::Decode { offset, .. }) => assert!(offset as usize <= cut.len()),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_format_is_distinct_error() {
        assert!(matches!(
            decode_image(b"GIF89a\x01\x00\x01\x00"),
            Err(Error::UnsupportedFormat)
        ));
        assert!(matches!(decode_image(b"hello world"), Err(Error::UnsupportedFormat)));
    }

    #[test]
    fn decoding_is_deterministic() {
        let bytes = png_rgb(2, 1, &[10, 20, 30, 200, 100, 50]);
        assert_eq!(decode_image(&bytes).unwrap(), decode_image(&bytes).unwrap());
    }

    #[test]
    fn jpeg_q100_gradient_is_near_lossless() {
        let img = GrayImage::from_fn(64, 64, |x, y| (x + y) as f64 / 126.0);
        let out = jpeg_roundtrip(&img, 100).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        let worst = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 3.0 / 255.0, "max error {worst}");
    }

    #[test]
    fn jpeg_error_grows_as_quality_drops() {
        let img = GrayImage::from_fn(64, 48, |x, y| {
            0.5 + 0.4 * ((x as f64 * 0.9).sin() * (y as f64 * 1.3).cos())
        });
        let mean_err = |qf| {
            let out = jpeg_roundtrip(&img, qf).unwrap();
            assert_eq!((out.width(), out.height()), (64, 48));
            img.data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / img.data().len() as f64
        };
        assert!(mean_err(10) > mean_err(95));
        assert!(jpeg_roundtrip(&img, 0).is_err());
        assert!(jpeg_roundtrip(&img, 101).is_err());
    }

    #[test]
    fn patch_grid_examples() {
        let g = PatchGrid::new(64, 64, 64, 32).unwrap();
        assert_eq!(g.origins, vec![(0, 0)]);
        let g = PatchGrid::new(96, 96, 64, 32).unwrap();
        assert_eq!(g.origins, vec![(0, 0), (32, 0), (0, 32), (32, 32)]);
        assert!(matches!(
            PatchGrid::new(63, 64, 64, 32),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn laplacian_kills_constants_and_ramps() {
        let c = Plane::filled(6, 5, 0.3);
        assert!(laplacian3x3(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let ramp = Plane::from_fn(8, 8, |x, y| 0.02 * x as f64 + 0.05 * y as f64);
        let lap = laplacian3x3(&ramp).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!(lap.get(x, y).abs() < 1e-12);
            }
        }
        assert!(matches!(
            laplacian3x3(&Plane::filled(2, 5, 0.0)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn laplacian_of_impulse_is_the_kernel() {
        let img = Plane::from_fn(5, 5, |x, y| if (x, y) == (2, 2) { 1.0 } else { 0.0 });
        let lap = laplacian3x3(&img).unwrap();
        // direct convolution by hand
        let expected = [
            [0., 0., 0., 0., 0.],
            [0., 0., 1., 0., 0.],
            [0., 1., -4., 1., 0.],
            [0., 0., 1., 0., 0.],
            [0., 0., 0., 0., 0.],
        ];
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(lap.get(x, y), expected[y][x]);
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn vector_kernel_matches_portable_kernel() {
        if !std::is_x86_feature_detected!("avx2") {
            return;
        }
        let map = Heatmap::from_fn(37, 29, |x, y| ((x * 31 + y * 17) % 23) as f64 / 22.0);
        let plane = map.as_plane();
        let radius: usize = 6;
        let span = 2 * radius + 1;
        let span_padded = span.div_ceil(LANES) * LANES;
        let spatial: Vec<f32> = (0..span * span_padded)
            .map(|i: usize| if i % span_padded < span { 0.5 + (i % 7) as f32 * 0.05f32 } else { 0.0 })
            .collect();
        let (mut padded, pw) = pad_replicate_f32(plane, radius);
        padded.extend(std::iter::repeat_n(0.0, span_padded));
        let kernel = BilateralKernel {
            padded: &padded,
            pw,
            spatial: &spatial,
            span,
            span_padded,
            range_scale: -20.0,
        };
        for y in 0..plane.height() {
            let mut a = vec![0.0; plane.width()];
            let mut b = vec![0.0; plane.width()];
            kernel.row(y, plane.row(y), &mut a);
            unsafe { kernel.row_avx2(y, plane.row(y), &mut b) };
            assert_eq!(a, b);
        }
    }

    #[test]
    fn exp_neg_is_accurate() {
        let mut worst = 0f64;
        for i in 0..=87_000 {
            let x = -(i as f32) * 1e-3;
            let approx = exp_neg(x) as f64;
            let exact = (x as f64).exp();
            worst = worst.max((approx - exact).abs() / exact);
        }
        assert!(worst < 2e-5, "relative error {worst}");
        assert_eq!(exp_neg(-200.0), exp_neg(-87.0));
        assert_eq!(exp_neg(0.0), 1.0);
    }

    fn bilateral_oracle(map: &Heatmap, ss: f64, sr: f64) -> Vec<f64> {
        let p = map.as_plane();
        let r = (3.0 * ss).ceil() as isize;
        let mut out = Vec::new();
        for y in 0..p.height() as isize {
            for x in 0..p.width() as isize {
                let c = p.get_clamped(x, y);
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = p.get_clamped(x + dx, y + dy);
                        let w = (-((dx * dx + dy * dy) as f64) / (2.0 * ss * ss)).exp()
                            * (-(v - c).powi(2) / (2.0 * sr * sr)).exp();
                        num += w * v;
                        den += w;
                    }
                }
                out.push(num / den);
            }
        }
        out
    }

    #[test]
    fn bilateral_matches_direct_evaluation() {
        let map = Heatmap::from_fn(23, 17, |x, y| {
            (0.5 + 0.3 * (x as f64 * 0.7).sin() + 0.2 * (y as f64 * 0.4).cos()).clamp(0.0, 1.0)
        });
        let fast = bilateral_filter(&map, 2.0, 0.2).unwrap();
        let slow = bilateral_oracle(&map, 2.0, 0.2);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn bilateral_constant_and_tiny_maps_unchanged() {
        let c = Heatmap::filled(40, 30, 0.37);
        assert_eq!(bilateral_filter(&c, 8.0, 0.15).unwrap(), c);
        let one = Heatmap::filled(1, 1, 0.81);
        assert_eq!(bilateral_filter(&one, 3.0, 0.1).unwrap(), one);
        assert!(bilateral_filter(&one, 0.0, 0.1).is_err());
    }

    #[test]
    fn bilateral_preserves_step_edges() {
        let map = Heatmap::from_fn(40, 20, |x, _| if x < 20 { 0.1 } else { 0.9 });
        let out = bilateral_filter(&map, 4.0, 0.05).unwrap();
        let oracle = bilateral_oracle(&map, 4.0, 0.05);
        for y in 0..20 {
            for x in [19, 20] {
                let orig = map.get(x, y);
                let got = out.get(x, y);
                assert!((got - orig).abs() <= 0.05 * orig, "({x},{y}) {got} vs {orig}");
                assert!((got - oracle[y * 40 + x]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn median_filter_examples() {
        let c = Heatmap::filled(9, 9, 0.4);
        assert_eq!(median_filter(&c, 2).unwrap(), c);
        let imp = Heatmap::from_fn(15, 15, |x, y| if (x, y) == (7, 7) { 1.0 } else { 0.0 });
        assert!(median_filter(&imp, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(median_filter(&c, 0).is_err());
    }

    #[test]
    fn sidecar_roundtrip_is_bit_exact() {
        let map = Heatmap::from_fn(5, 3, |x, y| (x * 3 + y) as f64 / 17.0);
        let bytes = encode_sidecar(&map);
        assert!(bytes.starts_with(b"FSHM1\n5 3\n"));
        let (w, h, vals) = decode_sidecar(&bytes).unwrap();
        assert_eq!((w, h), (5, 3));
        for (v, orig) in vals.iter().zip(map.data()) {
            assert_eq!(v.to_bits(), (*orig as f32).to_bits());
        }
        assert!(decode_sidecar(&bytes[..bytes.len() - 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn plane(w: usize, h: usize, vals: &[f64]) -> Plane {
            Plane::from_fn(w, h, |x, y| vals[(y * w + x) % vals.len()])
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn patch_count_matches_enumeration(
                w in 1usize..300, h in 1usize..300, size in 1usize..80, stride in 1usize..50,
            ) {
                let fits = |n: usize| (0..n).step_by(stride).filter(|&o| o + size <= n).count();
                match PatchGrid::new(w, h, size, stride) {
                    Ok(g) => prop_assert_eq!(g.len(), fits(w) * fits(h)),
                    Err(_) => prop_assert!(w < size || h < size),
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn laplacian_is_linear(
                w in 3usize..20, h in 3usize..20,
                vals in prop::collection::vec(-1.0f64..1.0, 1..64),
                c in -10.0f64..10.0,
            ) {
                let p = plane(w, h, &vals);
                let a = laplacian3x3(&p.map(|v| c * v)).unwrap();
                let b = laplacian3x3(&p).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - c * y).abs() < 1e-12);
                }
            }

            #[test]
            fn filters_fix_constant_maps(w in 1usize..24, h in 1usize..24, v in 0.0f64..=1.0, r in 1usize..4) {
                let map = Heatmap::filled(w, h, v);
                prop_assert_eq!(&bilateral_filter(&map, 8.0, 0.15).unwrap(), &map);
                prop_assert_eq!(&median_filter(&map, r).unwrap(), &map);
            }
        }
    }
}
