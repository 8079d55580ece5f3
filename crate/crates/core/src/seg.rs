//! Heatmaps, binary masks, and the localization pipeline:
//! median smoothing, Otsu threshold, random-walker refinement.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{median_filter, unit_raster, Plane};

unit_raster!(
    /// Per-pixel manipulation evidence in `[0, 1]`.
    Heatmap
);

/// Per-pixel manipulated / untouched labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{} mask bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Marks the axis-aligned rectangle `[x, x+w) x [y, y+h)`, clipped to the mask.
    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.bits[yy * self.width + xx] = true;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Pixel F1 against a reference mask.
    pub fn f1(&self, truth: &BinaryMask) -> f64 {
        let tp = self.intersection_count(truth) as f64;
        let denom = (self.count() + truth.count()) as f64;
        if denom == 0.0 {
            1.0
        } else {
            2.0 * tp / denom
        }
    }

    /// Fraction of `truth` pixels covered by this mask.
    pub fn recall(&self, truth: &BinaryMask) -> f64 {
        let t = truth.count();
        if t == 0 {
            1.0
        } else {
            self.intersection_count(truth) as f64 / t as f64
        }
    }

    /// 0/255 luma bytes.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Any non-zero byte is a set pixel.
    pub fn from_luma8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b >= 128).collect())
    }

    pub fn from_gray(img: &crate::imaging::GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.data().iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

const BINS: usize = 256;

#[inline]
fn bin_of(v: f64) -> usize {
    ((v * BINS as f64) as usize).min(BINS - 1)
}

fn otsu_histogram(map: &Heatmap) -> [u64; BINS] {
    let mut hist = [0u64; BINS];
    for &v in map.data() {
        hist[bin_of(v)] += 1;
    }
    hist
}

/// Otsu's threshold on a 256-bin histogram.
///
/// Returns `(k + 1) / 256` for the winning split bin `k`, so that
/// `v >= threshold` selects exactly the upper class. Ties go to the lower `k`.
pub fn otsu_threshold(map: &Heatmap) -> Result<f64> {
    let hist = otsu_histogram(map);
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0f64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_total - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok((best.1 + 1) as f64 / BINS as f64)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Node {
    Fg,
    Bg,
    Free(usize),
}

/// Random-walker foreground probabilities on the 4-connected pixel graph.
///
/// Edge weights are `exp(-beta * (g_i - g_j)^2)`. Seeds are pinned to 1
/// (foreground) or 0 (background); the remaining values solve the reduced
/// Laplacian system with Jacobi-preconditioned conjugate gradients.
pub fn random_walker(
    map: &Heatmap,
    fg_seeds: &[(usize, usize)],
    bg_seeds: &[(usize, usize)],
    beta: f64,
) -> Result<Heatmap> {
    if fg_seeds.is_empty() || bg_seeds.is_empty() {
        return Err(Error::MissingSeeds);
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let (w, h) = (map.width(), map.height());
    let g = map.data();
    let mut nodes = vec![Node::Free(usize::MAX); w * h];
    for &(x, y) in fg_seeds {
        check_in_bounds(x, y, w, h)?;
        nodes[y * w + x] = Node::Fg;
    }
    for &(x, y) in bg_seeds {
        check_in_bounds(x, y, w, h)?;
        if nodes[y * w + x] == Node::Fg {
            return Err(Error::SeedConflict { x, y });
        }
        nodes[y * w + x] = Node::Bg;
    }
    let mut free_pixels = Vec::new();
    for (i, n) in nodes.iter_mut().enumerate() {
        if let Node::Free(slot) = n {
            *slot = free_pixels.len();
            free_pixels.push(i);
        }
    }

    // reduced system in compressed rows: diag, off-diagonal (col, weight), rhs
    let weight = |a: usize, b: usize| (-beta * (g[a] - g[b]).powi(2)).exp();
    let n = free_pixels.len();
    let mut diag = vec![0f64; n];
    let mut slack = vec![0f64; n];
    let mut rhs = vec![0f64; n];
    let mut row_start = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(4 * n);
    let mut vals = Vec::with_capacity(4 * n);
    row_start.push(0);
    for (row, &p) in free_pixels.iter().enumerate() {
        let (x, y) = (p % w, p / w);
        let mut neighbours = [usize::MAX; 4];
        if y > 0 {
            neighbours[0] = p - w;
        }
        if x > 0 {
            neighbours[1] = p - 1;
        }
        if x + 1 < w {
            neighbours[2] = p + 1;
        }
        if y + 1 < h {
            neighbours[3] = p + w;
        }
        for q in neighbours.into_iter().filter(|&q| q != usize::MAX) {
            let wq = weight(p, q);
            diag[row] += wq;
            match nodes[q] {
                Node::Fg => {
                    rhs[row] += wq;
                    slack[row] += wq;
                }
                Node::Bg => slack[row] += wq,
                Node::Free(col) => {
                    cols.push(col);
                    vals.push(wq);
                }
            }
        }
        row_start.push(cols.len());
    }
    // Difference form: a cluster tied to the seeds only by tiny weights would
    // lose them to cancellation in `diag * x - sum(w * x)`.
    let matvec = |x: &[f64], out: &mut [f64]| {
        for r in 0..n {
            let mut acc = slack[r] * x[r];
            for k in row_start[r]..row_start[r + 1] {
                acc += vals[k] * (x[r] - x[cols[k]]);
            }
            out[r] = acc;
        }
    };
    let mut solution = conjugate_gradient(n, matvec, &diag, &rhs, 1e-9, 10 * n.max(1));
    for v in &mut solution {
        *v = v.clamp(0.0, 1.0);
    }
    // CG stalls on pixels tied to the rest only by near-zero weights; sweeps
    // settle them without disturbing the converged part.
    for _ in 0..MAX_SWEEPS {
        let mut worst = 0f64;
        for r in 0..n {
            if diag[r] == 0.0 {
                continue;
            }
            let mut acc = rhs[r];
            for k in row_start[r]..row_start[r + 1] {
                acc += vals[k] * solution[cols[k]];
            }
            let next = acc / diag[r];
            worst = worst.max((next - solution[r]).abs());
            solution[r] = next;
        }
        if worst <= 1e-9 {
            break;
        }
    }

    let mut out = vec![0f64; w * h];
    for (i, node) in nodes.iter().enumerate() {
        out[i] = match node {
            Node::Fg => 1.0,
            Node::Bg => 0.0,
            Node::Free(slot) => solution[*slot].clamp(0.0, 1.0),
        };
    }
    Ok(Heatmap::from_plane_clamped(Plane::from_raw(w, h, out)))
}

fn check_in_bounds(x: usize, y: usize, w: usize, h: usize) -> Result<()> {
    if x >= w || y >= h {
        return Err(Error::InvalidArgument(format!(
            "seed ({x}, {y}) outside {w}x{h} map"
        )));
    }
    Ok(())
}

/// Jacobi-preconditioned CG for an SPD operator; stops at `||r|| <= tol * ||b||`.
const MAX_SWEEPS: usize = 500;

fn conjugate_gradient(
    n: usize,
    matvec: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let mut x = vec![0f64; n];
    if n == 0 || b.iter().all(|&v| v == 0.0) {
        return x;
    }
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0f64; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        // z is each pixel's distance from its weighted neighbour average, so
        // weakly connected pixels count as much as strongly connected ones
        if z.iter().all(|v| v.abs() <= tol) {
            break;
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

pub const RANDOM_WALKER_BETA: f64 = 90.0;
pub const SEED_BAND: f64 = 0.1;

/// Result of [`mask_from_heatmap`].
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub mask: BinaryMask,
    /// The heatmap had a single occupied histogram bin; the mask is empty.
    pub degenerate: bool,
}

/// Median (radius 2) -> Otsu -> seed bands at `t +/- 0.1` -> random walker
/// (beta 90) -> probability >= 0.5.
///
/// When one of the seed bands is empty the walker is skipped and the
/// smoothed map is thresholded at `t` directly.
pub fn mask_from_heatmap(map: &Heatmap) -> Result<Localization> {
    let (w, h) = (map.width(), map.height());
    let smooth = median_filter(map, 2)?;
    let t = match otsu_threshold(&smooth) {
        Ok(t) => t,
        Err(Error::DegenerateHistogram) => {
            return Ok(Localization {
                mask: BinaryMask::empty(w, h),
                degenerate: true,
            })
        }
        Err(e) => return Err(e),
    };
    let hi = (t + SEED_BAND).min(1.0);
    let lo = (t - SEED_BAND).max(0.0);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = smooth.get(x, y);
            if v >= hi {
                fg.push((x, y));
            } else if v <= lo {
                bg.push((x, y));
            }
        }
    }
    let mask = if fg.is_empty() || bg.is_empty() {
        BinaryMask::from_fn(w, h, |x, y| smooth.get(x, y) >= t)
    } else {
        let prob = random_walker(&smooth, &fg, &bg, RANDOM_WALKER_BETA)?;
        BinaryMask::from_fn(w, h, |x, y| prob.get(x, y) >= 0.5)
    };
    Ok(Localization {
        mask,
        degenerate: false,
    })
}

/// Separable min/max filter over a square window with edge replication.
fn square_extremum(mask: &BinaryMask, radius: usize, keep_if_all: bool) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let r = radius as isize;
    let pick = |it: &mut dyn Iterator<Item = bool>| {
        for b in it {
            if b != keep_if_all {
                return !keep_if_all;
            }
        }
        keep_if_all
    };
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut it = (-r..=r).map(|d| {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                mask.bits[y * w + xx]
            });
            horiz[y * w + x] = pick(&mut it);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut it = (-r..=r).map(|d| {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                horiz[yy * w + x]
            });
            out[y * w + x] = pick(&mut it);
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits: out,
    }
}

pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    square_extremum(mask, radius, true)
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    square_extremum(mask, radius, false)
}

/// Erosion then dilation with a `(2r+1)^2` square.
pub fn morph_open(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(Error::InvalidArgument("opening radius must be >= 1".into()));
    }
    Ok(dilate(&erode(mask, radius), radius))
}

/// One 8-connected region of set pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Component {
    pub id: usize,
    pub area: usize,
    /// `[x, y, w, h]`
    pub bbox: [usize; 4],
}

/// Labels 8-connected components; ids start at 1 in raster order of each
/// component's first pixel, label 0 is background.
pub fn label_components(mask: &BinaryMask) -> (Vec<usize>, Vec<Component>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0usize; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let id = comps.len() + 1;
        labels[start] = id;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits[q] && labels[q] == 0 {
                        labels[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(Component {
            id,
            area,
            bbox: [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
        });
    }
    (labels, comps)
}

pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    label_components(mask).1
}
