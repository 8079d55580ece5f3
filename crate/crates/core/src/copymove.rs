//! Dense copy-move detection: Zernike moment magnitudes per pixel, a
//! PatchMatch nearest-neighbour field, and false-match filtering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::seg::{dilate, label_components, morph_open, BinaryMask};

pub const DISK_RADIUS: usize = 8;
pub const NUM_MOMENTS: usize = 12;
/// `(n, m)` orders, `m >= 0`, `n - m` even, `n <= 5`.
pub const ORDERS: [(u32, u32); NUM_MOMENTS] = [
    (0, 0),
    (1, 1),
    (2, 0),
    (2, 2),
    (3, 1),
    (3, 3),
    (4, 0),
    (4, 2),
    (4, 4),
    (5, 1),
    (5, 3),
    (5, 5),
];
pub const MIN_BLOCK_STD: f64 = 0.02;
pub const MIN_OFFSET: f64 = 16.0;
pub const PATCHMATCH_ITERS: usize = 8;
pub const CONSISTENCY_RADIUS: usize = 3;
pub const OFFSET_TOLERANCE: i32 = 2;
pub const OPEN_RADIUS: usize = 2;
pub const MIN_COMPONENT_AREA: usize = 200;
/// Square growth applied to matched block centres. Less than the disk
/// radius: disks that only partly overlap a copy still match it.
pub const MASK_GROW_RADIUS: usize = 6;
pub const CONFIDENCE_AREA_FRACTION: f64 = 0.01;
pub const FLAG_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SEED: u64 = 0x5eed_c0de;

pub type Moments = [f64; NUM_MOMENTS];

/// Moment magnitudes per pixel; pixels whose disk leaves the image or whose
/// block is nearly flat are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct ZernikeField {
    width: usize,
    height: usize,
    features: Vec<Moments>,
    valid: Vec<bool>,
}

impl ZernikeField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<&Moments> {
        let i = y * self.width + x;
        self.valid[i].then(|| &self.features[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Zernike radial polynomial `R_n^m(rho)`.
pub fn radial_polynomial(n: u32, m: u32, rho: f64) -> f64 {
    (0..=(n - m) / 2)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(n - k)
                / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k))
                * rho.powi((n - 2 * k) as i32)
        })
        .sum()
}

/// Integer offsets inside the radius-8 disk, row-major.
pub fn disk_offsets() -> Vec<(i32, i32)> {
    let r = DISK_RADIUS as i32;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

const KERNEL_LEN: usize = 2 * (NUM_MOMENTS - 1);

/// Conjugate basis functions `(n+1)/N * R_n^m(rho) e^{-i m theta}` for every
/// order except `(0, 0)`, interleaved re/im per disk pixel. Each is shifted to
/// zero mean over the disk so a constant block has no response; the shift is
/// nonzero only for `m = 0 mod 4`, which keeps 90 degree rotations an exact
/// phase change.
fn kernels(offsets: &[(i32, i32)]) -> Vec<[f64; KERNEL_LEN]> {
    let n_px = offsets.len() as f64;
    let mut k = vec![[0.0; KERNEL_LEN]; offsets.len()];
    for (j, &(n, m)) in ORDERS[1..].iter().enumerate() {
        let scale = (n + 1) as f64 / n_px;
        let mut mean = (0.0, 0.0);
        for (p, &(dx, dy)) in offsets.iter().enumerate() {
            let rho = ((dx * dx + dy * dy) as f64).sqrt() / DISK_RADIUS as f64;
            // image y grows downward; theta is measured counterclockwise as displayed
            let theta = (-dy as f64).atan2(dx as f64);
            let r = scale * radial_polynomial(n, m, rho);
            let (s, c) = (m as f64 * theta).sin_cos();
            k[p][2 * j] = r * c;
            k[p][2 * j + 1] = -r * s;
            mean.0 += r * c;
            mean.1 -= r * s;
        }
        for row in k.iter_mut() {
            row[2 * j] -= mean.0 / n_px;
            row[2 * j + 1] -= mean.1 / n_px;
        }
    }
    k
}

/// Moment magnitudes of the disk centred at `(cx, cy)` plus the block's
/// standard deviation.
fn block_moments(
    img: &GrayImage,
    offsets: &[(i32, i32)],
    kern: &[[f64; KERNEL_LEN]],
    cx: usize,
    cy: usize,
) -> (Moments, f64) {
    let w = img.width();
    let data = img.data();
    let mut acc = [0.0; KERNEL_LEN];
    let (mut sum, mut sq) = (0.0, 0.0);
    for (&(dx, dy), k) in offsets.iter().zip(kern) {
        let v = data[(cy as i32 + dy) as usize * w + (cx as i32 + dx) as usize];
        sum += v;
        sq += v * v;
        for (a, &kv) in acc.iter_mut().zip(k) {
            *a += v * kv;
        }
    }
    let n = offsets.len() as f64;
    let mean = sum / n;
    let std = (sq / n - mean * mean).max(0.0).sqrt();
    let mut out = [0.0; NUM_MOMENTS];
    out[0] = mean.abs();
    for j in 0..NUM_MOMENTS - 1 {
        out[j + 1] = acc[2 * j].hypot(acc[2 * j + 1]);
    }
    (out, std)
}

pub fn zernike_features(img: &GrayImage) -> Result<ZernikeField> {
    let side = 2 * DISK_RADIUS + 1;
    if img.width() < side || img.height() < side {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min_width: side,
            min_height: side,
        });
    }
    let (w, h) = (img.width(), img.height());
    let offsets = disk_offsets();
    let kern = kernels(&offsets);
    let r = DISK_RADIUS;
    let rows: Vec<Vec<(Moments, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    if x < r || y < r || x + r >= w || y + r >= h {
                        return ([0.0; NUM_MOMENTS], false);
                    }
                    let (m, std) = block_moments(img, &offsets, &kern, x, y);
                    (m, std >= MIN_BLOCK_STD)
                })
                .collect()
        })
        .collect();
    let (features, valid) = rows.into_iter().flatten().unzip();
    Ok(ZernikeField {
        width: w,
        height: h,
        features,
        valid,
    })
}

/// Squared Euclidean distance between two feature vectors.
pub fn feature_cost(a: &Moments, b: &Moments) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best match per pixel. Pixels without a match hold cost `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    width: usize,
    height: usize,
    offsets: Vec<(i32, i32)>,
    costs: Vec<f64>,
}

impl OffsetField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Offset and cost at `(x, y)`, if the pixel holds a match.
    pub fn get(&self, x: usize, y: usize) -> Option<((i32, i32), f64)> {
        let i = y * self.width + x;
        self.costs[i]
            .is_finite()
            .then(|| (self.offsets[i], self.costs[i]))
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Builds a field directly; entries with infinite cost are unmatched.
    pub fn from_parts(
        width: usize,
        height: usize,
        offsets: Vec<(i32, i32)>,
        costs: Vec<f64>,
    ) -> Result<Self> {
        for len in [offsets.len(), costs.len()] {
            if len != width * height {
                return Err(Error::Shape {
                    expected: width * height,
                    actual: len,
                });
            }
        }
        Ok(Self {
            width,
            height,
            offsets,
            costs,
        })
    }
}

struct Matcher<'a> {
    field: &'a ZernikeField,
    offsets: Vec<(i32, i32)>,
    costs: Vec<f64>,
}

impl Matcher<'_> {
    /// Tries `off` for pixel index `i`; keeps it only on a strict improvement.
    fn try_offset(&mut self, i: usize, off: (i32, i32)) {
        let (w, h) = (self.field.width as i32, self.field.height as i32);
        if ((off.0 * off.0 + off.1 * off.1) as f64) < MIN_OFFSET * MIN_OFFSET {
            return;
        }
        let (x, y) = ((i % self.field.width) as i32, (i / self.field.width) as i32);
        let (qx, qy) = (x + off.0, y + off.1);
        if qx < 0 || qy < 0 || qx >= w || qy >= h {
            return;
        }
        let q = (qy * w + qx) as usize;
        if !self.field.valid[q] {
            return;
        }
        let c = feature_cost(&self.field.features[i], &self.field.features[q]);
        if c < self.costs[i] {
            self.costs[i] = c;
            self.offsets[i] = off;
        }
    }
}

/// Attempts per pixel to draw a random initial target far enough away.
const INIT_TRIES: usize = 32;
const KD_LEAF: usize = 32;

/// PatchMatch over valid pixels; see [`patchmatch_traced`].
pub fn patchmatch(field: &ZernikeField, seed: u64, iters: usize) -> Result<OffsetField> {
    Ok(patchmatch_traced(field, seed, iters)?.0)
}

/// Like [`patchmatch`], also returning the cost raster after initialization
/// and after each iteration.
pub fn patchmatch_traced(
    field: &ZernikeField,
    seed: u64,
    iters: usize,
) -> Result<(OffsetField, Vec<Vec<f64>>)> {
    run_patchmatch(field, seed, iters, false)
}

/// [`patchmatch`] followed by an exact kd-tree search that replaces any
/// match with a cheaper one at `|offset| >= MIN_OFFSET`. This is the field
/// the detector uses.
pub fn patchmatch_refined(field: &ZernikeField, seed: u64, iters: usize) -> Result<OffsetField> {
    Ok(run_patchmatch(field, seed, iters, true)?.0)
}

fn run_patchmatch(
    field: &ZernikeField,
    seed: u64,
    iters: usize,
    kd_polish: bool,
) -> Result<(OffsetField, Vec<Vec<f64>>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("patchmatch needs at least one iteration".into()));
    }
    let valid: Vec<usize> = (0..field.valid.len()).filter(|&i| field.valid[i]).collect();
    if valid.len() < 2 {
        return Err(Error::InsufficientTexture);
    }
    let (w, h) = (field.width, field.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matcher {
        field,
        offsets: vec![(0, 0); w * h],
        costs: vec![f64::INFINITY; w * h],
    };
    for &i in &valid {
        let (x, y) = ((i % w) as i32, (i / w) as i32);
        for _ in 0..INIT_TRIES {
            let q = valid[rng.random_range(0..valid.len())];
            m.try_offset(i, ((q % w) as i32 - x, (q / w) as i32 - y));
            if m.costs[i].is_finite() {
                break;
            }
        }
    }
    let mut trace = vec![m.costs.clone()];
    let diag = ((w * w + h * h) as f64).sqrt() as i32;
    let tree = kd_polish.then(|| KdTree::build(&field.features, valid.clone(), w));
    for it in 0..iters {
        let forward = it % 2 == 0;
        let step: i32 = if forward { -1 } else { 1 };
        for k in 0..valid.len() {
            let i = if forward { valid[k] } else { valid[valid.len() - 1 - k] };
            let (x, y) = ((i % w) as i32, (i / w) as i32);
            for (nx, ny) in [(x + step, y), (x, y + step)] {
                if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if m.costs[n].is_finite() {
                    m.try_offset(i, m.offsets[n]);
                }
            }
            let mut radius = diag;
            while radius >= 1 {
                let base = m.offsets[i];
                m.try_offset(
                    i,
                    (
                        base.0 + rng.random_range(-radius..=radius),
                        base.1 + rng.random_range(-radius..=radius),
                    ),
                );
                radius /= 2;
            }
            // the cost is symmetric, so p -> q is also a candidate q -> p
            if m.costs[i].is_finite() {
                let o = m.offsets[i];
                let q = (y + o.1) as usize * w + (x + o.0) as usize;
                m.try_offset(q, (-o.0, -o.1));
            }
        }
        if it + 1 == iters {
            if let Some(tree) = &tree {
                let found: Vec<Option<((i32, i32), f64)>> = valid
                    .par_iter()
                    .map(|&i| tree.nearest(field, i, m.costs[i]))
                    .collect();
                for (&i, f) in valid.iter().zip(found) {
                    if let Some((off, c)) = f {
                        m.offsets[i] = off;
                        m.costs[i] = c;
                    }
                }
            }
        }
        trace.push(m.costs.clone());
    }
    Ok((
        OffsetField {
            width: w,
            height: h,
            offsets: m.offsets,
            costs: m.costs,
        },
        trace,
    ))
}

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over valid pixels' features, median split on the widest
/// dimension. Each node also keeps the pixel-coordinate bounding box of its
/// points so subtrees lying entirely inside the excluded disk are skipped.
struct KdTree {
    nodes: Vec<KdNode>,
    boxes: Vec<[i32; 4]>,
    points: Vec<usize>,
    /// Features in `points` order, so leaves scan contiguous memory.
    feats: Vec<Moments>,
    width: usize,
}

struct Query<'a> {
    f: &'a Moments,
    x: i32,
    y: i32,
    best: f64,
    found: Option<((i32, i32), f64)>,
}

impl KdTree {
    fn build(features: &[Moments], mut points: Vec<usize>, width: usize) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            boxes: Vec::new(),
            points: Vec::new(),
            feats: Vec::new(),
            width,
        };
        let n = points.len();
        tree.build_node(features, &mut points, 0, n);
        tree.feats = points.iter().map(|&p| features[p]).collect();
        tree.points = points;
        tree
    }

    fn build_node(&mut self, features: &[Moments], points: &mut [usize], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        let w = self.width;
        let slice = &mut points[start..end];
        let bbox = slice.iter().fold([i32::MAX, i32::MAX, i32::MIN, i32::MIN], |b, &p| {
            let (x, y) = ((p % w) as i32, (p / w) as i32);
            [b[0].min(x), b[1].min(y), b[2].max(x), b[3].max(y)]
        });
        self.nodes.push(KdNode::Leaf { start, end });
        self.boxes.push(bbox);
        if end - start <= KD_LEAF {
            return id;
        }
        let mut dim = 0;
        let mut widest = -1.0;
        for d in 0..NUM_MOMENTS {
            let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(features[p][d]), hi.max(features[p][d]))
            });
            if hi - lo > widest {
                widest = hi - lo;
                dim = d;
            }
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            features[a][dim].total_cmp(&features[b][dim]).then(a.cmp(&b))
        });
        let value = features[slice[mid]][dim];
        let left = self.build_node(features, points, start, start + mid);
        let right = self.build_node(features, points, start + mid, end);
        self.nodes[id] = KdNode::Split { dim, value, left, right };
        id
    }

    /// Exact nearest valid pixel at least `MIN_OFFSET` away from `i`, if one
    /// is strictly cheaper than `bound`.
    fn nearest(&self, field: &ZernikeField, i: usize, bound: f64) -> Option<((i32, i32), f64)> {
        let w = field.width;
        let mut q = Query {
            f: &field.features[i],
            x: (i % w) as i32,
            y: (i / w) as i32,
            best: bound,
            found: None,
        };
        let mut off = [0.0; NUM_MOMENTS];
        self.search(0, 0.0, &mut off, &mut q);
        q.found
    }

    /// Depth-first search with the incremental box distance of Arya and
    /// Mount as the lower bound.
    fn search(&self, n: usize, lb: f64, off: &mut Moments, q: &mut Query) {
        if lb >= q.best {
            return;
        }
        let b = self.boxes[n];
        // farthest box corner still inside the excluded disk
        let fx = (q.x - b[0]).abs().max((b[2] - q.x).abs());
        let fy = (q.y - b[1]).abs().max((b[3] - q.y).abs());
        if ((fx * fx + fy * fy) as f64) < MIN_OFFSET * MIN_OFFSET {
            return;
        }
        match self.nodes[n] {
            KdNode::Leaf { start, end } => {
                let w = self.width;
                for k in start..end {
                    let p = self.points[k];
                    let o = ((p % w) as i32 - q.x, (p / w) as i32 - q.y);
                    if ((o.0 * o.0 + o.1 * o.1) as f64) < MIN_OFFSET * MIN_OFFSET {
                        continue;
                    }
                    let c = feature_cost(q.f, &self.feats[k]);
                    if c < q.best {
                        q.best = c;
                        q.found = Some((o, c));
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let d = q.f[dim] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.search(near, lb, off, q);
                let old = off[dim];
                let far_lb = lb - old * old + d * d;
                off[dim] = d;
                self.search(far, far_lb, off, q);
                off[dim] = old;
            }
        }
    }
}

/// Exact nearest-neighbour field by exhaustive search (quadratic; for tests
/// and small images).
pub fn brute_force_field(field: &ZernikeField) -> OffsetField {
    let (w, h) = (field.width, field.height);
    let valid: Vec<usize> = (0..w * h).filter(|&i| field.valid[i]).collect();
    let best: Vec<((i32, i32), f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let mut best = ((0, 0), f64::INFINITY);
            if !field.valid[i] {
                return best;
            }
            let (x, y) = ((i % w) as i32, (i / w) as i32);
            for &q in &valid {
                let off = ((q % w) as i32 - x, (q / w) as i32 - y);
                if ((off.0 * off.0 + off.1 * off.1) as f64) < MIN_OFFSET * MIN_OFFSET {
                    continue;
                }
                let c = feature_cost(&field.features[i], &field.features[q]);
                if c < best.1 {
                    best = (off, c);
                }
            }
            best
        })
        .collect();
    let (offsets, costs) = best.into_iter().unzip();
    OffsetField {
        width: w,
        height: h,
        offsets,
        costs,
    }
}

/// A surviving region and the region its matches point into.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// `[x, y, w, h]`
    pub source: [usize; 4],
    pub target: [usize; 4],
    pub area: usize,
}

fn median_i32(v: &mut [i32]) -> i32 {
    let mid = v.len() / 2;
    *v.select_nth_unstable(mid).1
}

fn bbox_of(points: impl Iterator<Item = (usize, usize)>) -> [usize; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    [x0, y0, x1 + 1 - x0, y1 + 1 - y0]
}

/// Dense-consistency filter, mirror check, opening, small-component removal,
/// then the union of survivors and their targets grown by
/// [`MASK_GROW_RADIUS`] so the mask covers whole blocks rather than block
/// centres.
pub fn postprocess(field: &OffsetField) -> (BinaryMask, Vec<MatchedPair>) {
    let (w, h) = (field.width, field.height);
    let r = CONSISTENCY_RADIUS as i32;
    let tol = OFFSET_TOLERANCE;
    let consistent: Vec<bool> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let Some((off, _)) = field.get(i % w, i / w) else {
                return false;
            };
            let (x, y) = ((i % w) as i32, (i / w) as i32);
            let (mut dxs, mut dys) = (Vec::with_capacity(49), Vec::with_capacity(49));
            for yy in (y - r).max(0)..=(y + r).min(h as i32 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as i32 - 1) {
                    if let Some((o, _)) = field.get(xx as usize, yy as usize) {
                        dxs.push(o.0);
                        dys.push(o.1);
                    }
                }
            }
            (off.0 - median_i32(&mut dxs)).abs() <= tol && (off.1 - median_i32(&mut dys)).abs() <= tol
        })
        .collect();
    let mirrored = BinaryMask::from_fn(w, h, |x, y| {
        if !consistent[y * w + x] {
            return false;
        }
        let (off, _) = field.get(x, y).expect("consistent pixels are matched");
        let (qx, qy) = (x as i32 + off.0, y as i32 + off.1);
        match field.get(qx as usize, qy as usize) {
            Some((back, _)) => {
                (qx + back.0 - x as i32).abs() <= tol && (qy + back.1 - y as i32).abs() <= tol
            }
            None => false,
        }
    });
    let opened = morph_open(&mirrored, OPEN_RADIUS).expect("radius is positive");
    let (labels, comps) = label_components(&opened);
    let mut keep = vec![false; comps.len() + 1];
    for c in &comps {
        keep[c.id] = c.area >= MIN_COMPONENT_AREA;
    }
    let mut core = BinaryMask::empty(w, h);
    let mut pairs = Vec::new();
    for c in comps.iter().filter(|c| keep[c.id]) {
        let members: Vec<(usize, usize)> = (0..w * h)
            .filter(|&i| labels[i] == c.id)
            .map(|i| (i % w, i / w))
            .collect();
        let targets: Vec<(usize, usize)> = members
            .iter()
            .map(|&(x, y)| {
                let (off, _) = field.get(x, y).expect("survivors are matched");
                ((x as i32 + off.0) as usize, (y as i32 + off.1) as usize)
            })
            .collect();
        for &(x, y) in members.iter().chain(&targets) {
            core.set(x, y, true);
        }
        pairs.push(MatchedPair {
            source: c.bbox,
            target: bbox_of(targets.into_iter()),
            area: c.area,
        });
    }
    let mask = if core.is_empty() { core } else { dilate(&core, MASK_GROW_RADIUS) };
    (mask, pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyMoveReport {
    pub mask: BinaryMask,
    pub flagged: bool,
    pub confidence: f64,
    pub pairs: Vec<MatchedPair>,
    /// Too few textured blocks to match; the report is unflagged and empty.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyMoveSummary {
    pub flagged: bool,
    pub confidence: f64,
    pub degenerate: bool,
    pub mask_area: usize,
    pub components: Vec<MatchedPair>,
}

impl CopyMoveReport {
    pub fn summary(&self) -> CopyMoveSummary {
        CopyMoveSummary {
            flagged: self.flagged,
            confidence: self.confidence,
            degenerate: self.degenerate,
            mask_area: self.mask.count(),
            components: self.pairs.clone(),
        }
    }
}

/// `min(1, area / (0.01 * W * H))`.
pub fn confidence_from_area(area: usize, width: usize, height: usize) -> f64 {
    (area as f64 / (CONFIDENCE_AREA_FRACTION * (width * height) as f64)).min(1.0)
}

pub fn detect_copymove(img: &GrayImage) -> Result<CopyMoveReport> {
    detect_copymove_seeded(img, DEFAULT_SEED)
}

pub fn detect_copymove_seeded(img: &GrayImage, seed: u64) -> Result<CopyMoveReport> {
    if img.width() < 64 || img.height() < 64 {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min_width: 64,
            min_height: 64,
        });
    }
    let features = zernike_features(img)?;
    let field = match patchmatch_refined(&features, seed, PATCHMATCH_ITERS) {
        Ok(f) => f,
        Err(Error::InsufficientTexture) => {
            return Ok(CopyMoveReport {
                mask: BinaryMask::empty(img.width(), img.height()),
                flagged: false,
                confidence: 0.0,
                pairs: Vec::new(),
                degenerate: true,
            })
        }
        Err(e) => return Err(e),
    };
    let (mask, pairs) = postprocess(&field);
    let confidence = confidence_from_area(mask.count(), img.width(), img.height());
    Ok(CopyMoveReport {
        flagged: confidence >= FLAG_THRESHOLD,
        mask,
        confidence,
        pairs,
        degenerate: false,
    })
}
