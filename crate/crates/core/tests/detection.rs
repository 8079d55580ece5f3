//! End-to-end behaviour of the two detectors on constructed fixtures.

use std::sync::OnceLock;

use forgescan::copymove::{detect_copymove, patchmatch, zernike_features, PATCHMATCH_ITERS};
use forgescan::features::{patch_features, NUM_ANGLES, NUM_BINS, PATCH_SIZE};
use forgescan::imaging::{GrayImage, Plane};
use forgescan::mlp::{TaskKind, TrainConfig};
use forgescan::resample::{detect_resampling, resample_score, score_patches, train_models, ResampleModels};
use forgescan::seg::BinaryMask;
use forgescan::synth::{apply_transform, derive_seed, procedural_photo, synthesize, ForgeryKind, Transform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models() -> &'static ResampleModels {
    static MODELS: OnceLock<ResampleModels> = OnceLock::new();
    MODELS.get_or_init(|| {
        let photos: Vec<GrayImage> = (0..24)
            .map(|i| procedural_photo(256, 256, derive_seed(7, 1, i)))
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 10,
            l2: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        train_models(&photos, &[], 3000, &cfg).unwrap().0
    })
}

/// Copies the `side`-square block at `(sx, sy)` to `(sx + ox, sy + oy)`.
fn clone_block(img: &GrayImage, sx: usize, sy: usize, side: usize, ox: usize, oy: usize) -> GrayImage {
    let mut p = img.as_plane().data().to_vec();
    let w = img.width();
    for y in 0..side {
        for x in 0..side {
            p[(sy + oy + y) * w + sx + ox + x] = img.get(sx + x, sy + y);
        }
    }
    GrayImage::new(w, img.height(), p).unwrap()
}

fn rect(w: usize, h: usize, r: [usize; 4]) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    m.fill_rect(r[0], r[1], r[2], r[3]);
    m
}

#[test]
fn exact_duplicate_carries_its_offset() {
    // seed chosen so every block pixel is textured enough to carry features
    let base = procedural_photo(128, 128, 12);
    let img = clone_block(&base, 20, 40, 32, 48, 0);
    let features = zernike_features(&img).unwrap();
    let field = patchmatch(&features, 3, PATCHMATCH_ITERS).unwrap();
    // pixels whose whole disk lies inside one copy
    let (mut hit, mut total) = (0, 0);
    for y in 48..64 {
        for x in 28..44 {
            for (px, want) in [(x, (48, 0)), (x + 48, (-48, 0))] {
                assert!(features.is_valid(px, y));
                total += 1;
                hit += (field.get(px, y).map(|m| m.0) == Some(want)) as usize;
            }
        }
    }
    assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");

    let report = detect_copymove(&img).unwrap();
    let truth = rect(128, 128, [20, 40, 32, 32]).union(&rect(128, 128, [68, 40, 32, 32]));
    let f1 = report.mask.f1(&truth);
    assert!(report.flagged);
    assert!(f1 >= 0.9, "F1 {f1}");
}

#[test]
fn noise_gives_empty_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = GrayImage::from_fn(192, 192, |_, _| rng.random_range(0..256) as f64 / 255.0);
    let report = detect_copymove(&img).unwrap();
    assert!(report.mask.is_empty());
    assert!(!report.flagged);
}

#[test]
fn quarter_turned_clone_is_flagged() {
    let img = procedural_photo(192, 192, 21);
    let (sx, sy, side, dx, dy) = (24, 30, 48, 110, 100);
    let mut p = img.as_plane().data().to_vec();
    for y in 0..side {
        for x in 0..side {
            p[(dy + y) * 192 + dx + x] = img.get(sx + side - 1 - y, sy + x);
        }
    }
    let report = detect_copymove(&GrayImage::new(192, 192, p).unwrap()).unwrap();
    assert!(report.flagged, "confidence {}", report.confidence);
    let dest = rect(192, 192, [dx, dy, side, side]);
    assert!(report.mask.recall(&dest) > 0.8);
}

#[test]
fn synthetic_clone_is_found() {
    let sources: Vec<GrayImage> = (0..3).map(|i| procedural_photo(256, 256, 300 + i)).collect();
    let n = 10;
    let (mut f1, mut recall) = (0.0, 0.0);
    for s in 0..n {
        let (img, gt) = synthesize(&sources, ForgeryKind::CopyMove, 0, s).unwrap();
        let report = detect_copymove(&img).unwrap();
        assert!(report.flagged);
        let [x, y, w, h] = gt.params.source_block.unwrap();
        let both = gt.mask.union(&rect(256, 256, [x, y, w, h]));
        f1 += report.mask.f1(&both) / n as f64;
        recall += report.mask.recall(&gt.mask) / n as f64;
    }
    assert!(recall >= 0.8, "mean destination recall {recall}");
    assert!(f1 >= 0.8, "mean F1 against both copies {f1}");
}

#[test]
fn mask_follows_translation() {
    let big = clone_block(&procedural_photo(224, 224, 4), 30, 40, 48, 100, 70);
    let (tx, ty) = (12, 8);
    let a = GrayImage::from_plane(big.as_plane().crop(0, 0, 200, 200)).unwrap();
    let b = GrayImage::from_plane(big.as_plane().crop(tx, ty, 200, 200)).unwrap();
    let ma = detect_copymove(&a).unwrap().mask;
    let mb = detect_copymove(&b).unwrap().mask;
    assert!(!ma.is_empty());
    // compare on the shared interior, away from both crops' borders
    let m = 16;
    let shifted_a = BinaryMask::from_fn(200, 200, |x, y| {
        x >= m + tx && y >= m + ty && x < 200 - m && y < 200 - m && ma.get(x, y)
    });
    let shifted_b = BinaryMask::from_fn(200, 200, |x, y| {
        x >= m + tx && y >= m + ty && x < 200 - m && y < 200 - m && mb.get(x - tx, y - ty)
    });
    let iou = shifted_a.iou(&shifted_b);
    assert!(iou >= 0.9, "IoU {iou}");
}

#[test]
fn small_rotation_keeps_moments_close() {
    let mut total = 0.0;
    let mut n = 0;
    for s in 0..40 {
        let img = procedural_photo(33, 33, 800 + s);
        let Some(a) = zernike_features(&img).unwrap().get(16, 16).copied() else { continue };
        let r = apply_transform(&img, &Transform::Rotate { degrees: 30.0 }).unwrap();
        let b = zernike_features(&r).unwrap().get(16, 16).copied().unwrap();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        total += (num / den).sqrt();
        n += 1;
    }
    assert!(n >= 30);
    assert!(total / n as f64 <= 0.05, "mean relative error {}", total / n as f64);
}

/// Largest per-angle ratio of spectral peak to median bin.
fn peak_to_median(patch: &Plane) -> f64 {
    let f = patch_features(patch).unwrap();
    (0..NUM_ANGLES)
        .map(|a| {
            let mut bins = f.angle(a).to_vec();
            let peak = bins.iter().copied().fold(0.0, f64::max);
            bins.sort_by(f64::total_cmp);
            let median = (bins[NUM_BINS / 2 - 1] + bins[NUM_BINS / 2]) / 2.0;
            peak / median
        })
        .fold(0.0, f64::max)
}

#[test]
fn doubled_texture_shows_a_spectral_peak() {
    for s in 0..5 {
        let small = procedural_photo(32, 32, 900 + s);
        let patch = Plane::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| {
            forgescan::imaging::sample_bilinear_clamped(small.as_plane(), x as f64 / 2.0, y as f64 / 2.0)
        });
        let ratio = peak_to_median(&patch);
        assert!(ratio > 5.0, "seed {s}: {ratio}");
    }
}

#[test]
fn upsampled_splices_are_periodic() {
    let sources: Vec<GrayImage> = (0..6).map(|i| procedural_photo(256, 256, 400 + i)).collect();
    let n = 20;
    let mut strong = 0;
    for s in 0..n {
        let (img, gt) = synthesize(&sources, ForgeryKind::SpliceUpsample, 0, 1000 + s).unwrap();
        let [x, y, w, h] = gt.params.region.unwrap();
        let (cx, cy) = (x + (w - PATCH_SIZE) / 2, y + (h - PATCH_SIZE) / 2);
        let patch = img.as_plane().crop(cx, cy, PATCH_SIZE, PATCH_SIZE);
        strong += (peak_to_median(&patch) > 3.0) as usize;
    }
    assert!(strong * 10 >= n as usize * 7, "{strong}/{n}");
}

#[test]
fn upsampled_half_lights_up() {
    let tex = procedural_photo(256, 256, 61);
    let up = apply_transform(&tex, &Transform::Upsample { scale: 2.0 }).unwrap();
    let img = GrayImage::from_fn(256, 256, |x, y| if x < 128 { tex.get(x, y) } else { up.get(x, y) });
    let report = detect_resampling(&img, models()).unwrap();
    let heat = &report.heatmaps[TaskKind::Upsample.index()];
    let (mut left, mut right) = (0.0, 0.0);
    for y in 0..256 {
        for x in 0..256 {
            if x < 128 {
                left += heat.get(x, y);
            } else {
                right += heat.get(x, y);
            }
        }
    }
    assert!(right > left, "left {left} right {right}");
    let iou = report.mask.iou(&rect(256, 256, [128, 0, 128, 256]));
    assert!(iou >= 0.3, "IoU {iou}");
}

#[test]
fn upsampling_raises_the_median_score() {
    let mut pristine = Vec::new();
    let mut doubled = Vec::new();
    for s in 0..50 {
        let img = procedural_photo(192, 192, derive_seed(3, 40, s));
        pristine.push(resample_score(&img, models()).unwrap().0);
        let up = apply_transform(&img, &Transform::Upsample { scale: 2.0 }).unwrap();
        doubled.push(resample_score(&up, models()).unwrap().0);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[24] + v[25]) / 2.0
    };
    let (p, d) = (median(&mut pristine), median(&mut doubled));
    assert!(p <= d, "pristine {p} upsampled {d}");
}

#[test]
fn worker_count_never_changes_scores() {
    let img = procedural_photo(200, 180, 77);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_patches(&img, models()).unwrap())
    };
    let one = run(1);
    for threads in [2, 5] {
        assert_eq!(one, run(threads));
    }
    let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let ra = a.install(|| detect_resampling(&img, models()).unwrap());
    let rb = b.install(|| detect_resampling(&img, models()).unwrap());
    assert_eq!(ra, rb);
}
