//! Cascade fusion of the copy-move and resampling detectors, ROC analysis,
//! and corpus evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copymove::{detect_copymove, CopyMoveReport};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{read_image, GrayImage};
use crate::resample::{resample_score, ResampleModels};
use crate::synth::{read_manifest, ForgeryKind, Label, ManifestRecord};

pub const EVAL_SCHEMA: &str = "fs-eval/1";

/// `0.5 + 0.5 c` for flagged images, `0.5 r` otherwise, so every flagged
/// image outranks every unflagged one.
pub fn fuse(cm_flagged: bool, cm_confidence: f64, resample: f64) -> f64 {
    if cm_flagged {
        0.5 + 0.5 * cm_confidence
    } else {
        0.5 * resample
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub id: String,
    pub cm_confidence: f64,
    pub cm_flagged: bool,
    /// Absent when the copy-move stage flagged the image.
    pub resample_score: Option<f64>,
    pub fused: f64,
    pub notes: Vec<String>,
}

/// Copy-move first; the resampling detector runs only on images it passes.
pub fn cascade_score(id: &str, img: &GrayImage, models: &ResampleModels) -> Result<DetectionScore> {
    let cm = detect_copymove(img)?;
    let mut notes = Vec::new();
    if cm.degenerate {
        notes.push("copy-move: insufficient texture".to_string());
    }
    let resample = if cm.flagged {
        None
    } else {
        Some(resample_score(img, models)?.0)
    };
    Ok(DetectionScore {
        id: id.to_string(),
        cm_confidence: cm.confidence,
        cm_flagged: cm.flagged,
        fused: fuse(cm.flagged, cm.confidence, resample.unwrap_or(0.0)),
        resample_score: resample,
        notes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses `+inf`.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores, highest first, and the
/// trapezoidal area under the resulting curve. Label 1 is positive.
pub fn roc_auc(scores: &[(f64, u8)]) -> Result<RocCurve> {
    let pos = scores.iter().filter(|(_, y)| *y == 1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {s} is not finite")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().expect("curve starts non-empty");
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Operating point maximizing Youden's `J = TPR - FPR`; ties go to the lower
/// threshold. Returns `(threshold, J)`.
pub fn choose_threshold(curve: &RocCurve) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &curve.points {
        let j = p.tpr - p.fpr;
        if j > best.1 || (j == best.1 && p.threshold < best.0) {
            best = (p.threshold, j);
        }
    }
    best
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &curve.points {
        writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold).expect("write to string");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub manipulated: usize,
    pub cm_caught: usize,
    pub cm_missed: usize,
    /// Images the copy-move stage missed whose resampling score reaches the
    /// operating threshold.
    pub resamp_caught_of_missed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub cm_flagged: usize,
    pub resample_flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSet {
    pub copymove: f64,
    pub resample: f64,
    pub fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFiles {
    pub copymove: String,
    pub resample: String,
    pub fused: String,
}

/// Everything here is a pure function of the corpus and the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub images: usize,
    pub auc: AucSet,
    pub breakdown: Breakdown,
    /// Operating threshold on the resampling score `r`.
    pub threshold: f64,
    pub youden_j: f64,
    pub per_kind: BTreeMap<ForgeryKind, KindStats>,
    pub curves: CurveFiles,
    pub scores: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub images: usize,
    pub threads: usize,
    pub wall_seconds: f64,
    pub copymove_seconds: f64,
    pub resample_seconds: f64,
}

/// One evaluated image; `resample` is computed for every image so the
/// standalone resampling ROC covers the whole corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub record: ManifestRecord,
    pub score: DetectionScore,
    pub resample: f64,
}

impl ScoredImage {
    pub fn label(&self) -> u8 {
        u8::from(self.record.label == Label::Manipulated)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub runtime: RuntimeStats,
    pub images: Vec<ScoredImage>,
}

pub const REPORT_FILE: &str = "report.json";
pub const RUNTIME_FILE: &str = "runtime.json";
pub const SCORES_FILE: &str = "scores.csv";

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Timed {
    scored: ScoredImage,
    cm_secs: f64,
    rs_secs: f64,
}

fn score_record(base: &Path, record: &ManifestRecord, models: &ResampleModels) -> Result<Timed> {
    let img = read_image(&resolve(base, &record.image))?;
    let t0 = Instant::now();
    let mut notes = Vec::new();
    let cm = match detect_copymove(&img) {
        Ok(r) => r,
        Err(e @ Error::ImageTooSmall { .. }) => {
            notes.push(format!("copy-move: {e}"));
            CopyMoveReport {
                mask: crate::seg::BinaryMask::empty(img.width(), img.height()),
                flagged: false,
                confidence: 0.0,
                pairs: Vec::new(),
                degenerate: true,
            }
        }
        Err(e) => return Err(e),
    };
    let cm_secs = t0.elapsed().as_secs_f64();
    if cm.degenerate && notes.is_empty() {
        notes.push("copy-move: insufficient texture".to_string());
    }
    let t1 = Instant::now();
    let r = match resample_score(&img, models) {
        Ok((r, _)) => r,
        Err(e @ Error::ImageTooSmall { .. }) => {
            notes.push(format!("resample: {e}"));
            0.0
        }
        Err(e) => return Err(e),
    };
    let rs_secs = t1.elapsed().as_secs_f64();
    let score = DetectionScore {
        id: record.id.clone(),
        cm_confidence: cm.confidence,
        cm_flagged: cm.flagged,
        resample_score: (!cm.flagged).then_some(r),
        fused: fuse(cm.flagged, cm.confidence, r),
        notes,
    };
    Ok(Timed {
        scored: ScoredImage {
            record: record.clone(),
            score,
            resample: r,
        },
        cm_secs,
        rs_secs,
    })
}

fn scores_csv(images: &[ScoredImage]) -> String {
    let mut s = String::from("id,label,kind,cm_confidence,cm_flagged,resample,fused\n");
    for im in images {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            im.record.id,
            im.label(),
            im.record.kind.name(),
            im.score.cm_confidence,
            im.score.cm_flagged,
            im.resample,
            im.score.fused
        )
        .expect("write to string");
    }
    s
}

/// Parses a scores file written by [`evaluate`] into `(fused, label)` pairs.
pub fn read_fused_scores(path: &Path) -> Result<Vec<(f64, u8)>> {
    let text = std::fs::read_to_string(path).with_path(path)?;
    let bad = |line: usize, m: &str| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {m}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad(n + 1, "expected 7 columns"));
        }
        let label = cols[1].parse::<u8>().map_err(|_| bad(n + 1, "bad label"))?;
        let fused = cols[6].parse::<f64>().map_err(|_| bad(n + 1, "bad fused score"))?;
        out.push((fused, label));
    }
    Ok(out)
}

/// Scores every image of a manifest and summarizes the three detectors.
///
/// All listed files must exist; a partial corpus is refused.
pub fn evaluate_manifest(manifest: &Path, models: &ResampleModels) -> Result<Evaluation> {
    let start = Instant::now();
    let records = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let missing: Vec<PathBuf> = records
        .iter()
        .map(|r| resolve(base, &r.image))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let manipulated = records.iter().filter(|r| r.label == Label::Manipulated).count();
    if manipulated == 0 || manipulated == records.len() {
        return Err(Error::SingleClass);
    }
    let timed: Vec<Timed> = records
        .par_iter()
        .map(|r| score_record(base, r, models))
        .collect::<Result<_>>()?;
    let (mut cm_secs, mut rs_secs) = (0.0, 0.0);
    let mut images: Vec<ScoredImage> = timed
        .into_iter()
        .map(|t| {
            cm_secs += t.cm_secs;
            rs_secs += t.rs_secs;
            t.scored
        })
        .collect();
    images.sort_by(|a, b| a.record.id.cmp(&b.record.id));

    let curve = |f: &dyn Fn(&ScoredImage) -> f64| {
        roc_auc(&images.iter().map(|im| (f(im), im.label())).collect::<Vec<_>>())
    };
    let cm_curve = curve(&|im| im.score.cm_confidence)?;
    let rs_curve = curve(&|im| im.resample)?;
    let fused_curve = curve(&|im| im.score.fused)?;
    let (threshold, youden_j) = choose_threshold(&rs_curve);

    let mut breakdown = Breakdown {
        manipulated,
        cm_caught: 0,
        cm_missed: 0,
        resamp_caught_of_missed: 0,
    };
    let mut per_kind: BTreeMap<ForgeryKind, KindStats> = BTreeMap::new();
    for im in &images {
        let k = per_kind.entry(im.record.kind).or_default();
        k.count += 1;
        k.cm_flagged += usize::from(im.score.cm_flagged);
        k.resample_flagged += usize::from(im.resample >= threshold);
        if im.label() == 1 {
            if im.score.cm_flagged {
                breakdown.cm_caught += 1;
            } else {
                breakdown.cm_missed += 1;
                breakdown.resamp_caught_of_missed += usize::from(im.resample >= threshold);
            }
        }
    }

    let report = EvalReport {
        schema: EVAL_SCHEMA.to_string(),
        images: images.len(),
        auc: AucSet {
            copymove: cm_curve.auc,
            resample: rs_curve.auc,
            fused: fused_curve.auc,
        },
        breakdown,
        threshold,
        youden_j,
        per_kind,
        curves: CurveFiles {
            copymove: "roc_copymove.csv".into(),
            resample: "roc_resample.csv".into(),
            fused: "roc_fused.csv".into(),
        },
        scores: SCORES_FILE.into(),
    };
    let runtime = RuntimeStats {
        images: images.len(),
        threads: rayon::current_num_threads(),
        wall_seconds: start.elapsed().as_secs_f64(),
        copymove_seconds: cm_secs,
        resample_seconds: rs_secs,
    };
    Ok(Evaluation {
        report,
        runtime,
        images,
    })
}

/// Runs [`evaluate_manifest`] and writes `report.json`, the three ROC CSVs,
/// `scores.csv` and `runtime.json` (timings live apart from the report so the
/// report is reproducible byte for byte).
pub fn evaluate(manifest: &Path, models: &ResampleModels, out_dir: &Path) -> Result<Evaluation> {
    let ev = evaluate_manifest(manifest, models)?;
    write_evaluation(&ev, out_dir)?;
    Ok(ev)
}

pub fn write_evaluation(ev: &Evaluation, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_path(out_dir)?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).with_path(&p)
    };
    let curve = |f: &dyn Fn(&ScoredImage) -> f64| {
        roc_auc(&ev.images.iter().map(|im| (f(im), im.label())).collect::<Vec<_>>())
    };
    write(&ev.report.curves.copymove, roc_csv(&curve(&|im| im.score.cm_confidence)?))?;
    write(&ev.report.curves.resample, roc_csv(&curve(&|im| im.resample)?))?;
    write(&ev.report.curves.fused, roc_csv(&curve(&|im| im.score.fused)?))?;
    write(SCORES_FILE, scores_csv(&ev.images))?;
    write(
        REPORT_FILE,
        serde_json::to_string_pretty(&ev.report).expect("report serializes") + "\n",
    )?;
    write(
        RUNTIME_FILE,
        serde_json::to_string_pretty(&ev.runtime).expect("runtime serializes") + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mann-Whitney statistic: share of (positive, negative) pairs ranked
    /// correctly, ties counted half.
    fn pair_auc(scores: &[(f64, u8)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(sp, yp) in scores {
            for &(sn, yn) in scores {
                if yp == 1 && yn == 0 {
                    den += 1.0;
                    num += if sp > sn {
                        1.0
                    } else if sp == sn {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn fusion_boundaries() {
        assert_eq!(fuse(true, 1.0, 0.3), 1.0);
        assert_eq!(fuse(false, 0.2, 0.0), 0.0);
        assert_eq!(fuse(false, 0.2, 1.0), 0.5);
        assert!(fuse(true, 0.5, 0.0) >= 0.75);
    }

    #[test]
    fn separated_scores_have_unit_auc() {
        let s = [(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)];
        let c = roc_auc(&s).unwrap();
        assert_eq!(c.auc, 1.0);
        let (t, j) = choose_threshold(&c);
        assert_eq!(j, 1.0);
        assert!(s.iter().all(|&(v, y)| (v >= t) == (y == 1)));
    }

    #[test]
    fn four_point_example() {
        let s = [(0.1, 0), (0.4, 0), (0.35, 1), (0.8, 1)];
        let c = roc_auc(&s).unwrap();
        assert!((c.auc - 0.75).abs() < 1e-12);
        assert!((c.auc - pair_auc(&s)).abs() < 1e-12);
        // exhaustive scan over every candidate cut
        let mut best = (f64::INFINITY, f64::NEG_INFINITY);
        let mut cuts: Vec<f64> = s.iter().map(|p| p.0).collect();
        cuts.sort_by(f64::total_cmp);
        for &t in &cuts {
            let tpr = s.iter().filter(|p| p.1 == 1 && p.0 >= t).count() as f64 / 2.0;
            let fpr = s.iter().filter(|p| p.1 == 0 && p.0 >= t).count() as f64 / 2.0;
            if tpr - fpr > best.1 {
                best = (t, tpr - fpr);
            }
        }
        assert_eq!(choose_threshold(&c), best);
    }

    #[test]
    fn diagonal_curve_picks_lowest_threshold() {
        let s = [(0.2, 0), (0.2, 1), (0.7, 0), (0.7, 1)];
        let c = roc_auc(&s).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(choose_threshold(&c), (0.2, 0.0));
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(roc_auc(&[(0.1, 1), (0.5, 1)]), Err(Error::SingleClass)));
        assert!(matches!(roc_auc(&[]), Err(Error::SingleClass)));
    }

    #[test]
    fn random_scores_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let s: Vec<(f64, u8)> = (0..20_000)
            .map(|_| (rng.random::<f64>(), rng.random_range(0..2u8)))
            .collect();
        assert!((roc_auc(&s).unwrap().auc - 0.5).abs() < 0.05);
    }

    #[test]
    fn csv_has_header_and_every_point() {
        let c = roc_auc(&[(0.3, 0), (0.6, 1)]).unwrap();
        let csv = roc_csv(&c);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fpr,tpr,threshold");
        assert_eq!(lines.len(), c.points.len() + 1);
        assert_eq!(lines[1], "0,0,inf");
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pair_counting(
            raw in prop::collection::vec((0u8..8, any::<bool>()), 2..50)
        ) {
            let mut s: Vec<(f64, u8)> = raw.iter().map(|&(v, y)| (v as f64 / 8.0, u8::from(y))).collect();
            s[0].1 = 0;
            s[1].1 = 1;
            let c = roc_auc(&s).unwrap();
            prop_assert!((c.auc - pair_auc(&s)).abs() < 1e-9);
            let first = c.points[0];
            let last = *c.points.last().unwrap();
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn flagged_always_outranks_unflagged(c in 0.5f64..=1.0, r in 0.0f64..=1.0, c2 in 0.0f64..1.0) {
            prop_assert!(fuse(true, c, 0.0) > fuse(false, c2, r));
        }
    }
}
