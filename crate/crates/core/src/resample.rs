//! Sliding-window resampling detection: six classifier heatmaps, bilateral
//! smoothing, median scoring and a localization mask.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::features::{patch_features, PATCH_SIZE, PATCH_STRIDE};
use crate::imaging::{bilateral_filter, encode_sidecar, write_png, GrayImage, PatchGrid, Plane};
use crate::mlp::{accuracy, load_model, train_with_history, Mlp, TaskKind, TrainConfig};
use crate::synth::{derive_seed, make_patch_dataset};
use crate::seg::{mask_from_heatmap, BinaryMask, Heatmap};

pub const SIGMA_SPATIAL: f64 = 8.0;
pub const SIGMA_RANGE: f64 = 0.15;
pub const REPORT_SCHEMA: &str = "fs-resample-report/1";
pub const MODEL_EXTENSION: &str = "fsmlp";

const NUM_TASKS: usize = TaskKind::ALL.len();

/// One trained classifier per task, indexed by [`TaskKind::index`].
#[derive(Clone, Debug)]
pub struct ResampleModels {
    models: Vec<Mlp>,
}

impl ResampleModels {
    /// Expects models in [`TaskKind::ALL`] order.
    pub fn new(models: Vec<Mlp>) -> Result<Self> {
        if models.len() != NUM_TASKS {
            return Err(Error::Shape {
                expected: NUM_TASKS,
                actual: models.len(),
            });
        }
        for (task, m) in TaskKind::ALL.iter().zip(&models) {
            if m.input_len() != crate::features::FEATURE_LEN {
                return Err(Error::Shape {
                    expected: crate::features::FEATURE_LEN,
                    actual: m.input_len(),
                });
            }
            if m.task().is_some_and(|t| t != *task) {
                return Err(Error::InvalidArgument(format!(
                    "model in slot {task} is tagged {}",
                    m.task().unwrap()
                )));
            }
        }
        Ok(Self { models })
    }

    pub fn model_path(dir: &Path, task: TaskKind) -> PathBuf {
        dir.join(format!("{}.{MODEL_EXTENSION}", task.name()))
    }

    /// Loads `<task>.fsmlp` for every task from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut models = Vec::with_capacity(NUM_TASKS);
        for task in TaskKind::ALL {
            let path = Self::model_path(dir, task);
            if !path.is_file() {
                return Err(Error::MissingModel(task));
            }
            models.push(load_model(&path)?);
        }
        Self::new(models)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_path(dir)?;
        for (task, m) in TaskKind::ALL.iter().zip(&self.models) {
            crate::mlp::save_model(m, &Self::model_path(dir, *task))?;
        }
        Ok(())
    }

    pub fn get(&self, task: TaskKind) -> &Mlp {
        &self.models[task.index()]
    }
}

/// Accuracy of one trained classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTraining {
    pub task: TaskKind,
    pub train_accuracy: f64,
    /// Accuracy on patches cut from the held-out images, if any were given.
    pub holdout_accuracy: Option<f64>,
    pub final_loss: f64,
}

/// Trains the six classifiers on `patches` samples each, drawn from
/// `pristine`; `holdout` images (disjoint from `pristine`) yield a test set
/// of `patches / 4` samples per task.
pub fn train_models(
    pristine: &[GrayImage],
    holdout: &[GrayImage],
    patches: usize,
    cfg: &TrainConfig,
) -> Result<(ResampleModels, Vec<TaskTraining>)> {
    let mut models = Vec::with_capacity(NUM_TASKS);
    let mut stats = Vec::with_capacity(NUM_TASKS);
    for task in TaskKind::ALL {
        let t = task.index() as u64;
        let data = make_patch_dataset(pristine, task, patches, derive_seed(cfg.seed, 20, t))?;
        let task_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, 21, t),
            ..cfg.clone()
        };
        let (model, history) = train_with_history(&data, &task_cfg, None)?;
        let model = model.with_task(task);
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            let n = (patches / 4).max(2) & !1;
            let test = make_patch_dataset(holdout, task, n, derive_seed(cfg.seed, 22, t))?;
            Some(accuracy(&model, &test)?)
        };
        stats.push(TaskTraining {
            task,
            train_accuracy: accuracy(&model, &data)?,
            holdout_accuracy,
            final_loss: history.last().copied().unwrap_or(f64::NAN),
        });
        models.push(model);
    }
    Ok((ResampleModels::new(models)?, stats))
}

/// Raw classifier outputs on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    pub grid: PatchGrid,
    /// One row per grid origin, columns in [`TaskKind::ALL`] order.
    pub scores: Vec<[f64; NUM_TASKS]>,
}

impl PatchScores {
    /// Scores of one task laid out on the `cols x rows` grid.
    pub fn task_plane(&self, task: TaskKind) -> Plane {
        let t = task.index();
        Plane::from_fn(self.grid.cols, self.grid.rows, |c, r| {
            self.scores[r * self.grid.cols + c][t]
        })
    }
}

fn require_min_size(img: &GrayImage) -> Result<()> {
    if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min_width: PATCH_SIZE,
            min_height: PATCH_SIZE,
        });
    }
    Ok(())
}

/// Runs the six classifiers on every 64x64 patch at stride 32.
pub fn score_patches(img: &GrayImage, models: &ResampleModels) -> Result<PatchScores> {
    require_min_size(img)?;
    let grid = PatchGrid::new(img.width(), img.height(), PATCH_SIZE, PATCH_STRIDE)?;
    let scores = grid
        .origins
        .par_iter()
        .map(|&(x0, y0)| {
            let patch = img.as_plane().crop(x0, y0, PATCH_SIZE, PATCH_SIZE);
            let f = patch_features(&patch)?;
            let mut row = [0.0; NUM_TASKS];
            for (slot, m) in row.iter_mut().zip(&models.models) {
                *slot = m.forward(f.as_slice())?;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchScores { grid, scores })
}

/// Bilinear interpolation of grid values placed at patch centres, clamped
/// beyond the outermost centres.
pub fn upsample_grid(grid: &Plane, patch_size: usize, stride: usize, width: usize, height: usize) -> Heatmap {
    let half = (patch_size as f64 - 1.0) / 2.0;
    let coord = |p: usize, n: usize| {
        let g = ((p as f64 - half) / stride as f64).clamp(0.0, (n - 1) as f64);
        let i = (g.floor() as usize).min(n.saturating_sub(2));
        (i, (i + 1).min(n - 1), g - i as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| coord(x, grid.width())).collect();
    let ys: Vec<_> = (0..height).map(|y| coord(y, grid.height())).collect();
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    Heatmap::from_plane_clamped(Plane::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = lerp(grid.get(x0, y0), grid.get(x1, y0), fx);
        let bottom = lerp(grid.get(x0, y1), grid.get(x1, y1), fx);
        lerp(top, bottom, fy)
    }))
}

/// Median of all heatmap values; an even count averages the two middle
/// values.
pub fn task_score(map: &Heatmap) -> f64 {
    let mut v = map.data().to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleReport {
    /// Smoothed heatmaps at image size, [`TaskKind::ALL`] order.
    pub heatmaps: Vec<Heatmap>,
    pub task_scores: [f64; NUM_TASKS],
    /// `r`, the maximum of the per-task scores.
    pub overall: f64,
    /// Localization from the heatmap of the highest-scoring task.
    pub mask: BinaryMask,
    pub degenerate: bool,
}

impl ResampleReport {
    /// Task with the highest score; ties go to the earlier task.
    pub fn argmax_task(&self) -> TaskKind {
        argmax(&self.task_scores)
    }
}

fn argmax(scores: &[f64; NUM_TASKS]) -> TaskKind {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    TaskKind::ALL[best]
}

/// Smoothed heatmaps and their median scores, without localization.
pub fn smoothed_heatmaps(
    scores: &PatchScores,
    width: usize,
    height: usize,
) -> Result<(Vec<Heatmap>, [f64; NUM_TASKS])> {
    let mut maps = Vec::with_capacity(NUM_TASKS);
    let mut task_scores = [0.0; NUM_TASKS];
    for task in TaskKind::ALL {
        let raw = upsample_grid(
            &scores.task_plane(task),
            scores.grid.patch_size,
            scores.grid.stride,
            width,
            height,
        );
        let smooth = bilateral_filter(&raw, SIGMA_SPATIAL, SIGMA_RANGE)?;
        task_scores[task.index()] = task_score(&smooth);
        maps.push(smooth);
    }
    Ok((maps, task_scores))
}

pub fn report_from_patch_scores(
    scores: &PatchScores,
    width: usize,
    height: usize,
) -> Result<ResampleReport> {
    let (heatmaps, task_scores) = smoothed_heatmaps(scores, width, height)?;
    let overall = task_scores.iter().copied().fold(0.0, f64::max);
    let loc = mask_from_heatmap(&heatmaps[argmax(&task_scores).index()])?;
    Ok(ResampleReport {
        heatmaps,
        task_scores,
        overall,
        mask: loc.mask,
        degenerate: loc.degenerate,
    })
}

pub fn detect_resampling(img: &GrayImage, models: &ResampleModels) -> Result<ResampleReport> {
    let scores = score_patches(img, models)?;
    report_from_patch_scores(&scores, img.width(), img.height())
}

/// The image-level score `r` and per-task scores, skipping localization.
pub fn resample_score(img: &GrayImage, models: &ResampleModels) -> Result<(f64, [f64; NUM_TASKS])> {
    let scores = score_patches(img, models)?;
    let (_, task_scores) = smoothed_heatmaps(&scores, img.width(), img.height())?;
    Ok((task_scores.iter().copied().fold(0.0, f64::max), task_scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema: String,
    pub per_task_scores: BTreeMap<TaskKind, f64>,
    pub overall: f64,
    pub argmax_task: TaskKind,
    pub degenerate: bool,
    pub mask_area: usize,
}

impl ResampleReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            schema: REPORT_SCHEMA.to_string(),
            per_task_scores: TaskKind::ALL
                .iter()
                .map(|t| (*t, self.task_scores[t.index()]))
                .collect(),
            overall: self.overall,
            argmax_task: self.argmax_task(),
            degenerate: self.degenerate,
            mask_area: self.mask.count(),
        }
    }
}

fn with_suffix(basename: &Path, suffix: &str) -> PathBuf {
    let mut s = basename.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<base>_<task>.png`, `<base>_<task>.fshm`, `<base>_mask.png` and
/// `<base>.json`; returns the paths written.
pub fn heatmap_export(report: &ResampleReport, basename: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = basename.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_path(dir)?;
    }
    let mut written = Vec::with_capacity(2 * NUM_TASKS + 2);
    for (task, map) in TaskKind::ALL.iter().zip(&report.heatmaps) {
        let png = with_suffix(basename, &format!("_{}.png", task.name()));
        let bytes: Vec<u8> = map.data().iter().map(|&v| crate::imaging::quantize8(v)).collect();
        write_png(&png, map.width(), map.height(), &bytes)?;
        written.push(png);
        let side = with_suffix(basename, &format!("_{}.fshm", task.name()));
        std::fs::write(&side, encode_sidecar(map)).with_path(&side)?;
        written.push(side);
    }
    let mask = with_suffix(basename, "_mask.png");
    write_png(&mask, report.mask.width(), report.mask.height(), &report.mask.to_luma8())?;
    written.push(mask);
    let json = with_suffix(basename, ".json");
    let text = serde_json::to_string_pretty(&report.summary()).expect("summary serializes");
    std::fs::write(&json, text + "\n").with_path(&json)?;
    written.push(json);
    Ok(written)
}
