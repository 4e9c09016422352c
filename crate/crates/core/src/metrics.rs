//! Benchmark metrics: point accuracy (TuSimple style), rasterized-IoU F1
//! (CULane style) and top-k cell accuracy.
//!
//! Lane matching in both benchmarks uses an exhaustive search over one-to-one
//! assignments, which is exact for the handful of lanes per scene.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridTarget, LanePolyline, LaneSet, PredictionTensor, RowAnchorGrid};

/// Default per-point tolerance for [`tusimple_accuracy`], in pixels.
pub const DEFAULT_PIXEL_THRESHOLD: f64 = 20.0;
/// Default rasterized lane width for [`culane_f1`], in pixels.
pub const DEFAULT_LANE_WIDTH: f64 = 30.0;
/// A matched pair counts as a true positive when its IoU is strictly above this.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

fn segment_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.0 + t * dx - px, a.1 + t * dy - py);
    ex * ex + ey * ey
}

/// Row-major `height x width` mask of pixels whose center `(c + 0.5, r + 0.5)`
/// lies within `width_px / 2` of the polyline.
pub fn rasterize_lane(
    lane: &LanePolyline,
    width_px: f64,
    width: usize,
    height: usize,
) -> Result<Vec<bool>> {
    if width_px.is_nan() || width_px <= 0.0 {
        return Err(Error::OutOfRange {
            what: "lane width",
            value: width_px,
            lo: f64::MIN_POSITIVE,
            hi: f64::INFINITY,
        });
    }
    let r = width_px / 2.0;
    let r2 = r * r;
    let mut mask = vec![false; width * height];
    for seg in lane.points().windows(2) {
        let (a, b) = (seg[0], seg[1]);
        // pixel centers c + 0.5 within [min - r, max + r]
        let bounds = |lo: f64, hi: f64, n: usize| {
            let first = (lo - r - 0.5).ceil().max(0.0);
            let last = (hi + r - 0.5).floor().min(n as f64 - 1.0);
            (first as usize, last)
        };
        let (c0, c1) = bounds(a.0.min(b.0), a.0.max(b.0), width);
        let (r0, r1) = bounds(a.1.min(b.1), a.1.max(b.1), height);
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            let py = row as f64 + 0.5;
            for col in c0..=c1 as usize {
                let idx = row * width + col;
                if !mask[idx] && segment_dist2(col as f64 + 0.5, py, a, b) <= r2 {
                    mask[idx] = true;
                }
            }
        }
    }
    Ok(mask)
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One-to-one assignment of rows to columns maximizing the summed score.
/// `scores[r][c]` must be non-negative. Returns the total and `(row, col)` pairs.
pub fn best_assignment(scores: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    fn search(
        scores: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if row == scores.len() {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                current.push((row, col));
                search(scores, row + 1, used, current, acc + scores[row][col], best);
                current.pop();
                used[col] = false;
            }
        }
        // leave this row unmatched
        search(scores, row + 1, used, current, acc, best);
    }

    let cols = scores.first().map_or(0, Vec::len);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    search(
        scores,
        0,
        &mut vec![false; cols],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    best
}

/// Correct and total ground-truth points of one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCounts {
    pub correct: usize,
    pub total: usize,
}

/// Point accuracy of one scene: ground-truth points are the lanes' crossings of
/// the anchor rows; a point is correct when the matched predicted lane crosses
/// the same anchor within `pixel_threshold`.
pub fn tusimple_scene(
    pred: &LaneSet,
    gt: &LaneSet,
    grid: &RowAnchorGrid,
    pixel_threshold: f64,
) -> PointCounts {
    let anchors = grid.row_anchors();
    let gts: Vec<Vec<Option<f64>>> = gt
        .lanes()
        .map(|l| anchors.iter().map(|&y| l.x_at(y)).collect())
        .collect();
    let preds: Vec<Vec<Option<f64>>> = pred
        .lanes()
        .map(|l| anchors.iter().map(|&y| l.x_at(y)).collect())
        .collect();
    let total = gts.iter().flatten().filter(|x| x.is_some()).count();
    let scores: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    p.iter()
                        .zip(g)
                        .filter(|(a, b)| match (a, b) {
                            (Some(a), Some(b)) => (a - b).abs() < pixel_threshold,
                            _ => false,
                        })
                        .count() as f64
                })
                .collect()
        })
        .collect();
    let correct = if preds.is_empty() || gts.is_empty() {
        0
    } else {
        best_assignment(&scores).0 as usize
    };
    PointCounts { correct, total }
}

/// `sum(correct) / sum(total)` over aligned scenes. A split without any
/// ground-truth points scores 1.
pub fn tusimple_accuracy(
    preds: &[LaneSet],
    gts: &[LaneSet],
    grid: &RowAnchorGrid,
    pixel_threshold: f64,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "tusimple_accuracy",
            format!(
                "{} predicted scenes vs {} ground-truth scenes",
                preds.len(),
                gts.len()
            ),
        ));
    }
    if pixel_threshold.is_nan() || pixel_threshold <= 0.0 {
        return Err(Error::Config(format!(
            "pixel threshold must be > 0, got {pixel_threshold}"
        )));
    }
    let counts: Vec<PointCounts> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| tusimple_scene(p, g, grid, pixel_threshold))
        .collect();
    let (c, t) = counts
        .iter()
        .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
    Ok(if t == 0 { 1.0 } else { c as f64 / t as f64 })
}

/// Per-scene matching outcome for [`culane_f1`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `iou[pred][gt]`.
    pub iou: Vec<Vec<f64>>,
    /// `(pred, gt)` pairs of the chosen assignment, including pairs below the threshold.
    pub assignment: Vec<(usize, usize)>,
}

/// Canvas and thresholds for the F1 metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct F1Config {
    pub lane_width: f64,
    pub iou_threshold: f64,
    pub canvas_width: usize,
    pub canvas_height: usize,
}

impl F1Config {
    pub fn for_grid(grid: &RowAnchorGrid) -> Self {
        Self {
            lane_width: DEFAULT_LANE_WIDTH,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            canvas_width: grid.image_width(),
            canvas_height: grid.image_height(),
        }
    }
}

/// Matches one scene's lanes by rasterized IoU.
pub fn match_scene(pred: &LaneSet, gt: &LaneSet, cfg: &F1Config) -> Result<MatchResult> {
    let raster =
        |l: &LanePolyline| rasterize_lane(l, cfg.lane_width, cfg.canvas_width, cfg.canvas_height);
    let pm = pred.lanes().map(raster).collect::<Result<Vec<_>>>()?;
    let gm = gt.lanes().map(raster).collect::<Result<Vec<_>>>()?;
    let iou: Vec<Vec<f64>> = pm
        .iter()
        .map(|p| gm.iter().map(|g| mask_iou(p, g)).collect())
        .collect();
    let assignment = if pm.is_empty() || gm.is_empty() {
        Vec::new()
    } else {
        best_assignment(&iou).1
    };
    let tp = assignment
        .iter()
        .filter(|&&(p, g)| iou[p][g] > cfg.iou_threshold)
        .count();
    Ok(MatchResult {
        tp,
        fp: pm.len() - tp,
        fn_: gm.len() - tp,
        iou,
        assignment,
    })
}

/// Precision, recall and F1 from raw counts; undefined ratios are 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub scenes: Vec<MatchResult>,
}

pub fn culane_f1(preds: &[LaneSet], gts: &[LaneSet], cfg: &F1Config) -> Result<F1Report> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "culane_f1",
            format!(
                "{} predicted scenes vs {} ground-truth scenes",
                preds.len(),
                gts.len()
            ),
        ));
    }
    if cfg.lane_width.is_nan() || cfg.lane_width <= 0.0 {
        return Err(Error::Config(format!(
            "lane width must be > 0, got {}",
            cfg.lane_width
        )));
    }
    let scenes = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| match_scene(p, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (tp, fp, fn_) = scenes
        .iter()
        .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
    let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
    Ok(F1Report {
        precision,
        recall,
        f1,
        scenes,
    })
}

/// Fraction of lane (non-background) targets whose peak cell is within
/// `|peak - target| < k`. `k = 1` is plain classification accuracy. With no
/// lane targets at all the result is 1.
pub fn topk_cell_accuracy(pred: &PredictionTensor, target: &GridTarget, k: usize) -> Result<f64> {
    if (pred.num_lanes(), pred.num_anchors(), pred.num_cells())
        != (target.num_lanes(), target.num_anchors(), target.num_cells())
    {
        return Err(Error::shape(
            "topk_cell_accuracy",
            "prediction and target disagree",
        ));
    }
    let w = target.num_cells();
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..target.num_lanes() {
        for j in 0..target.num_anchors() {
            if target.is_background(i, j) {
                continue;
            }
            let row = &pred.row(i, j)[..w];
            let mut peak = 0;
            for (q, &v) in row.iter().enumerate() {
                if v > row[peak] {
                    peak = q;
                }
            }
            total += 1;
            if ((peak + 1) as i64 - target.get(i, j) as i64).unsigned_abs() < k as u64 {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    })
}

/// One evaluated scene handed to [`build_report`].
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub id: String,
    pub category: Option<String>,
    pub pred: LaneSet,
    pub gt: LaneSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub scenes: usize,
    pub accuracy: f64,
    pub points_correct: usize,
    pub points_total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl CategoryMetrics {
    fn add(&mut self, points: PointCounts, m: &MatchResult) {
        self.scenes += 1;
        self.points_correct += points.correct;
        self.points_total += points.total;
        self.tp += m.tp;
        self.fp += m.fp;
        self.fn_ += m.fn_;
    }

    fn finish(&mut self) {
        self.accuracy = if self.points_total == 0 {
            1.0
        } else {
            self.points_correct as f64 / self.points_total as f64
        };
        (self.precision, self.recall, self.f1) = precision_recall_f1(self.tp, self.fp, self.fn_);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Evaluation report: totals, per-category breakdown and the worst scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pixel_threshold: f64,
    pub f1: F1Config,
    pub total: CategoryMetrics,
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub worst: Vec<SceneSummary>,
}

pub fn build_report(
    scenes: &[EvalScene],
    grid: &RowAnchorGrid,
    pixel_threshold: f64,
    f1: &F1Config,
    worst_count: usize,
) -> Result<MetricReport> {
    let per_scene = scenes
        .par_iter()
        .map(|s| {
            let points = tusimple_scene(&s.pred, &s.gt, grid, pixel_threshold);
            match_scene(&s.pred, &s.gt, f1).map(|m| (points, m))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = CategoryMetrics::default();
    let mut categories: BTreeMap<String, CategoryMetrics> = BTreeMap::new();
    let mut summaries = Vec::with_capacity(scenes.len());
    for (scene, (points, m)) in scenes.iter().zip(&per_scene) {
        total.add(*points, m);
        if let Some(cat) = &scene.category {
            categories.entry(cat.clone()).or_default().add(*points, m);
        }
        summaries.push(SceneSummary {
            id: scene.id.clone(),
            accuracy: if points.total == 0 {
                1.0
            } else {
                points.correct as f64 / points.total as f64
            },
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
    }
    total.finish();
    categories.values_mut().for_each(CategoryMetrics::finish);
    summaries.sort_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then((b.fp + b.fn_).cmp(&(a.fp + a.fn_)))
            .then(a.id.cmp(&b.id))
    });
    summaries.truncate(worst_count);
    Ok(MetricReport {
        pixel_threshold,
        f1: *f1,
        total,
        categories,
        worst: summaries,
    })
}
