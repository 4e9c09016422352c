//! The work behind each subcommand, callable without a process boundary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lanegrid::losses::LossComponents;
use lanegrid::metrics::{build_report, topk_cell_accuracy, EvalScene, F1Config, MetricReport};
use lanegrid::model::{Checkpoint, HeadKind, Model, Sample, Trainer};
use lanegrid::synthdata::{
    augment, read_dataset, read_image, write_dataset, write_rgb, LabeledImage,
};
use lanegrid::{
    encode_targets, formulation_cost, locations_to_lanes, segmentation_cost, Decode, LaneSet,
    RowAnchorGrid,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalConfig, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(dir.display(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::data(path.display(), e))
}

/// Writes the configuration a run used next to its outputs.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())
}

pub fn synth(cfg: &ExperimentConfig, dir: &Path, count: Option<usize>) -> CliResult<usize> {
    cfg.scene.validate()?;
    let n = count.unwrap_or(cfg.data.scenes);
    create_dir(dir)?;
    Ok(write_dataset(&cfg.scene, n, dir)?.len())
}

pub fn load_dataset(dir: &Path) -> CliResult<Vec<LabeledImage>> {
    let scenes = read_dataset(dir)?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no annotated scenes",
            dir.display()
        )));
    }
    Ok(scenes)
}

/// Splits off the last `holdout` scenes. Keeps at least one training scene.
pub fn split(scenes: &[LabeledImage], holdout: usize) -> (&[LabeledImage], &[LabeledImage]) {
    let cut = scenes
        .len()
        .saturating_sub(holdout)
        .max(1)
        .min(scenes.len());
    scenes.split_at(cut)
}

fn check_image(model: &Model, scene: &LabeledImage) -> CliResult<()> {
    let c = model.config();
    let want = [1, c.input_height, c.input_width];
    if scene.image.shape() != want {
        return Err(CliError::Data(format!(
            "{}: image shape {:?}, model expects {want:?}",
            scene.raw_file,
            scene.image.shape()
        )));
    }
    Ok(())
}

/// Training samples for `cfg`, augmented in place when augmentation is configured.
pub fn build_samples(cfg: &ExperimentConfig, scenes: &[LabeledImage]) -> CliResult<Vec<Sample>> {
    let grid = &cfg.model.grid;
    let seg = (cfg.model.aux_segmentation && cfg.train.loss.beta_segmentation > 0.0)
        .then_some(cfg.data.seg_line_width);
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sample = match &cfg.augment {
                Some(a) => {
                    let (image, lanes) = augment(&s.image, &s.lanes, a, i as u64)?;
                    Sample::from_scene(image, &lanes, grid, seg)
                }
                None => Sample::from_scene(s.image.clone(), &s.lanes, grid, seg),
            };
            sample.map_err(|e| CliError::Data(format!("{}: {e}", s.raw_file)))
        })
        .collect()
}

/// Trains a fresh model. `on_epoch` sees each epoch's mean loss components.
pub fn train_model(
    cfg: &ExperimentConfig,
    scenes: &[LabeledImage],
    on_epoch: impl FnMut(usize, &LossComponents),
) -> CliResult<(Model, Vec<LossComponents>)> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    for s in scenes {
        check_image(&model, s)?;
    }
    let samples = build_samples(cfg, scenes)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let history = trainer.fit(&samples, on_epoch)?;
    Ok((trainer.into_model(), history))
}

pub fn log_line(epoch: usize, c: &LossComponents) -> String {
    json!({
        "epoch": epoch,
        "L_total": c.total,
        "L_cls": c.cls,
        "L_sim": c.sim,
        "L_shp": c.shp,
        "L_seg": c.seg,
        "L_reg": c.reg,
        "L_presence": c.presence,
    })
    .to_string()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub final_loss: LossComponents,
    pub evaluation: Option<Evaluation>,
}

/// `train` subcommand: fits on the dataset minus the holdout, then writes the
/// config, the per-epoch log, the checkpoint and (with a holdout) a report.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> CliResult<TrainSummary> {
    cfg.validate()?;
    let scenes = load_dataset(data)?;
    let (train_set, eval_set) = split(&scenes, cfg.data.holdout);
    echo_config(cfg, out)?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::data(log_path.display(), e))?;
    let mut log_err = None;
    let (model, history) = train_model(cfg, train_set, |epoch, c| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", log_line(epoch, c)).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(CliError::data(log_path.display(), e));
    }
    let steps = history.len() as u64 * train_set.len().div_ceil(cfg.train.batch_size) as u64;
    let ckpt = Checkpoint::from_model(&model, steps);
    write_file(&out.join(CHECKPOINT_FILE), &ckpt.to_bytes()?)?;
    let evaluation = if eval_set.is_empty() || eval_set.len() == scenes.len() {
        None
    } else {
        let ev = evaluate(&model, eval_set, &cfg.eval)?;
        write_file(&out.join(REPORT_FILE), to_json(&ev)?.as_bytes())?;
        Some(ev)
    };
    Ok(TrainSummary {
        train_scenes: train_set.len(),
        eval_scenes: evaluation.as_ref().map_or(0, |_| eval_set.len()),
        final_loss: history.last().copied().unwrap_or_default(),
        evaluation,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Data(format!("json: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Top-1/2/3 cell accuracy over lane targets; classification heads only.
    pub topk: Option<[f64; 3]>,
    /// Mean |second difference| of predicted locations, in cells.
    pub mean_second_difference: Option<f64>,
}

struct ScenePrediction {
    lanes: LaneSet,
    hits: [usize; 3],
    targets: usize,
    second_diff: Option<(f64, usize)>,
}

fn predict_scene(
    model: &Model,
    scene: &LabeledImage,
    decode: Decode,
) -> CliResult<ScenePrediction> {
    check_image(model, scene)?;
    let grid = model.grid();
    let (loc, hits, targets) = if model.config().head == HeadKind::Classification {
        let logits = model.predict_logits(&scene.image)?;
        let target = encode_targets(&scene.lanes, grid)
            .map_err(|e| CliError::Data(format!("{}: {e}", scene.raw_file)))?;
        let targets = target
            .classes()
            .iter()
            .filter(|&&k| k != target.background())
            .count();
        let mut hits = [0; 3];
        for (k, h) in hits.iter_mut().enumerate() {
            *h = (topk_cell_accuracy(&logits, &target, k + 1)? * targets as f64).round() as usize;
        }
        (decode.apply(&logits, grid)?, hits, targets)
    } else {
        (model.predict(&scene.image, decode)?, [0; 3], 0)
    };
    let runs = (0..loc.num_lanes())
        .map(|i| {
            (0..loc.num_anchors().saturating_sub(2))
                .filter(|&j| {
                    loc.get(i, j).is_some()
                        && loc.get(i, j + 1).is_some()
                        && loc.get(i, j + 2).is_some()
                })
                .count()
        })
        .sum::<usize>();
    Ok(ScenePrediction {
        lanes: locations_to_lanes(&loc, grid)?,
        hits,
        targets,
        second_diff: loc
            .mean_second_difference()
            .map(|m| (m * runs as f64, runs)),
    })
}

/// Runs `model` over `scenes` and scores the decoded lanes.
pub fn evaluate(model: &Model, scenes: &[LabeledImage], cfg: &EvalConfig) -> CliResult<Evaluation> {
    let preds = scenes
        .par_iter()
        .map(|s| predict_scene(model, s, cfg.decode))
        .collect::<CliResult<Vec<_>>>()?;
    let grid = model.grid();
    let eval_scenes: Vec<EvalScene> = scenes
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalScene {
            id: s.raw_file.clone(),
            category: None,
            pred: p.lanes.clone(),
            gt: s.lanes.clone(),
        })
        .collect();
    let f1 = F1Config {
        lane_width: cfg.lane_width,
        iou_threshold: cfg.iou_threshold,
        ..F1Config::for_grid(grid)
    };
    let report = build_report(&eval_scenes, grid, cfg.pixel_threshold, &f1, cfg.worst)?;
    let topk = (model.config().head == HeadKind::Classification).then(|| {
        let total: usize = preds.iter().map(|p| p.targets).sum();
        std::array::from_fn(|k| {
            if total == 0 {
                1.0
            } else {
                preds.iter().map(|p| p.hits[k]).sum::<usize>() as f64 / total as f64
            }
        })
    });
    let (sd, runs) = preds
        .iter()
        .filter_map(|p| p.second_diff)
        .fold((0.0, 0usize), |(a, n), (s, r)| (a + s, n + r));
    for v in [report.total.accuracy, report.total.f1, sd] {
        if !v.is_finite() {
            return Err(CliError::Numeric(
                "evaluation produced a non-finite metric".into(),
            ));
        }
    }
    Ok(Evaluation {
        report,
        topk,
        mean_second_difference: (runs > 0).then(|| sd / runs as f64),
    })
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    Ok(Checkpoint::load(path)?.into_model()?)
}

/// `infer` subcommand: predicts lanes for one image and writes an RGB overlay.
pub fn infer(model: &Model, image: &Path, out: &Path, decode: Decode) -> CliResult<LaneSet> {
    let scene = LabeledImage {
        raw_file: image.display().to_string(),
        image: read_image(image)?,
        lanes: LaneSet::empty(model.grid().num_lanes()),
    };
    check_image(model, &scene)?;
    let loc = model.predict(&scene.image, decode)?;
    let lanes = locations_to_lanes(&loc, model.grid())?;
    let c = model.config();
    let rgb = overlay(scene.image.data(), c.input_height, c.input_width, &lanes);
    write_rgb(out, &rgb, c.input_width, c.input_height)?;
    Ok(lanes)
}

const LANE_COLORS: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 128, 255],
    [255, 255, 64],
    [255, 64, 255],
    [64, 255, 255],
];

/// Gray image with each lane's points and connecting segments drawn in color.
pub fn overlay(gray: &[f64], height: usize, width: usize, lanes: &LaneSet) -> Vec<u8> {
    let mut rgb: Vec<u8> = gray
        .iter()
        .flat_map(|&v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b]
        })
        .collect();
    let mut put = |x: f64, y: f64, color: [u8; 3]| {
        let (c, r) = (x.floor(), y.floor());
        if c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height {
            let at = 3 * (r as usize * width + c as usize);
            rgb[at..at + 3].copy_from_slice(&color);
        }
    };
    for (slot, lane) in lanes.slots().iter().enumerate() {
        let Some(lane) = lane else { continue };
        let color = LANE_COLORS[slot % LANE_COLORS.len()];
        let pts = lane.points();
        for pair in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put(x0 + t * (x1 - x0), y0 + t * (y1 - y0), color);
            }
        }
        if let [(x, y)] = pts {
            put(*x, *y, color);
        }
    }
    rgb
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    /// Network input `(height, width)` the segmentation count is taken at.
    pub input: (usize, usize),
    pub formulation: u64,
    pub segmentation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub costs: Vec<CostRow>,
    pub runs: usize,
    pub mean_forward_ms: f64,
    pub threads: usize,
}

/// Row-anchor versus per-pixel counts. The benchmark grids are compared with
/// segmentation at the usual 288x800 network input, the configured grid at
/// its own model input.
pub fn cost_table(model: &lanegrid::model::ModelConfig) -> Vec<CostRow> {
    let row = |name: &str, g: &RowAnchorGrid, input: (usize, usize)| CostRow {
        name: name.into(),
        input,
        formulation: formulation_cost(g),
        segmentation: segmentation_cost(input.0, input.1, g.num_lanes()),
    };
    vec![
        row("tusimple", &RowAnchorGrid::tusimple(), (288, 800)),
        row("culane", &RowAnchorGrid::culane(), (288, 800)),
        row(
            "configured",
            &model.grid,
            (model.input_height, model.input_width),
        ),
    ]
}

/// `bench` subcommand: operation counts plus mean forward latency of the
/// configured model over `runs` evaluation passes on a synthetic scene.
pub fn bench(cfg: &ExperimentConfig, runs: usize) -> CliResult<BenchReport> {
    cfg.validate()?;
    if runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    let (image, _) = lanegrid::synthdata::generate_scene(&cfg.scene, 0)?;
    model.predict(&image, cfg.eval.decode)?;
    let start = Instant::now();
    for _ in 0..runs {
        model.predict(&image, cfg.eval.decode)?;
    }
    Ok(BenchReport {
        costs: cost_table(&cfg.model),
        runs,
        mean_forward_ms: start.elapsed().as_secs_f64() * 1e3 / runs as f64,
        threads: rayon::current_num_threads(),
    })
}

/// Groups digits in threes: `1152000` becomes `1,152,000`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cells: usize,
    pub topk: Option<[f64; 3]>,
    pub accuracy: f64,
    pub f1: f64,
}

/// `sweep` subcommand: one training run and evaluation per cell count.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &Path,
    cells: &[usize],
    out: Option<&Path>,
) -> CliResult<Vec<SweepRow>> {
    let scenes = load_dataset(data)?;
    let (train_set, eval_set) = split(&scenes, cfg.data.holdout);
    let eval_set = if eval_set.is_empty() {
        train_set
    } else {
        eval_set
    };
    let mut rows = Vec::with_capacity(cells.len());
    for &w in cells {
        let mut run = cfg.clone();
        run.model.grid = cfg.model.grid.with_cells(w)?;
        let (model, _) = train_model(&run, train_set, |_, _| {})?;
        let ev = evaluate(&model, eval_set, &run.eval)?;
        rows.push(SweepRow {
            cells: w,
            topk: ev.topk,
            accuracy: ev.report.total.accuracy,
            f1: ev.report.total.f1,
        });
        if let Some(dir) = out {
            let sub: PathBuf = dir.join(format!("cells_{w}"));
            echo_config(&run, &sub)?;
            write_file(
                &sub.join(CHECKPOINT_FILE),
                &Checkpoint::from_model(&model, 0).to_bytes()?,
            )?;
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("sweep.json"), to_json(&rows)?.as_bytes())?;
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("cells  top1    top2    top3    acc     f1\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for r in rows {
        s.push_str(&format!(
            "{:<6} {:<7} {:<7} {:<7} {:<7.4} {:.4}\n",
            r.cells,
            fmt(r.topk.map(|t| t[0])),
            fmt(r.topk.map(|t| t[1])),
            fmt(r.topk.map(|t| t[2])),
            r.accuracy,
            r.f1
        ));
    }
    s
}
