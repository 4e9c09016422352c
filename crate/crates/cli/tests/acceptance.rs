//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! hard criterion fails. Trend checks that do not hold print FLAG instead.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use itertools::Itertools;
use lanegrid::autodiff::{grad_check, relative_error, Tape, Tensor};
use lanegrid::losses::{cls_loss, shp_loss, sim_loss, total_loss, LossConfig, SimilaritySpace};
use lanegrid::metrics::{culane_f1, rasterize_lane, tusimple_accuracy, F1Config};
use lanegrid::model::{sample_gradients, sample_objective, HeadKind, Model, ModelConfig, Sample};
use lanegrid::synthdata::{generate_scenes, LabeledImage};
use lanegrid::{
    decode_argmax, decode_expectation, formulation_cost, locations_to_lanes, segmentation_cost,
    GridTarget, LanePolyline, LaneSet, PredictionTensor, RowAnchorGrid,
};
use lanegrid_cli::commands::{self, Evaluation};
use lanegrid_cli::ExperimentConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Flag,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail: detail.into(),
    }
}

fn within(outcome: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if outcome.status == Status::Pass && elapsed > budget {
        return Outcome {
            status: Status::Fail,
            detail: format!(
                "{} [took {elapsed:.2?}, budget {budget:.2?}]",
                outcome.detail
            ),
        };
    }
    outcome
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// Moves entries so no value is within 0.05 of the same cell one anchor up.
fn off_kinks(p: &Tensor) -> Tensor {
    let k = *p.shape().last().unwrap();
    let mut d = p.data().to_vec();
    for r in 1..d.len() / k {
        for q in 0..k {
            if (d[r * k + q] - d[(r - 1) * k + q]).abs() < 0.05 {
                d[r * k + q] += 0.1;
            }
        }
    }
    tensor(p.shape(), d)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let culane = RowAnchorGrid::culane();
    let f = formulation_cost(&culane);
    let s = segmentation_cost(288, 800, 4);
    let elapsed = start.elapsed();
    let shape_ok =
        culane.num_lanes() == 4 && culane.num_anchors() == 28 && culane.num_cells() == 150;
    within(
        check(
            shape_ok && f == 16_912 && s == 1_152_000,
            format!("formulation {f}, segmentation {s}"),
        ),
        elapsed,
        Duration::from_millis(1),
    )
}

fn micro_config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 32,
        grid: RowAnchorGrid::new(16, 32, vec![2.0, 5.0, 8.0, 11.0, 14.0], 8, 2).unwrap(),
        channels: vec![2, 3],
        seed: 5,
        aux_segmentation: true,
        seg_tap: 0,
        head,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_loss: f64 = 0.0;
    let cfg = LossConfig::default();
    for _ in 0..5 {
        let classes: Vec<usize> = (0..10).map(|_| rng.random_range(1..=9)).collect();
        let t = GridTarget::new(2, 5, 8, classes).unwrap();
        let p = off_kinks(&random_tensor(&mut rng, &[2, 5, 9], 3.0));
        let errs = [
            grad_check(|tape, v| cls_loss(tape, v, &t), &p, 1e-4).unwrap(),
            grad_check(
                |tape, v| sim_loss(tape, v, SimilaritySpace::Logits),
                &p,
                1e-3,
            )
            .unwrap(),
            grad_check(shp_loss, &p, 1e-4).unwrap(),
            grad_check(
                |tape, v| total_loss(tape, v, &t, None, None, &cfg).map(|l| l.loss),
                &p,
                1e-3,
            )
            .unwrap(),
        ];
        worst_loss = errs.into_iter().fold(worst_loss, f64::max);
    }

    let mut worst_model: f64 = 0.0;
    let eps = 1e-4;
    for head in [
        HeadKind::Classification,
        HeadKind::Regression,
        HeadKind::RegressionNorm,
    ] {
        let model = Model::new(micro_config(head)).unwrap();
        let lanes = LaneSet::from_lanes(vec![
            LanePolyline::new(vec![(10.0, 0.0), (6.0, 15.9)]).unwrap(),
            LanePolyline::new(vec![(20.0, 0.0), (25.0, 15.9)]).unwrap(),
        ]);
        let image = random_tensor(&mut rng, &[1, 16, 32], 1.0).map(|v| 0.5 + 0.4 * v);
        let sample = Sample::from_scene(image, &lanes, model.grid(), Some(3.0)).unwrap();
        let (grads, _) = sample_gradients(&model, &sample, &cfg).unwrap();
        let eval = |m: &Model| {
            let mut tape = Tape::new();
            sample_objective(m, &mut tape, &sample, &cfg)
                .unwrap()
                .2
                .total
        };
        for (pi, p) in model.parameters().iter().enumerate() {
            for i in 0..p.len() {
                let mut m = model.clone();
                m.parameters_mut()[pi].data_mut()[i] += eps;
                let up = eval(&m);
                m.parameters_mut()[pi].data_mut()[i] -= 2.0 * eps;
                let down = eval(&m);
                let numeric = (up - down) / (2.0 * eps);
                worst_model = worst_model.max(relative_error(grads[pi].data()[i], numeric));
            }
        }
    }
    let elapsed = start.elapsed();
    within(
        check(
            worst_loss < 1e-4 && worst_model < 1e-3,
            format!("losses max rel err {worst_loss:.2e}, end-to-end {worst_model:.2e}"),
        ),
        elapsed,
        Duration::from_secs(30),
    )
}

fn scalar(
    p: &Tensor,
    f: impl Fn(&mut Tape, lanegrid::autodiff::Var) -> lanegrid::Result<lanegrid::autodiff::Var>,
) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(p.clone()).unwrap();
    let out = f(&mut tape, v).unwrap();
    tape.value(out).item()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (c, h, w) = (4usize, 18usize, 100usize);
    let uniform = Tensor::full(&[c, h, w + 1], 0.7);
    let classes: Vec<usize> = (0..c * h).map(|n| n % (w + 1) + 1).collect();
    let t = GridTarget::new(c, h, w, classes).unwrap();
    let cls = scalar(&uniform, |tape, v| cls_loss(tape, v, &t));
    let cls_expected = (c * h) as f64 * ((w + 1) as f64).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row: Vec<f64> = (0..w + 1).map(|_| rng.random_range(-2.0..2.0)).collect();
    let same = tensor(
        &[c, h, w + 1],
        row.iter().copied().cycle().take(c * h * (w + 1)).collect(),
    );
    let sim = scalar(&same, |tape, v| sim_loss(tape, v, SimilaritySpace::Logits));

    let mut straight = vec![0.0; c * h * (w + 1)];
    for i in 0..c {
        for j in 0..h {
            let k = 5 + i + 4 * j;
            straight[(i * h + j) * (w + 1) + k - 1] = 60.0;
        }
    }
    let shp = scalar(&tensor(&[c, h, w + 1], straight), shp_loss);
    let elapsed = start.elapsed();
    within(
        check(
            (cls - cls_expected).abs() <= 1e-9 && sim == 0.0 && shp < 1e-6,
            format!("cls {cls:.12} vs {cls_expected:.12}, sim {sim:e}, shp {shp:.2e}"),
        ),
        elapsed,
        Duration::from_secs(1),
    )
}

fn criterion_4() -> Outcome {
    let grid = RowAnchorGrid::new(
        288,
        800,
        (0..18).map(|j| 121.0 + 9.0 * j as f64).collect(),
        100,
        4,
    )
    .unwrap();
    let (c, h, w) = (4, 18, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut present, mut agree) = (0usize, 0usize);
    for _ in 0..1000 {
        let classes: Vec<usize> = (0..c * h).map(|_| rng.random_range(1..=w + 1)).collect();
        let target = GridTarget::new(c, h, w, classes).unwrap();
        let margin = rng.random_range(30.0..60.0);
        let mut logits = PredictionTensor::one_hot(&target, margin).into_tensor();
        for v in logits.data_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
        let pred = PredictionTensor::new(logits).unwrap();
        let a = decode_argmax(&pred, &grid).unwrap();
        let e = decode_expectation(&pred, &grid).unwrap();
        for i in 0..c {
            for j in 0..h {
                assert_eq!(a.get(i, j).is_some(), e.get(i, j).is_some());
                if let (Some(x), Some(y)) = (a.get(i, j), e.get(i, j)) {
                    present += 1;
                    agree += (y.round() == x) as usize;
                }
            }
        }
    }
    let mut flat = vec![0.0; c * h * (w + 1)];
    for n in 0..c * h {
        flat[n * (w + 1) + w] = -1.0;
    }
    let uniform = decode_expectation(
        &PredictionTensor::new(tensor(&[c, h, w + 1], flat)).unwrap(),
        &grid,
    )
    .unwrap();
    let mid = (w + 1) as f64 / 2.0;
    let uniform_err = (0..c * h)
        .map(|n| (uniform.get(n / h, n % h).unwrap() - mid).abs())
        .fold(0.0, f64::max);
    check(
        present > 0 && agree == present && uniform_err <= 1e-9,
        format!(
            "{agree}/{present} present cells agree, uniform expectation off by {uniform_err:.1e}"
        ),
    )
}

fn random_polyline(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> LanePolyline {
    let n = rng.random_range(2..6);
    let mut ys: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    if ys.len() < 2 {
        ys = vec![lo, hi];
    }
    LanePolyline::new(
        ys.into_iter()
            .map(|y| (rng.random_range(lo..hi), y))
            .collect(),
    )
    .unwrap()
}

/// Per-pixel scan of the distance from every pixel center to every segment.
fn brute_force_mask(lane: &LanePolyline, width_px: f64, w: usize, h: usize) -> Vec<bool> {
    let r = width_px / 2.0;
    let mut mask = vec![false; w * h];
    for row in 0..h {
        for col in 0..w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let d = lane
                .points()
                .iter()
                .tuple_windows()
                .map(|(&(ax, ay), &(bx, by))| {
                    let (vx, vy) = (bx - ax, by - ay);
                    let t =
                        (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                    (ax + t * vx - px).hypot(ay + t * vy - py)
                })
                .fold(f64::INFINITY, f64::min);
            mask[row * w + col] = d <= r;
        }
    }
    mask
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Tries every injective assignment of the smaller side into the larger.
fn exhaustive_counts(
    pred: &[Vec<bool>],
    gt: &[Vec<bool>],
    threshold: f64,
) -> (usize, usize, usize) {
    let scores: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gt.iter().map(|g| iou(p, g)).collect())
        .collect();
    let (np, ng) = (pred.len(), gt.len());
    let mut best = (f64::NEG_INFINITY, 0usize);
    if np <= ng {
        for perm in (0..ng).permutations(np) {
            let total: f64 = perm.iter().enumerate().map(|(p, &g)| scores[p][g]).sum();
            let tp = perm
                .iter()
                .enumerate()
                .filter(|&(p, &g)| scores[p][g] > threshold)
                .count();
            if total > best.0 {
                best = (total, tp);
            }
        }
    } else {
        for perm in (0..np).permutations(ng) {
            let total: f64 = perm.iter().enumerate().map(|(g, &p)| scores[p][g]).sum();
            let tp = perm
                .iter()
                .enumerate()
                .filter(|&(g, &p)| scores[p][g] > threshold)
                .count();
            if total > best.0 {
                best = (total, tp);
            }
        }
    }
    let tp = best.1;
    (tp, np - tp, ng - tp)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut raster_mismatch = 0usize;
    for _ in 0..50 {
        let lane = random_polyline(&mut rng, -10.0, 110.0);
        let width = rng.random_range(1.0..30.0);
        if rasterize_lane(&lane, width, 100, 100).unwrap()
            != brute_force_mask(&lane, width, 100, 100)
        {
            raster_mismatch += 1;
        }
    }

    let cfg = F1Config {
        lane_width: 30.0,
        iou_threshold: 0.5,
        canvas_width: 100,
        canvas_height: 100,
    };
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let gt: Vec<LanePolyline> = (0..3)
            .map(|_| random_polyline(&mut rng, 0.0, 100.0))
            .collect();
        let mut pred = Vec::new();
        for l in &gt {
            if rng.random_bool(0.8) {
                let dx = rng.random_range(-25.0..25.0);
                pred.push(
                    LanePolyline::new(l.points().iter().map(|&(x, y)| (x + dx, y)).collect())
                        .unwrap(),
                );
            }
        }
        for _ in 0..rng.random_range(0..2) {
            pred.push(random_polyline(&mut rng, 0.0, 100.0));
        }
        preds.push(LaneSet::from_lanes(pred));
        gts.push(LaneSet::from_lanes(gt));
    }
    let report = culane_f1(&preds, &gts, &cfg).unwrap();
    let mut count_mismatch = 0usize;
    for ((p, g), m) in preds.iter().zip(&gts).zip(&report.scenes) {
        let mask = |l: &LanePolyline| brute_force_mask(l, cfg.lane_width, 100, 100);
        let pm: Vec<_> = p.lanes().map(mask).collect();
        let gm: Vec<_> = g.lanes().map(mask).collect();
        if exhaustive_counts(&pm, &gm, cfg.iou_threshold) != (m.tp, m.fp, m.fn_) {
            count_mismatch += 1;
        }
    }
    check(
        raster_mismatch == 0 && count_mismatch == 0,
        format!(
            "{raster_mismatch}/50 rasters differ from the brute-force scan, \
             {count_mismatch}/100 scenes differ from the exhaustive matcher"
        ),
    )
}

fn criterion_6() -> Outcome {
    let grid = RowAnchorGrid::desk();
    let params = lanegrid::synthdata::SceneParams::desk();
    let scenes: Vec<LaneSet> = generate_scenes(&params, 0, 20)
        .unwrap()
        .into_iter()
        .map(|(_, l)| l)
        .collect();
    let cfg = F1Config::for_grid(&grid);
    let acc = tusimple_accuracy(&scenes, &scenes, &grid, 20.0).unwrap();
    let f1 = culane_f1(&scenes, &scenes, &cfg).unwrap().f1;
    let empty: Vec<LaneSet> = scenes
        .iter()
        .map(|_| LaneSet::empty(grid.num_lanes()))
        .collect();
    let f1_empty = culane_f1(&empty, &scenes, &cfg).unwrap().f1;
    check(
        acc == 1.0 && f1 == 1.0 && f1_empty == 0.0,
        format!("identical: accuracy {acc}, F1 {f1}; empty predictions: F1 {f1_empty}"),
    )
}

struct RunResult {
    accuracy: f64,
    fine: [f64; 2],
    second_difference: f64,
}

fn desk_run(cfg: &ExperimentConfig, train: &[LabeledImage], held: &[LabeledImage]) -> RunResult {
    let (model, _) = commands::train_model(cfg, train, |_, _| {}).unwrap();
    let ev: Evaluation = commands::evaluate(&model, held, &cfg.eval).unwrap();
    let gts: Vec<LaneSet> = held.iter().map(|s| s.lanes.clone()).collect();
    let preds: Vec<LaneSet> = held
        .iter()
        .map(|s| {
            locations_to_lanes(
                &model.predict(&s.image, cfg.eval.decode).unwrap(),
                model.grid(),
            )
            .unwrap()
        })
        .collect();
    let fine = [12.5, 2.5].map(|t| tusimple_accuracy(&preds, &gts, model.grid(), t).unwrap());
    RunResult {
        accuracy: ev.report.total.accuracy,
        fine,
        second_difference: ev.mean_second_difference.unwrap_or(f64::NAN),
    }
}

fn criterion_7() -> Vec<(&'static str, Outcome)> {
    let start = Instant::now();
    let base = ExperimentConfig::desk();
    let total = 500 + 100;
    let scenes: Vec<LabeledImage> = generate_scenes(&base.scene, 0, total)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (image, lanes))| LabeledImage {
            raw_file: format!("{i:05}"),
            image,
            lanes,
        })
        .collect();
    let (train, held) = scenes.split_at(500);

    let cls = desk_run(&base, train, held);
    let mut no_structure = base.clone();
    no_structure.train.loss.alpha_structural = 0.0;
    let flat = desk_run(&no_structure, train, held);
    let mut regression = base.clone();
    regression.model.head = HeadKind::Regression;
    let reg = desk_run(&regression, train, held);
    let elapsed = start.elapsed();

    let line = |r: &RunResult| {
        format!(
            "acc@{}px {:.4} (@12.5px {:.4}, @2.5px {:.4}), mean |d2| {:.4} cells",
            base.eval.pixel_threshold, r.accuracy, r.fine[0], r.fine[1], r.second_difference
        )
    };
    println!("       classification, alpha=1: {}", line(&cls));
    println!("       classification, alpha=0: {}", line(&flat));
    println!("       regression:              {}", line(&reg));
    println!("       three runs took {elapsed:.1?}");

    let a = within(
        check(
            cls.accuracy >= 0.90,
            format!("held-out accuracy {:.4} >= 0.90", cls.accuracy),
        ),
        elapsed,
        Duration::from_secs(15 * 60),
    );
    let flag = |ok: bool, detail: String| Outcome {
        status: if ok { Status::Pass } else { Status::Flag },
        detail,
    };
    let b = flag(
        cls.accuracy > reg.accuracy,
        format!(
            "classification {:.4} vs regression {:.4}",
            cls.accuracy, reg.accuracy
        ),
    );
    let c = flag(
        cls.accuracy >= flat.accuracy - 0.01 && cls.second_difference < flat.second_difference,
        format!(
            "accuracy {:.4} vs {:.4} without structural loss, mean |d2| {:.4} vs {:.4}",
            cls.accuracy, flat.accuracy, cls.second_difference, flat.second_difference
        ),
    );
    vec![("7a", a), ("7b", b), ("7c", c)]
}

fn criterion_8() -> Outcome {
    println!(
        "       not reproduced at this scale: benchmark accuracy and F1 tables, \
         frame-rate figures and the accuracy-vs-cells curves of full-size backbones"
    );
    let cfg = ExperimentConfig::desk();
    let report = commands::bench(&cfg, 100).unwrap();
    println!(
        "       toy forward latency {:.3} ms (mean of {} runs, {} threads; informational)",
        report.mean_forward_ms, report.runs, report.threads
    );
    let culane = report.costs.iter().find(|r| r.name == "culane").unwrap();
    check(
        culane.formulation == 16_912 && report.mean_forward_ms.is_finite(),
        "statement printed, bench ran",
    )
}

fn lanegrid(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lanegrid"))
        .args(args)
        .output()
        .expect("spawn lanegrid")
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(
        dir.path().join("exp.toml"),
        "seed = 7\n[train]\nepochs = 2\n[data]\nscenes = 24\nholdout = 4\n",
    )
    .unwrap();
    let synth = lanegrid(&["synth", "--config", &p("exp.toml"), "--out", &p("data")]);
    if !synth.status.success() {
        return check(
            false,
            format!("synth failed: {}", String::from_utf8_lossy(&synth.stderr)),
        );
    }
    for run in ["run1", "run2"] {
        let out = lanegrid(&[
            "train",
            "--config",
            &p("exp.toml"),
            "--data",
            &p("data"),
            "--out",
            &p(run),
        ]);
        if !out.status.success() {
            return check(
                false,
                format!("{run} failed: {}", String::from_utf8_lossy(&out.stderr)),
            );
        }
    }
    let read =
        |run: &str| std::fs::read(Path::new(&p(run)).join(commands::CHECKPOINT_FILE)).unwrap();
    let (a, b) = (read("run1"), read("run2"));
    check(
        a == b,
        format!("checkpoints of {} bytes, identical: {}", a.len(), a == b),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut emit = |id: &str, name: &str, o: Outcome| {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Flag => "FLAG",
        };
        println!("{tag} [{id}] {name}: {}", o.detail);
    };
    emit("1", "cost arithmetic", criterion_1());
    emit("2", "gradient suite", criterion_2());
    emit("3", "loss closed forms", criterion_3());
    emit("4", "decoder agreement", criterion_4());
    emit("5", "rasterization and matching oracles", criterion_5());
    emit("6", "metric degenerate cases", criterion_6());
    for (id, o) in criterion_7() {
        let name = match id {
            "7a" => "desk training accuracy",
            "7b" => "classification beats regression (trend)",
            _ => "structural loss smooths without costing accuracy (trend)",
        };
        emit(id, name, o);
    }
    emit(
        "8",
        "non-reproducibility statement and bench",
        criterion_8(),
    );
    emit("9", "deterministic training", criterion_9());
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
