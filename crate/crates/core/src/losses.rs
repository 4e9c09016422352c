//! Training objectives over the row-selection output `P: [C, h, w + 1]`.
//!
//! Every function records onto a caller-owned [`Tape`] so the result can be
//! differentiated. Losses are sums over lanes and anchors, not means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{GridTarget, LaneSet, RowAnchorGrid};
use crate::metrics::rasterize_lane;

/// Which values the adjacent-anchor similarity term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilaritySpace {
    /// Raw classifier outputs.
    #[default]
    Logits,
    /// Softmax over all `w + 1` classes.
    Probabilities,
}

/// How [`total_loss`] combines its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Terms are summed over lanes and anchors exactly as written.
    #[default]
    Sum,
    /// Each term is divided by the number of elements it sums over
    /// (`C*h` for cls, `C*(h-1)*(w+1)` for sim, `C*(h-2)` for shp).
    /// Component values are still reported as sums.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the shape term inside the structural loss.
    pub lambda_shape: f64,
    /// Weight of the structural loss in the total.
    pub alpha_structural: f64,
    /// Weight of the auxiliary segmentation loss in the total.
    pub beta_segmentation: f64,
    pub similarity_space: SimilaritySpace,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_shape: 1.0,
            alpha_structural: 1.0,
            beta_segmentation: 1.0,
            similarity_space: SimilaritySpace::Logits,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_shape", self.lambda_shape),
            ("alpha_structural", self.alpha_structural),
            ("beta_segmentation", self.beta_segmentation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel lane-slot labels for the auxiliary segmentation head:
/// 0 is background, `1..=C` the lane slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegTarget {
    height: usize,
    width: usize,
    classes: Vec<usize>,
}

impl SegTarget {
    pub fn new(height: usize, width: usize, classes: Vec<usize>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(
                "SegTarget::new",
                format!("{} labels for {height}x{width}", classes.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    /// Rasterizes each lane (slot order as in [`crate::encode_targets`]) with
    /// `line_width` pixels at `height x width`, scaling from grid coordinates.
    pub fn from_lanes(
        lanes: &LaneSet,
        grid: &RowAnchorGrid,
        height: usize,
        width: usize,
        line_width: f64,
    ) -> Result<Self> {
        let sx = width as f64 / grid.image_width() as f64;
        let sy = height as f64 / grid.image_height() as f64;
        let mut classes = vec![0; height * width];
        for (slot, lane) in lanes.ordered_left_to_right(grid).into_iter().enumerate() {
            let scaled: Vec<_> = lane
                .points()
                .iter()
                .map(|&(x, y)| (x * sx, y * sy))
                .collect();
            let scaled = crate::grid::LanePolyline::new(scaled)?;
            let mask = rasterize_lane(&scaled, line_width, width, height)?;
            for (c, &on) in classes.iter_mut().zip(&mask) {
                if on {
                    *c = slot + 1;
                }
            }
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
}

fn prediction_dims(tape: &Tape, p: Var) -> Result<(usize, usize, usize)> {
    match tape.value(p).shape() {
        &[c, h, k] if k >= 2 => Ok((c, h, k - 1)),
        s => Err(Error::shape(
            "loss",
            format!("expected [C, h, w+1], got {s:?}"),
        )),
    }
}

/// Cross entropy of every (lane, anchor) against its target class, summed.
pub fn cls_loss(tape: &mut Tape, p: Var, target: &GridTarget) -> Result<Var> {
    let (c, h, w) = prediction_dims(tape, p)?;
    if (target.num_lanes(), target.num_anchors(), target.num_cells()) != (c, h, w) {
        return Err(Error::shape(
            "cls_loss",
            format!(
                "prediction {c}x{h}x{w} vs target {}x{}x{}",
                target.num_lanes(),
                target.num_anchors(),
                target.num_cells()
            ),
        ));
    }
    let indices: Vec<usize> = target.classes().iter().map(|&k| k - 1).collect();
    let logp = tape.log_softmax_lastdim(p)?;
    let picked = tape.gather_lastdim(logp, &indices)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// L1 distance between the classification vectors of adjacent anchors, summed.
pub fn sim_loss(tape: &mut Tape, p: Var, space: SimilaritySpace) -> Result<Var> {
    let (_, h, _) = prediction_dims(tape, p)?;
    if h < 2 {
        return Err(Error::shape("sim_loss", "need at least 2 anchors"));
    }
    let v = match space {
        SimilaritySpace::Logits => p,
        SimilaritySpace::Probabilities => tape.softmax_lastdim(p)?,
    };
    let upper = tape.narrow(v, 1, 0, h - 1)?;
    let lower = tape.narrow(v, 1, 1, h - 1)?;
    let d = tape.sub(upper, lower)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

/// Expected cell index under a softmax over the `w` lane cells (background
/// excluded). Returns a `[C, h]` node.
pub fn expected_locations(tape: &mut Tape, p: Var) -> Result<Var> {
    let (c, h, w) = prediction_dims(tape, p)?;
    let cells = tape.narrow(p, 2, 0, w)?;
    let prob = tape.softmax_lastdim(cells)?;
    let flat = tape.reshape(prob, &[c * h, w])?;
    let index = tape.leaf(Tensor::from_vec(
        vec![w, 1],
        (1..=w).map(|k| k as f64).collect(),
    )?)?;
    let loc = tape.matmul(flat, index)?;
    tape.reshape(loc, &[c, h])
}

/// L1 norm of the second difference of expected locations along the anchors.
pub fn shp_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    let (_, h, w) = prediction_dims(tape, p)?;
    if h < 3 || w < 2 {
        return Err(Error::shape(
            "shp_loss",
            "need at least 3 anchors and 2 cells",
        ));
    }
    let loc = expected_locations(tape, p)?;
    second_difference_l1(tape, loc, h)
}

fn second_difference_l1(tape: &mut Tape, loc: Var, h: usize) -> Result<Var> {
    let a = tape.narrow(loc, 1, 0, h - 2)?;
    let b = tape.narrow(loc, 1, 1, h - 2)?;
    let c = tape.narrow(loc, 1, 2, h - 2)?;
    let ab = tape.sub(a, b)?;
    let bc = tape.sub(b, c)?;
    let d = tape.sub(ab, bc)?;
    let d = tape.abs(d)?;
    tape.sum(d)
}

/// `sim + lambda * shp`. Returns the total and the two parts.
pub fn structural_loss(tape: &mut Tape, p: Var, cfg: &LossConfig) -> Result<(Var, Var, Var)> {
    let sim = sim_loss(tape, p, cfg.similarity_space)?;
    let shp = shp_loss(tape, p)?;
    let weighted = tape.scale(shp, cfg.lambda_shape)?;
    Ok((tape.add(sim, weighted)?, sim, shp))
}

/// Mean per-pixel cross entropy of `seg_logits: [C + 1, hs, ws]`.
pub fn seg_loss(tape: &mut Tape, seg_logits: Var, target: &SegTarget) -> Result<Var> {
    let s = tape.value(seg_logits).shape().to_vec();
    if s.len() != 3 || s[1] != target.height || s[2] != target.width {
        return Err(Error::shape(
            "seg_loss",
            format!("logits {s:?} vs target {}x{}", target.height, target.width),
        ));
    }
    let k = s[0];
    if let Some(&bad) = target.classes.iter().find(|&&c| c >= k) {
        return Err(Error::OutOfRange {
            what: "segmentation class",
            value: bad as f64,
            lo: 0.0,
            hi: (k - 1) as f64,
        });
    }
    let flat = tape.reshape(seg_logits, &[k, s[1] * s[2]])?;
    let pixels = tape.transpose(flat)?;
    let logp = tape.log_softmax_lastdim(pixels)?;
    let picked = tape.gather_lastdim(logp, &target.classes)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Loss of the regression head: L1 between predicted and target locations on
/// anchors where the lane is present, plus presence BCE on every anchor.
///
/// Target locations are cell indices `1..=w` divided by `scale`. Returns
/// `(total, l1, presence)`, each summed over lanes and anchors.
pub fn regression_loss(
    tape: &mut Tape,
    locations: Var,
    presence: Var,
    target: &GridTarget,
    scale: f64,
) -> Result<(Var, Var, Var)> {
    let (c, h) = (target.num_lanes(), target.num_anchors());
    for v in [locations, presence] {
        if tape.value(v).shape() != [c, h] {
            return Err(Error::shape(
                "regression_loss",
                format!("expected [{c}, {h}], got {:?}", tape.value(v).shape()),
            ));
        }
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!(
            "regression scale must be positive, got {scale}"
        )));
    }
    let bg = target.background();
    let mask: Vec<f64> = target
        .classes()
        .iter()
        .map(|&k| f64::from(u8::from(k != bg)))
        .collect();
    let goal: Vec<f64> = target
        .classes()
        .iter()
        .map(|&k| if k == bg { 0.0 } else { k as f64 / scale })
        .collect();
    let goal = tape.leaf(Tensor::from_vec(vec![c, h], goal)?)?;
    let mask_var = tape.leaf(Tensor::from_vec(vec![c, h], mask.clone())?)?;
    let diff = tape.sub(locations, goal)?;
    let diff = tape.abs(diff)?;
    let diff = tape.mul(diff, mask_var)?;
    let l1 = tape.sum(diff)?;
    let bce = tape.bce_with_logits(presence, &mask)?;
    let bce = tape.sum(bce)?;
    let total = tape.add(l1, bce)?;
    Ok((total, l1, bce))
}

/// Scalar values of each term of one total-loss evaluation. Terms that were
/// not computed are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub cls: Option<f64>,
    pub sim: Option<f64>,
    pub shp: Option<f64>,
    pub seg: Option<f64>,
    pub reg: Option<f64>,
    pub presence: Option<f64>,
}

pub struct TotalLoss {
    pub loss: Var,
    pub components: LossComponents,
}

/// `cls + alpha * (sim + lambda * shp) + beta * seg`, each term optionally
/// divided by its element count (see [`Reduction`]).
///
/// The structural terms are not recorded at all when `alpha == 0`; the
/// segmentation term only when both the logits and target are supplied.
pub fn total_loss(
    tape: &mut Tape,
    p: Var,
    target: &GridTarget,
    seg_logits: Option<Var>,
    seg_target: Option<&SegTarget>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let (c, h, w) = prediction_dims(tape, p)?;
    let norm = |n: usize| match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    };
    let cls = cls_loss(tape, p, target)?;
    let mut components = LossComponents {
        cls: Some(tape.value(cls).item()),
        ..Default::default()
    };
    let mut total = tape.scale(cls, norm(c * h))?;
    if cfg.alpha_structural > 0.0 {
        let sim = sim_loss(tape, p, cfg.similarity_space)?;
        let shp = shp_loss(tape, p)?;
        components.sim = Some(tape.value(sim).item());
        components.shp = Some(tape.value(shp).item());
        let sim_w = tape.scale(sim, cfg.alpha_structural * norm(c * (h - 1) * (w + 1)))?;
        let shp_w = tape.scale(
            shp,
            cfg.alpha_structural * cfg.lambda_shape * norm(c * h.saturating_sub(2)),
        )?;
        total = tape.add(total, sim_w)?;
        total = tape.add(total, shp_w)?;
    }
    match (seg_logits, seg_target) {
        (Some(logits), Some(t)) => {
            let seg = seg_loss(tape, logits, t)?;
            components.seg = Some(tape.value(seg).item());
            let weighted = tape.scale(seg, cfg.beta_segmentation)?;
            total = tape.add(total, weighted)?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "segmentation logits and target must be given together".into(),
            ))
        }
    }
    components.total = tape.value(total).item();
    Ok(TotalLoss {
        loss: total,
        components,
    })
}
