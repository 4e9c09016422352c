//! Row-anchor geometry and the lane <-> grid conversions.
//!
//! A lane is described by the gridding cell it crosses on each predefined
//! row anchor. Cells are numbered `1..=w` from the left edge; class `w + 1`
//! is the background ("no lane on this row") class. Internally everything is
//! stored 0-based, but every public function speaks the 1-based numbering.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Image geometry, row anchors, gridding cells and lane slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct RowAnchorGrid {
    image_height: usize,
    image_width: usize,
    row_anchors: Vec<f64>,
    num_cells: usize,
    num_lanes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    image_height: usize,
    image_width: usize,
    row_anchors: Vec<f64>,
    num_cells: usize,
    num_lanes: usize,
}

impl TryFrom<RawGrid> for RowAnchorGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        RowAnchorGrid::new(
            raw.image_height,
            raw.image_width,
            raw.row_anchors,
            raw.num_cells,
            raw.num_lanes,
        )
    }
}

impl From<RowAnchorGrid> for RawGrid {
    fn from(g: RowAnchorGrid) -> Self {
        RawGrid {
            image_height: g.image_height,
            image_width: g.image_width,
            row_anchors: g.row_anchors,
            num_cells: g.num_cells,
            num_lanes: g.num_lanes,
        }
    }
}

/// Evenly spaced anchors `start, start + step, ..., end` (inclusive).
pub fn anchor_range(start: usize, end: usize, step: usize) -> Vec<f64> {
    (start..=end)
        .step_by(step.max(1))
        .map(|y| y as f64)
        .collect()
}

impl RowAnchorGrid {
    pub fn new(
        image_height: usize,
        image_width: usize,
        row_anchors: Vec<f64>,
        num_cells: usize,
        num_lanes: usize,
    ) -> Result<Self> {
        if image_height == 0 || image_width == 0 {
            return Err(Error::InvalidGrid(
                "image dimensions must be positive".into(),
            ));
        }
        if num_cells < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 cells, got {num_cells}"
            )));
        }
        if num_lanes < 1 {
            return Err(Error::InvalidGrid("need at least one lane slot".into()));
        }
        if row_anchors.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 row anchors, got {}",
                row_anchors.len()
            )));
        }
        let h = image_height as f64;
        for (i, &y) in row_anchors.iter().enumerate() {
            if !(0.0..h).contains(&y) {
                return Err(Error::InvalidGrid(format!(
                    "row anchor {y} outside [0, {h})"
                )));
            }
            if i > 0 && y <= row_anchors[i - 1] {
                return Err(Error::InvalidGrid(
                    "row anchors must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self {
            image_height,
            image_width,
            row_anchors,
            num_cells,
            num_lanes,
        })
    }

    /// TuSimple benchmark layout: 1280x720, anchors 160..=710 step 10, 100 cells, 4 lanes.
    pub fn tusimple() -> Self {
        Self::new(720, 1280, anchor_range(160, 710, 10), 100, 4).expect("static config")
    }

    /// CULane layout: 1640x590, anchors 260..=530 step 10, 150 cells, 4 lanes.
    pub fn culane() -> Self {
        Self::new(590, 1640, anchor_range(260, 530, 10), 150, 4).expect("static config")
    }

    /// Small layout used for CPU-scale training: 64x160, 8 anchors, 20 cells, 2 lanes.
    pub fn desk() -> Self {
        Self::new(64, 160, anchor_range(20, 62, 6), 20, 2).expect("static config")
    }

    /// Same layout at a different working resolution; anchors scale with the height.
    pub fn rescaled(&self, image_height: usize, image_width: usize) -> Result<Self> {
        let sy = image_height as f64 / self.image_height as f64;
        let anchors = self.row_anchors.iter().map(|y| y * sy).collect();
        Self::new(
            image_height,
            image_width,
            anchors,
            self.num_cells,
            self.num_lanes,
        )
    }

    /// Same geometry with a different number of gridding cells.
    pub fn with_cells(&self, num_cells: usize) -> Result<Self> {
        Self::new(
            self.image_height,
            self.image_width,
            self.row_anchors.clone(),
            num_cells,
            self.num_lanes,
        )
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn row_anchors(&self) -> &[f64] {
        &self.row_anchors
    }

    pub fn num_anchors(&self) -> usize {
        self.row_anchors.len()
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_lanes(&self) -> usize {
        self.num_lanes
    }

    /// 1-based class index of the background cell.
    pub fn background(&self) -> usize {
        self.num_cells + 1
    }

    pub fn cell_width(&self) -> f64 {
        self.image_width as f64 / self.num_cells as f64
    }

    /// Shape of the prediction tensor, `[C, h, w + 1]`.
    pub fn prediction_shape(&self) -> [usize; 3] {
        [self.num_lanes, self.num_anchors(), self.num_cells + 1]
    }

    /// Cell containing `x`, using half-open intervals `[(k-1)W/w, kW/w)`.
    pub fn cell_of_x(&self, x: f64) -> Result<usize> {
        let width = self.image_width as f64;
        if !(x >= 0.0 && x < width) {
            return Err(Error::OutOfRange {
                what: "x",
                value: x,
                lo: 0.0,
                hi: width,
            });
        }
        let k = (x * self.num_cells as f64 / width).floor() as usize + 1;
        Ok(k.min(self.num_cells))
    }

    /// Center of (possibly fractional) cell `k`.
    pub fn x_of_cell(&self, k: f64) -> Result<f64> {
        let w = self.num_cells as f64;
        if !(k >= 1.0 && k <= w) {
            return Err(Error::OutOfRange {
                what: "cell",
                value: k,
                lo: 1.0,
                hi: w,
            });
        }
        Ok((k - 0.5) * self.cell_width())
    }
}

/// `C * h * (w + 1)`: classifications performed by the row-anchor formulation.
pub fn formulation_cost(grid: &RowAnchorGrid) -> u64 {
    row_selection_cost(grid.num_lanes(), grid.num_anchors(), grid.num_cells())
}

/// [`formulation_cost`] for raw dimensions, without grid validation.
pub fn row_selection_cost(num_lanes: usize, num_anchors: usize, num_cells: usize) -> u64 {
    num_lanes as u64 * num_anchors as u64 * (num_cells as u64 + 1)
}

/// `H * W * (C + 1)`: classifications performed by per-pixel segmentation.
pub fn segmentation_cost(height: usize, width: usize, num_lanes: usize) -> u64 {
    height as u64 * width as u64 * (num_lanes as u64 + 1)
}

/// A lane as a polyline in pixel coordinates, ordered top to bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    points: Vec<(f64, f64)>,
}

impl LanePolyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidLane(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidLane("non-finite coordinate".into()));
        }
        if points.windows(2).any(|p| p[1].1 <= p[0].1) {
            return Err(Error::InvalidLane("y must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn into_points(self) -> Vec<(f64, f64)> {
        self.points
    }

    /// Topmost and bottommost y.
    pub fn y_span(&self) -> (f64, f64) {
        (self.points[0].1, self.points[self.points.len() - 1].1)
    }

    /// Linear interpolation of x at row `y`, or `None` outside the vertical span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        let (top, bottom) = self.y_span();
        if y < top || y > bottom {
            return None;
        }
        // first segment whose lower end is at or below y
        let idx = self.points.partition_point(|p| p.1 < y);
        if idx == 0 {
            return Some(self.points[0].0);
        }
        let (x0, y0) = self.points[idx - 1];
        let (x1, y1) = self.points[idx];
        let t = (y - y0) / (y1 - y0);
        Some(x0 + t * (x1 - x0))
    }
}

/// Lanes of one scene, indexed by slot. Absent slots are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneSet {
    slots: Vec<Option<LanePolyline>>,
}

impl LaneSet {
    pub fn new(slots: Vec<Option<LanePolyline>>) -> Self {
        Self { slots }
    }

    pub fn from_lanes(lanes: Vec<LanePolyline>) -> Self {
        Self {
            slots: lanes.into_iter().map(Some).collect(),
        }
    }

    pub fn empty(capacity: usize) -> Self {
        Self {
            slots: vec![None; capacity],
        }
    }

    pub fn slots(&self) -> &[Option<LanePolyline>] {
        &self.slots
    }

    /// Present lanes in slot order.
    pub fn lanes(&self) -> impl Iterator<Item = &LanePolyline> {
        self.slots.iter().flatten()
    }

    pub fn num_present(&self) -> usize {
        self.lanes().count()
    }

    pub fn is_empty(&self) -> bool {
        self.num_present() == 0
    }

    /// Present lanes sorted left to right at the lowest anchor every lane crosses,
    /// falling back to each lane's bottom point when no such anchor exists.
    pub fn ordered_left_to_right(&self, grid: &RowAnchorGrid) -> Vec<&LanePolyline> {
        let mut lanes: Vec<&LanePolyline> = self.lanes().collect();
        let common = grid
            .row_anchors()
            .iter()
            .rev()
            .copied()
            .find(|&y| lanes.iter().all(|l| l.x_at(y).is_some()));
        let key = |l: &LanePolyline| match common {
            Some(y) => l.x_at(y).unwrap_or(f64::INFINITY),
            None => l.points()[l.points().len() - 1].0,
        };
        lanes.sort_by(|a, b| key(a).total_cmp(&key(b)));
        lanes
    }
}

/// Per-(lane, anchor) class indices in `1..=w+1`, row-major `[lane][anchor]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridTarget {
    num_lanes: usize,
    num_anchors: usize,
    num_cells: usize,
    classes: Vec<usize>,
}

impl GridTarget {
    pub fn new(
        num_lanes: usize,
        num_anchors: usize,
        num_cells: usize,
        classes: Vec<usize>,
    ) -> Result<Self> {
        if classes.len() != num_lanes * num_anchors {
            return Err(Error::shape(
                "GridTarget::new",
                format!("{} classes for {num_lanes}x{num_anchors}", classes.len()),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c < 1 || c > num_cells + 1) {
            return Err(Error::OutOfRange {
                what: "class",
                value: bad as f64,
                lo: 1.0,
                hi: (num_cells + 1) as f64,
            });
        }
        Ok(Self {
            num_lanes,
            num_anchors,
            num_cells,
            classes,
        })
    }

    pub fn all_background(grid: &RowAnchorGrid) -> Self {
        Self {
            num_lanes: grid.num_lanes(),
            num_anchors: grid.num_anchors(),
            num_cells: grid.num_cells(),
            classes: vec![grid.background(); grid.num_lanes() * grid.num_anchors()],
        }
    }

    pub fn num_lanes(&self) -> usize {
        self.num_lanes
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn background(&self) -> usize {
        self.num_cells + 1
    }

    pub fn get(&self, lane: usize, anchor: usize) -> usize {
        self.classes[lane * self.num_anchors + anchor]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn is_background(&self, lane: usize, anchor: usize) -> bool {
        self.get(lane, anchor) == self.background()
    }

    /// One-hot view with shape `[C, h, w + 1]`.
    pub fn one_hot(&self) -> Tensor {
        let k = self.num_cells + 1;
        let mut data = vec![0.0; self.classes.len() * k];
        for (n, &c) in self.classes.iter().enumerate() {
            data[n * k + c - 1] = 1.0;
        }
        Tensor::from_vec(vec![self.num_lanes, self.num_anchors, k], data)
            .expect("shape matches data")
    }
}

/// Raw classifier output `P` with shape `[C, h, w + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTensor(Tensor);

impl PredictionTensor {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.rank() != 3 || logits.shape()[2] < 3 {
            return Err(Error::shape(
                "PredictionTensor::new",
                format!("expected [C, h, w+1] with w >= 2, got {:?}", logits.shape()),
            ));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite {
                op: "PredictionTensor::new",
            });
        }
        Ok(Self(logits))
    }

    /// Prediction that puts `margin` on the target class of every (lane, anchor).
    pub fn one_hot(target: &GridTarget, margin: f64) -> Self {
        Self(target.one_hot().map(|v| v * margin))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_lanes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_anchors(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn num_cells(&self) -> usize {
        self.0.shape()[2] - 1
    }

    /// The `w + 1` logits of one (lane, anchor).
    pub fn row(&self, lane: usize, anchor: usize) -> &[f64] {
        let k = self.num_cells() + 1;
        let start = (lane * self.num_anchors() + anchor) * k;
        &self.0.data()[start..start + k]
    }

    fn check_grid(&self, grid: &RowAnchorGrid) -> Result<()> {
        if self.0.shape() != grid.prediction_shape() {
            return Err(Error::shape(
                "decode",
                format!(
                    "prediction {:?} vs grid {:?}",
                    self.0.shape(),
                    grid.prediction_shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Continuous lane locations in cell units plus a presence mask, `[lane][anchor]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationMatrix {
    num_lanes: usize,
    num_anchors: usize,
    locations: Vec<f64>,
    presence: Vec<bool>,
}

impl LocationMatrix {
    pub fn new(
        num_lanes: usize,
        num_anchors: usize,
        locations: Vec<f64>,
        presence: Vec<bool>,
    ) -> Result<Self> {
        let n = num_lanes * num_anchors;
        if locations.len() != n || presence.len() != n {
            return Err(Error::shape(
                "LocationMatrix::new",
                format!(
                    "{} locations / {} flags for {n} cells",
                    locations.len(),
                    presence.len()
                ),
            ));
        }
        Ok(Self {
            num_lanes,
            num_anchors,
            locations,
            presence,
        })
    }

    pub fn num_lanes(&self) -> usize {
        self.num_lanes
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    /// Location of a present entry, `None` when absent.
    pub fn get(&self, lane: usize, anchor: usize) -> Option<f64> {
        let n = lane * self.num_anchors + anchor;
        self.presence[n].then_some(self.locations[n])
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    /// Mean |second difference| over runs of three consecutive present anchors.
    pub fn mean_second_difference(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.num_lanes {
            for j in 0..self.num_anchors.saturating_sub(2) {
                if let (Some(a), Some(b), Some(c)) =
                    (self.get(i, j), self.get(i, j + 1), self.get(i, j + 2))
                {
                    total += (a - 2.0 * b + c).abs();
                    count += 1;
                }
            }
        }
        (count > 0).then(|| total / count as f64)
    }
}

/// Class index per (lane slot, anchor). Lanes are assigned to slots left to right.
pub fn encode_targets(lanes: &LaneSet, grid: &RowAnchorGrid) -> Result<GridTarget> {
    let ordered = lanes.ordered_left_to_right(grid);
    if ordered.len() > grid.num_lanes() {
        return Err(Error::InvalidLane(format!(
            "{} lanes for {} slots",
            ordered.len(),
            grid.num_lanes()
        )));
    }
    let mut target = GridTarget::all_background(grid);
    let h = grid.num_anchors();
    for (slot, lane) in ordered.into_iter().enumerate() {
        for (j, &y) in grid.row_anchors().iter().enumerate() {
            if let Some(x) = lane.x_at(y) {
                // lanes are clipped to the image, but interpolation may land a hair outside
                if let Ok(k) = grid.cell_of_x(x) {
                    target.classes[slot * h + j] = k;
                }
            }
        }
    }
    Ok(target)
}

/// 0-based index of the largest value; ties go to the smaller index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn is_background_row(row: &[f64]) -> bool {
    argmax(row) == row.len() - 1
}

/// Peak cell on each row anchor; absent where the background class wins outright.
pub fn decode_argmax(pred: &PredictionTensor, grid: &RowAnchorGrid) -> Result<LocationMatrix> {
    pred.check_grid(grid)?;
    let (c, h, w) = (grid.num_lanes(), grid.num_anchors(), grid.num_cells());
    let mut locations = vec![0.0; c * h];
    let mut presence = vec![false; c * h];
    for i in 0..c {
        for j in 0..h {
            let row = pred.row(i, j);
            if is_background_row(row) {
                continue;
            }
            locations[i * h + j] = (argmax(&row[..w]) + 1) as f64;
            presence[i * h + j] = true;
        }
    }
    LocationMatrix::new(c, h, locations, presence)
}

/// Softmax over the `w` lane cells (background excluded) and its expected cell index.
pub fn expected_cell(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (k, &v) in row.iter().enumerate() {
        let e = (v - max).exp();
        z += e;
        acc += (k + 1) as f64 * e;
    }
    acc / z
}

/// Probability-weighted mean cell on each row anchor. Presence uses the same
/// background test as [`decode_argmax`].
pub fn decode_expectation(pred: &PredictionTensor, grid: &RowAnchorGrid) -> Result<LocationMatrix> {
    pred.check_grid(grid)?;
    let (c, h, w) = (grid.num_lanes(), grid.num_anchors(), grid.num_cells());
    let mut locations = vec![0.0; c * h];
    let mut presence = vec![false; c * h];
    for i in 0..c {
        for j in 0..h {
            let row = pred.row(i, j);
            if is_background_row(row) {
                continue;
            }
            locations[i * h + j] = expected_cell(&row[..w]);
            presence[i * h + j] = true;
        }
    }
    LocationMatrix::new(c, h, locations, presence)
}

/// Decoding rule applied to classification outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    Argmax,
    #[default]
    Expectation,
}

impl Decode {
    pub fn apply(self, pred: &PredictionTensor, grid: &RowAnchorGrid) -> Result<LocationMatrix> {
        match self {
            Decode::Argmax => decode_argmax(pred, grid),
            Decode::Expectation => decode_expectation(pred, grid),
        }
    }
}

/// Turn present locations into pixel polylines, one per lane slot.
pub fn locations_to_lanes(loc: &LocationMatrix, grid: &RowAnchorGrid) -> Result<LaneSet> {
    if loc.num_lanes() != grid.num_lanes() || loc.num_anchors() != grid.num_anchors() {
        return Err(Error::shape(
            "locations_to_lanes",
            format!(
                "{}x{} locations for a {}x{} grid",
                loc.num_lanes(),
                loc.num_anchors(),
                grid.num_lanes(),
                grid.num_anchors()
            ),
        ));
    }
    let w = grid.num_cells() as f64;
    let mut slots = Vec::with_capacity(grid.num_lanes());
    for i in 0..grid.num_lanes() {
        let mut points = Vec::new();
        for (j, &y) in grid.row_anchors().iter().enumerate() {
            if let Some(k) = loc.get(i, j) {
                points.push((grid.x_of_cell(k.clamp(1.0, w))?, y));
            }
        }
        slots.push(LanePolyline::new(points).ok());
    }
    Ok(LaneSet::new(slots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid800() -> RowAnchorGrid {
        RowAnchorGrid::new(288, 800, anchor_range(100, 280, 20), 100, 2).unwrap()
    }

    #[test]
    fn cell_of_x_examples() {
        let g = grid800();
        assert_eq!(g.cell_of_x(0.0).unwrap(), 1);
        assert_eq!(g.cell_of_x(799.9).unwrap(), 100);
        assert_eq!(g.cell_of_x(403.0).unwrap(), 51);
        assert!(g.cell_of_x(800.0).is_err());
        assert!(g.cell_of_x(-0.1).is_err());
        assert!(g.cell_of_x(f64::NAN).is_err());
    }

    #[test]
    fn cell_of_x_matches_boundary_scan() {
        let g = grid800();
        let width = 8.0;
        for i in 0..8000 {
            let x = i as f64 * 0.1;
            let expected = (1..=100)
                .find(|&k| x >= (k - 1) as f64 * width && x < k as f64 * width)
                .unwrap();
            assert_eq!(g.cell_of_x(x).unwrap(), expected, "x = {x}");
        }
    }

    #[test]
    fn x_of_cell_examples() {
        let g = grid800();
        assert_eq!(g.x_of_cell(1.0).unwrap(), 4.0);
        assert_eq!(g.x_of_cell(51.0).unwrap(), 404.0);
        assert_eq!(g.x_of_cell(2.5).unwrap(), 16.0);
        assert!(g.x_of_cell(0.99).is_err());
        assert!(g.x_of_cell(100.01).is_err());
    }

    #[test]
    fn grid_rejects_bad_layouts() {
        assert!(RowAnchorGrid::new(100, 100, vec![10.0, 20.0], 10, 1).is_err());
        assert!(RowAnchorGrid::new(100, 100, vec![10.0, 20.0, 20.0], 10, 1).is_err());
        assert!(RowAnchorGrid::new(100, 100, vec![10.0, 20.0, 100.0], 10, 1).is_err());
        assert!(RowAnchorGrid::new(100, 100, vec![10.0, 20.0, 30.0], 1, 1).is_err());
        assert!(RowAnchorGrid::new(100, 100, vec![10.0, 20.0, 30.0], 10, 0).is_err());
    }

    #[test]
    fn presets() {
        let t = RowAnchorGrid::tusimple();
        assert_eq!(t.num_anchors(), 56);
        let c = RowAnchorGrid::culane();
        assert_eq!(c.num_anchors(), 28);
        assert_eq!(formulation_cost(&c), 16_912);
        assert_eq!(segmentation_cost(288, 800, 4), 1_152_000);
        let tiny = RowAnchorGrid::new(3, 3, vec![0.0, 1.0, 2.0], 2, 1).unwrap();
        assert_eq!(formulation_cost(&tiny), 9);
    }

    #[test]
    fn minimal_cost_config() {
        assert_eq!(row_selection_cost(1, 1, 1), 2);
        assert_eq!(segmentation_cost(1, 1, 1), 2);
    }

    #[test]
    fn rescale_moves_anchors() {
        let g = RowAnchorGrid::tusimple().rescaled(288, 800).unwrap();
        assert!((g.row_anchors()[0] - 64.0).abs() < 1e-12);
        assert_eq!(g.num_cells(), 100);
    }

    #[test]
    fn encode_empty_is_background() {
        let g = grid800();
        let t = encode_targets(&LaneSet::empty(2), &g).unwrap();
        assert!(t.classes().iter().all(|&c| c == 101));
    }

    #[test]
    fn encode_vertical_line() {
        let g = grid800();
        let lane = LanePolyline::new(vec![(404.0, 0.0), (404.0, 287.0)]).unwrap();
        let t = encode_targets(&LaneSet::from_lanes(vec![lane]), &g).unwrap();
        for j in 0..g.num_anchors() {
            assert_eq!(t.get(0, j), 51);
            assert!(t.is_background(1, j));
        }
    }

    #[test]
    fn encode_partial_span() {
        let g = grid800();
        // anchors 100, 120, ..., 280; lane starts at y = 190
        let lane = LanePolyline::new(vec![(100.0, 190.0), (300.0, 287.0)]).unwrap();
        let t = encode_targets(&LaneSet::from_lanes(vec![lane.clone()]), &g).unwrap();
        for (j, &y) in g.row_anchors().iter().enumerate() {
            if y < 190.0 {
                assert!(t.is_background(0, j));
            } else {
                let x = 100.0 + (y - 190.0) / 97.0 * 200.0;
                assert_eq!(t.get(0, j), (x / 8.0).floor() as usize + 1);
            }
        }
    }

    #[test]
    fn encode_orders_left_to_right() {
        let g = grid800();
        let right = LanePolyline::new(vec![(600.0, 0.0), (700.0, 287.0)]).unwrap();
        let left = LanePolyline::new(vec![(200.0, 0.0), (100.0, 287.0)]).unwrap();
        let t = encode_targets(&LaneSet::from_lanes(vec![right, left]), &g).unwrap();
        assert!(t.get(0, 0) < t.get(1, 0));
    }

    #[test]
    fn encode_rejects_too_many_lanes() {
        let g = grid800();
        let l = LanePolyline::new(vec![(10.0, 0.0), (10.0, 287.0)]).unwrap();
        assert!(encode_targets(&LaneSet::from_lanes(vec![l.clone(), l.clone(), l]), &g).is_err());
    }

    fn small_grid(w: usize) -> RowAnchorGrid {
        RowAnchorGrid::new(30, 40, vec![5.0, 15.0, 25.0], w, 1).unwrap()
    }

    fn pred_from_rows(rows: &[Vec<f64>]) -> PredictionTensor {
        let k = rows[0].len();
        let data = rows.iter().flatten().copied().collect();
        PredictionTensor::new(Tensor::from_vec(vec![1, rows.len(), k], data).unwrap()).unwrap()
    }

    #[test]
    fn argmax_peak_background_and_ties() {
        let g = small_grid(10);
        let mut peaked = vec![0.0; 11];
        peaked[6] = 5.0;
        let mut bg = vec![0.0; 11];
        bg[10] = 5.0;
        let mut tie = vec![0.0; 11];
        tie[2] = 3.0;
        tie[4] = 3.0;
        let loc = decode_argmax(&pred_from_rows(&[peaked, bg, tie.clone()]), &g).unwrap();
        assert_eq!(loc.get(0, 0), Some(7.0));
        assert_eq!(loc.get(0, 1), None);
        assert_eq!(loc.get(0, 2), Some(3.0));

        // exhaustive scan agrees with the tie-break rule
        let best = tie[..10].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = tie.iter().position(|&v| v == best).unwrap() + 1;
        assert_eq!(first, 3);
    }

    #[test]
    fn expectation_examples() {
        let g = small_grid(4);
        let uniform = vec![0.0; 5];
        let mut peaked = vec![0.0; 5];
        peaked[2] = 30.0;
        let hand = vec![0.0, 2f64.ln(), 0.0, 0.0, -1.0];
        let loc = decode_expectation(&pred_from_rows(&[uniform, peaked, hand]), &g).unwrap();
        assert!((loc.get(0, 0).unwrap() - 2.5).abs() < 1e-12);
        assert!((loc.get(0, 1).unwrap() - 3.0).abs() < 1e-6);
        assert!((loc.get(0, 2).unwrap() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let g = small_grid(4);
        let p = pred_from_rows(&[vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]]);
        assert!(decode_argmax(&p, &g).is_err());
    }

    #[test]
    fn locations_to_lanes_drops_short_lanes() {
        let g = small_grid(4);
        let loc = LocationMatrix::new(1, 3, vec![2.0, 0.0, 0.0], vec![true, false, false]).unwrap();
        let lanes = locations_to_lanes(&loc, &g).unwrap();
        assert!(lanes.is_empty());
        let loc = LocationMatrix::new(1, 3, vec![2.0, 0.0, 3.0], vec![true, false, true]).unwrap();
        let lanes = locations_to_lanes(&loc, &g).unwrap();
        assert_eq!(
            lanes.slots()[0].as_ref().unwrap().points(),
            &[(15.0, 5.0), (25.0, 25.0)]
        );
    }

    #[test]
    fn x_at_interpolates() {
        let l = LanePolyline::new(vec![(0.0, 0.0), (10.0, 10.0), (10.0, 20.0)]).unwrap();
        assert_eq!(l.x_at(5.0), Some(5.0));
        assert_eq!(l.x_at(10.0), Some(10.0));
        assert_eq!(l.x_at(15.0), Some(10.0));
        assert_eq!(l.x_at(0.0), Some(0.0));
        assert_eq!(l.x_at(20.5), None);
        assert!(LanePolyline::new(vec![(0.0, 0.0)]).is_err());
        assert!(LanePolyline::new(vec![(0.0, 1.0), (0.0, 1.0)]).is_err());
    }

    #[test]
    fn grid_serde_validates() {
        let g = RowAnchorGrid::desk();
        let s = serde_json::to_string(&g).unwrap();
        let back: RowAnchorGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        let bad = s.replace("\"num_cells\":20", "\"num_cells\":1");
        assert!(serde_json::from_str::<RowAnchorGrid>(&bad).is_err());
    }
}
