use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{LanePolyline, LaneSet};

/// Random rotation about the image center followed by a shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Rotation is uniform in `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub max_shift_x: f64,
    pub max_shift_y: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::for_size(64, 160)
    }
}

impl AugmentParams {
    /// +-6 degrees and shifts of up to a tenth of each image dimension.
    pub fn for_size(height: usize, width: usize) -> Self {
        Self {
            max_rotation_deg: 6.0,
            max_shift_x: 0.1 * width as f64,
            max_shift_y: 0.1 * height as f64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..30.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "rotation range must lie in [0, 30) degrees, got {}",
                self.max_rotation_deg
            )));
        }
        if !(self.max_shift_x >= 0.0 && self.max_shift_y >= 0.0)
            || !self.max_shift_x.is_finite()
            || !self.max_shift_y.is_finite()
        {
            return Err(Error::Config("shift ranges must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The map used for scene `index` of an image of the given size.
    pub fn sample(&self, index: u64, height: usize, width: usize) -> Result<AffineMap> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, index);
        let mut sym = |m: f64| {
            if m > 0.0 {
                rng.random_range(-m..=m)
            } else {
                0.0
            }
        };
        let angle = sym(self.max_rotation_deg);
        let tx = sym(self.max_shift_x);
        let ty = sym(self.max_shift_y);
        Ok(AffineMap::rotate_shift(angle, tx, ty, height, width))
    }
}

/// `p' = M p + t` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    /// Rotation by `angle_deg` about the image center, then a shift of `(tx, ty)`.
    pub fn rotate_shift(angle_deg: f64, tx: f64, ty: f64, height: usize, width: usize) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let m = [[c, -s], [s, c]];
        let t = [
            cx - (m[0][0] * cx + m[0][1] * cy) + tx,
            cy - (m[1][0] * cx + m[1][1] * cy) + ty,
        ];
        Self { m, t }
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::Config("singular affine map".into()));
        }
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Ok(Self { m, t })
    }
}

/// Bilinear sample of channel plane `plane` at continuous pixel coordinates,
/// zero outside the image.
fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    // pixel (r, c) has its center at (c + 0.5, r + 0.5)
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1.0))
        + ay * ((1.0 - ax) * at(y0 + 1.0, x0) + ax * at(y0 + 1.0, x0 + 1.0))
}

fn warp_image(image: &Tensor, map: &AffineMap) -> Result<Tensor> {
    let &[ch, h, w] = image.shape() else {
        return Err(Error::shape(
            "augment",
            format!("image must be [C, H, W], got {:?}", image.shape()),
        ));
    };
    let inv = map.inverse()?;
    let mut out = vec![0.0; ch * h * w];
    for (plane, dst) in image.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                let (sx, sy) = inv.apply((c as f64 + 0.5, r as f64 + 0.5));
                dst[r * w + c] = bilinear(plane, h, w, sx, sy);
            }
        }
    }
    Tensor::from_vec(vec![ch, h, w], out)
}

/// Smallest `t > 0` with `p + t d` on the boundary of `[0, W-1] x [0, H-1]`,
/// for `p` inside the box and `d.1 > 0`.
fn exit_time(p: (f64, f64), d: (f64, f64), h: f64, w: f64) -> f64 {
    let mut t = (h - 1.0 - p.1) / d.1;
    if d.0 > 0.0 {
        t = t.min((w - 1.0 - p.0) / d.0);
    } else if d.0 < 0.0 {
        t = t.min(-p.0 / d.0);
    }
    t.max(0.0)
}

fn transform_lane(
    lane: &LanePolyline,
    map: &AffineMap,
    h: usize,
    w: usize,
) -> Option<LanePolyline> {
    let (hf, wf) = (h as f64, w as f64);
    let inside =
        |&(x, y): &(f64, f64)| (0.0..=wf - 1.0).contains(&x) && (0.0..=hf - 1.0).contains(&y);

    // keep points that continue downward, then the longest in-bounds run
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(lane.points().len());
    for p in lane.points().iter().map(|&p| map.apply(p)) {
        if pts.last().is_none_or(|q| p.1 > q.1) {
            pts.push(p);
        }
    }
    let mut best: &[(f64, f64)] = &[];
    for run in pts.split(|p| !inside(p)) {
        if run.len() > best.len() {
            best = run;
        }
    }
    if best.len() < 2 {
        return None;
    }
    let mut kept = best.to_vec();

    // extend the bottom end along its last segment to the image boundary
    let (p0, p1) = (kept[kept.len() - 2], kept[kept.len() - 1]);
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let t = exit_time(p1, d, hf, wf);
    if t > 1e-9 {
        let q = (p1.0 + t * d.0, p1.1 + t * d.1);
        kept.push((q.0.clamp(0.0, wf - 1.0), q.1.min(hf - 1.0)));
    }
    LanePolyline::new(kept).ok()
}

/// Applies `map` to the image (bilinear, zero fill) and to every lane, then
/// extends each lane's bottom end linearly until it meets the image border.
/// Lanes left with fewer than two in-bounds points become empty slots.
pub fn augment_with(image: &Tensor, lanes: &LaneSet, map: &AffineMap) -> Result<(Tensor, LaneSet)> {
    let out = warp_image(image, map)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let slots = lanes
        .slots()
        .iter()
        .map(|s| s.as_ref().and_then(|l| transform_lane(l, map, h, w)))
        .collect();
    Ok((out, LaneSet::new(slots)))
}

/// [`augment_with`] using the map drawn for `index`.
pub fn augment(
    image: &Tensor,
    lanes: &LaneSet,
    params: &AugmentParams,
    index: u64,
) -> Result<(Tensor, LaneSet)> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::shape(
            "augment",
            format!("image must be [C, H, W], got {:?}", image.shape()),
        ));
    };
    let map = params.sample(index, h, w)?;
    augment_with(image, lanes, &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneParams};
    use proptest::prelude::*;

    fn lane(points: &[(f64, f64)]) -> LanePolyline {
        LanePolyline::new(points.to_vec()).unwrap()
    }

    fn blank(h: usize, w: usize) -> Tensor {
        Tensor::full(&[1, h, w], 0.5)
    }

    #[test]
    fn identity_keeps_lanes_and_extends_to_border() {
        let lanes = LaneSet::from_lanes(vec![lane(&[(50.0, 10.0), (52.0, 20.0), (54.0, 30.0)])]);
        let (img, out) = augment_with(&blank(64, 160), &lanes, &AffineMap::identity()).unwrap();
        assert_eq!(img, blank(64, 160));
        let pts = out.slots()[0].as_ref().unwrap().points();
        assert_eq!(&pts[..3], lanes.slots()[0].as_ref().unwrap().points());
        let last = pts[pts.len() - 1];
        assert!((last.1 - 63.0).abs() < 1e-12);
        assert!((last.0 - (54.0 + 0.2 * 33.0)).abs() < 1e-9);
    }

    #[test]
    fn extension_can_stop_at_a_side_edge() {
        let lanes = LaneSet::from_lanes(vec![lane(&[(20.0, 10.0), (10.0, 20.0)])]);
        let (_, out) = augment_with(&blank(64, 160), &lanes, &AffineMap::identity()).unwrap();
        let pts = out.slots()[0].as_ref().unwrap().points();
        assert_eq!(pts[pts.len() - 1], (0.0, 30.0));
    }

    #[test]
    fn horizontal_shift_moves_every_point() {
        let s = 7.0;
        let orig = lane(&[(50.0, 10.0), (52.0, 20.0), (54.0, 63.0)]);
        let lanes = LaneSet::from_lanes(vec![orig.clone()]);
        let map = AffineMap::rotate_shift(0.0, s, 0.0, 64, 160);
        let (_, out) = augment_with(&blank(64, 160), &lanes, &map).unwrap();
        let moved = out.slots()[0].as_ref().unwrap().points();
        for (a, b) in orig.points().iter().zip(moved) {
            assert!((b.0 - (a.0 + s)).abs() < 1e-12 && (b.1 - a.1).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_matches_matrix_oracle() {
        let (h, w) = (64usize, 160usize);
        let orig = lane(&[(70.0, 15.0), (75.0, 30.0), (80.0, 45.0), (85.0, 60.0)]);
        let map = AffineMap::rotate_shift(10.0, 0.0, 0.0, h, w);
        let (_, out) =
            augment_with(&blank(h, w), &LaneSet::from_lanes(vec![orig.clone()]), &map).unwrap();
        let got = out.slots()[0].as_ref().unwrap().points();
        let th = 10f64.to_radians();
        let (cx, cy) = (80.0, 32.0);
        for (i, &(x, y)) in orig.points().iter().enumerate() {
            let ex = th.cos() * (x - cx) - th.sin() * (y - cy) + cx;
            let ey = th.sin() * (x - cx) + th.cos() * (y - cy) + cy;
            assert!((got[i].0 - ex).abs() < 1e-9 && (got[i].1 - ey).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_round_trips() {
        let map = AffineMap::rotate_shift(-17.0, 3.5, -2.0, 64, 160);
        let inv = map.inverse().unwrap();
        let p = (12.3, 45.6);
        let q = inv.apply(map.apply(p));
        assert!((q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12);
    }

    #[test]
    fn image_shift_moves_pixels() {
        let mut data = vec![0.0; 16 * 20];
        data[5 * 20 + 6] = 1.0;
        let img = Tensor::from_vec(vec![1, 16, 20], data).unwrap();
        let map = AffineMap::rotate_shift(0.0, 3.0, 2.0, 16, 20);
        let (out, _) = augment_with(&img, &LaneSet::default(), &map).unwrap();
        assert_eq!(out.data()[7 * 20 + 9], 1.0);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lane_pushed_out_of_frame_is_dropped() {
        let lanes = LaneSet::from_lanes(vec![lane(&[(150.0, 10.0), (155.0, 60.0)])]);
        let map = AffineMap::rotate_shift(0.0, 20.0, 0.0, 64, 160);
        let (_, out) = augment_with(&blank(64, 160), &lanes, &map).unwrap();
        assert_eq!(out.slots(), &[None]);
    }

    #[test]
    fn rejects_wide_rotation_ranges() {
        let p = AugmentParams {
            max_rotation_deg: 30.0,
            ..Default::default()
        };
        assert!(p.sample(0, 64, 160).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn labels_follow_the_map_and_reach_the_border(index in 0u64..500, seed in 0u64..50) {
            let (img, lanes) = generate_scene(&SceneParams::desk(), index).unwrap();
            let params = AugmentParams { seed, ..Default::default() };
            let map = params.sample(index, 64, 160).unwrap();
            let (_, out) = augment(&img, &lanes, &params, index).unwrap();
            for (orig, new) in lanes.slots().iter().zip(out.slots()) {
                let (Some(orig), Some(new)) = (orig, new) else { continue };
                // every original point that lands inside maps onto the new lane
                for &p in orig.points() {
                    let (x, y) = map.apply(p);
                    if !((0.0..=159.0).contains(&x) && (0.0..=63.0).contains(&y)) {
                        continue;
                    }
                    if let Some(nx) = new.x_at(y) {
                        prop_assert!((nx - x).abs() < 0.5, "{nx} vs {x}");
                    }
                }
                let &(bx, by) = new.points().last().unwrap();
                let on_edge = (by - 63.0).abs() < 1e-9 || bx.abs() < 1e-9 || (bx - 159.0).abs() < 1e-9;
                prop_assert!(on_edge, "bottom point ({bx}, {by})");
            }
        }

        #[test]
        fn augmentation_is_deterministic(index in 0u64..100) {
            let (img, lanes) = generate_scene(&SceneParams::desk(), index).unwrap();
            let p = AugmentParams::default();
            prop_assert_eq!(augment(&img, &lanes, &p, index).unwrap(), augment(&img, &lanes, &p, index).unwrap());
        }
    }
}
