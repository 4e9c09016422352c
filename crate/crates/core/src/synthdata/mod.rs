//! Procedural lane scenes, label-preserving augmentation and dataset IO.
//!
//! Scenes are grayscale: quadratic lanes converge toward a vanishing point on
//! a dark noisy road. Occluding rectangles hide parts of lanes without
//! touching the labels. Every output is a pure function of `(params, index)`:
//! each index draws from its own stream of a seeded ChaCha8 generator.

mod augment;
mod io;

pub use augment::{augment, augment_with, AffineMap, AugmentParams};
pub use io::{
    ingest_tusimple, read_dataset, read_image, write_dataset, write_gray, write_rgb,
    AnnotationRecord, LabeledImage, LABELS_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{LanePolyline, LaneSet};

pub(crate) fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Closed sampling interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: PartialOrd + Copy> Range<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: T) -> Self {
        Self { lo: v, hi: v }
    }

    fn is_ordered(&self) -> bool {
        self.lo <= self.hi
    }
}

impl Range<f64> {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl Range<usize> {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub lanes: Range<usize>,
    /// Quadratic coefficient `a` of `x(y) = a (y - y0)^2 + b (y - y0) + c`, in px / px^2.
    pub curvature: Range<f64>,
    /// Horizon row as a fraction of the image height; lanes start there.
    pub horizon: Range<f64>,
    /// Horizontal offset of the vanishing point from the image center, px.
    pub vanishing_offset: Range<f64>,
    /// Distance between neighbouring lanes along the bottom row, px.
    pub spacing: Range<f64>,
    /// Horizontal offset of the lane group from the image center, px.
    pub center_offset: Range<f64>,
    pub brightness: Range<f64>,
    pub background: Range<f64>,
    /// Painted width in whole pixels.
    pub line_width: Range<usize>,
    pub occlusions: Range<usize>,
    pub occlusion_width: Range<f64>,
    pub occlusion_height: Range<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self::desk()
    }
}

impl SceneParams {
    /// 64x160 scenes with two lanes and up to three occluders.
    pub fn desk() -> Self {
        Self {
            height: 64,
            width: 160,
            lanes: Range::new(2, 2),
            curvature: Range::new(-0.004, 0.004),
            horizon: Range::new(0.2, 0.3),
            vanishing_offset: Range::new(-16.0, 16.0),
            spacing: Range::new(60.0, 100.0),
            center_offset: Range::new(-15.0, 15.0),
            brightness: Range::new(0.6, 1.0),
            background: Range::new(0.05, 0.3),
            line_width: Range::new(2, 4),
            occlusions: Range::new(0, 3),
            occlusion_width: Range::new(10.0, 40.0),
            occlusion_height: Range::new(6.0, 20.0),
            noise_sigma: 0.04,
            seed: 0,
        }
    }

    /// Straight, noiseless, unoccluded lanes.
    pub fn clean(self) -> Self {
        Self {
            curvature: Range::fixed(0.0),
            occlusions: Range::fixed(0),
            noise_sigma: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("scene params: {what}")));
        if self.height < 2 || self.width < 2 {
            return bad("image must be at least 2x2");
        }
        let ordered = self.lanes.is_ordered()
            && self.curvature.is_ordered()
            && self.horizon.is_ordered()
            && self.vanishing_offset.is_ordered()
            && self.spacing.is_ordered()
            && self.center_offset.is_ordered()
            && self.brightness.is_ordered()
            && self.background.is_ordered()
            && self.line_width.is_ordered()
            && self.occlusions.is_ordered()
            && self.occlusion_width.is_ordered()
            && self.occlusion_height.is_ordered();
        if !ordered {
            return bad("every range needs lo <= hi");
        }
        if !(0.0..1.0).contains(&self.horizon.lo) || !(0.0..1.0).contains(&self.horizon.hi) {
            return bad("horizon fraction must lie in [0, 1)");
        }
        if self.line_width.lo == 0 {
            return bad("line width must be at least 1 px");
        }
        if self.brightness.lo < 0.0 || self.brightness.hi > 1.0 || self.background.lo < 0.0 {
            return bad("intensities must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and >= 0");
        }
        Ok(())
    }
}

/// The lane curves of one scene before rendering.
struct Curve {
    a: f64,
    b: f64,
    c: f64,
    y0: f64,
    top: f64,
    brightness: f64,
    half_width: f64,
}

impl Curve {
    fn x(&self, y: f64) -> f64 {
        let d = y - self.y0;
        self.a * d * d + self.b * d + self.c
    }
}

/// Overlap of pixel column `[col, col + 1)` with `[lo, hi]`.
fn coverage(col: usize, lo: f64, hi: f64) -> f64 {
    let c = col as f64;
    (hi.min(c + 1.0) - lo.max(c)).max(0.0)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Samples a curve every row from its top to the bottom row and keeps the
/// longest run inside `[0, W - 1]`.
fn curve_polyline(curve: &Curve, height: usize, width: usize) -> Option<LanePolyline> {
    let max_x = (width - 1) as f64;
    let first = curve.top.ceil() as usize;
    let mut best: Vec<(f64, f64)> = Vec::new();
    let mut run: Vec<(f64, f64)> = Vec::new();
    for r in first..height {
        let y = r as f64;
        let x = curve.x(y);
        if (0.0..=max_x).contains(&x) {
            run.push((x, y));
        } else if !run.is_empty() {
            if run.len() > best.len() {
                best = std::mem::take(&mut run);
            }
            run.clear();
        }
    }
    if run.len() > best.len() {
        best = run;
    }
    LanePolyline::new(best).ok()
}

/// Renders scene `index`. Lanes are listed left to right; a lane that keeps
/// fewer than two in-bounds points is an empty slot.
pub fn generate_scene(params: &SceneParams, index: u64) -> Result<(Tensor, LaneSet)> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = stream_rng(params.seed, index);

    let n = params.lanes.sample(&mut rng);
    let a = params.curvature.sample(&mut rng);
    let y0 = hf - 1.0;
    let top = (params.horizon.sample(&mut rng) * hf).floor();
    let vx = wf / 2.0 + params.vanishing_offset.sample(&mut rng);
    let spacing = params.spacing.sample(&mut rng);
    let center = wf / 2.0 + params.center_offset.sample(&mut rng);
    let bg = params.background.sample(&mut rng);
    let d = top - y0;
    let curves: Vec<Curve> = (0..n)
        .map(|i| {
            let c = center + (i as f64 - (n as f64 - 1.0) / 2.0) * spacing;
            // passes through (vx, top) and (c, y0)
            let b = (vx - c - a * d * d) / d;
            Curve {
                a,
                b,
                c,
                y0,
                top,
                brightness: params.brightness.sample(&mut rng),
                half_width: params.line_width.sample(&mut rng) as f64 / 2.0,
            }
        })
        .collect();

    let mut img = vec![bg; h * w];
    for (r, row) in img.chunks_mut(w).enumerate() {
        let y = r as f64 + 0.5;
        for curve in curves.iter().filter(|cv| y >= cv.top) {
            let x = curve.x(y);
            let (lo, hi) = (x - curve.half_width, x + curve.half_width);
            let c0 = lo.floor().max(0.0) as usize;
            let c1 = (hi.ceil().max(0.0) as usize).min(w);
            for (col, px) in row.iter_mut().enumerate().take(c1).skip(c0) {
                let v = bg + (curve.brightness - bg) * coverage(col, lo, hi);
                *px = px.max(v);
            }
        }
    }

    let occluders = params.occlusions.sample(&mut rng);
    for _ in 0..occluders {
        let ow = params.occlusion_width.sample(&mut rng);
        let oh = params.occlusion_height.sample(&mut rng);
        let ox = rng.random_range(0.0..wf);
        let oy = rng.random_range(top..hf);
        let shade = params.background.sample(&mut rng);
        let (c0, c1) = (
            (ox - ow / 2.0).max(0.0) as usize,
            ((ox + ow / 2.0) as usize).min(w),
        );
        let (r0, r1) = (
            (oy - oh / 2.0).max(0.0) as usize,
            ((oy + oh / 2.0) as usize).min(h),
        );
        for r in r0..r1 {
            img[r * w + c0..r * w + c1].fill(shade);
        }
    }

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for px in &mut img {
            *px += normal.sample(&mut rng);
        }
    }
    img.iter_mut().for_each(|px| *px = quantize(*px));

    let lanes = LaneSet::new(curves.iter().map(|c| curve_polyline(c, h, w)).collect());
    Ok((Tensor::from_vec(vec![1, h, w], img)?, lanes))
}

/// Scenes `start..start + count`, generated in parallel, returned in index order.
pub fn generate_scenes(
    params: &SceneParams,
    start: u64,
    count: usize,
) -> Result<Vec<(Tensor, LaneSet)>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(params, start + i))
        .collect()
}
