//! Fixtures shared by the benchmarks.

use lanegrid::model::{Model, ModelConfig, Sample};
use lanegrid::synthdata::{generate_scene, SceneParams};
use lanegrid::{LanePolyline, LaneSet};

/// Desk model with an untrained classification head.
pub fn desk_model() -> Model {
    Model::new(ModelConfig::desk()).expect("desk config is valid")
}

/// One rendered desk scene as a training sample, with segmentation masks.
pub fn desk_sample(model: &Model, index: u64) -> Sample {
    let (image, lanes) = generate_scene(&SceneParams::desk(), index).expect("desk scene");
    Sample::from_scene(image, &lanes, model.grid(), Some(4.0)).expect("desk sample")
}

/// A gently curving lane across a `size x size` canvas.
pub fn curved_lane(size: f64) -> LanePolyline {
    let points = (0..=16)
        .map(|i| {
            let y = size * i as f64 / 16.0;
            (0.3 * size + 0.2 * size * (y / size).powi(2), y)
        })
        .collect();
    LanePolyline::new(points).expect("increasing y")
}

/// Ground-truth lanes of desk scene `index`.
pub fn scene_lanes(index: u64) -> LaneSet {
    generate_scene(&SceneParams::desk(), index)
        .expect("desk scene")
        .1
}
