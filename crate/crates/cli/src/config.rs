//! Experiment configuration: one TOML file holding every setting of a run.

use std::path::{Path, PathBuf};

use lanegrid::losses::Reduction;
use lanegrid::metrics::{DEFAULT_IOU_THRESHOLD, DEFAULT_LANE_WIDTH, DEFAULT_PIXEL_THRESHOLD};
use lanegrid::model::{HeadKind, ModelConfig, OptimizerKind, TrainConfig};
use lanegrid::synthdata::{AugmentParams, SceneParams};
use lanegrid::Decode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes written by `synth`.
    pub scenes: usize,
    /// Trailing scenes of a dataset held out for evaluation by `train` and `sweep`.
    pub holdout: usize,
    /// Width in pixels of the lane masks used by the auxiliary segmentation head.
    pub seg_line_width: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 600,
            holdout: 100,
            seg_line_width: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: Decode,
    pub pixel_threshold: f64,
    pub lane_width: f64,
    pub iou_threshold: f64,
    /// Number of worst scenes listed in the report.
    pub worst: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: Decode::Expectation,
            pixel_threshold: DEFAULT_PIXEL_THRESHOLD,
            lane_width: DEFAULT_LANE_WIDTH,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            worst: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed, copied into every component seed by [`ExperimentConfig::apply_seed`].
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneParams,
    /// Static augmentation of the training split; absent means none.
    pub augment: Option<AugmentParams>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Settings for the 64x160 synthetic desk experiments.
    pub fn desk() -> Self {
        let mut train = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            ..TrainConfig::default()
        };
        train.loss.reduction = Reduction::Mean;
        let mut cfg = Self {
            seed: 0,
            model: ModelConfig::desk(),
            scene: SceneParams::desk(),
            augment: None,
            train,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            out_dir: None,
        };
        cfg.apply_seed(0);
        cfg
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    /// Reads `path`, or returns [`ExperimentConfig::desk`] when there is none.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::desk()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.scene.seed = seed;
        self.train.shuffle_seed = seed;
        if let Some(a) = &mut self.augment {
            a.seed = seed;
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(seed) = o.seed {
            self.apply_seed(seed);
        }
        if let Some(head) = o.head {
            self.model.head = head;
        }
        if let Some(decode) = o.decode {
            self.eval.decode = decode;
        }
        if let Some(a) = o.alpha {
            self.train.loss.alpha_structural = a;
        }
        if let Some(b) = o.beta {
            self.train.loss.beta_segmentation = b;
        }
        if let Some(l) = o.lambda {
            self.train.loss.lambda_shape = l;
        }
        if let Some(&w) = o.cells.first() {
            self.model.grid = self.model.grid.with_cells(w)?;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        Ok(())
    }

    /// Checks every section and that model, grid and scenes agree on the image size.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.train.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        let (h, w) = (self.model.input_height, self.model.input_width);
        if (self.scene.height, self.scene.width) != (h, w) {
            return Err(CliError::Usage(format!(
                "scene size {}x{} differs from model input {h}x{w}",
                self.scene.height, self.scene.width
            )));
        }
        if self.data.seg_line_width.is_nan() || self.data.seg_line_width <= 0.0 {
            return Err(CliError::Usage(
                "data.seg_line_width must be positive".into(),
            ));
        }
        if !(self.eval.pixel_threshold > 0.0 && self.eval.lane_width > 0.0) {
            return Err(CliError::Usage("eval thresholds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(CliError::Usage(
                "eval.iou_threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Command-line settings that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub head: Option<HeadKind>,
    pub decode: Option<Decode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub cells: Vec<usize>,
    pub out: Option<PathBuf>,
}
