//! Toy backbone with a global row-selection head.
//!
//! The backbone is a stack of stride-2 3x3 convolutions with ReLU. Its last
//! feature map is flattened into one vector, and a single linear layer maps
//! that vector to all `C * h * (w + 1)` logits, so every output sees the whole
//! image. A 1x1 segmentation head on an intermediate stage is only evaluated
//! in training mode.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use train::{sample_gradients, sample_objective, Sample, TrainConfig, Trainer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Decode, LocationMatrix, PredictionTensor, RowAnchorGrid};

/// Output head placed on the global feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Group classification over `w + 1` cells per (lane, anchor).
    #[default]
    Classification,
    /// One location (in cells) and one presence logit per (lane, anchor).
    Regression,
    /// As `Regression` with location targets divided by `w`.
    RegressionNorm,
}

impl HeadKind {
    pub fn is_regression(self) -> bool {
        !matches!(self, HeadKind::Classification)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub grid: RowAnchorGrid,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    pub seed: u64,
    pub aux_segmentation: bool,
    /// Stage whose output feeds the segmentation head.
    pub seg_tap: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x160 input, four stages, the desk grid (2 lanes, 8 anchors, 20 cells).
    pub fn desk() -> Self {
        Self {
            input_height: 64,
            input_width: 160,
            grid: RowAnchorGrid::desk(),
            channels: vec![8, 16, 32, 16],
            seed: 0,
            aux_segmentation: true,
            seg_tap: 1,
            head: HeadKind::Classification,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "backbone needs at least one non-empty stage".into(),
            ));
        }
        let s = self.stride();
        if self.input_height % s != 0 || self.input_width % s != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by backbone stride {s}",
                self.input_height, self.input_width
            )));
        }
        if self.aux_segmentation && self.seg_tap >= self.channels.len() {
            return Err(Error::Config(format!(
                "segmentation tap {} but only {} stages",
                self.seg_tap,
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn feature_len(&self) -> usize {
        let s = self.stride();
        self.channels[self.channels.len() - 1] * (self.input_height / s) * (self.input_width / s)
    }

    fn head_outputs(&self) -> usize {
        let (c, h, w) = (
            self.grid.num_lanes(),
            self.grid.num_anchors(),
            self.grid.num_cells(),
        );
        match self.head {
            HeadKind::Classification => c * h * (w + 1),
            HeadKind::Regression | HeadKind::RegressionNorm => 2 * c * h,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut in_ch = 1;
        for (i, &out) in self.channels.iter().enumerate() {
            layout.push((format!("stage{i}.weight"), vec![out, in_ch, 3, 3]));
            layout.push((format!("stage{i}.bias"), vec![out]));
            in_ch = out;
        }
        layout.push((
            "head.weight".into(),
            vec![self.feature_len(), self.head_outputs()],
        ));
        layout.push(("head.bias".into(), vec![1, self.head_outputs()]));
        if self.aux_segmentation {
            let k = self.grid.num_lanes() + 1;
            layout.push((
                "seg.weight".into(),
                vec![k, self.channels[self.seg_tap], 1, 1],
            ));
            layout.push(("seg.bias".into(), vec![k]));
        }
        layout
    }
}

/// Output of the main head.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// `[C, h, w + 1]` logits.
    Classification { logits: Var },
    /// `[C, h]` locations in cell units (or cells / w) and `[C, h]` presence logits.
    Regression { locations: Var, presence: Var },
}

pub struct Forward {
    /// Parameter leaves, aligned with [`Model::parameters`].
    pub params: Vec<Var>,
    pub head: HeadOutput,
    /// `[C + 1, H, W]` logits; only in training mode with the auxiliary head enabled.
    pub seg: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh weights: uniform in `+-sqrt(6 / fan_in)` for convolutions,
    /// `+-1 / sqrt(fan_in)` for the heads, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let (fan_in, gain) = if name.starts_with("head") {
                        (shape[0], 1.0)
                    } else {
                        (shape[1] * shape[2] * shape[3], 6f64)
                    };
                    let bound = (gain / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                Tensor::from_vec(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "{} parameter tensors for a layout of {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "Model::from_parameters",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &RowAnchorGrid {
        &self.config.grid
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor, mode: Mode) -> Result<Forward> {
        self.forward_with(
            tape,
            image,
            mode == Mode::Train && self.config.aux_segmentation,
        )
    }

    /// As [`Model::forward`], with explicit control over the segmentation head.
    pub fn forward_with(&self, tape: &mut Tape, image: &Tensor, with_seg: bool) -> Result<Forward> {
        let cfg = &self.config;
        let expected = [1, cfg.input_height, cfg.input_width];
        if image.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, model expects {expected:?}", image.shape()),
            ));
        }
        let params = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;

        let stages = cfg.channels.len();
        let mut x = tape.leaf(image.clone())?;
        let mut tap = None;
        for i in 0..stages {
            let y = tape.conv2d(x, params[2 * i], Some(params[2 * i + 1]), 2, 1)?;
            x = tape.relu(y)?;
            if i == cfg.seg_tap {
                tap = Some(x);
            }
        }

        let feat = tape.reshape(x, &[1, cfg.feature_len()])?;
        let out = tape.matmul(feat, params[2 * stages])?;
        let out = tape.add(out, params[2 * stages + 1])?;
        let (c, h, w) = (
            cfg.grid.num_lanes(),
            cfg.grid.num_anchors(),
            cfg.grid.num_cells(),
        );
        let head = match cfg.head {
            HeadKind::Classification => HeadOutput::Classification {
                logits: tape.reshape(out, &[c, h, w + 1])?,
            },
            HeadKind::Regression | HeadKind::RegressionNorm => {
                let loc = tape.narrow(out, 1, 0, c * h)?;
                let pres = tape.narrow(out, 1, c * h, c * h)?;
                HeadOutput::Regression {
                    locations: tape.reshape(loc, &[c, h])?,
                    presence: tape.reshape(pres, &[c, h])?,
                }
            }
        };

        let seg = match (with_seg && cfg.aux_segmentation, tap) {
            (true, Some(t)) => {
                let base = 2 * stages + 2;
                let s = tape.conv2d(t, params[base], Some(params[base + 1]), 1, 0)?;
                Some(tape.upsample_nearest(s, 1 << (cfg.seg_tap + 1))?)
            }
            _ => None,
        };
        Ok(Forward { params, head, seg })
    }

    /// Raw classification logits in evaluation mode.
    pub fn predict_logits(&self, image: &Tensor) -> Result<PredictionTensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, image, Mode::Eval)?;
        match f.head {
            HeadOutput::Classification { logits } => {
                PredictionTensor::new(tape.value(logits).clone())
            }
            HeadOutput::Regression { .. } => Err(Error::Config(
                "predict_logits needs a classification head".into(),
            )),
        }
    }

    /// Regression head output: locations in cell units and presence, `[C, h]`.
    pub fn regression_head_forward(&self, image: &Tensor) -> Result<LocationMatrix> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, image, Mode::Eval)?;
        let HeadOutput::Regression {
            locations,
            presence,
        } = f.head
        else {
            return Err(Error::Config("model has a classification head".into()));
        };
        let grid = &self.config.grid;
        let w = grid.num_cells() as f64;
        let scale = if self.config.head == HeadKind::RegressionNorm {
            w
        } else {
            1.0
        };
        let locs = tape
            .value(locations)
            .data()
            .iter()
            .map(|v| v * scale)
            .collect();
        let pres = tape
            .value(presence)
            .data()
            .iter()
            .map(|&z| z > 0.0)
            .collect();
        LocationMatrix::new(grid.num_lanes(), grid.num_anchors(), locs, pres)
    }

    /// Lane locations for one image, decoding classification outputs with `decode`.
    pub fn predict(&self, image: &Tensor, decode: Decode) -> Result<LocationMatrix> {
        match self.config.head {
            HeadKind::Classification => decode.apply(&self.predict_logits(image)?, self.grid()),
            _ => self.regression_head_forward(image),
        }
    }
}
