use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadKind, HeadOutput, LrSchedule, Model, Optimizer, OptimizerKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{encode_targets, GridTarget, LaneSet, RowAnchorGrid};
use crate::losses::{
    regression_loss, seg_loss, total_loss, LossComponents, LossConfig, Reduction, SegTarget,
};

/// One training example. `seg` is only used when the model has an auxiliary
/// head and the segmentation weight is positive.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub target: GridTarget,
    pub seg: Option<SegTarget>,
}

impl Sample {
    /// Encodes `lanes` on `grid`. With `seg_width`, lane masks of that width
    /// are rasterized at the image resolution for the auxiliary head.
    pub fn from_scene(
        image: Tensor,
        lanes: &LaneSet,
        grid: &RowAnchorGrid,
        seg_width: Option<f64>,
    ) -> Result<Self> {
        let target = encode_targets(lanes, grid)?;
        let seg = match (seg_width, image.shape()) {
            (Some(wd), &[_, h, w]) => Some(SegTarget::from_lanes(lanes, grid, h, w, wd)?),
            (Some(_), s) => {
                return Err(Error::shape("Sample::from_scene", format!("image {s:?}")));
            }
            (None, _) => None,
        };
        Ok(Self { image, target, seg })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.002,
            optimizer: OptimizerKind::default(),
            schedule: LrSchedule::Constant,
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()
    }
}

/// Records the full objective for one sample on `tape`.
///
/// Returns the scalar loss, the parameter leaves and the per-term values.
pub fn sample_objective(
    model: &Model,
    tape: &mut Tape,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<(Var, Vec<Var>, LossComponents)> {
    let want_seg = cfg.beta_segmentation > 0.0 && sample.seg.is_some();
    let fwd = model.forward_with(tape, &sample.image, want_seg)?;
    let seg = match (fwd.seg, sample.seg.as_ref()) {
        (Some(logits), Some(t)) if want_seg => Some((logits, t)),
        _ => None,
    };
    let (loss, components) = match fwd.head {
        HeadOutput::Classification { logits } => {
            let t = total_loss(
                tape,
                logits,
                &sample.target,
                seg.map(|s| s.0),
                seg.map(|s| s.1),
                cfg,
            )?;
            (t.loss, t.components)
        }
        HeadOutput::Regression {
            locations,
            presence,
        } => {
            let scale = match model.config().head {
                HeadKind::RegressionNorm => model.grid().num_cells() as f64,
                _ => 1.0,
            };
            let (total, l1, bce) =
                regression_loss(tape, locations, presence, &sample.target, scale)?;
            let mut total = match cfg.reduction {
                Reduction::Sum => total,
                Reduction::Mean => {
                    let n = sample.target.num_lanes() * sample.target.num_anchors();
                    tape.scale(total, 1.0 / n as f64)?
                }
            };
            let mut components = LossComponents {
                reg: Some(tape.value(l1).item()),
                presence: Some(tape.value(bce).item()),
                ..Default::default()
            };
            if let Some((logits, t)) = seg {
                let s = seg_loss(tape, logits, t)?;
                components.seg = Some(tape.value(s).item());
                let weighted = tape.scale(s, cfg.beta_segmentation)?;
                total = tape.add(total, weighted)?;
            }
            components.total = tape.value(total).item();
            (total, components)
        }
    };
    if !components.total.is_finite() {
        return Err(Error::NonFinite {
            op: "training loss",
        });
    }
    Ok((loss, fwd.params, components))
}

/// Gradient of the sample objective with respect to every model parameter.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<(Vec<Tensor>, LossComponents)> {
    let mut tape = Tape::new();
    let (loss, params, components) = sample_objective(model, &mut tape, sample, cfg)?;
    let mut grads = tape.backward(loss)?;
    let out = params
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((out, components))
}

fn mean_components(all: &[LossComponents]) -> LossComponents {
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&LossComponents) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = all.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    LossComponents {
        total: all.iter().map(|c| c.total).sum::<f64>() / n,
        cls: avg(|c| c.cls),
        sim: avg(|c| c.sim),
        shp: avg(|c| c.shp),
        seg: avg(|c| c.seg),
        reg: avg(|c| c.reg),
        presence: avg(|c| c.presence),
    }
}

/// Mini-batch trainer. Gradients are averaged over the samples of a batch and
/// the epoch order is a seeded shuffle, so a run is a pure function of the
/// model, the data and the config.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    optimizer: Optimizer,
    step: u64,
    total_steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, model.parameters());
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
            total_steps: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Optimizer updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer update on `batch`; returns the batch-mean loss terms.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<LossComponents> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut sum: Option<Vec<Tensor>> = None;
        let mut comps = Vec::with_capacity(batch.len());
        for sample in batch {
            let (g, c) = sample_gradients(&self.model, sample, &self.config.loss)?;
            comps.push(c);
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let grads: Vec<Tensor> = sum
            .unwrap_or_default()
            .iter()
            .map(|g| g.map(|v| v * inv))
            .collect();
        let lr = self
            .config
            .schedule
            .rate(self.config.learning_rate, self.step, self.total_steps);
        self.optimizer
            .step(self.model.parameters_mut(), &grads, lr)?;
        self.step += 1;
        Ok(mean_components(&comps))
    }

    /// Trains for `config.epochs` epochs; `on_epoch(epoch, mean_terms)` is
    /// called after each one and its result is collected.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut on_epoch: impl FnMut(usize, &LossComponents),
    ) -> Result<Vec<LossComponents>> {
        if data.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let bs = self.config.batch_size;
        let per_epoch = data.len().div_ceil(bs) as u64;
        self.total_steps = self.step + per_epoch * self.config.epochs as u64;
        let mut history = Vec::with_capacity(self.config.epochs);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.shuffle_seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
            let mut comps = Vec::with_capacity(per_epoch as usize);
            for chunk in order.chunks(bs) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
                comps.push(self.train_step(&batch)?);
            }
            let mean = mean_components(&comps);
            on_epoch(epoch, &mean);
            history.push(mean);
        }
        Ok(history)
    }
}
