//! Supervised pretraining on rendered views so attacks start from a working model.

use super::{grid_boxes, Model, ParamMode, Task};
use crate::error::Result;
use crate::graph::{Bindings, Graph};
use crate::optim::Adam;
use crate::scene::{distractor_texture, training_texture, SceneGenerator, SceneSample};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Held-out views live far away from the training stream.
const HELD_OUT_BASE: usize = 1 << 40;
const TEXTURE_SALT: u64 = 0x7e57;
/// Share of views whose cube wears a non-target texture and is labeled background.
pub const DISTRACTOR_RATE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Step budget; one rendered view per step.
    pub steps: usize,
    /// Adam step size; `None` picks the architecture's default.
    pub lr: Option<f64>,
    pub eval_every: usize,
    pub eval_views: usize,
    /// Target-region mean the model must reach (segmenter and detectors).
    pub target_threshold: f64,
    /// Background mean the model must stay under (segmenter and detectors).
    pub background_threshold: f64,
    /// Mask IoU the segmenter must reach.
    pub iou_threshold: f64,
    /// Mean relative depth error on the object the depth model must stay under.
    pub depth_threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            lr: None,
            eval_every: 100,
            eval_views: 16,
            target_threshold: 0.8,
            background_threshold: 0.2,
            iou_threshold: 0.7,
            depth_threshold: 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    Trained,
    Undertrained,
}

/// Held-out quality after pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub status: TrainStatus,
    pub steps: usize,
    /// Mean output over target cells or pixels (detectors, segmenter).
    pub target_mean: f64,
    /// Mean output over background cells or pixels (detectors, segmenter).
    pub background_mean: f64,
    /// IoU of `prob > 0.5` with `mask > 0.5` (segmenter only).
    pub mask_iou: Option<f64>,
    /// Mean relative depth error on object pixels (depth model only).
    pub depth_error: Option<f64>,
}

struct Labeled {
    image: Tensor,
    target: Tensor,
    weight: Tensor,
    positive: Vec<bool>,
    sample: SceneSample,
}

fn labeled(
    model: &Model,
    scenes: &SceneGenerator,
    index: usize,
    grid: (usize, usize),
) -> Result<Labeled> {
    let (sample, raster) = scenes.sample_with_raster(index)?;
    let mut rng = scenes.rng(index, TEXTURE_SALT);
    let distractor = rng.random_bool(DISTRACTOR_RATE);
    let shape = scenes.mesh().texture_shape();
    let texture = if distractor {
        distractor_texture(&mut rng, shape)
    } else {
        training_texture(&mut rng, shape)
    };
    let image = sample.render(&raster, &texture)?;
    let (target, positive): (Tensor, Vec<bool>) = match model.task() {
        Task::Detection => {
            let pos: Vec<bool> = grid_boxes(grid.0, grid.1)
                .iter()
                .map(|(cell, _)| {
                    let (x, y) = cell.center();
                    !distractor && sample.gt_box.contains(x, y)
                })
                .collect();
            let t = Tensor::vector(pos.iter().map(|&p| f64::from(u8::from(p))).collect());
            (t, pos)
        }
        Task::Segmentation if distractor => {
            let t = Tensor::zeros(sample.target_mask.shape());
            (t, vec![false; sample.target_mask.len()])
        }
        Task::Segmentation => {
            let pos = sample.target_mask.data().iter().map(|&m| m > 0.5).collect();
            (sample.target_mask.clone(), pos)
        }
        Task::Depth => {
            let pos = sample.target_mask.data().iter().map(|&m| m > 0.5).collect();
            (sample.depth.clone(), pos)
        }
    };
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    let w: Vec<f64> = positive
        .iter()
        .map(|&p| match (np, nn) {
            (0, n) | (n, 0) => 1.0 / n as f64,
            _ if p => 0.5 / np as f64,
            _ => 0.5 / nn as f64,
        })
        .collect();
    let weight = Tensor::new(target.shape().to_vec(), w)?;
    Ok(Labeled {
        image,
        target,
        weight,
        positive,
        sample,
    })
}

/// Output grid of a model on the configured image size.
fn output_grid(model: &Model, size: usize) -> Result<(usize, usize)> {
    let mut g = Graph::new();
    let x = g.input("image", &[size, size, 3]);
    Ok(model.forward(&mut g, x, ParamMode::Frozen)?.grid)
}

/// Trains a copy of `model` on views from `scenes`, stopping early once the
/// held-out thresholds are met.
pub fn pretrain(
    model: &Model,
    scenes: &SceneGenerator,
    cfg: &PretrainConfig,
) -> Result<(Model, PretrainMetrics)> {
    let mut model = model.clone();
    let size = scenes.config().image_size;
    let grid = output_grid(&model, size)?;
    let held: Vec<Labeled> = (0..cfg.eval_views)
        .map(|i| labeled(&model, scenes, HELD_OUT_BASE + i, grid))
        .collect::<Result<_>>()?;

    let mut g = Graph::new();
    let x = g.input("image", &[size, size, 3]);
    let nodes = model.forward(&mut g, x, ParamMode::Trainable)?;
    let out_shape = g.shape(nodes.output).to_vec();
    let y = g.input("target", &out_shape);
    let w = g.input("weight", &out_shape);
    let per = match model.task() {
        Task::Detection | Task::Segmentation => {
            let sp = g.softplus(nodes.logits)?;
            let yz = g.mul(y, nodes.logits)?;
            g.sub(sp, yz)?
        }
        Task::Depth => {
            let d = g.sub(nodes.output, y)?;
            g.square(d)?
        }
    };
    let weighted = g.mul(per, w)?;
    let loss = g.sum(weighted, None)?;
    g.output("loss", loss);
    let names: Vec<String> = model.param_names().map(str::to_string).collect();

    let mut opt = Adam::new(
        cfg.lr
            .unwrap_or_else(|| model.spec().architecture.pretrain_lr()),
    );
    let mut metrics = evaluate(&model, &held, cfg, 0)?;
    let mut step = 0;
    while step < cfg.steps && metrics.status != TrainStatus::Trained {
        let ex = labeled(&model, scenes, step, grid)?;
        let mut b: Bindings = names
            .iter()
            .zip(model.params())
            .map(|(n, p)| (n.clone(), (**p).clone()))
            .collect();
        b.insert("image".into(), ex.image);
        b.insert("target".into(), ex.target);
        b.insert("weight".into(), ex.weight);
        g.forward(&b)?;
        let grads = g.backward(loss, &Tensor::scalar(1.0))?;
        let grads: Vec<&Tensor> = names.iter().map(|n| &grads[n]).collect();
        let mut params: Vec<Tensor> = model.params().iter().map(|p| (**p).clone()).collect();
        opt.step(&mut params, &grads);
        model.set_params(params)?;
        step += 1;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            metrics = evaluate(&model, &held, cfg, step)?;
        }
    }
    if cfg.steps == 0 {
        metrics.status = TrainStatus::Undertrained;
    }
    Ok((model, metrics))
}

fn evaluate(
    model: &Model,
    held: &[Labeled],
    cfg: &PretrainConfig,
    steps: usize,
) -> Result<PretrainMetrics> {
    let (mut tsum, mut tn, mut bsum, mut bn) = (0.0, 0usize, 0.0, 0usize);
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut err, mut en) = (0.0, 0usize);
    for ex in held {
        let mut g = Graph::new();
        let x = g.constant(ex.image.clone());
        let nodes = model.forward(&mut g, x, ParamMode::Frozen)?;
        g.output("out", nodes.output);
        g.forward_defaults()?;
        let out = g.value(nodes.output);
        for (i, (&o, &p)) in out.data().iter().zip(&ex.positive).enumerate() {
            if p {
                tsum += o;
                tn += 1;
            } else {
                bsum += o;
                bn += 1;
            }
            match model.task() {
                Task::Segmentation => {
                    let pred = o > 0.5;
                    inter += usize::from(pred && p);
                    union += usize::from(pred || p);
                }
                Task::Depth if p => {
                    let truth = ex.sample.depth.data()[i];
                    err += (o - truth).abs() / truth;
                    en += 1;
                }
                _ => {}
            }
        }
    }
    let target_mean = tsum / tn.max(1) as f64;
    let background_mean = bsum / bn.max(1) as f64;
    let (mask_iou, depth_error, ok) = match model.task() {
        Task::Detection => (
            None,
            None,
            target_mean >= cfg.target_threshold && background_mean <= cfg.background_threshold,
        ),
        Task::Segmentation => {
            let iou = inter as f64 / union.max(1) as f64;
            let ok = target_mean >= cfg.target_threshold
                && background_mean <= cfg.background_threshold
                && iou >= cfg.iou_threshold;
            (Some(iou), None, ok)
        }
        Task::Depth => {
            let e = err / en.max(1) as f64;
            (None, Some(e), e <= cfg.depth_threshold)
        }
    };
    Ok(PretrainMetrics {
        status: if ok {
            TrainStatus::Trained
        } else {
            TrainStatus::Undertrained
        },
        steps,
        target_mean,
        background_mean,
        mask_iou,
        depth_error,
    })
}
