//! The attack loop: dropout, rendering, per-model gradients, fusion, gating
//! and the texture update. Also held-out evaluation (ASR and AP).

use crate::error::{invalid, Result};
use crate::fusion::{
    fuse, task_weights, uniform_weights, FusionStrategy, GradientSet, DEFAULT_EIG_FLOOR,
};
use crate::losses::{iou, LossReport, LossWeights, ModelLoss, DEFAULT_TAU};
use crate::objective::ViewObjective;
use crate::optim::Adam;
use crate::scene::{SceneGenerator, View};
use crate::surrogates::{grid_boxes, Model, Task};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Evaluation views are drawn from indices far above any training index.
pub const EVAL_VIEW_BASE: usize = 1 << 32;
/// A view counts as an attack success when the target confidence is below this.
pub const SUCCESS_CONFIDENCE: f64 = 0.5;
const INIT_SALT: u64 = 0x1417;
const DROPOUT_SALT: u64 = 0xd20f;
const SHUFFLE_SALT: u64 = 0x5bff;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain projected gradient descent.
    Gd,
    /// Adam with the gate applied to the update itself.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub train_views: usize,
    pub eval_views: usize,
    pub batch_size: usize,
    /// Defaults to one pass over the training views.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Dropout probability; 0 disables dropout.
    pub std_p: f64,
    pub std_block: usize,
    pub vtg: bool,
    /// Fusion patch edge; `None` fuses the whole texture as one patch.
    pub patch: Option<usize>,
    pub eig_floor: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub fusion: FusionStrategy,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            train_views: 200,
            eval_views: 60,
            batch_size: 1,
            steps_per_epoch: None,
            lr: 0.01,
            optimizer: Optimizer::Adam,
            std_p: 0.1,
            std_block: 8,
            vtg: true,
            patch: Some(16),
            eig_floor: DEFAULT_EIG_FLOOR,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            fusion: FusionStrategy::Oga,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(invalid(msg.to_string()));
        if self.train_views == 0 || self.eval_views == 0 {
            return fail("train_views and eval_views must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("lr must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.std_p) {
            return fail("std_p must lie in [0, 1]");
        }
        if self.std_block == 0 {
            return fail("std_block must be positive");
        }
        if self.patch == Some(0) {
            return fail("patch must be positive");
        }
        if !(self.eig_floor >= 0.0) {
            return fail("eig_floor must be nonnegative");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail("tau must lie in (0, 1)");
        }
        self.weights.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| self.train_views.div_ceil(self.batch_size))
    }
}

/// One row of the attack history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch means before the update.
    pub losses: LossReport,
    pub grad_norm: f64,
    pub omega: Vec<f64>,
    /// No texel received a gradient this step.
    pub stalled: bool,
}

#[derive(Clone, Debug)]
pub struct AttackState {
    pub texture: Tensor,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<StepRecord>,
    adam: Option<Adam>,
}

impl AttackState {
    pub fn new(texture: Tensor, seed: u64) -> Self {
        Self {
            texture,
            step: 0,
            epoch: 0,
            seed,
            history: Vec::new(),
            adam: None,
        }
    }
}

/// Seeded uniform noise in `[0.25, 0.75)`.
pub fn init_texture(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.25..0.75)).collect(),
    )
    .expect("sized")
}

/// Per-texel keep mask `(H, W)`: blocks of edge `block` on a randomly offset
/// grid are dropped (set to 0) independently with probability `p`.
pub fn std_mask(h: usize, w: usize, p: f64, block: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    if block == 0 {
        return Err(invalid("dropout block must be positive"));
    }
    let (oy, ox) = (rng.random_range(0..block), rng.random_range(0..block));
    let (by, bx) = ((h + oy).div_ceil(block), (w + ox).div_ceil(block));
    let keep: Vec<bool> = (0..by * bx).map(|_| rng.random::<f64>() >= p).collect();
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let b = ((i + oy) / block) * bx + (j + ox) / block;
            data.push(if keep[b] { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(vec![h, w], data)
}

/// Zeroes the gradient of texels whose visibility is 0. `visibility` is `(H, W)`.
pub fn apply_vtg(grad: &Tensor, visibility: &Tensor) -> Result<Tensor> {
    let s = grad.shape();
    if s.len() != 3 || visibility.shape() != &s[..2] {
        return Err(invalid(format!(
            "visibility {:?} does not match gradient {:?}",
            visibility.shape(),
            s
        )));
    }
    let c = s[2];
    let mut out = grad.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if visibility.data()[k / c] == 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Union of texel visibility over views.
pub fn union_visibility(views: &[&View]) -> Tensor {
    let mut acc = views[0].raster.texel_visibility().clone();
    for v in &views[1..] {
        acc = acc
            .zip_map(v.raster.texel_visibility(), f64::max)
            .expect("same atlas");
    }
    acc
}

struct ViewResult {
    task: Vec<f64>,
    feature: Vec<Option<f64>>,
    total: Vec<f64>,
    smooth: f64,
    grads: Vec<Tensor>,
}

fn view_gradients(
    models: &[&Model],
    view: &View,
    texture: &Tensor,
    dropout: Option<&Tensor>,
    cfg: &AttackConfig,
) -> Result<ViewResult> {
    let mut obj = ViewObjective::build(
        models,
        view,
        texture.shape(),
        dropout,
        &cfg.weights,
        cfg.tau,
    )?;
    let l = obj.forward(texture)?;
    let totals: Vec<_> = obj.models.iter().map(|m| m.total).collect();
    let grads = totals
        .into_iter()
        .map(|n| obj.texture_gradient(n))
        .collect::<Result<_>>()?;
    Ok(ViewResult {
        task: l.task,
        feature: l.feature,
        total: l.total,
        smooth: l.smooth,
        grads,
    })
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// One update on a minibatch of views: dropout, render, per-model gradients,
/// fusion, visibility gating and a clamped descent step.
pub fn attack_step(
    state: &mut AttackState,
    views: &[&View],
    models: &[Model],
    cfg: &AttackConfig,
) -> Result<()> {
    if views.is_empty() {
        return Err(invalid("attack step needs at least one view"));
    }
    if models.is_empty() {
        return Err(invalid("attack step needs at least one model"));
    }
    let shape = state.texture.shape().to_vec();
    let dropout = if cfg.std_p > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ DROPOUT_SALT);
        rng.set_stream(state.step as u64);
        Some(std_mask(
            shape[0],
            shape[1],
            cfg.std_p,
            cfg.std_block,
            &mut rng,
        )?)
    } else {
        None
    };
    let refs: Vec<&Model> = models.iter().collect();
    let results: Vec<ViewResult> = views
        .par_iter()
        .map(|v| view_gradients(&refs, v, &state.texture, dropout.as_ref(), cfg))
        .collect::<Result<_>>()?;

    let nv = views.len();
    let nm = models.len();
    let mut grads = Vec::with_capacity(nm);
    for k in 0..nm {
        let mut g = Tensor::zeros(&shape);
        for r in &results {
            g.add_assign(&r.grads[k]);
        }
        grads.push(g.scale(1.0 / nv as f64));
    }
    let losses = LossReport {
        models: (0..nm)
            .map(|k| ModelLoss {
                name: models[k].name(),
                task: mean(results.iter().map(|r| r.task[k]), nv),
                feature: results[0].feature[k]
                    .map(|_| mean(results.iter().map(|r| r.feature[k].unwrap_or(0.0)), nv)),
                total: mean(results.iter().map(|r| r.total[k]), nv),
            })
            .collect(),
        smooth: mean(results.iter().map(|r| r.smooth), nv),
    };
    let totals: Vec<f64> = losses.models.iter().map(|m| m.total).collect();
    let omega = match cfg.fusion {
        FusionStrategy::Oga => task_weights(&totals)?,
        _ => uniform_weights(nm),
    };
    let fused = fuse(
        cfg.fusion,
        &GradientSet::new(grads)?,
        &totals,
        cfg.patch,
        cfg.eig_floor,
    )?;
    let visibility = cfg.vtg.then(|| union_visibility(views));
    let gated = match &visibility {
        Some(v) => apply_vtg(&fused, v)?,
        None => fused,
    };
    let grad_norm = gated.norm();
    let stalled = gated.max_abs() == 0.0;

    let update = match cfg.optimizer {
        Optimizer::Gd => gated.scale(cfg.lr),
        Optimizer::Adam => {
            let adam = state.adam.get_or_insert_with(|| Adam::new(cfg.lr));
            let d = adam.direction(&[&gated]).remove(0);
            match &visibility {
                Some(v) => apply_vtg(&d, v)?,
                None => d,
            }
        }
    };
    if !stalled {
        state.texture = state
            .texture
            .zip_map(&update, |t, u| (t - u).clamp(0.0, 1.0))?;
    }
    state.history.push(StepRecord {
        step: state.step,
        epoch: state.epoch,
        losses,
        grad_norm,
        omega,
        stalled,
    });
    state.step += 1;
    Ok(())
}

/// Runs every epoch of the attack from a seeded noise texture. `on_step` sees
/// the state after each update.
pub fn run_attack(
    models: &[Model],
    scenes: &SceneGenerator,
    cfg: &AttackConfig,
    seed: u64,
    mut on_step: impl FnMut(&AttackState) -> Result<()>,
) -> Result<AttackState> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(invalid("no surrogate models"));
    }
    let mut state = AttackState::new(init_texture(scenes.mesh().texture_shape(), seed), seed);
    let steps = cfg.steps_per_epoch();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..cfg.train_views).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for s in 0..steps {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|i| order[(s * cfg.batch_size + i) % order.len()])
                .collect();
            let views = scenes.views(batch)?;
            let refs: Vec<&View> = views.iter().collect();
            attack_step(&mut state, &refs, models, cfg)?;
            on_step(&state)?;
        }
    }
    Ok(state)
}

/// Held-out view indices for a generator.
pub fn eval_indices(n: usize) -> std::ops::Range<usize> {
    EVAL_VIEW_BASE..EVAL_VIEW_BASE + n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub name: String,
    pub task: Task,
    /// Mean task loss over the views (detection, segmentation or depth).
    pub task_loss: f64,
    /// Per-view target confidence (detectors only).
    pub confidences: Vec<f64>,
    pub asr: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub models: Vec<ModelEval>,
    /// Mean ASR over the detectors, if any.
    pub ensemble_asr: Option<f64>,
    pub views: usize,
}

/// Fraction of confidences below [`SUCCESS_CONFIDENCE`].
pub fn attack_success_rate(confidences: &[f64]) -> f64 {
    let hits = confidences
        .iter()
        .filter(|&&c| c < SUCCESS_CONFIDENCE)
        .count();
    hits as f64 / confidences.len().max(1) as f64
}

/// 11-point interpolated AP of scored detections (`true` = matched a GT box)
/// against `positives` ground-truth boxes.
pub fn average_precision(scored: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut s = scored.to_vec();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::with_capacity(s.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in s.iter().enumerate() {
        tp += usize::from(hit);
        curve.push((tp as f64 / positives as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// ASR and AP of `texture` on `views` for every model.
pub fn evaluate(
    texture: &Tensor,
    models: &[Model],
    views: &[View],
    tau: f64,
) -> Result<EvalResult> {
    if views.is_empty() {
        return Err(invalid("evaluation needs at least one view"));
    }
    let refs: Vec<&Model> = models.iter().collect();
    let weights = LossWeights::default();
    let per_view: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<(f64, bool)>>)> = views
        .par_iter()
        .map(|v| {
            let mut obj = ViewObjective::build(&refs, v, texture.shape(), None, &weights, tau)?;
            let l = obj.forward(texture)?;
            let mut conf = Vec::with_capacity(models.len());
            let mut scored = Vec::with_capacity(models.len());
            for (k, m) in models.iter().enumerate() {
                if m.task() != Task::Detection {
                    conf.push(0.0);
                    scored.push(Vec::new());
                    continue;
                }
                conf.push(obj.target_confidence(k));
                let out = obj.value(obj.models[k].output).data().to_vec();
                let grid = m_grid(&obj, k, out.len());
                let boxes = grid_boxes(grid.0, grid.1);
                // The most confident box over the IoU threshold claims the single GT.
                let mut s: Vec<(f64, bool)> = out.iter().map(|&c| (c, false)).collect();
                let mut best: Option<usize> = None;
                for (i, (_, b)) in boxes.iter().enumerate() {
                    if iou(b, &v.sample.gt_box)? > tau && best.is_none_or(|j| out[i] > out[j]) {
                        best = Some(i);
                    }
                }
                if let Some(i) = best {
                    s[i].1 = true;
                }
                scored.push(s);
            }
            Ok((l.task, conf, scored))
        })
        .collect::<Result<_>>()?;

    let n = views.len();
    let mut evals = Vec::with_capacity(models.len());
    for (k, m) in models.iter().enumerate() {
        let task_loss = mean(per_view.iter().map(|p| p.0[k]), n);
        if m.task() == Task::Detection {
            let confidences: Vec<f64> = per_view.iter().map(|p| p.1[k]).collect();
            let scored: Vec<(f64, bool)> = per_view
                .iter()
                .flat_map(|p| p.2[k].iter().copied())
                .collect();
            evals.push(ModelEval {
                name: m.name(),
                task: m.task(),
                task_loss,
                asr: Some(attack_success_rate(&confidences)),
                ap: Some(average_precision(&scored, n)),
                confidences,
            });
        } else {
            evals.push(ModelEval {
                name: m.name(),
                task: m.task(),
                task_loss,
                confidences: Vec::new(),
                asr: None,
                ap: None,
            });
        }
    }
    let asrs: Vec<f64> = evals.iter().filter_map(|e| e.asr).collect();
    Ok(EvalResult {
        ensemble_asr: (!asrs.is_empty()).then(|| asrs.iter().sum::<f64>() / asrs.len() as f64),
        models: evals,
        views: n,
    })
}

fn m_grid(obj: &ViewObjective, k: usize, len: usize) -> (usize, usize) {
    let s = obj.value(obj.models[k].output).shape();
    match s {
        [r, c] => (*r, *c),
        _ => (1, len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_mask_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(std_mask(40, 60, 0.0, 8, &mut rng)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(std_mask(40, 60, 1.0, 8, &mut rng)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let draws = 100;
        let mut dropped = 0.0;
        for _ in 0..draws {
            let m = std_mask(316, 317, 0.3, 8, &mut rng).unwrap();
            dropped += 1.0 - m.sum() / m.len() as f64;
        }
        assert!((dropped / draws as f64 - 0.3).abs() < 0.01);
        assert!(std_mask(4, 4, 1.5, 2, &mut rng).is_err());
    }

    #[test]
    fn std_mask_is_blocky() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = std_mask(64, 64, 0.5, 8, &mut rng).unwrap();
        // Every row of every block agrees with its neighbour except on block edges.
        let changes: usize = (0..64)
            .map(|i| {
                (1..64)
                    .filter(|&j| m.at(&[i, j]) != m.at(&[i, j - 1]))
                    .count()
            })
            .sum();
        assert!(changes <= 64 * 8);
    }

    #[test]
    fn vtg_examples() {
        let g = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(apply_vtg(&g, &Tensor::full(&[2, 2], 1.0)).unwrap(), g);
        assert_eq!(
            apply_vtg(&g, &Tensor::zeros(&[2, 2])).unwrap(),
            Tensor::zeros(&[2, 2, 3])
        );
        let v = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = apply_vtg(&g, &v).unwrap();
        assert_eq!(out.data()[3..9], [0.0; 6]);
        assert_eq!(out.data()[9], 9.0);
        assert!(apply_vtg(&g, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn asr_examples() {
        assert_eq!(attack_success_rate(&[0.4; 5]), 1.0);
        assert_eq!(attack_success_rate(&[0.6; 5]), 0.0);
        assert_eq!(attack_success_rate(&[0.6, 0.4, 0.49, 0.51]), 0.5);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.8, false)], 2), 0.0);
        // One hit ranked second of two, one GT: precision 0.5 at every recall.
        assert!((average_precision(&[(0.9, false), (0.8, true)], 1) - 0.5).abs() < 1e-12);
        // Half the GTs found at precision 1.
        assert!((average_precision(&[(0.9, true)], 2) - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn init_texture_range_and_determinism() {
        let a = init_texture([8, 12, 3], 9);
        assert!(a.data().iter().all(|v| (0.25..0.75).contains(v)));
        assert_eq!(a, init_texture([8, 12, 3], 9));
        assert_ne!(a, init_texture([8, 12, 3], 10));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = [
            AttackConfig {
                tau: 1.0,
                ..Default::default()
            },
            AttackConfig {
                std_p: -0.1,
                ..Default::default()
            },
            AttackConfig {
                batch_size: 0,
                ..Default::default()
            },
            AttackConfig {
                patch: Some(0),
                ..Default::default()
            },
            AttackConfig {
                lr: f64::NAN,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!(AttackConfig::default().steps_per_epoch(), 200);
    }
}
