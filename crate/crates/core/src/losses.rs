//! Attack objectives. Each loss has a graph builder (for gradients) and a
//! numeric wrapper that evaluates the same graph.

pub use crate::bbox::iou;

use crate::bbox::BBox;
use crate::error::{invalid, Result};
use crate::graph::{Graph, NodeId};
use crate::surrogates::DetectionSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Guard added to denominators and inside the variance square root.
pub const EPS: f64 = 1e-8;
/// Keeps the smoothness term differentiable where neighbours are equal.
pub const SMOOTH_DELTA: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub detection: f64,
    pub feature: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            detection: 1.0,
            feature: 1.0,
            smooth: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.detection, self.feature, self.smooth]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Indices of boxes whose IoU with `gt` exceeds `tau`.
pub fn hazardous(boxes: &[BBox], gt: &BBox, tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("tau {tau} outside (0, 1)")));
    }
    let mut out = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if iou(b, gt)? > tau {
            out.push(i);
        }
    }
    Ok(out)
}

/// `(logsumexp(conf[H]))^2` over the hazardous indices, or `None` when there are none.
pub fn detection_loss_node(
    g: &mut Graph,
    conf: NodeId,
    hazardous: &[usize],
) -> Result<Option<NodeId>> {
    if hazardous.is_empty() {
        return Ok(None);
    }
    let sel = g.masked_select(conf, hazardous.to_vec())?;
    let lse = g.logsumexp(sel)?;
    Ok(Some(g.square(lse)?))
}

pub fn detection_loss(dets: &DetectionSet, gt: &BBox, tau: f64) -> Result<f64> {
    let boxes: Vec<BBox> = dets.detections.iter().map(|d| d.bbox).collect();
    let h = hazardous(&boxes, gt, tau)?;
    let conf = Tensor::vector(dets.detections.iter().map(|d| d.confidence).collect());
    let mut g = Graph::new();
    let c = g.constant(conf);
    match detection_loss_node(&mut g, c, &h)? {
        Some(l) => eval_scalar(g, l),
        None => Ok(0.0),
    }
}

/// Nearest-neighbour resampling of an `(H, W)` mask to `(h, w)`.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Tensor {
    let (mh, mw) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = (((i as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
        for j in 0..w {
            let sj = (((j as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
            out.push(mask.data()[si * mw + sj]);
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// Masked mean suppression plus variance flattening, averaged over the
/// layers whose downsampled mask is not empty. Features are `(C, h, w)`.
pub fn feature_loss_node(g: &mut Graph, features: &[NodeId], mask: &Tensor) -> Result<NodeId> {
    if mask.rank() != 2 {
        return Err(invalid(format!(
            "mask must be (H, W), got {:?}",
            mask.shape()
        )));
    }
    let mut terms = Vec::new();
    for &f in features {
        let s = g.shape(f).to_vec();
        if s.len() != 3 {
            return Err(invalid(format!(
                "feature maps must be (C, h, w), got {s:?}"
            )));
        }
        let m = downsample_mask(mask, s[1], s[2]);
        let total = m.sum() * s[0] as f64;
        if total <= 0.0 {
            continue;
        }
        let mc = g.constant(m.reshaped(&[1, s[1], s[2]])?);
        let fm = g.mul(f, mc)?;
        let sum = g.sum(fm, None)?;
        let mu = g.scale(sum, 1.0 / total)?;
        let dev = g.sub(f, mu)?;
        let sq = g.square(dev)?;
        let msq = g.mul(sq, mc)?;
        let vsum = g.sum(msq, None)?;
        let var = g.scale(vsum, 1.0 / total)?;
        let var = g.add_scalar(var, EPS)?;
        let sd = g.sqrt(var)?;
        let mu2 = g.square(mu)?;
        let inner = g.add(mu2, sd)?;
        let inner = g.add_scalar(inner, 1.0)?;
        terms.push(g.log(inner)?);
    }
    let n = terms.len();
    let first = *terms
        .first()
        .ok_or_else(|| invalid("target mask is empty on every feature layer"))?;
    let mut acc = first;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / n as f64)
}

pub fn feature_loss(features: &[Tensor], mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = features.iter().map(|f| g.constant(f.clone())).collect();
    let l = feature_loss_node(&mut g, &nodes, mask)?;
    eval_scalar(g, l)
}

/// Softened total variation of an `(H, W, C)` texture over `i < H-1, j < W-1`.
pub fn smooth_loss_node(g: &mut Graph, texture: NodeId) -> Result<NodeId> {
    let s = g.shape(texture).to_vec();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
        return Err(invalid(format!(
            "texture must be (H, W, C) with H, W >= 2, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let top = g.slice(texture, 0, 0, h - 1)?;
    let bottom = g.slice(texture, 0, 1, h)?;
    let base = g.slice(top, 1, 0, w - 1)?;
    let below = g.slice(bottom, 1, 0, w - 1)?;
    let right = g.slice(top, 1, 1, w)?;
    let dy = g.sub(below, base)?;
    let dx = g.sub(right, base)?;
    let dy2 = g.square(dy)?;
    let dx2 = g.square(dx)?;
    let s2 = g.add(dy2, dx2)?;
    let s2 = g.add_scalar(s2, SMOOTH_DELTA)?;
    let r = g.sqrt(s2)?;
    g.sum(r, None)
}

pub fn smooth_loss(texture: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(texture.clone());
    let l = smooth_loss_node(&mut g, t)?;
    eval_scalar(g, l)
}

fn check_map(map: &[usize], mask: &Tensor) -> Result<()> {
    if map != mask.shape() || map.len() != 2 {
        return Err(invalid(format!(
            "map {map:?} and mask {:?} must be equal (H, W) shapes",
            mask.shape()
        )));
    }
    Ok(())
}

/// `sum(P * m) / (sum(m) + EPS)`.
pub fn segmentation_loss_node(g: &mut Graph, prob: NodeId, mask: &Tensor) -> Result<NodeId> {
    check_map(g.shape(prob), mask)?;
    let m = g.constant(mask.clone());
    let pm = g.mul(prob, m)?;
    let s = g.sum(pm, None)?;
    g.scale(s, 1.0 / (mask.sum() + EPS))
}

pub fn segmentation_loss(prob: &Tensor, mask: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(prob.clone());
    let l = segmentation_loss_node(&mut g, p, mask)?;
    eval_scalar(g, l)
}

/// `sum(m / (D + EPS)) / (sum(m) + EPS)`. Positivity of the depth is the caller's contract.
pub fn depth_loss_node(g: &mut Graph, depth: NodeId, mask: &Tensor) -> Result<NodeId> {
    check_map(g.shape(depth), mask)?;
    let m = g.constant(mask.clone());
    let d = g.add_scalar(depth, EPS)?;
    let inv = g.div(m, d)?;
    let s = g.sum(inv, None)?;
    g.scale(s, 1.0 / (mask.sum() + EPS))
}

pub fn depth_loss(depth: &Tensor, mask: &Tensor) -> Result<f64> {
    if depth.data().iter().any(|&d| !(d > 0.0)) {
        return Err(invalid("depth must be strictly positive"));
    }
    let mut g = Graph::new();
    let d = g.constant(depth.clone());
    let l = depth_loss_node(&mut g, d, mask)?;
    eval_scalar(g, l)
}

fn eval_scalar(mut g: Graph, node: NodeId) -> Result<f64> {
    g.output("loss", node);
    Ok(g.forward_defaults()?["loss"].item())
}

/// Loss values of one model for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLoss {
    pub name: String,
    /// Detection, segmentation or depth loss depending on the model.
    pub task: f64,
    /// `None` for depth models, which have no feature term.
    pub feature: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub models: Vec<ModelLoss>,
    /// Raw smoothness of the texture (before normalization and weighting).
    pub smooth: f64,
}
