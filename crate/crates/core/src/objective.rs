//! The attack graph for one view: texture, optional dropout, rendering,
//! every surrogate and its losses.

use crate::error::{invalid, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::losses::{
    depth_loss_node, detection_loss_node, feature_loss_node, hazardous, segmentation_loss_node,
    smooth_loss_node, LossWeights,
};
use crate::render::composite;
use crate::scene::View;
use crate::surrogates::{grid_boxes, Model, ParamMode, Task};
use crate::tensor::Tensor;

/// Gray level that dropped texels render as.
pub const DROPOUT_FILL: f64 = 0.5;
const TEXTURE: &str = "texture";

#[derive(Clone, Debug)]
pub struct ModelTerms {
    /// Raw model output: confidences, probabilities or depths.
    pub output: NodeId,
    /// `None` for a detector without hazardous boxes in this view.
    pub task: Option<NodeId>,
    pub feature: Option<NodeId>,
    pub total: NodeId,
    /// Flat output indices of the hazardous boxes (detectors only).
    pub hazardous: Vec<usize>,
}

/// Loss values after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLosses {
    pub task: Vec<f64>,
    pub feature: Vec<Option<f64>>,
    pub total: Vec<f64>,
    pub smooth: f64,
}

pub struct ViewObjective {
    graph: Graph,
    texture_shape: Vec<usize>,
    pub image: NodeId,
    pub smooth: NodeId,
    pub models: Vec<ModelTerms>,
}

impl ViewObjective {
    /// `dropout` is a per-texel `(H, W)` keep mask; dropped texels render as [`DROPOUT_FILL`].
    pub fn build(
        models: &[&Model],
        view: &View,
        texture_shape: &[usize],
        dropout: Option<&Tensor>,
        weights: &LossWeights,
        tau: f64,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let t = g.input(TEXTURE, texture_shape);
        let rendered_texture = match dropout {
            None => t,
            Some(m) => {
                let (h, w) = (texture_shape[0], texture_shape[1]);
                if m.shape() != [h, w] {
                    return Err(invalid(format!(
                        "dropout mask {:?} does not match texture {h}x{w}",
                        m.shape()
                    )));
                }
                let keep = g.constant(m.clone().reshaped(&[h, w, 1])?);
                let fill = g.constant(m.map(|k| (1.0 - k) * DROPOUT_FILL).reshaped(&[h, w, 1])?);
                let kept = g.mul(t, keep)?;
                g.add(kept, fill)?
            }
        };
        let shaded = view.raster.shade(&mut g, rendered_texture)?;
        let image = composite(
            &mut g,
            shaded,
            &view.sample.background,
            &view.sample.target_mask,
        )?;
        let smooth = smooth_loss_node(&mut g, t)?;
        let texels = (texture_shape[0] * texture_shape[1]) as f64;
        let smooth_term = g.scale(smooth, weights.smooth / texels)?;
        let mask = &view.sample.target_mask;

        let mut terms = Vec::with_capacity(models.len());
        for model in models {
            let nodes = model.forward(&mut g, image, ParamMode::Frozen)?;
            let mut haz = Vec::new();
            let (task, feature) = match model.task() {
                Task::Detection => {
                    let boxes: Vec<_> = grid_boxes(nodes.grid.0, nodes.grid.1)
                        .into_iter()
                        .map(|(_, b)| b)
                        .collect();
                    haz = hazardous(&boxes, &view.sample.gt_box, tau)?;
                    let task = detection_loss_node(&mut g, nodes.output, &haz)?;
                    (
                        task,
                        Some(feature_loss_node(&mut g, &nodes.features, mask)?),
                    )
                }
                Task::Segmentation => (
                    Some(segmentation_loss_node(&mut g, nodes.output, mask)?),
                    Some(feature_loss_node(&mut g, &nodes.features, mask)?),
                ),
                Task::Depth => (Some(depth_loss_node(&mut g, nodes.output, mask)?), None),
            };
            let mut parts = vec![smooth_term];
            if let Some(l) = task {
                parts.push(g.scale(l, weights.detection)?);
            }
            if let Some(l) = feature {
                parts.push(g.scale(l, weights.feature)?);
            }
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = g.add(total, p)?;
            }
            terms.push(ModelTerms {
                output: nodes.output,
                task,
                feature,
                total,
                hazardous: haz,
            });
        }
        Ok(Self {
            graph: g,
            texture_shape: texture_shape.to_vec(),
            image,
            smooth,
            models: terms,
        })
    }

    pub fn forward(&mut self, texture: &Tensor) -> Result<ViewLosses> {
        if texture.shape() != self.texture_shape.as_slice() {
            return Err(invalid(format!(
                "texture {:?} does not match {:?}",
                texture.shape(),
                self.texture_shape
            )));
        }
        let mut b = Bindings::new();
        b.insert(TEXTURE.into(), texture.clone());
        self.graph.forward(&b)?;
        let g = &self.graph;
        let value = |n: Option<NodeId>| n.map(|n| g.value(n).item());
        Ok(ViewLosses {
            task: self
                .models
                .iter()
                .map(|m| value(m.task).unwrap_or(0.0))
                .collect(),
            feature: self.models.iter().map(|m| value(m.feature)).collect(),
            total: self
                .models
                .iter()
                .map(|m| g.value(m.total).item())
                .collect(),
            smooth: g.value(self.smooth).item(),
        })
    }

    /// Gradient of a scalar node with respect to the texture. Requires a prior [`forward`](Self::forward).
    pub fn texture_gradient(&mut self, node: NodeId) -> Result<Tensor> {
        let mut grads = self.graph.backward(node, &Tensor::scalar(1.0))?;
        Ok(grads.remove(TEXTURE).expect("texture input"))
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        self.graph.value(node)
    }

    /// Max confidence over hazardous boxes of detector `k`, 0 when there are none.
    pub fn target_confidence(&self, k: usize) -> f64 {
        let m = &self.models[k];
        let out = self.graph.value(m.output);
        m.hazardous
            .iter()
            .map(|&i| out.data()[i])
            .fold(0.0, f64::max)
    }
}
