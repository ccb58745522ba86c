//! Small heterogeneous detectors, a segmenter and a depth estimator.

mod arch;
mod pretrain;

pub use arch::{ModelNodes, ParamMode};
pub use pretrain::{pretrain, PretrainConfig, PretrainMetrics, TrainStatus};

use crate::bbox::BBox;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use arch::{Hyper, Init, ParamSlot};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

/// Side of the fixed detection box centered on each cell, as a fraction of the image.
pub const ANCHOR_SIZE: f64 = 0.3125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Three stride-2 5x5 conv+ReLU layers and a 1x1 head.
    #[serde(rename = "conv-a")]
    ConvA,
    /// Like conv-a with dilated 3x3 kernels.
    #[serde(rename = "conv-c")]
    ConvC,
    #[serde(rename = "attn-b")]
    AttnB,
    #[serde(rename = "seg")]
    Seg,
    #[serde(rename = "depth")]
    Depth,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Self::ConvA,
        Self::ConvC,
        Self::AttnB,
        Self::Seg,
        Self::Depth,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::ConvA => "conv-a",
            Self::ConvC => "conv-c",
            Self::AttnB => "attn-b",
            Self::Seg => "seg",
            Self::Depth => "depth",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Self::ConvA | Self::ConvC | Self::AttnB => Task::Detection,
            Self::Seg => Task::Segmentation,
            Self::Depth => Task::Depth,
        }
    }

    /// Pretraining step size that converges within the default budget.
    pub fn pretrain_lr(self) -> f64 {
        match self {
            Self::ConvA | Self::ConvC | Self::AttnB => 3e-3,
            Self::Seg => 5e-3,
            Self::Depth => 1e-3,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| invalid(format!("unknown architecture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Detection,
    Segmentation,
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Display name; defaults to `<architecture>-<seed>`.
    #[serde(default)]
    pub name: String,
    pub architecture: Architecture,
    pub seed: u64,
    /// Trunk widths, overriding the architecture default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Patch edge of the attention model's embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        Self {
            name: String::new(),
            architecture,
            seed,
            channels: None,
            kernel: None,
            patch: None,
        }
    }

    pub fn display_name(&self) -> String {
        if self.name.is_empty() {
            format!("{}-{}", self.architecture, self.seed)
        } else {
            self.name.clone()
        }
    }
}

/// A surrogate with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    hyper: Hyper,
    slots: Vec<ParamSlot>,
    params: Vec<Arc<Tensor>>,
}

/// Builds a model with seeded He-style initialization.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    let hyper = Hyper::resolve(spec)?;
    let slots = arch::layout(spec.architecture, &hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = slots
        .iter()
        .map(|s| {
            let n = s.shape.iter().product();
            let data = match s.init {
                Init::Zero => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal { gain, fan_in } => {
                    let dist =
                        Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            Arc::new(Tensor::from_parts(s.shape.clone(), data))
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        hyper,
        slots,
        params,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> String {
        self.spec.display_name()
    }

    pub fn task(&self) -> Task {
        self.spec.architecture.task()
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.slots.len()
            || params
                .iter()
                .zip(&self.slots)
                .any(|(p, s)| p.shape() != s.shape.as_slice())
        {
            return Err(invalid(format!(
                "parameter list does not match {}",
                self.name()
            )));
        }
        self.params = params.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// All parameters concatenated in layout order.
    pub fn flat_params(&self) -> Tensor {
        let data: Vec<f64> = self
            .params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        Tensor::vector(data)
    }

    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.rank() != 1 || flat.len() != self.param_count() {
            return Err(Error::Format(format!(
                "{} expects {} weights, file holds {:?}",
                self.name(),
                self.param_count(),
                flat.shape()
            )));
        }
        let mut off = 0;
        let mut params = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let n: usize = s.shape.iter().product();
            params.push(Tensor::from_parts(
                s.shape.clone(),
                flat.data()[off..off + n].to_vec(),
            ));
            off += n;
        }
        self.set_params(params)
    }

    /// Adds the model applied to an `(H, W, 3)` image node.
    pub fn forward(
        &self,
        g: &mut Graph,
        image: crate::graph::NodeId,
        mode: ParamMode,
    ) -> Result<ModelNodes> {
        let mut b = arch::Builder::new(g, &self.params, &self.slots, mode);
        arch::build(&mut b, self.spec.architecture, &self.hyper, image)
    }

    fn run(&self, image: &Tensor) -> Result<(Tensor, Vec<Tensor>, (usize, usize))> {
        check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let nodes = self.forward(&mut g, x, ParamMode::Frozen)?;
        g.output("out", nodes.output);
        g.forward_defaults()?;
        let feats = nodes.features.iter().map(|&f| g.value(f).clone()).collect();
        Ok((g.value(nodes.output).clone(), feats, nodes.grid))
    }

    fn expect(&self, task: Task) -> Result<()> {
        if self.task() != task {
            return Err(invalid(format!("{} is not a {task:?} model", self.name())));
        }
        Ok(())
    }
}

pub(crate) fn check_image(image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(invalid(format!("image must be (H, W, 3), got {s:?}")));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("image values must lie in [0, 1]"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// The grid cell this detection belongs to; cells tile the frame.
    pub cell: BBox,
    /// Fixed-size box centered on the cell, matched against ground truth.
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    /// Post-activation trunk tensors, each `(C, h, w)`.
    pub features: Vec<Tensor>,
    pub grid: (usize, usize),
}

/// Cell extents and detection boxes of a `rows x cols` grid, row-major.
pub fn grid_boxes(rows: usize, cols: usize) -> Vec<(BBox, BBox)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cell = BBox {
                x1: c as f64 / cols as f64,
                y1: r as f64 / rows as f64,
                x2: (c + 1) as f64 / cols as f64,
                y2: (r + 1) as f64 / rows as f64,
            };
            let (cx, cy) = cell.center();
            let half = ANCHOR_SIZE / 2.0;
            let bbox = BBox {
                x1: (cx - half).max(0.0),
                y1: (cy - half).max(0.0),
                x2: (cx + half).min(1.0),
                y2: (cy + half).min(1.0),
            };
            out.push((cell, bbox));
        }
    }
    out
}

pub fn detect(model: &Model, image: &Tensor) -> Result<DetectionSet> {
    model.expect(Task::Detection)?;
    let (conf, features, grid) = model.run(image)?;
    let detections = grid_boxes(grid.0, grid.1)
        .into_iter()
        .zip(conf.data())
        .map(|((cell, bbox), &confidence)| Detection {
            cell,
            bbox,
            confidence,
        })
        .collect();
    Ok(DetectionSet {
        detections,
        features,
        grid,
    })
}

/// Per-pixel target probability `(H, W)`.
pub fn segment(model: &Model, image: &Tensor) -> Result<Tensor> {
    model.expect(Task::Segmentation)?;
    Ok(model.run(image)?.0)
}

/// Per-pixel positive depth `(H, W)`.
pub fn estimate_depth(model: &Model, image: &Tensor) -> Result<Tensor> {
    model.expect(Task::Depth)?;
    Ok(model.run(image)?.0)
}
