//! Parameter layouts and forward graphs of the surrogate architectures.

use super::{Architecture, ModelSpec};
use crate::error::{invalid, Result};
use crate::graph::{ConvParams, Graph, NodeId};
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zero,
    Const(f64),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Normal {
        gain: f64,
        fan_in: usize,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Resolved hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Hyper {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub patch: usize,
}

impl Hyper {
    pub fn resolve(spec: &ModelSpec) -> Result<Self> {
        let (channels, kernel, patch) = match spec.architecture {
            Architecture::ConvA => (vec![8, 16, 16], 5, 0),
            Architecture::ConvC => (vec![8, 16, 16], 3, 0),
            Architecture::AttnB => (vec![32], 0, 8),
            Architecture::Seg => (vec![8, 16], 5, 0),
            Architecture::Depth => (vec![8, 8], 5, 0),
        };
        let h = Self {
            channels: spec.channels.clone().unwrap_or(channels),
            kernel: spec.kernel.unwrap_or(kernel),
            patch: spec.patch.unwrap_or(patch),
        };
        let want_layers = match spec.architecture {
            Architecture::AttnB => 1,
            Architecture::Seg | Architecture::Depth => 2,
            _ => h.channels.len().max(1),
        };
        if h.channels.len() != want_layers || h.channels.contains(&0) {
            return Err(invalid(format!(
                "{} needs {want_layers} positive channel widths, got {:?}",
                spec.architecture, h.channels
            )));
        }
        let needs_kernel = spec.architecture != Architecture::AttnB;
        if needs_kernel && (h.kernel == 0 || h.kernel.is_multiple_of(2)) {
            return Err(invalid(format!("kernel size {} must be odd", h.kernel)));
        }
        if spec.architecture == Architecture::AttnB && h.patch == 0 {
            return Err(invalid("attention patch size must be positive"));
        }
        Ok(h)
    }
}

fn conv_slots(
    slots: &mut Vec<ParamSlot>,
    tag: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
    init_zero: bool,
) {
    let fan_in = cin * k * k;
    slots.push(ParamSlot {
        name: format!("{tag}.weight"),
        shape: vec![cout, cin, k, k],
        init: if init_zero {
            Init::Zero
        } else {
            Init::Normal { gain, fan_in }
        },
    });
    slots.push(ParamSlot {
        name: format!("{tag}.bias"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
/// softplus(DEPTH_BIAS) = 5.
const DEPTH_BIAS: f64 = 4.993_239_250_550_511;

/// Parameter layout. Output layers start at zero so fresh models are input-independent.
pub(crate) fn layout(arch: Architecture, h: &Hyper) -> Vec<ParamSlot> {
    let mut s = Vec::new();
    match arch {
        Architecture::ConvA | Architecture::ConvC => {
            let gain = if arch == Architecture::ConvA {
                RELU_GAIN
            } else {
                1.0
            };
            let mut cin = 3;
            for (i, &c) in h.channels.iter().enumerate() {
                conv_slots(&mut s, &format!("conv{i}"), cin, c, h.kernel, gain, false);
                cin = c;
            }
            conv_slots(&mut s, "head", cin, 1, 1, 1.0, true);
        }
        Architecture::AttnB => {
            let d = h.channels[0];
            conv_slots(&mut s, "embed", 3, d, h.patch, 1.0, false);
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                s.push(ParamSlot {
                    name: name.to_string(),
                    shape: vec![d, d],
                    init: Init::Normal {
                        gain: 1.0,
                        fan_in: d,
                    },
                });
            }
            s.push(ParamSlot {
                name: "head.w1".into(),
                shape: vec![d, d],
                init: Init::Normal {
                    gain: RELU_GAIN,
                    fan_in: d,
                },
            });
            s.push(ParamSlot {
                name: "head.b1".into(),
                shape: vec![1, d],
                init: Init::Zero,
            });
            s.push(ParamSlot {
                name: "head.w2".into(),
                shape: vec![d, 1],
                init: Init::Zero,
            });
            s.push(ParamSlot {
                name: "head.b2".into(),
                shape: vec![1, 1],
                init: Init::Zero,
            });
        }
        Architecture::Seg => {
            conv_slots(&mut s, "enc0", 3, h.channels[0], h.kernel, RELU_GAIN, false);
            conv_slots(
                &mut s,
                "enc1",
                h.channels[0],
                h.channels[1],
                h.kernel,
                RELU_GAIN,
                false,
            );
            conv_slots(&mut s, "dec", h.channels[1], 1, 3, 1.0, true);
        }
        Architecture::Depth => {
            conv_slots(
                &mut s,
                "conv0",
                3,
                h.channels[0],
                h.kernel,
                RELU_GAIN,
                false,
            );
            conv_slots(
                &mut s,
                "conv1",
                h.channels[0],
                h.channels[1],
                3,
                RELU_GAIN,
                false,
            );
            conv_slots(&mut s, "conv2", h.channels[1], 1, 3, 1.0, true);
            // Start near the middle of the depth range instead of softplus(0).
            let last = s.len() - 1;
            s[last].init = Init::Const(DEPTH_BIAS);
        }
    }
    s
}

/// Whether parameters enter the graph as constants or as differentiable inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Frozen,
    Trainable,
}

pub(crate) struct Builder<'a> {
    pub g: &'a mut Graph,
    params: &'a [Arc<Tensor>],
    slots: &'a [ParamSlot],
    mode: ParamMode,
    next: usize,
}

impl<'a> Builder<'a> {
    pub fn new(
        g: &'a mut Graph,
        params: &'a [Arc<Tensor>],
        slots: &'a [ParamSlot],
        mode: ParamMode,
    ) -> Self {
        Self {
            g,
            params,
            slots,
            mode,
            next: 0,
        }
    }

    fn param(&mut self) -> NodeId {
        let i = self.next;
        self.next += 1;
        match self.mode {
            ParamMode::Frozen => self.g.constant_shared(self.params[i].clone()),
            ParamMode::Trainable => self
                .g
                .variable(&self.slots[i].name, (*self.params[i]).clone()),
        }
    }

    fn conv(&mut self, x: NodeId, p: ConvParams) -> Result<NodeId> {
        let w = self.param();
        let b = self.param();
        self.g.conv2d(x, w, Some(b), p)
    }
}

/// Raw graph nodes of one model applied to an image.
#[derive(Clone, Debug)]
pub struct ModelNodes {
    /// Detector: `(cells,)` confidences. Segmenter: `(H, W)` probabilities. Depth: `(H, W)` depth.
    pub output: NodeId,
    /// Pre-activation of `output`.
    pub logits: NodeId,
    /// Post-activation trunk tensors, each `(C, h, w)`.
    pub features: Vec<NodeId>,
    /// Detection grid `(rows, cols)`; the image size for dense models.
    pub grid: (usize, usize),
}

/// Nearest-neighbour upsampling of `(C, h, w)` by an integer factor.
fn upsample(g: &mut Graph, x: NodeId, f: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[c, h, 1, w, 1])?;
    let b = g.broadcast(r, &[c, h, f, w, f])?;
    g.reshape(b, &[c, h * f, w * f])
}

fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for p in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            t.set(&[p, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

pub(crate) fn build(
    b: &mut Builder<'_>,
    arch: Architecture,
    h: &Hyper,
    image: NodeId,
) -> Result<ModelNodes> {
    let shape = b.g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(invalid(format!(
            "model input must be (H, W, 3), got {shape:?}"
        )));
    }
    let (ih, iw) = (shape[0], shape[1]);
    let x = b.g.transpose(image, &[2, 0, 1])?;
    let mut features = Vec::new();
    match arch {
        Architecture::ConvA | Architecture::ConvC => {
            let p = if arch == Architecture::ConvA {
                ConvParams::new(2, h.kernel / 2, 1)
            } else {
                ConvParams::new(2, 2 * (h.kernel / 2), 2)
            };
            let mut cur = x;
            for _ in &h.channels {
                let z = b.conv(cur, p)?;
                cur = b.g.relu(z)?;
                features.push(cur);
            }
            let z = b.conv(cur, ConvParams::new(1, 0, 1))?;
            let s = b.g.shape(z).to_vec();
            let logits = b.g.reshape(z, &[s[1] * s[2]])?;
            let output = b.g.sigmoid(logits)?;
            Ok(ModelNodes {
                output,
                logits,
                features,
                grid: (s[1], s[2]),
            })
        }
        Architecture::AttnB => {
            let d = h.channels[0];
            let e = b.conv(x, ConvParams::new(h.patch, 0, 1))?;
            features.push(e);
            let s = b.g.shape(e).to_vec();
            let n = s[1] * s[2];
            let flat = b.g.reshape(e, &[d, n])?;
            let tokens = b.g.transpose(flat, &[1, 0])?;
            let pos = b.g.constant(sinusoidal(n, d));
            let xt = b.g.add(tokens, pos)?;
            let (wq, wk, wv, wo) = (b.param(), b.param(), b.param(), b.param());
            let q = b.g.matmul(xt, wq)?;
            let k = b.g.matmul(xt, wk)?;
            let v = b.g.matmul(xt, wv)?;
            let kt = b.g.transpose(k, &[1, 0])?;
            let scores = b.g.matmul(q, kt)?;
            let scores = b.g.scale(scores, 1.0 / (d as f64).sqrt())?;
            let attn = b.g.softmax(scores)?;
            let mixed = b.g.matmul(attn, v)?;
            let proj = b.g.matmul(mixed, wo)?;
            let y = b.g.add(xt, proj)?;
            let yt = b.g.transpose(y, &[1, 0])?;
            features.push(b.g.reshape(yt, &[d, s[1], s[2]])?);
            let (w1, b1, w2, b2) = (b.param(), b.param(), b.param(), b.param());
            let hdn = b.g.matmul(y, w1)?;
            let hdn = b.g.add(hdn, b1)?;
            let hdn = b.g.gelu(hdn)?;
            let z = b.g.matmul(hdn, w2)?;
            let z = b.g.add(z, b2)?;
            let logits = b.g.reshape(z, &[n])?;
            let output = b.g.sigmoid(logits)?;
            Ok(ModelNodes {
                output,
                logits,
                features,
                grid: (s[1], s[2]),
            })
        }
        Architecture::Seg => {
            let p = ConvParams::new(2, h.kernel / 2, 1);
            let z0 = b.conv(x, p)?;
            let a0 = b.g.relu(z0)?;
            let z1 = b.conv(a0, p)?;
            let a1 = b.g.relu(z1)?;
            features.extend([a0, a1]);
            let s = b.g.shape(a1).to_vec();
            if s[1] * 4 != ih || s[2] * 4 != iw {
                return Err(invalid(format!(
                    "segmenter input {ih}x{iw} must be divisible by 4"
                )));
            }
            let up = upsample(b.g, a1, 4)?;
            let z = b.conv(up, ConvParams::new(1, 1, 1))?;
            let logits = b.g.reshape(z, &[ih, iw])?;
            let output = b.g.sigmoid(logits)?;
            Ok(ModelNodes {
                output,
                logits,
                features,
                grid: (ih, iw),
            })
        }
        Architecture::Depth => {
            let z0 = b.conv(x, ConvParams::new(2, h.kernel / 2, 1))?;
            let a0 = b.g.relu(z0)?;
            let z1 = b.conv(a0, ConvParams::new(1, 2, 2))?;
            let a1 = b.g.relu(z1)?;
            features.extend([a0, a1]);
            let z2 = b.conv(a1, ConvParams::new(1, 4, 4))?;
            let s = b.g.shape(z2).to_vec();
            if s[1] * 2 != ih || s[2] * 2 != iw {
                return Err(invalid(format!("depth input {ih}x{iw} must be even")));
            }
            let up = upsample(b.g, z2, 2)?;
            let logits = b.g.reshape(up, &[ih, iw])?;
            let output = b.g.softplus(logits)?;
            Ok(ModelNodes {
                output,
                logits,
                features,
                grid: (ih, iw),
            })
        }
    }
}
