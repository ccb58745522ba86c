//! Central finite differences against reverse mode for every loss and for the
//! whole texture -> render -> surrogate -> loss chain.

use oga_core::graph::{check_gradients, Bindings, Graph, NodeId};
use oga_core::losses::{
    depth_loss_node, detection_loss_node, feature_loss_node, segmentation_loss_node,
    smooth_loss_node,
};
use oga_core::render::composite;
use oga_core::scene::{SceneConfig, SceneGenerator};
use oga_core::surrogates::{build_model, Architecture, ModelSpec, ParamMode, Task};
use oga_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-4;
const CHAIN_TOL: f64 = 1e-3;
/// The chain's loss is O(10), so a larger step keeps cancellation noise down.
const CHAIN_STEP: f64 = 1e-5;
/// Texels seen this faintly carry gradients near the rounding floor.
const MIN_VISIBILITY: f64 = 0.5;
const GRAD_FLOOR: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_mask(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
    data[0] = 1.0;
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Loss = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

fn check_states(
    name: &str,
    shape: &[usize],
    lo: f64,
    hi: f64,
    build: impl Fn(&mut ChaCha8Rng) -> Loss,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    for state in 0..10 {
        let f = build(&mut rng);
        let x = random(shape, lo, hi, &mut rng);
        let err = check_gradients(&f, &x, STEP).unwrap();
        assert!(
            err < LOSS_TOL,
            "{name}, state {state}: relative error {err}"
        );
    }
}

#[test]
fn detection_loss() {
    check_states("detection", &[16], 0.01, 0.99, |rng| {
        let mut haz: Vec<usize> = (0..16).filter(|_| rng.random_bool(0.3)).collect();
        haz.push(5);
        haz.dedup();
        Box::new(move |g, x| Ok(detection_loss_node(g, x, &haz)?.unwrap()))
    });
}

#[test]
fn feature_loss() {
    check_states("feature", &[3, 4, 4], -2.0, 2.0, |rng| {
        let mask = random_mask(&[8, 8], rng);
        Box::new(move |g, x| {
            let second = g.tanh(x)?;
            feature_loss_node(g, &[x, second], &mask)
        })
    });
}

#[test]
fn smooth_loss() {
    check_states("smooth", &[5, 6, 3], 0.0, 1.0, |_| {
        Box::new(smooth_loss_node)
    });
}

#[test]
fn segmentation_loss() {
    check_states("segmentation", &[6, 6], 0.01, 0.99, |rng| {
        let mask = random_mask(&[6, 6], rng);
        Box::new(move |g, x| segmentation_loss_node(g, x, &mask))
    });
}

#[test]
fn depth_loss() {
    check_states("depth", &[6, 6], 0.5, 8.0, |rng| {
        let mask = random_mask(&[6, 6], rng);
        Box::new(move |g, x| depth_loss_node(g, x, &mask))
    });
}

#[test]
fn weighted_total() {
    check_states("total", &[4, 6, 3], 0.0, 1.0, |rng| {
        let w: [f64; 2] = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
        Box::new(move |g, x| {
            let s = smooth_loss_node(g, x)?;
            let flat = g.reshape(x, &[72])?;
            let conf = g.sigmoid(flat)?;
            let d = detection_loss_node(g, conf, &[0, 7, 30])?.unwrap();
            let a = g.scale(s, w[0])?;
            let b = g.scale(d, w[1])?;
            g.add(a, b)
        })
    });
}

/// Worst `|analytic - fd| / (|fd| + GRAD_FLOOR * max|analytic|)` over `coords`.
/// The floor keeps texels in dead regions of the surrogate, whose true
/// gradient sits at the rounding floor of a loss of size O(10), from
/// dominating.
fn scaled_error(
    f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>,
    point: &Tensor,
    coords: &[usize],
) -> f64 {
    let mut g = Graph::new();
    let x = g.input("t", point.shape());
    let y = f(&mut g, x).unwrap();
    let mut b = Bindings::new();
    b.insert("t".into(), point.clone());
    g.forward(&b).unwrap();
    let analytic = g
        .backward(y, &Tensor::scalar(1.0))
        .unwrap()
        .remove("t")
        .unwrap();
    let floor = GRAD_FLOOR * analytic.max_abs();
    let mut eval = |c: usize, d: f64| {
        let mut p = point.clone();
        p.data_mut()[c] += d;
        b.insert("t".into(), p);
        g.forward(&b).unwrap();
        g.value(y).item()
    };
    coords
        .iter()
        .map(|&c| {
            let fd = (eval(c, CHAIN_STEP) - eval(c, -CHAIN_STEP)) / (2.0 * CHAIN_STEP);
            (analytic.data()[c] - fd).abs() / (fd.abs() + floor)
        })
        .fold(0.0, f64::max)
}

/// Texture -> render -> composite -> surrogate -> task and feature losses, at
/// 20 texels clearly visible in the view.
#[test]
fn full_chain() {
    let cfg = SceneConfig {
        image_size: 32,
        atlas_height: 16,
        atlas_width: 24,
        center: [12.0, 20.0],
        ..SceneConfig::default()
    };
    let gen = SceneGenerator::new(cfg, 11).unwrap();
    let shape = gen.mesh().texture_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (state, arch) in Architecture::ALL.iter().cycle().take(10).enumerate() {
        let mut spec = ModelSpec::new(*arch, state as u64);
        if *arch == Architecture::AttnB {
            spec.channels = Some(vec![8]);
        }
        let mut model = build_model(&spec).unwrap();
        // Nonzero heads so the losses depend on the image.
        let flat = model.flat_params().map(|v| if v == 0.0 { 0.05 } else { v });
        model.load_flat(&flat).unwrap();
        let view = gen.view(state).unwrap();
        let texture = random(&shape, 0.05, 0.95, &mut rng);
        let vis = view.raster.texel_visibility();
        let visible: Vec<usize> = (0..shape[0] * shape[1])
            .filter(|&k| vis.data()[k] >= MIN_VISIBILITY)
            .collect();
        let coords: Vec<usize> = (0..20)
            .map(|_| visible[rng.random_range(0..visible.len())] * 3 + rng.random_range(0..3))
            .collect();
        let f = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
            let shaded = view.raster.shade(g, t)?;
            let img = composite(g, shaded, &view.sample.background, &view.sample.target_mask)?;
            let nodes = model.forward(g, img, ParamMode::Frozen)?;
            let mask = &view.sample.target_mask;
            let task = match model.task() {
                Task::Detection => {
                    let all: Vec<usize> = (0..nodes.grid.0 * nodes.grid.1).collect();
                    detection_loss_node(g, nodes.output, &all)?.unwrap()
                }
                Task::Segmentation => segmentation_loss_node(g, nodes.output, mask)?,
                Task::Depth => return depth_loss_node(g, nodes.output, mask),
            };
            let fea = feature_loss_node(g, &nodes.features, mask)?;
            g.add(task, fea)
        };
        let err = scaled_error(f, &texture, &coords);
        assert!(
            err < CHAIN_TOL,
            "state {state} ({arch}): relative error {err}"
        );
    }
}
