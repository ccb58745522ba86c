//! Forward and vector-Jacobian kernels for every primitive.

use super::{ConvParams, Op};
use crate::tensor::{numel, strides, Tensor};

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the index space of `out` (0 on broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 && a.shape() == out_shape {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if a.len() == 1 && b.shape() == out_shape {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else {
        let sa = aligned_strides(a.shape(), out_shape);
        let sb = aligned_strides(b.shape(), out_shape);
        let mut data = vec![0.0; numel(out_shape)];
        for_each_broadcast(out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
        data
    };
    Tensor::from_parts(out_shape.to_vec(), data)
}

/// Gradients of a broadcasting binary op given the local partials `da(x, y)`
/// and `db(x, y)`.
fn binary_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    needs: &[bool],
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> Vec<Option<Tensor>> {
    let out_shape = g.shape();
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = needs[0].then(|| vec![0.0; a.len()]);
    let mut gb = needs[1].then(|| vec![0.0; b.len()]);
    if a.shape() == b.shape() {
        for o in 0..gd.len() {
            if let Some(ga) = &mut ga {
                ga[o] = gd[o] * da(ad[o], bd[o]);
            }
            if let Some(gb) = &mut gb {
                gb[o] = gd[o] * db(ad[o], bd[o]);
            }
        }
    } else {
        let sa = aligned_strides(a.shape(), out_shape);
        let sb = aligned_strides(b.shape(), out_shape);
        for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
            if let Some(ga) = &mut ga {
                ga[i] += gd[o] * da(ad[i], bd[j]);
            }
            if let Some(gb) = &mut gb {
                gb[j] += gd[o] * db(ad[i], bd[j]);
            }
        });
    }
    vec![
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ]
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    p: ConvParams,
}

impl ConvGeom {
    fn new(x: &Tensor, weight: &Tensor, out_shape: &[usize], p: ConvParams) -> Self {
        let (xs, ws) = (x.shape(), weight.shape());
        Self {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho: out_shape[1],
            wo: out_shape[2],
            p,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output coordinate `o` and kernel tap `k` along one axis.
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.p.stride + k * self.p.dilation) as isize - self.p.padding as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = vec![0.0; rows * cols];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        let src = &x[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = src[ix];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols_data[r * cols..(r + 1) * cols];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else {
                            continue;
                        };
                        let row = (c * self.h + iy) * self.w;
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                x[row + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Bilinear taps `(flat texel index, weight)` for one sample, clamp-to-edge.
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let axis = |t: f64, n: usize| -> (usize, usize, f64) {
        let x = (t - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (x0, x1, fx) = axis(u, w);
    let (y0, y1, fy) = axis(v, h);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn transpose_map(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| f(o, i));
}

pub(crate) fn forward(op: &Op, args: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let unary = |f: &dyn Fn(f64) -> f64| {
        Tensor::from_parts(
            out_shape.to_vec(),
            args[0].data().iter().map(|&x| f(x)).collect(),
        )
    };
    match op {
        Op::Input { .. } | Op::Constant(_) => {
            unreachable!("leaf nodes are not evaluated by kernels")
        }
        Op::Add => binary_forward(args[0], args[1], out_shape, |x, y| x + y),
        Op::Sub => binary_forward(args[0], args[1], out_shape, |x, y| x - y),
        Op::Mul => binary_forward(args[0], args[1], out_shape, |x, y| x * y),
        Op::Div => binary_forward(args[0], args[1], out_shape, |x, y| x / y),
        Op::Neg => unary(&|x| -x),
        Op::Relu => unary(&|x| x.max(0.0)),
        Op::Gelu => unary(&gelu),
        Op::Tanh => unary(&f64::tanh),
        Op::Sigmoid => unary(&sigmoid),
        Op::Softplus => unary(&softplus),
        Op::Exp => unary(&f64::exp),
        Op::Log => unary(&f64::ln),
        Op::Sqrt => unary(&f64::sqrt),
        Op::Square => unary(&|x| x * x),
        Op::MaxConst(c) => unary(&|x| x.max(*c)),
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), &mut c, m, k, n);
            Tensor::from_parts(out_shape.to_vec(), c)
        }
        Op::Conv2d(p) => {
            let geo = ConvGeom::new(args[0], args[1], out_shape, *p);
            let cols = geo.im2col(args[0].data());
            let mut out = vec![0.0; geo.cout * geo.cols()];
            if let Some(bias) = args.get(2) {
                for (o, &b) in bias.data().iter().enumerate() {
                    out[o * geo.cols()..(o + 1) * geo.cols()].fill(b);
                }
            }
            gemm_nn(
                args[1].data(),
                &cols,
                &mut out,
                geo.cout,
                geo.rows(),
                geo.cols(),
            );
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let x = args[0];
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s = x.sum();
                    Tensor::scalar(if mean { s / x.len() as f64 } else { s })
                }
                Some(ax) => {
                    let (outer, n, inner) = reduce_dims(x.shape(), *ax);
                    let mut out = vec![0.0; outer * inner];
                    let d = x.data();
                    for o in 0..outer {
                        for k in 0..n {
                            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    Tensor::from_parts(out_shape.to_vec(), out)
                }
            }
        }
        Op::MaskedSelect(idx) => {
            let d = args[0].data();
            Tensor::from_parts(out_shape.to_vec(), idx.iter().map(|&i| d[i]).collect())
        }
        Op::BilinearSample(uv) => {
            let t = args[0];
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (td, uvd) = (t.data(), uv.data());
            let p = uv.shape()[0];
            let mut out = vec![0.0; p * c];
            for i in 0..p {
                for (texel, wt) in bilinear_taps(uvd[2 * i], uvd[2 * i + 1], h, w) {
                    for ch in 0..c {
                        out[i * c + ch] += wt * td[texel * c + ch];
                    }
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Reshape => Tensor::from_parts(out_shape.to_vec(), args[0].data().to_vec()),
        Op::Transpose(perm) => {
            let mut out = vec![0.0; args[0].len()];
            let d = args[0].data();
            transpose_map(args[0].shape(), perm, |o, i| out[o] = d[i]);
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Concat { axis } => {
            let outer = numel(&out_shape[..*axis]);
            let inner = numel(&out_shape[axis + 1..]);
            let mut out = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                for part in args {
                    let block = part.shape()[*axis] * inner;
                    out.extend_from_slice(&part.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Slice { axis, start, end } => {
            let (outer, n, inner) = reduce_dims(args[0].shape(), *axis);
            let d = args[0].data();
            let mut out = Vec::with_capacity(numel(out_shape));
            for o in 0..outer {
                out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Broadcast => {
            let x = args[0];
            let sx = aligned_strides(x.shape(), out_shape);
            let zero = vec![0; out_shape.len()];
            let mut out = vec![0.0; numel(out_shape)];
            let d = x.data();
            for_each_broadcast(out_shape, &sx, &zero, |o, i, _| out[o] = d[i]);
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::Softmax => {
            let x = args[0];
            let n = *x.shape().last().expect("softmax needs rank >= 1");
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_parts(out_shape.to_vec(), out)
        }
        Op::LogSumExp => {
            let d = args[0].data();
            let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = d.iter().map(|x| (x - m).exp()).sum();
            Tensor::scalar(m + s.ln())
        }
    }
}

pub(crate) fn backward(
    op: &Op,
    args: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let x = args[0];
    let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Option<Tensor>> {
        let d: Vec<f64> = x
            .data()
            .iter()
            .zip(out.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
    };
    match op {
        Op::Input { .. } | Op::Constant(_) => vec![],
        Op::Add => binary_backward(args[0], args[1], g, needs, |_, _| 1.0, |_, _| 1.0),
        Op::Sub => binary_backward(args[0], args[1], g, needs, |_, _| 1.0, |_, _| -1.0),
        Op::Mul => binary_backward(args[0], args[1], g, needs, |_, b| b, |a, _| a),
        Op::Div => binary_backward(
            args[0],
            args[1],
            g,
            needs,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        ),
        Op::Neg => elementwise(&|_, _, gi| -gi),
        Op::Relu => elementwise(&|xi, _, gi| if xi > 0.0 { gi } else { 0.0 }),
        Op::Gelu => elementwise(&|xi, _, gi| gi * gelu_grad(xi)),
        Op::Tanh => elementwise(&|_, yi, gi| gi * (1.0 - yi * yi)),
        Op::Sigmoid => elementwise(&|_, yi, gi| gi * yi * (1.0 - yi)),
        Op::Softplus => elementwise(&|xi, _, gi| gi * sigmoid(xi)),
        Op::Exp => elementwise(&|_, yi, gi| gi * yi),
        Op::Log => elementwise(&|xi, _, gi| gi / xi),
        Op::Sqrt => elementwise(&|_, yi, gi| gi / (2.0 * yi)),
        Op::Square => elementwise(&|xi, _, gi| 2.0 * xi * gi),
        Op::MaxConst(c) => elementwise(&|xi, _, gi| if xi > *c { gi } else { 0.0 }),
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm_nt(g.data(), b.data(), &mut d, m, n, k);
                Tensor::from_parts(a.shape().to_vec(), d)
            });
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm_tn(a.data(), g.data(), &mut d, k, m, n);
                Tensor::from_parts(b.shape().to_vec(), d)
            });
            vec![ga, gb]
        }
        Op::Conv2d(p) => {
            let (w, geo) = (args[1], ConvGeom::new(x, args[1], g.shape(), *p));
            let (rows, cols) = (geo.rows(), geo.cols());
            let gx = needs[0].then(|| {
                let mut dcols = vec![0.0; rows * cols];
                gemm_tn(w.data(), g.data(), &mut dcols, rows, geo.cout, cols);
                Tensor::from_parts(x.shape().to_vec(), geo.col2im(&dcols))
            });
            let gw = needs[1].then(|| {
                let xcols = geo.im2col(x.data());
                let mut d = vec![0.0; geo.cout * rows];
                gemm_nt(g.data(), &xcols, &mut d, geo.cout, cols, rows);
                Tensor::from_parts(w.shape().to_vec(), d)
            });
            let mut grads = vec![gx, gw];
            if args.len() == 3 {
                grads.push(needs[2].then(|| {
                    let d = g.data().chunks(cols).map(|row| row.iter().sum()).collect();
                    Tensor::from_parts(vec![geo.cout], d)
                }));
            }
            grads
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            let d = match axis {
                None => {
                    let s = if mean {
                        g.item() / x.len() as f64
                    } else {
                        g.item()
                    };
                    vec![s; x.len()]
                }
                Some(ax) => {
                    let (outer, n, inner) = reduce_dims(x.shape(), *ax);
                    let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                    let gd = g.data();
                    let mut d = vec![0.0; x.len()];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                d[(o * n + k) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    d
                }
            };
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::MaskedSelect(idx) => {
            let mut d = vec![0.0; x.len()];
            for (&i, &gi) in idx.iter().zip(g.data()) {
                d[i] += gi;
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::BilinearSample(uv) => {
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (uvd, gd) = (uv.data(), g.data());
            let mut d = vec![0.0; x.len()];
            for i in 0..uv.shape()[0] {
                for (texel, wt) in bilinear_taps(uvd[2 * i], uvd[2 * i + 1], h, w) {
                    for ch in 0..c {
                        d[texel * c + ch] += wt * gd[i * c + ch];
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::Reshape => vec![Some(Tensor::from_parts(
            x.shape().to_vec(),
            g.data().to_vec(),
        ))],
        Op::Transpose(perm) => {
            let mut d = vec![0.0; x.len()];
            let gd = g.data();
            transpose_map(x.shape(), perm, |o, i| d[i] = gd[o]);
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::Concat { axis } => {
            let outer = numel(&g.shape()[..*axis]);
            let inner = numel(&g.shape()[axis + 1..]);
            let total = g.shape()[*axis] * inner;
            let gd = g.data();
            let mut offset = 0;
            args.iter()
                .zip(needs)
                .map(|(part, &need)| {
                    let block = part.shape()[*axis] * inner;
                    let start = offset;
                    offset += block;
                    need.then(|| {
                        let mut d = Vec::with_capacity(part.len());
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + start..o * total + start + block]);
                        }
                        Tensor::from_parts(part.shape().to_vec(), d)
                    })
                })
                .collect()
        }
        Op::Slice { axis, start, end } => {
            let (outer, n, inner) = reduce_dims(x.shape(), *axis);
            let width = (end - start) * inner;
            let gd = g.data();
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                d[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&gd[o * width..(o + 1) * width]);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::Broadcast => {
            let sx = aligned_strides(x.shape(), g.shape());
            let zero = vec![0; g.rank()];
            let gd = g.data();
            let mut d = vec![0.0; x.len()];
            for_each_broadcast(g.shape(), &sx, &zero, |o, i, _| d[i] += gd[o]);
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::Softmax => {
            let n = *x.shape().last().expect("softmax needs rank >= 1");
            let mut d = vec![0.0; x.len()];
            for ((dr, yr), gr) in d
                .chunks_mut(n)
                .zip(out.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = y * (gv - s);
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        }
        Op::LogSumExp => {
            let y = out.item();
            let gi = g.item();
            vec![Some(x.map(|v| gi * (v - y).exp()))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[4, 3], &[1]), Some(vec![4, 3]));
        assert_eq!(broadcast_shapes(&[4, 1], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shapes(&[4, 3], &[4]), None);
    }

    #[test]
    fn bilinear_taps_at_texel_centers_are_exact() {
        let taps = bilinear_taps(1.5, 2.5, 4, 4);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let hit: Vec<_> = taps.iter().filter(|t| t.1 > 0.0).collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].0, 2 * 4 + 1);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::new(
            vec![2, 5, 5],
            (0..50).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![3, 2, 3, 3],
            (0..54).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let p = ConvParams::new(2, 2, 2);
        let out_shape = [3, 3, 3];
        let y = forward(&Op::Conv2d(p), &[&x, &w], &out_shape);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx * 2) as isize - 2;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.at(&[o, c, ky, kx])
                                        * x.at(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[o, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }
}
