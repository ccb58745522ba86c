//! Gradient fusion across surrogate models: patch partitioning, Gram
//! eigendecomposition, orthogonal alignment and weighted combination, plus
//! the baseline strategies used for comparison.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Eigenvalues below this fraction of the largest one are treated as null.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;
/// Loss offset in the task weights, keeps them defined when every loss is 0.
pub const WEIGHT_ETA: f64 = 1e-6;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix, sized for Gram work (N ≤ a handful) and patch columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged matrix rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Builds a `d × N` matrix from N equal-length columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(invalid("ragged matrix columns"));
        }
        let n = columns.len();
        let mut m = Self::zeros(rows, n);
        for (k, c) in columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m.data[i * n + k] = v;
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// `Self^T Self`, accumulated per column pair.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut m = Self::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let mut s = 0.0;
                for i in 0..self.rows {
                    s += self.get(i, a) * self.get(i, b);
                }
                m.set(a, b, s);
                m.set(b, a, s);
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One gradient per model, all shaped like the texture.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn new(grads: Vec<Tensor>) -> Result<Self> {
        let first = grads.first().ok_or_else(|| invalid("empty gradient set"))?;
        if first.rank() != 3 {
            return Err(invalid(format!(
                "gradients must be (H, W, C), got {:?}",
                first.shape()
            )));
        }
        for g in &grads {
            if g.shape() != first.shape() {
                return Err(invalid(format!(
                    "gradient shapes differ: {:?} vs {:?}",
                    g.shape(),
                    first.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteInput("gradient".into()));
            }
        }
        Ok(Self { grads })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.grads[0].shape()
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }
}

/// Side lengths of a patch; `None` means the whole texture is one patch.
pub fn patch_dims(shape: &[usize], patch: Option<usize>) -> Result<(usize, usize)> {
    let (h, w) = (shape[0], shape[1]);
    match patch {
        None => Ok((h, w)),
        Some(0) => Err(invalid("patch size must be positive")),
        Some(s) if h % s != 0 || w % s != 0 => Err(invalid(format!(
            "texture {h}x{w} is not divisible by patch size {s}; both sides must be multiples of it"
        ))),
        Some(s) => Ok((s, s)),
    }
}

fn patch_origins(shape: &[usize], ph: usize, pw: usize) -> Vec<(usize, usize)> {
    let (h, w) = (shape[0], shape[1]);
    (0..h / ph)
        .flat_map(|pi| (0..w / pw).map(move |pj| (pi * ph, pj * pw)))
        .collect()
}

fn extract(t: &Tensor, (r0, c0): (usize, usize), ph: usize, pw: usize) -> Vec<f64> {
    let (w, ch) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(ph * pw * ch);
    for r in r0..r0 + ph {
        let start = (r * w + c0) * ch;
        out.extend_from_slice(&t.data()[start..start + pw * ch]);
    }
    out
}

fn insert(t: &mut Tensor, (r0, c0): (usize, usize), ph: usize, pw: usize, values: &[f64]) {
    let (w, ch) = (t.shape()[1], t.shape()[2]);
    let row = pw * ch;
    for (k, r) in (r0..r0 + ph).enumerate() {
        let start = (r * w + c0) * ch;
        t.data_mut()[start..start + row].copy_from_slice(&values[k * row..(k + 1) * row]);
    }
}

/// Splits every gradient into patches, row-major over the patch grid. Column
/// k of each `d × N` matrix is model k's gradient over that patch.
pub fn partition(grads: &GradientSet, patch: Option<usize>) -> Result<Vec<Matrix>> {
    let (ph, pw) = patch_dims(grads.shape(), patch)?;
    Ok(patch_origins(grads.shape(), ph, pw)
        .into_iter()
        .map(|o| {
            let cols: Vec<Vec<f64>> = grads
                .grads()
                .iter()
                .map(|g| extract(g, o, ph, pw))
                .collect();
            Matrix::from_columns(&cols).expect("equal patch columns")
        })
        .collect())
}

/// Inverse of [`partition`].
pub fn reassemble(
    patches: &[Matrix],
    shape: &[usize],
    patch: Option<usize>,
) -> Result<Vec<Tensor>> {
    let (ph, pw) = patch_dims(shape, patch)?;
    let origins = patch_origins(shape, ph, pw);
    if patches.len() != origins.len() {
        return Err(invalid(format!(
            "expected {} patches, got {}",
            origins.len(),
            patches.len()
        )));
    }
    let n = patches.first().map_or(0, |p| p.cols);
    let mut out = vec![Tensor::zeros(shape); n];
    for (p, &o) in patches.iter().zip(&origins) {
        if p.rows != ph * pw * shape[2] || p.cols != n {
            return Err(invalid("patch matrix has the wrong size"));
        }
        for (k, t) in out.iter_mut().enumerate() {
            insert(t, o, ph, pw, &p.column(k));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramDecomposition {
    pub gram: Matrix,
    /// Eigenvectors as columns, ordered like `eigvals`.
    pub eigvecs: Matrix,
    /// Descending, clamped at 0.
    pub eigvals: Vec<f64>,
    pub mean_eig: f64,
    /// Eigenvalues under the relative floor; dropped by the alignment.
    pub null: Vec<bool>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues (unsorted) and eigenvectors as columns.
pub fn jacobi_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows;
    if m.cols != n {
        return Err(invalid("jacobi_eigen needs a square matrix"));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("gram matrix".into()));
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_TOL * a.max_abs();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    Ok(((0..n).map(|i| a.get(i, i)).collect(), v))
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let n = a.rows;
    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    for k in 0..n {
        let (akp, akq) = (a.get(k, p), a.get(k, q));
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let (apk, aqk) = (a.get(p, k), a.get(q, k));
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let (vkp, vkq) = (v.get(k, p), v.get(k, q));
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Gram of the patch matrix and its sorted eigendecomposition. `floor` is
/// relative to the largest eigenvalue.
pub fn gram_eigen(g: &Matrix, floor: f64) -> Result<GramDecomposition> {
    if g.cols < 2 {
        return Err(invalid(format!(
            "need at least two gradients, got {}",
            g.cols
        )));
    }
    if !(floor >= 0.0) {
        return Err(invalid("eigenvalue floor must be nonnegative"));
    }
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("patch gradients".into()));
    }
    let gram = g.gram();
    let (vals, vecs) = jacobi_eigen(&gram)?;
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
    let eigvals: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();
    let mut eigvecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigvecs.set(r, dst, vecs.get(r, src));
        }
    }
    let cutoff = floor * eigvals[0];
    let null = eigvals.iter().map(|&l| l <= cutoff || l == 0.0).collect();
    let mean_eig = eigvals.iter().sum::<f64>() / n as f64;
    Ok(GramDecomposition {
        gram,
        eigvecs,
        eigvals,
        mean_eig,
        null,
    })
}

/// `sqrt(mean_eig) * V diag(1/sqrt(lambda)) V^T`, with null directions dropped.
pub fn alignment_matrix(d: &GramDecomposition) -> Result<Matrix> {
    if d.null.iter().all(|&z| z) {
        return Err(Error::VanishedGradients);
    }
    let n = d.eigvals.len();
    let scale = d.mean_eig.sqrt();
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..n {
                if !d.null[k] {
                    s += d.eigvecs.get(i, k) * d.eigvecs.get(j, k) / d.eigvals[k].sqrt();
                }
            }
            b.set(i, j, scale * s);
            b.set(j, i, scale * s);
        }
    }
    Ok(b)
}

/// Loss-proportional weights `(L_k + eta) / sum_j (L_j + eta)`.
pub fn task_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(invalid("no losses to weight"));
    }
    if losses.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(invalid(format!(
            "losses must be finite and nonnegative: {losses:?}"
        )));
    }
    let total: f64 = losses.iter().map(|l| l + WEIGHT_ETA).sum();
    Ok(losses.iter().map(|l| (l + WEIGHT_ETA) / total).collect())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_weights(grads: &GradientSet, weights: &[f64]) -> Result<()> {
    if weights.len() != grads.len() {
        return Err(invalid(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid("weights must be finite and nonnegative"));
    }
    Ok(())
}

/// Fuses one patch: `G_p (B_p omega)`. A patch whose gradients all vanished
/// contributes zeros.
fn fuse_patch(g: &Matrix, weights: &[f64], floor: f64) -> Result<Vec<f64>> {
    let d = gram_eigen(g, floor)?;
    let b = match alignment_matrix(&d) {
        Ok(b) => b,
        Err(Error::VanishedGradients) => return Ok(vec![0.0; g.rows]),
        Err(e) => return Err(e),
    };
    let n = g.cols;
    let coef: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|k| b.get(i, k) * weights[k]).sum())
        .collect();
    Ok((0..g.rows)
        .map(|r| (0..n).map(|k| g.get(r, k) * coef[k]).sum())
        .collect())
}

/// Orthogonal gradient alignment fusion, patch by patch.
pub fn oga_fuse(
    grads: &GradientSet,
    weights: &[f64],
    patch: Option<usize>,
    floor: f64,
) -> Result<Tensor> {
    check_weights(grads, weights)?;
    if grads.len() == 1 {
        return Ok(grads.grads()[0].scale(weights[0]));
    }
    let shape = grads.shape().to_vec();
    let (ph, pw) = patch_dims(&shape, patch)?;
    let origins = patch_origins(&shape, ph, pw);
    let fused: Vec<Vec<f64>> = origins
        .par_iter()
        .map(|&o| {
            let cols: Vec<Vec<f64>> = grads
                .grads()
                .iter()
                .map(|g| extract(g, o, ph, pw))
                .collect();
            fuse_patch(&Matrix::from_columns(&cols)?, weights, floor)
        })
        .collect::<Result<_>>()?;
    let mut out = Tensor::zeros(&shape);
    for (values, &o) in fused.iter().zip(&origins) {
        insert(&mut out, o, ph, pw, values);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    Oga,
    EqualSum,
    NormAverage,
    ConflictProject,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Oga,
        FusionStrategy::EqualSum,
        FusionStrategy::NormAverage,
        FusionStrategy::ConflictProject,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FusionStrategy::Oga => "oga",
            FusionStrategy::EqualSum => "equal-sum",
            FusionStrategy::NormAverage => "norm-average",
            FusionStrategy::ConflictProject => "conflict-project",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| invalid(format!("unknown fusion strategy {s:?}")))
    }
}

/// Non-aligning strategies, applied to the whole texture at once.
pub fn baseline_fuse(
    grads: &GradientSet,
    weights: &[f64],
    strategy: FusionStrategy,
) -> Result<Tensor> {
    check_weights(grads, weights)?;
    let gs = grads.grads();
    let mut out = Tensor::zeros(grads.shape());
    match strategy {
        FusionStrategy::Oga => return Err(invalid("oga is not a baseline strategy")),
        FusionStrategy::EqualSum => {
            for (g, &w) in gs.iter().zip(weights) {
                out.add_assign(&g.scale(w));
            }
        }
        FusionStrategy::NormAverage => {
            let norms: Vec<f64> = gs.iter().map(Tensor::norm).collect();
            let live: Vec<usize> = (0..gs.len()).filter(|&k| norms[k] > 0.0).collect();
            if live.is_empty() {
                return Ok(out);
            }
            let mean = live.iter().map(|&k| norms[k]).sum::<f64>() / live.len() as f64;
            for &k in &live {
                out.add_assign(&gs[k].scale(weights[k] * mean / norms[k]));
            }
        }
        FusionStrategy::ConflictProject => {
            let n = gs.len();
            let mut total = Tensor::zeros(grads.shape());
            for g in gs {
                total.add_assign(g);
            }
            for (k, g) in gs.iter().enumerate() {
                let mut projected = g.clone();
                if n > 1 {
                    let mut others = total.clone();
                    others.add_assign(&g.scale(-1.0));
                    let others = others.scale(1.0 / (n - 1) as f64);
                    let dot = g.dot(&others);
                    let nn = others.dot(&others);
                    if dot < 0.0 && nn > 0.0 {
                        projected.add_assign(&others.scale(-dot / nn));
                    }
                }
                out.add_assign(&projected.scale(weights[k]));
            }
        }
    }
    Ok(out)
}

/// Dispatches on the strategy. OGA uses the loss-proportional weights; the
/// baselines weight every model equally.
pub fn fuse(
    strategy: FusionStrategy,
    grads: &GradientSet,
    losses: &[f64],
    patch: Option<usize>,
    floor: f64,
) -> Result<Tensor> {
    match strategy {
        FusionStrategy::Oga => oga_fuse(grads, &task_weights(losses)?, patch, floor),
        s => baseline_fuse(grads, &uniform_weights(grads.len()), s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn patch_of(values: Vec<f64>) -> Tensor {
        Tensor::new(vec![16, 16, 3], values).unwrap()
    }

    #[test]
    fn partition_counts_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = GradientSet::new(vec![Tensor::zeros(&[16, 16, 3]); 2]).unwrap();
        let p = partition(&one, Some(16)).unwrap();
        assert_eq!((p.len(), p[0].rows, p[0].cols), (1, 768, 2));
        let set = GradientSet::new(
            (0..3)
                .map(|_| random_tensor(&mut rng, &[32, 32, 3]))
                .collect(),
        )
        .unwrap();
        let p = partition(&set, Some(16)).unwrap();
        assert_eq!(p.len(), 4);
        let back = reassemble(&p, set.shape(), Some(16)).unwrap();
        assert_eq!(back, set.grads());
        let err = partition(&set, Some(12)).unwrap_err().to_string();
        assert!(err.contains("12"), "{err}");
    }

    #[test]
    fn eigen_examples() {
        let u = vec![1.0, 0.0, 0.0];
        let d = gram_eigen(
            &Matrix::from_columns(&[u.clone(), u]).unwrap(),
            DEFAULT_EIG_FLOOR,
        )
        .unwrap();
        assert!((d.eigvals[0] - 2.0).abs() < 1e-12 && d.eigvals[1].abs() < 1e-12);
        assert_eq!(d.null, vec![false, true]);
        let ortho = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = gram_eigen(&ortho, DEFAULT_EIG_FLOOR).unwrap();
        assert_eq!(d.eigvals, vec![1.0, 1.0]);
        assert_eq!(alignment_matrix(&d).unwrap(), Matrix::identity(2));
        assert!(gram_eigen(
            &Matrix::from_columns(&[vec![f64::NAN], vec![1.0]]).unwrap(),
            0.0
        )
        .is_err());
    }

    #[test]
    fn sixty_degree_alignment() {
        let a = vec![1.0, 0.0];
        let b = vec![0.5, 3f64.sqrt() / 2.0];
        let d = gram_eigen(&Matrix::from_columns(&[a, b]).unwrap(), DEFAULT_EIG_FLOOR).unwrap();
        let bm = alignment_matrix(&d).unwrap();
        let diag = 0.5 * (1.0 / 1.5f64.sqrt() + 1.0 / 0.5f64.sqrt());
        let off = 0.5 * (1.0 / 1.5f64.sqrt() - 1.0 / 0.5f64.sqrt());
        assert!((bm.get(0, 0) - diag).abs() < 1e-12 && (bm.get(1, 1) - diag).abs() < 1e-12);
        assert!((bm.get(0, 1) - off).abs() < 1e-12 && (bm.get(1, 0) - off).abs() < 1e-12);
        assert!((diag - 1.11536).abs() < 2e-5 && (off + 0.29887).abs() < 2e-5);
    }

    #[test]
    fn vanished_gradients() {
        let z = Matrix::zeros(4, 2);
        let d = gram_eigen(&z, DEFAULT_EIG_FLOOR).unwrap();
        assert!(matches!(
            alignment_matrix(&d),
            Err(Error::VanishedGradients)
        ));
        let set = GradientSet::new(vec![Tensor::zeros(&[16, 16, 3]); 2]).unwrap();
        assert_eq!(
            oga_fuse(&set, &[0.5, 0.5], Some(16), DEFAULT_EIG_FLOOR).unwrap(),
            Tensor::zeros(&[16, 16, 3])
        );
    }

    #[test]
    fn weight_examples() {
        assert_eq!(task_weights(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        let w = task_weights(&[3.0, 1.0]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-6 && (w[1] - 0.25).abs() < 1e-6);
        assert_eq!(task_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(task_weights(&[-1.0, 0.0]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut e1 = vec![0.0; 768];
        let mut e2 = vec![0.0; 768];
        e1[0] = 1.0;
        e2[5] = 1.0;
        let set = GradientSet::new(vec![patch_of(e1.clone()), patch_of(e2)]).unwrap();
        let f = oga_fuse(&set, &[0.5, 0.5], Some(16), DEFAULT_EIG_FLOOR).unwrap();
        assert!((f.data()[0] - 0.5).abs() < 1e-12 && (f.data()[5] - 0.5).abs() < 1e-12);
        assert!((f.norm() - 2f64.sqrt() / 2.0).abs() < 1e-12);

        let g = patch_of(
            e1.iter()
                .enumerate()
                .map(|(i, _)| (i as f64 * 0.1).sin())
                .collect(),
        );
        let same = GradientSet::new(vec![g.clone(), g.clone()]).unwrap();
        let f = oga_fuse(&same, &[0.5, 0.5], Some(16), DEFAULT_EIG_FLOOR).unwrap();
        let expect = g.scale(1.0 / 2f64.sqrt());
        assert!(f.zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Tensor::zeros(&[32, 32, 3]);
        let mut b = Tensor::zeros(&[32, 32, 3]);
        for r in 16..32 {
            for c in 0..16 {
                for ch in 0..3 {
                    a.set(&[r, c, ch], rng.random_range(-1.0..1.0));
                    b.set(&[r, c, ch], rng.random_range(-1.0..1.0));
                }
            }
        }
        let f = oga_fuse(
            &GradientSet::new(vec![a, b]).unwrap(),
            &[0.3, 0.7],
            Some(16),
            DEFAULT_EIG_FLOOR,
        )
        .unwrap();
        for r in 0..32 {
            for c in 0..32 {
                if !(16..32).contains(&r) || c >= 16 {
                    assert_eq!(f.at(&[r, c, 1]), 0.0);
                }
            }
        }
    }

    #[test]
    fn baseline_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_tensor(&mut rng, &[16, 16, 3]);
        let anti = GradientSet::new(vec![g.clone(), g.scale(-1.0)]).unwrap();
        assert_eq!(
            baseline_fuse(&anti, &[0.5, 0.5], FusionStrategy::EqualSum)
                .unwrap()
                .max_abs(),
            0.0
        );
        let same = GradientSet::new(vec![g.clone(), g.clone()]).unwrap();
        let f = baseline_fuse(&same, &[0.5, 0.5], FusionStrategy::NormAverage).unwrap();
        assert!(f.zip_map(&g, |a, b| a - b).unwrap().max_abs() < 1e-12);
        let mut e1 = vec![0.0; 768];
        let mut e2 = vec![0.0; 768];
        e1[1] = 2.0;
        e2[7] = -3.0;
        let ortho = GradientSet::new(vec![patch_of(e1), patch_of(e2)]).unwrap();
        assert_eq!(
            baseline_fuse(&ortho, &[0.5, 0.5], FusionStrategy::ConflictProject).unwrap(),
            baseline_fuse(&ortho, &[0.5, 0.5], FusionStrategy::EqualSum).unwrap()
        );
        assert!(baseline_fuse(&ortho, &[0.5, 0.5], FusionStrategy::Oga).is_err());
        let zero = GradientSet::new(vec![Tensor::zeros(&[16, 16, 3]), g.clone()]).unwrap();
        let f = baseline_fuse(&zero, &[0.5, 0.5], FusionStrategy::NormAverage).unwrap();
        assert!(f.zip_map(&g.scale(0.5), |a, b| a - b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn conflict_project_removes_opposition() {
        let mut a = vec![0.0; 768];
        let mut b = vec![0.0; 768];
        a[0] = 1.0;
        b[0] = -1.0;
        b[1] = 1.0;
        let set = GradientSet::new(vec![patch_of(a), patch_of(b)]).unwrap();
        let f = baseline_fuse(&set, &[0.5, 0.5], FusionStrategy::ConflictProject).unwrap();
        // a loses its component along b and vice versa.
        assert!((f.data()[0] - 0.25).abs() < 1e-12);
        assert!((f.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn strategy_ids_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.id().parse::<FusionStrategy>().unwrap(), s);
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.id())
            );
        }
    }

    fn random_columns(seed: u64, d: usize, n: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Matrix::from_columns(&cols).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decomposition_invariants(seed in any::<u64>(), n in 2usize..6) {
            let g = random_columns(seed, 48, n);
            let d = gram_eigen(&g, DEFAULT_EIG_FLOOR).unwrap();
            let vtv = d.eigvecs.transpose().matmul(&d.eigvecs).unwrap();
            prop_assert!(vtv.max_abs_diff(&Matrix::identity(n)) < 1e-10);
            prop_assert!(d.eigvals.windows(2).all(|w| w[0] >= w[1]));
            let mut lam = Matrix::zeros(n, n);
            for k in 0..n {
                lam.set(k, k, d.eigvals[k]);
            }
            let rec = d.eigvecs.matmul(&lam).unwrap().matmul(&d.eigvecs.transpose()).unwrap();
            prop_assert!(rec.max_abs_diff(&d.gram) < 1e-10 * d.gram.max_abs().max(1.0));
            let b = alignment_matrix(&d).unwrap();
            prop_assert!(b.max_abs_diff(&b.transpose()) < 1e-10);
            let aligned = g.matmul(&b).unwrap().gram();
            let target = Matrix::identity(n).data.iter().map(|v| v * d.mean_eig).collect();
            let target = Matrix { rows: n, cols: n, data: target };
            prop_assert!(aligned.max_abs_diff(&target) < 1e-8 * d.mean_eig);
        }

        #[test]
        fn scale_equivariance(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grads: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[32, 32, 3])).collect();
            let scaled: Vec<Tensor> = grads.iter().map(|g| g.scale(c)).collect();
            let w = [0.2, 0.3, 0.5];
            let f = oga_fuse(&GradientSet::new(grads).unwrap(), &w, Some(16), DEFAULT_EIG_FLOOR).unwrap();
            let fs = oga_fuse(&GradientSet::new(scaled).unwrap(), &w, Some(16), DEFAULT_EIG_FLOOR).unwrap();
            let err = fs.zip_map(&f.scale(c), |a, b| a - b).unwrap().max_abs();
            prop_assert!(err <= 1e-10 * fs.max_abs().max(1.0), "err {}", err);
        }

        #[test]
        fn patch_independence(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grads: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut rng, &[32, 48, 3])).collect();
            let w = [0.4, 0.6];
            let whole = oga_fuse(&GradientSet::new(grads.clone()).unwrap(), &w, Some(16), DEFAULT_EIG_FLOOR).unwrap();
            let crop = |t: &Tensor| {
                let mut out = Tensor::zeros(&[16, 16, 3]);
                for r in 0..16 {
                    for c in 0..16 {
                        for ch in 0..3 {
                            out.set(&[r, c, ch], t.at(&[16 + r, 32 + c, ch]));
                        }
                    }
                }
                out
            };
            let cropped = GradientSet::new(grads.iter().map(crop).collect()).unwrap();
            let fc = oga_fuse(&cropped, &w, Some(16), DEFAULT_EIG_FLOOR).unwrap();
            prop_assert_eq!(crop(&whole), fc);
        }

        #[test]
        fn fused_norm_identity(seed in any::<u64>(), n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grads: Vec<Tensor> = (0..n).map(|_| random_tensor(&mut rng, &[16, 16, 3])).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = task_weights(&raw).unwrap();
            let set = GradientSet::new(grads).unwrap();
            let d = gram_eigen(&partition(&set, Some(16)).unwrap()[0], DEFAULT_EIG_FLOOR).unwrap();
            let f = oga_fuse(&set, &w, Some(16), DEFAULT_EIG_FLOOR).unwrap();
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expect = d.mean_eig.sqrt() * wn;
            prop_assert!((f.norm() - expect).abs() <= 1e-8 * expect);
        }
    }
}
