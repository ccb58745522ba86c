//! Gradient cosine similarity between surrogates and greedy selection of a
//! diverse ensemble.

use crate::error::{invalid, Error, Result};
use crate::losses::LossWeights;
use crate::objective::ViewObjective;
use crate::scene::View;
use crate::surrogates::Model;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Views where either gradient is shorter than this are left out of the mean.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// Cosine of two flattened gradients, `None` when either is (nearly) zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na < MIN_GRAD_NORM || nb < MIN_GRAD_NORM {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine over paired per-view gradients, skipping degenerate views.
pub fn mean_cosine(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let vals: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| cosine(x, y)).collect();
    if vals.is_empty() {
        return Err(Error::NoViews("every view has a vanishing gradient".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-view texture gradients of the model's task loss (zero where it has none).
pub fn task_gradients(
    model: &Model,
    views: &[View],
    texture: &Tensor,
    tau: f64,
) -> Result<Vec<Tensor>> {
    let weights = LossWeights::default();
    views
        .iter()
        .map(|v| {
            let mut obj = ViewObjective::build(&[model], v, texture.shape(), None, &weights, tau)?;
            obj.forward(texture)?;
            match obj.models[0].task {
                Some(node) => obj.texture_gradient(node),
                None => Ok(Tensor::zeros(texture.shape())),
            }
        })
        .collect()
}

pub fn gradient_cosine(
    a: &Model,
    b: &Model,
    views: &[View],
    texture: &Tensor,
    tau: f64,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::NoViews("no views for similarity".into()));
    }
    mean_cosine(
        &task_gradients(a, views, texture, tau)?,
        &task_gradients(b, views, texture, tau)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    /// Row-major, `names.len()` square.
    pub entries: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(names: Vec<String>, entries: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { names, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a][b]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.entries.len();
        if self.names.len() != n || self.entries.iter().any(|r| r.len() != n) {
            return Err(invalid(
                "similarity matrix must be square with one name per row",
            ));
        }
        for a in 0..n {
            if (self.entries[a][a] - 1.0).abs() > 1e-12 {
                return Err(invalid(format!(
                    "diagonal entry {a} is {}",
                    self.entries[a][a]
                )));
            }
            for b in 0..n {
                let v = self.entries[a][b];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(invalid(format!("entry ({a}, {b}) = {v} outside [-1, 1]")));
                }
                if (v - self.entries[b][a]).abs() > 1e-12 {
                    return Err(invalid(format!("entries ({a}, {b}) and ({b}, {a}) differ")));
                }
            }
        }
        Ok(())
    }
}

/// Pairwise mean gradient cosines over `views` at a fixed `texture`.
pub fn similarity_matrix(
    pool: &[Model],
    views: &[View],
    texture: &Tensor,
    tau: f64,
) -> Result<SimilarityMatrix> {
    if pool.len() < 2 {
        return Err(invalid("similarity needs at least two models"));
    }
    if views.is_empty() {
        return Err(Error::NoViews("no views for similarity".into()));
    }
    let grads: Vec<Vec<Tensor>> = pool
        .iter()
        .map(|m| task_gradients(m, views, texture, tau))
        .collect::<Result<_>>()?;
    let n = pool.len();
    let mut entries = vec![vec![0.0; n]; n];
    for a in 0..n {
        entries[a][a] = 1.0;
        for b in a + 1..n {
            let c = mean_cosine(&grads[a], &grads[b]).map_err(|e| {
                Error::NoViews(format!("{} vs {}: {e}", pool[a].name(), pool[b].name()))
            })?;
            entries[a][b] = c;
            entries[b][a] = c;
        }
    }
    SimilarityMatrix::new(pool.iter().map(Model::name).collect(), entries)
}

/// Starts from the least similar pair, then repeatedly adds the candidate
/// whose maximum similarity to the chosen set is smallest. Ties go to the
/// lowest index. Returns sorted indices.
pub fn greedy_select(m: &SimilarityMatrix, n: usize) -> Result<Vec<usize>> {
    Ok(sorted(greedy_trace(m, n)?))
}

/// Selection order of [`greedy_select`]: the initial pair, then each addition.
pub fn greedy_trace(m: &SimilarityMatrix, n: usize) -> Result<Vec<usize>> {
    let size = m.len();
    if n < 2 || n > size {
        return Err(invalid(format!(
            "ensemble size {n} must lie in [2, {size}]"
        )));
    }
    let mut best = (0, 1);
    for a in 0..size {
        for b in a + 1..size {
            if m.get(a, b) < m.get(best.0, best.1) {
                best = (a, b);
            }
        }
    }
    let mut chosen = vec![best.0, best.1];
    while chosen.len() < n {
        let mut pick: Option<(usize, f64)> = None;
        for c in (0..size).filter(|c| !chosen.contains(c)) {
            let worst = chosen
                .iter()
                .map(|&s| m.get(c, s))
                .fold(f64::NEG_INFINITY, f64::max);
            if pick.is_none_or(|(_, w)| worst < w) {
                pick = Some((c, worst));
            }
        }
        chosen.push(pick.expect("candidates remain").0);
    }
    Ok(chosen)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> SimilarityMatrix {
        let names = (0..rows.len()).map(|i| format!("m{i}")).collect();
        SimilarityMatrix::new(names, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 1.0, 0.0]);
        assert!((cosine(&a, &b).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((cosine(&b, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&b, &b.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&a, &Tensor::zeros(&[3])), None);
        let z = Tensor::zeros(&[3]);
        assert!(
            (mean_cosine(&[a.clone(), z.clone()], &[b.clone(), b.clone()]).unwrap()
                - 0.5f64.sqrt())
            .abs()
                < 1e-15
        );
        assert!(mean_cosine(&[z.clone()], &[b]).is_err());
    }

    #[test]
    fn greedy_examples() {
        let m = matrix(&[&[1.0, 0.9, 0.1], &[0.9, 1.0, 0.2], &[0.1, 0.2, 1.0]]);
        assert_eq!(greedy_select(&m, 2).unwrap(), vec![0, 2]);
        assert_eq!(greedy_select(&m, 3).unwrap(), vec![0, 1, 2]);
        assert!(greedy_select(&m, 1).is_err() && greedy_select(&m, 4).is_err());
        let tie = matrix(&[
            &[1.0, 0.5, 0.5, 0.0],
            &[0.5, 1.0, 0.9, 0.5],
            &[0.5, 0.9, 1.0, 0.5],
            &[0.0, 0.5, 0.5, 1.0],
        ]);
        assert_eq!(greedy_trace(&tie, 3).unwrap(), vec![0, 3, 1]);
        assert_eq!(greedy_select(&tie, 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn rejects_bad_matrices() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(
            SimilarityMatrix::new(names.clone(), vec![vec![1.0, 0.2], vec![0.3, 1.0]]).is_err()
        );
        assert!(
            SimilarityMatrix::new(names.clone(), vec![vec![0.9, 0.2], vec![0.2, 1.0]]).is_err()
        );
        assert!(SimilarityMatrix::new(names, vec![vec![1.0, 1.5], vec![1.5, 1.0]]).is_err());
    }

    fn random_matrix(n: usize, vals: &[f64]) -> SimilarityMatrix {
        let mut e = vec![vec![1.0; n]; n];
        let mut k = 0;
        for a in 0..n {
            for b in a + 1..n {
                e[a][b] = vals[k];
                e[b][a] = vals[k];
                k += 1;
            }
        }
        SimilarityMatrix::new((0..n).map(|i| i.to_string()).collect(), e).unwrap()
    }

    proptest! {
        #[test]
        fn initial_pair_is_global_minimum(vals in proptest::collection::vec(-1.0f64..1.0, 15)) {
            let m = random_matrix(6, &vals);
            let t = greedy_trace(&m, 2).unwrap();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(m.get(t[0], t[1]), min);
        }

        #[test]
        fn permutation_relabels_selection(vals in proptest::collection::vec(-1.0f64..1.0, 15), n in 2usize..7) {
            // Distinct random values make ties impossible, so relabeling is exact.
            let m = random_matrix(6, &vals);
            let perm = [3usize, 0, 5, 1, 4, 2];
            let mut e = vec![vec![0.0; 6]; 6];
            for a in 0..6 {
                for b in 0..6 {
                    e[perm[a]][perm[b]] = m.get(a, b);
                }
            }
            let pm = SimilarityMatrix::new(m.names.clone(), e).unwrap();
            let mapped = sorted(greedy_select(&m, n).unwrap().into_iter().map(|i| perm[i]).collect());
            prop_assert_eq!(mapped, greedy_select(&pm, n).unwrap());
        }
    }
}
