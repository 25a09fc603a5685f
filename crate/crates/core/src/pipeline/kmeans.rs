//! k-means++ seeding followed by Lloyd iterations.

use awb_tensor::{RngStream, Tensor};
use rayon::prelude::*;

use crate::error::{invalid, AwbError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    /// Cluster of each input row.
    pub assignment: Vec<usize>,
    pub k: usize,
    /// `k×D`.
    pub centroids: Tensor<f64>,
    /// Sum of squared distances of the final assignment to the final
    /// centroids.
    pub inertia: f64,
    /// Inertia after every update step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(t: &Tensor<f64>, i: usize, d: usize) -> &[f64] {
    &t.data()[i * d..(i + 1) * d]
}

/// Nearest centroid per point (ties to the lower index) and its distance.
fn assign(points: &Tensor<f64>, centroids: &Tensor<f64>, d: usize) -> Vec<(usize, f64)> {
    let k = centroids.shape()[0];
    (0..points.shape()[0])
        .into_par_iter()
        .map(|i| {
            let p = row(points, i, d);
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let dist = sq_dist(p, row(centroids, j, d));
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best
        })
        .collect()
}

fn inertia_of(points: &Tensor<f64>, centroids: &Tensor<f64>, assignment: &[usize], d: usize) -> f64 {
    assignment.iter().enumerate().map(|(i, &c)| sq_dist(row(points, i, d), row(centroids, c, d))).sum()
}

fn plus_plus(points: &Tensor<f64>, k: usize, d: usize, rng: &mut RngStream) -> Tensor<f64> {
    let m = points.shape()[0];
    let mut chosen = vec![rng.uniform_int(0, m - 1)];
    let mut nearest: Vec<f64> = (0..m).map(|i| sq_dist(row(points, i, d), row(points, chosen[0], d))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            // Every point coincides with a chosen centre: take any unused index.
            let unused: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
            unused[rng.uniform_int(0, unused.len() - 1)]
        };
        chosen.push(next);
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(sq_dist(row(points, i, d), row(points, next, d)));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &c in &chosen {
        data.extend_from_slice(row(points, c, d));
    }
    Tensor::new(&[k, d], data).expect("k×d centroids")
}

/// Cluster the rows of `points` (`M×D`) into `k` groups.
///
/// Empty clusters are reseeded from the point farthest from its current
/// centroid. Stops when no centroid moves by more than `tol` (Euclidean)
/// or after `max_iters` update steps.
pub fn kmeans(points: &Tensor<f64>, k: usize, rng: &mut RngStream, max_iters: usize, tol: f64) -> Result<PseudoLabels> {
    let (m, d) = points.dims2()?;
    if k == 0 || k > m {
        return Err(invalid!("k-means needs 1 ≤ k ≤ M, got k = {k}, M = {m}"));
    }
    if max_iters == 0 {
        return Err(invalid!("k-means needs at least one iteration"));
    }
    if !points.is_finite() {
        return Err(AwbError::Numeric("k-means input contains non-finite values".into()));
    }
    let mut centroids = plus_plus(points, k, d, rng);
    let mut history = Vec::new();
    let mut assignment = vec![0; m];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let nearest = assign(points, &centroids, d);
        let mut dist: Vec<f64> = nearest.iter().map(|&(_, dd)| dd).collect();
        for (a, &(c, _)) in assignment.iter_mut().zip(&nearest) {
            *a = c;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            // Farthest point among clusters that can spare one.
            let far = (0..m)
                .filter(|&i| counts[assignment[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .expect("k ≤ M leaves a cluster with two points");
            counts[assignment[far]] -= 1;
            counts[j] = 1;
            assignment[far] = j;
            dist[far] = 0.0;
            centroids.data_mut()[j * d..(j + 1) * d].copy_from_slice(row(points, far, d));
        }

        let mut sums = vec![0.0; k * d];
        for (i, &a) in assignment.iter().enumerate() {
            for (s, &p) in sums[a * d..(a + 1) * d].iter_mut().zip(row(points, i, d)) {
                *s += p;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let n = counts[j] as f64;
            let mut moved = 0.0;
            for t in 0..d {
                let new = sums[j * d + t] / n;
                let old = centroids.data()[j * d + t];
                moved += (new - old) * (new - old);
                centroids.data_mut()[j * d + t] = new;
            }
            shift = shift.max(moved.sqrt());
        }
        history.push(inertia_of(points, &centroids, &assignment, d));
        if shift < tol {
            break;
        }
    }
    let inertia = *history.last().expect("one iteration");
    if !inertia.is_finite() {
        return Err(AwbError::Numeric("k-means inertia is not finite".into()));
    }
    Ok(PseudoLabels { assignment, k, centroids, inertia, inertia_history: history, iterations })
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn l2_normalize_rows(t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = t.dims2()?;
    let mut out = t.clone();
    for i in 0..n {
        let r = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}
