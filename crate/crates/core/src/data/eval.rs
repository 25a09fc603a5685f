//! Single-query retrieval metrics: mean average precision and CMC.

use awb_tensor::{Real, Tensor};
use log::warn;
use rayon::prelude::*;

use crate::error::{invalid, Result};

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// Match rates at ranks 1, 5 and 10.
    pub cmc: [f64; 3],
    pub evaluated_queries: usize,
    /// Queries without any relevant gallery item.
    pub excluded_queries: usize,
}

fn normalized<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (n, d) = t.dims2()?;
    let mut v: Vec<f64> = t.data().iter().map(|x| x.to_f64_lossy()).collect();
    for row in v.chunks_mut(d.max(1)) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok((n, d, v))
}

/// AP of one ranked relevance list: mean over relevant positions `r` of
/// (relevant within the top `r`) / `r`.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Rank the gallery by Euclidean distance between L2-normalized
/// embeddings, ties broken by gallery index.
pub fn evaluate_retrieval<T: Real>(
    query: &Tensor<T>,
    query_ids: &[usize],
    gallery: &Tensor<T>,
    gallery_ids: &[usize],
) -> Result<RetrievalMetrics> {
    let (nq, dq, q) = normalized(query)?;
    let (ng, dg, g) = normalized(gallery)?;
    if dq != dg {
        return Err(invalid!("query dimension {dq} differs from gallery dimension {dg}"));
    }
    if query_ids.len() != nq || gallery_ids.len() != ng {
        return Err(invalid!("identity lists do not match the embedding counts"));
    }
    let d = dq;
    let per_query: Vec<Option<(f64, [bool; 3])>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            let mut order: Vec<(f64, usize)> = (0..ng)
                .map(|j| {
                    let gj = &g[j * d..(j + 1) * d];
                    (qi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let relevant: Vec<bool> = order.iter().map(|&(_, j)| gallery_ids[j] == query_ids[i]).collect();
            let ap = average_precision(&relevant)?;
            let first = relevant.iter().position(|&r| r).expect("has a hit");
            Some((ap, CMC_RANKS.map(|k| first < k)))
        })
        .collect();

    let mut sum_ap = 0.0;
    let mut cmc_hits = [0usize; 3];
    let mut evaluated = 0;
    for (ap, hits) in per_query.iter().flatten() {
        evaluated += 1;
        sum_ap += ap;
        for (c, &h) in cmc_hits.iter_mut().zip(hits) {
            *c += h as usize;
        }
    }
    let excluded = nq - evaluated;
    if excluded > 0 {
        warn!("{excluded} queries have no relevant gallery item and were excluded");
    }
    if evaluated == 0 {
        return Err(invalid!("no query has a relevant gallery item"));
    }
    let e = evaluated as f64;
    Ok(RetrievalMetrics {
        map: sum_ap / e,
        cmc: cmc_hits.map(|h| h as f64 / e),
        evaluated_queries: evaluated,
        excluded_queries: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn exact_copies_give_perfect_scores() {
        let q = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.2]).unwrap();
        let g = q.select_batch(&[2, 0, 1]).unwrap();
        let m = evaluate_retrieval(&q, &[0, 1, 2], &g, &[2, 0, 1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cmc, [1.0; 3]);
    }

    #[test]
    fn ties_resolve_by_gallery_index() {
        let q = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let m = evaluate_retrieval(&q, &[5], &g, &[4, 5]).unwrap();
        assert_eq!(m.map, 0.5);
        assert_eq!(m.cmc[0], 0.0);
    }

    #[test]
    fn queries_without_matches_are_excluded() {
        let q = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 2.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        let m = evaluate_retrieval(&q, &[0, 9], &g, &[0]).unwrap();
        assert_eq!((m.evaluated_queries, m.excluded_queries), (1, 1));
    }
}
