//! Inter-network difference measured on gradient-weighted class
//! activation maps.

use std::fs;
use std::path::Path;

use awb_tensor::{Graph, Real, Tensor, Var};

use crate::error::{invalid, AwbError, Result};
use crate::network::{Backbone, Tap};
use crate::params::{Mode, Trainable};

/// A model that exposes class logits and one activation to explain.
pub trait CamModel<T: Real> {
    /// Eval-mode forward returning `(logits [N,K], activation [N,C,H,W])`.
    /// The activation must lie on the gradient path to the logits.
    fn cam_forward(&mut self, graph: &mut Graph<T>, x: Var) -> Result<(Var, Var)>;
}

/// A backbone read at a fixed tap.
pub struct TappedBackbone<'a, T: Real> {
    pub net: &'a mut Backbone<T>,
    pub tap: Tap,
}

impl<T: Real> CamModel<T> for TappedBackbone<'_, T> {
    fn cam_forward(&mut self, graph: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        // All groups marked trainable so the tap lies on a gradient path;
        // eval mode keeps batch norm on running statistics.
        let (out, _) = self.net.forward(graph, x, Mode::Eval, Trainable::ALL)?;
        Ok((out.logits, self.tap.select(&out)))
    }
}

/// Maps for a batch, with the class each map explains.
#[derive(Clone, Debug)]
pub struct CamBatch {
    /// `H×W` maps in [0,1].
    pub maps: Vec<Tensor<f64>>,
    pub classes: Vec<usize>,
}

/// Min-max normalize a non-negative map. An all-zero map stays zero; a
/// constant positive map becomes all ones.
pub fn normalize_map(map: &mut Tensor<f64>) {
    let (lo, hi) = map.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= 0.0 {
        map.data_mut().iter_mut().for_each(|v| *v = 0.0);
    } else if hi == lo {
        map.data_mut().iter_mut().for_each(|v| *v = 1.0);
    } else {
        map.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
}

/// Grad-CAM for every image of `images`. With `targets = None` each image
/// is explained for the model's own top class.
pub fn grad_cam<T: Real, M: CamModel<T> + ?Sized>(
    model: &mut M,
    images: &Tensor<T>,
    targets: Option<&[usize]>,
) -> Result<CamBatch> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let (logits, act) = model.cam_forward(&mut g, x)?;
    let (ln, k) = g.value(logits).dims2()?;
    if ln != n {
        return Err(invalid!("model returned {ln} logit rows for {n} images"));
    }
    let classes: Vec<usize> = match targets {
        Some(t) => {
            if t.len() != n {
                return Err(invalid!("{} targets for {} images", t.len(), n));
            }
            if let Some(&bad) = t.iter().find(|&&c| c >= k) {
                return Err(invalid!("target class {bad} out of range for {k} classes"));
            }
            t.to_vec()
        }
        None => {
            let l = g.value(logits).data();
            (0..n)
                .map(|i| {
                    let row = &l[i * k..(i + 1) * k];
                    (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b })
                })
                .collect()
        }
    };
    let offsets: Vec<usize> = classes.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    let picked = g.gather(logits, &offsets)?;
    let total = g.sum(picked)?;
    let (an, c, h, w) = g.value(act).dims4()?;
    if an != n {
        return Err(invalid!("activation batch {an} differs from {n}"));
    }
    // Samples are independent in eval mode, so one sweep over the summed
    // target logits yields every per-sample gradient.
    let grads = g.backward(total)?;
    let zero = Tensor::zeros(&[n, c, h, w]);
    let grad = grads.get(act).unwrap_or(&zero);
    let a = g.value(act);
    let hw = h * w;
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let mut map = Tensor::<f64>::zeros(&[h, w]);
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let weight = grad.data()[base..base + hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
            for (m, v) in map.data_mut().iter_mut().zip(&a.data()[base..base + hw]) {
                *m += weight * v.to_f64_lossy();
            }
        }
        map.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        normalize_map(&mut map);
        maps.push(map);
    }
    Ok(CamBatch { maps, classes })
}

/// `sqrt(Σ |a_ij − b_ij|²)`.
pub fn frobenius_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid!("cannot compare maps of shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Mean Frobenius distance between the two networks' Grad-CAM maps over
/// `images`, each network explaining its own predicted class.
pub fn average_pair_difference<T: Real>(
    net_a: &mut Backbone<T>,
    net_b: &mut Backbone<T>,
    images: &Tensor<T>,
    tap: Tap,
    batch: usize,
) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(AwbError::Data("no images for the pair difference".into()));
    }
    let mut sum = 0.0;
    let mut start = 0;
    while start < n {
        let count = batch.max(1).min(n - start);
        let x = images.slice_batch(start, count)?;
        let ca = grad_cam(&mut TappedBackbone { net: net_a, tap }, &x, None)?;
        let cb = grad_cam(&mut TappedBackbone { net: net_b, tap }, &x, None)?;
        for (ma, mb) in ca.maps.iter().zip(&cb.maps) {
            sum += frobenius_diff(ma, mb)?;
        }
        start += count;
    }
    Ok(sum / n as f64)
}

/// Plain-text graymap (`P2`) with values scaled to 0..=255.
pub fn pgm_string(map: &Tensor<f64>) -> Result<String> {
    let (h, w) = map.dims2()?;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| ((map.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    fs::write(path, pgm_string(map)?).map_err(|e| AwbError::io(path, e))
}
