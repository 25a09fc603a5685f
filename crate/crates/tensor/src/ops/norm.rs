use crate::error::{invalid, Result};
use crate::graph::{BatchNormMode, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call; used by the
/// caller to update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased (n−1) variance.
    pub var: Tensor<T>,
}

impl<T: Real> Graph<T> {
    /// Batch normalization over N×H×W per channel.
    ///
    /// `running` is read in eval mode only. Train mode returns the batch
    /// statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: (&Tensor<T>, &Tensor<T>),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta)), ("running mean", running.0), ("running var", running.1)] {
            if t.shape() != [c] {
                return Err(invalid!("batch-norm {} has shape {:?}, expected [{}]", name, t.shape(), c));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                if m < 2 {
                    return Err(invalid!("training-mode batch norm needs more than one value per channel"));
                }
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let mut acc = 0f64;
                    for i in 0..n {
                        acc += xv.data()[(i * c + ch) * hw..][..hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0f64;
                    for i in 0..n {
                        sq += xv.data()[(i * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v.to_f64_lossy() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var.iter().map(|v| T::of(v * m as f64 / (m - 1) as f64)).collect();
                let stats = BatchStats {
                    mean: Tensor::new(&[c], mean.iter().map(|&v| T::of(v)).collect())?,
                    var: Tensor::new(&[c], unbiased)?,
                };
                let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
                let var_t: Vec<T> = var.iter().map(|&v| T::of(v)).collect();
                (mean_t, var_t, Some(stats))
            }
            BatchNormMode::Eval => (running.0.data().to_vec(), running.1.data().to_vec(), None),
        };
        let eps = T::of(eps);
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = Tensor::zeros(xv.shape());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xv.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out.data_mut()[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let var = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode }, "batch_norm")?;
        Ok((var, stats))
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } = op else { unreachable!() };
    let (n, c, h, w) = graph.value(*x).dims4()?;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let gd = g.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sum_g[ch] = sum_g[ch] + gd[j];
                sum_gx[ch] = sum_gx[ch] + gd[j] * xhat[j];
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    if graph.requires_grad(*x) {
        let gamma_v = graph.value(*gamma).data();
        let mut dx = Tensor::zeros(graph.shape(*x));
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let scale = gamma_v[ch] * inv_std[ch];
                for j in base..base + hw {
                    dx.data_mut()[j] = match mode {
                        BatchNormMode::Eval => gd[j] * scale,
                        BatchNormMode::Train => {
                            scale / m * (m * gd[j] - sum_g[ch] - xhat[j] * sum_gx[ch])
                        }
                    };
                }
            }
        }
        out.push((*x, dx));
    }
    out.push((*gamma, Tensor::new(&[c], sum_gx)?));
    out.push((*beta, Tensor::new(&[c], sum_g)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f32>, gamma: f32, beta: f32) -> Tensor<f32> {
        let c = x.shape()[1];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gm = g.constant(Tensor::full(&[c], gamma));
        let bt = g.constant(Tensor::full(&[c], beta));
        let (rm, rv) = (Tensor::zeros(&[c]), Tensor::ones(&[c]));
        let (y, _) = g.batch_norm(xv, gm, bt, BatchNormMode::Train, (&rm, &rv), 1e-5).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        for value in [1.0f32, 0.1, -3.7, 1234.5] {
            let y = run(Tensor::full(&[2, 3, 2, 2], value), 1.0, 0.0);
            assert!(y.data().iter().all(|&v| v == 0.0), "value {value}: {y:?}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::from_fn(&[2, 2, 3, 1], |i| (i as f32).sin());
        let y = run(x, 0.0, 0.75);
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 2], 3.0));
        let gm = g.constant(Tensor::ones(&[1]));
        let bt = g.constant(Tensor::zeros(&[1]));
        let (rm, rv) = (Tensor::full(&[1], 1.0), Tensor::full(&[1], 4.0 - 1e-5));
        let (y, stats) = g.batch_norm(x, gm, bt, BatchNormMode::Eval, (&rm, &rv), 1e-5).unwrap();
        assert!(stats.is_none());
        assert!(g.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_wrong_parameter_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
        let gm = g.constant(Tensor::ones(&[2]));
        let bt = g.constant(Tensor::zeros(&[3]));
        let (rm, rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
        assert!(g.batch_norm(x, gm, bt, BatchNormMode::Train, (&rm, &rv), 1e-5).is_err());
    }
}
