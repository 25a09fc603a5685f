use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of the first maximum; ties resolve to the lowest offset.
fn argmax_of<T: Real>(data: &[T], offsets: impl Iterator<Item = usize>) -> usize {
    let mut best = usize::MAX;
    for o in offsets {
        if best == usize::MAX || data[o] > data[best] {
            best = o;
        }
    }
    best
}

fn pooled_extent(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || kernel > len {
        return Err(invalid!("pool kernel {} / stride {} invalid for extent {}", kernel, stride, len));
    }
    Ok((len - kernel) / stride + 1)
}

impl<T: Real> Graph<T> {
    fn select(&mut self, x: Var, shape: &[usize], source: Vec<usize>, name: &str) -> Result<Var> {
        let data = source.iter().map(|&o| self.value(x).data()[o]).collect();
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Select { x, source }, name)
    }

    /// Pick elements of `x` by flat offset into a 1-D result.
    pub fn gather(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = offsets.iter().find(|&&o| o >= n) {
            return Err(invalid!("gather offset {} out of range for {} elements", bad, n));
        }
        self.select(x, &[offsets.len()], offsets.to_vec(), "gather")
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (pooled_extent(h, kernel, stride)?, pooled_extent(w, kernel, stride)?);
        let data = self.value(x).data();
        let mut source = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let window = (0..kernel).flat_map(|ki| {
                        (0..kernel).map(move |kj| base + (oi * stride + ki) * w + oj * stride + kj)
                    });
                    source.push(argmax_of(data, window));
                }
            }
        }
        self.select(x, &[n, c, ho, wo], source, "max_pool2d")
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (pooled_extent(h, kernel, stride)?, pooled_extent(w, kernel, stride)?);
        let area = T::of((kernel * kernel) as f64);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = T::zero();
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc = acc + data[base + (oi * stride + ki) * w + oj * stride + kj];
                        }
                    }
                    out.push(acc / area);
                }
            }
        }
        let v = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(v, Op::AvgPool { x, kernel, stride }, "avg_pool2d")
    }

    /// Mean over H×W → `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let v = Tensor::new(&[n, c, 1, 1], data)?;
        self.push(v, Op::GlobalAvg(x), "global_avg_pool")
    }

    /// Max over H×W → `[N,C,1,1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self.value(x).data();
        let source = (0..n * c).map(|p| argmax_of(data, p * hw..(p + 1) * hw)).collect();
        self.select(x, &[n, c, 1, 1], source, "global_max_pool")
    }

    /// Mean over C → `[N,1,H,W]`.
    pub fn channelwise_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let denom = T::of(c as f64);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                out.push((0..c).map(|ch| data[(i * c + ch) * hw + p]).sum::<T>() / denom);
            }
        }
        let v = Tensor::new(&[n, 1, h, w], out)?;
        self.push(v, Op::ChannelMean(x), "channelwise_mean")
    }

    /// Max over C → `[N,1,H,W]`.
    pub fn channelwise_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self.value(x).data();
        let mut source = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                source.push(argmax_of(data, (0..c).map(|ch| (i * c + ch) * hw + p)));
            }
        }
        self.select(x, &[n, 1, h, w], source, "channelwise_max")
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    Ok(match op {
        Op::Select { x, source } => {
            let mut dx = Tensor::zeros(graph.shape(*x));
            let d = dx.data_mut();
            for (&o, &gv) in source.iter().zip(g.data()) {
                d[o] = d[o] + gv;
            }
            vec![(*x, dx)]
        }
        Op::AvgPool { x, kernel, stride } => {
            let (n, c, h, w) = graph.value(*x).dims4()?;
            let (ho, wo) = (g.shape()[2], g.shape()[3]);
            let area = T::of((kernel * kernel) as f64);
            let mut dx = Tensor::zeros(graph.shape(*x));
            let d = dx.data_mut();
            for plane in 0..n * c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let gv = g.data()[(plane * ho + oi) * wo + oj] / area;
                        for ki in 0..*kernel {
                            for kj in 0..*kernel {
                                let at = plane * h * w + (oi * stride + ki) * w + oj * stride + kj;
                                d[at] = d[at] + gv;
                            }
                        }
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::GlobalAvg(x) => {
            let (_, _, h, w) = graph.value(*x).dims4()?;
            let hw = h * w;
            let denom = T::of(hw as f64);
            let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv / denom, hw)).collect();
            vec![(*x, Tensor::new(graph.shape(*x), data)?)]
        }
        Op::ChannelMean(x) => {
            let (n, c, h, w) = graph.value(*x).dims4()?;
            let hw = h * w;
            let denom = T::of(c as f64);
            let mut dx = Tensor::zeros(graph.shape(*x));
            for i in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        dx.data_mut()[(i * c + ch) * hw + p] = g.data()[i * hw + p] / denom;
                    }
                }
            }
            vec![(*x, dx)]
        }
        _ => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channelwise_max_of_constant_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 3], |i| if i < 6 { 1.0 } else { 2.0 }));
        let m = g.channelwise_max(x).unwrap();
        assert_eq!(g.value(m), &Tensor::full(&[1, 1, 2, 3], 2.0));
        let a = g.channelwise_mean(x).unwrap();
        assert_eq!(g.value(a), &Tensor::full(&[1, 1, 2, 3], 1.5));
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 3.0, 1.0, 2.0]).unwrap());
        let p = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn global_pools() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 1, 2], |i| i as f64));
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 2.5]);
        assert_eq!(g.value(m).data(), &[1.0, 3.0]);
        assert_eq!(g.value(m).shape(), &[1, 2, 1, 1]);
    }

    #[test]
    fn gather_bounds() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2], |i| i as f32));
        let y = g.gather(x, &[3, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0]);
        assert!(g.gather(x, &[4]).is_err());
    }
}
