use crate::error::Result;
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2()?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax_rows(x)?.map(|v| v.exp()))
}

impl<T: Real> Graph<T> {
    /// Row-wise log-softmax of an `[N,K]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = log_softmax_rows(self.value(x))?;
        self.push(v, Op::LogSoftmax(x), "log_softmax")
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    out_value: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let Op::LogSoftmax(x) = op else { unreachable!() };
    let (_, cols) = out_value.dims2()?;
    let mut dx = Vec::with_capacity(g.numel());
    for (grow, yrow) in g.data().chunks(cols).zip(out_value.data().chunks(cols)) {
        let total = grow.iter().copied().sum::<T>();
        dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * total));
    }
    Ok(vec![(*x, Tensor::new(graph.shape(*x), dx)?)])
}
