use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

/// Output extent of a binary op. Ranks must agree; on a mismatched axis one
/// side must have extent 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(invalid!("rank mismatch {:?} vs {:?}", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(invalid!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

/// For every linear position of `out`, the offset into a tensor of shape
/// `src` broadcast to `out`.
pub(crate) fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let st: Vec<usize> =
        strides(src).iter().zip(src).map(|(&s, &e)| if e == 1 { 0 } else { s }).collect();
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; out.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for axis in (0..out.len()).rev() {
            index[axis] += 1;
            offset += st[axis];
            if index[axis] < out[axis] {
                break;
            }
            offset -= st[axis] * index[axis];
            index[axis] = 0;
        }
    }
    offsets
}

/// Sum `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let offsets = broadcast_offsets(target, grad.shape());
    let mut out = Tensor::zeros(target);
    let acc = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        acc[o] = acc[o] + g;
    }
    out
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ia = broadcast_offsets(a.shape(), &shape);
    let ib = broadcast_offsets(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(&shape, data)
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v < T::zero()) {
            return Err(invalid!("sqrt of a negative value"));
        }
        let v = self.value(x).map(|v| v.sqrt());
        self.push(v, Op::Sqrt(x), "sqrt")
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Result<Var> {
        let v = self.value(x).map(|v| if v > lo { v } else { lo });
        self.push(v, Op::ClampMin(x, lo), "clamp_min")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = T::of(t.numel() as f64);
        let v = Tensor::scalar(t.sum() / n);
        self.push(v, Op::Mean(x), "mean")
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid!("axis {} out of range for shape {:?}", axis, t.shape()));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let v = reduce_to(t, &shape);
        self.push(v, Op::SumAxis(x), "sum_axis")
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn backward_binary<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let (a, b) = match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => (*a, *b),
        _ => unreachable!(),
    };
    let (sa, sb) = (graph.shape(a).to_vec(), graph.shape(b).to_vec());
    let mut out = Vec::with_capacity(2);
    match op {
        Op::Add(..) => {
            out.push((a, reduce_to(g, &sa)));
            out.push((b, reduce_to(g, &sb)));
        }
        Op::Sub(..) => {
            out.push((a, reduce_to(g, &sa)));
            out.push((b, reduce_to(&g.map(|v| -v), &sb)));
        }
        Op::Mul(..) => {
            if graph.requires_grad(a) {
                let gb = binary(g, graph.value(b), |x, y| x * y)?;
                out.push((a, reduce_to(&gb, &sa)));
            }
            if graph.requires_grad(b) {
                let ga = binary(g, graph.value(a), |x, y| x * y)?;
                out.push((b, reduce_to(&ga, &sb)));
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

pub(crate) fn backward_unary<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    out_value: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let half = T::of(0.5);
    Ok(match op {
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
        Op::Relu(x) => {
            let gx = g.zip_map(graph.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
            vec![(*x, gx)]
        }
        Op::Sigmoid(x) => {
            let gx = g.zip_map(out_value, |gv, y| gv * y * (T::one() - y))?;
            vec![(*x, gx)]
        }
        Op::Sqrt(x) => {
            let gx = g.zip_map(out_value, |gv, y| gv * half / y)?;
            vec![(*x, gx)]
        }
        Op::ClampMin(x, lo) => {
            let gx = g.zip_map(graph.value(*x), |gv, xv| if xv > *lo { gv } else { T::zero() })?;
            vec![(*x, gx)]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(graph.shape(*x), g.data()[0]))],
        Op::Mean(x) => {
            let n = T::of(graph.value(*x).numel() as f64);
            vec![(*x, Tensor::full(graph.shape(*x), g.data()[0] / n))]
        }
        Op::SumAxis(x) => {
            let shape = graph.shape(*x).to_vec();
            let offsets = broadcast_offsets(g.shape(), &shape);
            let data = offsets.iter().map(|&o| g.data()[o]).collect();
            vec![(*x, Tensor::new(&shape, data)?)]
        }
        _ => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 1, 1], &[2, 1, 4, 5]).unwrap(), vec![2, 3, 4, 5]);
        assert!(broadcast_shape(&[2, 3], &[3, 3]).is_err());
        assert!(broadcast_shape(&[2, 3], &[3]).is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.sigmoid(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let b = g.param(Tensor::from_f64(&[3], &[4.0, 0.25, -3.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), g.value(b));
        assert_eq!(grads.get(b).unwrap(), g.value(a));
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[2, 3]));
        let b = g.param(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sum_axis_keeps_rank() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 1]);
        assert_eq!(g.value(s).data(), &[3.0, 7.0]);
    }
}
