use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Logical `rows×cols` view of a stored row-major `[r, c]` matrix, optionally
/// transposed, as `(rows, cols, strides)`.
fn view(r: usize, c: usize, transposed: bool) -> (usize, usize, (isize, isize)) {
    if transposed {
        (c, r, (1, c as isize))
    } else {
        (r, c, (c as isize, 1))
    }
}

fn matrix_dims(shape: &[usize], batched: bool) -> Result<(usize, usize, usize)> {
    match (batched, shape) {
        (false, &[r, c]) => Ok((1, r, c)),
        (true, &[b, r, c]) => Ok((b, r, c)),
        _ => Err(invalid!("unexpected operand shape {:?}", shape)),
    }
}

/// `op(a) · op(b)` over an optional leading batch axis.
fn product<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool, batched: bool) -> Result<Tensor<T>> {
    let (ba, ra, ca) = matrix_dims(a.shape(), batched)?;
    let (bb, rb, cb) = matrix_dims(b.shape(), batched)?;
    let (m, k, sa) = view(ra, ca, ta);
    let (k2, n, sb) = view(rb, cb, tb);
    if k != k2 || ba != bb {
        return Err(invalid!(
            "matmul dimension mismatch: {:?}{} · {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        ));
    }
    let shape = if batched { vec![ba, m, n] } else { vec![m, n] };
    let mut out = Tensor::zeros(&shape);
    for i in 0..ba {
        let ai = &a.data()[i * ra * ca..(i + 1) * ra * ca];
        let bi = &b.data()[i * rb * cb..(i + 1) * rb * cb];
        let ci = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
        T::gemm(m, k, n, ai, sa, bi, sb, ci, (n as isize, 1), false);
    }
    Ok(out)
}

impl<T: Real> Graph<T> {
    /// Matrix product `a · b` of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with either operand optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = product(self.value(a), self.value(b), ta, tb, false)?;
        self.push(v, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    /// Batched product of `[B,M,K]` and `[B,K,N]`, transposes per matrix.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = product(self.value(a), self.value(b), ta, tb, true)?;
        self.push(v, Op::Bmm { a, b, ta, tb }, "bmm")
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let (a, b, ta, tb, batched) = match *op {
        Op::MatMul { a, b, ta, tb } => (a, b, ta, tb, false),
        Op::Bmm { a, b, ta, tb } => (a, b, ta, tb, true),
        _ => unreachable!(),
    };
    // C = op(A)·op(B):  d op(A) = G·op(B)ᵀ,  d op(B) = op(A)ᵀ·G.
    // For stored A: dA = d op(A) when not transposed, else (G·op(B)ᵀ)ᵀ = op(B)·Gᵀ.
    let (av, bv) = (graph.value(a), graph.value(b));
    let mut out = Vec::with_capacity(2);
    if graph.requires_grad(a) {
        let da = if ta { product(bv, g, tb, true, batched)? } else { product(g, bv, false, !tb, batched)? };
        out.push((a, da));
    }
    if graph.requires_grad(b) {
        let db = if tb { product(g, av, true, ta, batched)? } else { product(av, g, !ta, false, batched)? };
        out.push((b, db));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_left_factor() {
        let mut g = Graph::<f32>::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let a = Tensor::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0);
        let av = g.constant(a.clone());
        let c = g.matmul(eye, av).unwrap();
        assert_eq!(g.value(c), &a);
    }

    #[test]
    fn mismatch_is_invalid_argument() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_t(a, b, false, true).is_ok());
    }
}
