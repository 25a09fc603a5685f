use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

pub(crate) fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid!("{:?} is not a permutation of rank {}", perm, rank));
    }
    let in_strides = strides(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let src = t.data();
    let mut data = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        data.push(src[offset]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            offset += st[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            offset -= st[axis] * index[axis];
            index[axis] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = permute_tensor(self.value(x), perm)?;
        self.push(v, Op::Permute(x, perm.to_vec()), "permute")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total_axis = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(invalid!("concat shape mismatch {:?} vs {:?}", s, base));
            }
            total_axis += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Concat(xs.to_vec(), axis), "concat")
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    Ok(match op {
        Op::Reshape(x) => vec![(*x, g.clone().reshape(graph.shape(*x))?)],
        Op::Permute(x, perm) => vec![(*x, permute_tensor(g, &inverse(perm))?)],
        Op::Concat(xs, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[*axis] * inner;
            let mut start = 0;
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                let xs_shape = graph.shape(x);
                let chunk = xs_shape[*axis] * inner;
                let mut data = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    data.extend_from_slice(&g.data()[o * full + start..o * full + start + chunk]);
                }
                start += chunk;
                out.push((x, Tensor::new(xs_shape, data)?));
            }
            out
        }
        _ => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let p = permute_tensor(&t, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(permute_tensor(&t, &[0, 0]).is_err());
    }

    #[test]
    fn concat_middle_axis() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 2], |i| i as f32));
        let b = g.constant(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f32));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
    }
}
