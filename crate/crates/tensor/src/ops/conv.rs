use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[_, c, h, wd], &[k, cw, kh, kw]) = (x, w) else {
            return Err(invalid!("conv2d expects N×C×H×W input and K×C×kh×kw weight, got {:?} and {:?}", x, w));
        };
        if c != cw {
            return Err(invalid!("conv2d channel mismatch: input {} vs weight {}", c, cw));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(invalid!("conv2d kernel {}×{} larger than padded input {}×{}", kh, kw, h + 2 * pad, wd + 2 * pad));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self { c, h, w: wd, k, kh, kw, stride, pad, ho, wo })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold one C×H×W sample into a `patch × spatial` matrix.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let sp = self.spatial();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * sp..(row + 1) * sp];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, d) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *d = if jj < 0 || jj >= self.w as isize { T::zero() } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold a `patch × spatial` matrix back, accumulating overlaps.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let sp = self.spatial();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * sp..(row + 1) * sp];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] = dst[jj as usize] + src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [geo.k] {
            return Err(invalid!("conv2d bias shape {:?} does not match {} filters", b.shape(), geo.k));
        }
    }
    let n = x.shape()[0];
    let (patch, sp) = (geo.patch(), geo.spatial());
    let in_item = geo.c * geo.h * geo.w;
    let mut out = Tensor::zeros(&[n, geo.k, geo.ho, geo.wo]);
    out.data_mut().par_chunks_mut(geo.k * sp).enumerate().for_each(|(i, y)| {
        let xi = &x.data()[i * in_item..(i + 1) * in_item];
        let mut scratch;
        let cols: &[T] = if geo.is_pointwise() {
            xi
        } else {
            scratch = vec![T::zero(); patch * sp];
            geo.im2col(xi, &mut scratch);
            &scratch
        };
        T::gemm(geo.k, patch, sp, w.data(), (patch as isize, 1), cols, (sp as isize, 1), y, (sp as isize, 1), false);
        if let Some(b) = b {
            for (row, &bias) in y.chunks_mut(sp).zip(b.data()) {
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
    });
    Ok(out)
}

/// Reference cross-correlation by direct nested loops.
pub fn conv2d_direct<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let n = x.shape()[0];
    let mut out = Tensor::zeros(&[n, geo.k, geo.ho, geo.wo]);
    for i in 0..n {
        for k in 0..geo.k {
            for oi in 0..geo.ho {
                for oj in 0..geo.wo {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[k]);
                    for c in 0..geo.c {
                        for ki in 0..geo.kh {
                            for kj in 0..geo.kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= geo.h as isize || jj >= geo.w as isize {
                                    continue;
                                }
                                acc = acc + x.at(&[i, c, ii as usize, jj as usize]) * w.at(&[k, c, ki, kj]);
                            }
                        }
                    }
                    let at = ((i * geo.k + k) * geo.ho + oi) * geo.wo + oj;
                    out.data_mut()[at] = acc;
                }
            }
        }
    }
    Ok(out)
}

impl<T: Real> Graph<T> {
    /// 2-D cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }
}

pub(crate) fn backward<T: Real>(
    graph: &Graph<T>,
    op: &Op<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let Op::Conv2d { x, w, b, stride, pad } = *op else { unreachable!() };
    let (xv, wv) = (graph.value(x), graph.value(w));
    let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad)?;
    let n = xv.shape()[0];
    let (patch, sp) = (geo.patch(), geo.spatial());
    let in_item = geo.c * geo.h * geo.w;
    let out_item = geo.k * sp;
    let mut out = Vec::with_capacity(3);

    if graph.requires_grad(x) {
        let mut dx = Tensor::zeros(xv.shape());
        dx.data_mut().par_chunks_mut(in_item).enumerate().for_each(|(i, dxi)| {
            let gi = &g.data()[i * out_item..(i + 1) * out_item];
            if geo.is_pointwise() {
                T::gemm(patch, geo.k, sp, wv.data(), (1, patch as isize), gi, (sp as isize, 1), dxi, (sp as isize, 1), false);
            } else {
                let mut cols = vec![T::zero(); patch * sp];
                T::gemm(patch, geo.k, sp, wv.data(), (1, patch as isize), gi, (sp as isize, 1), &mut cols, (sp as isize, 1), false);
                geo.col2im(&cols, dxi);
            }
        });
        out.push((x, dx));
    }
    if graph.requires_grad(w) {
        let mut dw = Tensor::zeros(wv.shape());
        let mut scratch = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * sp] };
        for i in 0..n {
            let xi = &xv.data()[i * in_item..(i + 1) * in_item];
            let gi = &g.data()[i * out_item..(i + 1) * out_item];
            let cols: &[T] = if geo.is_pointwise() {
                xi
            } else {
                geo.im2col(xi, &mut scratch);
                &scratch
            };
            T::gemm(geo.k, sp, patch, gi, (sp as isize, 1), cols, (1, sp as isize), dw.data_mut(), (patch as isize, 1), true);
        }
        out.push((w, dw));
    }
    if let Some(b) = b.filter(|&b| graph.requires_grad(b)) {
        let mut db = Tensor::zeros(&[geo.k]);
        for i in 0..n {
            for (k, row) in g.data()[i * out_item..(i + 1) * out_item].chunks(sp).enumerate() {
                db.data_mut()[k] = db.data()[k] + row.iter().copied().sum::<T>();
            }
        }
        out.push((b, db));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn scaling_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 1, 3, 3], 2.0));
    }

    #[test]
    fn hand_cross_correlation() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn lowered_path_matches_direct_loops() {
        let mut rng = RngStream::new(3, 0);
        for &(c, k, h, w, kh, stride, pad) in
            &[(3, 4, 7, 5, 3, 1, 1), (2, 3, 8, 8, 3, 2, 1), (4, 2, 5, 6, 1, 1, 0), (2, 2, 6, 4, 2, 2, 0), (1, 2, 4, 4, 7, 1, 3)]
        {
            let x = rng.normal_tensor::<f32>(&[2, c, h, w], 1.0);
            let wt = rng.normal_tensor::<f32>(&[k, c, kh, kh], 1.0);
            let b = rng.normal_tensor::<f32>(&[k], 1.0);
            let fast = conv_forward(&x, &wt, Some(&b), stride, pad).unwrap();
            let slow = conv2d_direct(&x, &wt, Some(&b), stride, pad).unwrap();
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
        let big = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, big, None, 1, 0).is_err());
    }
}
