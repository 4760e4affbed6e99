//! 2D convolution via im2col and a single matmul per batch.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::Param;

/// Convolution over channels-last batches. The kernel is stored flattened as
/// a (KH*KW*Cin, Cout) matrix so forward and backward are plain matmuls.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved activations for one forward call.
pub struct ConvCtx {
    cols: Array2<f32>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = kernel / 2;
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            weight: Param::he_normal(&[fan_in, c_out], fan_in, rng),
            bias: Param::zeros(&[c_out]),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCtx) {
        let (n, h, w, c) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x, oh, ow);

        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("weight is 2-d");
        let mut out = cols.dot(&w2);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        let y = out
            .into_shape_with_order((n, oh, ow, self.c_out))
            .expect("row count matches n*oh*ow");
        (
            y,
            ConvCtx {
                cols,
                in_dims: (n, h, w, c),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates weight/bias grads and returns dL/dx.
    pub fn backward(&mut self, dy: &Array4<f32>, ctx: &ConvCtx) -> Array4<f32> {
        let (n, h, w, _c) = ctx.in_dims;
        let (oh, ow) = ctx.out_hw;
        let rows = n * oh * ow;
        let dy_flat = dy
            .view()
            .into_shape_with_order((rows, self.c_out))
            .expect("dy matches forward dims");

        // dW = cols^T . dy
        let dw = ctx.cols.t().dot(&dy_flat);
        {
            let g = self
                .weight
                .grad
                .as_slice_mut()
                .expect("contiguous weight grad");
            for (gi, di) in g.iter_mut().zip(dw.iter()) {
                *gi += *di;
            }
        }
        // db = column sums of dy
        {
            let g = self.bias.grad.as_slice_mut().expect("contiguous bias grad");
            for row in dy_flat.rows() {
                for (gi, di) in g.iter_mut().zip(row.iter()) {
                    *gi += *di;
                }
            }
        }

        // dX = col2im(dy . W^T)
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("weight is 2-d");
        let dcols = dy_flat.dot(&w2.t());
        self.col2im(&dcols, n, h, w, oh, ow)
    }

    fn im2col(&self, x: &Array4<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (n, h, w, c) = x.dim();
        let k = self.kernel;
        let cols_width = k * k * c;
        let mut cols = Array2::<f32>::zeros((n * oh * ow, cols_width));
        let xs = x.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("contiguous cols");
        for b in 0..n {
            for i in 0..oh {
                let ib = (i * self.stride) as isize - self.pad as isize;
                for j in 0..ow {
                    let jb = (j * self.stride) as isize - self.pad as isize;
                    let row_off = ((b * oh + i) * ow + j) * cols_width;
                    for ki in 0..k {
                        let yy = ib + ki as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = jb + kj as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let src = ((b * h + yy as usize) * w + xx as usize) * c;
                            let dst = row_off + (ki * k + kj) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        dcols: &Array2<f32>,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Array4<f32> {
        let k = self.kernel;
        let c = self.c_in;
        let cols_width = k * k * c;
        let mut dx = Array4::<f32>::zeros((n, h, w, c));
        let ds = dcols.as_slice().expect("contiguous dcols");
        let out = dx.as_slice_mut().expect("contiguous dx");
        for b in 0..n {
            for i in 0..oh {
                let ib = (i * self.stride) as isize - self.pad as isize;
                for j in 0..ow {
                    let jb = (j * self.stride) as isize - self.pad as isize;
                    let row_off = ((b * oh + i) * ow + j) * cols_width;
                    for ki in 0..k {
                        let yy = ib + ki as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let xx = jb + kj as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + yy as usize) * w + xx as usize) * c;
                            let src = row_off + (ki * k + kj) * c;
                            for t in 0..c {
                                out[dst + t] += ds[src + t];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;

    /// Direct convolution used as the oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, h, w, c) = x.dim();
        let (oh, ow) = conv.out_hw(h, w);
        let k = conv.kernel;
        let mut y = Array4::<f32>::zeros((n, oh, ow, conv.c_out));
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..conv.c_out {
                        let mut acc = conv.bias.value[[co]];
                        for ki in 0..k {
                            for kj in 0..k {
                                let yy = (i * conv.stride + ki) as isize - conv.pad as isize;
                                let xx = (j * conv.stride + kj) as isize - conv.pad as isize;
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let widx = (ki * k + kj) * c + ci;
                                    acc += x[[b, yy as usize, xx as usize, ci]]
                                        * conv.weight.value[[widx, co]];
                                }
                            }
                        }
                        y[[b, i, j, co]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = util::rng_for(1, &[0]);
        for (stride, h, w) in [(1, 5, 6), (2, 6, 6), (2, 7, 5)] {
            let conv = Conv2d::new(3, 4, 3, stride, &mut rng);
            let x = Array4::from_shape_fn((2, h, w, 3), |(b, i, j, c)| {
                ((b + i * 7 + j * 3 + c) % 13) as f32 * 0.1 - 0.5
            });
            let (y, _) = conv.forward(&x);
            let oracle = naive_conv(&conv, &x);
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = util::rng_for(2, &[0]);
        let mut conv = Conv2d::new(2, 3, 3, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 4, 4, 2), |(_, i, j, c)| {
            0.1 * ((i * 4 + j + c) as f32) - 0.3
        });

        // Scalar objective: sum of outputs.
        let (y, ctx) = conv.forward(&x);
        let dy = Array4::from_elem(y.dim(), 1.0f32);
        let dx = conv.backward(&dy, &ctx);

        let h = 1e-2f32;
        // Check a scattering of weight coordinates.
        for &(r, c) in &[(0usize, 0usize), (5, 1), (11, 2), (17, 0)] {
            let orig = conv.weight.value[[r, c]];
            conv.weight.value[[r, c]] = orig + h;
            let (yp, _) = conv.forward(&x);
            conv.weight.value[[r, c]] = orig - h;
            let (ym, _) = conv.forward(&x);
            conv.weight.value[[r, c]] = orig;
            let fd = (yp.sum() - ym.sum()) / (2.0 * h);
            let an = conv.weight.grad[[r, c]];
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "fd {fd} an {an}");
        }
        // And input coordinates.
        let mut xm = x.clone();
        for &(i, j, c) in &[(0usize, 0usize, 0usize), (2, 3, 1), (3, 1, 0)] {
            let orig = xm[[0, i, j, c]];
            xm[[0, i, j, c]] = orig + h;
            let (yp, _) = conv.forward(&xm);
            xm[[0, i, j, c]] = orig - h;
            let (ym, _) = conv.forward(&xm);
            xm[[0, i, j, c]] = orig;
            let fd = (yp.sum() - ym.sum()) / (2.0 * h);
            let an = dx[[0, i, j, c]];
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "fd {fd} an {an}");
        }
    }
}
