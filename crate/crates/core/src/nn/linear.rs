//! Fully connected layer.

use ndarray::Array2;
use rand::Rng;

use super::Param;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct LinearCtx {
    x: Array2<f32>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::he_normal(&[d_in, d_out], d_in, rng),
            bias: Param::zeros(&[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCtx) {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("weight is 2-d");
        let mut y = x.dot(&w);
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        (y, LinearCtx { x: x.clone() })
    }

    pub fn backward(&mut self, dy: &Array2<f32>, ctx: &LinearCtx) -> Array2<f32> {
        let dw = ctx.x.t().dot(dy);
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
        {
            let g = self.bias.grad.as_slice_mut().expect("contiguous bias grad");
            for row in dy.rows() {
                for (gi, di) in g.iter_mut().zip(row.iter()) {
                    *gi += *di;
                }
            }
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("weight is 2-d");
        dy.dot(&w.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_matmul() {
        let mut rng = util::rng_for(3, &[0]);
        let mut lin = Linear::new(2, 2, &mut rng);
        lin.weight.value[[0, 0]] = 1.0;
        lin.weight.value[[0, 1]] = 2.0;
        lin.weight.value[[1, 0]] = -1.0;
        lin.weight.value[[1, 1]] = 0.5;
        lin.bias.value[[0]] = 0.1;
        lin.bias.value[[1]] = -0.1;
        let x = array![[1.0f32, 2.0]];
        let (y, _) = lin.forward(&x);
        assert!((y[[0, 0]] - (1.0 - 2.0 + 0.1)).abs() < 1e-6);
        assert!((y[[0, 1]] - (2.0 + 1.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn gradient_finite_difference() {
        let mut rng = util::rng_for(4, &[0]);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = array![[0.5f32, -0.2, 0.8], [1.0, 0.3, -0.7]];
        let (y, ctx) = lin.forward(&x);
        let dy = Array2::from_elem(y.dim(), 1.0f32);
        let dx = lin.backward(&dy, &ctx);

        let h = 1e-2f32;
        for &(r, c) in &[(0usize, 0usize), (2, 1)] {
            let orig = lin.weight.value[[r, c]];
            lin.weight.value[[r, c]] = orig + h;
            let (yp, _) = lin.forward(&x);
            lin.weight.value[[r, c]] = orig - h;
            let (ym, _) = lin.forward(&x);
            lin.weight.value[[r, c]] = orig;
            let fd = (yp.sum() - ym.sum()) / (2.0 * h);
            assert!((fd - lin.weight.grad[[r, c]]).abs() < 1e-2);
        }
        let mut xm = x.clone();
        let orig = xm[[1, 2]];
        xm[[1, 2]] = orig + h;
        let (yp, _) = lin.forward(&xm);
        xm[[1, 2]] = orig - h;
        let (ym, _) = lin.forward(&xm);
        let fd = (yp.sum() - ym.sum()) / (2.0 * h);
        assert!((fd - dx[[1, 2]]).abs() < 1e-2);
    }
}
