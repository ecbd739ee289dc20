//! Minimal convolutional network underneath the toy detector: stride-2
//! conv layers with leaky-ReLU, hand-rolled forward/backward via im2col so
//! gradients are exact and cheap to verify against finite differences.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (c_out, c_in * k * k)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Kaiming-style init for the leaky-ReLU stack.
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array2::from_shape_fn((c_out, c_in * kernel * kernel), |_| {
            // Box-Muller from two uniforms keeps us off extra distribution deps.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, d_cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut dx = Array3::zeros((self.c_in, h, w));
        for ci in 0..self.c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(ci, iy as usize, ix as usize)] += d_cols[(row, oy * ow + ox)];
                        }
                    }
                }
            }
        }
        dx
    }

    /// Forward pass returning the output map and the im2col buffer needed by
    /// `backward`.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = self.im2col(x);
        let mut out_mat = self.weight.dot(&cols);
        for co in 0..self.c_out {
            let b = self.bias[co];
            out_mat.row_mut(co).mapv_inplace(|v| v + b);
        }
        let out = out_mat.into_shape_with_order((self.c_out, oh, ow)).unwrap();
        (out, cols)
    }

    /// Gradients of weight/bias and the input, given the output gradient.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        d_out: &Array3<f64>,
        in_h: usize,
        in_w: usize,
    ) -> (Array2<f64>, Array1<f64>, Array3<f64>) {
        let (co, oh, ow) = d_out.dim();
        let d_mat = d_out
            .to_owned()
            .into_shape_with_order((co, oh * ow))
            .unwrap();
        let dw = d_mat.dot(&cols.t());
        let db = d_mat.sum_axis(ndarray::Axis(1));
        let d_cols = self.weight.t().dot(&d_mat);
        let dx = self.col2im(&d_cols, in_h, in_w);
        (dw, db, dx)
    }
}

pub fn leaky_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_grad(pre: &Array3<f64>, d_post: &Array3<f64>) -> Array3<f64> {
    let mut d = d_post.clone();
    d.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    d
}

/// A stack of conv layers with leaky-ReLU between them (linear head).
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub layers: Vec<Conv2d>,
}

/// Per-layer buffers kept from the forward pass for backprop.
pub struct ForwardCache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array3<f64>>,
    in_sizes: Vec<(usize, usize)>,
}

impl ConvStack {
    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, _) = layer.forward(&cur);
            cur = if i + 1 < self.layers.len() {
                leaky_relu(&out)
            } else {
                out
            };
        }
        cur
    }

    pub fn forward_train(&self, x: &Array3<f64>) -> (Array3<f64>, ForwardCache) {
        let mut cache = ForwardCache {
            cols: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            in_sizes: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cache.in_sizes.push((cur.dim().1, cur.dim().2));
            let (out, cols) = layer.forward(&cur);
            cache.cols.push(cols);
            if i + 1 < self.layers.len() {
                cur = leaky_relu(&out);
                cache.pre.push(out);
            } else {
                cur = out;
            }
        }
        (cur, cache)
    }

    /// Backprop from the head gradient; returns per-layer (dw, db) pairs in
    /// layer order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_head: Array3<f64>,
    ) -> Vec<(Array2<f64>, Array1<f64>)> {
        let n = self.layers.len();
        let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = (0..n).map(|_| None).collect();
        let mut d = d_head;
        for i in (0..n).rev() {
            let (in_h, in_w) = cache.in_sizes[i];
            let (dw, db, dx) = self.layers[i].backward(&cache.cols[i], &d, in_h, in_w);
            grads[i] = Some((dw, db));
            if i > 0 {
                d = leaky_relu_grad(&cache.pre[i - 1], &dx);
            }
        }
        grads.into_iter().map(|g| g.unwrap()).collect()
    }
}

/// Plain gradient descent with momentum: `v = m*v + g; p -= lr*v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Option<crate::detector::ParamSet>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut crate::detector::ParamSet, grads: &crate::detector::ParamSet) {
        let v = self
            .velocity
            .get_or_insert_with(|| grads.zeros_like());
        assert!(v.same_shapes(grads), "optimizer state shape mismatch");
        for ((vel, g), p) in v
            .arrays
            .iter_mut()
            .zip(&grads.arrays)
            .zip(&mut params.arrays)
        {
            ndarray::Zip::from(vel).and(g).and(p).for_each(|v, &g, p| {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    /// Finite-difference check of the conv stack on a tiny scalar loss
    /// (sum of squares of the head), the independent oracle for backprop.
    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let stack = ConvStack {
            layers: vec![
                Conv2d::new(2, 3, 3, 2, 1, &mut rng),
                Conv2d::new(3, 4, 3, 2, 1, &mut rng),
                Conv2d::new(4, 2, 1, 1, 0, &mut rng),
            ],
        };
        let x = Array3::from_shape_fn((2, 8, 8), |(c, y, xx)| {
            ((c + 1) as f64 * 0.37 + y as f64 * 0.11 - xx as f64 * 0.07).sin() * 0.5
        });

        let loss_of = |s: &ConvStack| -> f64 {
            let out = s.forward(&x);
            out.iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let (head, cache) = stack.forward_train(&x);
        let grads = stack.backward(&cache, head.clone());

        let eps = 1e-5;
        let mut checked = 0;
        for li in 0..stack.layers.len() {
            for &(r, c) in &[(0usize, 0usize), (1, 2), (0, 5)] {
                if r >= stack.layers[li].weight.nrows() || c >= stack.layers[li].weight.ncols() {
                    continue;
                }
                let mut plus = stack.clone();
                plus.layers[li].weight[(r, c)] += eps;
                let mut minus = stack.clone();
                minus.layers[li].weight[(r, c)] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = grads[li].0[(r, c)];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "layer {li} w[{r},{c}]: fd={fd} analytic={an}"
                );
                checked += 1;
            }
            let mut plus = stack.clone();
            plus.layers[li].bias[0] += eps;
            let mut minus = stack.clone();
            minus.layers[li].bias[0] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let an = grads[li].1[0];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "layer {li} bias");
            checked += 1;
        }
        assert!(checked >= 9);
    }

    #[test]
    fn sgd_momentum_update_rule() {
        use crate::detector::ParamSet;
        use ndarray::ArrayD;
        let p0 = 1.0;
        let g = 0.5;
        let mut params = ParamSet::new(vec![ArrayD::from_elem(ndarray::IxDyn(&[1]), p0)]);
        let grads = ParamSet::new(vec![ArrayD::from_elem(ndarray::IxDyn(&[1]), g)]);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        opt.step(&mut params, &grads);
        // v1 = 0.5, p1 = 1 - 0.05
        assert!((params.arrays[0][[0]] - 0.95).abs() < 1e-15);
        opt.step(&mut params, &grads);
        // v2 = 0.9*0.5 + 0.5 = 0.95, p2 = 0.95 - 0.095
        assert!((params.arrays[0][[0]] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn stride_two_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 4, 3, 2, 1, &mut rng);
        assert_eq!(conv.out_size(128, 128), (64, 64));
        assert_eq!(conv.out_size(64, 64), (32, 32));
    }
}
