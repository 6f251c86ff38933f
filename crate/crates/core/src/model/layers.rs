//! Differentiable building blocks. Activations are packed `tokens x features`
//! matrices; sequence boundaries are carried separately as offsets.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{ParamId, ParamSet};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Affine map `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn init(params: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let w = Array2::from_shape_fn((inp, out), |_| dist.sample(rng));
        Self::with_weights(params, name, w)
    }

    pub fn zeros(params: &mut ParamSet, name: &str, inp: usize, out: usize) -> Self {
        Self::with_weights(params, name, Array2::zeros((inp, out)))
    }

    fn with_weights(params: &mut ParamSet, name: &str, w: Array2<f64>) -> Self {
        let out = w.ncols();
        Self {
            w: params.add(format!("{name}.weight"), w),
            b: params.add(format!("{name}.bias"), Array2::zeros((1, out))),
        }
    }

    pub fn bind(params: &ParamSet, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: params.expect(&format!("{name}.weight"), (inp, out))?,
            b: params.expect(&format!("{name}.bias"), (1, out))?,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(params.get(self.w));
        y += params.get(self.b);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, params: &ParamSet, grads: &mut ParamSet, x: &ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.backward_params(grads, x, dy);
        dy.dot(&params.get(self.w).t())
    }

    pub fn backward_params(&self, grads: &mut ParamSet, x: &ArrayView2<f64>, dy: &Array2<f64>) {
        *grads.get_mut(self.w) += &x.t().dot(dy);
        *grads.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: params.add(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn bind(params: &ParamSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.expect(&format!("{name}.gamma"), (1, dim))?,
            beta: params.expect(&format!("{name}.beta"), (1, dim))?,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty feature axis");
        let mut xhat = x - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        xhat *= &rstd.view().insert_axis(Axis(1));
        let mut y = &xhat * params.get(self.gamma);
        y += params.get(self.beta);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, params: &ParamSet, grads: &mut ParamSet, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        *grads.get_mut(self.gamma) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *grads.get_mut(self.beta) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * params.get(self.gamma);
        let n = dy.ncols() as f64;
        let mean_d = dxhat.sum_axis(Axis(1)) / n;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let mut dx = dxhat;
        dx -= &mean_d.insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dx.insert_axis(Axis(1)));
        dx *= &cache.rstd.view().insert_axis(Axis(1));
        dx
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut impl Rng) -> Option<Array2<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep }))
}

pub fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub fn normal_matrix(shape: (usize, usize), std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

/// Multi-head self-attention over packed sequences. Each sequence attends
/// only within itself, so padding never enters the computation.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    qkv: Array2<f64>,
    ctx: Array2<f64>,
    /// Softmax weights per (sequence, head), row-major in that order.
    probs: Vec<Array2<f64>>,
}

impl Attention {
    pub fn init(params: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            qkv: Linear::init(params, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::init(params, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn bind(params: &ParamSet, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::bind(params, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::bind(params, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, params: &ParamSet, x: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, AttentionCache) {
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self.qkv.forward(params, &x.view());
        let mut ctx = Array2::zeros(x.dim());
        let mut probs = Vec::with_capacity((offsets.len() - 1) * self.heads);
        for w in offsets.windows(2) {
            let rows = w[0]..w[1];
            for h in 0..self.heads {
                let c = h * hd;
                let q = qkv.slice(s![rows.clone(), c..c + hd]);
                let k = qkv.slice(s![rows.clone(), dim + c..dim + c + hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c..2 * dim + c + hd]);
                let mut p = q.dot(&k.t());
                for mut row in p.rows_mut() {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a * scale));
                    row.mapv_inplace(|a| (a * scale - max).exp());
                    let z = row.sum();
                    row /= z;
                }
                ctx.slice_mut(s![rows.clone(), c..c + hd]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.out.forward(params, &ctx.view());
        (y, AttentionCache { qkv, ctx, probs })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        grads: &mut ParamSet,
        x: &Array2<f64>,
        offsets: &[usize],
        cache: &AttentionCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dctx = self.out.backward(params, grads, &cache.ctx.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.dim());
        let mut probs = cache.probs.iter();
        for w in offsets.windows(2) {
            let rows = w[0]..w[1];
            for h in 0..self.heads {
                let p = probs.next().expect("one cache entry per head");
                let c = h * hd;
                let q = cache.qkv.slice(s![rows.clone(), c..c + hd]);
                let k = cache.qkv.slice(s![rows.clone(), dim + c..dim + c + hd]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * dim + c..2 * dim + c + hd]);
                let dc = dctx.slice(s![rows.clone(), c..c + hd]);
                let dp = dc.dot(&v.t());
                let dv = p.t().dot(&dc);
                let inner = (&dp * p).sum_axis(Axis(1));
                let mut ds = dp - &inner.insert_axis(Axis(1));
                ds *= p;
                ds *= scale;
                dqkv.slice_mut(s![rows.clone(), c..c + hd]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), dim + c..dim + c + hd]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![rows.clone(), 2 * dim + c..2 * dim + c + hd]).assign(&dv);
            }
        }
        self.qkv.backward(params, grads, &x.view(), &dqkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.15;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut p = ParamSet::new();
        let ln = LayerNorm::init(&mut p, "ln", 4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let (y, _) = ln.forward(&p, &x);
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_mask_keeps_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = dropout_mask((200, 200), 0.25, &mut rng).unwrap();
        assert!((m.mean().unwrap() - 1.0).abs() < 0.02);
        assert!(dropout_mask((2, 2), 0.0, &mut rng).is_none());
    }

    use rand::SeedableRng;
}
