//! Dense building blocks with hand-written derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.mapv(|x| (x - max).exp()).sum().ln();
    logits.mapv(|x| x - lse)
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

/// Cross-entropy against a target distribution, and its gradient with respect
/// to the logits (`softmax − target`).
pub fn soft_cross_entropy(logits: ArrayView1<f64>, target: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let logp = log_softmax(logits);
    let loss = -target.iter().zip(logp.iter()).map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>();
    let grad = logp.mapv(f64::exp) - &target;
    (loss, grad)
}

/// Cross-entropy against a class index.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    grad[target] -= 1.0;
    (-logp[target], grad)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Saved statistics of a row-wise layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; accumulates into `d_gamma`/`d_beta` and
/// returns the input gradient.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    gamma: ArrayView1<f64>,
    mut d_gamma: ArrayViewMut1<f64>,
    mut d_beta: ArrayViewMut1<f64>,
) -> Array2<f64> {
    d_gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    d_beta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &gamma;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut dxh, xh, &s| {
            let mean_d = dxh.sum() / d;
            let mean_dx = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            Zip::from(&mut dxh).and(&xh).for_each(|g, &x| *g = s * (*g - mean_d - x * mean_dx));
        });
    dx
}
