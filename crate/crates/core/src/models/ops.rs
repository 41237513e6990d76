//! Differentiable primitives on `[batch][channel][time]` activations stored
//! flat, row-major. Every forward has a matching backward that returns the
//! input gradient and writes parameter gradients into caller buffers.

use rand::Rng;

/// Shape of a flat `[b][c][t]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub t: usize,
}

impl Dims {
    pub fn new(b: usize, c: usize, t: usize) -> Self {
        Dims { b, c, t }
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn with_t(self, t: usize) -> Self {
        Dims { t, ..self }
    }
}

/// Geometry of a 1D convolution with `w: [out][in][k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn out_len(&self, t: usize) -> usize {
        (t + 2 * self.pad - self.k) / self.stride + 1
    }
}

pub fn conv1d(x: &[f64], d: Dims, cv: &Conv, w: &[f64], bias: Option<&[f64]>) -> (Vec<f64>, Dims) {
    debug_assert_eq!(d.c, cv.c_in);
    let to_len = cv.out_len(d.t);
    let od = Dims::new(d.b, cv.c_out, to_len);
    let mut y = vec![0.0; od.len()];
    for b in 0..d.b {
        for o in 0..cv.c_out {
            let yrow = &mut y[(b * cv.c_out + o) * to_len..][..to_len];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for i in 0..cv.c_in {
                let xrow = &x[(b * d.c + i) * d.t..][..d.t];
                for kk in 0..cv.k {
                    let wv = w[(o * cv.c_in + i) * cv.k + kk];
                    for (to, yv) in yrow.iter_mut().enumerate() {
                        let ti = (to * cv.stride + kk) as isize - cv.pad as isize;
                        if ti >= 0 && (ti as usize) < d.t {
                            *yv += wv * xrow[ti as usize];
                        }
                    }
                }
            }
        }
    }
    (y, od)
}

/// Returns `gx`; accumulates into `gw` and `gbias`.
pub fn conv1d_backward(
    x: &[f64],
    d: Dims,
    cv: &Conv,
    w: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let to_len = cv.out_len(d.t);
    let mut gx = vec![0.0; d.len()];
    for b in 0..d.b {
        for o in 0..cv.c_out {
            let grow = &gy[(b * cv.c_out + o) * to_len..][..to_len];
            for i in 0..cv.c_in {
                let xoff = (b * d.c + i) * d.t;
                for kk in 0..cv.k {
                    let wi = (o * cv.c_in + i) * cv.k + kk;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for (to, &g) in grow.iter().enumerate() {
                        let ti = (to * cv.stride + kk) as isize - cv.pad as isize;
                        if ti >= 0 && (ti as usize) < d.t {
                            let ti = xoff + ti as usize;
                            acc += g * x[ti];
                            gx[ti] += g * wv;
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    if let Some(gb) = gbias {
        for b in 0..d.b {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += gy[(b * cv.c_out + o) * to_len..][..to_len].iter().sum::<f64>();
            }
        }
    }
    gx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics were used (train mode).
    batch: bool,
}

/// Batch statistics: mean and unbiased variance per channel.
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over (batch, time) per channel. With `running =
/// Some((mean, var))` the running statistics are used (inference mode).
pub fn batchnorm(
    x: &[f64],
    d: Dims,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, BnCache, Option<BnStats>) {
    let n = (d.b * d.t) as f64;
    let (mean, var, stats) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let mut mean = vec![0.0; d.c];
            let mut var = vec![0.0; d.c];
            for c in 0..d.c {
                let mut s = 0.0;
                for b in 0..d.b {
                    s += x[(b * d.c + c) * d.t..][..d.t].iter().sum::<f64>();
                }
                let m = s / n;
                let mut q = 0.0;
                for b in 0..d.b {
                    q += x[(b * d.c + c) * d.t..][..d.t].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = q / n;
            }
            let unbiased = var.iter().map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v }).collect();
            (mean.clone(), var, Some(BnStats { mean, var: unbiased }))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut y = vec![0.0; d.len()];
    for b in 0..d.b {
        for c in 0..d.c {
            let off = (b * d.c + c) * d.t;
            for t in 0..d.t {
                let h = (x[off + t] - mean[c]) * inv_std[c];
                xhat[off + t] = h;
                y[off + t] = gamma[c] * h + beta[c];
            }
        }
    }
    let batch = stats.is_some();
    (y, BnCache { xhat, inv_std, batch }, stats)
}

pub fn batchnorm_backward(gy: &[f64], d: Dims, gamma: &[f64], cache: &BnCache, ggamma: &mut [f64], gbeta: &mut [f64]) -> Vec<f64> {
    let n = (d.b * d.t) as f64;
    let mut gx = vec![0.0; d.len()];
    for c in 0..d.c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..d.b {
            let off = (b * d.c + c) * d.t;
            for t in 0..d.t {
                sg += gy[off + t];
                sgx += gy[off + t] * cache.xhat[off + t];
            }
        }
        ggamma[c] += sgx;
        gbeta[c] += sg;
        let s = gamma[c] * cache.inv_std[c];
        for b in 0..d.b {
            let off = (b * d.c + c) * d.t;
            for t in 0..d.t {
                gx[off + t] = if cache.batch {
                    s / n * (n * gy[off + t] - sg - cache.xhat[off + t] * sgx)
                } else {
                    s * gy[off + t]
                };
            }
        }
    }
    gx
}

pub fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Backward of ReLU given its output.
pub fn relu_backward(y: &[f64], gy: &mut [f64]) {
    for (g, &v) in gy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max pooling with kernel 3, stride 2, padding 1 (padding never wins).
/// Returns output and argmax indices into `x`.
pub fn maxpool3(x: &[f64], d: Dims) -> (Vec<f64>, Vec<usize>, Dims) {
    let to_len = (d.t + 2 - 3) / 2 + 1;
    let od = d.with_t(to_len);
    let mut y = vec![0.0; od.len()];
    let mut arg = vec![0; od.len()];
    for row in 0..d.b * d.c {
        for to in 0..to_len {
            let lo = (2 * to).saturating_sub(1);
            let hi = (2 * to + 2).min(d.t);
            let mut best = row * d.t + lo;
            for ti in lo..hi {
                if x[row * d.t + ti] > x[best] {
                    best = row * d.t + ti;
                }
            }
            y[row * to_len + to] = x[best];
            arg[row * to_len + to] = best;
        }
    }
    (y, arg, od)
}

pub fn maxpool3_backward(gy: &[f64], arg: &[usize], d: Dims) -> Vec<f64> {
    let mut gx = vec![0.0; d.len()];
    for (g, &a) in gy.iter().zip(arg) {
        gx[a] += g;
    }
    gx
}

/// Average pooling with kernel 2, stride 2, ceil mode: a trailing odd
/// sample is averaged alone.
pub fn avgpool2(x: &[f64], d: Dims) -> (Vec<f64>, Dims) {
    let to_len = d.t.div_ceil(2);
    let od = d.with_t(to_len);
    let mut y = vec![0.0; od.len()];
    for row in 0..d.b * d.c {
        for to in 0..to_len {
            let lo = 2 * to;
            let hi = (lo + 2).min(d.t);
            let s: f64 = x[row * d.t + lo..row * d.t + hi].iter().sum();
            y[row * to_len + to] = s / (hi - lo) as f64;
        }
    }
    (y, od)
}

pub fn avgpool2_backward(gy: &[f64], d: Dims) -> Vec<f64> {
    let to_len = d.t.div_ceil(2);
    let mut gx = vec![0.0; d.len()];
    for row in 0..d.b * d.c {
        for to in 0..to_len {
            let lo = 2 * to;
            let hi = (lo + 2).min(d.t);
            let g = gy[row * to_len + to] / (hi - lo) as f64;
            gx[row * d.t + lo..row * d.t + hi].iter_mut().for_each(|v| *v += g);
        }
    }
    gx
}

/// Mean over time: `[b][c][t] -> [b][c]`. Zero-padding `p` extra steps scales
/// the result by exactly `t / (t + p)`.
pub fn global_avg_pool(x: &[f64], d: Dims) -> Vec<f64> {
    (0..d.b * d.c).map(|row| x[row * d.t..(row + 1) * d.t].iter().sum::<f64>() / d.t as f64).collect()
}

pub fn global_avg_pool_backward(gy: &[f64], d: Dims) -> Vec<f64> {
    let mut gx = vec![0.0; d.len()];
    for row in 0..d.b * d.c {
        let g = gy[row] / d.t as f64;
        gx[row * d.t..(row + 1) * d.t].iter_mut().for_each(|v| *v = g);
    }
    gx
}

/// `y[b] = W x[b] + bias` with `W: [out][in]`.
pub fn linear(x: &[f64], n: usize, c_in: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let mut y = vec![0.0; n * c_out];
    for r in 0..n {
        let xr = &x[r * c_in..][..c_in];
        for o in 0..c_out {
            y[r * c_out + o] = bias[o] + w[o * c_in..][..c_in].iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    y
}

pub fn linear_backward(x: &[f64], n: usize, c_in: usize, w: &[f64], gy: &[f64], gw: &mut [f64], gbias: &mut [f64]) -> Vec<f64> {
    let c_out = gbias.len();
    let mut gx = vec![0.0; n * c_in];
    for r in 0..n {
        let xr = &x[r * c_in..][..c_in];
        for o in 0..c_out {
            let g = gy[r * c_out + o];
            if g == 0.0 {
                continue;
            }
            gbias[o] += g;
            for i in 0..c_in {
                gw[o * c_in + i] += g * xr[i];
                gx[r * c_in + i] += g * w[o * c_in + i];
            }
        }
    }
    gx
}

/// Inverted dropout mask: entries are 0 or `1/(1−p)`.
pub fn dropout_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Numerically stable binary cross-entropy with logits, averaged over all
/// entries.
pub fn bce_with_logits(z: &[f64], y: &[f64]) -> f64 {
    let s: f64 = z.iter().zip(y).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
    s / z.len() as f64
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn bce_grad(z: &[f64], y: &[f64]) -> Vec<f64> {
    let n = z.len() as f64;
    z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let cv = Conv { c_in: 1, c_out: 1, k: 3, stride: 1, pad: 1 };
        let x = [1.0, 2.0, 3.0, 4.0];
        let (y, od) = conv1d(&x, Dims::new(1, 1, 4), &cv, &[0.0, 1.0, 0.0], Some(&[0.5]));
        assert_eq!(od.t, 4);
        assert_eq!(y, vec![1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn strided_lengths() {
        let cv = Conv { c_in: 1, c_out: 1, k: 5, stride: 2, pad: 2 };
        assert_eq!(cv.out_len(250), 125);
        assert_eq!(cv.out_len(125), 63);
        let (_, _, od) = maxpool3(&[0.0; 63], Dims::new(1, 1, 63));
        assert_eq!(od.t, 32);
        let (y, od) = avgpool2(&[1.0, 3.0, 5.0], Dims::new(1, 1, 3));
        assert_eq!((y, od.t), (vec![2.0, 5.0], 2));
    }

    #[test]
    fn padding_mass_relation() {
        let h = [1.0, -2.0, 4.0, 0.5, 3.0, 1.5];
        let pooled = global_avg_pool(&h, Dims::new(1, 2, 3));
        let padded = [1.0, -2.0, 4.0, 0.0, 0.0, 0.5, 3.0, 1.5, 0.0, 0.0];
        let pooled_pad = global_avg_pool(&padded, Dims::new(1, 2, 5));
        for (a, b) in pooled.iter().zip(&pooled_pad) {
            assert_eq!(*b, a * 3.0 / 5.0);
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_with_logits(&[0.0, 0.0], &[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = bce_with_logits(&[20.0], &[1.0]);
        let softplus = (-20f64).exp().ln_1p();
        assert_eq!(v, softplus);
        assert!((v - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
