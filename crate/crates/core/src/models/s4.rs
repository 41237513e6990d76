//! Bidirectional S4 network with diagonal (S4D-style) state matrices.
//!
//! Per channel the continuous system `x' = Λx + Bu, y = Re(Cx) + Du` is
//! discretized by zero-order hold and applied as a length-L convolution:
//! `k[t] = Re Σ_n C_n B̄_n Λ̄_n^t`, `Λ̄ = exp(ΔΛ)`, `B̄ = (Λ̄−1)Λ⁻¹B`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::ops::{self, Conv, Dims};
use super::{init_rng, sharded, Batch, ForwardMode, ModelConfig, ModelError, Parameters, S4Config, StepOutput, Tensor};

const LN_EPS: f64 = 1e-5;

/// One channel's diagonal state-space system.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSsm {
    pub lambda: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub dt: f64,
}

impl DiagonalSsm {
    /// Zero-order-hold discretization: `(Λ̄, B̄)`.
    pub fn discretize(&self) -> (Vec<Complex64>, Vec<Complex64>) {
        self.lambda
            .iter()
            .zip(&self.b)
            .map(|(&l, &b)| {
                let p = (l * self.dt).exp();
                (p, (p - 1.0) / l * b)
            })
            .unzip()
    }
}

/// Convolution kernel of length `len`. Warns on poles with `Re Λ ≥ 0`.
pub fn s4_kernel(ssm: &DiagonalSsm, len: usize) -> Vec<f64> {
    if ssm.lambda.iter().any(|l| l.re >= 0.0) {
        log::warn!("unstable pole: Re(lambda) >= 0");
    }
    let (p, bb) = ssm.discretize();
    let mut k = vec![0.0; len];
    for n in 0..p.len() {
        let w = ssm.c[n] * bb[n];
        let mut pw = Complex64::new(1.0, 0.0);
        for kt in k.iter_mut() {
            *kt += (w * pw).re;
            pw *= p[n];
        }
    }
    k
}

/// Gradients of a channel's SSM given `gk = dL/dk`.
struct SsmGrad {
    lambda: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    dt: f64,
}

fn s4_kernel_backward(ssm: &DiagonalSsm, gk: &[f64]) -> SsmGrad {
    let (p, bb) = ssm.discretize();
    let nst = p.len();
    let mut g = SsmGrad {
        lambda: vec![Complex64::default(); nst],
        b: vec![Complex64::default(); nst],
        c: vec![Complex64::default(); nst],
        dt: 0.0,
    };
    for n in 0..nst {
        let l = ssm.lambda[n];
        let w = ssm.c[n] * bb[n];
        let mut gw = Complex64::default();
        let mut gp = Complex64::default();
        let mut pw = Complex64::new(1.0, 0.0);
        let mut pw_prev = Complex64::new(0.0, 0.0);
        for (t, &gt) in gk.iter().enumerate() {
            gw += gt * pw.conj();
            if t > 0 {
                gp += gt * (w * t as f64 * pw_prev).conj();
            }
            pw_prev = pw;
            pw *= p[n];
        }
        g.c[n] = gw * bb[n].conj();
        let gbb = gw * ssm.c[n].conj();
        g.b[n] = gbb * ((p[n] - 1.0) / l).conj();
        gp += gbb * (ssm.b[n] / l).conj();
        g.lambda[n] = gbb * (-(p[n] - 1.0) * ssm.b[n] / (l * l)).conj() + gp * (ssm.dt * p[n]).conj();
        g.dt += (gp.conj() * l * p[n]).re;
    }
    g
}

/// `y[t] += Σ_{j≤t} k[j] u[t−j]`.
fn causal_conv(k: &[f64], u: &[f64], y: &mut [f64]) {
    let len = u.len();
    for (s, &us) in u.iter().enumerate() {
        if us == 0.0 {
            continue;
        }
        for (yv, kv) in y[s..].iter_mut().zip(&k[..len - s]) {
            *yv += kv * us;
        }
    }
}

/// Adds the causal-convolution input gradient to `gu` and kernel gradient to `gk`.
fn causal_conv_backward(k: &[f64], u: &[f64], g: &[f64], gu: &mut [f64], gk: &mut [f64]) {
    let len = u.len();
    for s in 0..len {
        gu[s] += g[s..].iter().zip(&k[..len - s]).map(|(a, b)| a * b).sum::<f64>();
        let us = u[s];
        if us != 0.0 {
            for (gkv, gv) in gk[..len - s].iter_mut().zip(&g[s..]) {
                *gkv += gv * us;
            }
        }
    }
}

fn reversed(v: &[f64]) -> Vec<f64> {
    v.iter().rev().copied().collect()
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Layer norm across channels at every time step of a `[h][len]` sample.
fn layer_norm(x: &[f64], h: usize, len: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let mut xhat = vec![0.0; h * len];
    let mut inv_std = vec![0.0; len];
    let mut y = vec![0.0; h * len];
    for t in 0..len {
        let mean = (0..h).map(|c| x[c * len + t]).sum::<f64>() / h as f64;
        let var = (0..h).map(|c| (x[c * len + t] - mean).powi(2)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for c in 0..h {
            let v = (x[c * len + t] - mean) * is;
            xhat[c * len + t] = v;
            y[c * len + t] = gamma[c] * v + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(g: &[f64], h: usize, len: usize, gamma: &[f64], cache: &LnCache, ggamma: &mut [f64], gbeta: &mut [f64]) -> Vec<f64> {
    let mut gx = vec![0.0; h * len];
    for t in 0..len {
        let (mut m1, mut m2) = (0.0, 0.0);
        for c in 0..h {
            let i = c * len + t;
            ggamma[c] += g[i] * cache.xhat[i];
            gbeta[c] += g[i];
            let gh = g[i] * gamma[c];
            m1 += gh;
            m2 += gh * cache.xhat[i];
        }
        m1 /= h as f64;
        m2 /= h as f64;
        for c in 0..h {
            let i = c * len + t;
            gx[i] = cache.inv_std[t] * (g[i] * gamma[c] - m1 - cache.xhat[i] * m2);
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Fwd,
    Bwd,
}

impl Dir {
    fn tag(self) -> &'static str {
        match self {
            Dir::Fwd => "fwd",
            Dir::Bwd => "bwd",
        }
    }
}

#[derive(Debug, Clone)]
pub struct S4Network {
    pub in_leads: usize,
    pub n_labels: usize,
    pub h: usize,
    pub n: usize,
    pub n_layers: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    seed: u64,
    dt_min: f64,
    dt_max: f64,
}

fn lname(l: usize, s: &str) -> String {
    format!("layers.{l}.{s}")
}

fn sname(l: usize, d: Dir, s: &str) -> String {
    format!("layers.{l}.{}.{s}", d.tag())
}

struct LayerCache {
    ln: LnCache,
    z: Vec<f64>,
    c: Vec<f64>,
    mask: Option<Vec<f64>>,
    a: Vec<f64>,
}

struct SampleCache {
    u: Vec<f64>,
    layers: Vec<LayerCache>,
    ln: LnCache,
    pooled: Vec<f64>,
}

/// Per-shard gradient accumulator.
struct Acc {
    grads: Parameters,
    /// `dL/dk` per (layer, direction), each `[h][len]`.
    gk: Vec<Vec<f64>>,
    loss: f64,
    logits: Vec<f64>,
}

impl S4Network {
    pub fn new(cfg: &ModelConfig, c: &S4Config) -> Self {
        S4Network {
            in_leads: cfg.in_leads,
            n_labels: cfg.n_labels,
            h: c.d_model,
            n: c.d_state,
            n_layers: c.n_layers,
            bidirectional: c.bidirectional,
            dropout: cfg.dropout,
            seed: cfg.seed,
            dt_min: c.dt_min,
            dt_max: c.dt_max,
        }
    }

    fn dirs(&self) -> &'static [Dir] {
        if self.bidirectional {
            &[Dir::Fwd, Dir::Bwd]
        } else {
            &[Dir::Fwd]
        }
    }

    fn width(&self) -> usize {
        self.h * self.dirs().len()
    }

    pub fn init(&self) -> Parameters {
        let mut rng = init_rng(self.seed);
        let (h, n) = (self.h, self.n);
        let mut p = Parameters::default();
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        p.insert("encoder.weight", uniform(&[h, self.in_leads], self.in_leads, &mut rng));
        p.insert("encoder.bias", uniform(&[h], self.in_leads, &mut rng));
        let half = Normal::new(0.0, 0.5f64.sqrt()).expect("valid normal");
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        for l in 0..self.n_layers {
            p.insert(lname(l, "norm.weight"), Tensor::filled(&[h], 1.0));
            p.insert(lname(l, "norm.bias"), Tensor::zeros(&[h]));
            for &d in self.dirs() {
                p.insert(sname(l, d, "log_neg_lambda_re"), Tensor::filled(&[h, n], 0.5f64.ln()));
                let im = (0..h).flat_map(|_| (0..n).map(|k| std::f64::consts::PI * k as f64)).collect();
                p.insert(sname(l, d, "lambda_im"), Tensor::from_vec(&[h, n], im));
                p.insert(sname(l, d, "b_re"), Tensor::filled(&[h, n], 1.0));
                p.insert(sname(l, d, "b_im"), Tensor::zeros(&[h, n]));
                p.insert(sname(l, d, "c_re"), Tensor::from_vec(&[h, n], (0..h * n).map(|_| half.sample(&mut rng)).collect()));
                p.insert(sname(l, d, "c_im"), Tensor::from_vec(&[h, n], (0..h * n).map(|_| half.sample(&mut rng)).collect()));
                let (lo, hi) = (self.dt_min.ln(), self.dt_max.ln());
                p.insert(
                    sname(l, d, "log_dt"),
                    Tensor::from_vec(&[h], (0..h).map(|_| if lo < hi { rng.gen_range(lo..hi) } else { lo }).collect()),
                );
                p.insert(sname(l, d, "d"), Tensor::from_vec(&[h], (0..h).map(|_| unit.sample(&mut rng)).collect()));
            }
            let w = self.width();
            p.insert(lname(l, "proj.weight"), uniform(&[h, w], w, &mut rng));
            p.insert(lname(l, "proj.bias"), uniform(&[h], w, &mut rng));
        }
        p.insert("norm.weight", Tensor::filled(&[h], 1.0));
        p.insert("norm.bias", Tensor::zeros(&[h]));
        p.insert("head.weight", uniform(&[self.n_labels, h], h, &mut rng));
        p.insert("head.bias", uniform(&[self.n_labels], h, &mut rng));
        p
    }

    /// Channel `ch` of layer `l`, direction `d`.
    fn channel(&self, p: &Parameters, l: usize, d: Dir, ch: usize) -> Result<DiagonalSsm, ModelError> {
        let n = self.n;
        let get = |s: &str| p.get(&sname(l, d, s)).map(|t| &t.data[ch * n..(ch + 1) * n]);
        let (a, im) = (get("log_neg_lambda_re")?, get("lambda_im")?);
        let (br, bi, cr, ci) = (get("b_re")?, get("b_im")?, get("c_re")?, get("c_im")?);
        let dt = p.get(&sname(l, d, "log_dt"))?.data[ch].exp();
        Ok(DiagonalSsm {
            lambda: (0..n).map(|k| Complex64::new(-a[k].exp(), im[k])).collect(),
            b: (0..n).map(|k| Complex64::new(br[k], bi[k])).collect(),
            c: (0..n).map(|k| Complex64::new(cr[k], ci[k])).collect(),
            dt,
        })
    }

    /// Kernels for every (layer, direction), each flat `[h][len]`.
    fn kernels(&self, p: &Parameters, len: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for &d in self.dirs() {
                let mut k = Vec::with_capacity(self.h * len);
                for ch in 0..self.h {
                    k.extend(s4_kernel(&self.channel(p, l, d, ch)?, len));
                }
                out.push(k);
            }
        }
        Ok(out)
    }

    fn sample_forward(
        &self,
        p: &Parameters,
        kernels: &[Vec<f64>],
        u: &[f64],
        len: usize,
        mut rng: Option<ChaCha8Rng>,
    ) -> Result<(Vec<f64>, SampleCache), ModelError> {
        let h = self.h;
        let nd = self.dirs().len();
        let enc = Conv { c_in: self.in_leads, c_out: h, k: 1, stride: 1, pad: 0 };
        let (mut x, _) = ops::conv1d(u, Dims::new(1, self.in_leads, len), &enc, &p.get("encoder.weight")?.data, Some(&p.get("encoder.bias")?.data));
        let mut layers = Vec::with_capacity(self.n_layers);
        for l in 0..self.n_layers {
            let (z, ln) = layer_norm(&x, h, len, &p.get(&lname(l, "norm.weight"))?.data, &p.get(&lname(l, "norm.bias"))?.data);
            let mut c = vec![0.0; nd * h * len];
            for (di, &d) in self.dirs().iter().enumerate() {
                let k = &kernels[l * nd + di];
                let dskip = &p.get(&sname(l, d, "d"))?.data;
                for ch in 0..h {
                    let zc = &z[ch * len..(ch + 1) * len];
                    let kc = &k[ch * len..(ch + 1) * len];
                    let out = &mut c[(di * h + ch) * len..(di * h + ch + 1) * len];
                    match d {
                        Dir::Fwd => causal_conv(kc, zc, out),
                        Dir::Bwd => {
                            let mut yr = vec![0.0; len];
                            causal_conv(kc, &reversed(zc), &mut yr);
                            out.iter_mut().zip(yr.iter().rev()).for_each(|(o, v)| *o = *v);
                        }
                    }
                    out.iter_mut().zip(zc).for_each(|(o, zv)| *o += dskip[ch] * zv);
                }
            }
            let mut a: Vec<f64> = c.iter().map(|&v| ops::gelu(v)).collect();
            let mask = match (&mut rng, self.dropout > 0.0) {
                (Some(r), true) => {
                    let m = ops::dropout_mask(a.len(), self.dropout, r);
                    a.iter_mut().zip(&m).for_each(|(v, mv)| *v *= mv);
                    Some(m)
                }
                _ => None,
            };
            let proj = Conv { c_in: nd * h, c_out: h, k: 1, stride: 1, pad: 0 };
            let (o, _) = ops::conv1d(&a, Dims::new(1, nd * h, len), &proj, &p.get(&lname(l, "proj.weight"))?.data, Some(&p.get(&lname(l, "proj.bias"))?.data));
            x.iter_mut().zip(&o).for_each(|(xv, ov)| *xv += ov);
            layers.push(LayerCache { ln, z, c, mask, a });
        }
        let (zf, ln) = layer_norm(&x, h, len, &p.get("norm.weight")?.data, &p.get("norm.bias")?.data);
        let pooled = ops::global_avg_pool(&zf, Dims::new(1, h, len));
        let logits = ops::linear(&pooled, 1, h, &p.get("head.weight")?.data, &p.get("head.bias")?.data);
        Ok((logits, SampleCache { u: u.to_vec(), layers, ln, pooled }))
    }

    fn sample_backward(
        &self,
        p: &Parameters,
        kernels: &[Vec<f64>],
        cache: &SampleCache,
        glogits: &[f64],
        len: usize,
        acc: &mut Acc,
    ) -> Result<(), ModelError> {
        let h = self.h;
        let nd = self.dirs().len();
        let g = &mut acc.grads;
        let gpooled = {
            let [gw, gb] = g.slices_mut(["head.weight", "head.bias"]);
            ops::linear_backward(&cache.pooled, 1, h, &p.get("head.weight")?.data, glogits, gw, gb)
        };
        let gzf = ops::global_avg_pool_backward(&gpooled, Dims::new(1, h, len));
        let mut gx = {
            let [gg, gb] = g.slices_mut(["norm.weight", "norm.bias"]);
            layer_norm_backward(&gzf, h, len, &p.get("norm.weight")?.data, &cache.ln, gg, gb)
        };
        for l in (0..self.n_layers).rev() {
            let lc = &cache.layers[l];
            let proj = Conv { c_in: nd * h, c_out: h, k: 1, stride: 1, pad: 0 };
            let (wn, bn) = (lname(l, "proj.weight"), lname(l, "proj.bias"));
            let mut gc = {
                let [gw, gb] = g.slices_mut([wn.as_str(), bn.as_str()]);
                ops::conv1d_backward(&lc.a, Dims::new(1, nd * h, len), &proj, &p.get(&wn)?.data, &gx, gw, Some(gb))
            };
            if let Some(m) = &lc.mask {
                gc.iter_mut().zip(m).for_each(|(v, mv)| *v *= mv);
            }
            gc.iter_mut().zip(&lc.c).for_each(|(v, &cv)| *v *= ops::gelu_grad(cv));
            let mut gz = vec![0.0; h * len];
            for (di, &d) in self.dirs().iter().enumerate() {
                let k = &kernels[l * nd + di];
                let gk = &mut acc.gk[l * nd + di];
                let dskip = &p.get(&sname(l, d, "d"))?.data;
                let dn = sname(l, d, "d");
                let gd = g.grad_mut(&dn);
                for ch in 0..h {
                    let zc = &lc.z[ch * len..(ch + 1) * len];
                    let kc = &k[ch * len..(ch + 1) * len];
                    let gy = &gc[(di * h + ch) * len..(di * h + ch + 1) * len];
                    let gkc = &mut gk[ch * len..(ch + 1) * len];
                    let gzc = &mut gz[ch * len..(ch + 1) * len];
                    match d {
                        Dir::Fwd => causal_conv_backward(kc, zc, gy, gzc, gkc),
                        Dir::Bwd => {
                            let mut gur = vec![0.0; len];
                            causal_conv_backward(kc, &reversed(zc), &reversed(gy), &mut gur, gkc);
                            gzc.iter_mut().zip(gur.iter().rev()).for_each(|(a, b)| *a += b);
                        }
                    }
                    gd[ch] += gy.iter().zip(zc).map(|(a, b)| a * b).sum::<f64>();
                    gzc.iter_mut().zip(gy).for_each(|(a, b)| *a += dskip[ch] * b);
                }
            }
            let (gn, bn) = (lname(l, "norm.weight"), lname(l, "norm.bias"));
            let gxl = {
                let [gg, gb] = g.slices_mut([gn.as_str(), bn.as_str()]);
                layer_norm_backward(&gz, h, len, &p.get(&gn)?.data, &lc.ln, gg, gb)
            };
            gx.iter_mut().zip(&gxl).for_each(|(a, b)| *a += b);
        }
        let enc = Conv { c_in: self.in_leads, c_out: h, k: 1, stride: 1, pad: 0 };
        let [gw, gb] = g.slices_mut(["encoder.weight", "encoder.bias"]);
        ops::conv1d_backward(&cache.u, Dims::new(1, self.in_leads, len), &enc, &p.get("encoder.weight")?.data, &gx, gw, Some(gb));
        Ok(())
    }

    fn sample_rng(mode: ForwardMode, i: usize) -> Option<ChaCha8Rng> {
        match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train { dropout_seed } => {
                let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
                r.set_stream(i as u64);
                Some(r)
            }
        }
    }

    pub fn forward(&self, p: &Parameters, batch: &Batch, mode: ForwardMode) -> Result<Vec<f64>, ModelError> {
        let kernels = self.kernels(p, batch.len)?;
        let rows: Result<Vec<Vec<f64>>, ModelError> = (0..batch.n)
            .into_par_iter()
            .map(|i| self.sample_forward(p, &kernels, batch.sample(i), batch.len, Self::sample_rng(mode, i)).map(|r| r.0))
            .collect();
        Ok(rows?.concat())
    }

    pub fn loss_and_gradient(&self, p: &Parameters, batch: &Batch, targets: &[f64], mode: ForwardMode) -> Result<StepOutput, ModelError> {
        let len = batch.len;
        let kernels = self.kernels(p, len)?;
        let nl = self.n_labels;
        let total = (batch.n * nl) as f64;
        let n_kernels = self.n_layers * self.dirs().len();
        let run = |range: std::ops::Range<usize>| -> Result<Acc, ModelError> {
            let mut acc = Acc { grads: p.zeros_like(), gk: vec![vec![0.0; self.h * len]; n_kernels], loss: 0.0, logits: Vec::new() };
            for i in range {
                let (z, cache) = self.sample_forward(p, &kernels, batch.sample(i), len, Self::sample_rng(mode, i))?;
                let y = &targets[i * nl..(i + 1) * nl];
                acc.loss += ops::bce_with_logits(&z, y) * nl as f64;
                let gz: Vec<f64> = z.iter().zip(y).map(|(&z, &y)| (ops::sigmoid(z) - y) / total).collect();
                self.sample_backward(p, &kernels, &cache, &gz, len, &mut acc)?;
                acc.logits.extend(z);
            }
            Ok(acc)
        };
        let acc = sharded(batch.n, run, |a, b| match (a.as_mut(), b) {
            (Ok(a), Ok(b)) => {
                a.grads.add_assign(&b.grads);
                for (x, y) in a.gk.iter_mut().zip(&b.gk) {
                    x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
                }
                a.loss += b.loss;
                a.logits.extend_from_slice(&b.logits);
            }
            (Ok(_), Err(e)) => *a = Err(e),
            (Err(_), _) => {}
        })?;
        let mut grads = acc.grads;
        for l in 0..self.n_layers {
            for (di, &d) in self.dirs().iter().enumerate() {
                let gk = &acc.gk[l * self.dirs().len() + di];
                for ch in 0..self.h {
                    let ssm = self.channel(p, l, d, ch)?;
                    let sg = s4_kernel_backward(&ssm, &gk[ch * len..(ch + 1) * len]);
                    let n = self.n;
                    let r = ch * n..(ch + 1) * n;
                    for (k, i) in r.clone().enumerate() {
                        // Re Λ = −exp(a), so dRe/da = Re Λ.
                        grads.grad_mut(&sname(l, d, "log_neg_lambda_re"))[i] += sg.lambda[k].re * ssm.lambda[k].re;
                        grads.grad_mut(&sname(l, d, "lambda_im"))[i] += sg.lambda[k].im;
                        grads.grad_mut(&sname(l, d, "b_re"))[i] += sg.b[k].re;
                        grads.grad_mut(&sname(l, d, "b_im"))[i] += sg.b[k].im;
                        grads.grad_mut(&sname(l, d, "c_re"))[i] += sg.c[k].re;
                        grads.grad_mut(&sname(l, d, "c_im"))[i] += sg.c[k].im;
                    }
                    grads.grad_mut(&sname(l, d, "log_dt"))[ch] += ssm.dt * sg.dt;
                }
            }
        }
        Ok(StepOutput { loss: acc.loss / total, logits: acc.logits, grads, buffer_updates: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let ssm = DiagonalSsm {
            lambda: vec![Complex64::new(-1.0, 0.0)],
            b: vec![Complex64::new(1.0, 0.0)],
            c: vec![Complex64::new(1.0, 0.0)],
            dt: 1.0,
        };
        let k = s4_kernel(&ssm, 10);
        let e = (-1f64).exp();
        for (t, v) in k.iter().enumerate() {
            assert!((v - e.powi(t as i32) * (1.0 - e)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_c_gives_zero_kernel() {
        let ssm = DiagonalSsm {
            lambda: vec![Complex64::new(-0.5, 3.0); 3],
            b: vec![Complex64::new(1.0, 0.0); 3],
            c: vec![Complex64::new(0.0, 0.0); 3],
            dt: 0.1,
        };
        assert!(s4_kernel(&ssm, 32).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_matches_adjoint() {
        let k = [0.5, -0.25, 0.125, 1.0];
        let u = [1.0, 2.0, -1.0, 0.5];
        let g = [0.3, -0.2, 0.7, 1.1];
        let mut y = vec![0.0; 4];
        causal_conv(&k, &u, &mut y);
        let (mut gu, mut gk) = (vec![0.0; 4], vec![0.0; 4]);
        causal_conv_backward(&k, &u, &g, &mut gu, &mut gk);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let via_u: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
        let via_k: f64 = gk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - via_u).abs() < 1e-14);
        assert!((lhs - via_k).abs() < 1e-14);
    }
}
