//! XResNet1d: three-convolution stem, bottleneck residual stages with
//! expansion 4, global average pooling and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, BnCache, Conv, Dims, BN_MOMENTUM};
use super::{init_rng, Batch, ForwardMode, ModelConfig, ModelError, Parameters, StepOutput, Tensor, XResNetConfig};

pub const EXPANSION: usize = 4;

/// Convolution (no bias) followed by batch normalization.
#[derive(Debug, Clone)]
struct ConvBn {
    name: String,
    conv: Conv,
    zero_gamma: bool,
}

struct ConvBnCache {
    x: Vec<f64>,
    d: Dims,
    y_conv_d: Dims,
    bn: BnCache,
}

impl ConvBn {
    fn new(name: String, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvBn { name, conv: Conv { c_in, c_out, k, stride, pad: k / 2 }, zero_gamma: false }
    }

    fn pn(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    fn init(&self, p: &mut Parameters, rng: &mut ChaCha8Rng) {
        let fan_in = self.conv.c_in * self.conv.k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
        let n = self.conv.c_out * fan_in;
        p.insert(self.pn("conv.weight"), Tensor::from_vec(&[self.conv.c_out, self.conv.c_in, self.conv.k], (0..n).map(|_| normal.sample(rng)).collect()));
        let c = self.conv.c_out;
        p.insert(self.pn("bn.weight"), Tensor::filled(&[c], if self.zero_gamma { 0.0 } else { 1.0 }));
        p.insert(self.pn("bn.bias"), Tensor::zeros(&[c]));
        p.insert_buffer(self.pn("bn.running_mean"), Tensor::zeros(&[c]));
        p.insert_buffer(self.pn("bn.running_var"), Tensor::filled(&[c], 1.0));
    }

    fn forward(
        &self,
        p: &Parameters,
        x: Vec<f64>,
        d: Dims,
        train: bool,
        updates: &mut Vec<(String, Tensor)>,
    ) -> Result<(Vec<f64>, Dims, ConvBnCache), ModelError> {
        let (yc, od) = ops::conv1d(&x, d, &self.conv, &p.get(&self.pn("conv.weight"))?.data, None);
        let (rm, rv) = (p.buffer(&self.pn("bn.running_mean"))?, p.buffer(&self.pn("bn.running_var"))?);
        let running = if train { None } else { Some((rm.data.as_slice(), rv.data.as_slice())) };
        let (y, bn, stats) = ops::batchnorm(&yc, od, &p.get(&self.pn("bn.weight"))?.data, &p.get(&self.pn("bn.bias"))?.data, running);
        if let Some(s) = stats {
            let m = BN_MOMENTUM;
            let nm = rm.data.iter().zip(&s.mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let nv = rv.data.iter().zip(&s.var).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            updates.push((self.pn("bn.running_mean"), Tensor::from_vec(&rm.shape, nm)));
            updates.push((self.pn("bn.running_var"), Tensor::from_vec(&rv.shape, nv)));
        }
        Ok((y, od, ConvBnCache { x, d, y_conv_d: od, bn }))
    }

    fn backward(&self, p: &Parameters, cache: &ConvBnCache, gy: &[f64], g: &mut Parameters) -> Result<Vec<f64>, ModelError> {
        let (gn, bn, wn) = (self.pn("bn.weight"), self.pn("bn.bias"), self.pn("conv.weight"));
        let gyc = {
            let [gg, gb] = g.slices_mut([gn.as_str(), bn.as_str()]);
            ops::batchnorm_backward(gy, cache.y_conv_d, &p.get(&gn)?.data, &cache.bn, gg, gb)
        };
        Ok(ops::conv1d_backward(&cache.x, cache.d, &self.conv, &p.get(&wn)?.data, &gyc, g.grad_mut(&wn), None))
    }
}

#[derive(Debug, Clone)]
struct Block {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    pool: bool,
    id: Option<ConvBn>,
}

struct BlockCache {
    c1: ConvBnCache,
    r1: Vec<f64>,
    c2: ConvBnCache,
    r2: Vec<f64>,
    c3: ConvBnCache,
    id: Option<ConvBnCache>,
    d_in: Dims,
    out: Vec<f64>,
}

impl Block {
    fn forward(
        &self,
        p: &Parameters,
        x: Vec<f64>,
        d: Dims,
        train: bool,
        up: &mut Vec<(String, Tensor)>,
    ) -> Result<(Vec<f64>, Dims, BlockCache), ModelError> {
        let (mut r1, d1, c1) = self.c1.forward(p, x.clone(), d, train, up)?;
        ops::relu(&mut r1);
        let (mut r2, d2, c2) = self.c2.forward(p, r1.clone(), d1, train, up)?;
        ops::relu(&mut r2);
        let (y3, d3, c3) = self.c3.forward(p, r2.clone(), d2, train, up)?;
        let (xp, dp) = if self.pool { ops::avgpool2(&x, d) } else { (x, d) };
        let (idv, idc) = match &self.id {
            Some(cb) => {
                let (v, _, c) = cb.forward(p, xp, dp, train, up)?;
                (v, Some(c))
            }
            None => (xp, None),
        };
        let mut out: Vec<f64> = y3.iter().zip(&idv).map(|(a, b)| a + b).collect();
        ops::relu(&mut out);
        Ok((out.clone(), d3, BlockCache { c1, r1, c2, r2, c3, id: idc, d_in: d, out }))
    }

    fn backward(&self, p: &Parameters, c: &BlockCache, gy: &[f64], g: &mut Parameters) -> Result<Vec<f64>, ModelError> {
        let mut gsum = gy.to_vec();
        ops::relu_backward(&c.out, &mut gsum);
        let mut g2 = self.c3.backward(p, &c.c3, &gsum, g)?;
        ops::relu_backward(&c.r2, &mut g2);
        let mut g1 = self.c2.backward(p, &c.c2, &g2, g)?;
        ops::relu_backward(&c.r1, &mut g1);
        let mut gx = self.c1.backward(p, &c.c1, &g1, g)?;
        let gid = match (&self.id, &c.id) {
            (Some(cb), Some(cc)) => cb.backward(p, cc, &gsum, g)?,
            _ => gsum,
        };
        let gid = if self.pool { ops::avgpool2_backward(&gid, c.d_in) } else { gid };
        gx.iter_mut().zip(&gid).for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
pub struct XResNet {
    pub in_leads: usize,
    pub n_labels: usize,
    pub dropout: f64,
    seed: u64,
    stem: Vec<ConvBn>,
    blocks: Vec<Block>,
    out_channels: usize,
}

struct Cache {
    stem: Vec<(ConvBnCache, Vec<f64>)>,
    pre_pool_d: Dims,
    pool_arg: Vec<usize>,
    blocks: Vec<BlockCache>,
    last_d: Dims,
    pooled: Vec<f64>,
    mask: Option<Vec<f64>>,
    head_in: Vec<f64>,
}

impl XResNet {
    pub fn new(cfg: &ModelConfig, c: &XResNetConfig) -> Self {
        let base = c.base_width;
        let half = (base / 2).max(1);
        let widths = [cfg.in_leads, half, half, base];
        let stem = (0..3)
            .map(|i| ConvBn::new(format!("stem.{i}"), widths[i], widths[i + 1], 5, if i == 0 { 2 } else { 1 }))
            .collect();
        let mut blocks = Vec::new();
        let mut ni = base;
        for (s, &depth) in c.stage_depths.iter().enumerate() {
            let nh = base << s;
            let nf = nh * EXPANSION;
            for b in 0..depth {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let pre = format!("stages.{s}.{b}");
                let mut c3 = ConvBn::new(format!("{pre}.c3"), nh, nf, 1, 1);
                c3.zero_gamma = true;
                blocks.push(Block {
                    c1: ConvBn::new(format!("{pre}.c1"), ni, nh, 1, 1),
                    c2: ConvBn::new(format!("{pre}.c2"), nh, nh, c.kernel_size, stride),
                    c3,
                    pool: stride != 1,
                    id: (ni != nf).then(|| ConvBn::new(format!("{pre}.id"), ni, nf, 1, 1)),
                });
                ni = nf;
            }
        }
        XResNet { in_leads: cfg.in_leads, n_labels: cfg.n_labels, dropout: cfg.dropout, seed: cfg.seed, stem, blocks, out_channels: ni }
    }

    pub fn init(&self) -> Parameters {
        let mut rng = init_rng(self.seed);
        let mut p = Parameters::default();
        for cb in &self.stem {
            cb.init(&mut p, &mut rng);
        }
        for b in &self.blocks {
            for cb in [&b.c1, &b.c2, &b.c3].into_iter().chain(b.id.as_ref()) {
                cb.init(&mut p, &mut rng);
            }
        }
        let bound = 1.0 / (self.out_channels as f64).sqrt();
        let n = self.n_labels * self.out_channels;
        p.insert("head.weight", Tensor::from_vec(&[self.n_labels, self.out_channels], (0..n).map(|_| rng.gen_range(-bound..bound)).collect()));
        p.insert("head.bias", Tensor::from_vec(&[self.n_labels], (0..self.n_labels).map(|_| rng.gen_range(-bound..bound)).collect()));
        p
    }

    fn run(&self, p: &Parameters, batch: &Batch, mode: ForwardMode) -> Result<(Vec<f64>, Cache, Vec<(String, Tensor)>), ModelError> {
        let train = matches!(mode, ForwardMode::Train { .. });
        let mut up = Vec::new();
        let mut x = batch.data.clone();
        let mut d = Dims::new(batch.n, batch.leads, batch.len);
        let mut stem = Vec::new();
        for cb in &self.stem {
            let (mut y, od, c) = cb.forward(p, x, d, train, &mut up)?;
            ops::relu(&mut y);
            stem.push((c, y.clone()));
            x = y;
            d = od;
        }
        let pre_pool_d = d;
        let (y, pool_arg, od) = ops::maxpool3(&x, d);
        x = y;
        d = od;
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let (y, od, c) = b.forward(p, x, d, train, &mut up)?;
            blocks.push(c);
            x = y;
            d = od;
        }
        let pooled = ops::global_avg_pool(&x, d);
        let (head_in, mask) = match mode {
            ForwardMode::Train { dropout_seed } if self.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let m = ops::dropout_mask(pooled.len(), self.dropout, &mut rng);
                (pooled.iter().zip(&m).map(|(a, b)| a * b).collect(), Some(m))
            }
            _ => (pooled.clone(), None),
        };
        let logits = ops::linear(&head_in, batch.n, self.out_channels, &p.get("head.weight")?.data, &p.get("head.bias")?.data);
        Ok((logits, Cache { stem, pre_pool_d, pool_arg, blocks, last_d: d, pooled, mask, head_in }, up))
    }

    pub fn forward(&self, p: &Parameters, batch: &Batch, mode: ForwardMode) -> Result<Vec<f64>, ModelError> {
        self.run(p, batch, mode).map(|r| r.0)
    }

    pub fn loss_and_gradient(&self, p: &Parameters, batch: &Batch, targets: &[f64], mode: ForwardMode) -> Result<StepOutput, ModelError> {
        let (logits, cache, buffer_updates) = self.run(p, batch, mode)?;
        let loss = ops::bce_with_logits(&logits, targets);
        let gz = ops::bce_grad(&logits, targets);
        let mut g = p.zeros_like();
        let mut gin = {
            let [gw, gb] = g.slices_mut(["head.weight", "head.bias"]);
            ops::linear_backward(&cache.head_in, batch.n, self.out_channels, &p.get("head.weight")?.data, &gz, gw, gb)
        };
        if let Some(m) = &cache.mask {
            gin.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        debug_assert_eq!(gin.len(), cache.pooled.len());
        let mut gx = ops::global_avg_pool_backward(&gin, cache.last_d);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            gx = b.backward(p, c, &gx, &mut g)?;
        }
        gx = ops::maxpool3_backward(&gx, &cache.pool_arg, cache.pre_pool_d);
        for (cb, (c, y)) in self.stem.iter().zip(&cache.stem).rev() {
            ops::relu_backward(y, &mut gx);
            gx = cb.backward(p, c, &gx, &mut g)?;
        }
        Ok(StepOutput { loss, logits, grads: g, buffer_updates })
    }
}
