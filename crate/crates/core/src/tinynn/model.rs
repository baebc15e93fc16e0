use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{
    adaptive_avg_pool, adaptive_avg_pool_backward, affine_relu_maxpool, pooled_dims, volume,
    ConvShape, Dims,
};
use super::scalar::{gemm, Scalar};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of trainable values in the default configuration.
pub const DEFAULT_PARAMETER_COUNT: usize = 115_169;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub first_kernel: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dense_width: usize,
    pub dropout: f64,
    /// 1-based (source, target) block pairs joined by projection shortcuts.
    pub skips: Vec<(usize, usize)>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            widths: vec![8, 16, 32, 32, 64],
            first_kernel: 7,
            kernel: 3,
            pool: 2,
            dense_width: 100,
            dropout: 0.5,
            skips: vec![(1, 3), (3, 5)],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Two channels per block, everything else default; used for gradient
    /// checks and quick sanity runs.
    pub fn reduced() -> Self {
        Self {
            widths: vec![2; 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() != 5 {
            return bad(format!(
                "expected 5 block widths, got {}",
                self.widths.len()
            ));
        }
        if self.input_channels == 0 || self.widths.contains(&0) || self.dense_width == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.first_kernel.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return bad("kernels must be odd".into());
        }
        if self.pool == 0 {
            return bad("pool must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for &(a, b) in &self.skips {
            if !(1 <= a && a < b && b <= 5) {
                return bad(format!("invalid skip pair ({a}, {b})"));
            }
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("invalid batch-norm constants".into());
        }
        Ok(())
    }

    fn kernel_of(&self, block: usize) -> usize {
        if block == 0 {
            self.first_kernel
        } else {
            self.kernel
        }
    }

    fn block_io(&self, block: usize) -> (usize, usize) {
        let cin = if block == 0 {
            self.input_channels
        } else {
            self.widths[block - 1]
        };
        (cin, self.widths[block])
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for b in 0..5 {
            let (cin, cout) = self.block_io(b);
            n += cout * cin * self.kernel_of(b).pow(3) + cout + 2 * cout;
        }
        for &(a, b) in &self.skips {
            n += self.widths[b - 1] * self.widths[a - 1] + self.widths[b - 1];
        }
        n + self.dense_width * self.widths[4] + self.dense_width + self.dense_width + 1
    }

    /// Spatial extent after each block for a cubic input.
    pub fn spatial_trace(&self, input: usize) -> Vec<usize> {
        let mut t = vec![input];
        for _ in 0..5 {
            let d = *t.last().unwrap();
            t.push((d / self.pool).max(1));
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout drawn from the seed.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout, nothing cached.
    Eval,
    /// Eval arithmetic with the graph kept for differentiation.
    Frozen,
}

#[derive(Debug, Clone)]
struct Block<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone)]
struct Skip<T> {
    from: usize,
    to: usize,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Dense<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    argmax: Vec<u32>,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    batch: usize,
    input: Vec<T>,
    /// Input extent of each block, then the final extent.
    dims: Vec<Dims>,
    outputs: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    skip_pooled: Vec<Vec<T>>,
    gap: Vec<T>,
    mask1: Vec<T>,
    h1: Vec<T>,
    mask2: Vec<T>,
    probs: Vec<T>,
}

/// Five conv/batch-norm/ReLU/max-pool blocks with projection shortcuts,
/// global average pooling and a two-layer dense head ending in a sigmoid.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    blocks: Vec<Block<T>>,
    skips: Vec<Skip<T>>,
    fc1: Dense<T>,
    fc2: Dense<T>,
    cache: Option<Cache<T>>,
}

fn uniform<T: Scalar>(rng: &mut Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Weights are uniform in `±sqrt(6 / fan_in)` for layers feeding a ReLU and
    /// `±sqrt(3 / fan_in)` for the shortcut projections and the output layer,
    /// drawn in manifest order from one seeded stream. Biases start at 0,
    /// batch-norm scale at 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(5);
        for b in 0..5 {
            let (cin, cout) = config.block_io(b);
            let k = config.kernel_of(b);
            let fan_in = cin * k * k * k;
            blocks.push(Block {
                weight: Tensor::param(
                    vec![cout, cin, k, k, k],
                    uniform(&mut rng, cout * fan_in, (6.0 / fan_in as f64).sqrt()),
                ),
                bias: Tensor::param(vec![cout], vec![T::zero(); cout]),
                gamma: Tensor::param(vec![cout], vec![T::one(); cout]),
                beta: Tensor::param(vec![cout], vec![T::zero(); cout]),
                running_mean: vec![T::zero(); cout],
                running_var: vec![T::one(); cout],
                cin,
                cout,
                k,
            });
        }
        let skips = config
            .skips
            .iter()
            .map(|&(a, b)| {
                let (cin, cout) = (config.widths[a - 1], config.widths[b - 1]);
                Skip {
                    from: a - 1,
                    to: b - 1,
                    weight: Tensor::param(
                        vec![cout, cin],
                        uniform(&mut rng, cout * cin, (3.0 / cin as f64).sqrt()),
                    ),
                    bias: Tensor::param(vec![cout], vec![T::zero(); cout]),
                }
            })
            .collect();
        let (c5, dw) = (config.widths[4], config.dense_width);
        let fc1 = Dense {
            weight: Tensor::param(
                vec![dw, c5],
                uniform(&mut rng, dw * c5, (6.0 / c5 as f64).sqrt()),
            ),
            bias: Tensor::param(vec![dw], vec![T::zero(); dw]),
        };
        let fc2 = Dense {
            weight: Tensor::param(vec![1, dw], uniform(&mut rng, dw, (3.0 / dw as f64).sqrt())),
            bias: Tensor::param(vec![1], vec![T::zero()]),
        };
        Ok(Self {
            config,
            blocks,
            skips,
            fc1,
            fc2,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in manifest order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.conv.weight"), &b.weight));
            out.push((format!("{p}.conv.bias"), &b.bias));
            out.push((format!("{p}.bn.gamma"), &b.gamma));
            out.push((format!("{p}.bn.beta"), &b.beta));
        }
        for s in &self.skips {
            let p = format!("skip{}_{}", s.from + 1, s.to + 1);
            out.push((format!("{p}.weight"), &s.weight));
            out.push((format!("{p}.bias"), &s.bias));
        }
        out.push(("fc1.weight".into(), &self.fc1.weight));
        out.push(("fc1.bias".into(), &self.fc1.bias));
        out.push(("fc2.weight".into(), &self.fc2.weight));
        out.push(("fc2.bias".into(), &self.fc2.bias));
        out
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        for s in &mut self.skips {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = self.named_params().iter().position(|(n, _)| n == name)?;
        self.params_mut().into_iter().nth(idx)
    }

    /// Batch-norm running statistics, `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{}.bn.running_mean", i + 1), &b.running_mean));
            out.push((format!("block{}.bn.running_var", i + 1), &b.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.running_mean);
            out.push(&mut b.running_var);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Same network at another precision; any cached graph is dropped.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Model {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: c(&b.running_mean),
                    running_var: c(&b.running_var),
                    cin: b.cin,
                    cout: b.cout,
                    k: b.k,
                })
                .collect(),
            skips: self
                .skips
                .iter()
                .map(|s| Skip {
                    from: s.from,
                    to: s.to,
                    weight: s.weight.cast(),
                    bias: s.bias.cast(),
                })
                .collect(),
            fc1: Dense {
                weight: self.fc1.weight.cast(),
                bias: self.fc1.bias.cast(),
            },
            fc2: Dense {
                weight: self.fc2.weight.cast(),
                bias: self.fc2.bias.cast(),
            },
            cache: None,
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Discrete state of the cached forward pass: every pooling winner and
    /// the sign of every ReLU. Within one pattern the loss is smooth in the
    /// parameters.
    pub fn activation_pattern(&self) -> Option<Vec<u32>> {
        let c = self.cache.as_ref()?;
        let mut v = Vec::new();
        for (bi, bc) in c.blocks.iter().enumerate() {
            let blk = &self.blocks[bi];
            let n = volume(c.dims[bi]);
            let on = volume(c.dims[bi + 1]);
            for (i, &am) in bc.argmax.iter().enumerate() {
                let (b, ch) = (i / (blk.cout * on), (i / on) % blk.cout);
                let y = blk.gamma.data[ch] * bc.xhat[(b * blk.cout + ch) * n + am as usize]
                    + blk.beta.data[ch];
                v.push(am);
                v.push((y > T::zero()) as u32);
            }
        }
        v.extend(c.h1.iter().map(|&h| (h > T::zero()) as u32));
        Some(v)
    }

    /// Probabilities for a `[B, C, D, H, W]` batch.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let shape = &input.shape;
        if shape.len() != 5 || shape[1] != self.config.input_channels || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "expected [B>0, {}, D, H, W], got {shape:?}",
                self.config.input_channels
            )));
        }
        if shape[2..].contains(&0) {
            return Err(Error::Shape(format!("empty spatial extent {shape:?}")));
        }
        self.cache = None;
        let batch = shape[0];
        let mut dims: Dims = [shape[2], shape[3], shape[4]];
        let train = matches!(mode, Mode::Train { .. });
        let pool = self.config.pool;
        let (eps, momentum) = (self.config.bn_eps, self.config.bn_momentum);

        let mut all_dims = vec![dims];
        let mut outputs: Vec<Vec<T>> = Vec::with_capacity(5);
        let mut block_caches = Vec::with_capacity(5);
        let mut skip_pooled: Vec<Vec<T>> = vec![Vec::new(); self.skips.len()];

        for bi in 0..5 {
            let x: &[T] = if bi == 0 {
                &input.data
            } else {
                &outputs[bi - 1]
            };
            let blk = &mut self.blocks[bi];
            let cs = ConvShape {
                cin: blk.cin,
                cout: blk.cout,
                k: blk.k,
                dims,
            };
            let n = volume(dims);
            let (in_len, out_len) = (blk.cin * n, blk.cout * n);
            let mut z = vec![T::zero(); batch * out_len];
            z.par_chunks_mut(out_len)
                .zip(x.par_chunks(in_len))
                .for_each(|(zo, xi)| cs.forward(xi, &blk.weight.data, &blk.bias.data, zo));

            let mut mean = vec![T::zero(); blk.cout];
            let mut inv_std = vec![T::zero(); blk.cout];
            for c in 0..blk.cout {
                if train {
                    let count = (batch * n) as f64;
                    let chan = || (0..batch).flat_map(|b| z[b * out_len + c * n..][..n].iter());
                    let mu = chan().map(|v| v.f64()).sum::<f64>() / count;
                    let var = chan().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / count;
                    mean[c] = T::of(mu);
                    inv_std[c] = T::of(1.0 / (var + eps).sqrt());
                    let unbiased = if count > 1.0 {
                        var * count / (count - 1.0)
                    } else {
                        var
                    };
                    blk.running_mean[c] =
                        T::of((1.0 - momentum) * blk.running_mean[c].f64() + momentum * mu);
                    blk.running_var[c] =
                        T::of((1.0 - momentum) * blk.running_var[c].f64() + momentum * unbiased);
                } else {
                    mean[c] = blk.running_mean[c];
                    inv_std[c] = T::of(1.0 / (blk.running_var[c].f64() + eps).sqrt());
                }
            }
            z.par_chunks_mut(out_len).for_each(|zs| {
                for (c, chunk) in zs.chunks_mut(n).enumerate() {
                    for v in chunk {
                        *v = (*v - mean[c]) * inv_std[c];
                    }
                }
            });

            let od = pooled_dims(dims, pool);
            let on = volume(od);
            let mut out = vec![T::zero(); batch * blk.cout * on];
            let mut argmax = vec![0u32; batch * blk.cout * on];
            let (gamma, beta, cout) = (&blk.gamma.data, &blk.beta.data, blk.cout);
            out.par_chunks_mut(cout * on)
                .zip(argmax.par_chunks_mut(cout * on))
                .zip(z.par_chunks(out_len))
                .for_each(|((o, am), zs)| {
                    affine_relu_maxpool(zs, cout, dims, pool, gamma, beta, o, am)
                });

            for (si, sk) in self.skips.iter().enumerate().filter(|(_, s)| s.to == bi) {
                let src = &outputs[sk.from];
                let (cin, sdims) = (sk.weight.shape[1], all_dims[sk.from + 1]);
                let sn = volume(sdims);
                let mut pooled = vec![T::zero(); batch * cin * on];
                for b in 0..batch {
                    adaptive_avg_pool(
                        &src[b * cin * sn..(b + 1) * cin * sn],
                        cin,
                        sdims,
                        od,
                        &mut pooled[b * cin * on..(b + 1) * cin * on],
                    );
                    let ob = &mut out[b * cout * on..(b + 1) * cout * on];
                    for (c, chunk) in ob.chunks_mut(on).enumerate() {
                        for v in chunk {
                            *v = *v + sk.bias.data[c];
                        }
                    }
                    gemm(
                        cout,
                        cin,
                        on,
                        (&sk.weight.data, cin, 1),
                        (&pooled[b * cin * on..], on, 1),
                        T::one(),
                        (ob, on, 1),
                    );
                }
                skip_pooled[si] = pooled;
            }

            block_caches.push(BlockCache {
                xhat: z,
                inv_std,
                argmax,
                batch_stats: train,
            });
            outputs.push(out);
            dims = od;
            all_dims.push(dims);
        }

        let (c5, dw) = (self.config.widths[4], self.config.dense_width);
        let n5 = volume(dims);
        let last = &outputs[4];
        let gap: Vec<T> = (0..batch * c5)
            .map(|i| {
                let s = last[i * n5..(i + 1) * n5]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
                s / T::of(n5 as f64)
            })
            .collect();

        let mut drop_rng = match mode {
            Mode::Train { dropout_seed } => Some(Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };
        let p = self.config.dropout;
        let mut mask = |len: usize| -> Vec<T> {
            match drop_rng.as_mut() {
                Some(r) if p > 0.0 => (0..len)
                    .map(|_| {
                        if r.random::<f64>() < p {
                            T::zero()
                        } else {
                            T::of(1.0 / (1.0 - p))
                        }
                    })
                    .collect(),
                _ => vec![T::one(); len],
            }
        };
        let mask1 = mask(batch * c5);
        let mask2 = mask(batch * dw);

        let a1: Vec<T> = gap.iter().zip(&mask1).map(|(&g, &m)| g * m).collect();
        let mut h1 = vec![T::zero(); batch * dw];
        for row in h1.chunks_mut(dw) {
            row.copy_from_slice(&self.fc1.bias.data);
        }
        gemm(
            batch,
            c5,
            dw,
            (&a1, c5, 1),
            (&self.fc1.weight.data, 1, c5),
            T::one(),
            (&mut h1, dw, 1),
        );
        let probs: Vec<T> = (0..batch)
            .map(|b| {
                let mut logit = self.fc2.bias.data[0];
                for j in 0..dw {
                    let a = h1[b * dw + j].max(T::zero()) * mask2[b * dw + j];
                    logit = logit + a * self.fc2.weight.data[j];
                }
                T::one() / (T::one() + (-logit).exp())
            })
            .collect();

        if mode != Mode::Eval {
            self.cache = Some(Cache {
                batch,
                input: input.data.clone(),
                dims: all_dims,
                outputs,
                blocks: block_caches,
                skip_pooled,
                gap,
                mask1,
                h1,
                mask2,
                probs: probs.clone(),
            });
        }
        Ok(probs)
    }

    /// Gradients of the mean weighted BCE of the last cached forward pass.
    /// Overwrites every parameter gradient and consumes the graph.
    pub fn backward(&mut self, targets: &[T], pos_weight: f64) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called without a cached forward pass".into()))?;
        let batch = cache.batch;
        if targets.len() != batch {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {batch}",
                targets.len()
            )));
        }
        self.zero_grad();
        let (c5, dw) = (self.config.widths[4], self.config.dense_width);
        let inv_b = 1.0 / batch as f64;
        let dlogit: Vec<T> = cache
            .probs
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let w = if t > T::of(0.5) { pos_weight } else { 1.0 };
                (p - t) * T::of(w * inv_b)
            })
            .collect();

        // dense head
        let a2: Vec<T> = cache
            .h1
            .iter()
            .zip(&cache.mask2)
            .map(|(&h, &m)| h.max(T::zero()) * m)
            .collect();
        let mut dh1 = vec![T::zero(); batch * dw];
        {
            let g2 = self.fc2.weight.grad.as_mut().unwrap();
            let gb2 = self.fc2.bias.grad.as_mut().unwrap();
            for b in 0..batch {
                gb2[0] = gb2[0] + dlogit[b];
                for j in 0..dw {
                    let i = b * dw + j;
                    g2[j] = g2[j] + dlogit[b] * a2[i];
                    if cache.h1[i] > T::zero() {
                        dh1[i] = dlogit[b] * self.fc2.weight.data[j] * cache.mask2[i];
                    }
                }
            }
        }
        let a1: Vec<T> = cache
            .gap
            .iter()
            .zip(&cache.mask1)
            .map(|(&g, &m)| g * m)
            .collect();
        gemm(
            dw,
            batch,
            c5,
            (&dh1, 1, dw),
            (&a1, c5, 1),
            T::zero(),
            (self.fc1.weight.grad.as_mut().unwrap(), c5, 1),
        );
        {
            let gb1 = self.fc1.bias.grad.as_mut().unwrap();
            for row in dh1.chunks(dw) {
                for (g, &v) in gb1.iter_mut().zip(row) {
                    *g = *g + v;
                }
            }
        }
        let mut da1 = vec![T::zero(); batch * c5];
        gemm(
            batch,
            dw,
            c5,
            (&dh1, dw, 1),
            (&self.fc1.weight.data, c5, 1),
            T::zero(),
            (&mut da1, c5, 1),
        );

        let mut douts: Vec<Vec<T>> = cache
            .outputs
            .iter()
            .map(|o| vec![T::zero(); o.len()])
            .collect();
        let n5 = volume(cache.dims[5]);
        for (i, chunk) in douts[4].chunks_mut(n5).enumerate() {
            let g = da1[i] * cache.mask1[i] / T::of(n5 as f64);
            chunk.fill(g);
        }

        for bi in (0..5).rev() {
            let dout = std::mem::take(&mut douts[bi]);
            let od = cache.dims[bi + 1];
            let on = volume(od);
            let cout = self.blocks[bi].cout;

            for si in (0..self.skips.len()).rev() {
                if self.skips[si].to != bi {
                    continue;
                }
                let from = self.skips[si].from;
                let sk = &mut self.skips[si];
                let cin = sk.weight.shape[1];
                let sdims = cache.dims[from + 1];
                let sn = volume(sdims);
                let pooled = &cache.skip_pooled[si];
                let mut dpooled = vec![T::zero(); cin * on];
                for b in 0..batch {
                    let db = &dout[b * cout * on..(b + 1) * cout * on];
                    let pb = &pooled[b * cin * on..(b + 1) * cin * on];
                    gemm(
                        cout,
                        on,
                        cin,
                        (db, on, 1),
                        (pb, 1, on),
                        T::one(),
                        (sk.weight.grad.as_mut().unwrap(), cin, 1),
                    );
                    let gb = sk.bias.grad.as_mut().unwrap();
                    for (c, chunk) in db.chunks(on).enumerate() {
                        gb[c] = chunk.iter().fold(gb[c], |a, &v| a + v);
                    }
                    gemm(
                        cin,
                        cout,
                        on,
                        (&sk.weight.data, 1, cin),
                        (db, on, 1),
                        T::zero(),
                        (&mut dpooled, on, 1),
                    );
                    adaptive_avg_pool_backward(
                        &dpooled,
                        cin,
                        sdims,
                        od,
                        &mut douts[from][b * cin * sn..(b + 1) * cin * sn],
                    );
                }
            }

            let bc = &cache.blocks[bi];
            let blk = &mut self.blocks[bi];
            let dims = cache.dims[bi];
            let n = volume(dims);
            let out_len = cout * n;
            // unpool through the fused ReLU
            let mut dz = vec![T::zero(); batch * out_len];
            for b in 0..batch {
                for c in 0..cout {
                    for o in 0..on {
                        let idx = (b * cout + c) * on + o;
                        let at = b * out_len + c * n + bc.argmax[idx] as usize;
                        let y = blk.gamma.data[c] * bc.xhat[at] + blk.beta.data[c];
                        if y > T::zero() {
                            dz[at] = dz[at] + dout[idx];
                        }
                    }
                }
            }
            // batch norm
            let count = (batch * n) as f64;
            for c in 0..cout {
                let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                for b in 0..batch {
                    let base = b * out_len + c * n;
                    for i in base..base + n {
                        sum_dy += dz[i].f64();
                        sum_dy_xhat += (dz[i] * bc.xhat[i]).f64();
                    }
                }
                let g = blk.gamma.data[c];
                let gg = blk.gamma.grad.as_mut().unwrap();
                gg[c] = T::of(sum_dy_xhat);
                blk.beta.grad.as_mut().unwrap()[c] = T::of(sum_dy);
                let scale = g * bc.inv_std[c];
                if bc.batch_stats {
                    let m1 = T::of(sum_dy / count);
                    let m2 = T::of(sum_dy_xhat / count);
                    for b in 0..batch {
                        let base = b * out_len + c * n;
                        for i in base..base + n {
                            dz[i] = scale * (dz[i] - m1 - bc.xhat[i] * m2);
                        }
                    }
                } else {
                    for b in 0..batch {
                        let base = b * out_len + c * n;
                        for v in &mut dz[base..base + n] {
                            *v = *v * scale;
                        }
                    }
                }
            }
            // convolution
            let x: &[T] = if bi == 0 {
                &cache.input
            } else {
                &cache.outputs[bi - 1]
            };
            let cs = ConvShape {
                cin: blk.cin,
                cout,
                k: blk.k,
                dims,
            };
            let in_len = blk.cin * n;
            let need_dx = bi > 0;
            let weight = &blk.weight.data;
            let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..batch)
                .into_par_iter()
                .map(|b| {
                    let mut gw = vec![T::zero(); weight.len()];
                    let mut gb = vec![T::zero(); cout];
                    let mut gx = if need_dx {
                        vec![T::zero(); in_len]
                    } else {
                        Vec::new()
                    };
                    cs.backward(
                        &x[b * in_len..(b + 1) * in_len],
                        weight,
                        &dz[b * out_len..(b + 1) * out_len],
                        &mut gw,
                        &mut gb,
                        need_dx.then_some(gx.as_mut_slice()),
                    );
                    (gw, gb, gx)
                })
                .collect();
            let gw = blk.weight.grad.as_mut().unwrap();
            for (sw, _, _) in &per_sample {
                for (g, &v) in gw.iter_mut().zip(sw) {
                    *g = *g + v;
                }
            }
            let gb = blk.bias.grad.as_mut().unwrap();
            for (_, sb, _) in &per_sample {
                for (g, &v) in gb.iter_mut().zip(sb) {
                    *g = *g + v;
                }
            }
            if need_dx {
                let prev = &mut douts[bi - 1];
                for (b, (_, _, sx)) in per_sample.iter().enumerate() {
                    for (g, &v) in prev[b * in_len..(b + 1) * in_len].iter_mut().zip(sx) {
                        *g = *g + v;
                    }
                }
            }
        }
        Ok(())
    }
}
