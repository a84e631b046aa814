//! The speaker embedding network and its additive angular margin classifier.
//!
//! Data flow for one utterance of T frames and M mel bins:
//!
//! ```text
//! [T, M] -> conv k5 + BN + ReLU -> [T, C]
//!        -> MCB x n_mcb (dilated multi-scale convs + temporal attention) -> [T, C]
//!        -> residual BLSTM -> [T, C]
//!        -> attentive statistics pooling -> [2C]
//!        -> linear + BN -> embedding [E]
//! ```
//!
//! Every stage also accepts a batch `[B, T, ...]`. Batch norm uses batch
//! statistics in training graphs and running statistics otherwise.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use crate::dsp::{features, AudioBuffer, FrameSpec, LmsFeature, CMVN_WINDOW_S};
use crate::{Error, Result};

pub use checkpoint::{config_path, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{AmcrnConfig, Structure};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside attentive statistics pooling.
pub const POOL_VAR_FLOOR: f64 = 1e-9;

/// Fixed-length speaker representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f32>,
    pub speaker_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            values,
            speaker_id: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }
}

/// Batch statistics gathered during a training pass, keyed by layer.
pub type BnUpdates = Vec<(String, BatchStats)>;

/// Parameters, running statistics and configuration of a network.
#[derive(Debug, Clone)]
pub struct Amcrn {
    config: AmcrnConfig,
    frontend: FrameSpec,
    params: ParamStore,
    bn: BTreeMap<String, RunningStats>,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    bn: &'a mut BTreeMap<String, RunningStats>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        let bound = 1.0 / ((k * cin) as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[k, cin, cout], bound)?;
        self.uniform(format!("{prefix}.bias"), &[cout], bound)?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        let bound = 1.0 / (din as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[din, dout], bound)?;
        self.uniform(format!("{prefix}.bias"), &[dout], bound)?;
        Ok(())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.params.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0))?;
        self.params.add(format!("{prefix}.beta"), Tensor::zeros(&[c]))?;
        self.bn.insert(prefix.to_string(), RunningStats::new(c));
        Ok(())
    }

    fn lstm(&mut self, prefix: &str, din: usize, h: usize) -> Result<()> {
        let bound = 1.0 / (h as f64).sqrt();
        self.uniform(format!("{prefix}.wx"), &[din, 4 * h], bound)?;
        self.uniform(format!("{prefix}.wh"), &[h, 4 * h], bound)?;
        let b = self.uniform(format!("{prefix}.b"), &[4 * h], bound)?;
        let bias = self.params.get_mut(b).value.data_mut();
        bias[h..2 * h].iter_mut().for_each(|v| *v += 1.0);
        Ok(())
    }
}

/// Views a `[T, C]` tensor as `[1, T, C]`; returns whether it was unbatched.
fn batched(g: &mut Graph<'_>, x: Var) -> Result<(Var, bool)> {
    match *g.shape(x) {
        [t, c] => Ok((g.reshape(x, &[1, t, c])?, true)),
        [_, _, _] => Ok((x, false)),
        ref s => Err(Error::shape(format!("expected [T, C] or [B, T, C], got {s:?}"))),
    }
}

fn unbatched(g: &mut Graph<'_>, x: Var, was_2d: bool) -> Result<Var> {
    if was_2d {
        let s = g.shape(x)[1..].to_vec();
        g.reshape(x, &s)
    } else {
        Ok(x)
    }
}

impl Amcrn {
    /// Builds a freshly initialized network.
    pub fn new(config: AmcrnConfig, seed: u64) -> Result<Self> {
        let frontend = FrameSpec {
            n_mels: config.n_mels,
            ..FrameSpec::default()
        };
        Self::with_frontend(config, frontend, seed)
    }

    pub fn with_frontend(config: AmcrnConfig, frontend: FrameSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        if frontend.n_mels != config.n_mels {
            return Err(Error::config(format!(
                "frontend produces {} mel bins but the model expects {}",
                frontend.n_mels, config.n_mels
            )));
        }
        let mut params = ParamStore::new();
        let mut bn = BTreeMap::new();
        let mut init = Init {
            params: &mut params,
            bn: &mut bn,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config.initial_channels;
        init.conv("init.conv", config.initial_kernel, config.n_mels, c)?;
        init.bn("init.bn", c)?;
        for i in 0..config.n_mcb {
            let c = config.mcb_channels[i];
            let p = format!("mcb{i}");
            init.conv(&format!("{p}.conv_in"), config.mcb_kernel[i], c, c)?;
            init.bn(&format!("{p}.bn_in"), c)?;
            if config.structure.multi_scale {
                let w = c / config.n_scales;
                for j in 2..=config.n_scales {
                    init.conv(&format!("{p}.scale{j}.conv"), config.scale_kernel, w, w)?;
                }
            } else {
                init.conv(&format!("{p}.single.conv"), config.scale_kernel, c, c)?;
            }
            init.conv(&format!("{p}.conv_out"), config.fusion_kernel(i), c, c)?;
            init.bn(&format!("{p}.bn_out"), c)?;
            if config.structure.temporal_attention {
                init.conv(&format!("{p}.ta.conv"), config.ta_kernel, 2, 1)?;
            }
        }
        let c = config.final_channels();
        if config.structure.residual_blstm {
            let h = config.blstm_hidden;
            for l in 0..config.blstm_layers {
                let din = if l == 0 { c } else { 2 * h };
                init.lstm(&format!("blstm.l{l}.fwd"), din, h)?;
                init.lstm(&format!("blstm.l{l}.bwd"), din, h)?;
            }
            init.linear("blstm.linear", 2 * h, c)?;
        }
        init.linear("pool.att1", c, config.pool_bottleneck)?;
        init.linear("pool.att2", config.pool_bottleneck, c)?;
        init.linear("head.linear", 2 * c, config.embedding_dim)?;
        init.bn("head.bn", config.embedding_dim)?;
        let e = config.embedding_dim;
        init.uniform("aam.weight".into(), &[config.n_classes, e], 1.0 / (e as f64).sqrt())?;
        Ok(Self {
            config,
            frontend,
            params,
            bn,
        })
    }

    pub fn config(&self) -> &AmcrnConfig {
        &self.config
    }

    pub fn frontend(&self) -> &FrameSpec {
        &self.frontend
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, RunningStats> {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats> {
        &mut self.bn
    }

    /// Number of scalar parameters, optionally including the classifier head.
    pub fn num_params(&self, include_head: bool) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| include_head || !p.name.starts_with("aam."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Looks up a parameter id by name.
    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        self.params
            .id(name)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    fn p(&self, g: &mut Graph<'_>, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        g.param(id)
    }

    /// Rounds every parameter and running statistic to single precision, so
    /// that the network equals what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for s in self.bn.values_mut() {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (name, stats) in updates {
            let run = self.bn.get_mut(name).expect("batch norm layer exists");
            for (r, b) in run.mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in run.var.iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    fn conv(&self, g: &mut Graph<'_>, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"));
        let b = self.p(g, &format!("{prefix}.bias"));
        g.conv1d(x, w, Some(b), dilation)
    }

    fn linear(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"));
        let b = self.p(g, &format!("{prefix}.bias"));
        g.linear(x, w, Some(b))
    }

    /// Batch norm in training or inference form depending on the graph mode.
    pub fn batchnorm(&self, g: &mut Graph<'_>, x: Var, prefix: &str, upd: &mut BnUpdates) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.gamma"));
        let beta = self.p(g, &format!("{prefix}.beta"));
        if g.is_training() {
            let (y, stats) = g.batchnorm_train(x, gamma, beta)?;
            upd.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let run = &self.bn[prefix];
            g.batchnorm_eval(x, gamma, beta, &run.mean, &run.var)
        }
    }

    /// Temporal attention over a `[T, C]` or `[B, T, C]` feature map using
    /// the kernel `{prefix}.conv`. Returns the frame gates `A_T` (`[.., T, 1]`)
    /// and the gated map `X_T`.
    pub fn temporal_attention(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<(Var, Var)> {
        let (x3, was_2d) = batched(g, x)?;
        let avg = g.mean_axis(x3, 2)?;
        let max = g.max_axis(x3, 2)?;
        let both = g.concat(&[avg, max], 2)?;
        let logits = self.conv(g, both, &format!("{prefix}.conv"), 1)?;
        let gate = g.sigmoid(logits);
        let gated = g.mul_broadcast(gate, x3)?;
        Ok((unbatched(g, gate, was_2d)?, unbatched(g, gated, was_2d)?))
    }

    /// Multi-scale convolutional block `i`; preserves the input shape.
    pub fn mcb_forward(&self, g: &mut Graph<'_>, s: Var, i: usize, upd: &mut BnUpdates) -> Result<Var> {
        let cfg = &self.config;
        if i >= cfg.n_mcb {
            return Err(Error::config(format!("block {i} out of range (n_mcb = {})", cfg.n_mcb)));
        }
        let (s, was_2d) = batched(g, s)?;
        if g.shape(s)[2] != cfg.mcb_channels[i] {
            return Err(Error::shape(format!(
                "block {i} expects {} channels, got {:?}",
                cfg.mcb_channels[i],
                g.shape(s)
            )));
        }
        let r = cfg.dilation(i);
        let pre = format!("mcb{i}");
        let p = self.conv(g, s, &format!("{pre}.conv_in"), r)?;
        let p = self.batchnorm(g, p, &format!("{pre}.bn_in"), upd)?;
        let p = g.relu(p);
        let mixed = if cfg.structure.multi_scale {
            let parts = g.split(p, cfg.n_scales, 2)?;
            let mut outs = vec![parts[0]];
            for j in 2..=cfg.n_scales {
                let input = if j == 2 {
                    parts[1]
                } else {
                    g.add(parts[j - 1], outs[j - 2])?
                };
                outs.push(self.conv(g, input, &format!("{pre}.scale{j}.conv"), r)?);
            }
            g.concat(&outs, 2)?
        } else {
            self.conv(g, p, &format!("{pre}.single.conv"), r)?
        };
        let x = self.conv(g, mixed, &format!("{pre}.conv_out"), r)?;
        let x = self.batchnorm(g, x, &format!("{pre}.bn_out"), upd)?;
        let xt = if cfg.structure.temporal_attention {
            self.temporal_attention(g, x, &format!("{pre}.ta"))?.1
        } else {
            x
        };
        let sum = g.add(s, xt)?;
        let out = g.relu(sum);
        unbatched(g, out, was_2d)
    }

    /// Bidirectional LSTM layer with parameters `{prefix}.fwd.*` and
    /// `{prefix}.bwd.*`; output is `[forward ; backward]` per frame.
    pub fn blstm_layer(&self, g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
        let dir = |g: &mut Graph<'_>, d: &str, reverse: bool| -> Result<Var> {
            let wx = self.p(g, &format!("{prefix}.{d}.wx"));
            let wh = self.p(g, &format!("{prefix}.{d}.wh"));
            let b = self.p(g, &format!("{prefix}.{d}.b"));
            g.lstm(x, wx, wh, b, reverse)
        };
        let f = dir(g, "fwd", false)?;
        let b = dir(g, "bwd", true)?;
        let axis = g.shape(x).len() - 1;
        g.concat(&[f, b], axis)
    }

    /// Stacked BLSTM layers, a per-frame projection back to C channels and
    /// a residual connection from the block input.
    pub fn residual_blstm(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.config.blstm_layers {
            if l > 0 {
                h = g.dropout(h, self.config.blstm_dropout)?;
            }
            h = self.blstm_layer(g, h, &format!("blstm.l{l}"))?;
        }
        let f = self.linear(g, h, "blstm.linear")?;
        g.add(x, f)
    }

    /// Channel-wise attentive statistics pooling. `[T, C]` maps to `[2C]`,
    /// `[B, T, C]` to `[B, 2C]`; the output is `[mean ; std]`.
    pub fn attentive_stat_pool(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let (h, was_2d) = batched(g, h)?;
        let (b, t, c) = (g.shape(h)[0], g.shape(h)[1], g.shape(h)[2]);
        if t < 2 {
            return Err(Error::InputTooShort {
                needed: 2,
                got: t,
                unit: "frames",
            });
        }
        let e = self.linear(g, h, "pool.att1")?;
        let e = g.tanh(e);
        let e = self.linear(g, e, "pool.att2")?;
        let alpha = g.softmax(e, 1)?;
        let wh = g.mul(alpha, h)?;
        let mean = g.sum_axis(wh, 1)?;
        let h2 = g.mul(h, h)?;
        let wh2 = g.mul(alpha, h2)?;
        let second = g.sum_axis(wh2, 1)?;
        let mean_sq = g.mul(mean, mean)?;
        let var = g.sub(second, mean_sq)?;
        let std = g.sqrt_floor(var, POOL_VAR_FLOOR);
        let stats = g.concat(&[mean, std], 2)?;
        if was_2d {
            g.reshape(stats, &[2 * c])
        } else {
            g.reshape(stats, &[b, 2 * c])
        }
    }

    /// Embedding network on a `[T, M]` or `[B, T, M]` feature tensor; returns
    /// `[E]` or `[B, E]`.
    pub fn forward_embedding(&self, g: &mut Graph<'_>, x: Var, upd: &mut BnUpdates) -> Result<Var> {
        let (x, was_2d) = batched(g, x)?;
        if g.shape(x)[2] != self.config.n_mels {
            return Err(Error::shape(format!(
                "expected {} mel bins, got input {:?}",
                self.config.n_mels,
                g.shape(x)
            )));
        }
        let h = self.conv(g, x, "init.conv", 1)?;
        let h = self.batchnorm(g, h, "init.bn", upd)?;
        let mut h = g.relu(h);
        for i in 0..self.config.n_mcb {
            h = self.mcb_forward(g, h, i, upd)?;
        }
        if self.config.structure.residual_blstm {
            h = self.residual_blstm(g, h)?;
        }
        let pooled = self.attentive_stat_pool(g, h)?;
        let e = self.linear(g, pooled, "head.linear")?;
        let e = self.batchnorm(g, e, "head.bn", upd)?;
        if was_2d {
            let d = self.config.embedding_dim;
            g.reshape(e, &[d])
        } else {
            Ok(e)
        }
    }

    /// AAM-softmax logits of `[B, E]` embeddings against the class weights.
    pub fn aam_logits(&self, g: &mut Graph<'_>, emb: Var, labels: &[usize]) -> Result<Var> {
        let w = self.p(g, "aam.weight");
        g.aam_logits(emb, w, labels, self.config.aam_margin, self.config.aam_scale)
    }

    /// Mean cross-entropy of the AAM logits for a `[B, T, M]` batch.
    pub fn loss(&self, g: &mut Graph<'_>, x: Var, labels: &[usize], upd: &mut BnUpdates) -> Result<Var> {
        let emb = self.forward_embedding(g, x, upd)?;
        let logits = self.aam_logits(g, emb, labels)?;
        g.cross_entropy(logits, labels)
    }

    /// Inference-mode embedding of a normalized feature matrix.
    pub fn embed(&self, lms: &LmsFeature) -> Result<SpeakerEmbedding> {
        let (t, m) = (lms.n_frames(), lms.n_mels());
        if t == 0 {
            return Err(Error::InputTooShort {
                needed: 2,
                got: 0,
                unit: "frames",
            });
        }
        let x = Tensor::new(vec![t, m], lms.values.as_slice().to_vec())?;
        let mut g = Graph::new(&self.params, false, 0);
        let xv = g.input(x);
        let e = self.forward_embedding(&mut g, xv, &mut Vec::new())?;
        let values: Vec<f32> = g.data(e).iter().map(|&v| v as f32).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(SpeakerEmbedding::new(values))
    }

    /// Front-end features followed by [`Amcrn::embed`].
    pub fn embed_audio(&self, audio: &AudioBuffer) -> Result<SpeakerEmbedding> {
        self.embed(&features(audio, &self.frontend, CMVN_WINDOW_S)?)
    }
}
