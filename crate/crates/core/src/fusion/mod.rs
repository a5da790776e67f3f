//! Attention-based multi-modal fusion network.
//!
//! Each modality passes through its own encoder into a shared latent size
//! `M`. The `K` latents are stacked, mixed by multi-head self-attention with
//! a residual/layernorm/feedforward refinement, mean-pooled, and fed to a
//! task head. An early-fusion variant concatenates the raw modalities into a
//! single encoder instead.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{BatchStats, Gradients, Graph, Mode, RunningStats, Tensor, Var};

/// Feature vectors of one patient keyed by modality name.
pub type ModalitySet = BTreeMap<String, Vec<f64>>;

/// Momentum of the running batchnorm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    /// One pre-sigmoid logit per patient.
    Binary,
    /// One logit per survival bin.
    Mtlr { bins: usize },
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Binary => 1,
            HeadKind::Mtlr { bins } => bins,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Attention,
    /// Concatenate all modalities and encode them jointly.
    Early,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub latent_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub head: HeadKind,
    #[serde(default)]
    pub fusion: FusionKind,
}

impl ModelConfig {
    pub fn new(modalities: &[(&str, usize)], head: HeadKind) -> Self {
        ModelConfig {
            modalities: modalities
                .iter()
                .map(|&(name, dim)| ModalitySpec { name: name.to_string(), dim })
                .collect(),
            latent_dim: 256,
            heads: 2,
            dropout: 0.3,
            head,
            fusion: FusionKind::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::invalid("model needs at least one modality"));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.dim == 0) {
            return Err(Error::invalid(format!("modality {} has no features", m.name)));
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate modality names"));
        }
        if self.latent_dim == 0 || self.heads == 0 {
            return Err(Error::invalid("latent size and head count must be positive"));
        }
        if self.fusion == FusionKind::Attention && !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "{} heads do not divide latent size {}",
                self.heads, self.latent_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.head.output_dim() == 0 || matches!(self.head, HeadKind::Mtlr { bins: 1 }) {
            return Err(Error::invalid("an MTLR head needs at least 2 bins"));
        }
        Ok(())
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let m = self.latent_dim;
        let encoder = |n: usize| n * m + m + 2 * m + m * m + m;
        let encoders: usize = match self.fusion {
            FusionKind::Attention => self.modalities.iter().map(|s| encoder(s.dim)).sum(),
            FusionKind::Early => encoder(self.modalities.iter().map(|s| s.dim).sum()),
        };
        let block = match self.fusion {
            FusionKind::Attention => 4 * (m * m + m) + (m * 2 * m + 2 * m) + (2 * m * m + m) + 4 * m,
            FusionKind::Early => 0,
        };
        let t = self.head.output_dim();
        encoders + block + m * t + t
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let idx = store.len() as u64;
        let mut rng = rng_for(seed, &[0x1417, idx]);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Linear {
            w: store.push(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w)?),
            b: store.push(format!("{name}.bias"), Tensor::vector(b)?),
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }
}

/// Learned per-feature scale and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    gamma: usize,
    beta: usize,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Affine {
            gamma: store.push(format!("{name}.gamma"), Tensor::filled(vec![dim], 1.0)?),
            beta: store.push(format!("{name}.beta"), Tensor::zeros(vec![dim])?),
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.mul(x, p[self.gamma])?;
        g.add(y, p[self.beta])
    }
}

/// linear -> batchnorm -> GELU -> dropout -> linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoder {
    name: String,
    input_dim: usize,
    latent_dim: usize,
    dropout: f64,
    lin1: Linear,
    bn: Affine,
    running: RunningStats,
    lin2: Linear,
}

impl ModalityEncoder {
    fn new(store: &mut ParamStore, name: &str, input_dim: usize, m: usize, dropout: f64, seed: u64) -> Result<Self> {
        let prefix = format!("encoder.{name}");
        Ok(ModalityEncoder {
            name: name.to_string(),
            input_dim,
            latent_dim: m,
            dropout,
            lin1: Linear::new(store, &format!("{prefix}.lin1"), input_dim, m, seed)?,
            bn: Affine::new(store, &format!("{prefix}.bn"), m)?,
            running: RunningStats { mean: vec![0.0; m], var: vec![1.0; m] },
            lin2: Linear::new(store, &format!("{prefix}.lin2"), m, m, seed)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn running_stats(&self) -> &RunningStats {
        &self.running
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, mode: Mode, seed: u64) -> Result<(Var, Option<BatchStats>)> {
        let sh = g.shape(x);
        if sh.len() != 2 || sh[1] != self.input_dim {
            return Err(Error::shape(format!(
                "encoder {} expects [N, {}], got {sh:?}",
                self.name, self.input_dim
            )));
        }
        let h = self.lin1.forward(g, p, x)?;
        let (h, stats) = match mode {
            Mode::Train => {
                let (h, s) = g.batchnorm_train(h)?;
                (h, Some(s))
            }
            Mode::Eval => (g.batchnorm_eval(h, &self.running)?, None),
        };
        let h = self.bn.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = g.dropout(h, self.dropout, mode, seed)?;
        Ok((self.lin2.forward(g, p, h)?, stats))
    }
}

/// Self-attention over the stacked latents followed by a feedforward
/// refinement, each wrapped in residual + layernorm.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    heads: usize,
    dim: usize,
    dropout: f64,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Affine,
    ff1: Linear,
    ff2: Linear,
    ln2: Affine,
}

impl FusionBlock {
    fn new(store: &mut ParamStore, m: usize, heads: usize, dropout: f64, seed: u64) -> Result<Self> {
        Ok(FusionBlock {
            heads,
            dim: m,
            dropout,
            q: Linear::new(store, "fusion.q", m, m, seed)?,
            k: Linear::new(store, "fusion.k", m, m, seed)?,
            v: Linear::new(store, "fusion.v", m, m, seed)?,
            o: Linear::new(store, "fusion.out", m, m, seed)?,
            ln1: Affine::new(store, "fusion.ln1", m)?,
            ff1: Linear::new(store, "fusion.ff1", m, 2 * m, seed)?,
            ff2: Linear::new(store, "fusion.ff2", 2 * m, m, seed)?,
            ln2: Affine::new(store, "fusion.ln2", m)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Returns the refined `[B, K, M]` tensor and the head-averaged
    /// attention matrices, `B*K*K` values row-major.
    fn forward(&self, g: &mut Graph, p: &[Var], c: Var, mode: Mode, seed: u64) -> Result<(Var, Vec<f64>)> {
        let sh = g.shape(c).to_vec();
        if sh.len() != 3 || sh[2] != self.dim {
            return Err(Error::shape(format!("fusion expects [B, K, {}], got {sh:?}", self.dim)));
        }
        let (b, k) = (sh[0], sh[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, p, c)?;
        let kk = self.k.forward(g, p, c)?;
        let v = self.v.forward(g, p, c)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut attention = vec![0.0; b * k * k];
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dh, dh)?;
            let kh = g.slice_last(kk, h * dh, dh)?;
            let vh = g.slice_last(v, h * dh, dh)?;
            let kt = g.transpose_last(kh)?;
            let scores = g.bmm(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax_rows(scores)?;
            for (acc, &x) in attention.iter_mut().zip(g.data(a)) {
                *acc += x;
            }
            outs.push(g.bmm(a, vh)?);
        }
        attention.iter_mut().for_each(|x| *x /= self.heads as f64);
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_last(&outs)? };
        let attn_out = self.o.forward(g, p, cat)?;
        let r1 = g.add(c, attn_out)?;
        let n1 = g.layernorm_rows(r1)?;
        let n1 = self.ln1.forward(g, p, n1)?;
        let f = self.ff1.forward(g, p, n1)?;
        let f = g.gelu(f)?;
        let f = g.dropout(f, self.dropout, mode, seed)?;
        let f = self.ff2.forward(g, p, f)?;
        let r2 = g.add(n1, f)?;
        let n2 = g.layernorm_rows(r2)?;
        Ok((self.ln2.forward(g, p, n2)?, attention))
    }
}

/// Output of a batched forward pass. The graph is kept so a loss can be
/// attached and differentiated.
pub struct ForwardPass {
    pub graph: Graph,
    /// Graph leaves of the model parameters, in store order.
    pub params: Vec<Var>,
    /// `[B, 1]` logits (binary) or `[B, T]` bin logits (MTLR).
    pub output: Var,
    /// Head-averaged attention, `B*K*K` row-major; empty for early fusion.
    pub attention: Vec<f64>,
    /// Batch statistics of every encoder batchnorm (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

impl ForwardPass {
    /// Gradient of every parameter, zero-filled where the loss does not
    /// reach it.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.graph.value(v).len()])
            })
            .collect()
    }
}

/// Prediction for a single patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub output: Vec<f64>,
    /// `K*K` head-averaged attention matrix.
    pub attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmoModel {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    encoders: Vec<ModalityEncoder>,
    block: Option<FusionBlock>,
    head: Linear,
}

impl AmoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let m = config.latent_dim;
        let mut store = ParamStore::default();
        let encoders = match config.fusion {
            FusionKind::Attention => config
                .modalities
                .iter()
                .map(|s| ModalityEncoder::new(&mut store, &s.name, s.dim, m, config.dropout, seed))
                .collect::<Result<Vec<_>>>()?,
            FusionKind::Early => {
                let total = config.modalities.iter().map(|s| s.dim).sum();
                vec![ModalityEncoder::new(&mut store, "early", total, m, config.dropout, seed)?]
            }
        };
        let block = match config.fusion {
            FusionKind::Attention => Some(FusionBlock::new(&mut store, m, config.heads, config.dropout, seed)?),
            FusionKind::Early => None,
        };
        let head = Linear::new(&mut store, "head", m, config.head.output_dim(), seed)?;
        Ok(AmoModel { config, seed, store, encoders, block, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoders(&self) -> &[ModalityEncoder] {
        &self.encoders
    }

    pub fn block(&self) -> Option<&FusionBlock> {
        self.block.as_ref()
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    pub fn output_dim(&self) -> usize {
        self.config.head.output_dim()
    }

    /// Running batchnorm statistics of every encoder.
    pub fn running_stats(&self) -> Vec<&RunningStats> {
        self.encoders.iter().map(|e| &e.running).collect()
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.encoders.len() {
            return Err(Error::shape("running statistics count differs from encoder count"));
        }
        for (e, s) in self.encoders.iter().zip(&stats) {
            if s.mean.len() != e.latent_dim || s.var.len() != e.latent_dim {
                return Err(Error::shape(format!("running statistics for {} have wrong width", e.name)));
            }
        }
        for (e, s) in self.encoders.iter_mut().zip(stats) {
            e.running = s;
        }
        Ok(())
    }

    /// Exponential moving update of the running batchnorm statistics.
    pub fn update_running_stats(&mut self, batch: &[BatchStats], momentum: f64) -> Result<()> {
        if batch.len() != self.encoders.len() {
            return Err(Error::shape("batch statistics count differs from encoder count"));
        }
        for (e, s) in self.encoders.iter_mut().zip(batch) {
            for (r, b) in e.running.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in e.running.var.iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    /// Change the dropout rate of every layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout {rate} outside [0, 1)")));
        }
        self.config.dropout = rate;
        for e in &mut self.encoders {
            e.dropout = rate;
        }
        if let Some(b) = &mut self.block {
            b.dropout = rate;
        }
        Ok(())
    }

    fn site_seed(seed: u64, site: u64) -> u64 {
        derive_seed(seed, &[0xD20, site])
    }

    /// Batched forward pass. `inputs` holds one `[B, n_k]` tensor per
    /// modality in configuration order; `seed` keys the dropout masks.
    pub fn forward_batch(&self, inputs: &[Tensor], mode: Mode, seed: u64) -> Result<ForwardPass> {
        if inputs.len() != self.config.modalities.len() {
            return Err(Error::shape(format!(
                "model has {} modalities, got {} inputs",
                self.config.modalities.len(),
                inputs.len()
            )));
        }
        let batch = inputs[0].shape()[0];
        for (t, s) in inputs.iter().zip(&self.config.modalities) {
            if t.rank() != 2 || t.shape()[0] != batch || t.shape()[1] != s.dim {
                return Err(Error::shape(format!(
                    "modality {} expects [{batch}, {}], got {:?}",
                    s.name,
                    s.dim,
                    t.shape()
                )));
            }
        }
        let mut g = Graph::new();
        let params = self.store.bind(&mut g)?;
        let xs = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut batch_stats = Vec::new();
        let (pooled, attention) = match &self.block {
            Some(block) => {
                let mut latents = Vec::with_capacity(xs.len());
                for (i, (enc, &x)) in self.encoders.iter().zip(&xs).enumerate() {
                    let (z, s) = enc.forward(&mut g, &params, x, mode, Self::site_seed(seed, i as u64))?;
                    batch_stats.extend(s);
                    latents.push(z);
                }
                let c = g.stack_rows(&latents)?;
                let (fused, a) = block.forward(&mut g, &params, c, mode, Self::site_seed(seed, 0xF0))?;
                (g.mean_rows(fused)?, a)
            }
            None => {
                let x = if xs.len() == 1 { xs[0] } else { g.concat_last(&xs)? };
                let (z, s) = self.encoders[0].forward(&mut g, &params, x, mode, Self::site_seed(seed, 0))?;
                batch_stats.extend(s);
                (z, Vec::new())
            }
        };
        let output = self.head.forward(&mut g, &params, pooled)?;
        Ok(ForwardPass { graph: g, params, output, attention, batch_stats })
    }

    /// Eval-mode outputs for a batch: row-major `[B, out]` and attention.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pass = self.forward_batch(inputs, Mode::Eval, 0)?;
        Ok((pass.graph.data(pass.output).to_vec(), pass.attention))
    }

    /// Single-patient forward pass.
    pub fn forward(&self, patient: &ModalitySet, mode: Mode, seed: u64) -> Result<Prediction> {
        if patient.len() != self.config.modalities.len() {
            return Err(Error::invalid(format!(
                "patient supplies {} modalities, model expects {}",
                patient.len(),
                self.config.modalities.len()
            )));
        }
        let inputs = self
            .config
            .modalities
            .iter()
            .map(|s| {
                let x = patient
                    .get(&s.name)
                    .ok_or_else(|| Error::invalid(format!("missing modality {}", s.name)))?;
                Tensor::matrix(1, x.len(), x.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let pass = self.forward_batch(&inputs, mode, seed)?;
        Ok(Prediction {
            output: pass.graph.data(pass.output).to_vec(),
            attention: pass.attention,
        })
    }

    /// Encoder `k` on a batch `[B, n_k]`, returning `[B, M]`.
    pub fn encode_modality(&self, k: usize, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let enc = self
            .encoders
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no encoder {k}")))?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g)?;
        let xv = g.input(x.clone())?;
        let (z, _) = enc.forward(&mut g, &p, xv, mode, seed)?;
        Ok(g.value(z).clone())
    }

    /// The fusion block alone on `[B, K, M]` (or `[K, M]`) latents:
    /// refined latents and head-averaged attention.
    pub fn mhsa_fuse(&self, c: &Tensor, mode: Mode, seed: u64) -> Result<(Tensor, Vec<f64>)> {
        let block = self
            .block
            .as_ref()
            .ok_or_else(|| Error::invalid("early-fusion model has no attention block"))?;
        let c3 = if c.rank() == 2 {
            c.clone().reshaped(vec![1, c.shape()[0], c.shape()[1]])?
        } else {
            c.clone()
        };
        let mut g = Graph::new();
        let p = self.store.bind(&mut g)?;
        let cv = g.input(c3)?;
        let (out, a) = block.forward(&mut g, &p, cv, mode, seed)?;
        let mut out = g.value(out).clone();
        if c.rank() == 2 {
            out = out.reshaped(c.shape().to_vec())?;
        }
        Ok((out, a))
    }

    /// Human-readable parameter table.
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            rows: self
                .store
                .names
                .iter()
                .zip(&self.store.tensors)
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.len()))
                .collect(),
            total: self.store.scalar_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub rows: Vec<(String, Vec<usize>, usize)>,
    pub total: usize,
}

impl std::fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, shape, n) in &self.rows {
            writeln!(f, "{name:<28} {:<14} {n}", format!("{shape:?}"))?;
        }
        write!(f, "total trainable parameters: {}", self.total)
    }
}

/// Stack `K` latents of length `M` into a `[K, M]` matrix.
pub fn stack_latents(latents: &[Vec<f64>]) -> Result<Tensor> {
    let m = latents
        .first()
        .ok_or_else(|| Error::shape("no latents to stack"))?
        .len();
    if latents.iter().any(|l| l.len() != m) {
        return Err(Error::shape("latents have ragged lengths"));
    }
    Tensor::matrix(latents.len(), m, latents.concat())
}

/// Column means of a `[K, M]` matrix.
pub fn pool_fused(c: &Tensor) -> Result<Vec<f64>> {
    if c.rank() != 2 {
        return Err(Error::shape(format!("pool expects [K, M], got {:?}", c.shape())));
    }
    let (k, m) = (c.shape()[0], c.shape()[1]);
    let mut out = vec![0.0; m];
    for row in c.data().chunks(m) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= k as f64);
    Ok(out)
}
