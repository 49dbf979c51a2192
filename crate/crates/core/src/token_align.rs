//! Brain-summary tokens and the frozen surrogate language model.
//!
//! The state trajectory is pooled into `K` tokens by learned-query
//! cross-attention, projected to the surrogate width, and prepended to a fixed
//! prompt. The surrogate is a small bidirectional transformer whose weights are
//! generated once from a fixed seed and never updated; low-rank adapters on
//! its attention projections and a two-way classification head are the only
//! trainable parts downstream of the projection.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore, Role};
use crate::tensor::Tensor;

/// Seed for the frozen surrogate weights.
pub const FROZEN_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Attention,
    /// Every token averages all states equally (test override).
    Uniform,
}

/// Learned-query cross-attention pooling from `[T × d_h]` to `[K × d_k]`.
#[derive(Clone, Debug)]
pub struct BrainCompressor {
    pub tokens: usize,
    pub d_h: usize,
    pub d_k: usize,
    pub queries: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Per-token learned offsets added after projection.
    pub offsets: Option<ParamId>,
}

/// Compressed representation `Z: [K × d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainTokens {
    pub z: Tensor,
}

impl BrainTokens {
    pub fn count(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.z.shape()[1]
    }
}

impl BrainCompressor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        tokens: usize,
        d_h: usize,
        d_k: usize,
        offsets: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if tokens == 0 || d_h == 0 || d_k == 0 {
            return Err(Error::Config("token count and widths must be positive".into()));
        }
        Ok(Self {
            tokens,
            d_h,
            d_k,
            queries: store.trainable(format!("{prefix}.queries"), Tensor::normal(vec![tokens, d_h], 1.0, rng)),
            proj_w: store.trainable(
                format!("{prefix}.proj.w"),
                Tensor::uniform(vec![d_k, d_h], 1.0 / (d_h as f64).sqrt(), rng),
            ),
            proj_b: store.trainable(format!("{prefix}.proj.b"), Tensor::zeros(vec![d_k])),
            offsets: offsets.then(|| store.trainable(format!("{prefix}.offsets"), Tensor::zeros(vec![tokens, d_k]))),
        })
    }

    /// Pools `states: [T × d_h]`. Positions with `keep[t] == false` get zero
    /// attention weight.
    pub fn forward(&self, g: &mut Graph, b: &Binding, states: Var, keep: Option<&[bool]>, pooling: Pooling) -> Result<Var> {
        let s = g.shape(states).to_vec();
        if s.len() != 2 || s[1] != self.d_h || s[0] == 0 {
            return Err(Error::dim("compress_tokens", &s, &[self.tokens, self.d_h]));
        }
        let t = s[0];
        let weights = match pooling {
            Pooling::Attention => {
                let scores = g.matmul_bt(b[self.queries], states)?;
                let scores = g.scale(scores, 1.0 / (self.d_h as f64).sqrt())?;
                match keep {
                    Some(k) => g.masked_softmax(scores, k)?,
                    None => g.softmax(scores)?,
                }
            }
            Pooling::Uniform => g.constant(Tensor::full(vec![self.tokens, t], 1.0 / t as f64)),
        };
        let pooled = g.matmul(weights, states)?;
        let z = g.matmul_bt(pooled, b[self.proj_w])?;
        let z = g.add_bias(z, b[self.proj_b])?;
        match self.offsets {
            Some(o) => g.add(z, b[o]),
            None => Ok(z),
        }
    }

    /// Projects a single pooled vector `[d_h]` as one token.
    pub fn project_single(&self, g: &mut Graph, b: &Binding, pooled: Var) -> Result<Var> {
        let row = g.reshape(pooled, vec![1, self.d_h])?;
        let z = g.matmul_bt(row, b[self.proj_w])?;
        g.add_bias(z, b[self.proj_b])
    }
}

/// Tensor-level compression with the parameters held in `store`.
pub fn compress_tokens(
    compressor: &BrainCompressor,
    store: &ParamStore,
    states: &Tensor,
    keep: Option<&[bool]>,
    pooling: Pooling,
) -> Result<BrainTokens> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let s = g.constant(states.clone());
    let z = compressor.forward(&mut g, &b, s, keep, pooling)?;
    Ok(BrainTokens { z: g.value(z).clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Attention projections that carry adapters, from `q`, `k`, `v`, `o`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec!["q".into(), "v".into()],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be in 1..={} for a {d_out}×{d_in} weight",
                self.rank,
                d_in.min(d_out)
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if let Some(t) = self.targets.iter().find(|t| !["q", "k", "v", "o"].contains(&t.as_str())) {
            return Err(Error::Config(format!("unknown LoRA target `{t}`")));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter factors registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[r × d_in]`, small random init.
    pub a: ParamId,
    /// `[d_out × r]`, zero init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, layer: &str, d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(d_in, d_out)?;
        Ok(Self {
            a: store.trainable(
                format!("lora.{layer}.A"),
                Tensor::uniform(vec![cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            ),
            b: store.trainable(format!("lora.{layer}.B"), Tensor::zeros(vec![d_out, cfg.rank])),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        })
    }

    /// Effective weight update `(alpha / r) · B · A`.
    pub fn delta_weight(&self, store: &ParamStore) -> Tensor {
        store
            .value(self.b)
            .matmul(store.value(self.a))
            .expect("adapter factor shapes agree")
            .scale(self.alpha / self.rank as f64)
    }
}

/// Number of singular values above `rel_tol · σ₁`.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> usize {
    let (rows, cols) = m.dims2().expect("matrix");
    let mat = nalgebra::DMatrix::from_row_slice(rows, cols, m.data());
    let sv = mat.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Inverted-dropout mask with keep probability `1 - p`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite mask")
}

/// `y = x Wᵀ + scale · (drop(x) Aᵀ) Bᵀ` on the graph.
pub fn lora_apply(g: &mut Graph, x: Var, w: Var, factors: Option<(Var, Var, f64)>, mask: Option<Tensor>) -> Result<Var> {
    let base = g.matmul_bt(x, w)?;
    let Some((a, b, scale)) = factors else {
        return Ok(base);
    };
    let input = match mask {
        Some(m) => {
            let m = g.constant(m);
            g.mul(x, m)?
        }
        None => x,
    };
    let low = g.matmul_bt(input, a)?;
    let up = g.matmul_bt(low, b)?;
    let up = g.scale(up, scale)?;
    g.add(base, up)
}

/// Standalone adapter values for the tensor-level [`lora_linear`].
#[derive(Clone, Debug)]
pub struct LoraWeights {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraWeights {
    /// Fresh adapter: random `A`, zero `B`.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(d_in, d_out)?;
        Ok(Self {
            a: Tensor::uniform(vec![cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(vec![d_out, cfg.rank]),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        })
    }
}

/// `y = W x + (alpha / r) · B A drop(x)` for `x: [L × d_in]` or `[d_in]`.
/// Dropout is the identity unless `training` is set.
pub fn lora_linear(x: &Tensor, w: &Tensor, adapter: &LoraWeights, training: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
    let (d_out, d_in) = w.dims2()?;
    if adapter.rank == 0 || adapter.rank > d_in.min(d_out) {
        return Err(Error::Config(format!("LoRA rank {} exceeds min({d_in}, {d_out})", adapter.rank)));
    }
    if adapter.a.shape() != [adapter.rank, d_in] || adapter.b.shape() != [d_out, adapter.rank] {
        return Err(Error::dim("lora_linear", adapter.a.shape(), adapter.b.shape()));
    }
    let vector = x.rank() == 1;
    let x2 = if vector { x.reshape(vec![1, x.len()])? } else { x.clone() };
    let mut g = Graph::new();
    let xv = g.constant(x2.clone());
    let wv = g.constant(w.clone());
    let av = g.constant(adapter.a.clone());
    let bv = g.constant(adapter.b.clone());
    let mask = (training && adapter.dropout > 0.0).then(|| dropout_mask(x2.shape(), adapter.dropout, rng));
    let y = lora_apply(&mut g, xv, wv, Some((av, bv, adapter.alpha / adapter.rank as f64)), mask)?;
    let y = g.value(y).clone();
    if vector {
        y.reshape(vec![d_out])
    } else {
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub d_k: usize,
    pub blocks: usize,
    pub heads: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub context_cap: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            d_k: 64,
            blocks: 2,
            heads: 4,
            vocab: 64,
            ffn_mult: 4,
            context_cap: 64,
        }
    }
}

#[derive(Clone, Debug)]
struct AttnProj {
    w: ParamId,
    lora: Option<LoraAdapter>,
}

#[derive(Clone, Debug)]
struct SurrogateBlock {
    q: AttnProj,
    k: AttnProj,
    v: AttnProj,
    o: AttnProj,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Frozen transformer with trainable adapters and classification head.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub config: SurrogateConfig,
    pub lora: LoraConfig,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<SurrogateBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Per-call forward options.
pub struct ForwardCtx<'a> {
    pub training: bool,
    /// Source of dropout masks; only consulted when `training`.
    pub rng: Option<&'a mut dyn RngCore>,
    /// Apply adapters. Off means the adapter-free frozen model.
    pub adapters: bool,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            adapters: true,
        }
    }
}

impl SurrogateModel {
    /// Registers the frozen base (generated from [`FROZEN_SEED`]) plus
    /// adapters and head. `rng` initializes only the trainable parts.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: SurrogateConfig, lora: LoraConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_k;
        if d == 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("d_k {d} must be a positive multiple of {} heads", config.heads)));
        }
        if config.vocab == 0 || config.context_cap == 0 || config.blocks == 0 {
            return Err(Error::Config("vocab, context cap, and block count must be positive".into()));
        }
        lora.validate(d, d)?;
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(FROZEN_SEED);
        let fr = &mut frozen_rng;
        let lin = |fr: &mut ChaCha8Rng, out: usize, inp: usize| Tensor::uniform(vec![out, inp], 1.0 / (inp as f64).sqrt(), fr);

        let embed = store.frozen("surrogate.embed", Tensor::uniform(vec![config.vocab, d], 1.0, fr));
        let pos = store.frozen("surrogate.pos", Tensor::uniform(vec![config.context_cap, d], 0.5, fr));
        let f = config.ffn_mult * d;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let mut proj = |name: &str, fr: &mut ChaCha8Rng, rng: &mut R| -> Result<AttnProj> {
                let w = store.frozen(format!("surrogate.block{l}.w{name}"), lin(fr, d, d));
                let lora = if lora.targets.iter().any(|t| t == name) {
                    Some(LoraAdapter::new(store, &format!("block{l}.{name}"), d, d, &lora, rng)?)
                } else {
                    None
                };
                Ok(AttnProj { w, lora })
            };
            let q = proj("q", fr, rng)?;
            let k = proj("k", fr, rng)?;
            let v = proj("v", fr, rng)?;
            let o = proj("o", fr, rng)?;
            let w1 = store.frozen(format!("surrogate.block{l}.w1"), lin(fr, f, d));
            let b1 = store.frozen(format!("surrogate.block{l}.b1"), Tensor::uniform(vec![f], 0.1, fr));
            let w2 = store.frozen(format!("surrogate.block{l}.w2"), lin(fr, d, f));
            let b2 = store.frozen(format!("surrogate.block{l}.b2"), Tensor::uniform(vec![d], 0.1, fr));
            blocks.push(SurrogateBlock { q, k, v, o, w1, b1, w2, b2 });
        }
        let head_w = store.trainable("head.w", Tensor::zeros(vec![2, d]));
        let head_b = store.trainable("head.b", Tensor::zeros(vec![2]));
        Ok(Self {
            config,
            lora,
            embed,
            pos,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o])
            .filter_map(|p| p.lora.as_ref())
    }

    /// Trainable alignment parameters (adapters + head) and the frozen base size.
    pub fn parameter_counts(&self, store: &ParamStore) -> (usize, usize) {
        let adapters: usize = self
            .adapters()
            .map(|a| store.value(a.a).len() + store.value(a.b).len())
            .sum();
        let head = store.value(self.head_w).len() + store.value(self.head_b).len();
        (adapters + head, store.count(Role::Frozen))
    }

    fn project(&self, g: &mut Graph, b: &Binding, x: Var, p: &AttnProj, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let factors = match (&p.lora, ctx.adapters) {
            (Some(ad), true) => Some((ad, (b[ad.a], b[ad.b], ad.alpha / ad.rank as f64))),
            _ => None,
        };
        let mask = match (&factors, ctx.training, ctx.rng.as_deref_mut()) {
            (Some((ad, _)), true, Some(rng)) if ad.dropout > 0.0 => Some(dropout_mask(g.shape(x), ad.dropout, rng)),
            _ => None,
        };
        lora_apply(g, x, b[p.w], factors.map(|(_, f)| f), mask)
    }

    /// Logits `[2]` for brain tokens `[K × d_k]` (or none) followed by `prompt`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        store: &ParamStore,
        brain: Option<Var>,
        prompt: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let d = self.config.d_k;
        if let Some(&bad) = prompt.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::Config(format!("prompt id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        let k = match brain {
            Some(z) => {
                let s = g.shape(z);
                if s.len() != 2 || s[1] != d {
                    return Err(Error::dim("surrogate_forward", s, &[0, d]));
                }
                s[0]
            }
            None => 0,
        };
        let len = k + prompt.len();
        if len > self.config.context_cap {
            return Err(Error::ContextOverflow {
                len,
                cap: self.config.context_cap,
            });
        }
        if len == 0 {
            return Err(Error::Contract("surrogate needs at least one position".into()));
        }

        let mut parts = Vec::with_capacity(2);
        if let Some(z) = brain {
            parts.push(z);
        }
        if !prompt.is_empty() {
            let embed = store.value(self.embed);
            let pos = store.value(self.pos);
            let mut data = Vec::with_capacity(prompt.len() * d);
            for (i, &id) in prompt.iter().enumerate() {
                data.extend(embed.row(id).iter().zip(pos.row(i)).map(|(e, p)| e + p));
            }
            parts.push(g.constant(Tensor::new(vec![prompt.len(), d], data)?));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

        let heads = self.config.heads;
        let dh = d / heads;
        for blk in &self.blocks {
            let h = g.layer_norm(x)?;
            let q = self.project(g, b, h, &blk.q, ctx)?;
            let kk = self.project(g, b, h, &blk.k, ctx)?;
            let v = self.project(g, b, h, &blk.v, ctx)?;
            let mut outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let qi = g.slice_last(q, i * dh, dh)?;
                let ki = g.slice_last(kk, i * dh, dh)?;
                let vi = g.slice_last(v, i * dh, dh)?;
                let scores = g.matmul_bt(qi, ki)?;
                let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let p = g.softmax(scores)?;
                outs.push(g.matmul(p, vi)?);
            }
            let cat = g.concat_last(&outs)?;
            let attn = self.project(g, b, cat, &blk.o, ctx)?;
            x = g.add(x, attn)?;

            let h = g.layer_norm(x)?;
            let f = g.matmul_bt(h, b[blk.w1])?;
            let f = g.add_bias(f, b[blk.b1])?;
            let f = g.relu(f)?;
            let f = g.matmul_bt(f, b[blk.w2])?;
            let f = g.add_bias(f, b[blk.b2])?;
            x = g.add(x, f)?;
        }
        let x = g.layer_norm(x)?;
        let last = g.slice_rows(x, len - 1, 1)?;
        let logits = g.matmul_bt(last, b[self.head_w])?;
        let logits = g.add_bias(logits, b[self.head_b])?;
        g.reshape(logits, vec![2])
    }
}

/// Predicted label and its softmax probability. Ties go to TC.
pub fn classify(logits: &Tensor) -> Result<(Label, f64)> {
    if logits.shape() != [2] {
        return Err(Error::dim("classify", logits.shape(), &[2]));
    }
    let p = logits.softmax_rows();
    let (asd, tc) = (p.data()[0], p.data()[1]);
    Ok(if asd > tc { (Label::Asd, asd) } else { (Label::Tc, tc) })
}
