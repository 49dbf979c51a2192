//! End-to-end classifier: latent graph → temporal encoder → brain tokens →
//! adapted frozen surrogate.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::static_correlation_features;
use crate::error::{Error, Result};
use crate::latent_graph::{adjacency, filter, EncoderConfig, FilterMode, NodeEncoder};
use crate::params::{Binding, Param, ParamStore};
use crate::scan::ScanBackend;
use crate::ssm::SsmConfig;
use crate::temporal::{Backbone, TemporalEncoder};
use crate::tensor::Tensor;
use crate::token_align::{BrainCompressor, ForwardCtx, LoraConfig, Pooling, SurrogateConfig, SurrogateModel};

/// How the per-step adjacency is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GraphMode {
    #[default]
    Dynamic,
    /// Time-mean of the learned adjacencies, applied at every step.
    StaticLatent,
    /// Pearson correlation of the input, applied at every step.
    StaticPearson,
}

/// What the surrogate sees in front of the prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Align {
    #[default]
    Tokens,
    MeanPool,
    /// Gaussian tokens unrelated to the subject.
    Random,
    /// Prompt only.
    None,
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Variant {
    pub graph: GraphMode,
    pub align: Align,
    pub backbone: Backbone,
    pub train_adapters: bool,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            train_adapters: true,
            ..Self::default()
        }
    }

    /// Every named variant, in report order.
    pub fn catalogue() -> Vec<Variant> {
        [
            "full",
            "static_graph",
            "static_pearson",
            "frozen_llm",
            "backbone:gru",
            "backbone:tcn",
            "backbone:transformer",
            "backbone:s4",
            "align:meanpool",
            "align:random",
            "align:none",
        ]
        .iter()
        .map(|s| s.parse().expect("catalogue names parse"))
        .collect()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let full = Variant::full();
        let v = match s {
            "full" | "backbone:mamba" | "align:tokens" => full,
            "static_graph" => Variant { graph: GraphMode::StaticLatent, ..full },
            "static_pearson" => Variant { graph: GraphMode::StaticPearson, ..full },
            "frozen_llm" => Variant { train_adapters: false, ..full },
            "align:meanpool" => Variant { align: Align::MeanPool, ..full },
            "align:random" => Variant { align: Align::Random, ..full },
            "align:none" => Variant { align: Align::None, ..full },
            _ => match s.strip_prefix("backbone:") {
                Some(b) => Variant {
                    backbone: b.parse().map_err(Error::Config)?,
                    ..full
                },
                None => return Err(Error::Config(format!("unknown variant `{s}`"))),
            },
        };
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let full = Variant::full();
        if *self == full {
            return f.write_str("full");
        }
        let mut parts = Vec::new();
        match self.graph {
            GraphMode::Dynamic => {}
            GraphMode::StaticLatent => parts.push("static_graph".to_string()),
            GraphMode::StaticPearson => parts.push("static_pearson".to_string()),
        }
        if !self.train_adapters {
            parts.push("frozen_llm".into());
        }
        if self.backbone != Backbone::Mamba {
            parts.push(format!("backbone:{}", self.backbone.name()));
        }
        match self.align {
            Align::Tokens => {}
            Align::MeanPool => parts.push("align:meanpool".into()),
            Align::Random => parts.push("align:random".into()),
            Align::None => parts.push("align:none".into()),
        }
        f.write_str(&parts.join("+"))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_lat: usize,
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub encoder_heads: usize,
    pub d_h: usize,
    pub ssm_blocks: usize,
    pub tokens: usize,
    pub d_k: usize,
    pub surrogate_blocks: usize,
    pub surrogate_heads: usize,
    pub vocab: usize,
    pub context_cap: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lora_targets: Vec<String>,
    pub token_offsets: bool,
    pub prompt: Vec<usize>,
    #[serde(with = "filter_serde")]
    pub filter: FilterMode,
}

mod filter_serde {
    use super::FilterMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &FilterMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match m {
            FilterMode::Raw => "raw",
            FilterMode::RowNormalized => "row_normalized",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FilterMode, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for ModelConfig {
    /// Published-scale widths.
    fn default() -> Self {
        Self {
            d_lat: 128,
            conv_channels: 8,
            kernel_size: 3,
            encoder_heads: 4,
            d_h: 16,
            ssm_blocks: 2,
            tokens: 8,
            d_k: 64,
            surrogate_blocks: 2,
            surrogate_heads: 4,
            vocab: 64,
            context_cap: 64,
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            lora_targets: vec!["q".into(), "v".into()],
            token_offsets: true,
            prompt: (1..=8).collect(),
            filter: FilterMode::RowNormalized,
        }
    }
}

impl ModelConfig {
    /// Small widths for CPU runs on the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            d_lat: 16,
            conv_channels: 4,
            encoder_heads: 4,
            d_h: 16,
            tokens: 8,
            d_k: 32,
            rank: 4,
            alpha: 8.0,
            ..Self::default()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_lat: self.d_lat,
            conv_channels: self.conv_channels,
            kernel_size: self.kernel_size,
            heads: self.encoder_heads,
            attention: true,
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_h: self.d_h,
            block_count: self.ssm_blocks,
        }
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            d_k: self.d_k,
            blocks: self.surrogate_blocks,
            heads: self.surrogate_heads,
            vocab: self.vocab,
            ffn_mult: 4,
            context_cap: self.context_cap,
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            targets: self.lora_targets.clone(),
        }
    }
}

/// Per-call options for [`Pipeline::forward`].
pub struct RunCtx<'a> {
    pub backend: ScanBackend,
    pub training: bool,
    pub dropout_rng: Option<&'a mut dyn RngCore>,
    /// Seed for `align:random` tokens.
    pub random_seed: u64,
}

impl RunCtx<'_> {
    pub fn eval(backend: ScanBackend, random_seed: u64) -> Self {
        RunCtx {
            backend,
            training: false,
            dropout_rng: None,
            random_seed,
        }
    }
}

/// All parameters plus the component layout for one variant.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub variant: Variant,
    pub rois: usize,
    pub store: ParamStore,
    pub encoder: NodeEncoder,
    pub temporal: TemporalEncoder,
    pub compressor: BrainCompressor,
    pub surrogate: SurrogateModel,
}

impl Pipeline {
    pub fn new(config: ModelConfig, variant: Variant, rois: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = NodeEncoder::new(&mut store, "graph", config.encoder(), &mut rng)?;
        let temporal = TemporalEncoder::new(&mut store, "temporal", variant.backbone, rois, config.ssm(), &mut rng)?;
        let compressor = BrainCompressor::new(
            &mut store,
            "align",
            config.tokens,
            config.d_h,
            config.d_k,
            config.token_offsets,
            &mut rng,
        )?;
        let surrogate = SurrogateModel::new(&mut store, config.surrogate(), config.lora(), &mut rng)?;
        if config.tokens + config.prompt.len() > config.context_cap {
            return Err(Error::ContextOverflow {
                len: config.tokens + config.prompt.len(),
                cap: config.context_cap,
            });
        }
        Ok(Self {
            config,
            variant,
            rois,
            store,
            encoder,
            temporal,
            compressor,
            surrogate,
        })
    }

    /// Whether `p` receives gradients under this variant.
    pub fn differentiates(&self, p: &Param) -> bool {
        self.variant.train_adapters || !p.name.starts_with("lora.")
    }

    pub fn bind(&self, g: &mut Graph) -> Binding {
        self.store.bind(g, |p| self.differentiates(p))
    }

    /// Logits `[2]` for one `[T × N]` series.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: &Tensor, ctx: &mut RunCtx<'_>) -> Result<Var> {
        let (t, n) = x.dims2()?;
        if n != self.rois {
            return Err(Error::dim("pipeline", x.shape(), &[t, self.rois]));
        }
        let xv = g.constant(x.clone());
        let mode = self.config.filter;
        let filtered = match self.variant.graph {
            GraphMode::Dynamic => {
                let h = self.encoder.encode(g, b, xv)?;
                let adj = adjacency(g, h)?;
                filter(g, adj, xv, mode)?
            }
            GraphMode::StaticLatent => {
                let h = self.encoder.encode(g, b, xv)?;
                let adj = adjacency(g, h)?;
                let mean = g.mean_axis0(adj)?;
                let mean = g.reshape(mean, vec![1, n, n])?;
                let tiled = g.tile(mean, t)?;
                filter(g, tiled, xv, mode)?
            }
            GraphMode::StaticPearson => {
                let corr = pearson_matrix(x);
                let corr = g.constant(corr.reshape(vec![1, n, n])?);
                let tiled = g.tile(corr, t)?;
                filter(g, tiled, xv, mode)?
            }
        };
        let states = self.temporal.forward(g, b, filtered, ctx.backend)?;
        let brain = match self.variant.align {
            Align::Tokens => Some(self.compressor.forward(g, b, states, None, Pooling::Attention)?),
            Align::MeanPool => {
                let pooled = g.mean_axis0(states)?;
                Some(self.compressor.project_single(g, b, pooled)?)
            }
            Align::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.random_seed);
                Some(g.constant(Tensor::normal(vec![self.config.tokens, self.config.d_k], 1.0, &mut rng)))
            }
            Align::None => None,
        };
        let mut sctx = ForwardCtx {
            training: ctx.training,
            rng: ctx.dropout_rng.as_deref_mut().map(|r| r as &mut dyn RngCore),
            adapters: true,
        };
        self.surrogate.forward(g, b, &self.store, brain, &self.config.prompt, &mut sctx)
    }

    /// Inference logits.
    pub fn logits(&self, x: &Tensor, backend: ScanBackend, random_seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let out = self.forward(&mut g, &b, x, &mut RunCtx::eval(backend, random_seed))?;
        Ok(g.value(out).clone())
    }

    /// Alignment parameters (compressor, adapters, head) relative to the
    /// frozen surrogate size.
    pub fn trainable_ratio(&self) -> f64 {
        let (adapters_and_head, frozen) = self.surrogate.parameter_counts(&self.store);
        let c = &self.compressor;
        let mut align = self.store.value(c.queries).len() + self.store.value(c.proj_w).len() + self.store.value(c.proj_b).len();
        if let Some(o) = c.offsets {
            align += self.store.value(o).len();
        }
        (adapters_and_head + align) as f64 / frozen as f64
    }
}

/// Column Pearson correlation matrix with unit diagonal.
pub fn pearson_matrix(x: &Tensor) -> Tensor {
    let n = x.shape()[1];
    let upper = static_correlation_features(x);
    let mut data = vec![0.0; n * n];
    let mut k = 0;
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            data[i * n + j] = upper[k];
            data[j * n + i] = upper[k];
            k += 1;
        }
    }
    Tensor::new(vec![n, n], data).expect("finite correlations")
}
