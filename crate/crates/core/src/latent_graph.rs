//! Time-resolved latent connectivity.
//!
//! Each ROI is embedded from its local temporal neighbourhood by a grouped
//! convolution whose kernel is shared by all ROIs, lifted to `d_lat`, and then
//! mixed across ROIs by per-time-step multi-head self-attention. The adjacency
//! at time `t` is the scaled Gram matrix of the embeddings, and the filtered
//! signal is that adjacency applied to the raw activity at `t`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// `x̃_t = G_t x_t`
    Raw,
    /// `x̃_t = softmax_rows(G_t) x_t`
    #[default]
    RowNormalized,
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "row_normalized" => Ok(Self::RowNormalized),
            other => Err(format!("unknown filter mode `{other}` (expected raw|row_normalized)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_lat: usize,
    /// Feature maps produced per ROI by the temporal convolution.
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub heads: usize,
    pub attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_lat: 128,
            conv_channels: 8,
            kernel_size: 3,
            heads: 4,
            attention: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_lat == 0 || self.conv_channels == 0 || self.heads == 0 {
            return Err(Error::Config("d_lat, conv_channels and heads must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.d_lat % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lat {} is not divisible by {} heads",
                self.d_lat, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_lat / self.heads
    }
}

#[derive(Clone, Debug)]
struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Shared node encoder: one parameter set for all ROIs and time steps.
#[derive(Clone, Debug)]
pub struct NodeEncoder {
    pub config: EncoderConfig,
    conv_w: ParamId,
    conv_b: ParamId,
    lift_w: ParamId,
    lift_b: ParamId,
    heads: Vec<HeadParams>,
    wo: ParamId,
}

impl NodeEncoder {
    /// Registers parameters under `prefix`. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, k, d) = (config.conv_channels, config.kernel_size, config.d_lat);
        let dh = config.head_dim();
        // He-uniform for the two ReLU-facing maps.
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let conv_w = store.trainable(format!("{prefix}.conv.w"), Tensor::uniform(vec![c, 1, k], he(k), rng));
        let conv_b = store.trainable(format!("{prefix}.conv.b"), Tensor::zeros(vec![c]));
        let lift_w = store.trainable(format!("{prefix}.lift.w"), Tensor::uniform(vec![d, c], he(c), rng));
        let lift_b = store.trainable(format!("{prefix}.lift.b"), Tensor::zeros(vec![d]));
        let bound = 1.0 / (d as f64).sqrt();
        let heads = (0..config.heads)
            .map(|h| HeadParams {
                wq: store.trainable(format!("{prefix}.attn.{h}.q"), Tensor::uniform(vec![dh, d], bound, rng)),
                wk: store.trainable(format!("{prefix}.attn.{h}.k"), Tensor::uniform(vec![dh, d], bound, rng)),
                wv: store.trainable(format!("{prefix}.attn.{h}.v"), Tensor::uniform(vec![dh, d], bound, rng)),
            })
            .collect();
        let wo = store.trainable(format!("{prefix}.attn.o"), Tensor::uniform(vec![d, d], bound, rng));
        Ok(Self {
            config,
            conv_w,
            conv_b,
            lift_w,
            lift_b,
            heads,
            wo,
        })
    }

    /// Per-ROI convolutional features lifted to `d_lat`, before attention.
    /// Returns `[T·N × d_lat]`.
    pub fn local_features(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let (t, n) = match *g.shape(x) {
            [t, n] => (t, n),
            ref s => return Err(Error::dim("encode_nodes", s, &[0, 0])),
        };
        let k = self.config.kernel_size;
        if t < k {
            return Err(Error::InputTooShort { needed: k, got: t });
        }
        if n < 2 {
            return Err(Error::Content(format!("need at least 2 ROIs, got {n}")));
        }
        let c = self.config.conv_channels;
        let w = g.tile(b[self.conv_w], n)?;
        let bias = g.tile(b[self.conv_b], n)?;
        let conv = g.conv1d(x, w, n)?;
        let conv = g.add_bias(conv, bias)?;
        let conv = g.relu(conv)?;
        let flat = g.reshape(conv, vec![t * n, c])?;
        let lifted = g.matmul_bt(flat, b[self.lift_w])?;
        g.add_bias(lifted, b[self.lift_b])
    }

    /// Latent embeddings `H: [T × N × d_lat]`.
    pub fn encode(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let (t, n) = (g.shape(x)[0], g.shape(x)[1]);
        let d = self.config.d_lat;
        let local = self.local_features(g, b, x)?;
        if !self.config.attention {
            return g.reshape(local, vec![t, n, d]);
        }
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = g.matmul_bt(local, b[head.wq])?;
            let q = g.reshape(q, vec![t, n, dh])?;
            let k = g.matmul_bt(local, b[head.wk])?;
            let k = g.reshape(k, vec![t, n, dh])?;
            let v = g.matmul_bt(local, b[head.wv])?;
            let v = g.reshape(v, vec![t, n, dh])?;
            let scores = g.bmm_bt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax(scores)?;
            outs.push(g.bmm(p, v)?);
        }
        let heads = g.concat_last(&outs)?;
        let heads = g.reshape(heads, vec![t * n, d])?;
        let mixed = g.matmul_bt(heads, b[self.wo])?;
        let h = g.add(local, mixed)?;
        g.reshape(h, vec![t, n, d])
    }
}

/// `G_t = H_t H_tᵀ / √d_lat` for every `t`; `h: [T × N × d_lat]` → `[T × N × N]`.
pub fn adjacency(g: &mut Graph, h: Var) -> Result<Var> {
    let d = *g.shape(h).last().ok_or_else(|| Error::Contract("empty embedding shape".into()))?;
    g.gram(h, 1.0 / (d as f64).sqrt())
}

/// Applies `[T × N × N]` adjacencies to `[T × N]` activity.
pub fn filter(g: &mut Graph, adj: Var, x: Var, mode: FilterMode) -> Result<Var> {
    let (sa, sx) = (g.shape(adj).to_vec(), g.shape(x).to_vec());
    let (t, n) = match (&sa[..], &sx[..]) {
        ([t, n, n2], [t2, n3]) if t == t2 && n == n2 && n == n3 => (*t, *n),
        _ => return Err(Error::dim("graph_filter", &sa, &sx)),
    };
    let weights = match mode {
        FilterMode::Raw => adj,
        FilterMode::RowNormalized => g.softmax(adj)?,
    };
    let col = g.reshape(x, vec![t, n, 1])?;
    let out = g.bmm(weights, col)?;
    g.reshape(out, vec![t, n])
}

/// Single-step adjacency from `H_t: [N × d_lat]`.
pub fn infer_adjacency(h: &Tensor) -> Result<Tensor> {
    let (n, d) = h.dims2()?;
    if d == 0 {
        return Err(Error::Config("d_lat must be positive".into()));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.reshape(vec![1, n, d])?);
    let adj = adjacency(&mut g, hv)?;
    g.value(adj).reshape(vec![n, n])
}

/// Single-step filter `x̃_t` from `G_t: [N × N]` and `x_t: [N]`.
pub fn graph_filter(adj: &Tensor, x: &Tensor, mode: FilterMode) -> Result<Tensor> {
    let (n, n2) = adj.dims2()?;
    if n != n2 || x.shape() != [n] {
        return Err(Error::dim("graph_filter", adj.shape(), x.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(adj.reshape(vec![1, n, n])?);
    let xv = g.constant(x.reshape(vec![1, n])?);
    let out = filter(&mut g, a, xv, mode)?;
    g.value(out).reshape(vec![n])
}

/// Embeddings, adjacencies, and filtered activity for one scan.
#[derive(Clone, Debug)]
pub struct DynGraphSequence {
    /// `[T × N × d_lat]`
    pub embeddings: Tensor,
    /// `[T × N × N]`
    pub adjacency: Tensor,
    /// `[T × N]`
    pub filtered: Tensor,
}

impl DynGraphSequence {
    pub fn len(&self) -> usize {
        self.adjacency.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `G_t` as an `[N × N]` tensor.
    pub fn adjacency_at(&self, t: usize) -> Tensor {
        let n = self.adjacency.shape()[1];
        Tensor::new(vec![n, n], self.adjacency.data()[t * n * n..(t + 1) * n * n].to_vec()).expect("finite slice")
    }

    pub fn embeddings_at(&self, t: usize) -> Tensor {
        let (n, d) = (self.embeddings.shape()[1], self.embeddings.shape()[2]);
        Tensor::new(vec![n, d], self.embeddings.data()[t * n * d..(t + 1) * n * d].to_vec()).expect("finite slice")
    }

    pub fn filtered_at(&self, t: usize) -> Tensor {
        Tensor::vector(self.filtered.row(t).to_vec()).expect("finite slice")
    }

    /// Writes `adjacency_tNNNN.csv` per time step into `dir`.
    pub fn dump_adjacency_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for t in 0..self.len() {
            let path = dir.join(format!("adjacency_t{t:04}.csv"));
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_matrix_csv(&mut w, &self.adjacency_at(t))?;
            w.flush()?;
        }
        Ok(())
    }
}

/// `roi_0..roi_{N-1}` header followed by one row per matrix row.
pub fn write_matrix_csv<W: Write>(w: &mut W, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    let header: Vec<String> = (0..cols).map(|i| format!("roi_{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..rows {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Runs the encoder, then adjacency inference and filtering at every time step.
pub fn encode_sequence(
    x: &Tensor,
    encoder: &NodeEncoder,
    store: &ParamStore,
    mode: FilterMode,
) -> Result<DynGraphSequence> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let xv = g.constant(x.clone());
    let h = encoder.encode(&mut g, &b, xv)?;
    let adj = adjacency(&mut g, h)?;
    let filtered = filter(&mut g, adj, xv, mode)?;
    Ok(DynGraphSequence {
        embeddings: g.value(h).clone(),
        adjacency: g.value(adj).clone(),
        filtered: g.value(filtered).clone(),
    })
}
