//! Swappable temporal encoders behind one interface: `[T × N]` in, `[T × d_h]` out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scan::ScanBackend;
use crate::ssm::{SelectiveSsm, SsmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Mamba,
    S4,
    Gru,
    Tcn,
    Transformer,
}

impl Backbone {
    pub const ALL: [Backbone; 5] = [Backbone::Gru, Backbone::Tcn, Backbone::Transformer, Backbone::S4, Backbone::Mamba];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Mamba => "mamba",
            Backbone::S4 => "s4",
            Backbone::Gru => "gru",
            Backbone::Tcn => "tcn",
            Backbone::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown backbone `{s}` (expected gru|tcn|transformer|s4|mamba)"))
    }
}

/// Fixed-parameter diagonal SSM: the transition does not depend on the input.
#[derive(Clone, Debug)]
struct S4Lite {
    a_logit: ParamId,
    dt_logit: ParamId,
    w_b: ParamId,
    w_out: ParamId,
}

#[derive(Clone, Debug)]
struct Gru {
    d_h: usize,
    w_x: ParamId,
    w_h: ParamId,
    b_x: ParamId,
    b_h: ParamId,
}

#[derive(Clone, Debug)]
struct Tcn {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
}

#[derive(Clone, Debug)]
struct TinyTransformer {
    d_h: usize,
    heads: usize,
    w_in: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff1: ParamId,
    ff2: ParamId,
}

#[derive(Clone, Debug)]
enum Inner {
    Mamba(SelectiveSsm),
    S4(S4Lite),
    Gru(Gru),
    Tcn(Tcn),
    Transformer(TinyTransformer),
}

#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub kind: Backbone,
    pub d_h: usize,
    inner: Inner,
}

fn linear<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(vec![out, inp], 1.0 / (inp as f64).sqrt(), rng)
}

/// Sinusoidal positions `[T × d]`.
fn positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for p in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("finite")
}

impl TemporalEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: Backbone,
        d_in: usize,
        ssm: SsmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d_h = ssm.d_h;
        if d_h == 0 || d_in == 0 {
            return Err(Error::Config("temporal widths must be positive".into()));
        }
        let inner = match kind {
            Backbone::Mamba => Inner::Mamba(SelectiveSsm::new(store, prefix, d_in, ssm, rng)?),
            Backbone::S4 => {
                let a = (0..d_h).map(|k| (0.05 + 0.9 * k as f64 / (d_h.max(2) - 1) as f64).exp_m1().ln()).collect();
                Inner::S4(S4Lite {
                    a_logit: store.trainable(format!("{prefix}.a"), Tensor::new(vec![d_h], a)?),
                    dt_logit: store.trainable(format!("{prefix}.dt"), Tensor::zeros(vec![d_h])),
                    w_b: store.trainable(format!("{prefix}.w_b"), linear(d_h, d_in, rng)),
                    w_out: store.trainable(format!("{prefix}.w_out"), Tensor::eye(d_h)),
                })
            }
            Backbone::Gru => Inner::Gru(Gru {
                d_h,
                w_x: store.trainable(format!("{prefix}.w_x"), linear(3 * d_h, d_in, rng)),
                w_h: store.trainable(format!("{prefix}.w_h"), linear(3 * d_h, d_h, rng)),
                b_x: store.trainable(format!("{prefix}.b_x"), Tensor::zeros(vec![3 * d_h])),
                b_h: store.trainable(format!("{prefix}.b_h"), Tensor::zeros(vec![3 * d_h])),
            }),
            Backbone::Tcn => Inner::Tcn(Tcn {
                conv1: store.trainable(format!("{prefix}.conv1"), Tensor::uniform(vec![d_h, d_in, 3], 1.0 / ((3 * d_in) as f64).sqrt(), rng)),
                bias1: store.trainable(format!("{prefix}.bias1"), Tensor::zeros(vec![d_h])),
                conv2: store.trainable(format!("{prefix}.conv2"), Tensor::uniform(vec![d_h, d_h, 3], 1.0 / ((3 * d_h) as f64).sqrt(), rng)),
                bias2: store.trainable(format!("{prefix}.bias2"), Tensor::zeros(vec![d_h])),
            }),
            Backbone::Transformer => {
                let heads = if d_h % 4 == 0 { 4 } else { 1 };
                Inner::Transformer(TinyTransformer {
                    d_h,
                    heads,
                    w_in: store.trainable(format!("{prefix}.w_in"), linear(d_h, d_in, rng)),
                    wq: store.trainable(format!("{prefix}.wq"), linear(d_h, d_h, rng)),
                    wk: store.trainable(format!("{prefix}.wk"), linear(d_h, d_h, rng)),
                    wv: store.trainable(format!("{prefix}.wv"), linear(d_h, d_h, rng)),
                    wo: store.trainable(format!("{prefix}.wo"), linear(d_h, d_h, rng)),
                    ff1: store.trainable(format!("{prefix}.ff1"), linear(2 * d_h, d_h, rng)),
                    ff2: store.trainable(format!("{prefix}.ff2"), linear(d_h, 2 * d_h, rng)),
                })
            }
        };
        Ok(Self { kind, d_h, inner })
    }

    pub fn as_selective(&self) -> Option<&SelectiveSsm> {
        match &self.inner {
            Inner::Mamba(s) => Some(s),
            _ => None,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var, backend: ScanBackend) -> Result<Var> {
        match &self.inner {
            Inner::Mamba(ssm) => ssm.forward(g, b, x, backend),
            Inner::S4(p) => {
                let t = g.shape(x)[0];
                let rate = g.softplus(b[p.a_logit])?;
                let dt = g.softplus(b[p.dt_logit])?;
                let log_decay = g.mul(rate, dt)?;
                let log_decay = g.neg(log_decay)?;
                let decay = g.exp(log_decay)?;
                let decay = g.reshape(decay, vec![1, self.d_h])?;
                let decay = g.tile(decay, t)?;
                let proj = g.matmul_bt(x, b[p.w_b])?;
                let drive = g.mul_bias(proj, dt)?;
                let s = g.diag_scan(decay, drive, backend)?;
                g.matmul_bt(s, b[p.w_out])
            }
            Inner::Gru(p) => gru_forward(g, b, p, x),
            Inner::Tcn(p) => {
                let h = g.conv1d(x, b[p.conv1], 1)?;
                let h = g.add_bias(h, b[p.bias1])?;
                let h = g.relu(h)?;
                let h2 = g.conv1d(h, b[p.conv2], 1)?;
                let h2 = g.add_bias(h2, b[p.bias2])?;
                let h2 = g.relu(h2)?;
                g.add(h, h2)
            }
            Inner::Transformer(p) => transformer_forward(g, b, p, x),
        }
    }
}

fn gru_forward(g: &mut Graph, b: &Binding, p: &Gru, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let d = p.d_h;
    let xs = g.matmul_bt(x, b[p.w_x])?;
    let xs = g.add_bias(xs, b[p.b_x])?;
    let mut h = g.constant(Tensor::zeros(vec![1, d]));
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let xt = g.slice_rows(xs, step, 1)?;
        let hs = g.matmul_bt(h, b[p.w_h])?;
        let hs = g.add_bias(hs, b[p.b_h])?;
        let (xr, xz, xn) = (g.slice_last(xt, 0, d)?, g.slice_last(xt, d, d)?, g.slice_last(xt, 2 * d, d)?);
        let (hr, hz, hn) = (g.slice_last(hs, 0, d)?, g.slice_last(hs, d, d)?, g.slice_last(hs, 2 * d, d)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, hn)?;
        let n = g.add(xn, gated)?;
        let n = g.tanh(n)?;
        // h' = n + z ⊙ (h - n)
        let diff = g.sub(h, n)?;
        let keep = g.mul(z, diff)?;
        h = g.add(n, keep)?;
        outs.push(h);
    }
    g.concat_rows(&outs)
}

fn transformer_forward(g: &mut Graph, b: &Binding, p: &TinyTransformer, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let d = p.d_h;
    let dh = d / p.heads;
    let h = g.matmul_bt(x, b[p.w_in])?;
    let pos = g.constant(positions(t, d));
    let h = g.add(h, pos)?;
    let normed = g.layer_norm(h)?;
    let q = g.matmul_bt(normed, b[p.wq])?;
    let k = g.matmul_bt(normed, b[p.wk])?;
    let v = g.matmul_bt(normed, b[p.wv])?;
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let (qi, ki, vi) = (g.slice_last(q, i * dh, dh)?, g.slice_last(k, i * dh, dh)?, g.slice_last(v, i * dh, dh)?);
        let scores = g.matmul_bt(qi, ki)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vi)?);
    }
    let cat = g.concat_last(&heads)?;
    let mixed = g.matmul_bt(cat, b[p.wo])?;
    let h = g.add(h, mixed)?;
    let normed = g.layer_norm(h)?;
    let f = g.matmul_bt(normed, b[p.ff1])?;
    let f = g.relu(f)?;
    let f = g.matmul_bt(f, b[p.ff2])?;
    g.add(h, f)
}
