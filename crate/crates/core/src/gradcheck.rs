//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::latent_graph::{adjacency, filter, EncoderConfig, FilterMode, NodeEncoder};
use crate::model::{ModelConfig, Pipeline, RunCtx, Variant};
use crate::params::{Binding, ParamStore, Role};
use crate::scan::ScanBackend;
use crate::ssm::{SelectiveSsm, SsmConfig};
use crate::tensor::Tensor;
use crate::token_align::{lora_apply, BrainCompressor, ForwardCtx, LoraConfig, Pooling, SurrogateConfig, SurrogateModel};
use crate::train::cross_entropy_var;

/// Step used by the gradient suite.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh graph from parameter leaves (one per
/// entry of `params`). The relative error at each coordinate is
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`.
///
/// `max_coords` caps how many coordinates per parameter are probed (evenly
/// strided); `None` probes all of them.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::Contract(format!("loss must be scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for ci in (0..n).step_by(stride) {
            let orig = params[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// Result of one entry in [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Coordinates probed per parameter in the model-level checks.
const MODEL_COORDS: usize = 12;

/// Random values bounded away from zero, for ops with a kink at 0.
fn off_kink(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::normal(shape, 1.0, rng);
    for v in t.data_mut() {
        *v += 0.2f64.copysign(*v);
    }
    t
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output coordinate reaches the loss with a distinct sensitivity.
fn probe_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = g.constant(Tensor::normal(g.shape(out).to_vec(), 1.0, &mut rng));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Finite-difference check over the trainable parameters of `store`. Frozen
/// parameters enter as constants.
pub fn check_store<F>(store: &ParamStore, f: F, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<Var>,
{
    let trainable: Vec<usize> = store
        .iter()
        .filter(|(_, p)| p.role == Role::Trainable)
        .map(|(id, _)| id.index())
        .collect();
    let params: Vec<Tensor> = trainable.iter().map(|&i| store.iter().nth(i).expect("id").1.value.clone()).collect();
    finite_diff_check(
        |g, vars| {
            let mut next = vars.iter();
            let all = store
                .iter()
                .map(|(_, p)| {
                    if p.role == Role::Trainable {
                        *next.next().expect("one var per trainable parameter")
                    } else {
                        g.constant(p.value.clone())
                    }
                })
                .collect();
            f(g, &Binding::from_vars(all))
        },
        &params,
        DEFAULT_EPS,
        max_coords,
    )
}

/// Gradient checks for every differentiable op plus the model components and
/// the end-to-end loss, with inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &'static str, params: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let report = finite_diff_check(|g, v| {
            let y = f(g, v)?;
            probe_loss(g, y, seed)
        }, &params, DEFAULT_EPS, None)?;
        out.push(OpCheck { name, report });
        Ok(())
    };
    let n = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::normal(shape.to_vec(), 1.0, r);

    run("matmul", vec![n(&[3, 4], r), n(&[4, 2], r)], &|g, v| g.matmul(v[0], v[1]))?;
    run("matmul_bt", vec![n(&[3, 4], r), n(&[5, 4], r)], &|g, v| g.matmul_bt(v[0], v[1]))?;
    run("bmm", vec![n(&[2, 3, 4], r), n(&[2, 4, 2], r)], &|g, v| g.bmm(v[0], v[1]))?;
    run("bmm_bt", vec![n(&[2, 3, 4], r), n(&[2, 5, 4], r)], &|g, v| g.bmm_bt(v[0], v[1]))?;
    run("add", vec![n(&[3, 4], r), n(&[3, 4], r)], &|g, v| g.add(v[0], v[1]))?;
    run("sub", vec![n(&[3, 4], r), n(&[3, 4], r)], &|g, v| g.sub(v[0], v[1]))?;
    run("mul", vec![n(&[3, 4], r), n(&[3, 4], r)], &|g, v| g.mul(v[0], v[1]))?;
    run("add_bias", vec![n(&[2, 3, 4], r), n(&[4], r)], &|g, v| g.add_bias(v[0], v[1]))?;
    run("mul_bias", vec![n(&[3, 4], r), n(&[4], r)], &|g, v| g.mul_bias(v[0], v[1]))?;
    run("scale", vec![n(&[3, 4], r)], &|g, v| g.scale(v[0], -1.7))?;
    run("relu", vec![off_kink(vec![3, 4], r)], &|g, v| g.relu(v[0]))?;
    run("exp", vec![n(&[3, 4], r)], &|g, v| g.exp(v[0]))?;
    run("softplus", vec![n(&[3, 4], r)], &|g, v| g.softplus(v[0]))?;
    run("sigmoid", vec![n(&[3, 4], r)], &|g, v| g.sigmoid(v[0]))?;
    run("tanh", vec![n(&[3, 4], r)], &|g, v| g.tanh(v[0]))?;
    run("neg", vec![n(&[3, 4], r)], &|g, v| g.neg(v[0]))?;
    run("silu", vec![n(&[3, 4], r)], &|g, v| g.silu(v[0]))?;
    run("softmax", vec![n(&[3, 5], r)], &|g, v| g.softmax(v[0]))?;
    run("masked_softmax", vec![n(&[3, 5], r)], &|g, v| g.masked_softmax(v[0], &[true, false, true, true, false]))?;
    run("log_softmax", vec![n(&[3, 5], r)], &|g, v| g.log_softmax(v[0]))?;
    run("layer_norm", vec![n(&[3, 6], r)], &|g, v| g.layer_norm(v[0]))?;
    run("sum", vec![n(&[3, 4], r)], &|g, v| {
        let s = g.sum(v[0])?;
        g.mul(s, s)
    })?;
    run("mean", vec![n(&[3, 4], r)], &|g, v| {
        let s = g.mean(v[0])?;
        g.mul(s, s)
    })?;
    run("mean_axis0", vec![n(&[4, 3, 2], r)], &|g, v| g.mean_axis0(v[0]))?;
    run("reshape", vec![n(&[3, 4], r)], &|g, v| g.reshape(v[0], vec![2, 6]))?;
    run("tile", vec![n(&[2, 3], r)], &|g, v| g.tile(v[0], 3))?;
    run("concat_last", vec![n(&[3, 2], r), n(&[3, 4], r)], &|g, v| g.concat_last(&[v[0], v[1]]))?;
    run("slice_last", vec![n(&[3, 6], r)], &|g, v| g.slice_last(v[0], 1, 3))?;
    run("concat_rows", vec![n(&[2, 3], r), n(&[4, 3], r)], &|g, v| g.concat_rows(&[v[0], v[1]]))?;
    run("slice_rows", vec![n(&[5, 3], r)], &|g, v| g.slice_rows(v[0], 1, 3))?;
    run("conv1d", vec![n(&[7, 4], r), n(&[6, 2, 3], r)], &|g, v| g.conv1d(v[0], v[1], 2))?;
    run("gram", vec![n(&[3, 4, 5], r)], &|g, v| g.gram(v[0], 0.4))?;
    let decay = Tensor::uniform(vec![9, 3], 0.35, r).map(|x| x + 0.55);
    run("diag_scan", vec![decay, n(&[9, 3], r)], &|g, v| g.diag_scan(v[0], v[1], ScanBackend::Sequential))?;
    run("lora_linear", vec![n(&[3, 5], r), n(&[4, 5], r), n(&[2, 5], r), n(&[4, 2], r)], &|g, v| {
        lora_apply(g, v[0], v[1], Some((v[2], v[3], 1.5)), None)
    })?;
    run("cross_entropy", vec![n(&[2], r)], &|g, v| cross_entropy_var(g, v[0], Label::Tc))?;

    let mut component = |name: &'static str, store: ParamStore, f: &dyn Fn(&mut Graph, &Binding) -> Result<Var>| -> Result<()> {
        let report = check_store(&store, |g, b| {
            let y = f(g, b)?;
            probe_loss(g, y, seed)
        }, Some(MODEL_COORDS))?;
        out.push(OpCheck { name, report });
        Ok(())
    };

    let x = Tensor::normal(vec![8, 4], 1.0, r);
    {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { d_lat: 8, conv_channels: 2, kernel_size: 3, heads: 2, attention: true };
        let enc = NodeEncoder::new(&mut store, "graph", cfg, r)?;
        jitter(&mut store, r);
        let xv = x.clone();
        component("latent_graph", store, &|g, b| {
            let xc = g.constant(xv.clone());
            let h = enc.encode(g, b, xc)?;
            let adj = adjacency(g, h)?;
            filter(g, adj, xc, FilterMode::RowNormalized)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, "ssm", 4, SsmConfig { d_h: 5, block_count: 2 }, r)?;
        jitter(&mut store, r);
        let xv = x.clone();
        component("selective_ssm", store, &|g, b| {
            let xc = g.constant(xv.clone());
            ssm.forward(g, b, xc, ScanBackend::Sequential)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let comp = BrainCompressor::new(&mut store, "align", 3, 4, 6, true, r)?;
        jitter(&mut store, r);
        let xv = x.clone();
        component("compress_tokens", store, &|g, b| {
            let s = g.constant(xv.clone());
            comp.forward(g, b, s, None, Pooling::Attention)
        })?;
    }
    {
        let mut store = ParamStore::new();
        let cfg = SurrogateConfig { d_k: 8, blocks: 1, heads: 2, vocab: 10, ffn_mult: 2, context_cap: 16 };
        let lora = LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0, targets: vec!["q".into(), "v".into()] };
        let model = SurrogateModel::new(&mut store, cfg, lora, r)?;
        jitter(&mut store, r);
        let z = Tensor::normal(vec![3, 8], 1.0, r);
        let st = store.clone();
        component("surrogate_forward", store, &|g, b| {
            let zc = g.constant(z.clone());
            model.forward(g, b, &st, Some(zc), &[1, 4, 2], &mut ForwardCtx::eval())
        })?;
    }

    let cfg = ModelConfig {
        d_lat: 8,
        conv_channels: 2,
        encoder_heads: 2,
        d_h: 4,
        ssm_blocks: 2,
        tokens: 2,
        d_k: 8,
        surrogate_blocks: 1,
        surrogate_heads: 2,
        vocab: 8,
        context_cap: 8,
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
        prompt: vec![1, 3],
        ..ModelConfig::default()
    };
    let mut model = Pipeline::new(cfg, Variant::full(), 4, seed)?;
    jitter(&mut model.store, r);
    let x = Tensor::normal(vec![8, 4], 1.0, r);
    let report = check_store(
        &model.store,
        |g, b| {
            let logits = model.forward(g, b, &x, &mut RunCtx::eval(ScanBackend::Sequential, 0))?;
            cross_entropy_var(g, logits, Label::Asd)
        },
        Some(MODEL_COORDS),
    )?;
    out.push(OpCheck { name: "end_to_end_loss", report });
    Ok(out)
}

/// Small random offsets on every trainable parameter so zero-initialized
/// factors and biases are exercised.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).role == Role::Trainable {
            let noise = Tensor::normal(store.value(id).shape().to_vec(), 0.3, rng);
            let v = store.value_mut(id);
            v.add_assign(&noise);
        }
    }
}
