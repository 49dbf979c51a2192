//! Input-selective diagonal state-space model.
//!
//! For a block with input `u_t`:
//!
//! ```text
//! Δ_t = softplus(W_Δ u_t + δ)              per-channel timescale
//! A_t = exp(-Δ_t ⊙ softplus(a))            diagonal transition, in (0, 1)
//! B_t = diag(Δ_t) W_B                      input projection
//! s_t = A_t ⊙ s_{t-1} + B_t u_t,  s_0 = 0
//! ```
//!
//! Blocks stack with residual connections from the second block on; each
//! later block reads `silu` of the running output. A linear readout follows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scan::ScanBackend;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_h: usize,
    pub block_count: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self { d_h: 16, block_count: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub d_in: usize,
    pub d_h: usize,
    /// Decay logits `a`.
    pub a_logit: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub config: SsmConfig,
    pub blocks: Vec<SsmBlock>,
    pub w_out: ParamId,
}

/// Latent state trajectory `[s_1 … s_T]` as a `[T × d_h]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmStateSeq {
    pub states: Tensor,
}

impl SsmStateSeq {
    pub fn len(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, t: usize) -> &[f64] {
        self.states.row(t)
    }
}

impl SsmBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        // Decay rates spread over a range of memory lengths.
        let a: Vec<f64> = (0..d_h)
            .map(|k| {
                let rate = 0.05 + 0.9 * k as f64 / (d_h.max(2) - 1) as f64;
                (rate.exp_m1()).ln()
            })
            .collect();
        Self {
            d_in,
            d_h,
            a_logit: store.trainable(format!("{prefix}.a"), Tensor::new(vec![d_h], a).expect("finite")),
            w_delta: store.trainable(format!("{prefix}.w_delta"), Tensor::uniform(vec![d_h, d_in], bound, rng)),
            delta_bias: store.trainable(format!("{prefix}.delta_bias"), Tensor::zeros(vec![d_h])),
            w_b: store.trainable(format!("{prefix}.w_b"), Tensor::uniform(vec![d_h, d_in], bound, rng)),
        }
    }

    /// Per-step decays `A_t` and drives `B_t u_t`, each `[T × d_h]`.
    pub fn discretize(&self, g: &mut Graph, b: &Binding, u: Var) -> Result<(Var, Var)> {
        if g.shape(u).len() != 2 || g.shape(u)[1] != self.d_in {
            return Err(Error::dim("ssm_block", g.shape(u), &[0, self.d_in]));
        }
        let pre = g.matmul_bt(u, b[self.w_delta])?;
        let pre = g.add_bias(pre, b[self.delta_bias])?;
        let delta = g.softplus(pre)?;
        let rate = g.softplus(b[self.a_logit])?;
        let log_decay = g.mul_bias(delta, rate)?;
        let log_decay = g.neg(log_decay)?;
        let decay = g.exp(log_decay)?;
        let proj = g.matmul_bt(u, b[self.w_b])?;
        let drive = g.mul(delta, proj)?;
        Ok((decay, drive))
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, u: Var, backend: ScanBackend) -> Result<Var> {
        let (decay, drive) = self.discretize(g, b, u)?;
        g.diag_scan(decay, drive, backend)
    }
}

impl SelectiveSsm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, config: SsmConfig, rng: &mut R) -> Result<Self> {
        if config.d_h == 0 || config.block_count == 0 || d_in == 0 {
            return Err(Error::Config("d_h, block_count and input width must be positive".into()));
        }
        let blocks = (0..config.block_count)
            .map(|l| {
                let width = if l == 0 { d_in } else { config.d_h };
                SsmBlock::new(store, &format!("{prefix}.block{l}"), width, config.d_h, rng)
            })
            .collect();
        let w_out = store.trainable(format!("{prefix}.w_out"), Tensor::eye(config.d_h));
        Ok(Self { config, blocks, w_out })
    }

    /// `[T × N]` filtered activity to `[T × d_h]` state features.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var, backend: ScanBackend) -> Result<Var> {
        let mut y = x;
        for (l, block) in self.blocks.iter().enumerate() {
            y = if l == 0 {
                block.forward(g, b, y, backend)?
            } else {
                let u = g.silu(y)?;
                let s = block.forward(g, b, u, backend)?;
                g.add(s, y)?
            };
        }
        g.matmul_bt(y, b[self.w_out])
    }

    /// `(A_t diagonal, B_t)` of the first block for a single input `x̃_t`.
    pub fn selective_params(&self, store: &ParamStore, x_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let block = &self.blocks[0];
        if x_t.shape() != [block.d_in] {
            return Err(Error::dim("make_selective_params", x_t.shape(), &[block.d_in]));
        }
        let w_delta = store.value(block.w_delta);
        let bias = store.value(block.delta_bias).data();
        let a = store.value(block.a_logit).data();
        let w_b = store.value(block.w_b);
        let pre = w_delta.matvec(x_t)?;
        let delta: Vec<f64> = pre.data().iter().zip(bias).map(|(p, b)| softplus(p + b)).collect();
        let decay = delta.iter().zip(a).map(|(d, a)| (-d * softplus(*a)).exp()).collect();
        let n = block.d_in;
        let mut bt = w_b.data().to_vec();
        for (row, d) in bt.chunks_mut(n).zip(&delta) {
            for v in row {
                *v *= d;
            }
        }
        Ok((Tensor::new(vec![block.d_h], decay)?, Tensor::new(vec![block.d_h, n], bt)?))
    }

    fn first_block_states(&self, store: &ParamStore, x: &Tensor, backend: ScanBackend) -> Result<SsmStateSeq> {
        if x.rank() != 2 || x.shape()[0] == 0 {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: "expected [T × N] with T ≥ 1".into(),
            });
        }
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let s = self.blocks[0].forward(&mut g, &b, xv, backend)?;
        Ok(SsmStateSeq {
            states: g.value(s).clone(),
        })
    }

    /// Raw first-block states via the left-to-right recurrence.
    pub fn scan_sequential(&self, store: &ParamStore, x: &Tensor) -> Result<SsmStateSeq> {
        self.first_block_states(store, x, ScanBackend::Sequential)
    }

    /// Raw first-block states via the chunked associative scan.
    pub fn scan_parallel(&self, store: &ParamStore, x: &Tensor) -> Result<SsmStateSeq> {
        self.first_block_states(store, x, ScanBackend::Parallel)
    }

    /// Inference forward with the chosen backend.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor, backend: ScanBackend) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &b, xv, backend)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d_in: usize, d_h: usize, blocks: usize, seed: u64) -> (ParamStore, SelectiveSsm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = SsmConfig { d_h, block_count: blocks };
        let ssm = SelectiveSsm::new(&mut store, "ssm", d_in, cfg, &mut rng).unwrap();
        (store, ssm)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let (store, ssm) = model(4, 6, 2, 1);
        let out = ssm.forward_tensor(&store, &Tensor::zeros(vec![9, 4]), ScanBackend::Sequential).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn selective_params_are_deterministic_and_in_range() {
        let (store, ssm) = model(3, 5, 1, 2);
        let zero = Tensor::zeros(vec![3]);
        let (a1, b1) = ssm.selective_params(&store, &zero).unwrap();
        let (a2, b2) = ssm.selective_params(&store, &zero).unwrap();
        assert_eq!((a1.clone(), b1), (a2, b2));
        assert!(a1.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn huge_decay_logit_forgets_instantly() {
        let (mut store, ssm) = model(2, 3, 1, 3);
        store.value_mut(ssm.blocks[0].a_logit).data_mut()[1] = 1e4;
        let (a, _) = ssm.selective_params(&store, &Tensor::vector(vec![0.3, -0.2]).unwrap()).unwrap();
        assert!(a.data()[1] < 1e-100);
    }

    #[test]
    fn single_block_identity_readout_equals_raw_states() {
        let (store, ssm) = model(4, 4, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::normal(vec![12, 4], 1.0, &mut rng);
        let raw = ssm.scan_sequential(&store, &x).unwrap();
        let out = ssm.forward_tensor(&store, &x, ScanBackend::Sequential).unwrap();
        assert_eq!(out, raw.states);
    }

    #[test]
    fn rejects_bad_config() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SsmConfig { d_h: 0, block_count: 2 };
        assert!(SelectiveSsm::new(&mut store, "s", 3, cfg, &mut rng).is_err());
    }
}
