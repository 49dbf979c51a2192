//! Diagonal linear recurrences `s_t = a_t ⊙ s_{t-1} + b_t`, `s_0 = 0`.
//!
//! Two backends compute the same states. The sequential one follows the
//! recurrence left to right and is the reference. The parallel one treats each
//! step as an affine map `(a, b)` and composes them with the associative
//! operator `(a₂, b₂) ∘ (a₁, b₁) = (a₂ ⊙ a₁, a₂ ⊙ b₁ + b₂)`: the sequence is cut
//! into fixed-size chunks, each chunk is scanned locally, the chunk totals go
//! through a Blelloch up-sweep/down-sweep, and the resulting carries are
//! folded back into every chunk. Chunk size is independent of the worker
//! count, so the operator tree (and therefore the result) is the same no
//! matter how many threads run it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default number of time steps per chunk for the parallel backend.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanBackend {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ScanBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(format!("unknown scan backend `{other}` (expected sequential|parallel)")),
        }
    }
}

impl std::fmt::Display for ScanBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

/// One affine step `s ↦ a ⊙ s + b` over a `width`-dimensional state.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineStep {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineStep {
    pub fn identity(width: usize) -> Self {
        Self {
            a: vec![1.0; width],
            b: vec![0.0; width],
        }
    }

    /// `later ∘ self`: apply `self` first, then `later`.
    pub fn then(&self, later: &AffineStep) -> AffineStep {
        let a = later.a.iter().zip(&self.a).map(|(x, y)| x * y).collect();
        let b = later
            .a
            .iter()
            .zip(&self.b)
            .zip(&later.b)
            .map(|((a2, b1), b2)| a2 * b1 + b2)
            .collect();
        AffineStep { a, b }
    }

    fn then_in_place(&mut self, later: &AffineStep) {
        for i in 0..self.a.len() {
            self.b[i] = later.a[i] * self.b[i] + later.b[i];
            self.a[i] *= later.a[i];
        }
    }
}

/// Reference scan. `decay` and `drive` are `[len × width]` row-major.
pub fn scan_sequential(decay: &[f64], drive: &[f64], width: usize) -> Vec<f64> {
    assert_eq!(decay.len(), drive.len());
    assert!(width > 0 && decay.len() % width == 0);
    let mut states = vec![0.0; decay.len()];
    let mut prev = vec![0.0; width];
    for (t, (a, b)) in decay.chunks(width).zip(drive.chunks(width)).enumerate() {
        let s = &mut states[t * width..(t + 1) * width];
        for k in 0..width {
            s[k] = a[k] * prev[k] + b[k];
        }
        prev.copy_from_slice(s);
    }
    states
}

/// Exclusive Blelloch scan over `steps` (in place). On return `steps[i]` is
/// the composition of all steps strictly before `i`; the total is returned.
fn blelloch_exclusive(steps: &mut Vec<AffineStep>, width: usize) -> AffineStep {
    let n = steps.len().next_power_of_two();
    steps.resize(n, AffineStep::identity(width));

    // Up-sweep: steps[right] becomes the composition over its subtree.
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            let combined = steps[i - stride].then(&steps[i]);
            steps[i] = combined;
            i += 2 * stride;
        }
        stride *= 2;
    }

    let total = std::mem::replace(&mut steps[n - 1], AffineStep::identity(width));

    // Down-sweep: push prefixes toward the leaves.
    stride = n / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < n {
            let left = steps[i - stride].clone();
            let prefix = steps[i].clone();
            steps[i - stride] = prefix.clone();
            steps[i] = prefix.then(&left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    total
}

/// Chunked parallel scan producing the same states as [`scan_sequential`].
pub fn scan_parallel(decay: &[f64], drive: &[f64], width: usize, chunk: usize) -> Vec<f64> {
    assert_eq!(decay.len(), drive.len());
    assert!(width > 0 && chunk > 0 && decay.len() % width == 0);
    let len = decay.len() / width;
    if len == 0 {
        return Vec::new();
    }
    let span = chunk * width;

    // Phase 1: local inclusive scans within each chunk, kept as affine maps.
    let mut local_a = decay.to_vec();
    let mut local_b = drive.to_vec();
    let totals: Vec<AffineStep> = local_a
        .par_chunks_mut(span)
        .zip(local_b.par_chunks_mut(span))
        .map(|(ca, cb)| {
            let mut acc = AffineStep::identity(width);
            for (a, b) in ca.chunks_mut(width).zip(cb.chunks_mut(width)) {
                acc.then_in_place(&AffineStep {
                    a: a.to_vec(),
                    b: b.to_vec(),
                });
                a.copy_from_slice(&acc.a);
                b.copy_from_slice(&acc.b);
            }
            acc
        })
        .collect();

    // Phase 2: exclusive scan of the chunk totals.
    let chunks = totals.len();
    let mut carries = totals;
    blelloch_exclusive(&mut carries, width);
    carries.truncate(chunks);

    // Phase 3: apply each chunk's carry-in state. Since s_0 = 0, the carry
    // state entering a chunk is just the `b` of its prefix map.
    let mut states = vec![0.0; decay.len()];
    states
        .par_chunks_mut(span)
        .zip(local_a.par_chunks(span).zip(local_b.par_chunks(span)))
        .zip(carries.par_iter())
        .for_each(|((out, (ca, cb)), carry)| {
            for ((s, a), b) in out.chunks_mut(width).zip(ca.chunks(width)).zip(cb.chunks(width)) {
                for k in 0..width {
                    s[k] = a[k] * carry.b[k] + b[k];
                }
            }
        });
    states
}

/// Runs the chosen backend.
pub fn scan(decay: &[f64], drive: &[f64], width: usize, backend: ScanBackend) -> Vec<f64> {
    match backend {
        ScanBackend::Sequential => scan_sequential(decay, drive, width),
        ScanBackend::Parallel => scan_parallel(decay, drive, width, DEFAULT_CHUNK),
    }
}

/// Vector-Jacobian product of the sequential scan.
///
/// With adjoint `λ_t = g_t + a_{t+1} ⊙ λ_{t+1}`, the gradient w.r.t. `b_t` is
/// `λ_t` and w.r.t. `a_t` is `λ_t ⊙ s_{t-1}`.
pub fn scan_backward(decay: &[f64], states: &[f64], grad: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let len = decay.len() / width;
    let mut g_decay = vec![0.0; decay.len()];
    let mut g_drive = vec![0.0; decay.len()];
    let mut lambda = vec![0.0; width];
    for t in (0..len).rev() {
        let row = t * width..(t + 1) * width;
        for k in 0..width {
            let carried = if t + 1 < len {
                decay[(t + 1) * width + k] * lambda[k]
            } else {
                0.0
            };
            lambda[k] = grad[row.start + k] + carried;
        }
        g_drive[row.clone()].copy_from_slice(&lambda);
        if t > 0 {
            for k in 0..width {
                g_decay[row.start + k] = lambda[k] * states[(t - 1) * width + k];
            }
        }
    }
    (g_decay, g_drive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_steps(rng: &mut ChaCha8Rng, len: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
        let a = (0..len * width).map(|_| rng.random_range(0.01..0.99)).collect();
        let b = (0..len * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        (a, b)
    }

    fn rel_close(x: &[f64], y: &[f64], tol: f64) -> bool {
        x.iter().zip(y).all(|(a, b)| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0))
    }

    #[test]
    fn single_step_is_bit_identical() {
        let (a, b) = (vec![0.3, 0.7], vec![1.5, -2.0]);
        assert_eq!(scan_parallel(&a, &b, 2, 4), scan_sequential(&a, &b, 2));
        assert_eq!(scan_sequential(&a, &b, 2), b);
    }

    #[test]
    fn two_step_composition() {
        let (a, b) = (vec![0.5, 0.25], vec![2.0, 3.0]);
        // s_2 = a_2 * b_1 + b_2
        let s = scan_parallel(&a, &b, 1, 1);
        assert_eq!(s, vec![2.0, 0.25 * 2.0 + 3.0]);
    }

    #[test]
    fn backends_agree_on_odd_lengths_and_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1, 2, 3, 5, 7, 8, 9, 63, 64, 65, 200] {
            let (a, b) = random_steps(&mut rng, len, 3);
            let seq = scan_sequential(&a, &b, 3);
            for chunk in [1, 2, 3, 7, 64] {
                assert!(rel_close(&seq, &scan_parallel(&a, &b, 3, chunk), 1e-12), "len {len} chunk {chunk}");
            }
        }
    }

    #[test]
    fn operator_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut step = || {
                let (a, b) = random_steps(&mut rng, 1, 4);
                AffineStep { a, b }
            };
            let (o1, o2, o3) = (step(), step(), step());
            let left = o1.then(&o2).then(&o3);
            let right = o1.then(&o2.then(&o3));
            assert!(rel_close(&left.a, &right.a, 1e-12));
            assert!(rel_close(&left.b, &right.b, 1e-12));
        }
    }

    #[test]
    fn parallel_result_independent_of_pool_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = random_steps(&mut rng, 777, 4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| scan_parallel(&a, &b, 4, 16))
        };
        assert_eq!(run(1), run(4));
    }
}
