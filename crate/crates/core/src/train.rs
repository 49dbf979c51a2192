//! Loss, Adam, metrics, and the training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::{normalize_zscore, split_dataset, DatasetSplit, Label, RoiTimeSeries};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pipeline, RunCtx, Variant};
use crate::params::{ParamStore, Role};
use crate::scan::ScanBackend;
use crate::tensor::Tensor;
use crate::token_align::classify;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub variant: Variant,
    pub backend: ScanBackend,
    /// Share of the training split held out for model selection.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 8,
            accumulation_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            variant: Variant::full(),
            backend: ScanBackend::Sequential,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Step size and batch used for the synthetic benchmark.
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("batch_size and accumulation_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs β in [0, 1) and ε > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]` on the graph.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, label: Label) -> Result<Var> {
    let ls = g.log_softmax(logits)?;
    let mut onehot = vec![0.0; 2];
    onehot[label.index()] = -1.0;
    let pick = g.constant(Tensor::vector(onehot)?);
    let picked = g.mul(ls, pick)?;
    g.sum(picked)
}

/// Tensor-level cross-entropy.
pub fn cross_entropy(logits: &Tensor, label: Label) -> Result<Tensor> {
    if logits.shape() != [2] {
        return Err(Error::dim("cross_entropy", logits.shape(), &[2]));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = cross_entropy_var(&mut g, l, label)?;
    Ok(g.value(loss).clone())
}

/// Bias-corrected Adam moments for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update on the trainable parameters accepted by `update`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
    update: impl Fn(&crate::params::Param) -> bool,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for ((_, p), g) in store.iter().zip(grads) {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in `{}` at flat index {i}: {}",
                p.name,
                g.data()[i]
            )));
        }
        if g.shape() != p.value.shape() {
            return Err(Error::dim("adam_step", g.shape(), p.value.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get(id);
        if p.role != Role::Trainable || !update(p) {
            continue;
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = store.value_mut(id).data_mut();
        for k in 0..w.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Confusion counts with ASD as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

impl Metrics {
    /// Zero denominators give zero.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = (tp + fp + fn_ + tn) as f64;
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio((tp + tn) as f64, total),
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (truth, pred) in pairs {
            match (truth, pred) {
                (Label::Asd, Label::Asd) => tp += 1,
                (Label::Tc, Label::Asd) => fp += 1,
                (Label::Asd, Label::Tc) => fn_ += 1,
                (Label::Tc, Label::Tc) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub predictions: Vec<(String, Label, f64)>,
}

/// Seed for `align:random` tokens: fixed per subject at evaluation, fresh per
/// epoch in training.
fn random_token_seed(seed: u64, epoch: u64, subject: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch << 32) ^ subject as u64
}

/// Deterministic inference pass over `subjects`, parallel across subjects.
pub fn evaluate(model: &Pipeline, subjects: &[RoiTimeSeries], backend: ScanBackend) -> Result<Evaluation> {
    if subjects.is_empty() {
        return Err(Error::Evaluation("cannot evaluate an empty split".into()));
    }
    let rows: Vec<(Label, Label, f64, f64)> = subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let truth = s
                .label
                .ok_or_else(|| Error::Evaluation(format!("subject {} has no label", s.subject_id)))?;
            let logits = model.logits(&s.values, backend, random_token_seed(u64::MAX, 0, i))?;
            let loss = cross_entropy(&logits, truth)?.item();
            let (pred, conf) = classify(&logits)?;
            Ok((truth, pred, conf, loss))
        })
        .collect::<Result<_>>()?;
    let loss = rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64;
    Ok(Evaluation {
        metrics: Metrics::from_pairs(rows.iter().map(|r| (r.0, r.1))),
        loss,
        predictions: subjects
            .iter()
            .zip(&rows)
            .map(|(s, r)| (s.subject_id.clone(), r.1, r.2))
            .collect(),
    })
}

/// Loss and per-parameter gradients for one subject.
pub fn sample_gradient(model: &Pipeline, x: &Tensor, label: Label, dropout_seed: Option<u64>, random_seed: u64, backend: ScanBackend) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut ctx = RunCtx {
        backend,
        training: rng.is_some(),
        dropout_rng: rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        random_seed,
    };
    let logits = model.forward(&mut g, &b, x, &mut ctx)?;
    let loss = cross_entropy_var(&mut g, logits, label)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), b.collect(&grads)))
}

/// Summed gradients over a batch, in subject order regardless of thread count.
pub fn batch_gradient(
    model: &Pipeline,
    batch: &[(&RoiTimeSeries, u64, u64)],
    training: bool,
    backend: ScanBackend,
) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|(s, dseed, rseed)| {
            let label = s
                .label
                .ok_or_else(|| Error::Content(format!("subject {} has no label", s.subject_id)))?;
            sample_gradient(model, &s.values, label, training.then_some(*dseed), *rseed, backend)
        })
        .collect::<Result<_>>()?;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for (l, gs) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            acc.add_assign(g);
        }
    }
    Ok((loss, grads))
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LogRecord {
    pub fn new(epoch: usize, split: &str, eval: &Evaluation) -> Self {
        Self {
            epoch,
            split: split.into(),
            loss: eval.loss,
            accuracy: eval.metrics.accuracy,
            precision: eval.metrics.precision,
            recall: eval.metrics.recall,
            f1: eval.metrics.f1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Pipeline,
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
}

/// Trains `model` in place of a copy and returns the best-by-validation
/// snapshot. `checkpoints`, when given, receives one file per epoch.
pub fn train(
    mut model: Pipeline,
    train_set: &[RoiTimeSeries],
    val_set: &[RoiTimeSeries],
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut state = AdamState::new(&model.store);
    let mut log = Vec::new();
    let mut push = |r: LogRecord, log: &mut Vec<LogRecord>| {
        on_record(&r);
        log.push(r);
    };
    let selection_set = if val_set.is_empty() { train_set } else { val_set };
    let initial = evaluate(&model, selection_set, cfg.backend)?;
    push(LogRecord::new(0, "val", &initial), &mut log);
    let mut best = (initial.metrics.accuracy, -initial.loss, 0usize, model.store.clone());

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let variant = model.variant;
    let accepts = move |p: &crate::params::Param| variant.train_adapters || !p.name.starts_with("lora.");
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let group = cfg.batch_size * cfg.accumulation_steps;
        for step in order.chunks(group) {
            let mut acc: Option<Vec<Tensor>> = None;
            for micro in step.chunks(cfg.batch_size) {
                let batch: Vec<_> = micro
                    .iter()
                    .map(|&i| {
                        let seed = random_token_seed(cfg.seed, epoch as u64, i);
                        (&train_set[i], seed ^ 0xD809_5EED, seed)
                    })
                    .collect();
                let (loss, grads) = batch_gradient(&model, &batch, true, cfg.backend)?;
                epoch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            x.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty step");
            let scale = 1.0 / step.len() as f64;
            for g in &mut grads {
                *g = g.scale(scale);
            }
            adam_step(&mut model.store, &grads, &mut state, cfg, accepts)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss became {train_loss} in epoch {epoch}")));
        }
        let tr = evaluate(&model, train_set, cfg.backend)?;
        push(
            LogRecord {
                loss: train_loss,
                ..LogRecord::new(epoch, "train", &tr)
            },
            &mut log,
        );
        let val = evaluate(&model, selection_set, cfg.backend)?;
        push(LogRecord::new(epoch, "val", &val), &mut log);
        if let Some(dir) = checkpoints {
            checkpoint::save(dir.join(format!("epoch_{epoch:03}.dyns")), &model.store.to_named())?;
        }
        if (val.metrics.accuracy, -val.loss) > (best.0, best.1) {
            best = (val.metrics.accuracy, -val.loss, epoch, model.store.clone());
        }
    }
    model.store = best.3;
    Ok(TrainOutcome {
        model,
        best_epoch: best.2,
        log,
    })
}

/// Test metrics and logs for one variant.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub test: Evaluation,
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
    pub model: Pipeline,
}

pub fn normalize_all(subjects: &[RoiTimeSeries]) -> Result<Vec<RoiTimeSeries>> {
    subjects.iter().map(normalize_zscore).collect()
}

/// Normalizes, carves out validation, trains, and scores the test split.
pub fn run_variant(
    variant: Variant,
    dataset: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
    on_record: impl FnMut(&LogRecord),
) -> Result<RunResult> {
    cfg.validate()?;
    let train_all = normalize_all(&dataset.train)?;
    let test = normalize_all(&dataset.test)?;
    let (train_set, val_set) = if cfg.validation_fraction > 0.0 {
        let s = split_dataset(&train_all, 1.0 - cfg.validation_fraction, cfg.seed.wrapping_add(1))?;
        (s.train, s.test)
    } else {
        (train_all, Vec::new())
    };
    let rois = train_set[0].rois();
    let model = Pipeline::new(model_cfg.clone(), variant, rois, cfg.seed)?;
    let cfg = TrainConfig { variant, ..cfg.clone() };
    let mut on_record = on_record;
    let outcome = train(model, &train_set, &val_set, &cfg, checkpoints, &mut on_record)?;
    let test_eval = evaluate(&outcome.model, &test, cfg.backend)?;
    let mut log = outcome.log;
    let rec = LogRecord::new(outcome.best_epoch, "test", &test_eval);
    on_record(&rec);
    log.push(rec);
    Ok(RunResult {
        variant,
        test: test_eval,
        best_epoch: outcome.best_epoch,
        log,
        model: outcome.model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy(&Tensor::vector(vec![0.0, 0.0]).unwrap(), Label::Asd).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy(&Tensor::vector(vec![10.0, -10.0]).unwrap(), Label::Asd).unwrap().item();
        // log(1 + e^-20)
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-24);
        assert!((l - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn hand_confusion_matrix() {
        let m = Metrics::from_counts(8, 2, 2, 8);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            assert!((v - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn all_tc_predictor_has_zero_precision() {
        let pairs = (0..10).map(|i| (if i < 5 { Label::Asd } else { Label::Tc }, Label::Tc));
        let m = Metrics::from_pairs(pairs);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.0, 0.0, 0.0));
    }

    #[test]
    fn paper_f1_is_consistent() {
        assert!((f1_score(0.8022, 0.6102) - 0.6931).abs() < 5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { accumulation_steps: 0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.trainable("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let mut state = AdamState::new(&store);
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let g = vec![Tensor::vector(vec![3.0, -0.001, 1e3]).unwrap()];
        adam_step(&mut store, &g, &mut state, &cfg, |_| true).unwrap();
        let after = store.value(id).data();
        for (a, (b, gk)) in after.iter().zip([1.0, -2.0, 0.5].iter().zip(g[0].data())) {
            let want = cfg.learning_rate * gk / (gk.abs() + cfg.eps);
            assert!(((b - a) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.trainable("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut state = AdamState::new(&store);
        for _ in 0..5 {
            adam_step(&mut store, &[Tensor::zeros(vec![2])], &mut state, &TrainConfig::default(), |_| true).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut store = ParamStore::new();
        store.trainable("w", Tensor::vector(vec![1.0]).unwrap());
        let mut state = AdamState::new(&store);
        let mut bad = Tensor::zeros(vec![1]);
        bad.data_mut()[0] = f64::NAN;
        let err = adam_step(&mut store, &[bad], &mut state, &TrainConfig::default(), |_| true).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let p = Pipeline::new(ModelConfig::desk(), Variant::full(), 4, 0).unwrap();
        assert!(matches!(evaluate(&p, &[], ScanBackend::Sequential), Err(Error::Evaluation(_))));
    }
}
