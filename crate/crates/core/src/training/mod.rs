//! AdamW training of an adapter over a frozen backbone.

mod adamw;
mod gradcheck;
mod metrics;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamW, AdamWConfig, Moments};
pub use gradcheck::{
    adapter_gradient_check, flatten, loss_and_flat_grad, seeded_gradcheck, seeded_gradcheck_problem, unflatten,
    GRADCHECK_EPS,
};
pub use metrics::{classification_scores, Metrics};

use crate::adapter::{count_trainable, AdapterState, VariantSpec};
use crate::backbone::{build_graph, check_compatible, BackboneConfig, BackboneModel, GateMode};
use crate::data::{batches, Batch, Dataset, Example, Vocab};
use crate::error::{Error, Result};
use crate::l0::{deterministic_gate, remaining_fraction};
use crate::numerics::Tape;

/// Environment variable capping the multi-seed worker count.
pub const THREADS_ENV: &str = "ADAPTERBIAS_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds the epoch shuffle and the gate noise.
    pub seed: u64,
    pub max_len: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_len: 64,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.epochs > 0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.max_len >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters: {self:?}")))
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0Report {
    pub threshold: f64,
    pub remaining_fraction: f64,
    /// Fraction of the weight-head gates that stay open, per layer.
    pub remaining_fraction_per_layer: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub backbone: BackboneConfig,
    pub variant: VariantSpec,
    pub hyperparams: Hyperparams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config: ConfigEcho,
    pub initial_dev: Metrics,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev: Metrics,
    /// Closed-form per-task parameter count of the variant.
    pub trainable_parameters: usize,
    pub frozen_checksums: BTreeMap<String, String>,
    pub backbone_fingerprint: String,
    pub l0: Option<L0Report>,
    pub wall_clock_seconds: f64,
}

pub struct TrainOutcome {
    /// Adapter state at the best dev epoch.
    pub adapter: AdapterState,
    pub summary: TrainingSummary,
}

/// Predicted classes and summed loss over `dataset`, in order.
fn predict(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    examples: &[&Example],
    batch_size: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for batch in batches(vocab, examples, batch_size, max_len)? {
        let mut tape = Tape::new();
        let graph = build_graph(&mut tape, model, Some(adapter), &batch, GateMode::Deterministic, false)?;
        let ce = tape.cross_entropy(graph.logits, &batch.labels)?;
        loss_sum += tape.scalar(ce)? * batch.batch_size as f64;
        let logits = tape.value(graph.logits);
        let k = logits.len() / batch.batch_size;
        for row in logits.chunks(k) {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok((preds, loss_sum))
}

/// Deterministic metrics of `adapter` on `dataset`.
pub fn evaluate(
    model: &BackboneModel,
    adapter: &AdapterState,
    vocab: &Vocab,
    dataset: &Dataset,
    batch_size: usize,
    max_len: usize,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    check_compatible(model, adapter)?;
    let num_classes = model.config().num_classes;
    if let Some(e) = dataset.examples.iter().find(|e| e.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: e.label,
            num_classes,
        });
    }
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let (preds, loss_sum) = predict(model, adapter, vocab, &refs, batch_size, max_len)?;
    let labels: Vec<usize> = dataset.examples.iter().map(|e| e.label).collect();
    let (accuracy, matthews_corr, f1) = classification_scores(&preds, &labels, num_classes)?;
    Ok(Metrics {
        accuracy,
        matthews_corr,
        f1,
        loss: loss_sum / dataset.len() as f64,
    })
}

/// Per-layer and overall fraction of deterministic weight-head gates above
/// the configured threshold, or `None` when L0 is inactive.
pub fn l0_report(adapter: &AdapterState) -> Result<Option<L0Report>> {
    let Some(cfg) = adapter.variant().l0 else { return Ok(None) };
    let Some(alpha) = adapter.shift.as_ref().and_then(|s| s.alpha.as_ref()) else { return Ok(None) };
    let Some(logits) = &alpha.log_alpha else { return Ok(None) };
    let gates: Vec<Vec<f64>> = logits
        .iter()
        .map(|t| t.data().iter().map(|&la| deterministic_gate(la, &cfg)).collect())
        .collect();
    let per_layer = alpha
        .map
        .iter()
        .map(|&slot| remaining_fraction(&gates[slot], cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = gates.concat();
    Ok(Some(L0Report {
        threshold: cfg.threshold,
        remaining_fraction: remaining_fraction(&all, cfg.threshold)?,
        remaining_fraction_per_layer: per_layer,
    }))
}

/// Uniform noise in the open interval (0, 1), one vector per gate slot.
fn gate_noise(adapter: &AdapterState, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    adapter.variant().l0?;
    let alpha = adapter.shift.as_ref()?.alpha.as_ref()?;
    let logits = alpha.log_alpha.as_ref()?;
    Some(
        logits
            .iter()
            .map(|t| {
                (0..t.numel())
                    .map(|_| loop {
                        let u: f64 = rng.gen();
                        if u > 0.0 {
                            break u;
                        }
                    })
                    .collect()
            })
            .collect(),
    )
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &BackboneModel,
    adapter: &mut AdapterState,
    optimizer: &mut AdamW,
    batch: &Batch,
    noise: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let lambda = adapter.variant().l0.map_or(0.0, |c| c.lambda);
    let (loss, grads) = {
        let mut tape = Tape::new();
        let gates = noise.map_or(GateMode::Deterministic, GateMode::Sampled);
        let graph = build_graph(&mut tape, model, Some(&*adapter), batch, gates, false)?;
        let ce = tape.cross_entropy(graph.logits, &batch.labels)?;
        let loss = match graph.l0_penalty {
            Some(p) => {
                let scaled = tape.scale(p, lambda)?;
                tape.add(ce, scaled)?
            }
            None => ce,
        };
        let value = tape.scalar(loss)?;
        let grads = tape.backward(loss)?;
        let bound = graph.adapter.expect("adapter graph binds trainable tensors");
        let per_tensor: Vec<Option<Vec<f64>>> = bound.all.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec)).collect();
        (value, per_tensor)
    };
    let mut params = adapter.tensors_mut();
    for ((_, _, t), g) in params.iter_mut().zip(&grads) {
        if let Some(g) = g {
            t.accumulate_grad(g)?;
        }
    }
    optimizer.step(params)?;
    Ok(loss)
}

fn divergence(epoch: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) => Error::Divergence { epoch, step, detail },
        other => other,
    }
}

/// Trains `adapter` on `train`, selecting the epoch with the best dev
/// accuracy. The backbone is verified unchanged afterwards.
pub fn train(
    model: &BackboneModel,
    mut adapter: AdapterState,
    vocab: &Vocab,
    train_set: &Dataset,
    dev_set: &Dataset,
    hyper: &Hyperparams,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    hyper.validate()?;
    check_compatible(model, &adapter)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and dev sets".into()));
    }
    let checksums = model.checksums();

    let initial_dev = evaluate(model, &adapter, vocab, dev_set, hyper.batch_size, hyper.max_len)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    noise_rng.set_stream(1);
    let mut optimizer = AdamW::new(hyper.adamw());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(usize, Metrics, AdapterState)> = None;

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let examples: Vec<&Example> = order.iter().map(|&i| &train_set.examples[i]).collect();
        let mut loss_sum = 0.0;
        for (step, chunk) in examples.chunks(hyper.batch_size).enumerate() {
            let batch = Batch::from_examples(vocab, chunk, hyper.max_len)?;
            let noise = gate_noise(&adapter, &mut noise_rng);
            let loss = train_step(model, &mut adapter, &mut optimizer, &batch, noise.as_deref())
                .map_err(|e| divergence(epoch, step, e))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let dev = evaluate(model, &adapter, vocab, dev_set, hyper.batch_size, hyper.max_len)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev,
        });
        if best.as_ref().map_or(true, |(_, m, _)| dev.accuracy > m.accuracy) {
            best = Some((epoch, dev, adapter.clone()));
        }
    }
    model.verify_checksums(&checksums)?;

    let (best_epoch, best_dev, best_adapter) = best.expect("at least one epoch");
    let summary = TrainingSummary {
        config: ConfigEcho {
            backbone: model.config().clone(),
            variant: adapter.variant().clone(),
            hyperparams: *hyper,
        },
        initial_dev,
        history,
        best_epoch,
        best_dev,
        trainable_parameters: count_trainable(model.config(), adapter.variant())?,
        frozen_checksums: checksums.into_iter().collect(),
        backbone_fingerprint: format!("{:016x}", model.fingerprint()),
        l0: l0_report(&best_adapter)?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        adapter: best_adapter,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub summary: TrainingSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    /// Sorted by seed.
    pub runs: Vec<SeedRun>,
    pub best_seed: u64,
    pub best_dev_accuracy: f64,
    pub mean_dev_accuracy: f64,
}

/// Worker count for the multi-seed runner: `ADAPTERBIAS_LAB_THREADS` when
/// set, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains one adapter per seed on a shared frozen backbone. Each seed drives
/// the adapter initialization, the shuffle and the gate noise.
pub fn run_seeds(
    model: &BackboneModel,
    variant: &VariantSpec,
    vocab: &Vocab,
    train_set: &Dataset,
    dev_set: &Dataset,
    hyper: &Hyperparams,
    seeds: &[u64],
    threads: usize,
) -> Result<(MultiSeedReport, Vec<AdapterState>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("run_seeds needs at least one seed".into()));
    }
    let run = |&seed: &u64| -> Result<(u64, TrainOutcome)> {
        let adapter = AdapterState::init(model, variant, seed)?;
        let h = Hyperparams { seed, ..*hyper };
        Ok((seed, train(model, adapter, vocab, train_set, dev_set, &h)?))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut results = pool.install(|| seeds.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    results.sort_by_key(|(seed, _)| *seed);

    let mut runs = Vec::with_capacity(results.len());
    let mut adapters = Vec::with_capacity(results.len());
    for (seed, outcome) in results {
        runs.push(SeedRun {
            seed,
            summary: outcome.summary,
        });
        adapters.push(outcome.adapter);
    }
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.summary.best_dev.accuracy > runs[best].summary.best_dev.accuracy {
            best = i;
        }
    }
    let mean = runs.iter().map(|r| r.summary.best_dev.accuracy).sum::<f64>() / runs.len() as f64;
    Ok((
        MultiSeedReport {
            best_seed: runs[best].seed,
            best_dev_accuracy: runs[best].summary.best_dev.accuracy,
            mean_dev_accuracy: mean,
            runs,
        },
        adapters,
    ))
}
