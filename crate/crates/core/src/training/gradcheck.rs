use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapter::{AdapterState, VariantSpec};
use crate::backbone::{build_graph, init_backbone, BackboneConfig, BackboneModel, GateMode};
use crate::data::{Batch, Example, Vocab};
use crate::error::Result;
use crate::numerics::{finite_diff_check, Tape, Tensor};

/// Default central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Mean cross-entropy of `batch` and its gradient with respect to every
/// trainable tensor of `adapter`, flattened in [`AdapterState::tensors`]
/// order. Gates are deterministic.
pub fn loss_and_flat_grad(model: &BackboneModel, adapter: &AdapterState, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, model, Some(adapter), batch, GateMode::Deterministic, false)?;
    let loss = tape.cross_entropy(graph.logits, &batch.labels)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    let bound = graph.adapter.expect("adapter graph binds trainable tensors");
    let mut flat = Vec::new();
    for (v, (_, _, t)) in bound.all.iter().zip(adapter.tensors()) {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }
    Ok((value, flat))
}

pub fn flatten(adapter: &AdapterState) -> Vec<f64> {
    adapter.tensors().into_iter().flat_map(|(_, _, t)| t.data().to_vec()).collect()
}

pub fn unflatten(adapter: &mut AdapterState, theta: &[f64]) {
    let mut offset = 0;
    for (_, _, t) in adapter.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
}

/// Largest relative error between the tape gradient and central
/// differences over every trainable value of `adapter`.
pub fn adapter_gradient_check(model: &BackboneModel, adapter: &AdapterState, batch: &Batch, eps: f64) -> Result<f64> {
    let theta = Tensor::vector(flatten(adapter))?;
    let mut work = adapter.clone();
    finite_diff_check(
        |p: &Tensor| {
            unflatten(&mut work, p.data());
            loss_and_flat_grad(model, &work, batch)
        },
        &theta,
        eps,
    )
}

/// The seeded micro-problem behind `gradcheck`: a 2-layer encoder
/// (d = 16, d_ff = 32), an AdapterBias adapter whose tensors are all
/// perturbed away from their identity start, and a 2-sentence batch.
pub fn seeded_gradcheck_problem(seed: u64) -> Result<(BackboneModel, AdapterState, Batch)> {
    let texts = ["the film was wonderful and moving", "a dull plot"];
    let vocab = Vocab::build(texts);
    let cfg = BackboneConfig::tiny(2, 16, 32, 2, vocab.len()).with_seed(seed);
    let model = init_backbone(&cfg)?;
    let mut adapter = AdapterState::init(&model, &VariantSpec::adapter_bias(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for (_, _, t) in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    }
    let examples: Vec<Example> = texts
        .iter()
        .zip([1, 0])
        .map(|(t, label)| Example {
            text: t.to_string(),
            label,
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::from_examples(&vocab, &refs, cfg.max_len)?;
    Ok((model, adapter, batch))
}

pub fn seeded_gradcheck(seed: u64) -> Result<f64> {
    let (model, adapter, batch) = seeded_gradcheck_problem(seed)?;
    adapter_gradient_check(&model, &adapter, &batch, GRADCHECK_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let (_, adapter, _) = seeded_gradcheck_problem(1).unwrap();
        let theta = flatten(&adapter);
        let mut other = adapter.clone();
        unflatten(&mut other, &vec![0.0; theta.len()]);
        unflatten(&mut other, &theta);
        assert_eq!(other, adapter);
    }

    #[test]
    fn seeded_check_passes() {
        for seed in [0, 7] {
            let err = seeded_gradcheck(seed).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
