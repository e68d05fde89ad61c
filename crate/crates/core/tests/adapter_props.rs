use adapterbias_lab::adapter::{count_trainable, AdapterState, ParamRole, VariantSpec};
use adapterbias_lab::backbone::{forward, init_backbone, BackboneConfig, BackboneModel};
use adapterbias_lab::data::{Batch, Example, Vocab};
use adapterbias_lab::numerics::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "good", "bad", "film", "plot", "was", "very", "dull", "moving", "a", "the", "story", "acting",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..7);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn setup(seed: u64, variant: &VariantSpec) -> (BackboneModel, AdapterState, Vocab, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::build(WORDS);
    let cfg = BackboneConfig::tiny(2, 8, 16, 2, vocab.len()).with_seed(seed);
    let model = init_backbone(&cfg).unwrap();
    let mut adapter = AdapterState::init(&model, variant, seed).unwrap();
    for (_, role, t) in adapter.tensors_mut() {
        if role == ParamRole::Adapter {
            let noise = Tensor::randn(t.shape(), 0.5, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
        }
    }
    let examples = (0..4)
        .map(|i| Example {
            text: sentence(&mut rng),
            label: i % 2,
        })
        .collect();
    (model, adapter, vocab, examples)
}

fn per_example_loss(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    (0..labels.len())
        .map(|b| {
            let row = logits.row(b);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[labels[b]]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rescaling_v_and_alpha_leaves_the_loss_unchanged(seed in any::<u64>()) {
        let (model, adapter, vocab, examples) = setup(seed, &VariantSpec::adapter_bias());
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&vocab, &refs, 16).unwrap();
        let base = per_example_loss(&forward(&model, &adapter, &batch, false).unwrap().logits, &batch.labels);
        for c in [0.5, 3.0] {
            let mut scaled = adapter.clone();
            let shift = scaled.shift.as_mut().unwrap();
            shift.v.iter_mut().for_each(|v| v.data_mut().iter_mut().for_each(|x| *x *= c));
            let head = shift.alpha.as_mut().unwrap();
            for t in head.weights.iter_mut().chain(head.biases.iter_mut()) {
                t.data_mut().iter_mut().for_each(|x| *x /= c);
            }
            let loss = per_example_loss(&forward(&model, &scaled, &batch, false).unwrap().logits, &batch.labels);
            for (a, b) in base.iter().zip(&loss) {
                prop_assert!((a - b).abs() < 1e-10, "c = {}: {} vs {}", c, a, b);
            }
        }
    }

    #[test]
    fn padding_never_changes_real_logits(seed in any::<u64>()) {
        let (model, adapter, vocab, examples) = setup(seed, &VariantSpec::adapter_bias());
        let long = Example { text: "the story was very very dull and the acting was bad".into(), label: 0 };
        for e in &examples {
            let alone = forward(&model, &adapter, &Batch::from_examples(&vocab, &[e], 16).unwrap(), false).unwrap().logits;
            let padded = forward(&model, &adapter, &Batch::from_examples(&vocab, &[e, &long], 16).unwrap(), false).unwrap().logits;
            for (a, b) in alone.row(0).iter().zip(padded.row(0)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_bias_matrix_has_rank_one(seed in any::<u64>()) {
        let (model, adapter, vocab, examples) = setup(seed, &VariantSpec::adapter_bias());
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&vocab, &refs, 16).unwrap();
        for trace in forward(&model, &adapter, &batch, true).unwrap().traces.unwrap() {
            for layer in &trace.layers {
                let (d, m) = (layer.bias.shape()[0], layer.bias.shape()[1]);
                for i in 0..d {
                    for k in i + 1..d {
                        for j in 0..m {
                            for l in j + 1..m {
                                let b = &layer.bias;
                                let minor = b.at2(i, j) * b.at2(k, l) - b.at2(i, l) * b.at2(k, j);
                                prop_assert!(minor.abs() < 1e-10);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shifts_are_alpha_times_v(seed in any::<u64>()) {
        let (model, adapter, vocab, examples) = setup(seed, &VariantSpec::adapter_bias());
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&vocab, &refs, 16).unwrap();
        let shift = adapter.shift.as_ref().unwrap();
        for trace in forward(&model, &adapter, &batch, true).unwrap().traces.unwrap() {
            for (l, layer) in trace.layers.iter().enumerate() {
                let v = &shift.v[shift.v_map[l]];
                for i in 0..layer.alpha.numel() {
                    for j in 0..v.numel() {
                        prop_assert_eq!(layer.bias.at2(j, i), v.data()[j] * layer.alpha.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn without_weight_head_every_token_gets_the_same_shift(seed in any::<u64>()) {
        let (model, adapter, vocab, examples) = setup(seed, &VariantSpec::without_l_alpha());
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = Batch::from_examples(&vocab, &refs, 16).unwrap();
        for trace in forward(&model, &adapter, &batch, true).unwrap().traces.unwrap() {
            for layer in &trace.layers {
                let m = layer.alpha.numel();
                for j in 0..layer.bias.shape()[0] {
                    for i in 1..m {
                        prop_assert_eq!(layer.bias.at2(j, i), layer.bias.at2(j, 0));
                    }
                }
            }
        }
    }
}

#[test]
fn census_closed_form_for_every_sharing_combination() {
    for (l, d, f) in [(12, 768, 3072), (24, 1024, 4096), (3, 8, 20)] {
        let cfg = BackboneConfig::tiny(l, d, f, 1, 10);
        for (sv, sa) in [(false, false), (true, false), (false, true), (true, true)] {
            let v_term = if sv { d } else { l * d };
            let a_term = if sa { f + 1 } else { l * (f + 1) };
            let expected = v_term + a_term + l * 2 * d;
            assert_eq!(count_trainable(&cfg, &VariantSpec::shared(sv, sa)).unwrap(), expected);
            if l == 3 {
                let model = init_backbone(&cfg).unwrap();
                let adapter = AdapterState::init(&model, &VariantSpec::shared(sv, sa), 0).unwrap();
                assert_eq!(adapter.num_adapter_values(), expected);
            }
        }
        assert_eq!(count_trainable(&cfg, &VariantSpec::without_l_alpha()).unwrap(), l * 3 * d);
    }
}
