//! Hard-Concrete gates: closed forms, sampled gate statistics, and a gated
//! training run with its remaining fraction.
//!
//! cargo run --release --example l0_gates [lambda]

use adapterbias_lab::adapter::{AdapterState, VariantSpec};
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::data::{generate_keyword_sentiment, TaskSpec, Vocab};
use adapterbias_lab::l0::{deterministic_gate, open_probability, sample_gate, L0Config};
use adapterbias_lab::training::{train, Hyperparams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adapterbias_lab::Result<()> {
    let lambda: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let cfg = L0Config { lambda, ..L0Config::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for la in [-3.0, 0.0, 3.0] {
        let n = 50_000;
        let (mut closed, mut sum) = (0usize, 0.0);
        for _ in 0..n {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let g = sample_gate(la, u, &cfg)?;
            closed += usize::from(g == 0.0);
            sum += g;
        }
        println!(
            "log_alpha {la:>4}: P(open) {:.4}  sampled P(closed) {:.4}  mean gate {:.4}  deterministic {:.4}",
            open_probability(la, &cfg),
            closed as f64 / n as f64,
            sum / n as f64,
            deterministic_gate(la, &cfg)
        );
    }

    let (train_set, dev) = generate_keyword_sentiment(&TaskSpec::default())?;
    let vocab = Vocab::build(train_set.texts().chain(dev.texts()));
    let model = init_backbone(&BackboneConfig::tiny(4, 32, 64, 2, vocab.len()))?;
    let adapter = AdapterState::init(&model, &VariantSpec::with_l0(cfg), 0)?;
    let outcome = train(&model, adapter, &vocab, &train_set, &dev, &Hyperparams::default())?;
    let l0 = outcome.summary.l0.expect("gated variant");
    println!(
        "lambda {lambda}: dev acc {:.3}, remaining {:.3} per layer {:?}",
        outcome.summary.best_dev.accuracy, l0.remaining_fraction, l0.remaining_fraction_per_layer
    );
    Ok(())
}
