//! Cross-layer sharing of v and L_alpha: parameter count against accuracy.
//!
//! cargo run --release --example sharing

use adapterbias_lab::adapter::{count_trainable, AdapterState, VariantSpec};
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::data::{generate_keyword_sentiment, TaskSpec, Vocab};
use adapterbias_lab::training::{train, Hyperparams};

fn main() -> adapterbias_lab::Result<()> {
    let (train_set, dev) = generate_keyword_sentiment(&TaskSpec::default())?;
    let vocab = Vocab::build(train_set.texts().chain(dev.texts()));
    let cfg = BackboneConfig::tiny(4, 32, 64, 2, vocab.len());
    let model = init_backbone(&cfg)?;
    let hyper = Hyperparams::default();
    for (share_v, share_l) in [(false, false), (true, false), (false, true), (true, true)] {
        let variant = VariantSpec::shared(share_v, share_l);
        let adapter = AdapterState::init(&model, &variant, 0)?;
        let outcome = train(&model, adapter, &vocab, &train_set, &dev, &hyper)?;
        println!(
            "share v {share_v:<5} share L_alpha {share_l:<5} params {:>5}  dev acc {:.3}",
            count_trainable(&cfg, &variant)?,
            outcome.summary.best_dev.accuracy
        );
    }
    Ok(())
}
