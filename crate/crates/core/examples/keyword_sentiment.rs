//! Trains AdapterBias on the synthetic keyword task, saves a checkpoint and
//! reloads it.
//!
//! cargo run --release --example keyword_sentiment [out.ckpt]

use adapterbias_lab::adapter::AdapterState;
use adapterbias_lab::adapter::VariantSpec;
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::checkpoint::{load_checkpoint, save_checkpoint};
use adapterbias_lab::data::{generate_keyword_sentiment, TaskSpec, Vocab};
use adapterbias_lab::training::{evaluate, train, Hyperparams};

fn main() -> adapterbias_lab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("keyword.ckpt").display().to_string());
    let (train_set, dev) = generate_keyword_sentiment(&TaskSpec::default())?;
    let vocab = Vocab::build(train_set.texts().chain(dev.texts()));
    let model = init_backbone(&BackboneConfig::tiny(4, 32, 64, 2, vocab.len()))?;
    let hyper = Hyperparams::default();
    let adapter = AdapterState::init(&model, &VariantSpec::adapter_bias(), 0)?;

    let outcome = train(&model, adapter, &vocab, &train_set, &dev, &hyper)?;
    for rec in &outcome.summary.history {
        println!("epoch {:>2}  train loss {:.4}  dev acc {:.3}", rec.epoch, rec.train_loss, rec.dev.accuracy);
    }
    println!(
        "best epoch {} dev acc {:.3}, {} trainable values",
        outcome.summary.best_epoch, outcome.summary.best_dev.accuracy, outcome.summary.trainable_parameters
    );

    let path = std::path::Path::new(&out);
    save_checkpoint(&model, &outcome.adapter, path)?;
    let (model2, adapter2) = load_checkpoint(path)?;
    let again = evaluate(&model2, &adapter2, &vocab, &dev, hyper.batch_size, hyper.max_len)?;
    println!("reloaded {}: dev acc {:.3}", path.display(), again.accuracy);
    Ok(())
}
