//! Writes the reflexive-agreement task to TSV, loads it back through a
//! schema and trains on it.
//!
//! cargo run --release --example tsv_task

use adapterbias_lab::adapter::{AdapterState, VariantSpec};
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::data::{generate_reflexive_agreement, load_tsv, write_tsv, Column, TaskSpec, TsvSchema, Vocab};
use adapterbias_lab::training::{train, Hyperparams};

fn main() -> adapterbias_lab::Result<()> {
    let dir = std::env::temp_dir().join("reflexive");
    std::fs::create_dir_all(&dir).map_err(|e| adapterbias_lab::Error::io(&dir, e))?;
    let (train_set, dev) = generate_reflexive_agreement(&TaskSpec::default())?;
    write_tsv(&train_set, &dir.join("train.tsv"))?;
    write_tsv(&dev, &dir.join("dev.tsv"))?;

    let schema = TsvSchema::single(Column::Name("sentence".into()), Column::Name("label".into()), true);
    let train_load = load_tsv(&dir.join("train.tsv"), &schema, None)?;
    let dev_load = load_tsv(&dir.join("dev.tsv"), &schema, Some(&train_load.dataset.label_names))?;
    println!(
        "loaded {} train / {} dev rows, {} diagnostics",
        train_load.dataset.len(),
        dev_load.dataset.len(),
        train_load.diagnostics.len() + dev_load.diagnostics.len()
    );

    let vocab = Vocab::build(train_load.dataset.texts().chain(dev_load.dataset.texts()));
    let model = init_backbone(&BackboneConfig::tiny(4, 32, 64, 2, vocab.len()))?;
    let adapter = AdapterState::init(&model, &VariantSpec::adapter_bias(), 0)?;
    let outcome = train(&model, adapter, &vocab, &train_load.dataset, &dev_load.dataset, &Hyperparams::default())?;
    println!("dev acc {:.3}, mcc {:.3}", outcome.summary.best_dev.accuracy, outcome.summary.best_dev.matthews_corr);
    Ok(())
}
