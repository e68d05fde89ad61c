//! Trains a small adapter and writes the alpha statistics, token table and
//! shift PCA.
//!
//! cargo run --release --example analysis [out_dir]

use adapterbias_lab::adapter::{AdapterState, VariantSpec};
use adapterbias_lab::analysis::{analyze, write_report};
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::data::{generate_keyword_sentiment, TaskSpec, Vocab};
use adapterbias_lab::training::{train, Hyperparams};

fn main() -> adapterbias_lab::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("analysis").display().to_string());
    let spec = TaskSpec { train_size: 800, ..TaskSpec::default() };
    let (train_set, dev) = generate_keyword_sentiment(&spec)?;
    let vocab = Vocab::build(train_set.texts().chain(dev.texts()));
    let model = init_backbone(&BackboneConfig::tiny(4, 32, 64, 2, vocab.len()))?;
    let hyper = Hyperparams::default();
    let adapter = AdapterState::init(&model, &VariantSpec::adapter_bias(), 0)?;
    let trained = train(&model, adapter, &vocab, &train_set, &dev, &hyper)?.adapter;

    let report = analyze(&model, &trained, &vocab, &dev, 50, hyper.batch_size, hyper.max_len)?;
    println!("mean |alpha| per layer: {:.3?}", report.per_layer_mean_abs_alpha);
    println!("keywords: {:?}", spec.all_keywords());
    for row in report.token_weight_table.iter().take(10) {
        println!("  {:<8} mean {:>7.3} over {}", row.token, row.mean(), row.count);
    }
    println!("PCA explained variance {:.3?}", report.pca_explained_variance);
    write_report(&report, std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
