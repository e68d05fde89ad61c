//! Trainable-parameter counts for every variant on the BERT-shaped presets.
//!
//! cargo run --example census

use adapterbias_lab::adapter::{count_trainable, VariantSpec};
use adapterbias_lab::backbone::BackboneConfig;

fn main() -> adapterbias_lab::Result<()> {
    for (preset, cfg) in [
        ("bert-base-shape", BackboneConfig::bert_base_shape()),
        ("bert-large-shape", BackboneConfig::bert_large_shape()),
    ] {
        println!("{preset}: L={} d={} d_ff={}", cfg.num_layers, cfg.hidden_dim, cfg.ffn_dim);
        for name in ["adapterbias", "no-l-alpha", "share-v", "share-l-alpha", "share-both", "adapterbias-l0"] {
            let n = count_trainable(&cfg, &VariantSpec::from_name(name)?)?;
            println!("  {name:<15} {n:>8}");
        }
    }
    Ok(())
}
