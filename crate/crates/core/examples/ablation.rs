//! Token-dependent vs token-independent shifts on the keyword task.
//!
//! cargo run --release --example ablation [seeds]

use adapterbias_lab::adapter::VariantSpec;
use adapterbias_lab::backbone::{init_backbone, BackboneConfig};
use adapterbias_lab::data::{generate_keyword_sentiment, TaskSpec, Vocab};
use adapterbias_lab::training::{run_seeds, Hyperparams};

fn main() -> adapterbias_lab::Result<()> {
    let n_seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = TaskSpec::default();
    let (train, dev) = generate_keyword_sentiment(&spec)?;
    let vocab = Vocab::build(train.texts().chain(dev.texts()));
    let cfg = BackboneConfig::tiny(4, 32, 64, 2, vocab.len());
    let model = init_backbone(&cfg)?;
    let hyper = Hyperparams::default();
    let seeds: Vec<u64> = (0..n_seeds).collect();

    for (name, variant) in [
        ("adapterbias", VariantSpec::adapter_bias()),
        ("w/o L_alpha", VariantSpec::without_l_alpha()),
    ] {
        let (report, _) = run_seeds(&model, &variant, &vocab, &train, &dev, &hyper, &seeds, 1)?;
        for run in &report.runs {
            let accs: Vec<String> = run.summary.history.iter().map(|e| format!("{:.3}", e.dev.accuracy)).collect();
            println!(
                "{name:>12} seed {}: best {:.3} ({:.1}s) [{}]",
                run.seed,
                run.summary.best_dev.accuracy,
                run.summary.wall_clock_seconds,
                accs.join(" ")
            );
        }
        println!("{name:>12} mean dev accuracy {:.4}", report.mean_dev_accuracy);
    }
    Ok(())
}
