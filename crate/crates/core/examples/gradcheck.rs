//! Finite-difference check of the analytic adapter gradient.
//!
//! cargo run --example gradcheck [seed]

use adapterbias_lab::training::{adapter_gradient_check, seeded_gradcheck_problem};

fn main() -> adapterbias_lab::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (model, adapter, batch) = seeded_gradcheck_problem(seed)?;
    for eps in [1e-4, 1e-5, 1e-6, 1e-7] {
        let err = adapter_gradient_check(&model, &adapter, &batch, eps)?;
        println!("eps {eps:e}: max relative error {err:.3e}");
    }
    Ok(())
}
