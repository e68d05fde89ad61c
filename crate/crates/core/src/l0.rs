//! Stretched Hard-Concrete gates for an L0 penalty on the weight head.
//!
//! A gate is `clamp(s̄, 0, 1)` where `s̄ = s·(ζ − γ) + γ` and `s` is a
//! (noisy, during training) sigmoid of the gate logit. Stretching past
//! `[0, 1]` before clamping gives exact zeros and ones positive probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L0Config {
    /// Penalty weight on the expected number of open gates.
    pub lambda: f64,
    /// Temperature of the concrete relaxation.
    pub beta: f64,
    /// Lower stretch bound, `< 0`.
    pub gamma: f64,
    /// Upper stretch bound, `> 1`.
    pub zeta: f64,
    pub init_log_alpha: f64,
    /// Deterministic gates above this value count as remaining.
    pub threshold: f64,
}

impl Default for L0Config {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
            init_log_alpha: 0.0,
            threshold: 0.05,
        }
    }
}

impl L0Config {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.gamma < 0.0
            && self.zeta > 1.0
            && self.beta > 0.0
            && self.beta < 1.0
            && self.threshold > 0.0
            && self.threshold < 1.0
            && self.init_log_alpha.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidVariant(format!(
                "L0 config needs lambda >= 0, gamma < 0 < 1 < zeta, 0 < beta < 1, threshold in (0,1): {self:?}"
            )))
        }
    }

    /// `β·ln(−γ/ζ)`, the logit offset of the probability that a gate is nonzero.
    fn open_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }
}

/// Samples one gate from uniform noise `u ∈ (0, 1)`.
pub fn sample_gate(log_alpha: f64, u: f64, cfg: &L0Config) -> Result<f64> {
    Ok(sample_gate_with_grad(log_alpha, u, cfg)?.0)
}

/// Gate sample and its derivative w.r.t. `log_alpha` (zero where clamped).
pub fn sample_gate_with_grad(log_alpha: f64, u: f64, cfg: &L0Config) -> Result<(f64, f64)> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!("gate noise u = {u} must lie in (0, 1)")));
    }
    let s = sigmoid((u.ln() - (-u).ln_1p() + log_alpha) / cfg.beta);
    Ok(stretch_and_clamp(s, s * (1.0 - s) / cfg.beta, cfg))
}

fn stretch_and_clamp(s: f64, ds: f64, cfg: &L0Config) -> (f64, f64) {
    let stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma;
    if stretched <= 0.0 {
        (0.0, 0.0)
    } else if stretched >= 1.0 {
        (1.0, 0.0)
    } else {
        (stretched, ds * (cfg.zeta - cfg.gamma))
    }
}

/// Probability that a gate is nonzero: `σ(log_alpha − β·ln(−γ/ζ))`.
pub fn open_probability(log_alpha: f64, cfg: &L0Config) -> f64 {
    sigmoid(log_alpha - cfg.open_shift())
}

/// Expected number of nonzero gates, the differentiable L0 surrogate.
pub fn expected_l0(log_alpha: &[f64], cfg: &L0Config) -> f64 {
    log_alpha.iter().map(|&a| open_probability(a, cfg)).sum()
}

/// Noise-free gate used at evaluation: `clamp(σ(log_alpha)·(ζ−γ)+γ, 0, 1)`.
pub fn deterministic_gate(log_alpha: f64, cfg: &L0Config) -> f64 {
    stretch_and_clamp(sigmoid(log_alpha), 0.0, cfg).0
}

/// Fraction of gates strictly above `threshold`.
pub fn remaining_fraction(gates: &[f64], threshold: f64) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::InvalidArgument("remaining_fraction of an empty gate set".into()));
    }
    Ok(gates.iter().filter(|&&g| g > threshold).count() as f64 / gates.len() as f64)
}

/// Records sampled gates for the logits in `log_alpha` using one noise value
/// per entry.
pub fn sample_gates_on_tape(tape: &mut Tape<'_>, log_alpha: Var, noise: &[f64], cfg: &L0Config) -> Result<Var> {
    if noise.len() != tape.value(log_alpha).len() {
        return Err(Error::shape(
            "sample_gate",
            format!("{} noise values for {} gates", noise.len(), tape.value(log_alpha).len()),
        ));
    }
    if let Some(u) = noise.iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::InvalidArgument(format!("gate noise u = {u} must lie in (0, 1)")));
    }
    tape.unary_indexed("sample_gate", log_alpha, |i, a| {
        sample_gate_with_grad(a, noise[i], cfg).expect("noise validated above")
    })
}

/// Records the deterministic gates (no gradient flows through them).
pub fn deterministic_gates_on_tape(tape: &mut Tape<'_>, log_alpha: Var, cfg: &L0Config) -> Result<Var> {
    tape.unary("deterministic_gate", log_alpha, |a| (deterministic_gate(a, cfg), 0.0))
}

/// Records `Σ P(gate > 0)` as a scalar.
pub fn expected_l0_on_tape(tape: &mut Tape<'_>, log_alpha: Var, cfg: &L0Config) -> Result<Var> {
    let shift = cfg.open_shift();
    let probs = tape.unary("expected_l0", log_alpha, |a| {
        let p = sigmoid(a - shift);
        (p, p * (1.0 - p))
    })?;
    tape.sum(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};

    fn canonical() -> L0Config {
        L0Config::default()
    }

    #[test]
    fn neutral_sample_is_one_half() {
        let g = sample_gate(0.0, 0.5, &canonical()).unwrap();
        assert!((g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_saturates() {
        let cfg = canonical();
        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(sample_gate(60.0, u, &cfg).unwrap(), 1.0);
            assert_eq!(sample_gate(-60.0, u, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn sample_rejects_boundary_noise() {
        assert!(sample_gate(0.0, 0.0, &canonical()).is_err());
        assert!(sample_gate(0.0, 1.0, &canonical()).is_err());
    }

    #[test]
    fn open_probability_at_neutral_logit() {
        // σ((2/3)·ln 11) with (β, γ, ζ) = (2/3, −0.1, 1.1)
        let p = open_probability(0.0, &canonical());
        assert!((p - 0.831_822_183_991_690_5).abs() < 1e-12, "{p}");
        assert!(open_probability(-50.0, &canonical()) < 1e-15);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let cfg = canonical();
        let theta = Tensor::vector(vec![-1.3, 0.0, 0.4, 2.2, -0.05]).unwrap();
        let err = finite_diff_check(
            |t| {
                let mut tape = Tape::new();
                let x = tape.input(&[t.numel()], t.data().to_vec(), true)?;
                let loss = expected_l0_on_tape(&mut tape, x, &cfg)?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar(loss)?, grads.get(x).unwrap().to_vec()))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deterministic_gate_values() {
        let cfg = canonical();
        assert!((deterministic_gate(0.0, &cfg) - 0.5).abs() < 1e-15);
        assert_eq!(deterministic_gate(10.0, &cfg), 1.0);
        // closes where σ(x)·1.2 − 0.1 = 0, i.e. x = −ln 11
        assert!(deterministic_gate(-(11.0_f64).ln(), &cfg) < 1e-15);
        assert_eq!(deterministic_gate(-(11.0_f64).ln() - 1e-9, &cfg), 0.0);
    }

    #[test]
    fn remaining_fraction_counts() {
        assert_eq!(remaining_fraction(&[1.0; 4], 0.05).unwrap(), 1.0);
        assert_eq!(remaining_fraction(&[0.0; 4], 0.05).unwrap(), 0.0);
        assert!((remaining_fraction(&[0.0, 0.5, 1.0], 0.05).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(remaining_fraction(&[], 0.05).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(canonical().validate().is_ok());
        let bad = L0Config {
            gamma: 0.1,
            ..canonical()
        };
        assert!(bad.validate().is_err());
        let bad = L0Config {
            beta: 1.5,
            ..canonical()
        };
        assert!(bad.validate().is_err());
    }
}
