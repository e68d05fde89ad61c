//! Trainable per-task state: the shift vector `v`, the weight head `L_α`,
//! tuned second layer-norm affines, optional L0 gate logits, and the
//! classifier head. Bias-only and full fine-tuning baselines keep trainable
//! copies of the backbone tensors they tune, so the backbone itself is never
//! mutated.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_param_specs, BackboneConfig, BackboneModel, LayerParam, INIT_STD};
use crate::error::{Error, Result};
use crate::l0::L0Config;
use crate::numerics::{outer_product, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    FullFinetune,
    BitFit,
    AdapterBias,
}

/// Which parameters adapt to the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    /// `false` drops the weight head: every token receives the same shift.
    #[serde(default = "yes")]
    pub with_l_alpha: bool,
    #[serde(default)]
    pub share_v: bool,
    #[serde(default)]
    pub share_l_alpha: bool,
    #[serde(default)]
    pub l0: Option<L0Config>,
}

fn yes() -> bool {
    true
}

impl VariantSpec {
    pub fn adapter_bias() -> Self {
        Self {
            kind: VariantKind::AdapterBias,
            with_l_alpha: true,
            share_v: false,
            share_l_alpha: false,
            l0: None,
        }
    }

    pub fn without_l_alpha() -> Self {
        Self {
            with_l_alpha: false,
            ..Self::adapter_bias()
        }
    }

    pub fn shared(share_v: bool, share_l_alpha: bool) -> Self {
        Self {
            share_v,
            share_l_alpha,
            ..Self::adapter_bias()
        }
    }

    pub fn with_l0(l0: L0Config) -> Self {
        Self {
            l0: Some(l0),
            ..Self::adapter_bias()
        }
    }

    pub fn bitfit() -> Self {
        Self {
            kind: VariantKind::BitFit,
            ..Self::adapter_bias()
        }
    }

    pub fn full_finetune() -> Self {
        Self {
            kind: VariantKind::FullFinetune,
            ..Self::adapter_bias()
        }
    }

    /// Parses the short names used on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "adapterbias" => Self::adapter_bias(),
            "no-l-alpha" | "wo-l-alpha" => Self::without_l_alpha(),
            "share-v" => Self::shared(true, false),
            "share-l-alpha" => Self::shared(false, true),
            "share-both" => Self::shared(true, true),
            "adapterbias-l0" => Self::with_l0(L0Config::default()),
            "bitfit" => Self::bitfit(),
            "full" | "full-finetune" => Self::full_finetune(),
            other => {
                return Err(Error::InvalidVariant(format!(
                    "unknown variant `{other}` (adapterbias, no-l-alpha, share-v, share-l-alpha, share-both, \
                     adapterbias-l0, bitfit, full)"
                )))
            }
        })
    }

    pub fn is_adapter_bias(&self) -> bool {
        self.kind == VariantKind::AdapterBias
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_adapter_bias() {
            if !self.with_l_alpha || self.share_v || self.share_l_alpha || self.l0.is_some() {
                return Err(Error::InvalidVariant(format!(
                    "{:?} does not take AdapterBias options (with_l_alpha, sharing, l0)",
                    self.kind
                )));
            }
            return Ok(());
        }
        if !self.with_l_alpha && (self.share_l_alpha || self.l0.is_some()) {
            return Err(Error::InvalidVariant(
                "without a weight head there is nothing to share or sparsify".into(),
            ));
        }
        if let Some(l0) = &self.l0 {
            l0.validate()?;
        }
        Ok(())
    }
}

/// What a trainable tensor is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Counted in the per-task parameter census.
    Adapter,
    /// Classifier head; always trained, never counted.
    Head,
    /// L0 gate logits; training-time only.
    Gate,
}

/// Weight head `L_α`: `d_ff → 1` linear map per storage slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaHead {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// Layer → storage slot.
    pub map: Vec<usize>,
    /// Gate logits aligned with `weights`, when L0 is active.
    pub log_alpha: Option<Vec<Tensor>>,
}

/// AdapterBias tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftParams {
    pub v: Vec<Tensor>,
    /// Layer → storage slot of `v`.
    pub v_map: Vec<usize>,
    /// `None` in the ablation without a weight head.
    pub alpha: Option<AlphaHead>,
    pub ln2_gamma: Vec<Tensor>,
    pub ln2_beta: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    variant: VariantSpec,
    config: BackboneConfig,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub shift: Option<ShiftParams>,
    /// Trainable copies of backbone tensors (bias-only / full fine-tuning).
    pub overrides: BTreeMap<String, Tensor>,
}

fn trainable(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

impl AdapterState {
    /// Builds the variant's trainable state for `model`, copying the tuned
    /// backbone values so the adapted model starts at the frozen function.
    pub fn init(model: &BackboneModel, variant: &VariantSpec, seed: u64) -> Result<Self> {
        let mut state = Self::init_detached(model.config(), variant, seed)?;
        state.head_weight = trainable(model.head_weight().clone());
        state.head_bias = trainable(model.head_bias().clone());
        if let Some(shift) = &mut state.shift {
            for l in 0..model.config().num_layers {
                shift.ln2_gamma[l] = trainable(model.layer_param(l, LayerParam::Ln2Gamma).clone());
                shift.ln2_beta[l] = trainable(model.layer_param(l, LayerParam::Ln2Beta).clone());
            }
        }
        for (name, t) in state.overrides.iter_mut() {
            let source = model
                .get(name)
                .ok_or_else(|| Error::InvalidVariant(format!("backbone has no tensor `{name}`")))?;
            *t = trainable(source.clone());
        }
        Ok(state)
    }

    /// Builds the state from the configuration alone, assuming the backbone's
    /// initial layer-norm and bias values (ones / zeros). Matrices tuned by
    /// full fine-tuning and the classifier head start at zero.
    pub fn init_detached(cfg: &BackboneConfig, variant: &VariantSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let (d, f, layers) = (cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = if variant.is_adapter_bias() {
            let v_slots = if variant.share_v { 1 } else { layers };
            let alpha = variant.with_l_alpha.then(|| {
                let slots = if variant.share_l_alpha { 1 } else { layers };
                AlphaHead {
                    weights: (0..slots).map(|_| trainable(Tensor::randn(&[f], INIT_STD, &mut rng))).collect(),
                    biases: (0..slots).map(|_| trainable(Tensor::scalar(0.0))).collect(),
                    map: (0..layers).map(|l| if variant.share_l_alpha { 0 } else { l }).collect(),
                    log_alpha: variant
                        .l0
                        .map(|c| (0..slots).map(|_| trainable(Tensor::full(&[f], c.init_log_alpha))).collect()),
                }
            });
            Some(ShiftParams {
                v: (0..v_slots).map(|_| trainable(Tensor::zeros(&[d]))).collect(),
                v_map: (0..layers).map(|l| if variant.share_v { 0 } else { l }).collect(),
                alpha,
                ln2_gamma: (0..layers).map(|_| trainable(Tensor::ones(&[d]))).collect(),
                ln2_beta: (0..layers).map(|_| trainable(Tensor::zeros(&[d]))).collect(),
            })
        } else {
            None
        };
        let overrides = backbone_param_specs(cfg)
            .into_iter()
            .filter(|s| match variant.kind {
                VariantKind::FullFinetune => true,
                VariantKind::BitFit => s.kind.is_bias_term(),
                VariantKind::AdapterBias => false,
            })
            .map(|s| {
                let init = if s.kind == crate::backbone::ParamKind::LayerNormGain {
                    Tensor::ones(&s.shape)
                } else {
                    Tensor::zeros(&s.shape)
                };
                (s.name, trainable(init))
            })
            .collect();
        Ok(Self {
            variant: variant.clone(),
            config: cfg.clone(),
            head_weight: trainable(Tensor::zeros(&[d, cfg.num_classes])),
            head_bias: trainable(Tensor::zeros(&[cfg.num_classes])),
            shift,
            overrides,
        })
    }

    pub fn variant(&self) -> &VariantSpec {
        &self.variant
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// All trainable tensors with stable names, in a fixed order shared by
    /// [`AdapterState::tensors_mut`] and [`AdapterState::bind`].
    pub fn tensors(&self) -> Vec<(String, ParamRole, &Tensor)> {
        let mut out = vec![
            ("head.weight".to_string(), ParamRole::Head, &self.head_weight),
            ("head.bias".to_string(), ParamRole::Head, &self.head_bias),
        ];
        if let Some(s) = &self.shift {
            for (i, t) in s.v.iter().enumerate() {
                out.push((format!("adapter.v.{i}"), ParamRole::Adapter, t));
            }
            if let Some(a) = &s.alpha {
                for (i, (w, b)) in a.weights.iter().zip(&a.biases).enumerate() {
                    out.push((format!("adapter.l_alpha.{i}.weight"), ParamRole::Adapter, w));
                    out.push((format!("adapter.l_alpha.{i}.bias"), ParamRole::Adapter, b));
                }
                if let Some(gates) = &a.log_alpha {
                    for (i, g) in gates.iter().enumerate() {
                        out.push((format!("adapter.l_alpha.{i}.log_alpha"), ParamRole::Gate, g));
                    }
                }
            }
            for (l, (g, b)) in s.ln2_gamma.iter().zip(&s.ln2_beta).enumerate() {
                out.push((format!("adapter.layer.{l}.ln2.gamma"), ParamRole::Adapter, g));
                out.push((format!("adapter.layer.{l}.ln2.beta"), ParamRole::Adapter, b));
            }
        }
        for (name, t) in &self.overrides {
            out.push((name.clone(), ParamRole::Adapter, t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamRole, &mut Tensor)> {
        let mut out = vec![
            ("head.weight".to_string(), ParamRole::Head, &mut self.head_weight),
            ("head.bias".to_string(), ParamRole::Head, &mut self.head_bias),
        ];
        if let Some(s) = &mut self.shift {
            for (i, t) in s.v.iter_mut().enumerate() {
                out.push((format!("adapter.v.{i}"), ParamRole::Adapter, t));
            }
            if let Some(a) = &mut s.alpha {
                for (i, (w, b)) in a.weights.iter_mut().zip(a.biases.iter_mut()).enumerate() {
                    out.push((format!("adapter.l_alpha.{i}.weight"), ParamRole::Adapter, w));
                    out.push((format!("adapter.l_alpha.{i}.bias"), ParamRole::Adapter, b));
                }
                if let Some(gates) = &mut a.log_alpha {
                    for (i, g) in gates.iter_mut().enumerate() {
                        out.push((format!("adapter.l_alpha.{i}.log_alpha"), ParamRole::Gate, g));
                    }
                }
            }
            for (l, (g, b)) in s.ln2_gamma.iter_mut().zip(s.ln2_beta.iter_mut()).enumerate() {
                out.push((format!("adapter.layer.{l}.ln2.gamma"), ParamRole::Adapter, g));
                out.push((format!("adapter.layer.{l}.ln2.beta"), ParamRole::Adapter, b));
            }
        }
        for (name, t) in self.overrides.iter_mut() {
            out.push((name.clone(), ParamRole::Adapter, t));
        }
        out
    }

    /// Values counted by the parameter census.
    pub fn num_adapter_values(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, role, _)| *role == ParamRole::Adapter)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Records every trainable tensor on `tape`.
    pub fn bind<'t>(&'t self, tape: &mut Tape<'t>) -> AdapterVars {
        let all: Vec<Var> = self.tensors().into_iter().map(|(_, _, t)| tape.leaf(t)).collect();
        let mut cursor = 2;
        let mut take = |n: usize| {
            let s = all[cursor..cursor + n].to_vec();
            cursor += n;
            s
        };
        let shift = self.shift.as_ref().map(|s| {
            let v = take(s.v.len());
            let alpha = s.alpha.as_ref().map(|a| {
                let wb = take(2 * a.weights.len());
                let gates = a.log_alpha.as_ref().map(|g| take(g.len()));
                BoundAlpha {
                    weights: wb.iter().step_by(2).copied().collect(),
                    biases: wb.iter().skip(1).step_by(2).copied().collect(),
                    log_alpha: gates,
                    map: a.map.clone(),
                }
            });
            let ln = take(2 * s.ln2_gamma.len());
            BoundShift {
                v,
                v_map: s.v_map.clone(),
                alpha,
                ln2_gamma: ln.iter().step_by(2).copied().collect(),
                ln2_beta: ln.iter().skip(1).step_by(2).copied().collect(),
            }
        });
        let overrides = self.overrides.keys().cloned().zip(take(self.overrides.len())).collect();
        AdapterVars {
            head_weight: all[0],
            head_bias: all[1],
            shift,
            overrides,
            all,
        }
    }
}

pub struct BoundAlpha {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub log_alpha: Option<Vec<Var>>,
    pub map: Vec<usize>,
}

pub struct BoundShift {
    pub v: Vec<Var>,
    pub v_map: Vec<usize>,
    pub alpha: Option<BoundAlpha>,
    pub ln2_gamma: Vec<Var>,
    pub ln2_beta: Vec<Var>,
}

/// Tape handles for an [`AdapterState`]; `all` follows
/// [`AdapterState::tensors`] order.
pub struct AdapterVars {
    pub head_weight: Var,
    pub head_bias: Var,
    pub shift: Option<BoundShift>,
    pub overrides: BTreeMap<String, Var>,
    pub all: Vec<Var>,
}

/// `init_adapter` in free-function form.
pub fn init_adapter(model: &BackboneModel, variant: &VariantSpec, seed: u64) -> Result<AdapterState> {
    AdapterState::init(model, variant, seed)
}

/// Records `α = (intermediate · w + b) ∘ mask` on a tape.
pub fn alpha_on_tape(tape: &mut Tape<'_>, weight: Var, bias: Var, intermediate: Var, mask: Var) -> Result<Var> {
    let raw = tape.matvec(intermediate, weight)?;
    let shifted = tape.add_scalar(raw, bias)?;
    tape.mul(shifted, mask)
}

/// Per-token weights `α_i = a_i · w + b`, forced to zero at masked positions.
pub fn compute_alpha(weight: &Tensor, bias: &Tensor, intermediate: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let rows = intermediate.shape().first().copied().unwrap_or(0);
    if mask.len() != rows {
        return Err(Error::shape("compute_alpha", format!("mask of {} for {rows} tokens", mask.len())));
    }
    let mut tape = Tape::new();
    let (w, b, a) = (tape.leaf(weight), tape.leaf(bias), tape.leaf(intermediate));
    let m = tape.constant(&[rows], mask.to_vec())?;
    let alpha = alpha_on_tape(&mut tape, w, b, a, m)?;
    Ok(tape.to_tensor(alpha))
}

/// `B = v ⊗ αᵀ`, shape `[d × m]`; column `i` is token `i`'s shift.
pub fn compute_bias(v: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    outer_product(v, alpha)
}

/// Per-task trainable parameter count, classifier head excluded.
pub fn count_trainable(cfg: &BackboneConfig, variant: &VariantSpec) -> Result<usize> {
    variant.validate()?;
    let (d, f, layers) = (cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers);
    Ok(match variant.kind {
        VariantKind::AdapterBias => {
            let v = if variant.share_v { d } else { layers * d };
            let head = match (variant.with_l_alpha, variant.share_l_alpha) {
                (false, _) => 0,
                (true, true) => f + 1,
                (true, false) => layers * (f + 1),
            };
            v + head + layers * 2 * d
        }
        VariantKind::BitFit => backbone_param_specs(cfg)
            .iter()
            .filter(|s| s.kind.is_bias_term())
            .map(|s| s.numel())
            .sum(),
        VariantKind::FullFinetune => backbone_param_specs(cfg).iter().map(|s| s.numel()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig::tiny(3, 8, 12, 2, 20)
    }

    #[test]
    fn census_reproduces_reported_counts() {
        let base = BackboneConfig::bert_base_shape();
        let large = BackboneConfig::bert_large_shape();
        assert_eq!(count_trainable(&base, &VariantSpec::adapter_bias()).unwrap(), 64_524);
        assert_eq!(count_trainable(&base, &VariantSpec::without_l_alpha()).unwrap(), 27_648);
        assert_eq!(count_trainable(&base, &VariantSpec::shared(true, false)).unwrap(), 56_076);
        assert_eq!(count_trainable(&base, &VariantSpec::shared(false, true)).unwrap(), 30_721);
        assert_eq!(count_trainable(&base, &VariantSpec::shared(true, true)).unwrap(), 22_273);
        assert_eq!(count_trainable(&large, &VariantSpec::adapter_bias()).unwrap(), 172_056);
    }

    #[test]
    fn census_matches_enumerated_tensors() {
        let cfg = tiny();
        for variant in [
            VariantSpec::adapter_bias(),
            VariantSpec::without_l_alpha(),
            VariantSpec::shared(true, false),
            VariantSpec::shared(false, true),
            VariantSpec::shared(true, true),
            VariantSpec::with_l0(L0Config::default()),
            VariantSpec::bitfit(),
            VariantSpec::full_finetune(),
        ] {
            let state = AdapterState::init_detached(&cfg, &variant, 1).unwrap();
            assert_eq!(
                state.num_adapter_values(),
                count_trainable(&cfg, &variant).unwrap(),
                "{variant:?}"
            );
        }
    }

    #[test]
    fn inconsistent_variants_rejected() {
        let bad = VariantSpec {
            share_l_alpha: true,
            ..VariantSpec::without_l_alpha()
        };
        assert!(bad.validate().is_err());
        let bad = VariantSpec {
            share_v: true,
            ..VariantSpec::bitfit()
        };
        assert!(bad.validate().is_err());
        assert!(VariantSpec::from_name("lora").is_err());
    }

    #[test]
    fn shared_storage_has_single_slot() {
        let s = AdapterState::init_detached(&tiny(), &VariantSpec::shared(true, true), 0).unwrap();
        let shift = s.shift.as_ref().unwrap();
        assert_eq!(shift.v.len(), 1);
        assert_eq!(shift.v_map, vec![0, 0, 0]);
        assert_eq!(shift.alpha.as_ref().unwrap().weights.len(), 1);
    }

    #[test]
    fn init_is_deterministic_and_starts_at_zero_shift() {
        let a = AdapterState::init_detached(&tiny(), &VariantSpec::adapter_bias(), 5).unwrap();
        let b = AdapterState::init_detached(&tiny(), &VariantSpec::adapter_bias(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.shift.as_ref().unwrap().v.iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
        let c = AdapterState::init_detached(&tiny(), &VariantSpec::adapter_bias(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn alpha_constant_head() {
        let w = Tensor::zeros(&[4]);
        let b = Tensor::scalar(0.7);
        let a = Tensor::matrix(3, 4, (0..12).map(|i| i as f64).collect()).unwrap();
        let alpha = compute_alpha(&w, &b, &a, &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(alpha.data(), &[0.7, 0.7, 0.0]);
    }

    #[test]
    fn alpha_matches_dot_products() {
        let w = Tensor::vector(vec![0.3, -1.2, 0.5]).unwrap();
        let b = Tensor::scalar(-0.25);
        let a = Tensor::matrix(3, 3, vec![1.0, 2.0, 3.0, -0.5, 0.0, 4.0, 1.0, 2.0, 3.0]).unwrap();
        let alpha = compute_alpha(&w, &b, &a, &[1.0; 3]).unwrap();
        for i in 0..3 {
            let oracle: f64 = (0..3).map(|j| a.at2(i, j) * w.data()[j]).sum::<f64>() - 0.25;
            assert!((alpha.data()[i] - oracle).abs() < 1e-12);
        }
        assert_eq!(alpha.data()[0], alpha.data()[2]);
        assert!(compute_alpha(&w, &b, &a, &[1.0; 2]).is_err());
    }
}
