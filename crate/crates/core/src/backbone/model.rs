use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Matrix,
    Bias,
    LayerNormGain,
    LayerNormShift,
}

impl ParamKind {
    /// Additive terms tuned by bias-only fine-tuning.
    pub fn is_bias_term(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::LayerNormShift)
    }
}

/// Per-layer tensors, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum LayerParam {
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    OutputWeight,
    OutputBias,
    Ln1Gamma,
    Ln1Beta,
    FfnInWeight,
    FfnInBias,
    FfnOutWeight,
    FfnOutBias,
    Ln2Gamma,
    Ln2Beta,
}

const LAYER_PARAMS: [(LayerParam, &str, ParamKind); 16] = [
    (LayerParam::QueryWeight, "attn.query.weight", ParamKind::Matrix),
    (LayerParam::QueryBias, "attn.query.bias", ParamKind::Bias),
    (LayerParam::KeyWeight, "attn.key.weight", ParamKind::Matrix),
    (LayerParam::KeyBias, "attn.key.bias", ParamKind::Bias),
    (LayerParam::ValueWeight, "attn.value.weight", ParamKind::Matrix),
    (LayerParam::ValueBias, "attn.value.bias", ParamKind::Bias),
    (LayerParam::OutputWeight, "attn.output.weight", ParamKind::Matrix),
    (LayerParam::OutputBias, "attn.output.bias", ParamKind::Bias),
    (LayerParam::Ln1Gamma, "ln1.gamma", ParamKind::LayerNormGain),
    (LayerParam::Ln1Beta, "ln1.beta", ParamKind::LayerNormShift),
    (LayerParam::FfnInWeight, "ffn.in.weight", ParamKind::Matrix),
    (LayerParam::FfnInBias, "ffn.in.bias", ParamKind::Bias),
    (LayerParam::FfnOutWeight, "ffn.out.weight", ParamKind::Matrix),
    (LayerParam::FfnOutBias, "ffn.out.bias", ParamKind::Bias),
    (LayerParam::Ln2Gamma, "ln2.gamma", ParamKind::LayerNormGain),
    (LayerParam::Ln2Beta, "ln2.beta", ParamKind::LayerNormShift),
];

const EMBEDDINGS: usize = 2;
const PER_LAYER: usize = LAYER_PARAMS.len();

/// Name, shape, and kind of one backbone tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn layer_shape(p: LayerParam, cfg: &BackboneConfig) -> Vec<usize> {
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    match p {
        LayerParam::QueryWeight | LayerParam::KeyWeight | LayerParam::ValueWeight | LayerParam::OutputWeight => {
            vec![d, d]
        }
        LayerParam::FfnInWeight => vec![d, f],
        LayerParam::FfnOutWeight => vec![f, d],
        LayerParam::FfnInBias => vec![f],
        _ => vec![d],
    }
}

pub fn layer_param_name(layer: usize, p: LayerParam) -> String {
    format!("layer.{layer}.{}", LAYER_PARAMS[p as usize].1)
}

/// Every tensor of the frozen encoder (classifier head excluded), in storage
/// order. Does not allocate the tensors.
pub fn backbone_param_specs(cfg: &BackboneConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let mut specs = vec![
        ParamSpec {
            name: "embeddings.token".into(),
            shape: vec![cfg.vocab_size, d],
            kind: ParamKind::Matrix,
        },
        ParamSpec {
            name: "embeddings.position".into(),
            shape: vec![cfg.max_len, d],
            kind: ParamKind::Matrix,
        },
    ];
    for l in 0..cfg.num_layers {
        for (p, _, kind) in LAYER_PARAMS {
            specs.push(ParamSpec {
                name: layer_param_name(l, p),
                shape: layer_shape(p, cfg),
                kind,
            });
        }
    }
    specs
}

/// Frozen encoder weights plus the initial classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Deterministic initialization: `N(0, init_std²)` matrices, zero biases,
/// unit gains. Every tensor is frozen.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<BackboneModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = backbone_param_specs(cfg);
    let params = specs
        .iter()
        .map(|s| match s.kind {
            ParamKind::Matrix => Tensor::randn(&s.shape, cfg.init_std, &mut rng),
            ParamKind::Bias | ParamKind::LayerNormShift => Tensor::zeros(&s.shape),
            ParamKind::LayerNormGain => Tensor::ones(&s.shape),
        })
        .collect();
    let head_weight = Tensor::randn(&[cfg.hidden_dim, cfg.num_classes], INIT_STD, &mut rng);
    let head_bias = Tensor::zeros(&[cfg.num_classes]);
    let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
    Ok(BackboneModel {
        config: cfg.clone(),
        specs,
        params,
        index,
        head_weight,
        head_bias,
    })
}

impl BackboneModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn token_embedding_index(&self) -> usize {
        0
    }

    pub fn position_embedding_index(&self) -> usize {
        1
    }

    pub fn layer_index(&self, layer: usize, p: LayerParam) -> usize {
        EMBEDDINGS + layer * PER_LAYER + p as usize
    }

    pub fn layer_param(&self, layer: usize, p: LayerParam) -> &Tensor {
        &self.params[self.layer_index(layer, p)]
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// 64-bit digest of every frozen encoder tensor (names, shapes, values).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            hash_tensor(&mut h, name, t);
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    /// Per-tensor SHA-256 hex digests, used to prove nothing was mutated.
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.named_tensors()
            .map(|(name, t)| (name.to_string(), tensor_checksum(name, t)))
            .collect()
    }

    /// Fails with [`Error::FrozenMutation`] naming the first differing tensor.
    pub fn verify_checksums(&self, expected: &[(String, String)]) -> Result<()> {
        let now = self.checksums();
        if now.len() != expected.len() {
            return Err(Error::FrozenMutation("<tensor set>".into()));
        }
        for ((name, a), (_, b)) in now.iter().zip(expected) {
            if a != b {
                return Err(Error::FrozenMutation(name.clone()));
            }
        }
        Ok(())
    }
}

fn hash_tensor(h: &mut Sha256, name: &str, t: &Tensor) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        h.update((e as u64).to_le_bytes());
    }
    for x in t.data() {
        h.update(x.to_le_bytes());
    }
}

pub fn tensor_checksum(name: &str, t: &Tensor) -> String {
    let mut h = Sha256::new();
    hash_tensor(&mut h, name, t);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
