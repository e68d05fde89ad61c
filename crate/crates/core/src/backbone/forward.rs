//! Encoder forward pass with the representation-shift injection point.
//!
//! Per layer, with `x` the layer input:
//!
//! ```text
//! h   = LN1(x + Attn(x))
//! a   = GELU(h·W1 + b1)
//! f   = a·W2 + b2
//! α   = (a·w_α + b_α) ∘ mask
//! out = LN2(h + f + α ⊗ v)
//! ```

use crate::adapter::{alpha_on_tape, AdapterState, AdapterVars};
use crate::backbone::{BackboneModel, LayerParam};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::l0;
use crate::numerics::{outer_product, AttnDims, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Intermediate values of one layer for one example, restricted to its
/// unpadded tokens (`m` rows).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Attention probabilities, `[heads·m × seq_len]` (padded keys included).
    pub attention: Tensor,
    /// Post-LN1 hidden state `h`, `[m × d]`.
    pub hidden: Tensor,
    /// Post-GELU FFN activation `a`, `[m × d_ff]`.
    pub intermediate: Tensor,
    /// FFN output `f`, `[m × d]`.
    pub ffn_out: Tensor,
    /// Per-token weights, `[m]`; all zeros when the variant has no shift.
    pub alpha: Tensor,
    /// `B = v ⊗ αᵀ`, `[d × m]`.
    pub bias: Tensor,
    /// `h + f + Bᵀ`, `[m × d]`.
    pub pre_ln2: Tensor,
    /// Layer output, `[m × d]`.
    pub output: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleTrace {
    pub layers: Vec<LayerTrace>,
}

/// How L0 gates enter the weight head.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'n> {
    /// Noise-free gates (evaluation).
    Deterministic,
    /// Stochastic gates from uniform noise, one vector per weight-head slot.
    Sampled(&'n [Vec<f64>]),
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub traces: Option<Vec<ExampleTrace>>,
}

pub(crate) struct Graph {
    pub logits: Var,
    pub adapter: Option<AdapterVars>,
    /// `Σ P(gate > 0)` over all gates when L0 is active.
    pub l0_penalty: Option<Var>,
    pub traces: Option<Vec<ExampleTrace>>,
}

struct LayerVars {
    attention: Var,
    hidden: Var,
    intermediate: Var,
    ffn_out: Var,
    alpha: Option<Var>,
    v: Option<Var>,
    pre_ln2: Var,
    output: Var,
}

fn validate_batch(model: &BackboneModel, batch: &Batch) -> Result<()> {
    let cfg = model.config();
    if batch.seq_len > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: batch.seq_len,
            max_len: cfg.max_len,
        });
    }
    if let Some(&id) = batch.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.token_ids.len() != n || batch.mask.len() != n || batch.labels.len() != batch.batch_size {
        return Err(Error::shape("forward", "batch arrays disagree with batch_size × seq_len"));
    }
    if (0..batch.batch_size).any(|b| batch.mask[b * batch.seq_len] == 0) {
        return Err(Error::Data("every sequence needs an unmasked first token".into()));
    }
    Ok(())
}

/// Records the forward pass. With `adapter = None` the frozen backbone runs
/// with its own head and no shift.
pub(crate) fn build_graph<'t>(
    tape: &mut Tape<'t>,
    model: &'t BackboneModel,
    adapter: Option<&'t AdapterState>,
    batch: &Batch,
    gates: GateMode<'_>,
    trace: bool,
) -> Result<Graph> {
    validate_batch(model, batch)?;
    let cfg = model.config();
    let (bsz, seq, d) = (batch.batch_size, batch.seq_len, cfg.hidden_dim);
    let n = bsz * seq;
    let dims = AttnDims {
        batch: bsz,
        seq,
        heads: cfg.num_heads,
        head_dim: cfg.head_dim(),
    };

    let bound = adapter.map(|a| a.bind(tape));
    let mut leaf_cache: Vec<Option<Var>> = vec![None; model.params().len()];
    let mut param = |tape: &mut Tape<'t>, idx: usize| -> Var {
        if let Some(v) = leaf_cache[idx] {
            return v;
        }
        let name = &model.specs()[idx].name;
        let v = bound
            .as_ref()
            .and_then(|b| b.overrides.get(name).copied())
            .unwrap_or_else(|| tape.leaf(model.param(idx)));
        leaf_cache[idx] = Some(v);
        v
    };

    // effective weight-head vectors (gated when L0 is active) and the penalty
    let mut l0_penalty = None;
    let mut alpha_weights: Vec<Var> = Vec::new();
    if let (Some(state), Some(shift)) = (adapter, bound.as_ref().and_then(|b| b.shift.as_ref())) {
        if let Some(alpha) = &shift.alpha {
            match (&alpha.log_alpha, state.variant().l0) {
                (Some(logits), Some(l0cfg)) => {
                    let mut terms = Vec::with_capacity(logits.len());
                    for (slot, (&w, &la)) in alpha.weights.iter().zip(logits).enumerate() {
                        let gate = match gates {
                            GateMode::Deterministic => l0::deterministic_gates_on_tape(tape, la, &l0cfg)?,
                            GateMode::Sampled(noise) => {
                                let u = noise.get(slot).ok_or_else(|| {
                                    Error::shape("forward", format!("no gate noise for weight-head slot {slot}"))
                                })?;
                                l0::sample_gates_on_tape(tape, la, u, &l0cfg)?
                            }
                        };
                        alpha_weights.push(tape.mul(w, gate)?);
                        terms.push(l0::expected_l0_on_tape(tape, la, &l0cfg)?);
                    }
                    let mut total = terms[0];
                    for &t in &terms[1..] {
                        total = tape.add(total, t)?;
                    }
                    l0_penalty = Some(total);
                }
                _ => alpha_weights = alpha.weights.clone(),
            }
        }
    }

    let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let tok_table = param(tape, model.token_embedding_index());
    let pos_table = param(tape, model.position_embedding_index());
    let tok = tape.gather_rows(tok_table, &batch.token_ids)?;
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mask = batch.mask_f64();
    let mask_var = tape.constant(&[n], mask.clone())?;
    let mut layer_vars = Vec::new();

    for l in 0..cfg.num_layers {
        let p = |tape: &mut Tape<'t>, which: LayerParam, param: &mut dyn FnMut(&mut Tape<'t>, usize) -> Var| {
            param(tape, model.layer_index(l, which))
        };
        let linear = |tape: &mut Tape<'t>,
                      input: Var,
                      w: LayerParam,
                      b: LayerParam,
                      param: &mut dyn FnMut(&mut Tape<'t>, usize) -> Var|
         -> Result<Var> {
            let wv = p(tape, w, param);
            let bv = p(tape, b, param);
            let y = tape.matmul(input, wv)?;
            tape.add_row(y, bv)
        };

        let q = linear(tape, x, LayerParam::QueryWeight, LayerParam::QueryBias, &mut param)?;
        let k = linear(tape, x, LayerParam::KeyWeight, LayerParam::KeyBias, &mut param)?;
        let v = linear(tape, x, LayerParam::ValueWeight, LayerParam::ValueBias, &mut param)?;
        let scores = tape.attn_scores(q, k, dims)?;
        let probs = tape.softmax_grouped(scores, &mask, dims.heads * seq)?;
        let ctx = tape.attn_context(probs, v, dims)?;
        let attn = linear(tape, ctx, LayerParam::OutputWeight, LayerParam::OutputBias, &mut param)?;
        let res1 = tape.add(x, attn)?;
        let g1 = p(tape, LayerParam::Ln1Gamma, &mut param);
        let b1 = p(tape, LayerParam::Ln1Beta, &mut param);
        let h = tape.layer_norm(res1, g1, b1, LAYER_NORM_EPS)?;

        let pre_act = linear(tape, h, LayerParam::FfnInWeight, LayerParam::FfnInBias, &mut param)?;
        let a = tape.gelu(pre_act)?;
        let f = linear(tape, a, LayerParam::FfnOutWeight, LayerParam::FfnOutBias, &mut param)?;
        let mut sum = tape.add(h, f)?;

        let shift = bound.as_ref().and_then(|b| b.shift.as_ref());
        let (mut alpha_var, mut v_var) = (None, None);
        let (g2, b2) = match shift {
            Some(s) => {
                let alpha = match &s.alpha {
                    Some(head) => {
                        let slot = head.map[l];
                        alpha_on_tape(tape, alpha_weights[slot], head.biases[slot], a, mask_var)?
                    }
                    None => mask_var,
                };
                let vv = s.v[s.v_map[l]];
                let shift_rows = tape.outer(alpha, vv)?;
                sum = tape.add(sum, shift_rows)?;
                alpha_var = Some(alpha);
                v_var = Some(vv);
                (s.ln2_gamma[l], s.ln2_beta[l])
            }
            None => (
                p(tape, LayerParam::Ln2Gamma, &mut param),
                p(tape, LayerParam::Ln2Beta, &mut param),
            ),
        };
        let out = tape.layer_norm(sum, g2, b2, LAYER_NORM_EPS)?;
        if trace {
            layer_vars.push(LayerVars {
                attention: probs,
                hidden: h,
                intermediate: a,
                ffn_out: f,
                alpha: alpha_var,
                v: v_var,
                pre_ln2: sum,
                output: out,
            });
        }
        x = out;
    }

    let cls_rows: Vec<usize> = (0..bsz).map(|b| b * seq).collect();
    let cls = tape.gather_rows(x, &cls_rows)?;
    let (hw, hb) = match &bound {
        Some(b) => (b.head_weight, b.head_bias),
        None => (tape.leaf(model.head_weight()), tape.leaf(model.head_bias())),
    };
    let logits = tape.matmul(cls, hw)?;
    let logits = tape.add_row(logits, hb)?;

    let traces = if trace {
        Some(collect_traces(tape, batch, d, cfg.ffn_dim, cfg.num_heads, &layer_vars)?)
    } else {
        None
    };
    Ok(Graph {
        logits,
        adapter: bound,
        l0_penalty,
        traces,
    })
}

fn collect_traces(
    tape: &Tape<'_>,
    batch: &Batch,
    d: usize,
    d_ff: usize,
    heads: usize,
    layers: &[LayerVars],
) -> Result<Vec<ExampleTrace>> {
    let seq = batch.seq_len;
    let rows = |v: Var, b: usize, len: usize, width: usize| -> Result<Tensor> {
        let start = b * seq * width;
        Tensor::matrix(len, width, tape.value(v)[start..start + len * width].to_vec())
    };
    (0..batch.batch_size)
        .map(|b| {
            let len = batch.length(b);
            let layers = layers
                .iter()
                .map(|lv| {
                    let alpha = match lv.alpha {
                        Some(a) => Tensor::vector(tape.value(a)[b * seq..b * seq + len].to_vec())?,
                        None => Tensor::zeros(&[len]),
                    };
                    let bias = match lv.v {
                        Some(v) => outer_product(&tape.to_tensor(v), &alpha)?,
                        None => Tensor::zeros(&[d, len]),
                    };
                    let probs = tape.value(lv.attention);
                    let mut attention = Vec::with_capacity(heads * len * seq);
                    for h in 0..heads {
                        let start = ((b * heads + h) * seq) * seq;
                        attention.extend_from_slice(&probs[start..start + len * seq]);
                    }
                    Ok(LayerTrace {
                        attention: Tensor::matrix(heads * len, seq, attention)?,
                        hidden: rows(lv.hidden, b, len, d)?,
                        intermediate: rows(lv.intermediate, b, len, d_ff)?,
                        ffn_out: rows(lv.ffn_out, b, len, d)?,
                        alpha,
                        bias,
                        pre_ln2: rows(lv.pre_ln2, b, len, d)?,
                        output: rows(lv.output, b, len, d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExampleTrace { layers })
        })
        .collect()
}

/// Classification logits from the first token's final representation,
/// with deterministic gates. `trace` additionally returns per-layer
/// intermediates for every example.
pub fn forward(model: &BackboneModel, adapter: &AdapterState, batch: &Batch, trace: bool) -> Result<ForwardOutput> {
    check_compatible(model, adapter)?;
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, model, Some(adapter), batch, GateMode::Deterministic, trace)?;
    Ok(ForwardOutput {
        logits: tape.to_tensor(graph.logits),
        traces: graph.traces,
    })
}

/// Forward pass of the frozen backbone alone (its own head, no shift).
pub fn forward_frozen(model: &BackboneModel, batch: &Batch, trace: bool) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, model, None, batch, GateMode::Deterministic, trace)?;
    Ok(ForwardOutput {
        logits: tape.to_tensor(graph.logits),
        traces: graph.traces,
    })
}

pub(crate) fn check_compatible(model: &BackboneModel, adapter: &AdapterState) -> Result<()> {
    let (m, a) = (model.config(), adapter.config());
    if (m.num_layers, m.hidden_dim, m.ffn_dim, m.num_classes) != (a.num_layers, a.hidden_dim, a.ffn_dim, a.num_classes)
    {
        return Err(Error::shape(
            "forward",
            format!("adapter built for {a:?} used with backbone {m:?}"),
        ));
    }
    Ok(())
}
