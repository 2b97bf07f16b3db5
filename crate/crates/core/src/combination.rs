//! Combining the attentions of several encoders into one context vector.
//!
//! * `Concat`: an independent attention per encoder, contexts concatenated.
//! * `Flat`: one softmax over the states of all encoders. Energies share the
//!   query projection `W` and `v`; each encoder has its own key projection
//!   `U_a^(k)`. The context is `sum_k sum_j alpha_j^(k) U_c^(k) h_j^(k)`.
//! * `Hierarchical`: per-encoder contexts `c^(k)` first (inner attentions
//!   share `W` and `v`), then a second attention with energies
//!   `v_b^T tanh(W_b s + U_b^(k) c^(k) + b)` and context
//!   `sum_k beta^(k) U_c^(k) c^(k)`.
//!
//! With `share_projections` the context projection `U_c^(k)` is the same
//! parameter as the key projection of the level that scores it (`U_a^(k)`
//! for flat, `U_b^(k)` for hierarchical). With `use_sentinel` the gated
//! decoder state `psi * s` joins the flat distribution, or the outer
//! hierarchical distribution, as one more candidate.

use serde::{Deserialize, Serialize};

use crate::attention::{self, SentinelParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Concat,
    Flat,
    #[serde(rename = "hier", alias = "hierarchical")]
    Hierarchical,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Concat => "concat",
            Strategy::Flat => "flat",
            Strategy::Hierarchical => "hier",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Strategy::Concat),
            "flat" => Ok(Strategy::Flat),
            "hier" | "hierarchical" => Ok(Strategy::Hierarchical),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub share_projections: bool,
    #[serde(default)]
    pub use_sentinel: bool,
    /// Dimension of the combined context for flat and hierarchical
    /// combination; `None` means the attention dimension.
    #[serde(default)]
    pub ctx_dim: Option<usize>,
}

impl CombinationConfig {
    pub fn new(strategy: Strategy, share_projections: bool, use_sentinel: bool) -> Self {
        Self {
            strategy,
            share_projections,
            use_sentinel,
            ctx_dim: None,
        }
    }

    /// The nine valid combinations: concat, then flat and hierarchical with
    /// every (share, sentinel) pair.
    pub fn all_valid() -> Vec<Self> {
        let mut out = vec![Self::new(Strategy::Concat, false, false)];
        for strategy in [Strategy::Flat, Strategy::Hierarchical] {
            for share in [false, true] {
                for sentinel in [false, true] {
                    out.push(Self::new(strategy, share, sentinel));
                }
            }
        }
        out
    }

    pub fn ctx_dim(&self, attn_dim: usize) -> usize {
        self.ctx_dim.unwrap_or(attn_dim)
    }

    pub fn validate(&self, attn_dim: usize) -> Result<()> {
        if attn_dim == 0 || self.ctx_dim == Some(0) {
            return Err(Error::Config("attention and context dims must be positive".into()));
        }
        if self.strategy == Strategy::Concat {
            if self.use_sentinel {
                return Err(Error::Config("concat combination has no sentinel".into()));
            }
            if self.share_projections {
                return Err(Error::Config("concat combination has no projections to share".into()));
            }
        }
        if self.share_projections && self.ctx_dim(attn_dim) != attn_dim {
            return Err(Error::Config(format!(
                "shared projections need ctx_dim == attn_dim ({} != {attn_dim})",
                self.ctx_dim(attn_dim)
            )));
        }
        Ok(())
    }

    /// Short label such as `flat+share+sent`.
    pub fn label(&self) -> String {
        let mut s = self.strategy.name().to_string();
        if self.share_projections {
            s.push_str("+share");
        }
        if self.use_sentinel {
            s.push_str("+sent");
        }
        s
    }
}

/// Key projection `U` and its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyProjection {
    pub matrix: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MultiAttentionParams {
    Concat {
        per_encoder: Vec<attention::AttentionParams>,
    },
    Flat {
        query: ParamId,
        v: ParamId,
        keys: Vec<KeyProjection>,
        values: Vec<ParamId>,
        sentinel: Option<SentinelParams>,
        ctx_dim: usize,
    },
    Hierarchical {
        inner_query: ParamId,
        inner_v: ParamId,
        inner_keys: Vec<KeyProjection>,
        outer_query: ParamId,
        outer_v: ParamId,
        outer_keys: Vec<KeyProjection>,
        values: Vec<ParamId>,
        sentinel: Option<SentinelParams>,
        ctx_dim: usize,
    },
}

impl MultiAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        config: &CombinationConfig,
        decoder_dim: usize,
        embed_dim: usize,
        encoder_dims: &[usize],
        attn_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate(attn_dim)?;
        if encoder_dims.is_empty() {
            return Err(Error::Empty("encoder list"));
        }
        let ctx_dim = config.ctx_dim(attn_dim);
        let share = config.share_projections;
        let keys = |store: &mut ParamStore, prefix: &str, rng: &mut SeededRng| -> Result<Vec<KeyProjection>> {
            encoder_dims
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    Ok(KeyProjection {
                        matrix: store.matrix(format!("{prefix}.key.{k}"), attn_dim, d, rng)?,
                        bias: store.bias(format!("{prefix}.key_bias.{k}"), attn_dim)?,
                    })
                })
                .collect()
        };
        let values = |store: &mut ParamStore, keys: &[KeyProjection], rng: &mut SeededRng| -> Result<Vec<ParamId>> {
            encoder_dims
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    if share {
                        Ok(keys[k].matrix)
                    } else {
                        store.matrix(format!("comb.value.{k}"), ctx_dim, d, rng)
                    }
                })
                .collect()
        };
        let sentinel = |store: &mut ParamStore, rng: &mut SeededRng| -> Result<Option<SentinelParams>> {
            if !config.use_sentinel {
                return Ok(None);
            }
            SentinelParams::init(store, "comb.sentinel", embed_dim, decoder_dim, attn_dim, Some(ctx_dim), share, rng)
                .map(Some)
        };
        Ok(match config.strategy {
            Strategy::Concat => MultiAttentionParams::Concat {
                per_encoder: encoder_dims
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| attention::AttentionParams::init(store, &format!("comb.att.{k}"), decoder_dim, d, attn_dim, rng))
                    .collect::<Result<_>>()?,
            },
            Strategy::Flat => {
                let query = store.matrix("comb.query", attn_dim, decoder_dim, rng)?;
                let v = store.weight_vector("comb.v", attn_dim, rng)?;
                let keys = keys(store, "comb", rng)?;
                let values = values(store, &keys, rng)?;
                let sentinel = sentinel(store, rng)?;
                MultiAttentionParams::Flat {
                    query,
                    v,
                    keys,
                    values,
                    sentinel,
                    ctx_dim,
                }
            }
            Strategy::Hierarchical => {
                let inner_query = store.matrix("comb.inner.query", attn_dim, decoder_dim, rng)?;
                let inner_v = store.weight_vector("comb.inner.v", attn_dim, rng)?;
                let inner_keys = keys(store, "comb.inner", rng)?;
                let outer_query = store.matrix("comb.outer.query", attn_dim, decoder_dim, rng)?;
                let outer_v = store.weight_vector("comb.outer.v", attn_dim, rng)?;
                let outer_keys = keys(store, "comb.outer", rng)?;
                let values = values(store, &outer_keys, rng)?;
                let sentinel = sentinel(store, rng)?;
                MultiAttentionParams::Hierarchical {
                    inner_query,
                    inner_v,
                    inner_keys,
                    outer_query,
                    outer_v,
                    outer_keys,
                    values,
                    sentinel,
                    ctx_dim,
                }
            }
        })
    }

    pub fn num_encoders(&self) -> usize {
        match self {
            MultiAttentionParams::Concat { per_encoder } => per_encoder.len(),
            MultiAttentionParams::Flat { keys, .. } => keys.len(),
            MultiAttentionParams::Hierarchical { inner_keys, .. } => inner_keys.len(),
        }
    }

    pub fn sentinel(&self) -> Option<&SentinelParams> {
        match self {
            MultiAttentionParams::Concat { .. } => None,
            MultiAttentionParams::Flat { sentinel, .. } | MultiAttentionParams::Hierarchical { sentinel, .. } => {
                sentinel.as_ref()
            }
        }
    }

    /// Dimension of the combined context given the encoder dimensions.
    pub fn output_dim(&self, store: &ParamStore) -> usize {
        match self {
            MultiAttentionParams::Concat { per_encoder } => {
                per_encoder.iter().map(|p| store.get(p.key).cols()).sum()
            }
            MultiAttentionParams::Flat { ctx_dim, .. } | MultiAttentionParams::Hierarchical { ctx_dim, .. } => *ctx_dim,
        }
    }
}

/// Per-example precomputation over the encoder states.
#[derive(Debug, Clone)]
pub struct Memory {
    states: Vec<NodeId>,
    lengths: Vec<usize>,
    keys: Vec<NodeId>,
    /// Flat only: all keys stacked, and all projected values stacked.
    stacked_keys: Option<NodeId>,
    stacked_values: Option<NodeId>,
}

impl Memory {
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Projects keys (and flat values) once per example.
pub fn prepare(g: &mut Graph, params: &MultiAttentionParams, encoders: &[NodeId]) -> Result<Memory> {
    if encoders.is_empty() {
        return Err(Error::Empty("encoder list"));
    }
    if encoders.len() != params.num_encoders() {
        return Err(Error::Shape {
            op: "combination encoders",
            lhs: vec![encoders.len()],
            rhs: vec![params.num_encoders()],
        });
    }
    for &e in encoders {
        if g.shape(e).len() != 2 {
            return Err(Error::Shape {
                op: "encoder states",
                lhs: g.shape(e).to_vec(),
                rhs: vec![],
            });
        }
    }
    let lengths = encoders.iter().map(|&e| g.shape(e)[0]).collect();
    let mut memory = Memory {
        states: encoders.to_vec(),
        lengths,
        keys: Vec::with_capacity(encoders.len()),
        stacked_keys: None,
        stacked_values: None,
    };
    match params {
        MultiAttentionParams::Concat { per_encoder } => {
            for (&h, p) in encoders.iter().zip(per_encoder) {
                memory.keys.push(attention::project_keys(g, h, p.key, p.key_bias)?);
            }
        }
        MultiAttentionParams::Flat { keys, values, .. } => {
            let mut projected = Vec::with_capacity(encoders.len());
            for ((&h, k), &u_c) in encoders.iter().zip(keys).zip(values) {
                memory.keys.push(attention::project_keys(g, h, k.matrix, k.bias)?);
                let u = g.param(u_c);
                projected.push(g.matmul_t(h, u)?);
            }
            memory.stacked_keys = Some(g.concat_rows(&memory.keys)?);
            memory.stacked_values = Some(g.concat_rows(&projected)?);
        }
        MultiAttentionParams::Hierarchical { inner_keys, .. } => {
            for (&h, k) in encoders.iter().zip(inner_keys) {
                memory.keys.push(attention::project_keys(g, h, k.matrix, k.bias)?);
            }
        }
    }
    Ok(memory)
}

/// Inputs the sentinel gate needs: the embedded decoder input and the
/// previous decoder state.
#[derive(Debug, Clone, Copy)]
pub struct SentinelInputs {
    pub embedded: NodeId,
    pub prev_state: NodeId,
}

/// Graph nodes of one combination step.
#[derive(Debug, Clone)]
pub struct CombinedNodes {
    pub context: NodeId,
    /// Concat: one alpha node per encoder. Flat: the joint distribution
    /// (sentinel last). Hierarchical: inner alphas per encoder.
    pub alphas: Vec<NodeId>,
    /// Hierarchical only: beta over encoders (sentinel last).
    pub beta: Option<NodeId>,
    pub gate: Option<NodeId>,
    strategy: Strategy,
    lengths: Vec<usize>,
    has_sentinel: bool,
}

impl CombinedNodes {
    /// Attention mass per encoder, sentinel last when present.
    ///
    /// Flat: summed alphas per encoder. Hierarchical: beta. Concat has no
    /// distribution over encoders and reports uniform mass.
    pub fn masses(&self, g: &Graph) -> Vec<f64> {
        match self.strategy {
            Strategy::Concat => vec![1.0 / self.lengths.len() as f64; self.lengths.len()],
            Strategy::Flat => {
                let joint = g.value(self.alphas[0]).data();
                let mut out = Vec::with_capacity(self.lengths.len() + 1);
                let mut offset = 0;
                for &len in &self.lengths {
                    out.push(joint[offset..offset + len].iter().sum());
                    offset += len;
                }
                if self.has_sentinel {
                    out.push(joint[offset]);
                }
                out
            }
            Strategy::Hierarchical => g.value(self.beta.unwrap()).data().to_vec(),
        }
    }

    /// Per-encoder alpha vectors (flat: slices of the joint distribution).
    pub fn encoder_alphas(&self, g: &Graph) -> Vec<Vec<f64>> {
        match self.strategy {
            Strategy::Flat => {
                let joint = g.value(self.alphas[0]).data();
                let mut offset = 0;
                self.lengths
                    .iter()
                    .map(|&len| {
                        let s = joint[offset..offset + len].to_vec();
                        offset += len;
                        s
                    })
                    .collect()
            }
            _ => self.alphas.iter().map(|&a| g.value(a).data().to_vec()).collect(),
        }
    }

    pub fn sentinel_mass(&self, g: &Graph) -> Option<f64> {
        if self.has_sentinel {
            self.masses(g).last().copied()
        } else {
            None
        }
    }
}

/// One decoder step of attention combination queried with `state`.
pub fn combine(
    g: &mut Graph,
    params: &MultiAttentionParams,
    memory: &Memory,
    state: NodeId,
    sentinel_inputs: Option<SentinelInputs>,
) -> Result<CombinedNodes> {
    let sentinel_params = params.sentinel();
    if sentinel_params.is_some() && sentinel_inputs.is_none() {
        return Err(Error::Config("sentinel combination needs the decoder input and previous state".into()));
    }
    // Gate and sentinel vector psi * s, when enabled.
    let mut sentinel = None;
    if let (Some(sp), Some(inputs)) = (sentinel_params, sentinel_inputs) {
        let gate = attention::sentinel_gate(g, inputs.embedded, inputs.prev_state, sp)?;
        let vector = g.mul(gate, state)?;
        let u = g.param(sp.key);
        let b = g.param(sp.key_bias);
        let k = g.matvec(u, vector)?;
        let key = g.add(k, b)?;
        let value = match sp.value {
            Some(v) if Some(v) == Some(sp.key) => Some(k),
            Some(v) => {
                let u = g.param(v);
                Some(g.matvec(u, vector)?)
            }
            None => None,
        };
        sentinel = Some((gate, key, value));
    }
    let mut out = CombinedNodes {
        context: state,
        alphas: Vec::new(),
        beta: None,
        gate: sentinel.map(|s| s.0),
        strategy: Strategy::Concat,
        lengths: memory.lengths.clone(),
        has_sentinel: sentinel.is_some(),
    };
    match params {
        MultiAttentionParams::Concat { per_encoder } => {
            let mut contexts = Vec::with_capacity(per_encoder.len());
            for ((p, &keys), &h) in per_encoder.iter().zip(&memory.keys).zip(&memory.states) {
                let q = attention::project_query(g, state, p.query)?;
                let att = attention::attend_keys(g, q, keys, h, p.v)?;
                out.alphas.push(att.alphas);
                contexts.push(att.context);
            }
            out.context = g.concat(&contexts)?;
        }
        MultiAttentionParams::Flat { query, v, .. } => {
            out.strategy = Strategy::Flat;
            let q = attention::project_query(g, state, *query)?;
            let mut keys = memory.stacked_keys.unwrap();
            let mut values = memory.stacked_values.unwrap();
            if let Some((_, key, value)) = sentinel {
                keys = g.concat_rows(&[keys, key])?;
                values = g.concat_rows(&[values, value.unwrap()])?;
            }
            let att = attention::attend_keys(g, q, keys, values, *v)?;
            out.alphas.push(att.alphas);
            out.context = att.context;
        }
        MultiAttentionParams::Hierarchical {
            inner_query,
            inner_v,
            outer_query,
            outer_v,
            outer_keys,
            values,
            ..
        } => {
            out.strategy = Strategy::Hierarchical;
            let q_in = attention::project_query(g, state, *inner_query)?;
            let mut outer_rows = Vec::with_capacity(memory.states.len() + 1);
            let mut value_rows = Vec::with_capacity(memory.states.len() + 1);
            for k in 0..memory.states.len() {
                let inner = attention::attend_keys(g, q_in, memory.keys[k], memory.states[k], *inner_v)?;
                out.alphas.push(inner.alphas);
                let u_b = g.param(outer_keys[k].matrix);
                let projected = g.matvec(u_b, inner.context)?;
                let b = g.param(outer_keys[k].bias);
                outer_rows.push(g.add(projected, b)?);
                let value = if values[k] == outer_keys[k].matrix {
                    projected
                } else {
                    let u_c = g.param(values[k]);
                    g.matvec(u_c, inner.context)?
                };
                value_rows.push(value);
            }
            if let Some((_, key, value)) = sentinel {
                outer_rows.push(key);
                value_rows.push(value.unwrap());
            }
            let q_out = attention::project_query(g, state, *outer_query)?;
            let keys = g.concat_rows(&outer_rows)?;
            let vals = g.concat_rows(&value_rows)?;
            let att = attention::attend_keys(g, q_out, keys, vals, *outer_v)?;
            out.beta = Some(att.alphas);
            out.context = att.context;
        }
    }
    Ok(out)
}

/// Eagerly evaluated combination step.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub context: Vec<f64>,
    /// Mass per encoder, sentinel last when enabled.
    pub masses: Vec<f64>,
    pub alphas: Vec<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Evaluates one combination step on plain tensors. `sentinel_inputs` is
/// `(embedded decoder input, previous decoder state)`.
pub fn eval_combine(
    store: &ParamStore,
    params: &MultiAttentionParams,
    state: &Tensor,
    encoders: &[Tensor],
    sentinel_inputs: Option<(&Tensor, &Tensor)>,
) -> Result<CombinedOutput> {
    let mut g = Graph::new(store);
    let s = g.input(state.clone());
    let hs: Vec<NodeId> = encoders.iter().map(|h| g.input(h.clone())).collect();
    let memory = prepare(&mut g, params, &hs)?;
    let inputs = sentinel_inputs.map(|(y, sp)| SentinelInputs {
        embedded: g.input(y.clone()),
        prev_state: g.input(sp.clone()),
    });
    let nodes = combine(&mut g, params, &memory, s, inputs)?;
    Ok(CombinedOutput {
        context: g.value(nodes.context).data().to_vec(),
        masses: nodes.masses(&g),
        alphas: nodes.encoder_alphas(&g),
        beta: nodes.beta.map(|b| g.value(b).data().to_vec()),
    })
}

pub fn combine_concat(
    store: &ParamStore,
    params: &MultiAttentionParams,
    state: &Tensor,
    encoders: &[Tensor],
) -> Result<CombinedOutput> {
    expect(params, Strategy::Concat)?;
    eval_combine(store, params, state, encoders, None)
}

pub fn combine_flat(
    store: &ParamStore,
    params: &MultiAttentionParams,
    state: &Tensor,
    encoders: &[Tensor],
    sentinel_inputs: Option<(&Tensor, &Tensor)>,
) -> Result<CombinedOutput> {
    expect(params, Strategy::Flat)?;
    eval_combine(store, params, state, encoders, sentinel_inputs)
}

pub fn combine_hierarchical(
    store: &ParamStore,
    params: &MultiAttentionParams,
    state: &Tensor,
    encoders: &[Tensor],
    sentinel_inputs: Option<(&Tensor, &Tensor)>,
) -> Result<CombinedOutput> {
    expect(params, Strategy::Hierarchical)?;
    eval_combine(store, params, state, encoders, sentinel_inputs)
}

fn expect(params: &MultiAttentionParams, strategy: Strategy) -> Result<()> {
    let actual = match params {
        MultiAttentionParams::Concat { .. } => Strategy::Concat,
        MultiAttentionParams::Flat { .. } => Strategy::Flat,
        MultiAttentionParams::Hierarchical { .. } => Strategy::Hierarchical,
    };
    if actual != strategy {
        return Err(Error::Config(format!(
            "parameters are for {} combination, not {}",
            actual.name(),
            strategy.name()
        )));
    }
    Ok(())
}
