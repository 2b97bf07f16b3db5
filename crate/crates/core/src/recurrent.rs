//! GRU transitions, the bidirectional encoder and the two decoder cells.
//!
//! The GRU is the reset-before-candidate form:
//!
//! ```text
//! z = sigmoid(W_z x + U_z s + b_z)
//! r = sigmoid(W_r x + U_r s + b_r)
//! h = tanh(W_h x + U_h (r * s) + b_h)
//! s' = (1 - z) * s + z * h
//! ```

use serde::{Deserialize, Serialize};

use crate::combination::CombinedNodes;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub input_update: ParamId,
    pub state_update: ParamId,
    pub bias_update: ParamId,
    pub input_reset: ParamId,
    pub state_reset: ParamId,
    pub bias_reset: ParamId,
    pub input_candidate: ParamId,
    pub state_candidate: ParamId,
    pub bias_candidate: ParamId,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut m = |name: &str, cols: usize| store.matrix(format!("{prefix}.{name}"), hidden, cols, rng);
        let input_update = m("input_update", input_dim)?;
        let state_update = m("state_update", hidden)?;
        let input_reset = m("input_reset", input_dim)?;
        let state_reset = m("state_reset", hidden)?;
        let input_candidate = m("input_candidate", input_dim)?;
        let state_candidate = m("state_candidate", hidden)?;
        Ok(Self {
            input_update,
            state_update,
            bias_update: store.bias(format!("{prefix}.bias_update"), hidden)?,
            input_reset,
            state_reset,
            bias_reset: store.bias(format!("{prefix}.bias_reset"), hidden)?,
            input_candidate,
            state_candidate,
            bias_candidate: store.bias(format!("{prefix}.bias_candidate"), hidden)?,
        })
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.get(self.state_update).rows()
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.input_update).cols()
    }
}

fn gate(g: &mut Graph, x: NodeId, s: NodeId, w: ParamId, u: ParamId, b: ParamId) -> Result<NodeId> {
    let w = g.param(w);
    let u = g.param(u);
    let b = g.param(b);
    let wx = g.matvec(w, x)?;
    let us = g.matvec(u, s)?;
    g.sum(&[wx, us, b])
}

pub fn gru_step(g: &mut Graph, x: NodeId, prev: NodeId, p: &GruParams) -> Result<NodeId> {
    let z = gate(g, x, prev, p.input_update, p.state_update, p.bias_update)?;
    let z = g.sigmoid(z);
    let r = gate(g, x, prev, p.input_reset, p.state_reset, p.bias_reset)?;
    let r = g.sigmoid(r);
    let reset = g.mul(r, prev)?;
    let h = gate(g, x, reset, p.input_candidate, p.state_candidate, p.bias_candidate)?;
    let h = g.tanh(h);
    let delta = g.sub(h, prev)?;
    let step = g.mul(z, delta)?;
    g.add(prev, step)
}

/// Runs forward and backward GRUs over `inputs`; row `j` of the result is
/// `[forward state at j, backward state at j]`.
pub fn encode_bidirectional(g: &mut Graph, inputs: &[NodeId], forward: &GruParams, backward: &GruParams) -> Result<NodeId> {
    if inputs.is_empty() {
        return Err(Error::Empty("encoder input sequence"));
    }
    let hidden = g.store().get(forward.state_update).rows();
    let zero = g.input(crate::tensor::Tensor::zeros(&[hidden]));
    let mut fwd = Vec::with_capacity(inputs.len());
    let mut s = zero;
    for &x in inputs {
        s = gru_step(g, x, s, forward)?;
        fwd.push(s);
    }
    let mut bwd = vec![zero; inputs.len()];
    let mut s = zero;
    for (j, &x) in inputs.iter().enumerate().rev() {
        s = gru_step(g, x, s, backward)?;
        bwd[j] = s;
    }
    let rows = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// One GRU transition; attention is queried with the previous state and
    /// the context enters the transition next to the embedded input.
    Gru,
    /// Conditional GRU: `s' = GRU_1(y, s_prev)`, attention queried with `s'`,
    /// then `s = GRU_2(c, s')`.
    Cgru,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Gru => "gru",
            DecoderKind::Cgru => "cgru",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(DecoderKind::Gru),
            "cgru" => Ok(DecoderKind::Cgru),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderParams {
    Gru(GruParams),
    Cgru { first: GruParams, second: GruParams },
}

impl DecoderParams {
    pub fn init(
        store: &mut ParamStore,
        kind: DecoderKind,
        embed_dim: usize,
        context_dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Gru => DecoderParams::Gru(GruParams::init(store, "dec.gru", embed_dim + context_dim, hidden, rng)?),
            DecoderKind::Cgru => DecoderParams::Cgru {
                first: GruParams::init(store, "dec.cgru1", embed_dim, hidden, rng)?,
                second: GruParams::init(store, "dec.cgru2", context_dim, hidden, rng)?,
            },
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            DecoderParams::Gru(_) => DecoderKind::Gru,
            DecoderParams::Cgru { .. } => DecoderKind::Cgru,
        }
    }
}

/// Output of one decoder step.
#[derive(Debug, Clone)]
pub struct DecoderStepOutput {
    pub state: NodeId,
    /// The state that queried attention.
    pub query: NodeId,
    pub combined: CombinedNodes,
}

/// Plain attentive GRU step. `combine` receives the attention query.
pub fn decoder_step_plain<F>(g: &mut Graph, embedded: NodeId, prev: NodeId, params: &GruParams, combine: F) -> Result<DecoderStepOutput>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<CombinedNodes>,
{
    let combined = combine(g, prev)?;
    let input = g.concat(&[embedded, combined.context])?;
    let state = gru_step(g, input, prev, params)?;
    Ok(DecoderStepOutput {
        state,
        query: prev,
        combined,
    })
}

/// Conditional GRU step.
pub fn decoder_step_cgru<F>(
    g: &mut Graph,
    embedded: NodeId,
    prev: NodeId,
    first: &GruParams,
    second: &GruParams,
    combine: F,
) -> Result<DecoderStepOutput>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<CombinedNodes>,
{
    let intermediate = gru_step(g, embedded, prev, first)?;
    let combined = combine(g, intermediate)?;
    let state = gru_step(g, combined.context, intermediate, second)?;
    Ok(DecoderStepOutput {
        state,
        query: intermediate,
        combined,
    })
}

/// Either decoder step behind one signature.
pub fn decoder_step<F>(g: &mut Graph, embedded: NodeId, prev: NodeId, params: &DecoderParams, combine: F) -> Result<DecoderStepOutput>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<CombinedNodes>,
{
    match params {
        DecoderParams::Gru(p) => decoder_step_plain(g, embedded, prev, p, combine),
        DecoderParams::Cgru { first, second } => decoder_step_cgru(g, embedded, prev, first, second, combine),
    }
}
