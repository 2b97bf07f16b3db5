//! Additive attention over one encoder and the sentinel gate.
//!
//! Energies are `e_j = v^T tanh(W s + U h_j + b)`, the distribution is their
//! softmax and the context is the alpha-weighted sum of encoder states. The
//! sentinel adds a gated copy of the decoder state, `psi * s`, as one more
//! candidate that competes with the encoder states for attention mass.
//!
//! Functions taking a [`Graph`] record differentiable nodes; the functions
//! at the bottom of the module evaluate the same graph code eagerly on plain
//! tensors.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Parameters of one additive attention: `W` (attn x decoder),
/// `U` (attn x encoder), bias `b` (attn) and `v` (attn).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub key_bias: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        decoder_dim: usize,
        encoder_dim: usize,
        attn_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if attn_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        Ok(Self {
            query: store.matrix(format!("{prefix}.query"), attn_dim, decoder_dim, rng)?,
            key: store.matrix(format!("{prefix}.key"), attn_dim, encoder_dim, rng)?,
            key_bias: store.bias(format!("{prefix}.key_bias"), attn_dim)?,
            v: store.weight_vector(format!("{prefix}.v"), attn_dim, rng)?,
        })
    }
}

/// Gate `psi = sigmoid(W_y y + W_s s_prev + b)` and the sentinel's key
/// projection. `value` projects the sentinel vector into a combined context
/// space; single-source attention adds `psi * s` without projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentinelParams {
    pub gate_input: ParamId,
    pub gate_state: ParamId,
    pub gate_bias: ParamId,
    pub key: ParamId,
    pub key_bias: ParamId,
    pub value: Option<ParamId>,
}

impl SentinelParams {
    /// `value_dim` of `None` leaves the value projection out; `shared_value`
    /// reuses the key projection as the value projection.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        embed_dim: usize,
        decoder_dim: usize,
        attn_dim: usize,
        value_dim: Option<usize>,
        shared_value: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let gate_input = store.matrix(format!("{prefix}.gate_input"), decoder_dim, embed_dim, rng)?;
        let gate_state = store.matrix(format!("{prefix}.gate_state"), decoder_dim, decoder_dim, rng)?;
        let gate_bias = store.bias(format!("{prefix}.gate_bias"), decoder_dim)?;
        let key = store.matrix(format!("{prefix}.key"), attn_dim, decoder_dim, rng)?;
        let key_bias = store.bias(format!("{prefix}.key_bias"), attn_dim)?;
        let value = match value_dim {
            None => None,
            Some(d) if shared_value => {
                if d != attn_dim {
                    return Err(Error::Config(format!(
                        "shared sentinel projection needs context dim {d} == attention dim {attn_dim}"
                    )));
                }
                Some(key)
            }
            Some(d) => Some(store.matrix(format!("{prefix}.value"), d, decoder_dim, rng)?),
        };
        Ok(Self {
            gate_input,
            gate_state,
            gate_bias,
            key,
            key_bias,
            value,
        })
    }
}

/// Nodes produced by one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub energies: NodeId,
    pub alphas: NodeId,
    pub context: NodeId,
}

/// `H U^T + b`: the projected keys of every encoder state, one row each.
pub fn project_keys(g: &mut Graph, states: NodeId, key: ParamId, bias: ParamId) -> Result<NodeId> {
    let u = g.param(key);
    let b = g.param(bias);
    let projected = g.matmul_t(states, u)?;
    g.add_row(projected, b)
}

/// `W s`, evaluated once per decoder step and reused for every key.
pub fn project_query(g: &mut Graph, state: NodeId, query: ParamId) -> Result<NodeId> {
    let w = g.param(query);
    g.matvec(w, state)
}

/// `v^T tanh(keys + query)` for every key row.
pub fn score(g: &mut Graph, query: NodeId, keys: NodeId, v: ParamId) -> Result<NodeId> {
    let pre = g.add_row(keys, query)?;
    let act = g.tanh(pre);
    let v = g.param(v);
    g.matvec(act, v)
}

/// Attention energies of every encoder state.
pub fn energies(g: &mut Graph, state: NodeId, states: NodeId, params: &AttentionParams) -> Result<NodeId> {
    let keys = project_keys(g, states, params.key, params.key_bias)?;
    let q = project_query(g, state, params.query)?;
    score(g, q, keys, params.v)
}

/// Single-encoder attention from precomputed keys.
pub fn attend_keys(
    g: &mut Graph,
    query: NodeId,
    keys: NodeId,
    states: NodeId,
    v: ParamId,
) -> Result<AttentionNodes> {
    let energies = score(g, query, keys, v)?;
    let alphas = g.softmax(energies)?;
    let context = g.vecmat(alphas, states)?;
    Ok(AttentionNodes {
        energies,
        alphas,
        context,
    })
}

pub fn attend(g: &mut Graph, state: NodeId, states: NodeId, params: &AttentionParams) -> Result<AttentionNodes> {
    let keys = project_keys(g, states, params.key, params.key_bias)?;
    let q = project_query(g, state, params.query)?;
    attend_keys(g, q, keys, states, params.v)
}

/// `psi = sigmoid(W_y y + W_s s_prev + b)`.
pub fn sentinel_gate(g: &mut Graph, input: NodeId, prev_state: NodeId, params: &SentinelParams) -> Result<NodeId> {
    let wy = g.param(params.gate_input);
    let ws = g.param(params.gate_state);
    let b = g.param(params.gate_bias);
    let a = g.matvec(wy, input)?;
    let c = g.matvec(ws, prev_state)?;
    let pre = g.sum(&[a, c, b])?;
    Ok(g.sigmoid(pre))
}

/// Sentinel energy and vector.
///
/// Returns `(e, psi * s)` where `e = v^T tanh(query + U_psi (psi * s) + b)`
/// and `query` is the already projected `W s` shared with the encoder keys.
pub fn sentinel_energy(
    g: &mut Graph,
    state: NodeId,
    gate: NodeId,
    query: NodeId,
    params: &SentinelParams,
    v: ParamId,
) -> Result<(NodeId, NodeId)> {
    let sentinel = g.mul(gate, state)?;
    let u = g.param(params.key);
    let b = g.param(params.key_bias);
    let k = g.matvec(u, sentinel)?;
    let pre = g.sum(&[query, k, b])?;
    let act = g.tanh(pre);
    let v = g.param(v);
    let e = g.dot(v, act)?;
    Ok((e, sentinel))
}

/// Single-source attention with the sentinel as an extra candidate.
///
/// The sentinel vector is summed into the context unprojected, so the
/// decoder and encoder dimensions must agree.
#[allow(clippy::too_many_arguments)]
pub fn attend_with_sentinel(
    g: &mut Graph,
    state: NodeId,
    states: NodeId,
    input: NodeId,
    prev_state: NodeId,
    params: &AttentionParams,
    sentinel: &SentinelParams,
) -> Result<AttentionNodes> {
    if g.shape(state)[0] != g.shape(states)[1] {
        return Err(Error::Shape {
            op: "attend_with_sentinel",
            lhs: g.shape(state).to_vec(),
            rhs: g.shape(states).to_vec(),
        });
    }
    let keys = project_keys(g, states, params.key, params.key_bias)?;
    let q = project_query(g, state, params.query)?;
    let enc = score(g, q, keys, params.v)?;
    let gate = sentinel_gate(g, input, prev_state, sentinel)?;
    let (e_psi, vector) = sentinel_energy(g, state, gate, q, sentinel, params.v)?;
    let energies = g.concat(&[enc, e_psi])?;
    let alphas = g.softmax(energies)?;
    let candidates = g.concat_rows(&[states, vector])?;
    let context = g.vecmat(alphas, candidates)?;
    Ok(AttentionNodes {
        energies,
        alphas,
        context,
    })
}

/// Eagerly evaluated attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub energies: Vec<f64>,
    pub alphas: Vec<f64>,
    pub context: Vec<f64>,
}

fn collect(g: &Graph, n: AttentionNodes) -> AttentionOutput {
    AttentionOutput {
        energies: g.value(n.energies).data().to_vec(),
        alphas: g.value(n.alphas).data().to_vec(),
        context: g.value(n.context).data().to_vec(),
    }
}

/// Energies for decoder state `state` over encoder states `states` (T x d).
pub fn eval_energies(store: &ParamStore, params: &AttentionParams, state: &Tensor, states: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let s = g.input(state.clone());
    let h = g.input(states.clone());
    let e = energies(&mut g, s, h, params)?;
    Ok(g.value(e).data().to_vec())
}

pub fn eval_attend(
    store: &ParamStore,
    params: &AttentionParams,
    state: &Tensor,
    states: &Tensor,
) -> Result<AttentionOutput> {
    let mut g = Graph::new(store);
    let s = g.input(state.clone());
    let h = g.input(states.clone());
    let n = attend(&mut g, s, h, params)?;
    Ok(collect(&g, n))
}

pub fn eval_sentinel_gate(
    store: &ParamStore,
    params: &SentinelParams,
    input: &Tensor,
    prev_state: &Tensor,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let y = g.input(input.clone());
    let s = g.input(prev_state.clone());
    let psi = sentinel_gate(&mut g, y, s, params)?;
    Ok(g.value(psi).data().to_vec())
}

/// Returns the sentinel energy and the sentinel vector `psi * s`.
pub fn eval_sentinel_energy(
    store: &ParamStore,
    attention: &AttentionParams,
    sentinel: &SentinelParams,
    state: &Tensor,
    gate: &Tensor,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(store);
    let s = g.input(state.clone());
    let psi = g.input(gate.clone());
    let q = project_query(&mut g, s, attention.query)?;
    let (e, v) = sentinel_energy(&mut g, s, psi, q, sentinel, attention.v)?;
    Ok((g.value(e).item(), g.value(v).data().to_vec()))
}

pub fn eval_attend_with_sentinel(
    store: &ParamStore,
    params: &AttentionParams,
    sentinel: &SentinelParams,
    state: &Tensor,
    states: &Tensor,
    input: &Tensor,
    prev_state: &Tensor,
) -> Result<AttentionOutput> {
    let mut g = Graph::new(store);
    let s = g.input(state.clone());
    let h = g.input(states.clone());
    let y = g.input(input.clone());
    let sp = g.input(prev_state.clone());
    let n = attend_with_sentinel(&mut g, s, h, y, sp, params, sentinel)?;
    Ok(collect(&g, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dec: usize, enc: usize, attn: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::init(&mut store, "att", dec, enc, attn, &mut rng).unwrap();
        (store, p)
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_v_gives_zero_energies() {
        let (mut store, p) = setup(3, 4, 5, 1);
        *store.get_mut(p.v) = Tensor::zeros(&[5]);
        let mut rng = SeededRng::new(2);
        let e = eval_energies(&store, &p, &random(&[3], &mut rng), &random(&[6, 4], &mut rng)).unwrap();
        assert_eq!(e, vec![0.0; 6]);
    }

    #[test]
    fn single_state_attention() {
        let (store, p) = setup(3, 4, 5, 3);
        let mut rng = SeededRng::new(4);
        let h = random(&[1, 4], &mut rng);
        let out = eval_attend(&store, &p, &random(&[3], &mut rng), &h).unwrap();
        assert_eq!(out.alphas, vec![1.0]);
        assert_eq!(out.context, h.data());
    }

    #[test]
    fn identical_states_give_that_state() {
        let (store, p) = setup(3, 4, 5, 5);
        let row = vec![0.1, -0.4, 0.9, 0.3];
        let h = Tensor::from_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let out = eval_attend(&store, &p, &Tensor::vector(vec![0.5, -0.5, 0.2]).unwrap(), &h).unwrap();
        for (c, r) in out.context.iter().zip(&row) {
            assert!((c - r).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (store, p) = setup(3, 4, 5, 6);
        let r = eval_attend(&store, &p, &Tensor::zeros(&[2]), &Tensor::zeros(&[2, 4]));
        assert!(matches!(r, Err(Error::Shape { .. })));
        let r = eval_attend(&store, &p, &Tensor::zeros(&[3]), &Tensor::zeros(&[2, 3]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_gate_params_give_half() {
        let mut rng = SeededRng::new(7);
        let mut store = ParamStore::new();
        let sp = SentinelParams::init(&mut store, "s", 3, 4, 5, None, false, &mut rng).unwrap();
        for id in [sp.gate_input, sp.gate_state] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let psi = eval_sentinel_gate(&store, &sp, &random(&[3], &mut rng), &random(&[4], &mut rng)).unwrap();
        assert_eq!(psi, vec![0.5; 4]);
    }

    #[test]
    fn gate_saturates() {
        let mut rng = SeededRng::new(8);
        let mut store = ParamStore::new();
        let sp = SentinelParams::init(&mut store, "s", 3, 4, 5, None, false, &mut rng).unwrap();
        *store.get_mut(sp.gate_input) = Tensor::zeros(&[4, 3]);
        let mut big = Tensor::eye(4);
        big.data_mut().iter_mut().for_each(|x| *x *= 1e3);
        *store.get_mut(sp.gate_state) = big;
        let psi = eval_sentinel_gate(&store, &sp, &random(&[3], &mut rng), &Tensor::vector(vec![1.0; 4]).unwrap()).unwrap();
        assert!(psi.iter().all(|&x| x > 1.0 - 1e-12));
    }

    #[test]
    fn sentinel_with_closed_gate() {
        let (mut store, p) = setup(4, 4, 5, 9);
        let mut rng = SeededRng::new(10);
        let sp = SentinelParams::init(&mut store, "s", 3, 4, 5, None, false, &mut rng).unwrap();
        let s = random(&[4], &mut rng);
        let (e, vec) = eval_sentinel_energy(&store, &p, &sp, &s, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(vec, vec![0.0; 4]);
        // With a zero sentinel vector only W s + b remains.
        let w = store.get(p.query);
        let v = store.get(p.v).data();
        let b = store.get(sp.key_bias).data();
        let expected: f64 = (0..5)
            .map(|i| {
                let ws: f64 = (0..4).map(|j| w.get(i, j) * s.data()[j]).sum();
                v[i] * (ws + b[i]).tanh()
            })
            .sum();
        assert!((e - expected).abs() < 1e-14);
    }

    #[test]
    fn sentinel_attention_normalizes() {
        let (mut store, p) = setup(4, 4, 5, 11);
        let mut rng = SeededRng::new(12);
        let sp = SentinelParams::init(&mut store, "s", 3, 4, 5, None, false, &mut rng).unwrap();
        let out = eval_attend_with_sentinel(
            &store,
            &p,
            &sp,
            &random(&[4], &mut rng),
            &random(&[2, 4], &mut rng),
            &random(&[3], &mut rng),
            &random(&[4], &mut rng),
        )
        .unwrap();
        assert_eq!(out.alphas.len(), 3);
        assert_eq!(out.energies.len(), 3);
        assert!((out.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_sentinel_value_requires_square_dims() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        assert!(SentinelParams::init(&mut store, "s", 3, 4, 5, Some(6), true, &mut rng).is_err());
        let sp = SentinelParams::init(&mut store, "t", 3, 4, 5, Some(5), true, &mut rng).unwrap();
        assert_eq!(sp.value, Some(sp.key));
    }
}
