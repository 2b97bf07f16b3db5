//! Straight-line reimplementations of the attention and combination
//! formulas, compared against the graph-based versions.

use multiattn::attention::{self, AttentionParams};
use multiattn::combination::{self, CombinationConfig, MultiAttentionParams, Strategy};
use multiattn::params::{ParamId, ParamStore};
use multiattn::rng::SeededRng;
use multiattn::Tensor;

const TOL: f64 = 1e-12;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Replaces every parameter (biases included) with uniform noise.
fn randomize(store: &mut ParamStore, rng: &mut SeededRng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&shape, rng);
    }
}

fn mat(store: &ParamStore, id: ParamId) -> Vec<Vec<f64>> {
    let t = store.get(id);
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn vec_of(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn mv(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(e: &[f64]) -> Vec<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.iter().map(|x| x / z).collect()
}

fn energy(v: &[f64], q: &[f64], k: &[f64]) -> f64 {
    let act: Vec<f64> = add(q, k).iter().map(|x| x.tanh()).collect();
    dot(v, &act)
}

fn weighted(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (w, r) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(r) {
            *o += w * x;
        }
    }
    out
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL, "{what}[{i}]: {x} vs {y}");
    }
}

/// Straight-line attention: returns (alphas, context) and the keys used.
fn oracle_attend(query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e: Vec<f64> = keys.iter().map(|k| energy(v, query, k)).collect();
    let alphas = softmax(&e);
    let ctx = weighted(&alphas, values);
    (alphas, ctx)
}

fn project_keys(store: &ParamStore, m: ParamId, b: ParamId, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let u = mat(store, m);
    let bias = vec_of(store, b);
    h.iter().map(|x| add(&mv(&u, x), &bias)).collect()
}

#[test]
fn single_attention_matches_formula() {
    let mut rng = SeededRng::new(11);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, "att", 4, 6, 5, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    for len in [1, 2, 7] {
        let s = random(&[4], &mut rng);
        let h = random(&[len, 6], &mut rng);
        let out = attention::eval_attend(&store, &p, &s, &h).unwrap();
        let q = mv(&mat(&store, p.query), s.data());
        let keys = project_keys(&store, p.key, p.key_bias, &rows(&h));
        let (alphas, ctx) = oracle_attend(&q, &keys, &rows(&h), &vec_of(&store, p.v));
        assert_close(&out.alphas, &alphas, "alphas");
        assert_close(&out.context, &ctx, "context");
    }
}

struct Case {
    params: MultiAttentionParams,
    store: ParamStore,
    state: Tensor,
    encoders: Vec<Tensor>,
    y: Tensor,
    prev: Tensor,
}

fn case(config: CombinationConfig, seed: u64) -> Case {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let (dec, embed, attn) = (4, 3, 5);
    let dims = [6, 2, 3];
    let params = MultiAttentionParams::init(&mut store, &config, dec, embed, &dims, attn, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let lens = [3, 1, 4];
    Case {
        params,
        store,
        state: random(&[dec], &mut rng),
        encoders: dims.iter().zip(lens).map(|(&d, l)| random(&[l, d], &mut rng)).collect(),
        y: random(&[embed], &mut rng),
        prev: random(&[dec], &mut rng),
    }
}

/// Sentinel (key, value) rows for a query state, following the combined
/// formulation: psi gates the query state, the key adds a bias, the value
/// does not.
fn oracle_sentinel(c: &Case, value_matrix: ParamId) -> (Vec<f64>, Vec<f64>) {
    let sp = c.params.sentinel().unwrap();
    let pre = add(
        &add(&mv(&mat(&c.store, sp.gate_input), c.y.data()), &mv(&mat(&c.store, sp.gate_state), c.prev.data())),
        &vec_of(&c.store, sp.gate_bias),
    );
    let psi: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
    let gated: Vec<f64> = psi.iter().zip(c.state.data()).map(|(a, b)| a * b).collect();
    let key = add(&mv(&mat(&c.store, sp.key), &gated), &vec_of(&c.store, sp.key_bias));
    let value = mv(&mat(&c.store, value_matrix), &gated);
    (key, value)
}

fn run(c: &Case) -> combination::CombinedOutput {
    let inputs = c.params.sentinel().map(|_| (&c.y, &c.prev));
    combination::eval_combine(&c.store, &c.params, &c.state, &c.encoders, inputs).unwrap()
}

#[test]
fn concat_matches_formula() {
    let c = case(CombinationConfig::new(Strategy::Concat, false, false), 3);
    let out = run(&c);
    let MultiAttentionParams::Concat { per_encoder } = &c.params else { unreachable!() };
    let mut ctx = Vec::new();
    for (p, h) in per_encoder.iter().zip(&c.encoders) {
        let q = mv(&mat(&c.store, p.query), c.state.data());
        let keys = project_keys(&c.store, p.key, p.key_bias, &rows(h));
        ctx.extend(oracle_attend(&q, &keys, &rows(h), &vec_of(&c.store, p.v)).1);
    }
    assert_close(&out.context, &ctx, "concat context");
}

#[test]
fn flat_matches_formula() {
    for share in [false, true] {
        for sentinel in [false, true] {
            let attn = 5;
            let mut config = CombinationConfig::new(Strategy::Flat, share, sentinel);
            if share {
                config.ctx_dim = Some(attn);
            }
            let c = case(config, 5 + share as u64 * 2 + sentinel as u64);
            let out = run(&c);
            let MultiAttentionParams::Flat { query, v, keys, values, sentinel: sp, .. } = &c.params else {
                unreachable!()
            };
            let q = mv(&mat(&c.store, *query), c.state.data());
            let mut all_keys = Vec::new();
            let mut all_values = Vec::new();
            for ((h, k), &u_c) in c.encoders.iter().zip(keys).zip(values) {
                all_keys.extend(project_keys(&c.store, k.matrix, k.bias, &rows(h)));
                let u = mat(&c.store, u_c);
                all_values.extend(rows(h).iter().map(|x| mv(&u, x)));
            }
            if let Some(sp) = sp {
                let (key, value) = oracle_sentinel(&c, sp.value.unwrap());
                all_keys.push(key);
                all_values.push(value);
            }
            let (alphas, ctx) = oracle_attend(&q, &all_keys, &all_values, &vec_of(&c.store, *v));
            assert_close(&out.context, &ctx, "flat context");
            let (a, b) = (alphas[..3].iter().sum::<f64>(), alphas[3]);
            assert!((out.masses[0] - a).abs() < TOL && (out.masses[1] - b).abs() < TOL);
            assert_eq!(out.masses.len(), 3 + sentinel as usize);
        }
    }
}

#[test]
fn hierarchical_matches_formula() {
    for share in [false, true] {
        for sentinel in [false, true] {
            let mut config = CombinationConfig::new(Strategy::Hierarchical, share, sentinel);
            if share {
                config.ctx_dim = Some(5);
            }
            let c = case(config, 21 + share as u64 * 2 + sentinel as u64);
            let out = run(&c);
            let MultiAttentionParams::Hierarchical {
                inner_query,
                inner_v,
                inner_keys,
                outer_query,
                outer_v,
                outer_keys,
                values,
                sentinel: sp,
                ..
            } = &c.params
            else {
                unreachable!()
            };
            let q_in = mv(&mat(&c.store, *inner_query), c.state.data());
            let mut outer_k = Vec::new();
            let mut outer_val = Vec::new();
            for (k, h) in c.encoders.iter().enumerate() {
                let keys = project_keys(&c.store, inner_keys[k].matrix, inner_keys[k].bias, &rows(h));
                let (alphas, ctx) = oracle_attend(&q_in, &keys, &rows(h), &vec_of(&c.store, *inner_v));
                assert_close(&out.alphas[k], &alphas, "inner alphas");
                outer_k.push(add(&mv(&mat(&c.store, outer_keys[k].matrix), &ctx), &vec_of(&c.store, outer_keys[k].bias)));
                outer_val.push(mv(&mat(&c.store, values[k]), &ctx));
            }
            if let Some(sp) = sp {
                let (key, value) = oracle_sentinel(&c, sp.value.unwrap());
                outer_k.push(key);
                outer_val.push(value);
            }
            let q_out = mv(&mat(&c.store, *outer_query), c.state.data());
            let (beta, ctx) = oracle_attend(&q_out, &outer_k, &outer_val, &vec_of(&c.store, *outer_v));
            assert_close(out.beta.as_ref().unwrap(), &beta, "beta");
            assert_close(&out.masses, &beta, "masses");
            assert_close(&out.context, &ctx, "hier context");
        }
    }
}

#[test]
fn sentinel_gate_matches_formula() {
    let c = case(CombinationConfig::new(Strategy::Flat, false, true), 40);
    let sp = c.params.sentinel().unwrap();
    let psi = attention::eval_sentinel_gate(&c.store, sp, &c.y, &c.prev).unwrap();
    let pre = add(
        &add(&mv(&mat(&c.store, sp.gate_input), c.y.data()), &mv(&mat(&c.store, sp.gate_state), c.prev.data())),
        &vec_of(&c.store, sp.gate_bias),
    );
    let expected: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
    assert_close(&psi, &expected, "gate");
}
