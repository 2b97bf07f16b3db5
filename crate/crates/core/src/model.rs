//! The assembled multi-source encoder-decoder.

use serde::{Deserialize, Serialize};

use crate::combination::{self, CombinationConfig, MultiAttentionParams, SentinelInputs};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::recurrent::{self, DecoderKind, DecoderParams, GruParams};
use crate::rng::SeededRng;
use crate::tasks::{ParallelExample, Source, Vocab, EOS};
use crate::tensor::Tensor;
use crate::trace::{AttentionTrace, TraceRow};

/// Kind of one input source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SourceKind {
    /// Token sequence read by a bidirectional GRU.
    Text,
    /// Feature grid with `dim` features per cell, passed through one affine
    /// layer.
    Grid { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sources: Vec<SourceKind>,
    #[serde(default = "defaults::embed")]
    pub embed_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::attn")]
    pub attn_dim: usize,
    pub combination: CombinationConfig,
    #[serde(default = "defaults::decoder")]
    pub decoder: DecoderKind,
    /// One embedding table for every text source and the target (they
    /// already share a vocabulary).
    #[serde(default)]
    pub tie_embeddings: bool,
    /// One bidirectional GRU for every text source.
    #[serde(default)]
    pub tie_encoders: bool,
}

mod defaults {
    use crate::recurrent::DecoderKind;

    pub fn embed() -> usize {
        32
    }
    pub fn hidden() -> usize {
        32
    }
    pub fn attn() -> usize {
        64
    }
    pub fn decoder() -> DecoderKind {
        DecoderKind::Cgru
    }
}

impl ModelConfig {
    /// Desk-scale defaults: embeddings 32, hidden 32, attention 64.
    pub fn new(sources: Vec<SourceKind>, combination: CombinationConfig, decoder: DecoderKind) -> Self {
        Self {
            sources,
            embed_dim: defaults::embed(),
            hidden_dim: defaults::hidden(),
            attn_dim: defaults::attn(),
            combination,
            decoder,
            tie_embeddings: false,
            tie_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("model needs at least one source".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.sources.iter().any(|s| matches!(s, SourceKind::Grid { dim: 0 })) {
            return Err(Error::Config("grid sources need a positive feature dim".into()));
        }
        self.combination.validate(self.attn_dim)
    }

    /// Encoder state dimension: both GRU directions, or the grid projection.
    pub fn encoder_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    Text {
        embedding: ParamId,
        forward: GruParams,
        backward: GruParams,
    },
    Grid {
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoders: Vec<EncoderParams>,
    pub target_embedding: ParamId,
    pub combination: MultiAttentionParams,
    pub decoder: DecoderParams,
    pub output_weight: ParamId,
    pub output_bias: ParamId,
}

/// A source converted to ids or a feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedSource {
    Tokens(Vec<usize>),
    Grid(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub sources: Vec<EncodedSource>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceModel {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    params: ModelParams,
}

impl MultiSourceModel {
    /// Builds and initializes a model; parameters are a pure function of
    /// `(config, vocab, seed)`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let (e, h, v) = (config.embed_dim, config.hidden_dim, vocab.len());
        let enc_dim = config.encoder_dim();
        let tied = if config.tie_embeddings {
            Some(store.matrix("embedding", v, e, &mut rng)?)
        } else {
            None
        };
        let shared_rnn = if config.tie_encoders {
            Some((
                GruParams::init(&mut store, "enc.fwd", e, h, &mut rng)?,
                GruParams::init(&mut store, "enc.bwd", e, h, &mut rng)?,
            ))
        } else {
            None
        };
        let mut encoders = Vec::with_capacity(config.sources.len());
        for (k, src) in config.sources.iter().enumerate() {
            encoders.push(match *src {
                SourceKind::Text => {
                    let embedding = match tied {
                        Some(id) => id,
                        None => store.matrix(format!("src{k}.embedding"), v, e, &mut rng)?,
                    };
                    let (forward, backward) = match &shared_rnn {
                        Some(pair) => *pair,
                        None => (
                            GruParams::init(&mut store, &format!("src{k}.fwd"), e, h, &mut rng)?,
                            GruParams::init(&mut store, &format!("src{k}.bwd"), e, h, &mut rng)?,
                        ),
                    };
                    EncoderParams::Text {
                        embedding,
                        forward,
                        backward,
                    }
                }
                SourceKind::Grid { dim } => EncoderParams::Grid {
                    weight: store.matrix(format!("src{k}.grid_weight"), enc_dim, dim, &mut rng)?,
                    bias: store.bias(format!("src{k}.grid_bias"), enc_dim)?,
                },
            });
        }
        let target_embedding = match tied {
            Some(id) => id,
            None => store.matrix("tgt.embedding", v, e, &mut rng)?,
        };
        let encoder_dims = vec![enc_dim; config.sources.len()];
        let combination =
            MultiAttentionParams::init(&mut store, &config.combination, h, e, &encoder_dims, config.attn_dim, &mut rng)?;
        let ctx = combination.output_dim(&store);
        let decoder = DecoderParams::init(&mut store, config.decoder, e, ctx, h, &mut rng)?;
        let output_weight = store.matrix("out.weight", v, h + ctx, &mut rng)?;
        let output_bias = store.bias("out.bias", v)?;
        Ok(Self {
            config,
            vocab,
            store,
            params: ModelParams {
                encoders,
                target_embedding,
                combination,
                decoder,
                output_weight,
                output_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn num_sources(&self) -> usize {
        self.config.sources.len()
    }

    /// Maps an example onto vocabulary ids, checking source kinds.
    pub fn encode_example(&self, ex: &ParallelExample) -> Result<EncodedExample> {
        if ex.target.is_empty() {
            return Err(Error::Empty("target"));
        }
        Ok(EncodedExample {
            sources: self.encode_sources(&ex.sources)?,
            target: self.vocab.encode(&ex.target, "target")?,
        })
    }

    pub fn encode_sources(&self, sources: &[Source]) -> Result<Vec<EncodedSource>> {
        if sources.len() != self.num_sources() {
            return Err(Error::Config(format!(
                "model has {} sources, example has {}",
                self.num_sources(),
                sources.len()
            )));
        }
        sources
            .iter()
            .zip(&self.config.sources)
            .enumerate()
            .map(|(k, (src, kind))| match (src, kind) {
                (Source::Tokens(t), SourceKind::Text) => {
                    if t.is_empty() {
                        return Err(Error::Empty("source sequence"));
                    }
                    Ok(EncodedSource::Tokens(self.vocab.encode(t, &format!("source {k}"))?))
                }
                (Source::Grid(rows), SourceKind::Grid { dim }) => {
                    let grid = Tensor::from_rows(rows)?;
                    if grid.cols() != *dim {
                        return Err(Error::Shape {
                            op: "grid source",
                            lhs: grid.shape().to_vec(),
                            rhs: vec![*dim],
                        });
                    }
                    Ok(EncodedSource::Grid(grid))
                }
                _ => Err(Error::Config(format!("source {k} does not match the model's source kind"))),
            })
            .collect()
    }

    fn encode_graph(&self, g: &mut Graph, sources: &[EncodedSource]) -> Result<Vec<NodeId>> {
        sources
            .iter()
            .zip(&self.params.encoders)
            .map(|(src, enc)| match (src, enc) {
                (
                    EncodedSource::Tokens(ids),
                    EncoderParams::Text {
                        embedding,
                        forward,
                        backward,
                    },
                ) => {
                    let table = g.param(*embedding);
                    let inputs = ids.iter().map(|&i| g.embedding(table, i)).collect::<Result<Vec<_>>>()?;
                    recurrent::encode_bidirectional(g, &inputs, forward, backward)
                }
                (EncodedSource::Grid(grid), EncoderParams::Grid { weight, bias }) => {
                    let x = g.input(grid.clone());
                    let w = g.param(*weight);
                    let b = g.param(*bias);
                    let projected = g.matmul_t(x, w)?;
                    g.add_row(projected, b)
                }
                _ => Err(Error::Config("source kind does not match encoder".into())),
            })
            .collect()
    }

    /// Runs one decoder step from embedded input `y` and returns
    /// `(new state, logits, trace row masses)`.
    fn step(
        &self,
        g: &mut Graph,
        memory: &combination::Memory,
        table: NodeId,
        prev_token: usize,
        prev_state: NodeId,
    ) -> Result<(NodeId, NodeId, Vec<f64>)> {
        let y = g.embedding(table, prev_token)?;
        let params = &self.params.combination;
        let sentinel = params.sentinel().map(|_| SentinelInputs {
            embedded: y,
            prev_state,
        });
        let out = recurrent::decoder_step(g, y, prev_state, &self.params.decoder, |g, query| {
            combination::combine(g, params, memory, query, sentinel)
        })?;
        let readout = g.concat(&[out.state, out.combined.context])?;
        let w = g.param(self.params.output_weight);
        let b = g.param(self.params.output_bias);
        let logits = g.matvec(w, readout)?;
        let logits = g.add(logits, b)?;
        Ok((out.state, logits, out.combined.masses(g)))
    }

    fn start(&self, g: &mut Graph, sources: &[EncodedSource]) -> Result<(combination::Memory, NodeId, NodeId)> {
        let encoders = self.encode_graph(g, sources)?;
        let memory = combination::prepare(g, &self.params.combination, &encoders)?;
        let table = g.param(self.params.target_embedding);
        let state = g.input(Tensor::zeros(&[self.config.hidden_dim]));
        Ok((memory, table, state))
    }

    /// Teacher-forced summed cross-entropy over `target ++ [EOS]`.
    ///
    /// Returns the loss node, the number of predicted tokens and the
    /// attention trace (one row per predicted token).
    pub fn loss_graph(&self, g: &mut Graph, ex: &EncodedExample) -> Result<(NodeId, usize, AttentionTrace)> {
        if ex.target.is_empty() {
            return Err(Error::Empty("target"));
        }
        let (memory, table, mut state) = self.start(g, &ex.sources)?;
        let mut trace = self.empty_trace();
        let mut losses = Vec::with_capacity(ex.target.len() + 1);
        let mut prev = EOS;
        for &label in ex.target.iter().chain(std::iter::once(&EOS)) {
            let (s, logits, masses) = self.step(g, &memory, table, prev, state)?;
            losses.push(g.cross_entropy(logits, label)?);
            trace.rows.push(TraceRow { token: label, masses });
            state = s;
            prev = label;
        }
        let total = g.sum(&losses)?;
        Ok((total, losses.len(), trace))
    }

    fn empty_trace(&self) -> AttentionTrace {
        AttentionTrace {
            encoders: self.num_sources(),
            has_sentinel: self.params.combination.sentinel().is_some(),
            rows: Vec::new(),
        }
    }

    /// Summed loss, token count and gradients of the summed loss scaled by
    /// `scale`.
    pub fn example_gradients(&self, ex: &EncodedExample, scale: f64) -> Result<(f64, usize, Gradients)> {
        let mut g = Graph::new(&self.store);
        let (loss, n, _) = self.loss_graph(&mut g, ex)?;
        let scaled = g.scale(loss, scale);
        let grads = g.backward(scaled)?;
        Ok((g.value(loss).item(), n, grads))
    }

    /// Summed loss and token count without gradients.
    pub fn example_loss(&self, ex: &EncodedExample) -> Result<(f64, usize, AttentionTrace)> {
        let mut g = Graph::new(&self.store);
        let (loss, n, trace) = self.loss_graph(&mut g, ex)?;
        Ok((g.value(loss).item(), n, trace))
    }

    /// Mean per-token cross-entropy over a batch and one trace per example.
    pub fn forward_loss(&self, batch: &[EncodedExample]) -> Result<(f64, Vec<AttentionTrace>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let results = crate::exec::map(batch, |ex| self.example_loss(ex));
        let mut total = 0.0;
        let mut tokens = 0;
        let mut traces = Vec::with_capacity(batch.len());
        for r in results {
            let (l, n, t) = r?;
            total += l;
            tokens += n;
            traces.push(t);
        }
        Ok((total / tokens as f64, traces))
    }

    /// Mean per-token loss and its gradients over a batch. Per-example
    /// gradients are summed in batch order, so the result does not depend on
    /// how the examples were scheduled.
    pub fn batch_gradients(&self, batch: &[EncodedExample]) -> Result<(f64, Gradients)> {
        self.batch_gradients_with(batch, crate::exec::Execution::default())
    }

    pub fn batch_gradients_with(&self, batch: &[EncodedExample], mode: crate::exec::Execution) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let tokens: usize = batch.iter().map(|e| e.target.len() + 1).sum();
        let scale = 1.0 / tokens as f64;
        let results = crate::exec::map_with(mode, batch, |ex| self.example_gradients(ex, scale));
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(&self.store);
        for r in results {
            let (l, _, g) = r?;
            total += l;
            grads.add_assign(&g);
        }
        Ok((total * scale, grads))
    }

    /// Greedy decoding: argmax per step (lowest id on ties) until EOS or
    /// `max_len` tokens. The EOS step is not part of the output or trace.
    pub fn greedy_decode(&self, sources: &[EncodedSource], max_len: usize) -> Result<(Vec<usize>, AttentionTrace)> {
        let mut g = Graph::new(&self.store);
        let (memory, table, mut state) = self.start(&mut g, sources)?;
        let mut trace = self.empty_trace();
        let mut out = Vec::new();
        let mut prev = EOS;
        for _ in 0..max_len.max(1) {
            let (s, logits, masses) = self.step(&mut g, &memory, table, prev, state)?;
            let token = argmax(g.value(logits).data());
            if token == EOS {
                break;
            }
            out.push(token);
            trace.rows.push(TraceRow { token, masses });
            state = s;
            prev = token;
        }
        Ok((out, trace))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combination::Strategy;

    fn vocab() -> Vocab {
        Vocab::new(["a", "b", "c", "d"])
    }

    fn small(strategy: Strategy, decoder: DecoderKind) -> MultiSourceModel {
        let mut config = ModelConfig::new(
            vec![SourceKind::Text, SourceKind::Text],
            CombinationConfig::new(strategy, false, false),
            decoder,
        );
        config.embed_dim = 3;
        config.hidden_dim = 4;
        config.attn_dim = 5;
        MultiSourceModel::new(config, vocab(), 1).unwrap()
    }

    fn example(model: &MultiSourceModel) -> EncodedExample {
        model
            .encode_example(&ParallelExample {
                sources: vec![
                    Source::Tokens(vec!["a".into(), "b".into(), "c".into()]),
                    Source::Tokens(vec!["d".into(), "a".into()]),
                ],
                target: vec!["c".into(), "a".into()],
                annotation: None,
            })
            .unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn oov_and_empty_target() {
        let m = small(Strategy::Flat, DecoderKind::Gru);
        let mut ex = ParallelExample {
            sources: vec![Source::Tokens(vec!["a".into()]), Source::Tokens(vec!["zz".into()])],
            target: vec!["a".into()],
            annotation: None,
        };
        match m.encode_example(&ex) {
            Err(Error::OutOfVocabulary { token, position }) => {
                assert_eq!(token, "zz");
                assert_eq!(position, "source 1[0]");
            }
            other => panic!("{other:?}"),
        }
        ex.sources[1] = Source::Tokens(vec!["b".into()]);
        ex.target.clear();
        assert!(m.encode_example(&ex).is_err());
        ex.target = vec!["a".into()];
        ex.sources.pop();
        assert!(m.encode_example(&ex).is_err());
    }

    #[test]
    fn untrained_loss_near_uniform() {
        for strategy in [Strategy::Concat, Strategy::Flat, Strategy::Hierarchical] {
            for decoder in [DecoderKind::Gru, DecoderKind::Cgru] {
                let m = small(strategy, decoder);
                let ex = example(&m);
                let (loss, traces) = m.forward_loss(&[ex.clone(), ex]).unwrap();
                let ln_v = (m.vocab().len() as f64).ln();
                assert!((loss - ln_v).abs() < 0.2 * ln_v, "{loss} vs {ln_v}");
                assert_eq!(traces[0].rows.len(), 3);
            }
        }
    }

    #[test]
    fn loss_is_deterministic() {
        let m = small(Strategy::Hierarchical, DecoderKind::Cgru);
        let ex = example(&m);
        let a = m.forward_loss(&[ex.clone()]).unwrap().0;
        let b = m.forward_loss(&[ex]).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn tied_embeddings_and_encoders_share_parameters() {
        let untied = small(Strategy::Flat, DecoderKind::Cgru);
        let mut config = untied.config().clone();
        config.tie_embeddings = true;
        let tied = MultiSourceModel::new(config.clone(), vocab(), 1).unwrap();
        let table = tied.vocab().len() * 3;
        assert_eq!(untied.num_parameters() - tied.num_parameters(), 2 * table);
        config.tie_encoders = true;
        let shared = MultiSourceModel::new(config, vocab(), 1).unwrap();
        let rnn = tied.num_parameters() - shared.num_parameters();
        assert!(rnn > 0);
        let p = shared.params();
        let EncoderParams::Text { embedding, forward, .. } = &p.encoders[0] else { unreachable!() };
        let EncoderParams::Text { embedding: e1, forward: f1, .. } = &p.encoders[1] else { unreachable!() };
        assert_eq!((embedding, forward), (e1, f1));
        assert_eq!(*embedding, p.target_embedding);
        for m in [&tied, &shared] {
            let report = crate::gradcheck::check_model(m, &[example(m)], 1e-5, None).unwrap();
            assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = small(Strategy::Flat, DecoderKind::Cgru);
        let b = small(Strategy::Flat, DecoderKind::Cgru);
        assert_eq!(a.store(), b.store());
    }

    #[test]
    fn rigged_eos_decodes_empty() {
        let mut m = small(Strategy::Flat, DecoderKind::Cgru);
        let w = m.params().output_weight;
        let b = m.params().output_bias;
        let shape = m.store().get(w).shape().to_vec();
        *m.store_mut().get_mut(w) = Tensor::zeros(&shape);
        let mut bias = vec![0.0; m.vocab().len()];
        bias[EOS] = 10.0;
        *m.store_mut().get_mut(b) = Tensor::vector(bias).unwrap();
        let ex = example(&m);
        let (out, trace) = m.greedy_decode(&ex.sources, 20).unwrap();
        assert!(out.is_empty());
        assert!(trace.rows.is_empty());
    }

    #[test]
    fn decode_respects_max_len_and_is_deterministic() {
        let m = small(Strategy::Concat, DecoderKind::Gru);
        let ex = example(&m);
        let (a, ta) = m.greedy_decode(&ex.sources, 3).unwrap();
        let (b, _) = m.greedy_decode(&ex.sources, 3).unwrap();
        assert!(a.len() <= 3);
        assert_eq!(a, b);
        assert_eq!(ta.rows.len(), a.len());
    }

    #[test]
    fn grid_sources() {
        let mut config = ModelConfig::new(
            vec![SourceKind::Text, SourceKind::Grid { dim: 3 }],
            CombinationConfig::new(Strategy::Hierarchical, false, true),
            DecoderKind::Cgru,
        );
        config.embed_dim = 3;
        config.hidden_dim = 4;
        config.attn_dim = 5;
        let m = MultiSourceModel::new(config, vocab(), 2).unwrap();
        let ex = ParallelExample {
            sources: vec![
                Source::Tokens(vec!["a".into()]),
                Source::Grid(vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.5]]),
            ],
            target: vec!["b".into()],
            annotation: None,
        };
        let enc = m.encode_example(&ex).unwrap();
        let (loss, traces) = m.forward_loss(&[enc]).unwrap();
        assert!(loss.is_finite());
        assert_eq!(traces[0].rows[0].masses.len(), 3);
        let bad = ParallelExample {
            sources: vec![Source::Tokens(vec!["a".into()]), Source::Grid(vec![vec![0.1, 0.2]])],
            ..ex
        };
        assert!(m.encode_example(&bad).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = ModelConfig::new(vec![], CombinationConfig::new(Strategy::Flat, false, false), DecoderKind::Gru);
        assert!(c.validate().is_err());
        c.sources = vec![SourceKind::Text];
        assert!(c.validate().is_ok());
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
        let json = r#"{"sources":[{"kind":"text"}],"combination":{"strategy":"flat"},"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
