//! Mini-batch training with validation, early stopping and learning curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{EncodedExample, EncodedSource, MultiSourceModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate every this many updates.
    pub valid_interval: usize,
    /// Stop after this many validations without a new best validation loss.
    pub patience: usize,
    pub seed: u64,
    /// Stop as soon as validation token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            max_steps: 20_000,
            valid_interval: 250,
            patience: 5,
            seed: 1,
            target_accuracy: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.max_steps == 0 || self.valid_interval == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_steps, valid_interval and patience must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Validation-set scores from teacher-forced loss and greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub bleu: f64,
}

/// Output length bound for greedy decoding: twice the longest source plus
/// a small margin.
pub fn decode_limit(sources: &[EncodedSource]) -> usize {
    let longest = sources
        .iter()
        .map(|s| match s {
            EncodedSource::Tokens(t) => t.len(),
            EncodedSource::Grid(g) => g.rows(),
        })
        .max()
        .unwrap_or(0);
    2 * longest + 4
}

/// Greedy outputs for every example, in order.
pub fn decode_all(model: &MultiSourceModel, examples: &[EncodedExample]) -> Result<Vec<Vec<usize>>> {
    crate::exec::map(examples, |ex| {
        model
            .greedy_decode(&ex.sources, decode_limit(&ex.sources))
            .map(|(out, _)| out)
    })
    .into_iter()
    .collect()
}

pub fn evaluate(model: &MultiSourceModel, examples: &[EncodedExample]) -> Result<EvalReport> {
    let (loss, _) = model.forward_loss(examples)?;
    let hyps = decode_all(model, examples)?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok(EvalReport {
        loss,
        accuracy: metrics::token_accuracy(&hyps, &refs)?,
        bleu: metrics::bleu(&hyps, &refs)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean batch loss since the previous point.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub valid_bleu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Patience,
    TargetAccuracy,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    pub stop: StopReason,
    /// Step of the lowest validation loss, whose parameters were restored.
    pub best_step: usize,
    pub best_valid_loss: f64,
    /// First validated step reaching `target_accuracy`, if any.
    pub target_reached_at: Option<usize>,
}

impl TrainReport {
    /// First validated step at which validation accuracy reached `threshold`.
    pub fn steps_to_accuracy(&self, threshold: f64) -> Option<usize> {
        self.curve.iter().find(|p| p.valid_accuracy >= threshold).map(|p| p.step)
    }
}

pub const CURVE_HEADER: &str = "step\ttrain_loss\tvalid_loss\tvalid_accuracy\tvalid_bleu";

pub fn write_curve<W: Write>(mut out: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for p in curve {
        writeln!(
            out,
            "{}\t{:.9}\t{:.9}\t{:.6}\t{:.6}",
            p.step, p.train_loss, p.valid_loss, p.valid_accuracy, p.valid_bleu
        )?;
    }
    Ok(())
}

fn global_norm(grads: &crate::params::Gradients) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation loss. Batches are drawn from a per-epoch shuffle
/// seeded by `config.seed`, so the whole run is a pure function of the
/// model, data and config. `on_point` sees every curve point as it is
/// produced.
pub fn train(
    model: &mut MultiSourceModel,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    config: &TrainConfig,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if valid_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut adam = Adam::new(config.adam(), model.store())?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(config.batch_size);

    let mut curve = Vec::new();
    let mut best: (f64, usize, ParamStore) = (f64::INFINITY, 0, model.store().clone());
    let mut since_best = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop = StopReason::MaxSteps;
    let mut target_reached_at = None;
    let mut step = 0;

    while step < config.max_steps {
        batch.clear();
        while batch.len() < config.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grads) = model.batch_gradients(&batch)?;
        if let Some(max) = config.clip_norm {
            let norm = global_norm(&grads);
            if norm > max {
                grads.scale(max / norm);
            }
        }
        adam.step(model.store_mut(), &grads)?;
        step += 1;
        loss_sum += loss;
        loss_count += 1;

        if step % config.valid_interval == 0 || step == config.max_steps {
            let eval = evaluate(model, valid_set)?;
            let point = CurvePoint {
                step,
                train_loss: loss_sum / loss_count as f64,
                valid_loss: eval.loss,
                valid_accuracy: eval.accuracy,
                valid_bleu: eval.bleu,
            };
            loss_sum = 0.0;
            loss_count = 0;
            curve.push(point);
            on_point(&point);
            if eval.loss < best.0 {
                best = (eval.loss, step, model.store().clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            if let Some(target) = config.target_accuracy {
                if eval.accuracy >= target {
                    target_reached_at = Some(step);
                    stop = StopReason::TargetAccuracy;
                    break;
                }
            }
            if since_best >= config.patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }
    *model.store_mut() = best.2;
    Ok(TrainReport {
        curve,
        steps: step,
        stop,
        best_step: best.1,
        best_valid_loss: best.0,
        target_reached_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combination::{CombinationConfig, Strategy};
    use crate::model::{ModelConfig, SourceKind};
    use crate::recurrent::DecoderKind;
    use crate::tasks::Vocab;

    fn setup() -> (MultiSourceModel, Vec<EncodedExample>) {
        let mut c = ModelConfig::new(
            vec![SourceKind::Text],
            CombinationConfig::new(Strategy::Flat, false, false),
            DecoderKind::Gru,
        );
        c.embed_dim = 4;
        c.hidden_dim = 6;
        c.attn_dim = 6;
        let model = MultiSourceModel::new(c, Vocab::new(["a", "b", "c"]), 3).unwrap();
        let data = (0..6)
            .map(|i| EncodedExample {
                sources: vec![EncodedSource::Tokens(vec![3 + i % 3, 3 + (i + 1) % 3])],
                target: vec![3 + i % 3, 3 + (i + 1) % 3],
            })
            .collect();
        (model, data)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            batch_size: 3,
            max_steps: 40,
            valid_interval: 10,
            patience: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases() {
        let (mut model, data) = setup();
        let before = model.forward_loss(&data).unwrap().0;
        let report = train(&mut model, &data, &data, &config(), |_| {}).unwrap();
        let after = model.forward_loss(&data).unwrap().0;
        assert!(after < 0.5 * before, "{before} -> {after}");
        assert_eq!(report.curve.len(), 4);
        assert_eq!(report.stop, StopReason::MaxSteps);
        assert!((after - report.best_valid_loss).abs() < 1e-12);
    }

    #[test]
    fn runs_are_reproducible() {
        let (mut a, data) = setup();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &data, &config(), |_| {}).unwrap();
        let rb = train(&mut b, &data, &data, &config(), |_| {}).unwrap();
        assert_eq!(a.store(), b.store());
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_curve(&mut ca, &ra.curve).unwrap();
        write_curve(&mut cb, &rb.curve).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn patience_one_stops_early_on_flat_loss() {
        let (mut model, data) = setup();
        let cfg = TrainConfig { lr: 1e-300, patience: 1, ..config() };
        let report = train(&mut model, &data, &data, &cfg, |_| {}).unwrap();
        assert_eq!(report.steps, 20);
        assert_eq!(report.stop, StopReason::Patience);
    }

    #[test]
    fn rejects_invalid_config() {
        let (mut model, data) = setup();
        let cfg = TrainConfig { patience: 0, ..config() };
        assert!(train(&mut model, &data, &data, &cfg, |_| {}).is_err());
        assert!(train(&mut model, &[], &data, &config(), |_| {}).is_err());
    }
}
