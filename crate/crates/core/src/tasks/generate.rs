//! Seeded synthetic corpora.
//!
//! *Masked copy* stands in for multimodal translation: the target is a random
//! token sequence, source A is the target with some positions replaced by
//! `<mask>`, and source B lists each masked position as a marker `@p`
//! followed by the hidden token. Neither source alone determines the target.
//!
//! *Toy APE* stands in for automatic post-editing: source 0 is a clean
//! sequence, source 1 a corrupted copy (the "MT output"), and the target is
//! the edit script from the corrupted copy back to the clean sequence.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::dataset::{ParallelExample, Source};
use super::edits::{encode_edits, EditOp, DELETE_TOKEN, KEEP_TOKEN};
use super::vocab::Vocab;

pub const MASK_TOKEN: &str = "<mask>";
pub const NONE_TOKEN: &str = "<none>";

fn word(i: usize) -> String {
    format!("w{i}")
}

fn marker(p: usize) -> String {
    format!("@{p}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedCopyParams {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub mask_rate: f64,
}

impl Default for MaskedCopyParams {
    fn default() -> Self {
        Self {
            n: 2000,
            min_len: 8,
            max_len: 12,
            vocab_size: 20,
            mask_rate: 0.3,
        }
    }
}

impl MaskedCopyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate must be in (0, 1), got {}", self.mask_rate)));
        }
        validate_lengths(self.min_len, self.max_len, self.vocab_size)
    }
}

fn validate_lengths(min_len: usize, max_len: usize, vocab_size: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("invalid length range {min_len}..={max_len}")));
    }
    if vocab_size == 0 {
        return Err(Error::Config("vocab_size must be positive".into()));
    }
    Ok(())
}

/// Every token a masked-copy corpus can contain.
pub fn masked_copy_vocab(vocab_size: usize, max_len: usize) -> Vocab {
    let mut tokens: Vec<String> = (0..vocab_size).map(word).collect();
    tokens.push(MASK_TOKEN.to_string());
    tokens.push(NONE_TOKEN.to_string());
    tokens.extend((0..max_len).map(marker));
    Vocab::new(tokens)
}

/// Best expected token accuracy of a model that sees only source A:
/// unmasked positions are copied, masked ones are a uniform guess.
pub fn masked_copy_ceiling(mask_rate: f64, vocab_size: usize) -> f64 {
    1.0 - mask_rate + mask_rate / vocab_size as f64
}

/// Annotation marks each target position with the source it depends on
/// (0 = A, 1 = B).
pub fn gen_masked_copy(seed: u64, params: &MaskedCopyParams) -> Result<Vec<ParallelExample>> {
    params.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let len = rng.range_inclusive(params.min_len, params.max_len);
        let target: Vec<String> = (0..len).map(|_| word(rng.below(params.vocab_size))).collect();
        let mut source_a = Vec::with_capacity(len);
        let mut source_b = Vec::new();
        let mut annotation = Vec::with_capacity(len);
        for (p, tok) in target.iter().enumerate() {
            if rng.bernoulli(params.mask_rate) {
                source_a.push(MASK_TOKEN.to_string());
                source_b.push(marker(p));
                source_b.push(tok.clone());
                annotation.push(1);
            } else {
                source_a.push(tok.clone());
                annotation.push(0);
            }
        }
        if source_b.is_empty() {
            source_b.push(NONE_TOKEN.to_string());
        }
        out.push(ParallelExample {
            sources: vec![Source::Tokens(source_a), Source::Tokens(source_b)],
            target,
            annotation: Some(annotation),
        });
    }
    Ok(out)
}

/// Per-token corruption probabilities of the toy APE "MT output".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionRates {
    pub substitution: f64,
    pub deletion: f64,
    pub insertion: f64,
}

impl CorruptionRates {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.substitution, self.deletion, self.insertion];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) || rates.iter().sum::<f64>() >= 1.0 {
            return Err(Error::Config(format!("invalid corruption rates {self:?}")));
        }
        Ok(())
    }

    /// First-order error rate of the uncorrected output: one edit per
    /// substituted, deleted or inserted token, per reference token.
    pub fn do_nothing_ter(&self) -> f64 {
        self.substitution + self.deletion + self.insertion
    }
}

impl Default for CorruptionRates {
    fn default() -> Self {
        Self {
            substitution: 0.05,
            deletion: 0.03,
            insertion: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyApeParams {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub rates: CorruptionRates,
}

impl Default for ToyApeParams {
    fn default() -> Self {
        Self {
            n: 2000,
            min_len: 8,
            max_len: 12,
            vocab_size: 20,
            rates: CorruptionRates::default(),
        }
    }
}

pub fn toy_ape_vocab(vocab_size: usize) -> Vocab {
    let mut tokens: Vec<String> = (0..vocab_size).map(word).collect();
    tokens.push(KEEP_TOKEN.to_string());
    tokens.push(DELETE_TOKEN.to_string());
    Vocab::new(tokens)
}

/// Expected number of non-Keep ops per sentence before minimization:
/// two per substitution, one per deletion and insertion.
pub fn expected_ape_ops(params: &ToyApeParams) -> f64 {
    let mean_len = (params.min_len + params.max_len) as f64 / 2.0;
    let r = params.rates;
    mean_len * (2.0 * r.substitution + r.deletion + r.insertion)
}

fn corrupt(clean: &[String], params: &ToyApeParams, rng: &mut SeededRng) -> Vec<String> {
    let r = params.rates;
    let mut mt = Vec::with_capacity(clean.len() + 2);
    for tok in clean {
        let u = rng.next_f64();
        if u < r.substitution {
            // A different word, uniformly.
            let current: usize = tok[1..].parse().unwrap();
            let shift = 1 + rng.below(params.vocab_size - 1);
            mt.push(word((current + shift) % params.vocab_size));
        } else if u >= r.substitution + r.deletion {
            mt.push(tok.clone());
        }
        if rng.bernoulli(r.insertion) {
            mt.push(word(rng.below(params.vocab_size)));
        }
    }
    mt
}

/// Sources are `[clean, corrupted]`; the target is the edit script as
/// output tokens.
pub fn gen_toy_ape(seed: u64, params: &ToyApeParams) -> Result<Vec<ParallelExample>> {
    params.rates.validate()?;
    validate_lengths(params.min_len, params.max_len, params.vocab_size)?;
    if params.vocab_size < 2 && params.rates.substitution > 0.0 {
        return Err(Error::Config("substitution needs at least two words".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(params.n);
    while out.len() < params.n {
        let len = rng.range_inclusive(params.min_len, params.max_len);
        let clean: Vec<String> = (0..len).map(|_| word(rng.below(params.vocab_size))).collect();
        let mt = corrupt(&clean, params, &mut rng);
        if mt.is_empty() {
            continue;
        }
        let target = encode_edits(&mt, &clean).iter().map(EditOp::to_token).collect();
        out.push(ParallelExample {
            sources: vec![Source::Tokens(clean), Source::Tokens(mt)],
            target,
            annotation: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_copy_is_seeded() {
        let p = MaskedCopyParams {
            n: 50,
            ..Default::default()
        };
        assert_eq!(gen_masked_copy(3, &p).unwrap(), gen_masked_copy(3, &p).unwrap());
        assert_ne!(gen_masked_copy(3, &p).unwrap(), gen_masked_copy(4, &p).unwrap());
    }

    #[test]
    fn masked_copy_structure() {
        let p = MaskedCopyParams {
            n: 200,
            ..Default::default()
        };
        let vocab = masked_copy_vocab(p.vocab_size, p.max_len);
        for ex in gen_masked_copy(9, &p).unwrap() {
            ex.validate().unwrap();
            let (Source::Tokens(a), Source::Tokens(b)) = (&ex.sources[0], &ex.sources[1]) else {
                panic!("token sources expected");
            };
            assert!((8..=12).contains(&ex.target.len()));
            assert_eq!(a.len(), ex.target.len());
            let ann = ex.annotation.as_ref().unwrap();
            let mut expected_b = Vec::new();
            for (p, t) in ex.target.iter().enumerate() {
                if ann[p] == 1 {
                    assert_eq!(a[p], MASK_TOKEN);
                    expected_b.push(format!("@{p}"));
                    expected_b.push(t.clone());
                } else {
                    assert_eq!(&a[p], t);
                }
            }
            if expected_b.is_empty() {
                expected_b.push(NONE_TOKEN.to_string());
            }
            assert_eq!(b, &expected_b);
            for s in [a, b, &ex.target] {
                vocab.encode(s, "x").unwrap();
            }
        }
    }

    #[test]
    fn tiny_mask_rate_copies_everything() {
        let p = MaskedCopyParams {
            n: 100,
            mask_rate: 1e-12,
            ..Default::default()
        };
        for ex in gen_masked_copy(1, &p).unwrap() {
            assert_eq!(ex.sources[0], Source::Tokens(ex.target.clone()));
            assert_eq!(ex.sources[1], Source::Tokens(vec![NONE_TOKEN.to_string()]));
        }
    }

    #[test]
    fn masked_copy_rejects_bad_params() {
        for rate in [0.0, 1.0, -0.1, f64::NAN] {
            let p = MaskedCopyParams {
                mask_rate: rate,
                ..Default::default()
            };
            assert!(gen_masked_copy(0, &p).is_err());
        }
        let p = MaskedCopyParams {
            min_len: 5,
            max_len: 4,
            ..Default::default()
        };
        assert!(gen_masked_copy(0, &p).is_err());
    }

    #[test]
    fn ceiling_value() {
        assert!((masked_copy_ceiling(0.3, 20) - 0.715).abs() < 1e-15);
    }

    #[test]
    fn clean_ape_is_all_keep() {
        let p = ToyApeParams {
            n: 30,
            rates: CorruptionRates {
                substitution: 0.0,
                deletion: 0.0,
                insertion: 0.0,
            },
            ..Default::default()
        };
        for ex in gen_toy_ape(2, &p).unwrap() {
            assert_eq!(ex.sources[0], ex.sources[1]);
            assert!(ex.target.iter().all(|t| t == KEEP_TOKEN));
        }
    }

    #[test]
    fn ape_rates_validated() {
        for rates in [
            CorruptionRates {
                substitution: 0.5,
                deletion: 0.3,
                insertion: 0.3,
            },
            CorruptionRates {
                substitution: -0.1,
                deletion: 0.0,
                insertion: 0.0,
            },
            CorruptionRates {
                substitution: 1.0,
                deletion: 0.0,
                insertion: 0.0,
            },
        ] {
            let p = ToyApeParams {
                rates,
                ..Default::default()
            };
            assert!(gen_toy_ape(0, &p).is_err());
        }
    }

    #[test]
    fn ape_is_seeded_and_consistent() {
        let p = ToyApeParams {
            n: 100,
            ..Default::default()
        };
        let a = gen_toy_ape(5, &p).unwrap();
        assert_eq!(a, gen_toy_ape(5, &p).unwrap());
        let vocab = toy_ape_vocab(p.vocab_size);
        for ex in &a {
            let (Source::Tokens(clean), Source::Tokens(mt)) = (&ex.sources[0], &ex.sources[1]) else {
                panic!()
            };
            let ops: Vec<EditOp<String>> = ex.target.iter().map(|t| EditOp::from_token(t)).collect();
            assert_eq!(&super::super::edits::apply_edits(mt, &ops).unwrap(), clean);
            vocab.encode(&ex.target, "target").unwrap();
        }
    }
}
