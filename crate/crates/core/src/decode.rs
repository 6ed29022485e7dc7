//! Generation by appending MASK and predicting it: beam search for
//! seq2seq with duplicate n-gram blocking, and top-k sampling for
//! left-to-right continuation.
//!
//! Search is written against [`Scorer`], so any next-token model can be
//! decoded; [`Seq2SeqScorer`] and [`LeftToRightScorer`] wrap the Transformer.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{LMObjective, ObjectiveKind};
use crate::model::{ModelParams, PackedInput};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, TokenSequence, EOS, MASK, SOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_out_len: usize,
    /// `None` picks the mode default (3 for beam, 4 for sampling); `0`
    /// disables blocking.
    pub block_ngram: Option<usize>,
    pub top_k: usize,
    /// Final beam ranking divides the log-probability by `len^length_norm`.
    pub length_norm: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_out_len: 32,
            block_ngram: None,
            top_k: 40,
            length_norm: 0.0,
        }
    }
}

pub const BEAM_BLOCK_DEFAULT: usize = 3;
pub const SAMPLE_BLOCK_DEFAULT: usize = 4;

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.max_out_len == 0 {
            return Err(Error::Config("max_out_len must be at least 1".into()));
        }
        if self.block_ngram == Some(1) {
            return Err(Error::Config("block_ngram must be 0 (off) or at least 2".into()));
        }
        if !self.length_norm.is_finite() || self.length_norm < 0.0 {
            return Err(Error::Config("length_norm must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn block(&self, default: usize) -> Option<usize> {
        match self.block_ngram.unwrap_or(default) {
            0 => None,
            n => Some(n),
        }
    }
}

/// Next-token model over a growing output prefix.
pub trait Scorer {
    fn vocab_size(&self) -> usize;

    /// Longest output the scorer can extend to.
    fn max_output_len(&self) -> usize;

    /// Natural-log probabilities of every next token after `prefix`.
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let x: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `SOS source EOS prefix MASK` under the seq2seq mask.
pub fn pack_generation(source: &[TokenId], prefix: &[TokenId]) -> Result<PackedInput> {
    let (s0, s1) = ObjectiveKind::Seq2Seq.segment_ids();
    let s = source.len() + 2;
    let mut ids = Vec::with_capacity(s + prefix.len() + 1);
    ids.push(SOS);
    ids.extend_from_slice(source);
    ids.push(EOS);
    ids.extend_from_slice(prefix);
    ids.push(MASK);
    let segments = (0..ids.len()).map(|i| if i < s { s0 } else { s1 }).collect();
    PackedInput::new(ids, segments, LMObjective::Seq2Seq { source_len: s })
}

fn logits_at_last<T: Scalar>(params: &ModelParams<T>, input: &PackedInput) -> Result<Vec<T>> {
    if input.len() > params.config.max_len {
        return Err(Error::TooLong {
            len: input.len(),
            max_len: params.config.max_len,
        });
    }
    let hs = params.forward(input, false, 0)?;
    let last = input.len() - 1;
    Ok(params.lm_logits(hs.last(), &[last])?.into_data())
}

/// Distribution of the token at the MASK appended after `prefix`.
pub fn next_token_dist<T: Scalar>(params: &ModelParams<T>, source: &[TokenId], prefix: &[TokenId]) -> Result<Vec<T>> {
    let input = pack_generation(source, prefix)?;
    Ok(softmax(&logits_at_last(params, &input)?))
}

pub struct Seq2SeqScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub source: &'a [TokenId],
}

impl<T: Scalar> Scorer for Seq2SeqScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn max_output_len(&self) -> usize {
        // SOS, EOS and the trailing MASK take three positions.
        (self.params.config.max_len + 1).saturating_sub(self.source.len() + 3)
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let input = pack_generation(self.source, prefix)?;
        Ok(log_softmax(&logits_at_last(self.params, &input)?))
    }
}

/// Continues `SOS prompt generated MASK` under the left-to-right mask.
pub struct LeftToRightScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub prompt: &'a [TokenId],
}

impl<'a, T: Scalar> LeftToRightScorer<'a, T> {
    pub fn pack(&self, prefix: &[TokenId]) -> Result<PackedInput> {
        let mut ids = Vec::with_capacity(self.prompt.len() + prefix.len() + 2);
        ids.push(SOS);
        ids.extend_from_slice(self.prompt);
        ids.extend_from_slice(prefix);
        ids.push(MASK);
        let seg = ObjectiveKind::LeftToRight.segment_ids().0;
        let n = ids.len();
        PackedInput::new(ids, vec![seg; n], LMObjective::LeftToRight)
    }
}

impl<T: Scalar> Scorer for LeftToRightScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn max_output_len(&self) -> usize {
        (self.params.config.max_len + 1).saturating_sub(self.prompt.len() + 2)
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(log_softmax(&logits_at_last(self.params, &self.pack(prefix)?)?))
    }
}

/// True when appending `next` to `ids` repeats an `n`-gram already in `ids`.
pub fn creates_duplicate_ngram(ids: &[TokenId], next: TokenId, n: usize) -> bool {
    if n == 0 || ids.len() + 1 < n {
        return false;
    }
    let tail = &ids[ids.len() + 1 - n..];
    ids.windows(n)
        .any(|w| w[..n - 1] == *tail && w[n - 1] == next)
}

/// True when some `n`-gram occurs twice in `ids`.
pub fn has_duplicate_ngram(ids: &[TokenId], n: usize) -> bool {
    if n == 0 || ids.len() < n {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    ids.windows(n).any(|w| !seen.insert(w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn ended_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ranking score `log_prob / len^length_norm`.
    pub fn score(&self, length_norm: f64) -> f64 {
        if length_norm == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.ids.len().max(1) as f64).powf(length_norm)
        }
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis, length_norm: f64) -> Ordering {
    b.score(length_norm)
        .total_cmp(&a.score(length_norm))
        .then(a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search. Hypotheses finish on EOS or at the length limit; the
/// result is the best finished one.
pub fn beam_search<S: Scorer>(scorer: &S, config: &DecodeConfig) -> Result<Hypothesis> {
    config.validate()?;
    let block = config.block(BEAM_BLOCK_DEFAULT);
    let max_len = config.max_out_len.min(scorer.max_output_len());
    if max_len == 0 {
        return Err(Error::TooLong {
            len: usize::MAX,
            max_len: 0,
        });
    }
    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        // (score, beam index, token)
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.ids)?;
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as TokenId;
                if l == f64::NEG_INFINITY || block.is_some_and(|n| creates_duplicate_ngram(&h.ids, tok, n)) {
                    continue;
                }
                cands.push((h.log_prob + l, b, tok));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(config.beam_size);
        for (rank_idx, &(score, b, tok)) in cands.iter().enumerate() {
            if next.len() == config.beam_size {
                break;
            }
            let mut ids = live[b].ids.clone();
            ids.push(tok);
            let done = tok == EOS || ids.len() >= max_len;
            let h = Hypothesis {
                ids,
                log_prob: score,
                finished: done,
            };
            if done {
                if rank_idx < config.beam_size {
                    finished.push(h);
                }
            } else {
                next.push(h);
            }
        }
        live = next;
        if config.length_norm == 0.0 && finished.len() >= config.beam_size {
            // Log-probabilities only fall, so no live hypothesis can win.
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, config.length_norm));
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Input("every beam candidate was blocked; no finished hypothesis".into()))
}

/// Top-k sampling with duplicate n-gram removal. The candidate set is the
/// `top_k` most probable tokens minus blocked ones; if it empties, EOS is
/// emitted.
pub fn sample<S: Scorer>(scorer: &S, config: &DecodeConfig, seed: u64) -> Result<TokenSequence> {
    config.validate()?;
    let block = config.block(SAMPLE_BLOCK_DEFAULT);
    let max_len = config.max_out_len.min(scorer.max_output_len());
    let mut rng = rng_for(seed, &[0x5A3E]);
    let mut ids: Vec<TokenId> = Vec::new();
    while ids.len() < max_len {
        let lp = scorer.log_probs(&ids)?;
        let mut order: Vec<usize> = (0..lp.len()).collect();
        order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        order.truncate(config.top_k);
        order.retain(|&t| {
            lp[t] > f64::NEG_INFINITY && !block.is_some_and(|n| creates_duplicate_ngram(&ids, t as TokenId, n))
        });
        if order.is_empty() {
            ids.push(EOS);
            break;
        }
        let top = lp[order[0]];
        let weights: Vec<f64> = order.iter().map(|&t| (lp[t] - top).exp()).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Input(format!("sampling weights: {e}")))?;
        let tok = order[dist.sample(&mut rng)] as TokenId;
        ids.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(TokenSequence { ids, source_text: None })
}

/// Left-to-right continuation of `prompt`.
pub fn sample_lr<T: Scalar>(params: &ModelParams<T>, prompt: &[TokenId], config: &DecodeConfig, seed: u64) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(Error::Input("sampling needs a non-empty prompt".into()));
    }
    sample(&LeftToRightScorer { params, prompt }, config, seed)
}

/// Generated ids without the terminating EOS.
pub fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Fixed next-token table keyed on the last token (or start).
    struct Markov {
        table: Vec<Vec<f64>>,
        start: Vec<f64>,
        max: usize,
    }

    impl Scorer for Markov {
        fn vocab_size(&self) -> usize {
            self.start.len()
        }
        fn max_output_len(&self) -> usize {
            self.max
        }
        fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            let p = match prefix.last() {
                None => &self.start,
                Some(&t) => &self.table[t as usize],
            };
            Ok(p.iter().map(|x| x.ln()).collect())
        }
    }

    /// Tokens 5,6,7 cycle with high probability; EOS is unlikely.
    fn cycle_model() -> Markov {
        let v = 8;
        let mut table = vec![vec![0.01; v]; v];
        for (from, to) in [(5, 6), (6, 7), (7, 5)] {
            table[from][to] = 0.9;
        }
        for row in &mut table {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let mut start = vec![0.01; v];
        start[5] = 0.9;
        let s: f64 = start.iter().sum();
        start.iter_mut().for_each(|x| *x /= s);
        Markov { table, start, max: 12 }
    }

    #[test]
    fn ngram_checks() {
        assert!(creates_duplicate_ngram(&[5, 6, 7, 5, 6], 7, 3));
        assert!(!creates_duplicate_ngram(&[5, 6, 7, 5, 6], 5, 3));
        assert!(!creates_duplicate_ngram(&[5], 6, 3));
        assert!(has_duplicate_ngram(&[1, 2, 1, 2], 2));
        assert!(!has_duplicate_ngram(&[1, 2, 3, 1], 2));
    }

    #[test]
    fn blocking_removes_repeated_trigrams() {
        let m = cycle_model();
        let config = DecodeConfig {
            beam_size: 3,
            max_out_len: 12,
            block_ngram: Some(3),
            ..DecodeConfig::default()
        };
        let h = beam_search(&m, &config).unwrap();
        assert!(!has_duplicate_ngram(&h.ids, 3));
        let unblocked = beam_search(&m, &DecodeConfig { block_ngram: Some(0), ..config }).unwrap();
        assert!(has_duplicate_ngram(&unblocked.ids, 3));
    }

    #[test]
    fn width_one_unblocked_is_greedy() {
        let m = cycle_model();
        let config = DecodeConfig {
            beam_size: 1,
            max_out_len: 7,
            block_ngram: Some(0),
            ..DecodeConfig::default()
        };
        let h = beam_search(&m, &config).unwrap();
        let mut greedy = Vec::new();
        while greedy.len() < 7 {
            let lp = m.log_probs(&greedy).unwrap();
            let t = (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap() as TokenId;
            greedy.push(t);
            if t == EOS {
                break;
            }
        }
        assert_eq!(h.ids, greedy);
    }

    #[test]
    fn log_prob_is_non_increasing_and_matches_sum() {
        let m = cycle_model();
        let h = beam_search(&m, &DecodeConfig { beam_size: 4, ..DecodeConfig::default() }).unwrap();
        let mut total = 0.0;
        for i in 0..h.ids.len() {
            let step = m.log_probs(&h.ids[..i]).unwrap()[h.ids[i] as usize];
            assert!(step <= 0.0);
            total += step;
        }
        assert!((total - h.log_prob).abs() < 1e-12);
    }

    #[test]
    fn sampling_top1_is_argmax_chain_and_seeded() {
        let m = cycle_model();
        let config = DecodeConfig {
            top_k: 1,
            max_out_len: 6,
            block_ngram: Some(0),
            ..DecodeConfig::default()
        };
        assert_eq!(sample(&m, &config, 1).unwrap().ids, vec![5, 6, 7, 5, 6, 7]);
        let c = DecodeConfig { top_k: 5, ..config };
        assert_eq!(sample(&m, &c, 9).unwrap(), sample(&m, &c, 9).unwrap());
    }

    #[test]
    fn exhausted_candidates_emit_eos() {
        let m = cycle_model();
        let config = DecodeConfig {
            top_k: 1,
            max_out_len: 12,
            block_ngram: Some(2),
            ..DecodeConfig::default()
        };
        let out = sample(&m, &config, 0).unwrap();
        assert_eq!(out.ids, vec![5, 6, 7, 5, EOS]);
    }

    fn model() -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig {
                layers: 2,
                hidden: 16,
                heads: 2,
                ff_inner: 32,
                vocab_size: 20,
                max_len: 16,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn distribution_sums_to_one() {
        let p = model();
        let d = next_token_dist(&p, &[5, 6, 7], &[8]).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokens_after_mask_do_not_matter() {
        let p = model();
        let base = pack_generation(&[5, 6], &[7]).unwrap();
        let mut extended = base.clone();
        extended.ids.extend([9, 10, 11]);
        extended.segments.extend([5, 5, 5]);
        extended.positions.extend([6, 7, 8]);
        let mask_pos = base.len() - 1;
        let a = p.forward(&base, false, 0).unwrap();
        let b = p.forward(&extended, false, 0).unwrap();
        assert_eq!(a.last().row(mask_pos), b.last().row(mask_pos));
    }

    #[test]
    fn overflow_is_too_long() {
        let p = model();
        assert!(matches!(next_token_dist(&p, &[5; 12], &[6; 3]), Err(Error::TooLong { .. })));
        let scorer = Seq2SeqScorer { params: &p, source: &[5; 10] };
        assert_eq!(scorer.max_output_len(), 4);
        let h = beam_search(&scorer, &DecodeConfig::default()).unwrap();
        assert!(h.ids.len() <= 4);
    }

    #[test]
    fn left_to_right_sampling_on_a_model() {
        let p = model();
        let config = DecodeConfig { max_out_len: 10, ..DecodeConfig::default() };
        let a = sample_lr(&p, &[5, 6], &config, 3).unwrap();
        assert_eq!(a, sample_lr(&p, &[5, 6], &config, 3).unwrap());
        assert!(!has_duplicate_ngram(&a.ids, 4));
        assert!(sample_lr(&p, &[], &config, 3).is_err());
    }
}
