#![allow(dead_code)]

use clozeformer::masks::ObjectiveKind;
use clozeformer::pretrain::{make_batch, ClozeBatch, CorruptionPolicy, Corpus};
use clozeformer::rng::rng_for;
use clozeformer::tokenizer::{TokenId, NUM_RESERVED};
use clozeformer::{ModelConfig, ModelParams};
use rand::Rng;

pub fn small_config(vocab_size: usize, hidden: usize, layers: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        layers,
        hidden,
        heads: 2,
        ff_inner: 2 * hidden,
        vocab_size,
        max_len,
        ..ModelConfig::default()
    }
}

/// Model with weights drawn at `std` instead of the usual small init, so
/// outputs are far from uniform.
pub fn random_model(config: ModelConfig, std: f64, seed: u64) -> ModelParams<f64> {
    let config = ModelConfig { init_std: std, ..config };
    let mut p = ModelParams::<f64>::init(config, seed).unwrap();
    // Non-trivial LN gains and biases exercise every term of the backward rule.
    let mut rng = rng_for(seed, &[77]);
    for layer in &mut p.weights.layers {
        for t in [&mut layer.ln1_gain, &mut layer.ln2_gain] {
            t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(0.5..1.5));
        }
        for t in [&mut layer.ln1_bias, &mut layer.ln2_bias, &mut layer.b1, &mut layer.b2, &mut layer.bo] {
            t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.1..0.1));
        }
    }
    p.weights.lm_bias.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.1..0.1));
    p
}

/// Synthetic corpus of random non-reserved tokens: `docs` documents of
/// 2..=4 sentences of 2..=6 tokens.
pub fn synthetic_corpus(vocab_size: usize, docs: usize, seed: u64) -> Corpus {
    let mut rng = rng_for(seed, &[11]);
    let mut documents = Vec::new();
    let mut sentences = Vec::new();
    for _ in 0..docs {
        let n = rng.gen_range(2..=4);
        let sents: Vec<Vec<TokenId>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(2..=6);
                (0..len).map(|_| rng.gen_range(NUM_RESERVED..vocab_size) as TokenId).collect()
            })
            .collect();
        documents.push(sents.concat());
        sentences.push(sents);
    }
    Corpus::from_tokens(documents, sentences).unwrap()
}

pub fn batch(corpus: &Corpus, kind: ObjectiveKind, size: usize, max_len: usize, vocab_size: usize, seed: u64) -> ClozeBatch {
    let mut rng = rng_for(seed, &[kind as u64]);
    make_batch(corpus, kind, size, max_len, vocab_size, &CorruptionPolicy::default(), &mut rng).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}
