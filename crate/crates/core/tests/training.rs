//! Persistence, resumption and convergence of the training loops.

mod common;

use std::fs;

use clozeformer::finetune::*;
use clozeformer::optim::Adam;
use clozeformer::pretrain::*;
use clozeformer::rng::rng_for;
use clozeformer::tokenizer::TokenId;
use clozeformer::{ModelConfig, ModelParams, OptimizerConfig};
use common::*;
use rand::Rng;

fn quick_config(steps: u64, seed: u64) -> PretrainConfig {
    PretrainConfig {
        batch_size: 4,
        checkpoint_every: 5,
        seed,
        optimizer: OptimizerConfig {
            warmup_steps: 3,
            total_steps: steps,
            ..OptimizerConfig::default()
        },
        ..PretrainConfig::default()
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p64 = random_model(small_config(30, 16, 2, 20), 0.7, 1);
    p64.save(&dir.path().join("a.ckpt")).unwrap();
    let back = ModelParams::<f64>::load(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(back.config, p64.config);
    for ((_, a), (_, b)) in back.weights.entries().iter().zip(p64.weights.entries()) {
        let bits = |t: &clozeformer::Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let p32 = ModelParams::<f32>::init(small_config(30, 16, 2, 20), 2).unwrap();
    p32.save(&dir.path().join("b.ckpt")).unwrap();
    let back = ModelParams::<f32>::load(&dir.path().join("b.ckpt")).unwrap();
    assert_eq!(back.weights, p32.weights);

    // Saving the reloaded model reproduces the file byte for byte.
    back.save(&dir.path().join("c.ckpt")).unwrap();
    assert_eq!(fs::read(dir.path().join("b.ckpt")).unwrap(), fs::read(dir.path().join("c.ckpt")).unwrap());
}

#[test]
fn wrong_shape_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ModelParams::<f64>::init(small_config(30, 16, 1, 20), 1).unwrap().save(&path).unwrap();
    let mut other = ModelParams::<f64>::init(small_config(31, 16, 1, 20), 1).unwrap();
    assert!(matches!(other.load_into(&path), Err(clozeformer::Error::CheckpointShape { .. })));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = synthetic_corpus(30, 12, 2);
    let config = quick_config(20, 9);
    let init = ModelParams::<f64>::init(small_config(30, 16, 2, 24), 9).unwrap();

    let full = tempfile::tempdir().unwrap();
    let a = pretrain_loop(&corpus, init.clone(), &config, full.path(), &RunControl::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let stop = RunControl { resume: false, stop_after: Some(10) };
    pretrain_loop(&corpus, init.clone(), &config, split.path(), &stop).unwrap();
    // A crash after the checkpoint leaves extra log lines behind.
    let metrics = split.path().join(METRICS_FILE);
    let mut log = fs::read_to_string(&metrics).unwrap();
    log.push_str(&fs::read_to_string(full.path().join(METRICS_FILE)).unwrap().lines().nth(10).unwrap());
    log.push('\n');
    fs::write(&metrics, log).unwrap();

    let resume = RunControl { resume: true, stop_after: None };
    let b = pretrain_loop(&corpus, init, &config, split.path(), &resume).unwrap();
    assert_eq!(b.records.first().map(|r| r.step), Some(11));
    assert_eq!(a.records[10..], b.records[..]);
    for file in [METRICS_FILE, MODEL_FILE, OPTIM_FILE] {
        assert_eq!(
            fs::read(full.path().join(file)).unwrap(),
            fs::read(split.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    assert_eq!(read_metrics(&metrics).unwrap().len(), 20);
}

#[test]
fn seeds_control_the_trajectory() {
    let corpus = synthetic_corpus(30, 12, 3);
    let init = ModelParams::<f64>::init(small_config(30, 16, 1, 24), 4).unwrap();
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        pretrain_loop(&corpus, init.clone(), &quick_config(6, seed), dir.path(), &RunControl::default())
            .unwrap()
            .records
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn joint_pretraining_halves_the_running_loss() {
    // 20 sentences in 5 documents. Document d cycles through its own five
    // ids from a random start; all four objectives mixed.
    let mut rng = rng_for(5, &[]);
    let mut documents = Vec::new();
    let mut sentences = Vec::new();
    for d in 0..5 {
        let sents: Vec<Vec<TokenId>> = (0..4)
            .map(|_| {
                let start = rng.gen_range(0..5);
                (0..rng.gen_range(4..=8)).map(|k| 5 + 5 * d + (start + k) % 5).collect()
            })
            .collect();
        documents.push(sents.concat());
        sentences.push(sents);
    }
    let corpus = Corpus::from_tokens(documents, sentences).unwrap();
    let config = PretrainConfig {
        seed: 5,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            warmup_steps: 20,
            total_steps: 200,
            ..OptimizerConfig::default()
        },
        ..PretrainConfig::default()
    };
    let model = ModelConfig { vocab_size: 30, dropout: 0.0, ..ModelConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain_loop(&corpus, ModelParams::<f64>::init(model, 5).unwrap(), &config, dir.path(), &RunControl::default()).unwrap();
    let mean = |r: &[MetricsRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&out.records[..20]), mean(&out.records[180..]));
    assert!(last < 0.5 * first, "first {first}, last {last}");
}

fn desk(vocab_size: usize, seed: u64) -> ModelParams<f64> {
    ModelParams::init(ModelConfig { vocab_size, ..ModelConfig::default() }, seed).unwrap()
}

#[test]
fn two_class_task_fits_in_fifty_steps() {
    let mut rng = rng_for(6, &[]);
    let data: Vec<ClassifyExample> = (0..200)
        .map(|i| ClassifyExample {
            tokens: vec![5 + (i % 2) as TokenId; rng.gen_range(1..=10)],
            label: i % 2,
        })
        .collect();
    let config = FinetuneConfig {
        mode: FinetuneMode::Classify,
        steps: 50,
        optimizer: OptimizerConfig { lr: 1e-3, warmup_steps: 5, total_steps: 50, ..OptimizerConfig::default() },
        ..FinetuneConfig::default()
    };
    let mut tuner = Finetuner::with_fresh_head(desk(30, 6), config, vec!["a".into(), "b".into()]).unwrap();
    tuner.train(&FinetuneData::Classify(data.clone()), |_, _| {}).unwrap();
    let Head::Classifier(head) = &tuner.head else { unreachable!() };
    let correct = data
        .iter()
        .filter(|ex| {
            let p = classify(&tuner.params, head, &pack_classify(&ex.tokens, 64).unwrap()).unwrap();
            (p[1] > p[0]) as usize == ex.label
        })
        .count();
    assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/200");
}

#[test]
fn span_head_learns_a_marker() {
    let mut rng = rng_for(7, &[]);
    let mut example = || {
        let len = rng.gen_range(4..=12);
        let mut passage: Vec<TokenId> = (0..len).map(|_| rng.gen_range(6..30)).collect();
        let at = rng.gen_range(0..len);
        passage[at] = 5;
        SpanExample { passage, question: vec![5], start: at, end: at }
    };
    let train: Vec<_> = (0..400).map(|_| example()).collect();
    let held: Vec<_> = (0..100).map(|_| example()).collect();
    let config = FinetuneConfig {
        mode: FinetuneMode::Span,
        steps: 150,
        optimizer: OptimizerConfig { lr: 1e-3, warmup_steps: 15, total_steps: 150, ..OptimizerConfig::default() },
        ..FinetuneConfig::default()
    };
    let mut tuner = Finetuner::with_fresh_head(desk(30, 7), config, vec![]).unwrap();
    tuner.train(&FinetuneData::Span(train), |_, _| {}).unwrap();
    let Head::Span(head) = &tuner.head else { unreachable!() };
    let exact = held
        .iter()
        .filter(|ex| {
            let (input, region) = pack_span(&ex.passage, &ex.question, 64).unwrap();
            extract_span(&tuner.params, head, &input, region, 16).unwrap() == (1 + ex.start, 1 + ex.end)
        })
        .count();
    assert!(exact >= 90, "{exact}/100");
}

#[test]
fn optimizer_state_survives_a_save() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = random_model(small_config(30, 8, 1, 16), 0.5, 8);
    let corpus = synthetic_corpus(30, 6, 8);
    let mut opt = Adam::new(quick_config(10, 8).optimizer, &params.shapes()).unwrap();
    let b = batch(&corpus, clozeformer::masks::ObjectiveKind::Seq2Seq, 2, 16, 30, 1);
    pretrain_step(&mut params, &mut opt, &b, 0, 1).unwrap();
    opt.save(&dir.path().join("o.ckpt")).unwrap();
    let mut back = Adam::new(quick_config(10, 8).optimizer, &params.shapes()).unwrap();
    back.load_state(&dir.path().join("o.ckpt")).unwrap();
    assert_eq!(back, opt);
}
