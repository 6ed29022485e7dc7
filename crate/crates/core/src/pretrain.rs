//! Cloze-task pretraining: corruption of inputs, objective mixing,
//! next-sentence pairs, the joint loss and the training loop.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::masks::ObjectiveKind;
use crate::model::{ModelParams, PackedInput};
use crate::optim::{Adam, OptimizerConfig};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, Vocab, EOS, MASK, NUM_RESERVED, PAD, SOS};

const FRACTION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionPolicy {
    pub mask_prob: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep_original: f64,
    pub span_unigram: f64,
    pub span_bigram_or_trigram: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        CorruptionPolicy {
            mask_prob: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep_original: 0.1,
            span_unigram: 0.8,
            span_bigram_or_trigram: 0.2,
        }
    }
}

impl CorruptionPolicy {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            self.mask_prob,
            self.replace_mask,
            self.replace_random,
            self.keep_original,
            self.span_unigram,
            self.span_bigram_or_trigram,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("corruption fractions must lie in [0, 1]".into()));
        }
        if self.mask_prob <= 0.0 {
            return Err(Error::Config("mask_prob must be positive".into()));
        }
        if (self.replace_mask + self.replace_random + self.keep_original - 1.0).abs() > FRACTION_TOL {
            return Err(Error::Config("replacement fractions must sum to 1".into()));
        }
        if (self.span_unigram + self.span_bigram_or_trigram - 1.0).abs() > FRACTION_TOL {
            return Err(Error::Config("span fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpanKind {
    Unigram,
    Bigram,
    Trigram,
}

impl SpanKind {
    pub fn len(self) -> usize {
        match self {
            SpanKind::Unigram => 1,
            SpanKind::Bigram => 2,
            SpanKind::Trigram => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corruption {
    pub ids: Vec<TokenId>,
    /// `(position, original id)`, ascending by position.
    pub targets: Vec<(usize, TokenId)>,
    /// Replacement drawn for each target, aligned with `targets`.
    pub replacements: Vec<Replacement>,
    /// Span kinds as drawn, before truncation.
    pub spans: Vec<SpanKind>,
}

/// Positions eligible for corruption: everything except SOS, EOS and PAD.
pub fn maskable_positions(ids: &[TokenId]) -> Vec<bool> {
    ids.iter().map(|&id| id != SOS && id != EOS && id != PAD).collect()
}

/// `mask_prob · n` rounded stochastically, so its expectation is exact,
/// then kept within `[1, n]`.
pub fn mask_budget(mask_prob: f64, n: usize, rng: &mut impl Rng) -> usize {
    let expected = mask_prob * n as f64;
    let floor = expected.floor();
    let extra = rng.gen::<f64>() < expected - floor;
    (floor as usize + extra as usize).clamp(1, n)
}

/// Corrupts `ids` until `mask_budget` maskable positions are selected.
/// Spans start at an unselected maskable position and stop early at the
/// budget, at a non-maskable position or at a selected one.
pub fn corrupt(
    ids: &[TokenId],
    maskable: &[bool],
    vocab_size: usize,
    policy: &CorruptionPolicy,
    rng: &mut impl Rng,
) -> Result<Corruption> {
    if ids.len() != maskable.len() {
        return Err(Error::Input("maskable flags must align with ids".into()));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} entries has no corpus tokens to sample"
        )));
    }
    let n_maskable = maskable.iter().filter(|&&m| m).count();
    if n_maskable == 0 {
        return Err(Error::EmptyTargets("sequence has no maskable tokens".into()));
    }
    let budget = mask_budget(policy.mask_prob, n_maskable, rng);

    let mut selected = vec![false; ids.len()];
    let mut spans = Vec::new();
    let mut count = 0;
    let mut free: Vec<usize> = (0..ids.len()).filter(|&i| maskable[i]).collect();
    while count < budget {
        let kind = if rng.gen::<f64>() < policy.span_unigram {
            SpanKind::Unigram
        } else if rng.gen_bool(0.5) {
            SpanKind::Bigram
        } else {
            SpanKind::Trigram
        };
        spans.push(kind);
        let start = free[rng.gen_range(0..free.len())];
        let mut i = start;
        while i < ids.len() && i < start + kind.len() && count < budget && maskable[i] && !selected[i] {
            selected[i] = true;
            count += 1;
            i += 1;
        }
        free.retain(|&p| !selected[p]);
    }

    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(budget);
    let mut replacements = Vec::with_capacity(budget);
    for (pos, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let u: f64 = rng.gen();
        let r = if u < policy.replace_mask {
            Replacement::Mask
        } else if u < policy.replace_mask + policy.replace_random {
            Replacement::Random
        } else {
            Replacement::Keep
        };
        match r {
            Replacement::Mask => out[pos] = MASK,
            Replacement::Random => out[pos] = rng.gen_range(NUM_RESERVED..vocab_size) as TokenId,
            Replacement::Keep => {}
        }
        targets.push((pos, ids[pos]));
        replacements.push(r);
    }
    Ok(Corruption {
        ids: out,
        targets,
        replacements,
        spans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSchedule {
    pub bidirectional: f64,
    pub seq2seq: f64,
    pub left_to_right: f64,
    pub right_to_left: f64,
}

impl Default for MixSchedule {
    fn default() -> Self {
        MixSchedule {
            bidirectional: 1.0 / 3.0,
            seq2seq: 1.0 / 3.0,
            left_to_right: 1.0 / 6.0,
            right_to_left: 1.0 / 6.0,
        }
    }
}

impl MixSchedule {
    /// Weights in [`ObjectiveKind::ALL`] order.
    pub fn weights(&self) -> [f64; 4] {
        [self.bidirectional, self.left_to_right, self.right_to_left, self.seq2seq]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Config("objective weights must lie in [0, 1]".into()));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > FRACTION_TOL {
            return Err(Error::Config("objective weights must sum to 1".into()));
        }
        Ok(())
    }
}

/// Draws the objective shared by a whole batch.
pub fn sample_objective(schedule: &MixSchedule, rng: &mut impl Rng) -> Result<ObjectiveKind> {
    schedule.validate()?;
    let dist = WeightedIndex::new(schedule.weights())
        .map_err(|e| Error::Config(format!("objective weights: {e}")))?;
    Ok(ObjectiveKind::ALL[dist.sample(rng)])
}

/// Splits after `.`, `!` or `?` followed by whitespace; pieces are trimmed
/// and empty ones dropped.
pub fn split_sentences(document: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = document.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    out.push(&document[start..j]);
                    start = j;
                }
            }
        }
    }
    out.push(&document[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Tokenized corpus. Documents are non-empty input lines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<TokenId>>,
    pub sentences: Vec<Vec<Vec<TokenId>>>,
    /// `(document, sentence)` for every sentence with a successor.
    consecutive: Vec<(usize, usize)>,
}

impl Corpus {
    pub fn from_text(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut documents = Vec::new();
        let mut sentences = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let sents: Vec<Vec<TokenId>> = split_sentences(line)
                .into_iter()
                .map(|s| vocab.encode(s).ids)
                .filter(|s| !s.is_empty())
                .collect();
            documents.push(vocab.encode(line).ids);
            sentences.push(sents);
        }
        Self::from_tokens(documents, sentences)
    }

    pub fn from_tokens(documents: Vec<Vec<TokenId>>, sentences: Vec<Vec<Vec<TokenId>>>) -> Result<Self> {
        if documents.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        if documents.len() != sentences.len() {
            return Err(Error::Input("one sentence list per document expected".into()));
        }
        let consecutive = sentences
            .iter()
            .enumerate()
            .flat_map(|(d, s)| (0..s.len().saturating_sub(1)).map(move |i| (d, i)))
            .collect();
        Ok(Corpus {
            documents,
            sentences,
            consecutive,
        })
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab)
    }

    /// A uniformly chosen pair of consecutive sentences.
    pub fn consecutive_pair(&self, rng: &mut impl Rng) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        if self.consecutive.is_empty() {
            return Err(Error::Input(
                "corpus needs a document with at least two sentences".into(),
            ));
        }
        let (d, i) = self.consecutive[rng.gen_range(0..self.consecutive.len())];
        Ok((self.sentences[d][i].clone(), self.sentences[d][i + 1].clone()))
    }

    /// A window of at most `max_tokens` tokens from a uniformly chosen
    /// non-empty document.
    pub fn window(&self, max_tokens: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        let non_empty: Vec<&Vec<TokenId>> = self.documents.iter().filter(|d| !d.is_empty()).collect();
        let doc = non_empty[rng.gen_range(0..non_empty.len())];
        let len = doc.len().min(max_tokens);
        let start = rng.gen_range(0..=doc.len() - len);
        doc[start..start + len].to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn class(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NspPair {
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    pub label: NspLabel,
}

/// Half true successors, half sentences from another document. `force`
/// fixes the branch.
pub fn make_nsp_pair(corpus: &Corpus, rng: &mut impl Rng, force: Option<NspLabel>) -> Result<NspPair> {
    if corpus.sentences.len() < 2 {
        return Err(Error::Input("next-sentence pairs need at least two documents".into()));
    }
    let label = force.unwrap_or_else(|| {
        if rng.gen_bool(0.5) {
            NspLabel::IsNext
        } else {
            NspLabel::NotNext
        }
    });
    if corpus.consecutive.is_empty() {
        return Err(Error::Input(
            "corpus needs a document with at least two sentences".into(),
        ));
    }
    let (d, i) = corpus.consecutive[rng.gen_range(0..corpus.consecutive.len())];
    let a = corpus.sentences[d][i].clone();
    let b = match label {
        NspLabel::IsNext => corpus.sentences[d][i + 1].clone(),
        NspLabel::NotNext => {
            let others: Vec<usize> = (0..corpus.sentences.len())
                .filter(|&o| o != d && !corpus.sentences[o].is_empty())
                .collect();
            if others.is_empty() {
                return Err(Error::Input("no other document to draw a sentence from".into()));
            }
            let o = others[rng.gen_range(0..others.len())];
            let sents = &corpus.sentences[o];
            sents[rng.gen_range(0..sents.len())].clone()
        }
    };
    Ok(NspPair { a, b, label })
}

/// Drops trailing tokens from the longer segment until `SOS a EOS b EOS`
/// fits in `max_len`.
pub fn fit_pair(a: &mut Vec<TokenId>, b: &mut Vec<TokenId>, max_len: usize) -> Result<()> {
    if max_len < 5 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold a sentence pair")));
    }
    while a.len() + b.len() + 3 > max_len {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    Ok(())
}

/// One training batch; every example shares `kind`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeBatch {
    pub kind: ObjectiveKind,
    pub inputs: Vec<PackedInput>,
    pub targets: Vec<Vec<(usize, TokenId)>>,
    pub nsp_labels: Option<Vec<NspLabel>>,
}

impl ClozeBatch {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Packs and corrupts `batch_size` examples for `kind`.
pub fn make_batch(
    corpus: &Corpus,
    kind: ObjectiveKind,
    batch_size: usize,
    max_len: usize,
    vocab_size: usize,
    policy: &CorruptionPolicy,
    rng: &mut impl Rng,
) -> Result<ClozeBatch> {
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    let mut labels = Vec::new();
    for _ in 0..batch_size {
        let packed = match kind {
            ObjectiveKind::Bidirectional => {
                let mut pair = make_nsp_pair(corpus, rng, None)?;
                fit_pair(&mut pair.a, &mut pair.b, max_len)?;
                labels.push(pair.label);
                PackedInput::pair(kind, &pair.a, &pair.b)?
            }
            ObjectiveKind::Seq2Seq => {
                let (mut a, mut b) = corpus.consecutive_pair(rng)?;
                fit_pair(&mut a, &mut b, max_len)?;
                PackedInput::pair(kind, &a, &b)?
            }
            ObjectiveKind::LeftToRight | ObjectiveKind::RightToLeft => {
                let w = corpus.window(max_len.saturating_sub(2).max(1), rng);
                PackedInput::single(kind, &w)?
            }
        };
        let c = corrupt(&packed.ids, &maskable_positions(&packed.ids), vocab_size, policy, rng)?;
        inputs.push(PackedInput { ids: c.ids, ..packed });
        targets.push(c.targets);
    }
    Ok(ClozeBatch {
        kind,
        inputs,
        targets,
        nsp_labels: (kind == ObjectiveKind::Bidirectional).then_some(labels),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub corruption: CorruptionPolicy,
    pub mix: MixSchedule,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 16,
            checkpoint_every: 500,
            seed: 0,
            corruption: CorruptionPolicy::default(),
            mix: MixSchedule::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.corruption.validate()?;
        self.mix.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lm_loss: f64,
    pub nsp_loss: Option<f64>,
    pub lr: f64,
}

/// Mean masked-token cross-entropy, plus next-sentence cross-entropy when
/// the batch carries labels, followed by one optimizer update. `step` only
/// labels errors; the schedule position lives in `opt`.
pub fn pretrain_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Adam<T>,
    batch: &ClozeBatch,
    dropout_seed: u64,
    step: u64,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let (loss, lm, nsp) = batch_loss(&mut g, &vars, batch, true, dropout_seed)?;
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    g.backward(loss)?;
    let lr = opt.update(params.slots(&vars, &g))?;
    Ok(StepStats {
        loss: loss_value,
        lm_loss: g.value(lm).data()[0].as_f64(),
        nsp_loss: nsp.map(|v| g.value(v).data()[0].as_f64()),
        lr,
    })
}

/// Records the joint loss of `batch`; returns (total, masked-LM, NSP).
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &crate::model::ModelVars,
    batch: &ClozeBatch,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(crate::autograd::Var, crate::autograd::Var, Option<crate::autograd::Var>)> {
    if batch.num_targets() == 0 {
        return Err(Error::EmptyTargets("batch has no masked positions".into()));
    }
    let enc = vars.encode(g, &batch.inputs, train_mode, dropout_seed)?;
    let mut rows = Vec::with_capacity(batch.num_targets());
    let mut ids = Vec::with_capacity(batch.num_targets());
    for (e, t) in batch.targets.iter().enumerate() {
        for &(pos, id) in t {
            if pos >= enc.lens[e] {
                return Err(Error::Index {
                    what: "target position",
                    index: pos,
                    limit: enc.lens[e],
                });
            }
            rows.push(enc.row(e, pos));
            ids.push(id as usize);
        }
    }
    let logits = vars.lm_logits(g, enc.last(), &rows)?;
    let lm = g.cross_entropy(logits, &ids, T::zero())?;
    let nsp = match &batch.nsp_labels {
        Some(labels) => {
            let sos_rows: Vec<usize> = (0..batch.inputs.len()).map(|e| enc.row(e, 0)).collect();
            let classes: Vec<usize> = labels.iter().map(|l| l.class()).collect();
            let logits = vars.nsp_logits(g, enc.last(), &sos_rows)?;
            Some(g.cross_entropy(logits, &classes, T::zero())?)
        }
        None => None,
    };
    let total = match nsp {
        Some(n) => g.add(lm, n)?,
        None => lm,
    };
    Ok((total, lm, nsp))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub objective: ObjectiveKind,
    pub loss: f64,
    pub lr: f64,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunControl {
    /// Continue from `out_dir`'s checkpoint when one exists.
    pub resume: bool,
    /// Stop after this global step, as an interruption would.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optimizer: Adam<T>,
    /// Records of the steps run by this call.
    pub records: Vec<MetricsRecord>,
}

/// Per-step batch for a run; a pure function of (corpus, config, step).
pub fn batch_for_step(
    corpus: &Corpus,
    config: &PretrainConfig,
    max_len: usize,
    vocab_size: usize,
    step: u64,
) -> Result<ClozeBatch> {
    let mut rng = rng_for(config.seed, &[step, 0]);
    let kind = sample_objective(&config.mix, &mut rng)?;
    make_batch(corpus, kind, config.batch_size, max_len, vocab_size, &config.corruption, &mut rng)
}

/// Trains for `config.optimizer.total_steps` steps, writing checkpoints and
/// per-step metrics into `out_dir`.
pub fn pretrain_loop<T: Scalar>(
    corpus: &Corpus,
    params: ModelParams<T>,
    config: &PretrainConfig,
    out_dir: &Path,
    control: &RunControl,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model_path = out_dir.join(MODEL_FILE);
    let optim_path = out_dir.join(OPTIM_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut params = params;
    let mut opt = Adam::new(config.optimizer.clone(), &params.shapes())?;
    if control.resume && model_path.exists() {
        params.load_into(&model_path)?;
        opt.load_state(&optim_path)?;
        truncate_metrics(&metrics_path, opt.step)?;
    } else {
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut metrics = BufWriter::new(
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?,
    );
    let (max_len, vocab_size) = (params.config.max_len, params.config.vocab_size);
    let last = control
        .stop_after
        .map_or(config.optimizer.total_steps, |s| s.min(config.optimizer.total_steps));
    let mut records = Vec::new();
    let save = |params: &ModelParams<T>, opt: &Adam<T>| -> Result<()> {
        params.save(&model_path)?;
        opt.save(&optim_path)
    };
    while opt.step < last {
        let step = opt.step + 1;
        let batch = batch_for_step(corpus, config, max_len, vocab_size, step)?;
        let stats = pretrain_step(&mut params, &mut opt, &batch, derive_seed(config.seed, &[step, 1]), step)?;
        let record = MetricsRecord {
            step,
            objective: batch.kind,
            loss: stats.loss,
            lr: stats.lr,
        };
        writeln!(metrics, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
        records.push(record);
        if step % config.checkpoint_every == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save(&params, &opt)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save(&params, &opt)?;
    Ok(PretrainOutcome {
        params,
        optimizer: opt,
        records,
    })
}

/// Keeps the first `steps` lines of a metrics log.
fn truncate_metrics(path: &PathBuf, steps: u64) -> Result<()> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .take(steps as usize)
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?,
        Err(_) => Vec::new(),
    };
    if kept.len() as u64 != steps {
        return Err(Error::Input(format!(
            "{} holds {} records but the checkpoint is at step {steps}",
            path.display(),
            kept.len()
        )));
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
