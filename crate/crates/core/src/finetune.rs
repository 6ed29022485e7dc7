//! Downstream adaptation: sequence classification from the SOS vector,
//! extractive span prediction, and seq2seq fine-tuning by recovering
//! masked target tokens (the final EOS included).

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::masks::ObjectiveKind;
use crate::model::{read_tensor_file, write_tensor_file, ModelParams, PackedInput};
use crate::optim::{Adam, OptimizerConfig, ParamSlot};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, Vocab, MASK, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Classify,
    Span,
    Seq2seq,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(FinetuneMode::Classify),
            "span" => Ok(FinetuneMode::Span),
            "seq2seq" => Ok(FinetuneMode::Seq2seq),
            other => Err(Error::Input(format!("unknown fine-tuning mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Chance that each target token (EOS included) becomes a prediction.
    pub target_mask_prob: f64,
    /// Applies to the seq2seq loss only.
    pub label_smoothing: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the checkpoint's dropout rate when set.
    pub dropout: Option<f64>,
    pub max_span_len: usize,
    pub head_init_std: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Seq2seq,
            target_mask_prob: 0.7,
            label_smoothing: 0.1,
            steps: 300,
            batch_size: 16,
            seed: 0,
            dropout: None,
            max_span_len: 16,
            head_init_std: 0.02,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                warmup_steps: 30,
                total_steps: 300,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_mask_prob > 0.0 && self.target_mask_prob <= 1.0) {
            return Err(Error::Config(format!(
                "target_mask_prob must lie in (0, 1], got {}",
                self.target_mask_prob
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {d}")));
            }
        }
        self.optimizer.validate()
    }
}

/// `softmax(h_SOS · W)` over `C ≥ 2` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    pub w: Tensor<T>,
    pub labels: Vec<String>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn init(hidden: usize, labels: Vec<String>, std: f64, seed: u64) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "classification needs at least two classes, got {}",
                labels.len()
            )));
        }
        let mut rng = rng_for(seed, &[0xC1A5]);
        Ok(ClassifierHead {
            w: Tensor::randn(&[hidden, labels.len()], std, &mut rng),
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Start and end projections, each `1 × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHead<T> {
    pub start: Tensor<T>,
    pub end: Tensor<T>,
}

impl<T: Scalar> SpanHead<T> {
    pub fn init(hidden: usize, std: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x5BA7]);
        SpanHead {
            start: Tensor::randn(&[1, hidden], std, &mut rng),
            end: Tensor::randn(&[1, hidden], std, &mut rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    None,
    Classifier(ClassifierHead<T>),
    Span(SpanHead<T>),
}

impl<T: Scalar> Head<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Head::None => vec![],
            Head::Classifier(h) => vec![("head.classifier", &h.w)],
            Head::Span(h) => vec![("head.span_start", &h.start), ("head.span_end", &h.end)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Head::None => vec![],
            Head::Classifier(h) => vec![&mut h.w],
            Head::Span(h) => vec![&mut h.start, &mut h.end],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = match self {
            Head::None => serde_json::json!({ "kind": "head", "head": "none" }),
            Head::Classifier(h) => {
                serde_json::json!({ "kind": "head", "head": "classifier", "labels": h.labels })
            }
            Head::Span(_) => serde_json::json!({ "kind": "head", "head": "span" }),
        };
        write_tensor_file(path, &meta, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(path)?;
        let bad = |m: &str| Error::CheckpointFormat(format!("{}: {m}", path.display()));
        let tensor = |i: usize| -> Result<Tensor<T>> {
            let arr = file.tensors.get(i).ok_or_else(|| bad("missing head tensor"))?;
            let mut t = Tensor::zeros(&arr.shape);
            arr.assign_to(&mut t)?;
            Ok(t)
        };
        match file.meta.get("head").and_then(|h| h.as_str()) {
            Some("none") => Ok(Head::None),
            Some("classifier") => {
                let labels: Vec<String> = serde_json::from_value(
                    file.meta.get("labels").cloned().unwrap_or_default(),
                )
                .map_err(|_| bad("classifier labels missing"))?;
                Ok(Head::Classifier(ClassifierHead {
                    w: tensor(0)?,
                    labels,
                }))
            }
            Some("span") => Ok(Head::Span(SpanHead {
                start: tensor(0)?,
                end: tensor(1)?,
            })),
            _ => Err(bad("not a head checkpoint")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifyExample {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

/// Token-level span; `start..=end` index the passage tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanExample {
    pub passage: Vec<TokenId>,
    pub question: Vec<TokenId>,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Bidirectional single-segment packing used for classification.
pub fn pack_classify(tokens: &[TokenId], max_len: usize) -> Result<PackedInput> {
    let keep = tokens.len().min(max_len.saturating_sub(2));
    PackedInput::single(ObjectiveKind::Bidirectional, &tokens[..keep])
}

/// `SOS passage EOS question EOS`; the question is truncated to fit. The
/// passage occupies positions `1..=passage.len()`.
pub fn pack_span(passage: &[TokenId], question: &[TokenId], max_len: usize) -> Result<(PackedInput, Range<usize>)> {
    if passage.is_empty() {
        return Err(Error::Input("empty passage region".into()));
    }
    if passage.len() + 3 > max_len {
        return Err(Error::TooLong {
            len: passage.len() + 3,
            max_len,
        });
    }
    let q = &question[..question.len().min(max_len - passage.len() - 3)];
    let input = PackedInput::pair(ObjectiveKind::Bidirectional, passage, q)?;
    Ok((input, 1..1 + passage.len()))
}

/// `SOS source EOS target EOS` under the seq2seq mask. The source is
/// truncated from the end when the pair would overflow.
pub fn pack_seq2seq(source: &[TokenId], target: &[TokenId], max_len: usize) -> Result<PackedInput> {
    let room = max_len.saturating_sub(target.len() + 3);
    if room == 0 || source.is_empty() {
        return Err(Error::TooLong {
            len: source.len() + target.len() + 3,
            max_len,
        });
    }
    PackedInput::pair(ObjectiveKind::Seq2Seq, &source[..source.len().min(room)], target)
}

/// Masks each target-segment position (final EOS included) with
/// probability `p`, forcing at least one. Replacement is always MASK.
pub fn mask_target(input: &PackedInput, p: f64, rng: &mut impl Rng) -> Result<(PackedInput, Vec<(usize, TokenId)>)> {
    let s = match input.objective {
        crate::masks::LMObjective::Seq2Seq { source_len } => source_len,
        _ => return Err(Error::Input("target masking needs a seq2seq input".into())),
    };
    let n = input.len();
    if s >= n {
        return Err(Error::EmptyTargets("empty target segment".into()));
    }
    let mut chosen: Vec<usize> = (s..n).filter(|_| rng.gen::<f64>() < p).collect();
    if chosen.is_empty() {
        chosen.push(rng.gen_range(s..n));
    }
    let mut ids = input.ids.clone();
    let targets = chosen
        .iter()
        .map(|&i| {
            let orig = ids[i];
            ids[i] = MASK;
            (i, orig)
        })
        .collect();
    Ok((PackedInput { ids, ..input.clone() }, targets))
}

/// Highest `start_logits[s] + end_logits[e]` over `s ≤ e ≤ s + max_span_len`;
/// ties keep the lexicographically first pair.
pub fn best_span<T: Scalar>(start_logits: &[T], end_logits: &[T], max_span_len: usize) -> Option<(usize, usize)> {
    let n = start_logits.len().min(end_logits.len());
    let mut best: Option<(T, usize, usize)> = None;
    for s in 0..n {
        for e in s..n.min(s + max_span_len + 1) {
            let score = start_logits[s] + end_logits[e];
            if best.map_or(true, |(b, _, _)| score > b) {
                best = Some((score, s, e));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

/// Class probabilities for one input.
pub fn classify<T: Scalar>(params: &ModelParams<T>, head: &ClassifierHead<T>, input: &PackedInput) -> Result<Vec<T>> {
    let hs = params.forward(input, false, 0)?;
    let h1 = Tensor::new(vec![1, params.config.hidden], hs.last().row(0).to_vec())?;
    let logits = autograd::matmul(&h1, &head.w)?;
    Ok(autograd::softmax_rows(&logits)?.into_data())
}

/// Start and end logits over the passage region.
pub fn span_logits<T: Scalar>(
    params: &ModelParams<T>,
    head: &SpanHead<T>,
    input: &PackedInput,
    region: Range<usize>,
) -> Result<(Vec<T>, Vec<T>)> {
    if region.is_empty() || region.end > input.len() {
        return Err(Error::Input("empty or out-of-range passage region".into()));
    }
    let hs = params.forward(input, false, 0)?;
    let rows: Vec<Vec<T>> = region.map(|i| hs.last().row(i).to_vec()).collect();
    let dot = |w: &Tensor<T>| rows.iter().map(|r| r.iter().zip(w.data()).map(|(&a, &b)| a * b).sum()).collect();
    Ok((dot(&head.start), dot(&head.end)))
}

/// Predicted `(start, end)` positions in the packed input.
pub fn extract_span<T: Scalar>(
    params: &ModelParams<T>,
    head: &SpanHead<T>,
    input: &PackedInput,
    region: Range<usize>,
    max_span_len: usize,
) -> Result<(usize, usize)> {
    let offset = region.start;
    let (s, e) = span_logits(params, head, input, region)?;
    let (bs, be) = best_span(&s, &e, max_span_len).ok_or_else(|| Error::Input("empty passage region".into()))?;
    Ok((offset + bs, offset + be))
}

/// Training examples for one fine-tuning mode.
#[derive(Clone, Debug, PartialEq)]
pub enum FinetuneData {
    Classify(Vec<ClassifyExample>),
    Span(Vec<SpanExample>),
    Seq2seq(Vec<Seq2SeqExample>),
}

impl FinetuneData {
    pub fn len(&self) -> usize {
        match self {
            FinetuneData::Classify(v) => v.len(),
            FinetuneData::Span(v) => v.len(),
            FinetuneData::Seq2seq(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Base model, task head and one optimizer over both.
#[derive(Clone, Debug)]
pub struct Finetuner<T> {
    pub params: ModelParams<T>,
    pub head: Head<T>,
    pub opt: Adam<T>,
    pub config: FinetuneConfig,
}

impl<T: Scalar> Finetuner<T> {
    pub fn new(mut params: ModelParams<T>, head: Head<T>, config: FinetuneConfig) -> Result<Self> {
        config.validate()?;
        let expected = match config.mode {
            FinetuneMode::Classify => matches!(head, Head::Classifier(_)),
            FinetuneMode::Span => matches!(head, Head::Span(_)),
            FinetuneMode::Seq2seq => matches!(head, Head::None),
        };
        if !expected {
            return Err(Error::Config(format!("head does not match mode {:?}", config.mode)));
        }
        if let Some(d) = config.dropout {
            params.config.dropout = d;
        }
        let mut shapes = params.shapes();
        shapes.extend(head.tensors().iter().map(|(_, t)| t.shape().to_vec()));
        let opt = Adam::new(config.optimizer.clone(), &shapes)?;
        Ok(Finetuner {
            params,
            head,
            opt,
            config,
        })
    }

    /// Fresh head for `config.mode`, seeded from `config.seed`.
    pub fn with_fresh_head(params: ModelParams<T>, config: FinetuneConfig, labels: Vec<String>) -> Result<Self> {
        let d = params.config.hidden;
        let head = match config.mode {
            FinetuneMode::Classify => Head::Classifier(ClassifierHead::init(d, labels, config.head_init_std, config.seed)?),
            FinetuneMode::Span => Head::Span(SpanHead::init(d, config.head_init_std, config.seed)),
            FinetuneMode::Seq2seq => Head::None,
        };
        Self::new(params, head, config)
    }

    fn apply(&mut self, g: &mut Graph<T>, vars: &crate::model::ModelVars, head_vars: &[Var], loss: Var, step: u64) -> Result<f64> {
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(loss)?;
        let mut slots = self.params.slots(vars, g);
        for (t, &v) in self.head.tensors_mut().into_iter().zip(head_vars) {
            slots.push(ParamSlot {
                value: t,
                grad: g.grad(v),
                decay: true,
            });
        }
        self.opt.update(slots)?;
        Ok(value)
    }

    fn bind_head(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.head.tensors().into_iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    pub fn classify_step(&mut self, batch: &[ClassifyExample], dropout_seed: u64, step: u64) -> Result<f64> {
        let Head::Classifier(head) = &self.head else {
            return Err(Error::Config("classification step needs a classifier head".into()));
        };
        let c = head.num_classes();
        if let Some(ex) = batch.iter().find(|ex| ex.label >= c) {
            return Err(Error::Index {
                what: "class label",
                index: ex.label,
                limit: c,
            });
        }
        let inputs = batch
            .iter()
            .map(|ex| pack_classify(&ex.tokens, self.params.config.max_len))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let hv = self.bind_head(&mut g);
        let enc = vars.encode(&mut g, &inputs, true, dropout_seed)?;
        let rows: Vec<usize> = (0..inputs.len()).map(|e| enc.row(e, 0)).collect();
        let h1 = g.gather_rows(enc.last(), &rows)?;
        let logits = g.matmul(h1, hv[0])?;
        let labels: Vec<usize> = batch.iter().map(|ex| ex.label).collect();
        let loss = g.cross_entropy(logits, &labels, T::zero())?;
        self.apply(&mut g, &vars, &hv, loss, step)
    }

    /// Loss is CE(start) + CE(end), each averaged over the batch.
    pub fn span_step(&mut self, batch: &[SpanExample], dropout_seed: u64, step: u64) -> Result<f64> {
        if !matches!(self.head, Head::Span(_)) {
            return Err(Error::Config("span step needs a span head".into()));
        }
        let max_len = self.params.config.max_len;
        let mut packed = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.start > ex.end || ex.end >= ex.passage.len() {
                return Err(Error::Input(format!(
                    "answer span {}..={} outside a passage of {} tokens",
                    ex.start,
                    ex.end,
                    ex.passage.len()
                )));
            }
            packed.push(pack_span(&ex.passage, &ex.question, max_len)?);
        }
        let inputs: Vec<PackedInput> = packed.iter().map(|(p, _)| p.clone()).collect();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let hv = self.bind_head(&mut g);
        let enc = vars.encode(&mut g, &inputs, true, dropout_seed)?;
        let mut start_losses = Vec::new();
        let mut end_losses = Vec::new();
        for (e, ((_, region), ex)) in packed.iter().zip(batch).enumerate() {
            let rows: Vec<usize> = region.clone().map(|i| enc.row(e, i)).collect();
            let h = g.gather_rows(enc.last(), &rows)?;
            let sl = g.matmul_nt(hv[0], h)?;
            let el = g.matmul_nt(hv[1], h)?;
            start_losses.push(g.cross_entropy(sl, &[ex.start], T::zero())?);
            end_losses.push(g.cross_entropy(el, &[ex.end], T::zero())?);
        }
        let mut all = start_losses;
        all.extend(end_losses);
        let stacked = g.concat_rows(&all)?;
        let total = g.sum(stacked);
        let loss = g.scale(total, T::one() / T::of(batch.len() as f64));
        self.apply(&mut g, &vars, &hv, loss, step)
    }

    /// Label-smoothed cross-entropy at masked target positions only.
    pub fn seq2seq_step(&mut self, batch: &[Seq2SeqExample], mask_seed: u64, dropout_seed: u64, step: u64) -> Result<f64> {
        let mut rng = rng_for(mask_seed, &[]);
        let max_len = self.params.config.max_len;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for ex in batch {
            let packed = pack_seq2seq(&ex.source, &ex.target, max_len)?;
            let (masked, t) = mask_target(&packed, self.config.target_mask_prob, &mut rng)?;
            inputs.push(masked);
            targets.push(t);
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let enc = vars.encode(&mut g, &inputs, true, dropout_seed)?;
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for (e, t) in targets.iter().enumerate() {
            for &(pos, id) in t {
                rows.push(enc.row(e, pos));
                ids.push(id as usize);
            }
        }
        let logits = vars.lm_logits(&mut g, enc.last(), &rows)?;
        let loss = g.cross_entropy(logits, &ids, T::of(self.config.label_smoothing))?;
        self.apply(&mut g, &vars, &[], loss, step)
    }

    /// Runs `config.steps` updates on batches drawn with replacement.
    /// `on_step` sees each (step, loss).
    pub fn train(&mut self, data: &FinetuneData, mut on_step: impl FnMut(u64, f64)) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyTargets("no fine-tuning examples".into()));
        }
        let mut losses = Vec::with_capacity(self.config.steps as usize);
        while self.opt.step < self.config.steps {
            let step = self.opt.step + 1;
            let seed = self.config.seed;
            let mut rng = rng_for(seed, &[step, 0]);
            let idx: Vec<usize> = (0..self.config.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
            let dropout_seed = derive_seed(seed, &[step, 1]);
            let loss = match data {
                FinetuneData::Classify(v) => {
                    let b: Vec<_> = idx.iter().map(|&i| v[i].clone()).collect();
                    self.classify_step(&b, dropout_seed, step)?
                }
                FinetuneData::Span(v) => {
                    let b: Vec<_> = idx.iter().map(|&i| v[i].clone()).collect();
                    self.span_step(&b, dropout_seed, step)?
                }
                FinetuneData::Seq2seq(v) => {
                    let b: Vec<_> = idx.iter().map(|&i| v[i].clone()).collect();
                    self.seq2seq_step(&b, derive_seed(seed, &[step, 2]), dropout_seed, step)?
                }
            };
            on_step(step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Character extent of each token of `ids` in the text it was encoded from.
fn token_char_spans(vocab: &Vocab, ids: &[TokenId]) -> Vec<Range<usize>> {
    let mut pos = 0;
    ids.iter()
        .map(|&id| {
            let len = if id == UNK {
                1
            } else {
                vocab.token(id).map_or(1, |t| t.chars().count())
            };
            let r = pos..pos + len;
            pos += len;
            r
        })
        .collect()
}

/// Maps a character range `[start, end)` of `passage` onto the first and
/// last tokens it overlaps.
pub fn char_span_to_tokens(vocab: &Vocab, passage_ids: &[TokenId], start: usize, end: usize) -> Result<(usize, usize)> {
    let spans = token_char_spans(vocab, passage_ids);
    let hit: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, r)| r.start < end && start < r.end)
        .map(|(i, _)| i)
        .collect();
    match (hit.first(), hit.last()) {
        (Some(&s), Some(&e)) if start < end => Ok((s, e)),
        _ => Err(Error::Input(format!("answer characters {start}..{end} select no passage token"))),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_tsv<'a>(path: &Path, lineno: usize, line: &'a str) -> Result<(&'a str, &'a str)> {
    line.split_once('\t').ok_or_else(|| {
        Error::Input(format!("{}:{}: expected two tab-separated fields", path.display(), lineno + 1))
    })
}

/// `text<TAB>label` lines; labels are indexed in sorted order.
pub fn load_classify(path: &Path, vocab: &Vocab) -> Result<(Vec<ClassifyExample>, Vec<String>)> {
    let text = read(path)?;
    let rows: Vec<(&str, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| split_tsv(path, i, l))
        .collect::<Result<_>>()?;
    let mut labels: Vec<String> = rows.iter().map(|(_, l)| l.trim().to_string()).collect();
    labels.sort();
    labels.dedup();
    let examples = rows
        .iter()
        .map(|(t, l)| ClassifyExample {
            tokens: vocab.encode(t).ids,
            label: labels.binary_search(&l.trim().to_string()).expect("label collected"),
        })
        .collect();
    Ok((examples, labels))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRecord {
    passage: String,
    question: String,
    answer_start: usize,
    answer_end: usize,
}

/// JSON lines `{passage, question, answer_start, answer_end}` with
/// character offsets `[answer_start, answer_end)` into the passage.
pub fn load_span(path: &Path, vocab: &Vocab) -> Result<Vec<SpanExample>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: SpanRecord = serde_json::from_str(l)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let passage = vocab.encode(&r.passage).ids;
            let (start, end) = char_span_to_tokens(vocab, &passage, r.answer_start, r.answer_end)?;
            Ok(SpanExample {
                passage,
                question: vocab.encode(&r.question).ids,
                start,
                end,
            })
        })
        .collect()
}

/// `source<TAB>target` lines.
pub fn load_seq2seq(path: &Path, vocab: &Vocab) -> Result<Vec<Seq2SeqExample>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (s, t) = split_tsv(path, i, l)?;
            Ok(Seq2SeqExample {
                source: vocab.encode(s).ids,
                target: vocab.encode(t).ids,
            })
        })
        .collect()
}

/// Shuffled copy, for splitting held-out data deterministically.
pub fn shuffled<X: Clone>(items: &[X], seed: u64) -> Vec<X> {
    let mut out = items.to_vec();
    out.shuffle(&mut rng_for(seed, &[0x5407]));
    out
}
