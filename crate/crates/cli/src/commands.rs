use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clozeformer::decode::{beam_search, sample, strip_eos, LeftToRightScorer, Seq2SeqScorer};
use clozeformer::finetune::{load_classify, load_seq2seq, load_span, FinetuneData, FinetuneMode, Finetuner};
use clozeformer::metrics::{corpus_score, Metric};
use clozeformer::pretrain::{pretrain_loop, Corpus, RunControl, METRICS_FILE, MODEL_FILE};
use clozeformer::rng::derive_seed;
use clozeformer::{AttentionMask, Error, LMObjective, ModelParams, RunConfig, TokenId, Vocab};

use crate::args::*;

pub const VOCAB_FILE: &str = "vocab.json";
pub const CONFIG_FILE: &str = "config.json";
pub const HEAD_FILE: &str = "head.ckpt";

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or flag combinations; exit 1.
    Usage(String),
    /// Unreadable or invalid data, or a numeric failure; exit 2.
    Data(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) => m,
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait Context<T> {
    /// Prefixes the error with the file or flag it concerns.
    fn ctx(self, what: impl Display) -> Outcome<T>;
}

impl<T> Context<T> for clozeformer::Result<T> {
    fn ctx(self, what: impl Display) -> Outcome<T> {
        self.map_err(|e| match e {
            Error::Io { .. } => Failure::Data(e.to_string()),
            e => Failure::Data(format!("{what}: {e}")),
        })
    }
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Outcome<T> {
    r.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::BuildVocab(a) => build_vocab(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Finetune(a) => finetune(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::InspectMask(a) => inspect_mask(a, out),
        Command::InspectModel(a) => inspect_model(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Outcome {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Data(format!("stdout: {e}")))
}

fn load_config(arg: &ConfigArg) -> Outcome<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p).ctx(format!("--config {}", show(p))),
        None => Ok(RunConfig::default()),
    }
}

/// A checkpoint flag names either the file or its directory.
fn model_path(flag: &Path) -> PathBuf {
    if flag.is_dir() {
        flag.join(MODEL_FILE)
    } else {
        flag.to_path_buf()
    }
}

fn sibling_vocab(explicit: Option<&PathBuf>, model: &Path) -> Outcome<Vocab> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => model.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    };
    if explicit.is_none() && !path.exists() {
        return Err(Failure::Usage(format!(
            "no {VOCAB_FILE} beside {}; pass --vocab",
            show(model)
        )));
    }
    Vocab::load(&path).ctx(show(&path))
}

fn load_model(flag: &Path) -> Outcome<(PathBuf, ModelParams<f64>)> {
    let path = model_path(flag);
    let params = ModelParams::load(&path).ctx(show(&path))?;
    Ok((path, params))
}

fn check_vocab(vocab: &Vocab, params: &ModelParams<f64>) -> Outcome {
    if vocab.len() != params.config.vocab_size {
        return Err(Failure::Data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok(())
}

fn write_run_files(dir: &Path, vocab: &Vocab, config: &RunConfig) -> Outcome {
    io(fs::create_dir_all(dir), dir)?;
    vocab.save(&dir.join(VOCAB_FILE)).ctx(show(dir))?;
    let path = dir.join(CONFIG_FILE);
    let json = config.to_json().ctx(show(&path))?;
    io(fs::write(&path, json + "\n"), &path)
}

fn build_vocab(a: BuildVocabArgs, out: &mut dyn Write) -> Outcome {
    let text = io(fs::read_to_string(&a.corpus), &a.corpus)?;
    let docs: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = Vocab::build(&docs, a.size as usize).ctx(show(&a.corpus))?;
    vocab.save(&a.out).ctx(show(&a.out))?;
    emit(out, &format!("wrote {} entries to {}\n", vocab.len(), show(&a.out)))
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Outcome {
    let vocab = Vocab::load(&a.vocab).ctx(show(&a.vocab))?;
    let mut rc = load_config(&a.config)?;
    rc.model.vocab_size = vocab.len();
    rc.pretrain.seed = a.seed;
    if let Some(s) = a.steps {
        let opt = &mut rc.pretrain.optimizer;
        opt.total_steps = s;
        opt.warmup_steps = opt.warmup_steps.min(s);
    }
    if let Some(b) = a.batch_size {
        rc.pretrain.batch_size = b as usize;
    }
    if let Some(k) = a.checkpoint_every {
        rc.pretrain.checkpoint_every = k;
    }
    rc.validate().map_err(|e| Failure::Usage(format!("effective configuration: {e}")))?;
    let corpus = Corpus::load(&a.corpus, &vocab).ctx(show(&a.corpus))?;
    write_run_files(&a.out, &vocab, &rc)?;

    let params = ModelParams::<f64>::init(rc.model.clone(), a.seed).ctx("model")?;
    let control = RunControl {
        resume: a.resume,
        stop_after: None,
    };
    let outcome = pretrain_loop(&corpus, params, &rc.pretrain, &a.out, &control).ctx(show(&a.out))?;
    let tail: Vec<f64> = outcome.records.iter().rev().take(100).map(|r| r.loss).collect();
    let summary = match outcome.records.last() {
        Some(last) => format!(
            "pretrained to step {}; mean loss over the last {} steps {:.4}; wrote {}\n",
            last.step,
            tail.len(),
            tail.iter().sum::<f64>() / tail.len() as f64,
            show(&a.out)
        ),
        None => format!("checkpoint in {} already complete\n", show(&a.out)),
    };
    emit(out, &summary)
}

fn finetune(a: FinetuneArgs, out: &mut dyn Write) -> Outcome {
    let (path, params) = load_model(&a.init)?;
    let vocab = sibling_vocab(a.vocab.as_ref(), &path)?;
    check_vocab(&vocab, &params)?;
    let mut rc = load_config(&a.config)?;
    rc.model = params.config.clone();
    let ft = &mut rc.finetune;
    ft.mode = match a.mode {
        ModeArg::Classify => FinetuneMode::Classify,
        ModeArg::Span => FinetuneMode::Span,
        ModeArg::Seq2seq => FinetuneMode::Seq2seq,
    };
    ft.seed = a.seed;
    if let Some(s) = a.steps {
        ft.steps = s;
        ft.optimizer.total_steps = s;
        ft.optimizer.warmup_steps = ft.optimizer.warmup_steps.min(s);
    }
    if let Some(b) = a.batch_size {
        ft.batch_size = b as usize;
    }
    if let Some(lr) = a.lr {
        ft.optimizer.lr = lr;
    }
    rc.validate().map_err(|e| Failure::Usage(format!("effective configuration: {e}")))?;

    let train = show(&a.train);
    let (data, labels) = match a.mode {
        ModeArg::Classify => {
            let (ex, labels) = load_classify(&a.train, &vocab).ctx(&train)?;
            (FinetuneData::Classify(ex), labels)
        }
        ModeArg::Span => (FinetuneData::Span(load_span(&a.train, &vocab).ctx(&train)?), vec![]),
        ModeArg::Seq2seq => (FinetuneData::Seq2seq(load_seq2seq(&a.train, &vocab).ctx(&train)?), vec![]),
    };
    if data.is_empty() {
        return Err(Failure::Data(format!("{train}: no examples")));
    }

    let mut tuner = Finetuner::with_fresh_head(params, rc.finetune.clone(), labels).ctx("fine-tuning setup")?;
    write_run_files(&a.out, &vocab, &rc)?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut log = String::new();
    let losses = tuner
        .train(&data, |step, loss| {
            log.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
            log.push('\n');
        })
        .ctx(&train)?;
    io(fs::write(&metrics_path, log), &metrics_path)?;
    tuner.params.save(&a.out.join(MODEL_FILE)).ctx(show(&a.out))?;
    tuner.head.save(&a.out.join(HEAD_FILE)).ctx(show(&a.out))?;
    let tail: Vec<f64> = losses.iter().rev().take(20).copied().collect();
    emit(
        out,
        &format!(
            "fine-tuned {} steps; mean loss over the last {} steps {:.4}; wrote {}\n",
            losses.len(),
            tail.len(),
            tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            show(&a.out)
        ),
    )
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Outcome {
    let (path, params) = load_model(&a.checkpoint)?;
    let vocab = sibling_vocab(a.vocab.as_ref(), &path)?;
    check_vocab(&vocab, &params)?;
    let mut dc = load_config(&a.config)?.decode;
    if let Some(b) = a.beam {
        dc.beam_size = b as usize;
    }
    if let Some(k) = a.topk {
        dc.top_k = k as usize;
    }
    if a.block_ngram.is_some() {
        dc.block_ngram = a.block_ngram;
    }
    if let Some(m) = a.max_len {
        dc.max_out_len = m as usize;
    }
    dc.validate()
        .map_err(|e| Failure::Usage(format!("decoding flags: {e}")))?;

    let text = io(fs::read_to_string(&a.input), &a.input)?;
    // Room for SOS, EOS, the MASK slot and one generated token.
    let reserved = match a.objective {
        GenerateObjective::Seq2seq => 4,
        GenerateObjective::L2r => 2,
    };
    let cap = params.config.max_len.saturating_sub(reserved);
    let cap = a.max_src_len.map_or(cap, |m| cap.min(m as usize));
    let mut result = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut src: Vec<TokenId> = vocab.encode(line).ids;
        src.truncate(cap);
        let where_ = || format!("{} line {}", show(&a.input), i + 1);
        let ids = match (a.objective, a.mode) {
            (GenerateObjective::Seq2seq, SearchArg::Beam) => {
                beam_search(&Seq2SeqScorer { params: &params, source: &src }, &dc).ctx(where_())?.ids
            }
            (GenerateObjective::Seq2seq, SearchArg::Sample) => {
                let scorer = Seq2SeqScorer { params: &params, source: &src };
                sample(&scorer, &dc, derive_seed(a.seed, &[i as u64])).ctx(where_())?.ids
            }
            (GenerateObjective::L2r, SearchArg::Beam) => {
                beam_search(&LeftToRightScorer { params: &params, prompt: &src }, &dc).ctx(where_())?.ids
            }
            (GenerateObjective::L2r, SearchArg::Sample) => {
                let scorer = LeftToRightScorer { params: &params, prompt: &src };
                sample(&scorer, &dc, derive_seed(a.seed, &[i as u64])).ctx(where_())?.ids
            }
        };
        result.push_str(&vocab.decode_text(strip_eos(&ids)).ctx(where_())?);
        result.push('\n');
    }
    match &a.out {
        Some(p) => io(fs::write(p, result), p),
        None => emit(out, &result),
    }
}

fn read_lines(path: &Path) -> Outcome<Vec<String>> {
    Ok(io(fs::read_to_string(path), path)?.lines().map(str::to_string).collect())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Outcome {
    let metric = match a.metric {
        MetricArg::Rouge1 => Metric::Rouge1,
        MetricArg::Rouge2 => Metric::Rouge2,
        MetricArg::RougeL => Metric::RougeL,
        MetricArg::Bleu4 => Metric::Bleu4,
        MetricArg::Span => Metric::Span,
    };
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let r: Vec<&str> = refs.iter().map(String::as_str).collect();
    let report = corpus_score(metric, &h, &r).ctx(format!("--hyp {} --ref {}", show(&a.hyp), show(&a.reference)))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
    emit(out, &(json + "\n"))
}

fn inspect_mask(a: InspectMaskArgs, out: &mut dyn Write) -> Outcome {
    let objective = match (a.objective, a.src_len) {
        (ObjectiveArg::Seq2seq, Some(s)) => LMObjective::Seq2Seq { source_len: s },
        (ObjectiveArg::Seq2seq, None) => {
            return Err(Failure::Usage("--src-len is required for --objective seq2seq".into()))
        }
        (_, Some(_)) => return Err(Failure::Usage("--src-len applies to --objective seq2seq only".into())),
        (ObjectiveArg::Bidirectional, None) => LMObjective::Bidirectional,
        (ObjectiveArg::L2r, None) => LMObjective::LeftToRight,
        (ObjectiveArg::R2l, None) => LMObjective::RightToLeft,
    };
    let mask = AttentionMask::build(objective, a.len as usize)
        .map_err(|e| Failure::Usage(format!("--src-len/--len: {e}")))?;
    emit(out, &mask.render())
}

fn inspect_model(a: InspectModelArgs, out: &mut dyn Write) -> Outcome {
    let (path, params) = load_model(&a.checkpoint)?;
    let components: Vec<serde_json::Value> = params
        .component_counts()
        .into_iter()
        .map(|(name, count)| serde_json::json!({ "name": name, "parameters": count }))
        .collect();
    let report = serde_json::json!({
        "checkpoint": show(&path),
        "config": params.config,
        "parameters": params.num_params(),
        "components": components,
    });
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
    emit(out, &(json + "\n"))
}
