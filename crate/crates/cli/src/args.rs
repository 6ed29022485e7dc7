use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "clozeformer",
    version,
    about = "Joint cloze-pretrained Transformer: vocabulary, pretraining, fine-tuning, generation and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a subword vocabulary from a text corpus (one document per line).
    BuildVocab(BuildVocabArgs),
    /// Jointly pretrain on the four cloze objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint for classification, span extraction or seq2seq.
    Finetune(FinetuneArgs),
    /// Generate targets for source lines with beam search or top-k sampling.
    Generate(GenerateArgs),
    /// Score hypothesis lines against reference lines; prints JSON.
    Eval(EvalArgs),
    /// Print an objective's attention mask as a grid (`·` allowed, `x` blocked).
    InspectMask(InspectMaskArgs),
    /// Print a checkpoint's configuration and parameter counts as JSON.
    InspectModel(InspectModelArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration JSON; unknown keys are rejected.
    #[arg(long, env = "CLOZEFORMER_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary size, reserved tokens included.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(6..))]
    pub size: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    /// Overrides the optimizer's total steps; warmup is capped to fit.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub checkpoint_every: Option<u64>,
    /// Output directory for model.ckpt, optim.ckpt, metrics.jsonl and vocab.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Classify,
    Span,
    Seq2seq,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// classify: `text<TAB>label`; span: JSON lines; seq2seq: `source<TAB>target`.
    #[arg(long)]
    pub train: PathBuf,
    /// Pretrained model checkpoint file, or a directory holding model.ckpt.
    #[arg(long)]
    pub init: PathBuf,
    /// Defaults to vocab.json beside the --init checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SearchArg {
    Beam,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenerateObjective {
    /// Target conditioned on the whole source.
    Seq2seq,
    /// Left-to-right continuation of each input line.
    L2r,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Model checkpoint file, or a directory holding model.ckpt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to vocab.json beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value_t = SearchArg::Beam)]
    pub mode: SearchArg,
    #[arg(long, value_enum, default_value_t = GenerateObjective::Seq2seq)]
    pub objective: GenerateObjective,
    /// One source per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Writes generations here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub topk: Option<u64>,
    /// Forbidden repeated n-gram size; 0 disables blocking.
    #[arg(long)]
    pub block_ngram: Option<usize>,
    /// Maximum generated tokens.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_len: Option<u64>,
    /// Truncates each source to this many tokens.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_src_len: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Rouge1,
    Rouge2,
    #[value(name = "rougeL", alias = "rouge-l")]
    RougeL,
    Bleu4,
    Span,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Bidirectional,
    L2r,
    R2l,
    Seq2seq,
}

#[derive(Debug, Args)]
pub struct InspectMaskArgs {
    #[arg(long, value_enum)]
    pub objective: ObjectiveArg,
    /// Source segment length (SOS and EOS included); seq2seq only.
    #[arg(long)]
    pub src_len: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub len: u64,
}

#[derive(Debug, Args)]
pub struct InspectModelArgs {
    /// Model checkpoint file, or a directory holding model.ckpt.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_inspect_mask() {
        let cli = Cli::try_parse_from([
            "clozeformer", "inspect-mask", "--objective", "seq2seq", "--src-len", "4", "--len", "8",
        ])
        .unwrap();
        let Command::InspectMask(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!((a.objective, a.src_len, a.len), (ObjectiveArg::Seq2seq, Some(4), 8));
    }

    #[test]
    fn rejects_zero_beam_and_unknown_flags() {
        let base = ["clozeformer", "generate", "--checkpoint", "c", "--input", "i"];
        assert!(Cli::try_parse_from(base.iter().chain(&["--beam", "0"])).is_err());
        assert!(Cli::try_parse_from(base.iter().chain(&["--bogus"])).is_err());
        assert!(Cli::try_parse_from(base).is_ok());
    }

    #[test]
    fn metric_names() {
        for (name, want) in [("rougeL", MetricArg::RougeL), ("rouge-l", MetricArg::RougeL), ("bleu4", MetricArg::Bleu4)] {
            let cli = Cli::try_parse_from(["clozeformer", "eval", "--metric", name, "--hyp", "h", "--ref", "r"]).unwrap();
            let Command::Eval(a) = cli.command else { panic!("wrong subcommand") };
            assert_eq!(a.metric, want);
        }
    }
}
