use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "geomtext",
    version,
    about = "Geometry-text contrastive pretraining for 3D molecules"
)]
pub struct Cli {
    /// Output directory; overrides GEOMTEXT_OUT_DIR and the config file.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Join a directory of XYZ files with an id/text annotation table into a pair corpus.
    BuildData(BuildDataArgs),
    /// Generate the synthetic class-structured corpus.
    SynthData(SynthArgs),
    /// Corpus size, mean heavy-atom count and mean word count.
    Stats(StatsArgs),
    /// Build a token vocabulary from corpus texts.
    BuildVocab(VocabArgs),
    /// Contrastive plus denoising pretraining.
    Pretrain(PretrainArgs),
    /// Zero-shot retrieval in both directions.
    Retrieve(RetrieveArgs),
    /// Fine-tune the property head on per-molecule targets.
    FinetuneProperty(PropertyArgs),
    /// Train the caption decoder by teacher forcing.
    CaptionTrain(TrainArgs),
    /// Greedy captions for every pair.
    CaptionGen(CaptionGenArgs),
    /// BLEU and ROUGE of generated captions against references.
    EvalCaption(EvalCaptionArgs),
    /// Finite-difference check of every training loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct BuildDataArgs {
    /// Directory of single-frame .xyz files; the comment line is the id.
    #[arg(long)]
    pub xyz_dir: PathBuf,
    /// Tab-separated `id<TAB>text` table, header row optional.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Conformers kept per id.
    #[arg(long, default_value_t = 1)]
    pub max_per_id: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also split off this many pairs into test.jsonl.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

/// Settings shared by every training subcommand. Each flag overrides the
/// matching config-file key.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// TOML run config with [paths], [model.*] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub val_pairs: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Starting checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub accum_steps: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the geometric encoder fixed.
    #[arg(long)]
    pub freeze_encoder: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated α values; each is trained and scored on --val-pairs.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Recall cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    pub k: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct PropertyArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Tab-separated `id<TAB>value` table, header row optional.
    #[arg(long)]
    pub targets: PathBuf,
    /// Pairs scored with the fine-tuned head.
    #[arg(long)]
    pub eval_pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CaptionGenArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Token budget including [BOS] and [EOS]; defaults to the decoder limit.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalCaptionArgs {
    /// `id<TAB>candidate<TAB>reference` table as written by caption-gen.
    #[arg(long)]
    pub captions: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}
