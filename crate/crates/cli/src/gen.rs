use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};
use xfer_core::synthgen::{
    generate, write_generated, GenMetadata, ParenSpec, SynthSpec, UnigramDist, ZipfMandelbrotParams,
};

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(subcommand)]
    pub kind: GenKind,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Total tokens to generate.
    #[arg(long, default_value_t = 15_000_000)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL path; metadata goes to `<stem>.meta.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParenShape {
    #[arg(long, default_value_t = 0.4)]
    pub open_prob: f64,
    #[arg(long, default_value_t = 16)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 64)]
    pub min_len: usize,
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
}

#[derive(Subcommand, Debug)]
pub enum GenKind {
    /// Balanced parentheses over a Zipf–Mandelbrot vocabulary.
    ParenZm {
        /// Distinct bracket words (the corpus vocabulary is twice this).
        #[arg(long, default_value_t = 30_000)]
        vocab: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2.7)]
        beta: f64,
        #[command(flatten)]
        shape: ParenShape,
        #[command(flatten)]
        common: Common,
    },
    /// Balanced parentheses drawn from the unigram distribution of BPE-tokenized text.
    ParenReal {
        /// A `.txt` file or a directory of them.
        #[arg(long)]
        from_text: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        bpe_vocab: usize,
        #[command(flatten)]
        shape: ParenShape,
        #[command(flatten)]
        common: Common,
    },
    /// IID uniform tokens in fixed-length sequences.
    Random {
        #[arg(long, default_value_t = 30_000)]
        vocab: usize,
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn check_shape(shape: &ParenShape) -> Result<()> {
    // Validate the structural knobs before any expensive work.
    let probe = ParenSpec {
        open_prob: shape.open_prob,
        max_depth: shape.max_depth,
        seq_len_range: (shape.min_len, shape.max_len),
        ..ParenSpec::new(UnigramDist::new(vec![1.0])?)
    };
    probe.validate()?;
    Ok(())
}

pub fn gen(args: GenArgs) -> Result<()> {
    let (spec, common) = match args.kind {
        GenKind::ParenZm {
            vocab,
            alpha,
            beta,
            shape,
            common,
        } => {
            check_shape(&shape)?;
            let zm = ZipfMandelbrotParams {
                alpha,
                beta,
                vocab_size: vocab,
            };
            zm.validate()?;
            let spec = SynthSpec::ParenZm {
                zm,
                open_prob: shape.open_prob,
                max_depth: shape.max_depth,
                seq_len_range: (shape.min_len, shape.max_len),
            };
            (spec, common)
        }
        GenKind::ParenReal {
            from_text,
            bpe_vocab,
            shape,
            common,
        } => {
            check_shape(&shape)?;
            let spec = SynthSpec::ParenReal {
                from_text,
                bpe_vocab,
                open_prob: shape.open_prob,
                max_depth: shape.max_depth,
                seq_len_range: (shape.min_len, shape.max_len),
            };
            (spec, common)
        }
        GenKind::Random { vocab, seq_len, common } => (
            SynthSpec::Random {
                vocab_size: vocab,
                seq_len,
            },
            common,
        ),
    };
    let corpus = generate(&spec, common.tokens, common.seed)?;
    let meta = GenMetadata::new(spec, common.seed, &corpus);
    let meta_path = write_generated(&corpus, &meta, &common.out)?;
    log::info!(
        "wrote {} sequences, {} tokens, vocabulary {} to {} ({})",
        corpus.len(),
        corpus.total_tokens(),
        corpus.vocab_size(),
        common.out.display(),
        meta_path.display()
    );
    Ok(())
}
