use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use xfer_core::corpus::{read_text_dir, write_jsonl};
use xfer_core::tokenizer::tokenize_target;

use crate::user_error;

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    /// A UTF-8 `.txt` file or a directory of them (read in filename order).
    pub text: PathBuf,
    /// BPE vocabulary size, end-of-sequence token included.
    #[arg(long, default_value_t = 30_000)]
    pub vocab: usize,
    /// Output JSONL path; the BPE model goes to `<stem>.bpe.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bpe_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("bpe.json")
}

pub fn tokenize(args: TokenizeArgs) -> Result<()> {
    let text = if args.text.is_dir() {
        read_text_dir(&args.text)?
    } else {
        fs::read_to_string(&args.text).map_err(|e| user_error(format!("{}: {e}", args.text.display())))?
    };
    if text.trim().is_empty() {
        return Err(user_error(format!("{}: no text to tokenize", args.text.display())));
    }
    let (model, corpus) = tokenize_target(&text, args.vocab)?;
    if model.shortfall() > 0 {
        log::warn!(
            "text ran out of repeated pairs: vocabulary {} of the requested {}",
            model.vocab_size(),
            args.vocab
        );
    }
    write_jsonl(&corpus, &args.out)?;
    let model_path = bpe_path(&args.out);
    model.save(&model_path)?;
    log::info!(
        "wrote {} sequences, {} tokens to {}; BPE model ({} merges) to {}",
        corpus.len(),
        corpus.total_tokens(),
        args.out.display(),
        model.merges().len(),
        model_path.display()
    );
    Ok(())
}
