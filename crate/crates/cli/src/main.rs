//! `xfer-eval`: score an emergent-language corpus by how well pretraining on
//! it transfers to human-language modelling.

mod gen;
mod report;
mod run;
mod tokenize;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "xfer-eval", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain on a corpus, fine-tune on every target and print the score.
    Run(run::RunArgs),
    /// Generate a reference corpus.
    Gen(gen::GenArgs),
    /// Train BPE on plain text and write the tokenized corpus.
    Tokenize(tokenize::TokenizeArgs),
    /// Combine score reports into a table with confidence intervals.
    Report(report::ReportArgs),
}

/// Bad input from the user, as opposed to a failure while running.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_error(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

/// 1 for user errors, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let user = err.chain().any(|e| {
        e.is::<UserError>()
            || e.downcast_ref::<xfer_core::Error>()
                .is_some_and(xfer_core::Error::is_user_error)
    });
    if user {
        1
    } else {
        2
    }
}

/// The error chain on one line, skipping causes a message already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run::run(args),
        Command::Gen(args) => gen::gen(args),
        Command::Tokenize(args) => tokenize::tokenize(args),
        Command::Report(args) => report::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
