use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memedial::corpus::{EmotionSet, GeneratorSpec, MemeCatalog};
use memedial::pipeline::{
    evaluate, train, write_synthetic_corpus, ChatSession, RunConfig, Trained, CATALOG_FILE,
    EMOTIONS_FILE,
};
use memedial::Error;

/// Meme-incorporated dialogue: corpus generation, training, evaluation and chat.
#[derive(Parser)]
#[command(name = "memedial", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, catalog, emotion set and split.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_dialogues: usize,
        #[arg(long, default_value_t = 40)]
        n_memes: usize,
        #[arg(long, default_value_t = 8)]
        n_emotions: usize,
        #[arg(long, default_value_t = 20)]
        n_unseen: usize,
        #[arg(long, default_value_t = 0.5)]
        meme_fidelity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one task and write a checkpoint plus a CSV loss log.
    Train {
        #[arg(long)]
        task: u8,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on one partition and write a metrics report.
    Eval {
        #[arg(long)]
        task: u8,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "valid_seen")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Interactive loop: reply, attach a meme, name its emotion. `/quit` exits.
    Chat {
        #[arg(long)]
        ckpt_gen: PathBuf,
        #[arg(long)]
        ckpt_ret: PathBuf,
        #[arg(long)]
        ckpt_emo: PathBuf,
        /// Directory holding catalog.json and emotions.json.
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam_size: usize,
        #[arg(long, default_value_t = 32)]
        max_generation_tokens: usize,
    },
}

/// Overrides applied on top of `--config` (or the checkpoint's own run
/// configuration for `eval`).
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the four files written by gen-corpus.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_context_tokens: Option<usize>,
    #[arg(long)]
    max_response_tokens: Option<usize>,
    #[arg(long)]
    token_init_std: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    negatives_per_positive: Option<usize>,
    /// Task 2 probability of renaming each candidate-meme token per item.
    #[arg(long)]
    meme_token_swap: Option<f64>,
    /// Task 3 without emotion flow.
    #[arg(long)]
    no_ef: bool,
    /// Task 3 without emotion-description prediction.
    #[arg(long)]
    no_edp: bool,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_generation_tokens: Option<usize>,
    #[arg(long)]
    max_eval_examples: Option<usize>,
    /// Candidates per retrieval query at evaluation.
    #[arg(long)]
    n_candidates: Option<usize>,
}

impl RunArgs {
    fn apply(&self, mut c: RunConfig) -> RunConfig {
        if let Some(dir) = &self.corpus_dir {
            c = c.with_corpus_dir(dir);
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })* };
        }
        set!(
            epochs,
            batch_size,
            learning_rate,
            warmup_steps,
            seed,
            n_layers,
            n_heads,
            d_model,
            d_ff,
            max_context_tokens,
            max_response_tokens,
            token_init_std,
            margin,
            negatives_per_positive,
            meme_token_swap,
            beam_size,
            max_generation_tokens,
            n_candidates
        );
        if self.loss_log.is_some() {
            c.loss_log = self.loss_log.clone();
        }
        if self.max_eval_examples.is_some() {
            c.max_eval_examples = self.max_eval_examples;
        }
        if self.no_ef {
            c.use_ef = false;
        }
        if self.no_edp {
            c.use_edp = false;
        }
        c
    }

    fn base(
        &self,
        fallback: impl FnOnce() -> memedial::Result<RunConfig>,
    ) -> memedial::Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => fallback(),
        }
    }
}

fn run(cli: Cli) -> memedial::Result<()> {
    match cli.command {
        Command::GenCorpus {
            out,
            n_dialogues,
            n_memes,
            n_emotions,
            n_unseen,
            meme_fidelity,
            seed,
        } => {
            let spec = GeneratorSpec {
                n_dialogues,
                n_memes,
                n_emotions,
                meme_fidelity,
                ..GeneratorSpec::default()
            };
            let split = write_synthetic_corpus(&out, &spec, n_unseen, seed)?;
            println!(
                "wrote {}: train={} valid_seen={} valid_unseen={} held_out_memes={}",
                out.display(),
                split.train.len(),
                split.valid_seen.len(),
                split.valid_unseen.len(),
                split.held_out_memes.len()
            );
        }
        Command::Train { task, out, run } => {
            let mut config = run.apply(run.base(|| Ok(RunConfig::default()))?);
            config.task = task;
            config.checkpoint = out;
            let (_, summary) = train(&config)?;
            println!("{}", summary.line());
        }
        Command::Eval {
            task,
            ckpt,
            split,
            report,
            run,
        } => {
            let mut config = run.apply(run.base(|| Ok(Trained::load(&ckpt)?.header.run))?);
            config.task = task;
            config.checkpoint = ckpt;
            config.report = report;
            let r = evaluate(&config, &split)?;
            if config.report.is_none() {
                print!("{}", r.to_json()?);
            } else {
                let summary: Vec<String> = r
                    .metrics
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect();
                println!("{}", summary.join(" "));
            }
        }
        Command::Chat {
            ckpt_gen,
            ckpt_ret,
            ckpt_emo,
            corpus_dir,
            beam_size,
            max_generation_tokens,
        } => {
            let mut session = ChatSession::new(
                Trained::load(&ckpt_gen)?,
                Trained::load(&ckpt_ret)?,
                Trained::load(&ckpt_emo)?,
                MemeCatalog::load(&corpus_dir.join(CATALOG_FILE))?,
                EmotionSet::load(&corpus_dir.join(EMOTIONS_FILE))?,
            )?;
            session.beam_size = beam_size;
            session.max_generation_tokens = max_generation_tokens;
            let stdin = std::io::stdin();
            session.run(stdin.lock(), std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_data_error() {
        2
    } else {
        3
    }
}
