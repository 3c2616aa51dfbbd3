//! Command-line front end and HTTP service for the medreason engine.

pub mod commands;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "medreason", version, about = "Diagnostic-reasoning dialogue engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Knowledge-base maintenance.
    Kb {
        #[command(subcommand)]
        action: KbCommand,
    },
    /// Train the retriever or the preference ranker.
    Train {
        #[command(subcommand)]
        model: TrainCommand,
    },
    /// Annotate dialogues with diseases and thought processes.
    Annotate(AnnotateArgs),
    /// Evaluate retrieval or generated responses.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Interactive consultation on stdin/stdout.
    Chat(ChatArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Load disease documents from JSONL and write a knowledge-base file.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL training examples.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Start from this model instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = medreason::encoder::DEFAULT_DIM_IN)]
    pub dim_in: u32,
    #[arg(long, default_value_t = medreason::encoder::DEFAULT_DIM_OUT)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Contrastive training of the query/document encoder.
    Retriever(TrainArgs),
    /// Preference training of the disease ranker.
    Ranker(TrainArgs),
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// JSONL dialogues: {"dialogue_id", "utterances": [{"role", "text"}]}.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Backend config (TOML or JSON).
    #[arg(long)]
    pub backend: PathBuf,
    /// Retriever used for coarse linking; a fresh encoder when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoothingArg {
    None,
    AddOne,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Recall@K of the retriever on queries with gold diseases.
    Recall {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        kb: PathBuf,
        /// JSONL: {"query", "gold": [ids]}.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50, 100])]
        ks: Vec<usize>,
        /// Average per query instead of over all gold diseases.
        #[arg(long)]
        per_query: bool,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// BLEU, ROUGE and entity F1 of predicted responses against gold responses.
    Generation {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, value_enum, default_value_t = SmoothingArg::None)]
        smoothing: SmoothingArg,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Backend config (TOML or JSON).
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    #[arg(long)]
    pub ranker: Option<PathBuf>,
    /// Engine settings (TOML); unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Directory of exemplar_*.txt files replacing the built-in exemplars.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Print each turn's trace as JSON after the reply.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Persist sessions here and reload them on start.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub snapshot_every: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Kb { action: KbCommand::Ingest { file, out } } => commands::kb_ingest(&file, &out),
        Command::Train { model: TrainCommand::Retriever(a) } => commands::train_retriever(&a),
        Command::Train { model: TrainCommand::Ranker(a) } => commands::train_ranker(&a),
        Command::Annotate(a) => commands::annotate(&a),
        Command::Eval { what: EvalCommand::Recall { model, kb, eval, ks, per_query, label } } => {
            commands::eval_recall(model.as_deref(), &kb, &eval, &ks, per_query, &label)
        }
        Command::Eval { what: EvalCommand::Generation { pred, gold, kb, smoothing } } => {
            commands::eval_generation(&pred, &gold, &kb, smoothing)
        }
        Command::Chat(a) => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            commands::chat(&a, stdin.lock(), stdout.lock())
        }
        Command::Serve(a) => server::serve(&a),
    }
}
