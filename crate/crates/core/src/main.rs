use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kgcrs_core::config::DecodeMode;
use kgcrs_core::corpus::Split;
use kgcrs_core::generator::GenerateOptions;
use kgcrs_core::harness::service::{self, AppState};
use kgcrs_core::harness::{evaluate, Corpus, Engine, Workspace};
use kgcrs_core::synthetic::{planted_fixture, FixtureOptions};
use kgcrs_core::train::Stage;
use kgcrs_core::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "kgcrs", version, about = "Conversational recommendation over an incomplete knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Data {
    /// Triples (`.tsv` with a `.entities.tsv` sidecar, or `.json`).
    #[arg(long)]
    kg: PathBuf,
    /// Line-delimited JSON dialogues.
    #[arg(long)]
    dialogues: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: Data,
    /// Checkpoint to resume from; initialized fresh when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint directory; defaults to `--checkpoint`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Generation cap; bounded by the decoder's position table.
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodeArgs {
    fn apply(&self, mut opts: GenerateOptions) -> GenerateOptions {
        if let Some(m) = self.mode {
            opts.mode = match m {
                ModeArg::Greedy => DecodeMode::Greedy,
                ModeArg::Beam => DecodeMode::Beam,
            };
        }
        if let Some(w) = self.beam_width {
            opts.beam_width = w;
        }
        if let Some(l) = self.max_len {
            opts.max_len = l;
        }
        opts
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-recommendation and graph-regularization pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Recommendation training with the latent subgraph.
    TrainRec {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Response-decoder training; everything else frozen.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Recall, Distinct and ROUGE on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Directory for report.json, rankings.jsonl and generations.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP chat service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Append-only session log, replayed at start.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Recommendations per reply.
        #[arg(long)]
        top_n: Option<usize>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Interactive chat on stdin.
    Chat {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        top_n: Option<usize>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Writes the planted-graph fixture corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        withheld: f64,
    },
}

impl Common {
    /// The config to run with, or `None` when neither flag was given.
    fn explicit(&self) -> Result<Option<Config>> {
        if self.config.is_none() && self.seed.is_none() {
            return Ok(None);
        }
        Ok(Some(self.resolve()?))
    }

    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(stage: Stage, common: &Common, args: &TrainArgs) -> Result<()> {
    let out = args
        .out
        .as_deref()
        .or(args.checkpoint.as_deref())
        .ok_or_else(|| Error::Config("pass --out or --checkpoint".into()))?;
    let corpus = Corpus::load(&args.data.kg, &args.data.dialogues)?;
    for w in &corpus.dialogues.warnings {
        tracing::warn!("{w}");
    }
    let mut ws = match (&args.checkpoint, common.explicit()?) {
        (Some(dir), cfg) if kgcrs_core::harness::checkpoint::exists(dir) => {
            Workspace::load(dir, cfg.as_ref(), corpus.kg.clone())?
        }
        (Some(dir), _) if stage == Stage::Gen => {
            return Err(Error::StageOrder(format!("no checkpoint at {}", dir.display())))
        }
        (_, cfg) => {
            if stage == Stage::Gen {
                return Err(Error::StageOrder("train-gen needs --checkpoint".into()));
            }
            Workspace::fresh(&cfg.unwrap_or_default(), &corpus)?
        }
    };
    let logs = ws.run_stage(stage, &corpus)?;
    ws.save(out)?;
    let last = logs.last();
    println!(
        "{}",
        serde_json::json!({
            "stage": stage,
            "epochs_run": logs.len(),
            "final": last,
            "checkpoint": out,
        })
    );
    Ok(())
}

fn open_engine(common: &Common, kg: &Path, checkpoint: &Path, top_n: Option<usize>, decode: &DecodeArgs) -> Result<Engine> {
    let mut engine = Engine::open(checkpoint, kg, common.explicit()?.as_ref())?;
    engine.options = decode.apply(engine.options.clone());
    if let Some(n) = top_n {
        engine.recommendations = n;
    }
    Ok(engine)
}

fn chat(engine: &Engine) -> Result<()> {
    let stdin = std::io::stdin();
    let mut history = Vec::new();
    let mut out = std::io::stdout();
    let names = |id: u32| engine.resources().kg.name(kgcrs_core::corpus::EntityId(id)).to_string();
    writeln!(out, "type a message; empty line or :quit ends the chat").ok();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::io("stdin", e))?;
        let text = line.trim();
        if text.is_empty() || text == ":quit" {
            break;
        }
        let ex = match engine.respond(&history, text) {
            Ok(ex) => ex,
            Err(Error::InvalidMessage(m)) => {
                writeln!(out, "! {m}").ok();
                continue;
            }
            Err(e) => return Err(e),
        };
        writeln!(out, "> {}", ex.response.response_text).ok();
        for r in ex.response.recommendations.iter().take(3) {
            writeln!(out, "  * {} ({:.3})", r.name, r.score).ok();
        }
        for e in ex.response.subgraph.iter().filter(|e| e.connected) {
            writeln!(out, "  ~ {} -- {} ({:.2})", names(e.head), names(e.tail), e.p_connect).ok();
        }
        history.push(ex.user.to_utterance());
        history.push(ex.reply.to_utterance());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, train: t } => train(Stage::Pretrain, &common, &t),
        Command::TrainRec { common, train: t } => train(Stage::Rec, &common, &t),
        Command::TrainGen { common, train: t } => train(Stage::Gen, &common, &t),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            decode,
            out,
        } => {
            let corpus = Corpus::load(&data.kg, &data.dialogues)?;
            let ws = Workspace::load(&checkpoint, common.explicit()?.as_ref(), corpus.kg.clone())?;
            let opts = decode.apply(GenerateOptions::from_config(ws.config()));
            let eval = evaluate(&ws, &corpus, split.into(), &opts)?;
            if let Some(dir) = out {
                eval.write(&dir)?;
            }
            println!("{}", serde_json::to_string_pretty(&eval.report)?);
            Ok(())
        }
        Command::Serve {
            common,
            kg,
            checkpoint,
            host,
            port,
            sessions,
            top_n,
            decode,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Config(format!("bad address {host}:{port}: {e}")))?;
            let engine = open_engine(&common, &kg, &checkpoint, top_n, &decode)?;
            let state = AppState::new(engine, sessions.as_deref())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(service::serve(state, addr))
        }
        Command::Chat {
            common,
            kg,
            checkpoint,
            top_n,
            decode,
        } => chat(&open_engine(&common, &kg, &checkpoint, top_n, &decode)?),
        Command::Synth { common, out, withheld } => {
            let opts = FixtureOptions {
                withheld_fraction: withheld,
                seed: common.seed.unwrap_or(FixtureOptions::default().seed),
                ..Default::default()
            };
            let files = planted_fixture(&opts)?.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&files)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
