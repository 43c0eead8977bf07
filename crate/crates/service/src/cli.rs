//! Command-line entry points. Exit codes: 0 success, 1 validation
//! failure, 2 I/O failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use skillchain::bim::load_task_model;
use skillchain::chaining::{
    chain_task, evaluate, fit_chow_liu, fit_transition, hmm_fit, transition_heatmap, ChainError, FittedModel, HmmConfig,
    LlmChainer,
};
use skillchain::executor::{self, ExecError, Plan, PlanSource, SessionStatus, WorldState};
use skillchain::ingest::{extract_actions, Corpus, ExtractorBackend, IngestError, LlmExtractor, Origin, RuleBased, Transcript};
use skillchain::llm::{HttpChatClient, LlmConfig};
use skillchain::skill_kb::{canonicalize, validate_library, KbError, SkillId, SkillLibrary, Tool};

use crate::server::{self, AppState, SharedBackend};

pub const ENV_LIBRARY: &str = "SKILLCHAIN_LIBRARY";
pub const ENV_PORT: &str = "SKILLCHAIN_PORT";
pub const ENV_ACK: &str = "SKILLCHAIN_ACK";

#[derive(Parser, Debug)]
#[command(name = "skillchain", version, about = "Micro-skill knowledge base, chaining models and supervisor service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExtractBackend {
    Rule,
    Llm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Transition,
    #[value(alias = "chow_liu")]
    Chowliu,
    Hmm,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a skill library against the exclusivity and continuity rules.
    Validate { library: PathBuf },
    /// Extract action sequences from transcripts into a JSONL corpus.
    Ingest {
        #[arg(required = true)]
        transcripts: Vec<PathBuf>,
        #[arg(long, env = ENV_LIBRARY)]
        library: PathBuf,
        #[arg(long, value_enum, default_value = "rule")]
        backend: ExtractBackend,
        #[arg(long, default_value = "task")]
        task_label: String,
        /// Write the corpus here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fit a next-action model on a JSONL corpus.
    Fit {
        corpus: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, default_value_t = 2)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print a transition model's probabilities as CSV.
    Heatmap { model: PathBuf },
    /// Next-action accuracy of a model on a corpus.
    Evaluate { model: PathBuf, corpus: PathBuf },
    /// Greedy continuity-respecting rollout from a start token.
    Chain {
        model: PathBuf,
        #[arg(long)]
        start: String,
        #[arg(long, env = ENV_LIBRARY)]
        library: PathBuf,
        #[arg(long, default_value_t = server::DEFAULT_MAX_LEN)]
        max_len: usize,
    },
    /// Run a skill sequence against a task model, confirming every gate,
    /// and print the event log as JSON lines.
    Simulate {
        task: PathBuf,
        #[arg(long, env = ENV_LIBRARY)]
        library: PathBuf,
        /// Comma-separated skill names, sentinels included.
        #[arg(long, value_delimiter = ',', required = true)]
        sequence: Vec<String>,
        #[arg(long)]
        object: String,
        #[arg(long)]
        target: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = ENV_PORT, default_value_t = 5000)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = ENV_LIBRARY)]
        library: PathBuf,
        /// Task model loaded at startup, in the `/send_data` format.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Chaining model as NAME=PATH; repeatable.
        #[arg(long = "model", value_parser = parse_named)]
        models: Vec<(String, PathBuf)>,
        #[arg(long, env = ENV_ACK, default_value = server::DEFAULT_ACK)]
        ack: String,
    },
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() {
        return Err("empty model name".into());
    }
    Ok((name.into(), PathBuf::from(path)))
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<KbError> for CliError {
    fn from(e: KbError) -> Self {
        match e {
            KbError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io(io) => CliError::Io(io.to_string()),
            IngestError::BackendUnavailable(m) | IngestError::Transport(m) => CliError::Io(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Io(io) => CliError::Io(io.to_string()),
            ChainError::BackendUnavailable(m) => CliError::Io(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<skillchain::bim::BimError> for CliError {
    fn from(e: skillchain::bim::BimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => Ok(stdout.write_all(text.as_bytes())?),
    }
}

fn load_model(path: &Path) -> Result<FittedModel, CliError> {
    Ok(FittedModel::from_json(&read(path)?)?)
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    let text = read(path)?;
    Ok(Corpus::read_jsonl(text.as_bytes())?)
}

fn llm_client() -> Result<HttpChatClient, CliError> {
    let config = LlmConfig::from_env()
        .ok_or_else(|| CliError::Io(format!("set {} to use the LLM backend", skillchain::llm::ENV_ENDPOINT)))?;
    HttpChatClient::new(config).map_err(|e| CliError::Io(e.to_string()))
}

/// Runs a non-server command, writing results to `stdout` and diagnostics
/// to `stderr`.
pub fn run(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Validate { library } => {
            let lib = SkillLibrary::from_json(&read(&library)?)?;
            let report = validate_library(&lib);
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report).expect("report serializes"))?;
            if report.ok {
                Ok(())
            } else {
                Err(CliError::Validation(format!("{} violation(s)", report.violations.len())))
            }
        }
        Command::Ingest { transcripts, library, backend, task_label, out } => {
            let lib = SkillLibrary::from_json(&read(&library)?)?;
            let extractor: Box<dyn ExtractorBackend> = match backend {
                ExtractBackend::Rule => Box::new(RuleBased),
                ExtractBackend::Llm => Box::new(LlmExtractor::new(llm_client()?)),
            };
            let mut seqs = Vec::new();
            for path in &transcripts {
                let t = Transcript::load(path, &task_label, Origin::Article)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let (seq, report) = extract_actions(&t, extractor.as_ref(), &lib)?;
                writeln!(stderr, "{}: {}", path.display(), serde_json::to_string(&report).expect("report serializes"))?;
                seqs.push(seq);
            }
            let mut buf = Vec::new();
            Corpus::new(seqs).write_jsonl(&mut buf)?;
            emit(out.as_deref(), &String::from_utf8(buf).expect("corpus is utf-8"), stdout)
        }
        Command::Fit { corpus, model, states, seed, max_iters, tol, out } => {
            let c = load_corpus(&corpus)?;
            let fitted = match model {
                ModelKind::Transition => FittedModel::Transition(fit_transition(&c)?),
                ModelKind::Chowliu => FittedModel::ChowLiu(fit_chow_liu(&c)?),
                ModelKind::Hmm => {
                    let cfg = HmmConfig { n_states: states, max_iters, tol, seed };
                    FittedModel::Hmm(hmm_fit(&c, &cfg)?)
                }
            };
            emit(out.as_deref(), &fitted.to_json(), stdout)
        }
        Command::Heatmap { model } => match load_model(&model)? {
            FittedModel::Transition(m) => Ok(stdout.write_all(transition_heatmap(&m).as_bytes())?),
            _ => Err(CliError::Validation("heatmaps are only defined for transition models".into())),
        },
        Command::Evaluate { model, corpus } => {
            let m = load_model(&model)?;
            let c = load_corpus(&corpus)?;
            let report = evaluate(m.backend(), &c)?;
            writeln!(stdout, "{}", serde_json::to_string(&report).expect("report serializes"))?;
            Ok(())
        }
        Command::Chain { model, start, library, max_len } => {
            let lib = SkillLibrary::from_json(&read(&library)?)?;
            let start = canonicalize(&start, &lib).unwrap_or_else(|| SkillId::from(start));
            let m = load_model(&model)?;
            let chain = chain_task(m.backend(), &lib, &start, max_len)?;
            writeln!(stdout, "{}", serde_json::to_string(&chain).expect("chain serializes"))?;
            Ok(())
        }
        Command::Simulate { task, library, sequence, object, target } => {
            let lib = SkillLibrary::from_json(&read(&library)?)?;
            let task = load_task_model(&read(&task)?)?;
            let ids = sequence
                .iter()
                .map(|n| canonicalize(n, &lib).ok_or_else(|| CliError::Validation(format!("`{n}` is not a library skill"))))
                .collect::<Result<Vec<_>, _>>()?;
            let mut plan = Plan::bind(&lib, &task, &ids, &object, target.as_deref(), "simulation", PlanSource::ManualSelection)?;
            plan.approved_by = Some("cli".into());
            let mut s = executor::start(plan, WorldState::from_task(&task, Tool::Gripper), &lib)?;
            loop {
                s.run_until_blocked()?;
                match s.status() {
                    SessionStatus::AwaitingHuman { .. } => s.confirm_gate("cli")?,
                    _ => break,
                }
            }
            for e in s.events() {
                writeln!(stdout, "{}", serde_json::to_string(e).expect("event serializes"))?;
            }
            match s.status() {
                SessionStatus::Completed => Ok(()),
                other => Err(CliError::Validation(format!("session ended {}", json!(other)))),
            }
        }
        Command::Serve { .. } => Err(CliError::Validation("serve is handled by the binary".into())),
    }
}

/// Builds the server state for `serve`.
pub fn serve_state(
    library: &Path,
    task: Option<&Path>,
    models: &[(String, PathBuf)],
    ack: &str,
) -> Result<AppState, CliError> {
    let lib = SkillLibrary::from_json(&read(library)?)?;
    let vocabulary: Vec<SkillId> = lib.ids().cloned().collect();
    let mut state = AppState::new(lib).with_ack(ack);
    for (name, path) in models {
        let m: SharedBackend = Arc::new(ModelBackend(load_model(path)?));
        state = state.with_model(name.clone(), m);
    }
    if let Some(config) = LlmConfig::from_env() {
        let client = HttpChatClient::new(config).map_err(|e| CliError::Io(e.to_string()))?;
        state = state.with_model("llm", Arc::new(LlmChainer::new(client, vocabulary, "task")));
    }
    if let Some(t) = task {
        state = state.with_task(load_task_model(&read(t)?)?);
    }
    Ok(state)
}

/// A loaded model file as a shareable backend.
pub struct ModelBackend(pub FittedModel);

impl skillchain::chaining::ChainingBackend for ModelBackend {
    fn name(&self) -> &str {
        self.0.backend().name()
    }

    fn vocabulary(&self) -> &[SkillId] {
        self.0.backend().vocabulary()
    }

    fn predict_next(&self, history: &[SkillId]) -> Result<skillchain::chaining::PredictionResult, ChainError> {
        self.0.backend().predict_next(history)
    }
}
