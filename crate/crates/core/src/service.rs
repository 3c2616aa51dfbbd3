//! Turn orchestration, sessions and their on-disk event log.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abductive::{self, Finding, FindingSet, RefineOptions, RefinedList, Refinement};
use crate::alignment::{self, Exemplars, PriorityRanking};
use crate::deductive::{self, DiagnosisMemory, RelationEntry, Status};
use crate::dialogue::{DialogueHistory, Utterance};
use crate::encoder::{EncoderModel, RankerModel};
use crate::kb::KnowledgeBase;
use crate::llm::{prompt_hash, CompletionParams, LlmBackend, TemplateCatalog};
use crate::retrieval::{findings_query, DocIndex, RetrievalResult};
use crate::text::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExtractFindings,
    Retrieve,
    Refine,
    Analyze,
    Rank,
    BuildPrompt,
    GenerateThought,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::ExtractFindings,
        Stage::Retrieve,
        Stage::Refine,
        Stage::Analyze,
        Stage::Rank,
        Stage::BuildPrompt,
        Stage::GenerateThought,
    ];

    /// Stages that call the language model.
    pub const LLM_BACKED: [Stage; 4] = [Stage::ExtractFindings, Stage::Refine, Stage::Analyze, Stage::GenerateThought];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Time source for stage timings. Tests use [`FixedClock`] so traces stay byte-identical.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Always reports zero elapsed time.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedClock;

impl Clock for FixedClock {
    fn now(&self) -> Duration {
        Duration::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// K: candidates retrieved per turn.
    pub k: usize,
    /// G: candidates per batch.
    pub batch_size: usize,
    /// B: number of batch groups.
    pub groups: usize,
    /// K'': diseases passed to the thought prompt.
    pub top_k: usize,
    pub seed: u64,
    /// Drop diseases opposed by a finding of the current turn before ranking.
    pub prune_opposed: bool,
    pub past_findings_budget: usize,
    pub parallel_refine: bool,
    pub params: CompletionParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: crate::retrieval::DEFAULT_K,
            batch_size: abductive::DEFAULT_BATCH_SIZE,
            groups: abductive::DEFAULT_GROUPS,
            top_k: alignment::DEFAULT_TOP_K,
            seed: 0,
            prune_opposed: false,
            past_findings_budget: abductive::DEFAULT_PAST_FINDINGS_BUDGET,
            parallel_refine: true,
            params: CompletionParams::default(),
        }
    }
}

/// Configuration frozen into a session when it is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub engine: EngineConfig,
    pub kb_version: u64,
    pub retriever_seed: u64,
    pub ranker_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn: usize,
    pub patient: String,
    pub findings: FindingSet,
    pub retrieved: RetrievalResult,
    pub refinement: Refinement,
    pub relations: Vec<RelationEntry>,
    pub ranking: PriorityRanking,
    pub thought_prompt_hash: String,
    pub thought_steps: Vec<String>,
    pub response: String,
    pub timings: Vec<StageTiming>,
}

impl TurnTrace {
    pub fn refined(&self) -> &RefinedList {
        &self.refinement.refined
    }
}

/// A turn that was aborted; the session is as it was before the turn began.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedTurn {
    pub turn: usize,
    pub patient: String,
    pub stage: Stage,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("turn {turn} failed at {stage}: {message}")]
pub struct StepError {
    pub turn: usize,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub config: SessionConfig,
    pub history: DialogueHistory,
    pub memory: DiagnosisMemory,
    pub traces: Vec<TurnTrace>,
    #[serde(default)]
    pub failures: Vec<FailedTurn>,
}

/// Log record; replaying a session's events in order rebuilds it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created { id: String, config: SessionConfig },
    Turn { trace: Box<TurnTrace> },
    Failed { failure: FailedTurn },
}

impl Session {
    pub fn new(id: impl Into<String>, config: SessionConfig) -> Self {
        Self {
            id: id.into(),
            config,
            history: DialogueHistory::new(),
            memory: DiagnosisMemory::new(),
            traces: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn next_turn(&self) -> usize {
        self.traces.len() + 1
    }

    pub fn past_findings(&self) -> Vec<Finding> {
        self.traces.iter().flat_map(|t| t.findings.iter().cloned()).collect()
    }

    pub fn trace(&self, turn: usize) -> Option<&TurnTrace> {
        turn.checked_sub(1).and_then(|i| self.traces.get(i))
    }

    /// Applies a completed turn. Memory is appended first so a bad trace leaves the session untouched.
    fn commit(&mut self, trace: TurnTrace) -> Result<(), deductive::DeductiveError> {
        self.memory.append(trace.relations.clone())?;
        self.history.push(Utterance::patient(trace.patient.clone()));
        self.history.push(Utterance::doctor(trace.response.clone()));
        self.traces.push(trace);
        Ok(())
    }

    pub fn apply(&mut self, event: SessionEvent) -> Result<(), StoreError> {
        match event {
            SessionEvent::Created { .. } => Err(StoreError::Corrupt("created event after start".into())),
            SessionEvent::Turn { trace } => {
                if trace.turn != self.next_turn() {
                    return Err(StoreError::Corrupt(format!(
                        "turn {} where {} expected",
                        trace.turn,
                        self.next_turn()
                    )));
                }
                self.commit(*trace).map_err(|e| StoreError::Corrupt(e.to_string()))
            }
            SessionEvent::Failed { failure } => {
                self.failures.push(failure);
                Ok(())
            }
        }
    }
}

/// Everything a turn needs: knowledge base, both models, backend and prompts.
pub struct Engine {
    kb: Arc<KnowledgeBase>,
    index: DocIndex,
    retriever: EncoderModel,
    ranker: RankerModel,
    backend: Arc<dyn LlmBackend>,
    catalog: TemplateCatalog,
    exemplars: Exemplars,
    clock: Arc<dyn Clock>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(
        kb: Arc<KnowledgeBase>,
        retriever: EncoderModel,
        ranker: RankerModel,
        backend: Arc<dyn LlmBackend>,
        config: EngineConfig,
    ) -> Self {
        let index = DocIndex::build(&retriever, &kb);
        Self {
            kb,
            index,
            retriever,
            ranker,
            backend,
            catalog: TemplateCatalog::builtin(),
            exemplars: Exemplars::builtin(),
            clock: Arc::new(SystemClock::new()),
            config,
        }
    }

    pub fn with_catalog(mut self, catalog: TemplateCatalog) -> Self {
        self.catalog = catalog;
        self
    }

    pub fn with_exemplars(mut self, exemplars: Exemplars) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn new_session(&self, id: impl Into<String>) -> Session {
        Session::new(
            id,
            SessionConfig {
                engine: self.config.clone(),
                kb_version: self.kb.version(),
                retriever_seed: self.retriever.seed(),
                ranker_seed: self.ranker.seed(),
            },
        )
    }

    /// Seed of the batch-group plan for one turn of a session.
    pub fn plan_seed(seed: u64, turn: usize) -> u64 {
        let mut s = seed ^ (turn as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        splitmix64(&mut s)
    }

    /// Runs one patient turn. On success the trace is committed to the session;
    /// on failure history and memory are untouched and the failure is recorded.
    pub fn step(&self, session: &mut Session, patient: &str) -> Result<TurnTrace, StepError> {
        let turn = session.next_turn();
        match self.run_turn(session, patient, turn) {
            Ok(trace) => {
                let mut next = session.clone();
                next.commit(trace.clone()).map_err(|e| StepError {
                    turn,
                    stage: Stage::Analyze,
                    message: e.to_string(),
                })?;
                *session = next;
                Ok(trace)
            }
            Err(e) => {
                tracing::warn!(session = %session.id, turn, stage = %e.stage, error = %e.message, "turn aborted");
                session.failures.push(FailedTurn {
                    turn,
                    patient: patient.to_string(),
                    stage: e.stage,
                    error: e.message.clone(),
                });
                Err(e)
            }
        }
    }

    fn run_turn(&self, session: &Session, patient: &str, turn: usize) -> Result<TurnTrace, StepError> {
        let cfg = &session.config.engine;
        let backend: &dyn LlmBackend = &*self.backend;
        let fail = |stage: Stage| move |e: &dyn std::fmt::Display| StepError { turn, stage, message: e.to_string() };
        let mut timings = Vec::with_capacity(Stage::ALL.len());
        let mut timed = |stage: Stage, start: Duration| {
            timings.push(StageTiming { stage, micros: (self.clock.now().saturating_sub(start)).as_micros() as u64 })
        };

        let t = self.clock.now();
        let findings = abductive::extract_findings(
            backend,
            &self.catalog,
            &cfg.params,
            session.history.last_doctor(),
            patient,
            turn,
        )
        .map_err(|e| fail(Stage::ExtractFindings)(&e))?;
        timed(Stage::ExtractFindings, t);

        let t = self.clock.now();
        let retrieved = self.index.search(&self.retriever.embed(&findings_query(&findings)), cfg.k.max(1));
        timed(Stage::Retrieve, t);

        let t = self.clock.now();
        let plan =
            abductive::plan_batch_groups(&retrieved.ids(), cfg.batch_size, cfg.groups, Self::plan_seed(cfg.seed, turn))
                .map_err(|e| fail(Stage::Refine)(&e))?;
        let options = RefineOptions { past_findings_budget: cfg.past_findings_budget, parallel: cfg.parallel_refine };
        let refinement = abductive::refine(
            backend,
            &self.catalog,
            &cfg.params,
            &findings,
            &session.past_findings(),
            &plan,
            &self.kb,
            &options,
        )
        .map_err(|e| fail(Stage::Refine)(&e))?;
        timed(Stage::Refine, t);

        let t = self.clock.now();
        let relations =
            deductive::analyze(backend, &self.catalog, &cfg.params, &findings, &refinement.refined, &self.kb)
                .map_err(|e| fail(Stage::Analyze)(&e))?;
        let mut memory = session.memory.clone();
        memory.append(relations.clone()).map_err(|e| fail(Stage::Analyze)(&e))?;
        timed(Stage::Analyze, t);

        let t = self.clock.now();
        let history = session.history.with(Utterance::patient(patient));
        let mut candidates = refinement.refined.clone();
        if cfg.prune_opposed {
            candidates.diseases.retain(|d| !relations.iter().any(|r| r.disease == *d && r.status == Status::Oppose));
        }
        let ranking = alignment::rank(&self.ranker, &history, &candidates, &self.kb, cfg.top_k);
        timed(Stage::Rank, t);

        let t = self.clock.now();
        let prompt =
            alignment::build_thought_prompt(&self.catalog, &history, &memory, ranking.top(), &self.kb, &self.exemplars)
                .map_err(|e| fail(Stage::BuildPrompt)(&e))?;
        timed(Stage::BuildPrompt, t);

        let t = self.clock.now();
        let thought =
            alignment::generate_thought(backend, &cfg.params, &prompt).map_err(|e| fail(Stage::GenerateThought)(&e))?;
        timed(Stage::GenerateThought, t);

        Ok(TurnTrace {
            turn,
            patient: patient.to_string(),
            findings,
            retrieved,
            refinement,
            relations,
            ranking,
            thought_prompt_hash: prompt_hash(&prompt.text),
            thought_steps: thought.steps,
            response: thought.response,
            timings,
        })
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad record in session log: {0}")]
    Corrupt(String),
    #[error("unknown session '{0}'")]
    Unknown(String),
    #[error("invalid session id '{0}'")]
    BadId(String),
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    /// Number of log events folded into `session`.
    events: usize,
    session: Session,
}

/// Append-only JSONL event log per session, plus a snapshot written every
/// `snapshot_every` events. Loading reads the snapshot and replays the rest.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
    snapshot_every: usize,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>, snapshot_every: usize) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, snapshot_every: snapshot_every.max(1) })
    }

    fn check_id(id: &str) -> Result<(), StoreError> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(StoreError::BadId(id.to_string()))
        }
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.events.jsonl"))
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.snapshot.json"))
    }

    fn count_events(path: &Path) -> Result<usize, StoreError> {
        if !path.exists() {
            return Ok(0);
        }
        Ok(BufReader::new(File::open(path)?).lines().filter(|l| l.as_ref().is_ok_and(|l| !l.trim().is_empty())).count())
    }

    /// Appends `event` to the session's log; `session` is its state after the event.
    pub fn record(&self, session: &Session, event: &SessionEvent) -> Result<(), StoreError> {
        Self::check_id(&session.id)?;
        let path = self.log_path(&session.id);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let line = serde_json::to_string(event).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        writeln!(f, "{line}")?;
        f.sync_data()?;
        let n = Self::count_events(&path)?;
        if n % self.snapshot_every == 0 {
            self.write_snapshot(session, n)?;
        }
        Ok(())
    }

    pub fn create(&self, session: &Session) -> Result<(), StoreError> {
        self.record(session, &SessionEvent::Created { id: session.id.clone(), config: session.config.clone() })
    }

    fn write_snapshot(&self, session: &Session, events: usize) -> Result<(), StoreError> {
        let path = self.snapshot_path(&session.id);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(&Snapshot { events, session: session.clone() })
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<Session, StoreError> {
        Self::check_id(id)?;
        let log = self.log_path(id);
        if !log.exists() {
            return Err(StoreError::Unknown(id.to_string()));
        }
        let snap: Option<Snapshot> = match fs::read(self.snapshot_path(id)) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(e.to_string()))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let (skip, mut session) = match snap {
            Some(s) => (s.events, Some(s.session)),
            None => (0, None),
        };
        for (i, line) in BufReader::new(File::open(&log)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || i < skip {
                continue;
            }
            let event: SessionEvent =
                serde_json::from_str(&line).map_err(|e| StoreError::Corrupt(format!("line {}: {e}", i + 1)))?;
            match (&mut session, event) {
                (None, SessionEvent::Created { id, config }) => session = Some(Session::new(id, config)),
                (None, _) => return Err(StoreError::Corrupt("log does not start with a created event".into())),
                (Some(s), e) => s.apply(e)?,
            }
        }
        session.ok_or_else(|| StoreError::Corrupt("empty log".into()))
    }

    /// Ids of every session with a log, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".events.jsonl")).map(String::from))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
