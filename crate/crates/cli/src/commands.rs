use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use medreason::alignment::Exemplars;
use medreason::annotation::{stats, Annotator};
use medreason::encoder::{self, ContrastiveBatch, RankerTurn, TrainConfig};
use medreason::llm::{load_backend, CompletionParams, TemplateCatalog};
use medreason::metrics::{evaluate_run, EntityLexicon, Smoothing};
use medreason::retrieval::{format_recall_table, recall_at_k, EvalQuery, RecallAveraging};
use medreason::{Dialogue, EncoderModel, Engine, EngineConfig, KnowledgeBase, RankerModel};

use crate::{AnnotateArgs, ChatArgs, EngineArgs, SmoothingArg, TrainArgs};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    KnowledgeBase::open(path).with_context(|| format!("loading knowledge base {}", path.display()))
}

fn load_retriever(path: Option<&Path>) -> Result<EncoderModel> {
    match path {
        Some(p) => EncoderModel::load(p).with_context(|| format!("loading retriever {}", p.display())),
        None => Ok(EncoderModel::with_seed(0)),
    }
}

pub fn kb_ingest(file: &Path, out: &Path) -> Result<()> {
    let f = File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let (kb, report) = KnowledgeBase::ingest(BufReader::new(f))?;
    for r in &report.rejections {
        eprintln!("line {}: rejected '{}': {}", r.line, r.id, r.reason);
    }
    kb.save(out)?;
    println!("ingested {} documents ({} rejected) into {}", report.ingested, report.rejections.len(), out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig { lr: a.lr, epochs: a.epochs, batch_size: a.batch_size, seed: a.seed }
}

fn print_trace(losses: &[f64]) {
    for (i, l) in losses.iter().enumerate() {
        println!("epoch {:>3}  loss {:.6}", i + 1, l);
    }
}

pub fn train_retriever(a: &TrainArgs) -> Result<()> {
    let kb = load_kb(&a.kb)?;
    let data: Vec<ContrastiveBatch> = read_jsonl(&a.data)?;
    let init = match &a.init {
        Some(p) => EncoderModel::load(p)?,
        None => EncoderModel::new(a.dim_in, a.dim, a.seed),
    };
    let (model, trace) = encoder::train_retriever(&init, &kb, &data, &train_config(a))?;
    print_trace(&trace.epoch_losses);
    model.save(&a.out)?;
    println!("saved retriever to {}", a.out.display());
    Ok(())
}

pub fn train_ranker(a: &TrainArgs) -> Result<()> {
    let kb = load_kb(&a.kb)?;
    let data: Vec<RankerTurn> = read_jsonl(&a.data)?;
    let init = match &a.init {
        Some(p) => RankerModel::load(p)?,
        None => RankerModel::new(a.dim_in, a.dim, a.seed),
    };
    let (model, report) = encoder::train_ranker(&init, &kb, &data, &train_config(a))?;
    if !report.skipped_turns.is_empty() {
        eprintln!("skipped {} turns without negatives", report.skipped_turns.len());
    }
    print_trace(&report.trace.epoch_losses);
    model.save(&a.out)?;
    println!("saved ranker to {}", a.out.display());
    Ok(())
}

pub fn annotate(a: &AnnotateArgs) -> Result<()> {
    let kb = load_kb(&a.kb)?;
    let backend = load_backend(&a.backend)?;
    let linker = load_retriever(a.model.as_deref())?;
    let catalog = TemplateCatalog::builtin();
    let exemplars = Exemplars::builtin();
    let dialogues: Vec<Dialogue> = read_jsonl(&a.data)?;
    let annotator = Annotator {
        backend: &*backend,
        catalog: &catalog,
        params: CompletionParams::default(),
        linker: &linker,
        kb: &kb,
        exemplars: &exemplars,
    };
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let (mut ok, mut failed) = (0usize, 0usize);
    let mut thoughts: Vec<Vec<String>> = Vec::new();
    for d in &dialogues {
        for turn in d.turns() {
            match annotator.annotate_turn(&d.dialogue_id, &turn) {
                Ok(rec) => {
                    writeln!(out, "{}", serde_json::to_string(&rec)?)?;
                    thoughts.push(rec.thought.steps);
                    ok += 1;
                }
                Err(e) => {
                    eprintln!("{} turn {}: {e}", d.dialogue_id, turn.turn);
                    failed += 1;
                }
            }
        }
    }
    out.flush()?;
    let s = stats(thoughts.iter().map(Vec::as_slice));
    println!(
        "annotated {ok} turns ({failed} failed); avg steps {:.2}, avg tokens/step {:.2}, avg tokens {:.2}",
        s.avg_steps, s.avg_tokens_per_step, s.avg_total_tokens
    );
    if ok == 0 && failed > 0 {
        bail!("no turn could be annotated");
    }
    Ok(())
}

pub fn eval_recall(
    model: Option<&Path>,
    kb: &Path,
    eval: &Path,
    ks: &[usize],
    per_query: bool,
    label: &str,
) -> Result<()> {
    let kb = load_kb(kb)?;
    let model = load_retriever(model)?;
    let queries: Vec<EvalQuery> = read_jsonl(eval)?;
    let averaging = if per_query { RecallAveraging::PerQuery } else { RecallAveraging::Micro };
    let rows = recall_at_k(&model, &kb, &queries, ks, averaging)?;
    print!("{}", format_recall_table(label, &rows));
    Ok(())
}

/// A response line: either a bare JSON string or an object with a `response` field.
#[derive(Deserialize)]
#[serde(untagged)]
enum ResponseLine {
    Text(String),
    Record { response: String },
}

impl ResponseLine {
    fn into_text(self) -> String {
        match self {
            ResponseLine::Text(t) | ResponseLine::Record { response: t } => t,
        }
    }
}

pub fn eval_generation(pred: &Path, gold: &Path, kb: &Path, smoothing: SmoothingArg) -> Result<()> {
    let kb = load_kb(kb)?;
    let pred: Vec<String> = read_jsonl::<ResponseLine>(pred)?.into_iter().map(ResponseLine::into_text).collect();
    let gold: Vec<String> = read_jsonl::<ResponseLine>(gold)?.into_iter().map(ResponseLine::into_text).collect();
    let smoothing = match smoothing {
        SmoothingArg::None => Smoothing::None,
        SmoothingArg::AddOne => Smoothing::AddOne,
    };
    let report = evaluate_run(&pred, &gold, &EntityLexicon::from_kb(&kb), smoothing)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    print!("{}", report.table());
    Ok(())
}

pub fn build_engine(a: &EngineArgs) -> Result<Engine> {
    let kb = Arc::new(load_kb(&a.kb)?);
    let backend = load_backend(&a.backend)?;
    let retriever = load_retriever(a.retriever.as_deref())?;
    let ranker = match &a.ranker {
        Some(p) => RankerModel::load(p).with_context(|| format!("loading ranker {}", p.display()))?,
        None => RankerModel::with_seed(0),
    };
    let mut config: EngineConfig = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => EngineConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let mut engine = Engine::new(kb, retriever, ranker, backend, config);
    if let Some(dir) = &a.templates {
        engine = engine.with_catalog(TemplateCatalog::with_overrides(dir)?);
    }
    if let Some(dir) = &a.exemplars {
        engine = engine.with_exemplars(Exemplars::from_dir(dir, 3)?);
    }
    Ok(engine)
}

/// Reads one patient utterance per line and writes the doctor's reply.
/// `/quit` ends the session; failed turns are reported and can be retried.
pub fn chat<R: BufRead, W: Write>(a: &ChatArgs, input: R, mut output: W) -> Result<()> {
    let engine = build_engine(&a.engine)?;
    let mut session = engine.new_session("chat");
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == "/quit" {
            break;
        }
        writeln!(output, "Patient: {text}")?;
        match engine.step(&mut session, text) {
            Ok(trace) => {
                writeln!(output, "Doctor: {}", trace.response)?;
                if a.trace {
                    writeln!(output, "{}", serde_json::to_string(&trace)?)?;
                }
            }
            Err(e) => writeln!(output, "[{e}]")?,
        }
        output.flush()?;
    }
    Ok(())
}
