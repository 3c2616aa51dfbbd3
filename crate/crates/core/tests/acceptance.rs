//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the binary
//! exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medreason::abductive::{self, plan_batch_groups, RefineOptions};
use medreason::alignment::{self, iou, Exemplars};
use medreason::annotation::{link, stats, Annotator, MergedDisease, LINK_CANDIDATES};
use medreason::dialogue::DialogueTurn;
use medreason::encoder::{
    contrastive_loss, contrastive_loss_grad, minibatch_objective, train_ranker, train_retriever, ContrastiveBatch,
    RankerTurn, TrainConfig,
};
use medreason::llm::FnBackend;
use medreason::metrics::{bleu, entity_f1, rouge_n, EntityLexicon, Smoothing};
use medreason::retrieval::{recall_at_k, EvalQuery, RecallAveraging};
use medreason::service::{FixedClock, Stage};
use medreason::text::tokenize;
use medreason::{
    CompletionParams, DialogueHistory, DiseaseDoc, EncoderModel, Engine, EngineConfig, Finding, KnowledgeBase,
    LlmBackend, LlmError, RankerModel, Soap, TemplateCatalog, TemplateName, Utterance,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn doc(id: &str, name: &str, aliases: &[&str], knowledge: &str) -> DiseaseDoc {
    DiseaseDoc {
        id: id.into(),
        name: name.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
        description: String::new(),
        diagnosis_knowledge: knowledge.into(),
    }
}

// ---------------------------------------------------------------- metrics

const METRIC_PAIRS: [(&str, &str); 10] = [
    ("the throat feels itchy today", "the throat feels itchy today"),
    ("a b c d", "a b x y"),
    ("a", "a b c"),
    ("how long have you had the cough", "how long has the cough lasted"),
    ("do you have a fever or chills", "any fever or chills at night"),
    ("is the pain worse after meals", "does the pain get worse after you eat"),
    ("have you been diagnosed with gastritis before", "were you ever told you have chronic gastritis"),
    ("please get a blood test and a chest x ray", "i suggest a blood test and a chest x ray"),
    ("take the medicine twice a day after meals", "take it twice a day after meals for a week"),
    (
        "your symptoms suggest allergic rhinitis or a common cold",
        "this looks like allergic rhinitis rather than gastritis",
    ),
];

/// Entity ids per pair (hypothesis, reference), read off the lexicon by hand.
const METRIC_ENTITIES: [(&[&str], &[&str]); 10] = [
    (&[], &[]),
    (&[], &[]),
    (&[], &[]),
    (&[], &[]),
    (&["fev"], &["fev"]),
    (&[], &[]),
    (&["g"], &["cg"]),
    (&[], &[]),
    (&[], &[]),
    (&["ar", "cc"], &["ar", "g"]),
];

fn oracle_ngrams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn oracle_count(grams: &[Vec<&str>], g: &[&str]) -> usize {
    grams.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(h: &[&str], r: &[&str], max_n: usize) -> f64 {
    let mut logs = 0.0;
    for n in 1..=max_n {
        let hg = oracle_ngrams(h, n);
        let rg = oracle_ngrams(r, n);
        let mut seen: Vec<Vec<&str>> = vec![];
        let mut matched = 0;
        for g in &hg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            matched += oracle_count(&hg, g).min(oracle_count(&rg, g));
        }
        if hg.is_empty() || matched == 0 {
            return 0.0;
        }
        logs += (matched as f64 / hg.len() as f64).ln() / max_n as f64;
    }
    let bp = if h.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / h.len() as f64).exp() };
    bp * logs.exp()
}

fn oracle_rouge(h: &[&str], r: &[&str], n: usize) -> f64 {
    let hg = oracle_ngrams(h, n);
    let rg = oracle_ngrams(r, n);
    let mut seen: Vec<Vec<&str>> = vec![];
    let mut matched = 0;
    for g in &rg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        matched += oracle_count(&rg, g).min(oracle_count(&hg, g));
    }
    matched as f64 / rg.len() as f64
}

fn oracle_f1(p: &[&str], g: &[&str]) -> f64 {
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let hit = p.iter().filter(|x| g.contains(x)).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let (pr, rc) = (hit / p.len() as f64, hit / g.len() as f64);
    2.0 * pr * rc / (pr + rc)
}

fn metric_oracle_parity() -> Outcome {
    let start = Instant::now();
    let kb: KnowledgeBase = [
        doc("g", "gastritis", &[], ""),
        doc("cg", "chronic gastritis", &[], ""),
        doc("ar", "allergic rhinitis", &[], ""),
        doc("cc", "common cold", &["cold"], ""),
        doc("fev", "febrile illness", &["fever"], ""),
    ]
    .into_iter()
    .collect();
    let lex = EntityLexicon::from_kb(&kb);
    let mut checks = 0;
    for (i, ((h, r), (pe, ge))) in METRIC_PAIRS.iter().zip(METRIC_ENTITIES).enumerate() {
        let hs: Vec<&str> = h.split_whitespace().collect();
        let rs: Vec<&str> = r.split_whitespace().collect();
        let ht = tokenize(h);
        let rt = tokenize(r);
        ensure!(ht == hs && rt == rs, "pair {i}: tokenizer disagrees with whitespace split");
        for n in [1, 2, 4] {
            let got = bleu(&ht, &rt, n, Smoothing::None).map_err(|e| e.to_string())?;
            let want = oracle_bleu(&hs, &rs, n);
            ensure!((got - want).abs() <= 1e-9, "pair {i} BLEU-{n}: {got} vs oracle {want}");
            checks += 1;
        }
        for n in [1, 2] {
            let got = rouge_n(&ht, &rt, n).map_err(|e| e.to_string())?;
            let want = oracle_rouge(&hs, &rs, n);
            ensure!((got - want).abs() <= 1e-9, "pair {i} ROUGE-{n}: {got} vs oracle {want}");
            checks += 1;
        }
        let pset = lex.extract(h);
        let gset = lex.extract(r);
        let hand = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        ensure!(pset == hand(pe) && gset == hand(ge), "pair {i}: entities {pset:?}/{gset:?} vs hand {pe:?}/{ge:?}");
        let got = entity_f1(&pset, &gset);
        let want = oracle_f1(pe, ge);
        ensure!((got - want).abs() <= 1e-9, "pair {i} E-F: {got} vs oracle {want}");
        checks += 1;
    }
    // hand-computed values
    let b = |i: usize, n| bleu(&tokenize(METRIC_PAIRS[i].0), &tokenize(METRIC_PAIRS[i].1), n, Smoothing::None).unwrap();
    for n in [1, 2, 4] {
        ensure!(b(0, n) == 1.0, "identity BLEU-{n} = {}", b(0, n));
    }
    ensure!((b(1, 1) - 0.5).abs() <= 1e-9, "clipped unigram precision {}", b(1, 1));
    ensure!((b(2, 1) - 0.1353352832366127).abs() <= 1e-9, "brevity penalty case {}", b(2, 1));
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{checks} values match the oracle to 1e-9 in {elapsed:.2?}"))
}

// ---------------------------------------------------------------- contrastive loss

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const SYL: [&str; 20] = [
        "ka", "lo", "mer", "tis", "pha", "gas", "ren", "cor", "bil", "neu", "ost", "cyt", "derm", "hep", "pul", "ang",
        "vex", "dru", "sal", "qui",
    ];
    (0..3).map(|_| *SYL.choose(rng).unwrap()).collect()
}

fn contrastive_analytics() -> Outcome {
    let l = contrastive_loss(0.0, &[0.0]);
    ensure!((l - std::f64::consts::LN_2).abs() <= 1e-12, "pos=0/neg=0 gave {l}");
    ensure!(contrastive_loss(3.0, &[]) == 0.0, "empty negatives not zero");

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..300 {
        let pos = rng.random_range(-5.0..5.0);
        let negs: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(-5.0..5.0)).collect();
        let base = contrastive_loss(pos, &negs);
        for c in [1000.0, -1000.0, rng.random_range(-1000.0..1000.0)] {
            let shifted = contrastive_loss(pos + c, &negs.iter().map(|n| n + c).collect::<Vec<_>>());
            ensure!((shifted - base).abs() <= 1e-9, "instance {i}: shift {c} moved loss {base} -> {shifted}");
        }
        // score-level gradient
        let g = contrastive_loss_grad(pos, &negs);
        let eps = 1e-6;
        let fd = (contrastive_loss(pos + eps, &negs) - contrastive_loss(pos - eps, &negs)) / (2.0 * eps);
        ensure!((fd - g.d_pos).abs() <= 1e-6, "instance {i}: d_pos {} vs {fd}", g.d_pos);
    }

    // parameter-level gradient on 100 random small instances
    let mut coords = 0;
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n_docs = rng.random_range(3..7);
        let kb: KnowledgeBase = (0..n_docs)
            .map(|d| {
                let name = format!("{} {}", pseudo_word(&mut rng), pseudo_word(&mut rng));
                let know: Vec<String> = (0..4).map(|_| pseudo_word(&mut rng)).collect();
                doc(&format!("d{d}"), &name, &[], &know.join(", "))
            })
            .collect();
        let ids: Vec<String> = kb.iter().map(|d| d.id.clone()).collect();
        let examples: Vec<ContrastiveBatch> = (0..rng.random_range(1..4))
            .map(|_| {
                let mut shuffled = ids.clone();
                shuffled.shuffle(&mut rng);
                let n_pos = rng.random_range(1..3);
                let n_neg = rng.random_range(0..2);
                ContrastiveBatch {
                    anchor: (0..3).map(|_| pseudo_word(&mut rng)).collect::<Vec<_>>().join(" "),
                    positives: shuffled[..n_pos].to_vec(),
                    negatives: shuffled[n_pos..n_pos + n_neg].to_vec(),
                }
            })
            .collect();
        let mut model = EncoderModel::new(1 << 10, 4, inst);
        let (_, grad) = minibatch_objective(&model, &kb, &examples).map_err(|e| e.to_string())?;
        let cols: Vec<u32> = grad.keys().copied().collect();
        for _ in 0..4 {
            let Some(&col) = cols.choose(&mut rng) else { break };
            let row = rng.random_range(0..4);
            let eps = 1e-6;
            model.perturb(col, row, eps);
            let up = minibatch_objective(&model, &kb, &examples).unwrap().0;
            model.perturb(col, row, -2.0 * eps);
            let down = minibatch_objective(&model, &kb, &examples).unwrap().0;
            model.perturb(col, row, eps);
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grad[&col][row];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure!(rel <= 1e-4, "instance {inst} col {col} row {row}: analytic {analytic} vs numeric {numeric}");
            coords += 1;
        }
    }
    Ok(format!("ln 2, empty, shift and {coords} parameter gradients on 100 instances (worst rel err {worst:.1e})"))
}

// ---------------------------------------------------------------- synthetic retrieval

struct SyntheticCorpus {
    kb: KnowledgeBase,
    train: Vec<EvalQuery>,
    eval: Vec<EvalQuery>,
}

fn synthetic_corpus(seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let symptoms: Vec<String> = (0..400).map(|_| fresh(&mut rng)).collect();
    // queries mostly use a lay word that never appears in the knowledge base
    let lay: HashMap<String, String> = symptoms.iter().map(|s| (s.clone(), fresh(&mut rng))).collect();
    let docs: Vec<DiseaseDoc> = (0..200)
        .map(|i| {
            let name = format!("{} {}", fresh(&mut rng), fresh(&mut rng));
            let alias = fresh(&mut rng);
            let know: Vec<String> = symptoms.choose_multiple(&mut rng, 8).cloned().collect();
            doc(&format!("d{i:03}"), &name, &[&alias], &know.join(", "))
        })
        .collect();
    let query = |rng: &mut ChaCha8Rng, d: &DiseaseDoc| {
        let know: Vec<&str> = d.diagnosis_knowledge.split(", ").collect();
        let mut toks: Vec<String> =
            know.choose_multiple(rng, 5).filter(|_| !rng.random_bool(0.3)).map(|s| s.to_string()).collect();
        for t in &mut toks {
            if rng.random_bool(0.7) {
                *t = lay[t.as_str()].clone();
            }
        }
        if rng.random_bool(0.2) {
            toks.push(if rng.random_bool(0.5) { d.aliases[0].clone() } else { d.name.clone() });
        }
        if toks.is_empty() {
            toks.push(lay[know[0]].clone());
        }
        toks.shuffle(rng);
        EvalQuery { query: toks.join(" "), gold: vec![d.id.clone()] }
    };
    let train = (0..1000)
        .map(|_| {
            let d = rng.random_range(0..docs.len());
            query(&mut rng, &docs[d])
        })
        .collect();
    let eval = (0..1000)
        .map(|_| {
            let d = rng.random_range(0..docs.len());
            query(&mut rng, &docs[d])
        })
        .collect();
    SyntheticCorpus { kb: docs.into_iter().collect(), train, eval }
}

fn synthetic_retrieval() -> Outcome {
    let start = Instant::now();
    let c = synthetic_corpus(2024);
    let examples: Vec<ContrastiveBatch> = c
        .train
        .iter()
        .map(|q| ContrastiveBatch { anchor: q.query.clone(), positives: q.gold.clone(), negatives: vec![] })
        .collect();
    let init = EncoderModel::with_seed(7);
    let ks = [10, 25, 50, 100];
    let before = recall_at_k(&init, &c.kb, &c.eval, &ks, RecallAveraging::Micro).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { lr: 1.0, epochs: 20, batch_size: 32, seed: 7 };
    let (model, trace) = train_retriever(&init, &c.kb, &examples, &cfg).map_err(|e| e.to_string())?;
    let rows = recall_at_k(&model, &c.kb, &c.eval, &ks, RecallAveraging::Micro).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let table: Vec<String> = rows.iter().map(|r| format!("@{}={:.1}%", r.k, r.recall)).collect();
    ensure!(rows[0].recall >= 80.0, "recall@10 {:.1}% < 80% ({})", rows[0].recall, table.join(" "));
    ensure!(rows.windows(2).all(|w| w[1].recall >= w[0].recall), "not monotone: {}", table.join(" "));
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} (untrained @10={:.1}%), losses {:.3}->{:.3}, {elapsed:.1?}",
        table.join(" "),
        before[0].recall,
        trace.epoch_losses[0],
        trace.epoch_losses.last().unwrap()
    ))
}

// ---------------------------------------------------------------- vote refinement

fn candidate_ids(prompt: &str, known: &BTreeSet<String>) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix('[')?.split_once(']').map(|(id, _)| id.to_string()))
        .filter(|id| known.contains(id))
        .collect()
}

fn vote_refinement_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let kb: KnowledgeBase = (0..30).map(|i| doc(&format!("c{i:02}"), &format!("cond {i}"), &[], "k")).collect();
    let all: BTreeSet<String> = kb.iter().map(|d| d.id.clone()).collect();
    let catalog = TemplateCatalog::builtin();
    let findings = vec![Finding { text: "itch".into(), soap: Soap::Subjective, turn: 1 }];
    let (mut at_half, mut at_full, mut boundary_total) = (0, 0, 0);
    for inst in 0..1000u64 {
        let n = rng.random_range(1..=30);
        let mut cands: Vec<String> = all.iter().cloned().collect();
        cands.shuffle(&mut rng);
        cands.truncate(n);
        let g = rng.random_range(1..=6);
        let b = rng.random_range(1..=7);
        let plan = plan_batch_groups(&cands, g, b, inst).map_err(|e| e.to_string())?;
        // target votes lean on the threshold: B/2 rounded both ways, B, 0 and random
        let target: HashMap<&str, usize> = cands
            .iter()
            .map(|c| {
                let v = match rng.random_range(0..5) {
                    0 => b / 2,
                    1 => b / 2 + 1,
                    2 => b,
                    3 => 0,
                    _ => rng.random_range(0..=b),
                };
                (c.as_str(), v)
            })
            .collect();
        // groups voting for each candidate
        let voters: HashMap<&str, BTreeSet<usize>> = cands
            .iter()
            .map(|c| {
                let mut gs: Vec<usize> = (0..b).collect();
                gs.shuffle(&mut rng);
                (c.as_str(), gs[..target[c.as_str()]].iter().copied().collect())
            })
            .collect();
        // selection per batch content; a batch repeated across groups answers like its first copy
        let mut by_batch: HashMap<Vec<String>, Vec<String>> = HashMap::new();
        let mut selected_in_group: Vec<BTreeSet<String>> = vec![BTreeSet::new(); b];
        for (gi, group) in plan.groups.iter().enumerate() {
            for batch in group {
                let sel = by_batch
                    .entry(batch.clone())
                    .or_insert_with(|| batch.iter().filter(|c| voters[c.as_str()].contains(&gi)).cloned().collect())
                    .clone();
                selected_in_group[gi].extend(sel);
            }
        }
        let junk = format!("x{inst}");
        let answers = Arc::new(by_batch);
        let known = all.clone();
        let backend = FnBackend(move |p: &str| {
            let ids = candidate_ids(p, &known);
            let sel = answers.get(&ids).ok_or_else(|| LlmError::Other(format!("unexpected batch {ids:?}")))?;
            let mut out: Vec<String> = sel.iter().map(|s| format!("disease: {s} | explanation: fits")).collect();
            // noise the tally must ignore: a repeat and an id from outside the batch
            if let Some(first) = sel.first() {
                out.push(format!("disease: {first}"));
            }
            out.push(format!("disease: {junk}"));
            Ok(out.join("\n"))
        });
        let options = RefineOptions { parallel: inst % 2 == 0, ..RefineOptions::default() };
        let r =
            abductive::refine(&backend, &catalog, &CompletionParams::default(), &findings, &[], &plan, &kb, &options)
                .map_err(|e| format!("instance {inst}: {e}"))?;
        // brute force: a group votes for c if any of its batches selected c
        let mut expected = Vec::new();
        for c in &cands {
            let v = (0..b).filter(|gi| selected_in_group[*gi].contains(c)).count();
            ensure!(r.votes.votes[c] == v, "instance {inst}: {c} has {} votes, oracle {v}", r.votes.votes[c]);
            if 2 * v == b {
                at_half += 1;
            }
            if v == b {
                at_full += 1;
            }
            if 2 * v == b || v == b {
                boundary_total += 1;
            }
            if 2 * v > b {
                expected.push(c.clone());
            }
        }
        ensure!(
            r.refined.diseases == expected,
            "instance {inst}: refined {:?}, oracle {expected:?}",
            r.refined.diseases
        );
    }
    ensure!(at_half > 0 && at_full > 0, "boundary cases not exercised ({at_half} at B/2, {at_full} at B)");
    Ok(format!("1000 instances agree; {at_half} candidates at v=B/2 excluded, {at_full} at v=B included ({boundary_total} boundary)"))
}

// ---------------------------------------------------------------- alignment benefit

const THEMES: [&str; 6] = ["allergic", "gastric", "viral", "cardiac", "renal", "dermal"];
const TRIGGERS: [&str; 6] = ["pollen", "meals", "contagion", "palpitations", "urination", "rash"];
const FILLER: [&str; 12] =
    ["today", "since", "morning", "mild", "sometimes", "worse", "night", "feel", "also", "week", "little", "tired"];

struct PrefTurn {
    history: DialogueHistory,
    refined: Vec<String>,
    preferred: Vec<String>,
}

fn preference_data(seed: u64, turns: usize, by_theme: &[Vec<String>]) -> Vec<PrefTurn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..turns)
        .map(|_| {
            let t = rng.random_range(0..THEMES.len());
            let k_pref = rng.random_range(3..=5);
            let mut refined: Vec<String> = by_theme[t].choose_multiple(&mut rng, k_pref).cloned().collect();
            let preferred = refined.clone();
            let others: Vec<&String> = (0..THEMES.len()).filter(|&o| o != t).flat_map(|o| by_theme[o].iter()).collect();
            refined.extend(others.choose_multiple(&mut rng, 12 - k_pref).map(|s| (*s).clone()));
            refined.shuffle(&mut rng);
            let mut words: Vec<&str> = FILLER.choose_multiple(&mut rng, 5).copied().collect();
            words.push(TRIGGERS[t]);
            words.shuffle(&mut rng);
            let mut history = DialogueHistory::new();
            history.push(Utterance::patient(words.join(" ")));
            PrefTurn { history, refined, preferred }
        })
        .collect()
}

fn alignment_benefit() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut by_theme: Vec<Vec<String>> = vec![vec![]; THEMES.len()];
    let mut docs = Vec::new();
    for (t, theme) in THEMES.iter().enumerate() {
        for j in 0..10 {
            let id = format!("{theme}-{j}");
            docs.push(doc(&id, &format!("{theme} {}", pseudo_word(&mut rng)), &[], ""));
            by_theme[t].push(id);
        }
    }
    let kb: KnowledgeBase = docs.into_iter().collect();
    let train = preference_data(1, 400, &by_theme);
    let test = preference_data(2, 200, &by_theme);
    let turns: Vec<RankerTurn> = train
        .iter()
        .map(|p| RankerTurn::from_annotations(&p.history.render(), &p.preferred, &p.refined, &[]))
        .collect();
    let init = RankerModel::new(1 << 16, 16, 3);
    let cfg = TrainConfig { lr: 0.1, epochs: 10, batch_size: 8, seed: 3 };
    let (ranker, _) = train_ranker(&init, &kb, &turns, &cfg).map_err(|e| e.to_string())?;
    let (mut aligned, mut unaligned) = (0.0, 0.0);
    for p in &test {
        let refined = medreason::RefinedList { diseases: p.refined.clone() };
        let top = alignment::rank(&ranker, &p.history, &refined, &kb, 5).top_ids();
        aligned += iou(&top, &p.preferred);
        unaligned += iou(&p.refined[..5], &p.preferred);
    }
    aligned /= test.len() as f64;
    unaligned /= test.len() as f64;
    let elapsed = start.elapsed();
    ensure!(aligned - unaligned >= 0.10, "IoU@5 ranked {aligned:.3} vs retrieval order {unaligned:.3}");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("IoU@5 ranked {aligned:.3} vs retrieval order {unaligned:.3} over 200 turns, {elapsed:.1?}"))
}

// ---------------------------------------------------------------- end-to-end

const PATIENT_TURNS: [&str; 3] = [
    "My throat itches and I keep wanting to gag.",
    "About half an hour. My temperature is just under 37.",
    "Only when I have a cold, or when the seasons change.",
];

const THOUGHTS: [&str; 3] = [
    "1. Itchy throat with gagging and no stated fever.\n2. Duration will separate acute from recurring causes.\nTherefore, the doctor responds, \"How long have you felt this?\"",
    "1. Short duration and no fever.\n2. Earlier throat problems would point to a chronic cause.\n3. Ask about history.\nTherefore, the doctor responds, \"Have you had throat trouble before?\"",
    "1. Symptoms follow colds and season changes.\n2. This suggests an allergic trigger.\n3. Environmental exposure is worth checking.\n4. Reflux is less likely.\nTherefore, the doctor responds, \"Were you around dust or cleaning products today?\"",
];

const FINDINGS: [&str; 3] = [
    "S: itchy throat; urge to gag",
    "S: lasted half an hour\nO: temperature just under 37",
    "S: occurs with colds; occurs with season change",
];

fn e2e_kb() -> Arc<KnowledgeBase> {
    Arc::new(
        [
            doc("ap", "allergic pharyngitis", &["allergic sore throat"], "itchy throat, gagging, seasonal, dust"),
            doc("cg", "chronic gastritis", &[], "epigastric pain, bloating, nausea"),
            doc("cc", "common cold", &["cold"], "runny nose, sore throat, mild fever"),
            doc("gerd", "gastroesophageal reflux disease", &["GERD", "acid reflux"], "heartburn, throat irritation"),
            doc("ar", "allergic rhinitis", &["hay fever"], "sneezing, itchy nose, seasonal"),
            doc("ton", "tonsillitis", &[], "painful swallowing, swollen tonsils, fever"),
            doc("ph", "acute pharyngitis", &[], "sore throat, fever, red pharynx"),
            doc("asth", "asthma", &[], "wheeze, cough at night, triggers"),
            doc("lar", "laryngitis", &[], "hoarse voice, throat pain"),
            doc("sin", "sinusitis", &[], "facial pressure, nasal discharge"),
            doc("flu", "influenza", &["flu"], "high fever, body aches, cough"),
            doc("ecz", "eczema", &[], "itchy skin, rash, dry patches"),
        ]
        .into_iter()
        .collect(),
    )
}

/// Scripted backend answering each template from the prompt content alone.
fn scripted_backend() -> impl Fn(&str) -> Result<String, LlmError> + Send + Sync + 'static {
    let known: BTreeSet<String> = e2e_kb().iter().map(|d| d.id.clone()).collect();
    let plausible = ["ap", "ar", "gerd", "cc", "ph"];
    move |p: &str| {
        let template = TemplateName::from_trailer(p).ok_or_else(|| LlmError::Other("no trailer".into()))?;
        let turn_of = || PATIENT_TURNS.iter().rposition(|t| p.contains(t)).unwrap_or(0);
        Ok(match template {
            TemplateName::SoapExtract => FINDINGS[turn_of()].to_string(),
            TemplateName::AbductiveRefine => {
                let picks: Vec<String> = candidate_ids(p, &known)
                    .into_iter()
                    .filter(|id| plausible.contains(&id.as_str()))
                    .map(|id| format!("disease: {id} | explanation: consistent with the findings"))
                    .collect();
                if picks.is_empty() {
                    "none".into()
                } else {
                    picks.join("\n")
                }
            }
            TemplateName::DeductiveAnalyze => {
                let findings: Vec<&str> =
                    p.lines().filter_map(|l| l.strip_prefix("- [")?.split_once("] ").map(|(_, t)| t)).collect();
                let ids = candidate_ids(p, &known);
                let mut out = Vec::new();
                for (i, f) in findings.iter().enumerate() {
                    for (j, id) in ids.iter().enumerate() {
                        let status = ["support", "oppose", "irrelevant"][(i + j) % 3];
                        out.push(format!("finding: {f} | disease: {id} | status: {status} | rationale: rule {i}-{j}"));
                    }
                }
                out.join("\n")
            }
            TemplateName::ThoughtCot => THOUGHTS[turn_of()].to_string(),
            other => return Err(LlmError::Other(format!("unexpected template {other}"))),
        })
    }
}

fn e2e_engine(backend: Arc<dyn LlmBackend>) -> Engine {
    let cfg = EngineConfig { seed: 17, ..EngineConfig::default() };
    Engine::new(e2e_kb(), EncoderModel::with_seed(1), RankerModel::with_seed(2), backend, cfg)
        .with_clock(Arc::new(FixedClock))
}

fn after_marker(thought: &str) -> String {
    let (_, rest) = thought.rsplit_once("Therefore, the doctor responds").unwrap();
    rest.trim_start_matches(", \"").trim_end_matches('"').to_string()
}

fn end_to_end_determinism() -> Outcome {
    let run = || -> Result<Vec<String>, String> {
        let engine = e2e_engine(Arc::new(FnBackend(scripted_backend())));
        let mut session = engine.new_session("fixture");
        let mut out = Vec::new();
        for (i, text) in PATIENT_TURNS.iter().enumerate() {
            let trace = engine.step(&mut session, text).map_err(|e| e.to_string())?;
            let want = after_marker(THOUGHTS[i]);
            if trace.response != want {
                return Err(format!("turn {}: response {:?}, fixture says {want:?}", i + 1, trace.response));
            }
            if trace.timings.iter().map(|t| t.stage).collect::<Vec<_>>() != Stage::ALL {
                return Err(format!("turn {}: stages out of order", i + 1));
            }
            out.push(serde_json::to_string(&trace).map_err(|e| e.to_string())?);
        }
        Ok(out)
    };
    let a = run()?;
    let b = run()?;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        ensure!(x == y, "turn {} traces differ between runs", i + 1);
    }
    let bytes: usize = a.iter().map(String::len).sum();
    Ok(format!("3 turns, {bytes} trace bytes identical across runs; responses match fixtures"))
}

// ---------------------------------------------------------------- annotation

const ANN_DIALOGUE: [(&str, &str); 2] = [
    ("My throat itches and gets worse when the seasons change.", "Have you been around dust lately?"),
    ("No dust. But I get a sour taste after meals.", "Do you get heartburn when lying down?"),
];

const ANN_THOUGHTS: [&str; 2] = [
    "1. The throat itches, worse with seasons.\n2. Allergy is the likely cause.\n3. Ask about dust exposure.\nTherefore, the doctor responds, \"Have you been around dust lately?\"",
    "1. Reflux can irritate the throat.\n2. Ask about heartburn.\nTherefore, the doctor responds, \"Do you get heartburn when lying down?\"",
];

fn annotation_backend(p: &str) -> Result<String, LlmError> {
    let template = TemplateName::from_trailer(p).ok_or_else(|| LlmError::Other("no trailer".into()))?;
    let second = p.contains(ANN_DIALOGUE[1].0);
    Ok(match (template, second) {
        (TemplateName::AnnotatePri, false) => {
            "1. allergic pharyngitis: itch with seasons\n2. acid reflux: throat irritation".into()
        }
        (TemplateName::AnnotatePri, true) => {
            "1. Allergic pharyngitis: itch\n2. common cold: seasonal\n3. allergic pharyngitis: repeated".into()
        }
        (TemplateName::AnnotatePost, false) => "1. allergic sore throat: dust question 2. hay fever: allergen".into(),
        (TemplateName::AnnotatePost, true) => "1. GERD: heartburn question".into(),
        (TemplateName::DiseaseMatch, _) => {
            let target = p
                .lines()
                .find_map(|l| l.strip_prefix("Target disease: "))
                .ok_or_else(|| LlmError::Other("no target".into()))?
                .to_lowercase();
            let mut hit = None;
            for l in p.lines().filter(|l| l.starts_with('[')) {
                let Some((id, rest)) = l[1..].split_once("] ") else { continue };
                let (name, aliases) = rest.split_once(" (also: ").unwrap_or((rest, ""));
                let forms: Vec<String> = std::iter::once(name.to_string())
                    .chain(aliases.trim_end_matches(')').split(", ").map(String::from))
                    .map(|s| s.to_lowercase())
                    .collect();
                if forms.contains(&target) {
                    hit = Some(id.to_string());
                    break;
                }
            }
            hit.map_or("none".to_string(), |id| format!("match: {id}"))
        }
        (TemplateName::ThoughtCot, s) => ANN_THOUGHTS[s as usize].into(),
        (other, _) => return Err(LlmError::Other(format!("unexpected template {other}"))),
    })
}

fn annotation_kb() -> KnowledgeBase {
    let mut docs: Vec<DiseaseDoc> = e2e_kb().iter().cloned().collect();
    docs.push(doc("mig", "migraine", &[], "throbbing headache, light sensitivity"));
    docs.push(doc("uti", "urinary tract infection", &["UTI"], "burning urination, frequency"));
    docs.push(doc("ida", "iron deficiency anemia", &[], "fatigue, pallor"));
    docs.into_iter().collect()
}

fn annotation_pipeline() -> Outcome {
    let kb = annotation_kb();
    let linker = EncoderModel::with_seed(0);
    let catalog = TemplateCatalog::builtin();
    let exemplars = Exemplars::builtin();
    let backend = FnBackend(annotation_backend);
    let params = CompletionParams::default();
    let annotator = Annotator {
        backend: &backend,
        catalog: &catalog,
        params: params.clone(),
        linker: &linker,
        kb: &kb,
        exemplars: &exemplars,
    };

    let mut history = DialogueHistory::new();
    let mut records = Vec::new();
    for (i, (patient, doctor)) in ANN_DIALOGUE.iter().enumerate() {
        history.push(Utterance::patient(*patient));
        let turn = DialogueTurn { turn: i + 1, history: history.clone(), response: doctor.to_string() };
        records.push(annotator.annotate_turn("fixture", &turn).map_err(|e| format!("turn {}: {e}", i + 1))?);
        history.push(Utterance::doctor(*doctor));
    }

    let m = |id: &str, pri, post| MergedDisease { id: id.into(), pri, post };
    let want = [
        (vec!["ap", "gerd"], vec!["ap", "ar"], vec![m("ap", true, true), m("ar", false, true), m("gerd", true, false)]),
        (vec!["ap", "cc"], vec!["gerd"], vec![m("gerd", false, true), m("ap", true, false), m("cc", true, false)]),
    ];
    for (r, (pri, post, merged)) in records.iter().zip(&want) {
        ensure!(r.e_pri == *pri, "turn {}: e_pri {:?}, expected {pri:?} (unlinked {:?})", r.turn, r.e_pri, r.unlinked);
        ensure!(
            r.e_post == *post,
            "turn {}: e_post {:?}, expected {post:?} (unlinked {:?})",
            r.turn,
            r.e_post,
            r.unlinked
        );
        ensure!(r.e_merged == *merged, "turn {}: e_merged {:?}", r.turn, r.e_merged);
        let union: BTreeSet<&String> = r.e_pri.iter().chain(&r.e_post).collect();
        let merged_ids: BTreeSet<&String> = r.e_merged.iter().map(|x| &x.id).collect();
        ensure!(union == merged_ids, "turn {}: merged is not the union", r.turn);
        for x in &r.e_merged {
            ensure!(
                x.pri == r.e_pri.contains(&x.id) && x.post == r.e_post.contains(&x.id),
                "turn {}: bad flags on {}",
                r.turn,
                x.id
            );
        }
    }

    // every mention links inside its brute-force coarse top-10
    let mentions = ["allergic pharyngitis", "acid reflux", "common cold", "allergic sore throat", "hay fever", "GERD"];
    for mention in mentions {
        let l = link(mention, &linker, &kb, &backend, &catalog, &params).map_err(|e| e.to_string())?;
        let mut scored: Vec<(f64, String)> = kb.iter().map(|d| (linker.relevance(mention, d), d.id.clone())).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let top: Vec<String> = scored.into_iter().take(LINK_CANDIDATES).map(|(_, id)| id).collect();
        ensure!(l.candidates == top, "{mention}: coarse list differs from brute force");
        let id = l.id.ok_or_else(|| format!("{mention}: unlinked ({:?})", l.reason))?;
        ensure!(top.contains(&id), "{mention}: linked {id} outside top-10");
    }

    // hand count: 8 + 6 + 5 tokens over 3 steps, 6 + 4 over 2
    let steps: Vec<&[String]> = records.iter().map(|r| r.thought.steps.as_slice()).collect();
    let s = stats(steps);
    ensure!(s.n_thoughts == 2, "n_thoughts {}", s.n_thoughts);
    ensure!(s.avg_steps == 2.5, "avg_steps {}", s.avg_steps);
    ensure!(s.avg_tokens_per_step == 29.0 / 5.0, "avg_tokens_per_step {}", s.avg_tokens_per_step);
    ensure!(s.avg_total_tokens == 14.5, "avg_total_tokens {}", s.avg_total_tokens);
    ensure!(records[1].thought.response == ANN_DIALOGUE[1].1, "thought response {:?}", records[1].thought.response);
    Ok("2 turns: merged lists and flags correct, 6 links inside coarse top-10, stats 2.5 / 5.8 / 14.5".into())
}

// ---------------------------------------------------------------- rollback

fn rollback() -> Outcome {
    let stages = [
        (TemplateName::SoapExtract, Stage::ExtractFindings),
        (TemplateName::AbductiveRefine, Stage::Refine),
        (TemplateName::DeductiveAnalyze, Stage::Analyze),
        (TemplateName::ThoughtCot, Stage::GenerateThought),
    ];
    let mut passed = Vec::new();
    for (template, stage) in stages {
        let fail_on: Arc<Mutex<Option<TemplateName>>> = Arc::new(Mutex::new(None));
        let trigger = fail_on.clone();
        let inner = scripted_backend();
        let backend = FnBackend(move |p: &str| {
            if *trigger.lock().unwrap() == TemplateName::from_trailer(p) {
                return Err(LlmError::Transport("injected failure".into()));
            }
            inner(p)
        });
        let engine = e2e_engine(Arc::new(backend));
        let mut session = engine.new_session("rollback");
        engine.step(&mut session, PATIENT_TURNS[0]).map_err(|e| e.to_string())?;
        let history = serde_json::to_vec(&session.history).unwrap();
        let memory = serde_json::to_vec(&session.memory).unwrap();
        let traces = session.traces.len();

        *fail_on.lock().unwrap() = Some(template);
        let err = match engine.step(&mut session, PATIENT_TURNS[1]) {
            Ok(_) => return Err(format!("{stage}: injected failure did not abort the turn")),
            Err(e) => e,
        };
        ensure!(err.stage == stage, "{template}: failure attributed to {}", err.stage);
        ensure!(serde_json::to_vec(&session.history).unwrap() == history, "{stage}: history changed");
        ensure!(serde_json::to_vec(&session.memory).unwrap() == memory, "{stage}: memory changed");
        ensure!(session.traces.len() == traces, "{stage}: trace appended");
        ensure!(session.failures.last().map(|f| f.stage) == Some(stage), "{stage}: failure not recorded");

        *fail_on.lock().unwrap() = None;
        let t = engine.step(&mut session, PATIENT_TURNS[1]).map_err(|e| e.to_string())?;
        ensure!(t.turn == 2, "{stage}: retry numbered {}", t.turn);
        passed.push(stage.to_string());
    }
    Ok(format!("history and memory unchanged after failures at {}", passed.join(", ")))
}

// ---------------------------------------------------------------- harness

fn main() {
    let criteria: [Criterion; 8] = [
        ("metric oracle parity", metric_oracle_parity),
        ("contrastive loss analytics", contrastive_analytics),
        ("synthetic retrieval", synthetic_retrieval),
        ("vote refinement oracle", vote_refinement_oracle),
        ("alignment benefit", alignment_benefit),
        ("end-to-end determinism", end_to_end_determinism),
        ("annotation pipeline", annotation_pipeline),
        ("rollback", rollback),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
