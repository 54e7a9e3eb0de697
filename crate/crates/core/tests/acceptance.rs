//! Acceptance suite. Prints one line per criterion:
//! `PASS`, `FAIL` (with the reason) or `SKIPPED` (with what is missing).
//! Exits nonzero when any criterion fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stancedet::agents::{format_adjudicator_output, parse_adjudicator_output, ModelParams, FORMAT_REMINDER};
use stancedet::domain::{Instance, StanceLabel, UNPARSEABLE};
use stancedet::embedding::PrecomputedEmbeddings;
use stancedet::eval::{self, run_ablation, run_noise_study, ConfusionMatrix, DatasetSplit, Scenario, NOISE_GRID};
use stancedet::fixtures::{self, labeled_rows};
use stancedet::llm::{HttpChatConfig, MockBackend, MockScript, PromptMatcher};
use stancedet::pipeline::{instance_seed, Providers};
use stancedet::store::{ExemplarRecord, RetrievalFilter};
use stancedet::{
    classify, load_dataset, macro_f1, run_experiment, CompletionParams, Embedding, ExemplarStore, HttpChatBackend,
    ImageSource, PipelineConfig, Split, TemplateSet,
};

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Result<Outcome, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("retrieval oracle", retrieval_oracle),
        ("prompt fidelity", prompt_fidelity),
        ("call-count law", call_count_law),
        ("end-to-end determinism", end_to_end_determinism),
        ("macro F1 oracle", macro_f1_oracle),
        ("noise protocol", noise_protocol),
        ("adjudicator parsing", adjudicator_parsing),
        ("zero-shot leakage guard", leakage_guard),
        ("dataset statistics (external data)", dataset_statistics),
        ("live backbone run (optional)", live_run),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(Outcome::Pass(detail)) => println!("PASS     {name} ({secs:.2}s): {detail}"),
            Ok(Outcome::Skip(why)) => println!("SKIPPED  {name}: {why}"),
            Err(why) => {
                failed += 1;
                println!("FAIL     {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Full sort of every record by (similarity desc, id asc), truncated to k.
fn brute_force_top_k<S: stancedet::Scalar>(records: &[ExemplarRecord<S>], query: &[S], k: usize) -> Vec<(String, S)> {
    let mut all: Vec<(String, S)> = records
        .iter()
        .map(|r| {
            let mut s = S::zero();
            for (q, v) in query.iter().zip(r.embedding.values()) {
                s = s + *q * *v;
            }
            (r.instance.id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn oracle_store<S: stancedet::Scalar>(vectors: &[Vec<f64>]) -> ExemplarStore<S> {
    let image = ImageSource::from_bytes(fixtures::tiny_png(0)).unwrap();
    let records = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ExemplarRecord {
            instance: Instance::new(format!("r{i:04}"), image.clone(), "t", "K").unwrap(),
            label: StanceLabel::Neutral,
            cot: "c".into(),
            embedding: Embedding::normalized(v.iter().map(|x| S::from_f64_lossy(*x)).collect()).unwrap(),
        })
        .collect();
    ExemplarStore::from_records(records, "m", "c", "t").unwrap()
}

fn retrieval_oracle() -> Result<Outcome, String> {
    let dim = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut vectors: Vec<Vec<f64>> = (0..1000).map(|_| random_unit(&mut rng, dim)).collect();
    // exact duplicates exercise the id tie-break
    vectors[17] = vectors[400].clone();
    vectors[901] = vectors[400].clone();
    let mut queries: Vec<Vec<f64>> = (0..50).map(|_| random_unit(&mut rng, dim)).collect();
    queries.extend((0..50).map(|i| vectors[i * 20].clone()));
    queries.push(vectors[400].clone());

    let s64 = oracle_store::<f64>(&vectors);
    let s32 = oracle_store::<f32>(&vectors);
    let filter = RetrievalFilter::default();
    let mut compared = 0;
    let mut elapsed = Duration::ZERO;
    for q in &queries {
        let q64 = Embedding::<f64>::normalized(q.clone()).unwrap();
        let q32: Embedding<f32> = q64.cast();
        for k in [1, 3, 5] {
            let started = Instant::now();
            let got64 = s64.retrieve(&q64, k, &filter).map_err(|e| e.to_string())?;
            let got32 = s32.retrieve(&q32, k, &filter).map_err(|e| e.to_string())?;
            elapsed += started.elapsed();
            let got64: Vec<(String, f64)> = got64.iter().map(|h| (h.record.instance.id.clone(), h.similarity)).collect();
            let got32: Vec<(String, f32)> = got32.iter().map(|h| (h.record.instance.id.clone(), h.similarity)).collect();
            let want64 = brute_force_top_k(s64.records(), q64.values(), k);
            let want32 = brute_force_top_k(s32.records(), q32.values(), k);
            ensure(got64 == want64, || format!("f64 mismatch at k={k}: {got64:?} vs {want64:?}"))?;
            ensure(got32 == want32, || format!("f32 mismatch at k={k}: {got32:?} vs {want32:?}"))?;
            compared += 2;
        }
    }
    let tie = s64
        .retrieve(&Embedding::normalized(vectors[400].clone()).unwrap(), 3, &filter)
        .map_err(|e| e.to_string())?;
    let tie_ids: Vec<&str> = tie.iter().map(|h| h.record.instance.id.as_str()).collect();
    ensure(tie_ids == ["r0017", "r0400", "r0901"], || format!("tie order {tie_ids:?}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("retrieval took {elapsed:?}"))?;
    Ok(Outcome::Pass(format!(
        "{compared} top-k lists (f32 and f64, k in 1/3/5) over 1000x512, zero mismatches, retrieval {:.2}s",
        elapsed.as_secs_f64()
    )))
}

fn prompt_fidelity() -> Result<Outcome, String> {
    let latex = common::latex_prompts();
    ensure(latex.len() == 5, || format!("found {} prompt blocks", latex.len()))?;
    let templates = TemplateSet::stock();
    for (id, title) in common::FIDELITY_PAIRS {
        if let Some(diff) = common::first_diff(&common::sentinel_round_trip(&templates, id), &latex[title]) {
            return Err(format!("{}: {diff}", id.as_str()));
        }
    }
    Ok(Outcome::Pass("5 templates byte-identical to the reference prompts after sentinel stripping".into()))
}

struct Env {
    test: Vec<(Instance, StanceLabel)>,
    embeddings: PrecomputedEmbeddings,
    store: ExemplarStore<f32>,
    templates: TemplateSet,
}

fn env(n_train: usize, n_test: usize, seed: u64) -> Env {
    let train = labeled_rows("tr", 0, n_train);
    let test = labeled_rows("te", 1000, n_test);
    let ids = train.iter().chain(&test).map(|(i, _)| i.id.as_str());
    let recs = fixtures::precomputed_records(ids, 16, seed);
    let embeddings = fixtures::precomputed_embeddings(&recs, 16);
    let templates = TemplateSet::stock();
    let store = fixtures::fixture_store(&train, &embeddings, &templates).unwrap();
    Env {
        test,
        embeddings,
        store,
        templates,
    }
}

impl Env {
    fn providers<'a>(&'a self, mock: &'a MockBackend) -> Providers<'a, f32> {
        Providers {
            chat: mock,
            embedder: Some(&self.embeddings),
            templates: &self.templates,
        }
    }
}

type Variant = (&'static str, fn(&mut PipelineConfig), usize);

fn call_count_law() -> Result<Outcome, String> {
    let env = env(30, 20, 1);
    let variants: [Variant; 5] = [
        ("full", |_| {}, 13),
        ("w/o RA", |c| c.enable_ra = false, 13),
        ("w/o MA", |c| c.enable_ma = false, 10),
        ("w/o RED", |c| c.enable_red = false, 4),
        ("w/o SRA", |c| c.enable_sra = false, 13),
    ];
    let mut summary = Vec::new();
    for (name, tweak, expected) in variants {
        let mut config = PipelineConfig::default();
        tweak(&mut config);
        for (inst, _) in &env.test {
            let mock = fixtures::oracle_mock(&env.test);
            let v = classify(&config, Some(&env.store), &env.providers(&mock), inst).map_err(|e| e.to_string())?;
            ensure(mock.call_count() == expected && v.trace.len() == expected, || {
                format!("{name} on {}: {} calls, expected {expected}", inst.id, mock.call_count())
            })?;
            let calls = mock.calls();
            let adjudicator = &calls.last().unwrap().prompt;
            let reduced = !adjudicator.contains("Critical Self-Reflection") && adjudicator.contains("2. Final Decision:");
            ensure(reduced == (name == "w/o SRA"), || format!("{name}: reduced adjudicator prompt present = {reduced}"))?;
        }
        summary.push(format!("{name}={expected}"));
    }
    Ok(Outcome::Pass(format!("{} on 20 instances each", summary.join(" "))))
}

fn write_split(dir: &std::path::Path, rows: &[(Instance, StanceLabel)]) -> DatasetSplit {
    let path = fixtures::write_dataset(dir, "test.jsonl", rows).unwrap();
    load_dataset(&path, "fixture", None, Split::Test).unwrap()
}

fn end_to_end_determinism() -> Result<Outcome, String> {
    let env = env(30, 20, 2);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = write_split(dir.path(), &env.test);
    let script = fixtures::oracle_script(&env.test);
    let run = |parallelism| -> Result<String, String> {
        let mock = MockBackend::from_script(script.clone());
        let config = PipelineConfig {
            parallelism,
            rng_seed: 1234,
            noise_p: 0.25,
            ..Default::default()
        };
        let (report, _) = run_experiment("determinism", &config, &Scenario::InTarget, Some(&env.store), &env.providers(&mock), &split)
            .map_err(|e| e.to_string())?;
        Ok(report.to_json())
    };
    let serial = run(1)?;
    let parallel = run(8)?;
    ensure(serial == parallel, || "reports differ between parallelism 1 and 8".into())?;
    ensure(serial.contains("\"evaluated\": 20"), || "not all 20 instances evaluated".into())?;
    Ok(Outcome::Pass(format!("20 instances, parallelism 1 vs 8, {} identical report bytes", serial.len())))
}

/// Independent reference: explicit per-class counting, no confusion matrix type.
fn oracle_macro_f1(preds: &[StanceLabel], gold: &[StanceLabel]) -> f64 {
    let mut total = 0.0;
    for class in StanceLabel::ALL {
        let tp = preds.iter().zip(gold).filter(|(p, g)| **p == class && **g == class).count() as f64;
        let fp = preds.iter().zip(gold).filter(|(p, g)| **p == class && **g != class).count() as f64;
        let fn_ = preds.iter().zip(gold).filter(|(p, g)| **p != class && **g == class).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    total / 3.0
}

fn macro_f1_oracle() -> Result<Outcome, String> {
    use StanceLabel::{Neutral as N, Oppose as O, Support as P};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<StanceLabel> { (0..50).map(|_| StanceLabel::ALL[rng.gen_range(0..3)]).collect() };
        let preds = draw(&mut rng);
        let gold = draw(&mut rng);
        let got: f64 = macro_f1(&preds, &gold).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_macro_f1(&preds, &gold)).abs());
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    let a: f64 = macro_f1(&[P, P, P], &[P, N, O]).map_err(|e| e.to_string())?;
    ensure((a - 0.5 / 3.0).abs() < 1e-15 && format!("{a:.4}") == "0.1667", || format!("all-support case gave {a}"))?;
    let b: f64 = macro_f1(&[P, N, N, O], &[P, P, N, O]).map_err(|e| e.to_string())?;
    ensure((b - 7.0 / 9.0).abs() < 1e-15, || format!("7/9 case gave {b}"))?;
    let m = ConfusionMatrix::from_pairs(&[P, N, N, O], &[P, P, N, O]).map_err(|e| e.to_string())?;
    ensure(m.total() == 4, || "confusion total".into())?;
    Ok(Outcome::Pass(format!("1000 random length-50 vectors, max deviation {worst:e}; 0.1667 and 7/9 reproduced")))
}

fn noise_protocol() -> Result<Outcome, String> {
    // Store-level Monte Carlo: 2,000 queries x k=5 = 10,000 slots per p.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vectors: Vec<Vec<f64>> = (0..200).map(|_| random_unit(&mut rng, 8)).collect();
    let store = oracle_store::<f32>(&vectors);
    let queries: Vec<Embedding<f32>> = (0..2000)
        .map(|_| Embedding::<f64>::normalized(random_unit(&mut rng, 8)).unwrap().cast())
        .collect();
    let filter = RetrievalFilter::default();
    let mut rates = Vec::new();
    for p in NOISE_GRID {
        let (mut slots, mut replaced) = (0usize, 0usize);
        for (i, q) in queries.iter().enumerate() {
            let hits = store.retrieve(q, 5, &filter).map_err(|e| e.to_string())?;
            let noisy = store
                .inject_noise(&hits, p, &filter, instance_seed(99, &format!("q{i}")))
                .map_err(|e| e.to_string())?;
            ensure(noisy.len() == hits.len(), || "noise changed list length".into())?;
            let unique: HashSet<&str> = noisy.iter().map(|n| n.record.instance.id.as_str()).collect();
            ensure(unique.len() == noisy.len(), || "noise introduced a duplicate".into())?;
            if p == 0.0 {
                let same = noisy.iter().zip(&hits).all(|(n, h)| {
                    !n.replaced && n.record.instance.id == h.record.instance.id && n.similarity == Some(h.similarity)
                });
                ensure(same, || "p=0 changed the retrieved list".into())?;
            }
            slots += noisy.len();
            replaced += noisy.iter().filter(|n| n.replaced).count();
        }
        let rate = replaced as f64 / slots as f64;
        ensure(slots >= 10_000, || format!("only {slots} slots"))?;
        ensure((rate - p).abs() <= 0.02, || format!("p={p}: empirical rate {rate:.4}"))?;
        rates.push(format!("{p}->{rate:.4}"));
    }

    // Pipeline-level: p=0 row of the noise study equals the plain run byte for byte.
    let env = env(30, 12, 3);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = write_split(dir.path(), &env.test);
    let mock = fixtures::oracle_mock(&env.test);
    let base = PipelineConfig {
        rng_seed: 8,
        ..Default::default()
    };
    let (mut plain, _) = run_experiment("plain", &base, &Scenario::InTarget, Some(&env.store), &env.providers(&mock), &split)
        .map_err(|e| e.to_string())?;
    let table = run_noise_study(&base, &Scenario::InTarget, Some(&env.store), &env.providers(&mock), &split, &[0.0])
        .map_err(|e| e.to_string())?;
    let mut zero = table.rows[0].report.clone().ok_or("p=0 run failed")?;
    plain.name.clear();
    zero.name.clear();
    ensure(plain.to_json() == zero.to_json(), || "p=0 report differs from the no-noise report".into())?;
    Ok(Outcome::Pass(format!("10,000 slots per p, rates {}; p=0 report byte-identical", rates.join(", "))))
}

fn adjudicator_parsing() -> Result<Outcome, String> {
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (0usize..3, "\\PC{1,40}(\n\\PC{1,40}){0,2}").prop_filter("trimmed", |(_, q)| q.trim() == q.as_str());
    runner
        .run(&strategy, |(idx, q)| {
            let label = StanceLabel::ALL[idx];
            let parsed = parse_adjudicator_output(&format_adjudicator_output(label, &q)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(parsed, (label, q));
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;

    let env = env(9, 1, 4);
    let mut script = MockScript {
        rules: fixtures::agent_rules(),
    };
    script.rules.push(stancedet::llm::ScriptRule {
        matcher: PromptMatcher::substring("You are an Adjudicator Agent"),
        responses: vec![stancedet::llm::MockResponse::text("I lean favor overall")],
    });
    let mock = MockBackend::from_script(script);
    let v = classify(&PipelineConfig::default(), Some(&env.store), &env.providers(&mock), &env.test[0].0).map_err(|e| e.to_string())?;
    let adjudicator_calls: Vec<_> = mock.calls().into_iter().filter(|c| c.tag.to_string() == "SRA/adjudicator").collect();
    ensure(adjudicator_calls.len() == 3, || format!("{} adjudicator calls", adjudicator_calls.len()))?;
    let reasks = adjudicator_calls.iter().filter(|c| c.prompt.ends_with(FORMAT_REMINDER)).count();
    ensure(reasks == 2, || format!("{reasks} re-asks"))?;
    ensure(v.label == StanceLabel::Neutral && v.justification == UNPARSEABLE && v.fallback, || {
        format!("fallback verdict was {:?}/{}", v.label, v.justification)
    })?;
    Ok(Outcome::Pass("512 round-trip cases; malformed output -> 2 re-asks -> Neutral/UNPARSEABLE".into()))
}

fn leakage_guard() -> Result<Outcome, String> {
    let env = env(9, 3, 5);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let split = write_split(dir.path(), &env.test);
    let mock = fixtures::oracle_mock(&env.test);
    let scenario = Scenario::ZeroShot {
        held_out_target: fixtures::TARGETS[0].into(),
    };
    let result = run_experiment("zs", &PipelineConfig::default(), &scenario, Some(&env.store), &env.providers(&mock), &split);
    ensure(matches!(result, Err(stancedet::Error::Leakage(_))), || "zero-shot run with leaking store was accepted".into())?;
    ensure(mock.call_count() == 0, || "model was called before the guard fired".into())?;
    let table = run_ablation(&PipelineConfig::default(), &scenario, Some(&env.store), &env.providers(&mock), &split);
    ensure(matches!(table, Err(stancedet::Error::Leakage(_))), || "ablation runner skipped the guard".into())?;
    Ok(Outcome::Pass("setup fails with Leakage before any model call".into()))
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("STANCEDET_DATA_DIR").map(PathBuf::from).filter(|p| p.is_dir())
}

/// Expects `$STANCEDET_DATA_DIR/mtse/in-target/{train,valid,test}.jsonl`.
fn dataset_statistics() -> Result<Outcome, String> {
    let Some(root) = data_dir() else {
        return Ok(Outcome::Skip("STANCEDET_DATA_DIR not set; converted MTSE files absent".into()));
    };
    let dir = root.join("mtse").join("in-target");
    if !dir.join("train.jsonl").is_file() {
        return Ok(Outcome::Skip(format!("{} has no train.jsonl", dir.display())));
    }
    let expected = [(Split::Train, 1150), (Split::Valid, 170), (Split::Test, 327)];
    let mut counts = Vec::new();
    for (split, want) in expected {
        let path = dir.join(format!("{split}.jsonl"));
        let loaded = load_dataset(&path, "MTSE", Some("Donald Trump"), split).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(loaded.len() == want, || format!("{split}: {} rows, expected {want}", loaded.len()))?;
        counts.push(loaded.len().to_string());
    }
    Ok(Outcome::Pass(format!("MTSE/DT in-target {}", counts.join("/"))))
}

fn live_run() -> Result<Outcome, String> {
    let Some(chat) = HttpChatConfig::from_env() else {
        return Ok(Outcome::Skip("MODEL_ENDPOINT not set".into()));
    };
    let Some(root) = data_dir() else {
        return Ok(Outcome::Skip("STANCEDET_DATA_DIR not set".into()));
    };
    let path = root.join("mtse").join("in-target").join("test.jsonl");
    let full = load_dataset(&path, "MTSE", Some("Donald Trump"), Split::Test).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for class in StanceLabel::ALL {
        rows.extend(full.rows.iter().filter(|(_, l)| *l == class).take(10).cloned());
    }
    let split = DatasetSplit { rows, ..full };
    let backend = HttpChatBackend::new(chat).map_err(|e| e.to_string())?;
    let mut params = CompletionParams::default();
    if let Ok(model) = std::env::var("MODEL_ID") {
        params.model_id = model;
    }
    let templates = TemplateSet::stock();
    let providers = Providers::<f32> {
        chat: &backend,
        embedder: None,
        templates: &templates,
    };
    // No embedding sidecar is assumed here, so retrieval is off.
    let config = PipelineConfig {
        enable_ra: false,
        models: ModelParams::uniform(params),
        ..Default::default()
    };
    let (report, _) = eval::run_experiment("live", &config, &Scenario::InTarget, None, &providers, &split).map_err(|e| e.to_string())?;
    for row in &report.predictions {
        eprintln!("live {}: {} calls, {} tokens", row.id, row.model_calls, row.tokens);
    }
    ensure(report.errors == 0, || format!("{} instances failed", report.errors))?;
    let per_instance = report.total_tokens as f64 / report.evaluated as f64;
    Ok(Outcome::Pass(format!(
        "{} instances, macro F1 {:.4}, {:.0} tokens per instance",
        report.evaluated, report.macro_f1, per_instance
    )))
}
