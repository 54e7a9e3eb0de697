//! Dataset loading, scoring and the experiment runners (single evaluation,
//! stage ablations, agent-contribution configs, k/rounds sweeps and the
//! retrieval-noise study).

mod dataset;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use self::dataset::{load_dataset, DatasetSplit, Split};
pub use self::metrics::{macro_f1, ClassMetrics, ConfusionMatrix};
use crate::domain::{StanceLabel, Verdict};
use crate::error::{Error, Result};
use crate::pipeline::{classify_batch, PipelineConfig, Providers, RunManifest};
use crate::scalar::Scalar;
use crate::store::ExemplarStore;

/// Evaluation setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Scenario {
    InTarget,
    /// Exemplars of `held_out_target` must not be retrievable.
    ZeroShot { held_out_target: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub target: String,
    pub gold: StanceLabel,
    pub predicted: Option<StanceLabel>,
    #[serde(default)]
    pub fallback: bool,
    pub model_calls: usize,
    #[serde(default)]
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub slots: usize,
    pub replaced: usize,
    pub replacement_rate: f64,
}

/// Scores and accounting for one run. Contains no timestamps, so identical
/// runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub dataset: String,
    pub split: Split,
    pub scenario: Scenario,
    pub rows: usize,
    pub evaluated: usize,
    pub errors: usize,
    pub unparseable_fallbacks: usize,
    pub macro_f1: f64,
    pub per_target_macro_f1: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, ClassMetrics<f64>>,
    /// `[gold][predicted]`, order Support, Neutral, Oppose.
    pub confusion: ConfusionMatrix,
    pub model_calls: usize,
    pub tokens_by_stage: BTreeMap<String, u64>,
    pub total_tokens: u64,
    pub retrieval: RetrievalStats,
    pub predictions: Vec<PredictionRow>,
    pub config: PipelineConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean and population standard deviation of the per-target scores.
    pub fn target_mean_std(&self) -> (f64, f64) {
        let scores: Vec<f64> = self.per_target_macro_f1.values().copied().collect();
        if scores.is_empty() {
            return (0.0, 0.0);
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn calls_per_instance(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.model_calls as f64 / self.evaluated as f64
        }
    }
}

/// Fails when a zero-shot run could retrieve exemplars of the held-out target.
pub fn check_leakage<S: Scalar>(scenario: &Scenario, store: Option<&ExemplarStore<S>>) -> Result<()> {
    if let (Scenario::ZeroShot { held_out_target }, Some(store)) = (scenario, store) {
        if store.contains_target(held_out_target) {
            return Err(Error::Leakage(format!(
                "store contains exemplars of held-out target {held_out_target:?}; rebuild it without that target"
            )));
        }
    }
    Ok(())
}

fn score(
    name: &str,
    config: &PipelineConfig,
    scenario: &Scenario,
    split: &DatasetSplit,
    results: &[(String, Result<Verdict>)],
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(results.len());
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    let mut by_target: BTreeMap<String, (Vec<StanceLabel>, Vec<StanceLabel>)> = BTreeMap::new();
    let mut tokens_by_stage = BTreeMap::new();
    let mut retrieval = RetrievalStats::default();
    let mut model_calls = 0;
    let mut fallbacks = 0;
    let mut first_error = None;

    for ((instance, label), (_, result)) in split.rows.iter().zip(results) {
        match result {
            Ok(v) => {
                preds.push(v.label);
                gold.push(*label);
                let entry = by_target.entry(instance.target.clone()).or_default();
                entry.0.push(v.label);
                entry.1.push(*label);
                model_calls += v.trace.len();
                fallbacks += usize::from(v.fallback);
                for (stage, n) in v.trace.tokens_by_stage() {
                    *tokens_by_stage.entry(stage.as_str().to_string()).or_insert(0u64) += n;
                }
                retrieval.slots += v.retrieved.len();
                retrieval.replaced += v.retrieved.iter().filter(|r| r.replaced).count();
                predictions.push(PredictionRow {
                    id: instance.id.clone(),
                    target: instance.target.clone(),
                    gold: *label,
                    predicted: Some(v.label),
                    fallback: v.fallback,
                    model_calls: v.trace.len(),
                    tokens: v.trace.total_tokens(),
                    error: None,
                });
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e.to_string());
                }
                predictions.push(PredictionRow {
                    id: instance.id.clone(),
                    target: instance.target.clone(),
                    gold: *label,
                    predicted: None,
                    fallback: false,
                    model_calls: 0,
                    tokens: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "run {name}: every instance failed (first error: {})",
            first_error.unwrap_or_default()
        )));
    }
    if retrieval.slots > 0 {
        retrieval.replacement_rate = retrieval.replaced as f64 / retrieval.slots as f64;
    }
    let confusion = ConfusionMatrix::from_pairs(&preds, &gold)?;
    let per_class = StanceLabel::ALL
        .iter()
        .map(|c| (c.to_string(), confusion.class_metrics::<f64>(*c)))
        .collect();
    let per_target_macro_f1 = by_target
        .iter()
        .map(|(t, (p, g))| Ok((t.clone(), macro_f1::<f64>(p, g)?)))
        .collect::<Result<_>>()?;
    let total_tokens = tokens_by_stage.values().sum();
    Ok(EvalReport {
        name: name.to_string(),
        dataset: split.dataset_name.clone(),
        split: split.split,
        scenario: scenario.clone(),
        rows: split.rows.len(),
        evaluated: preds.len(),
        errors: split.rows.len() - preds.len(),
        unparseable_fallbacks: fallbacks,
        macro_f1: confusion.macro_f1(),
        per_target_macro_f1,
        per_class,
        confusion,
        model_calls,
        tokens_by_stage,
        total_tokens,
        retrieval,
        predictions,
        config: config.clone(),
    })
}

/// Classifies every row of `split` and scores the predictions.
pub fn run_experiment<S: Scalar>(
    name: &str,
    config: &PipelineConfig,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
) -> Result<(EvalReport, RunManifest)> {
    check_leakage(scenario, store)?;
    let mut config = config.clone();
    if let Scenario::ZeroShot { held_out_target } = scenario {
        config.retrieval.exclude_targets.insert(held_out_target.clone());
    }
    let instances = split.instances();
    let results = classify_batch(&config, store, providers, &instances)?;
    let report = score(name, &config, scenario, split, &results)?;
    let manifest = RunManifest::new(&config, store, providers.templates, &results);
    Ok((report, manifest))
}

/// One named configuration of a study and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_p: Option<f64>,
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StudyRow {
    fn new(name: String, outcome: Result<EvalReport>) -> StudyRow {
        let (report, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        StudyRow {
            name,
            k: None,
            rounds: None,
            noise_p: None,
            report,
            error,
        }
    }
}

/// Result table of a multi-configuration study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub study: String,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn row(&self, name: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text table for terminals and logs.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.study);
        let _ = writeln!(
            out,
            "{:<32} {:>9} {:>9} {:>12} {:>10} {:>8}",
            "configuration", "macro_f1", "std", "calls/inst", "tokens", "noise"
        );
        for row in &self.rows {
            match &row.report {
                Some(r) => {
                    let (_, std) = r.target_mean_std();
                    let _ = writeln!(
                        out,
                        "{:<32} {:>9.4} {:>9.4} {:>12.2} {:>10} {:>8.4}",
                        row.name,
                        r.macro_f1,
                        std,
                        r.calls_per_instance(),
                        r.total_tokens,
                        r.retrieval.replacement_rate
                    );
                }
                None => {
                    let _ = writeln!(out, "{:<32} FAILED: {}", row.name, row.error.as_deref().unwrap_or(""));
                }
            }
        }
        out
    }

    /// CSV for plotting: one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,k,rounds,noise_p,macro_f1,target_mean,target_std,calls_per_instance,total_tokens,replacement_rate,error\n");
        for row in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let (f1, mean, std, calls, tokens, rate) = match &row.report {
                Some(r) => {
                    let (mean, std) = r.target_mean_std();
                    (
                        r.macro_f1.to_string(),
                        mean.to_string(),
                        std.to_string(),
                        r.calls_per_instance().to_string(),
                        r.total_tokens.to_string(),
                        r.retrieval.replacement_rate.to_string(),
                    )
                }
                None => Default::default(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{f1},{mean},{std},{calls},{tokens},{rate},{}",
                csv_field(&row.name),
                opt(row.k.map(|v| v.to_string())),
                opt(row.rounds.map(|v| v.to_string())),
                opt(row.noise_p.map(|v| v.to_string())),
                csv_field(row.error.as_deref().unwrap_or(""))
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const ABLATION_NAMES: [&str; 5] = ["full", "w/o RA", "w/o MA", "w/o RED", "w/o SRA"];

/// The five stage-ablation configurations derived from `base`.
pub fn ablation_configs(base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    ABLATION_NAMES
        .iter()
        .map(|name| {
            let mut c = base.clone();
            match *name {
                "w/o RA" => c.enable_ra = false,
                "w/o MA" => c.enable_ma = false,
                "w/o RED" => c.enable_red = false,
                "w/o SRA" => c.enable_sra = false,
                _ => {}
            }
            (name.to_string(), c)
        })
        .collect()
}

/// Single- and combined-agent configurations. Partial configurations skip
/// the debate and feed the enabled analyses straight to the adjudicator.
pub fn agent_contribution_configs(base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let subset = |text, image, conflict| {
        let mut c = base.clone();
        c.enable_ma = true;
        c.enable_red = false;
        c.analysis_agents.text = text;
        c.analysis_agents.image = image;
        c.analysis_agents.conflict = conflict;
        c
    };
    let mut full = base.clone();
    full.enable_ra = true;
    full.enable_ma = true;
    full.enable_red = true;
    full.enable_sra = true;
    full.analysis_agents = Default::default();
    vec![
        ("Text Analysis Agent".to_string(), subset(true, false, false)),
        ("Image Analysis Agent".to_string(), subset(false, true, false)),
        ("Modality Conflict Agent".to_string(), subset(false, false, true)),
        ("Text + Image Analysis Agents".to_string(), subset(true, true, false)),
        ("Full".to_string(), full),
    ]
}

fn run_rows<S: Scalar>(
    study: &str,
    configs: Vec<(String, PipelineConfig)>,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
) -> Result<StudyTable> {
    check_leakage(scenario, store)?;
    let rows = configs
        .into_iter()
        .map(|(name, config)| {
            log::info!("{study}: running {name}");
            let outcome = run_experiment(&name, &config, scenario, store, providers, split).map(|(r, _)| r);
            let mut row = StudyRow::new(name, outcome);
            row.k = Some(config.k);
            row.rounds = Some(config.rounds);
            row.noise_p = Some(config.noise_p);
            row
        })
        .collect();
    Ok(StudyTable {
        study: study.to_string(),
        rows,
    })
}

/// Full pipeline against each single-stage ablation, same seed throughout.
pub fn run_ablation<S: Scalar>(
    base: &PipelineConfig,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
) -> Result<StudyTable> {
    run_rows("ablation", ablation_configs(base), scenario, store, providers, split)
}

pub fn run_agent_contributions<S: Scalar>(
    base: &PipelineConfig,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
) -> Result<StudyTable> {
    run_rows("agent-contributions", agent_contribution_configs(base), scenario, store, providers, split)
}

/// Cartesian sweep over retrieval depth and debate rounds.
pub fn run_sensitivity<S: Scalar>(
    base: &PipelineConfig,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
    k_grid: &[usize],
    rounds_grid: &[u32],
) -> Result<StudyTable> {
    if rounds_grid.contains(&0) {
        return Err(Error::InvalidInput("rounds grid must be >= 1".into()));
    }
    let mut configs = Vec::with_capacity(k_grid.len() * rounds_grid.len());
    for &k in k_grid {
        for &rounds in rounds_grid {
            let mut c = base.clone();
            c.k = k;
            c.rounds = rounds;
            configs.push((format!("k={k},rounds={rounds}"), c));
        }
    }
    run_rows("sensitivity", configs, scenario, store, providers, split)
}

/// The retrieval-noise grid used by default.
pub const NOISE_GRID: [f64; 4] = [0.0, 0.10, 0.25, 0.50];

/// One run per replacement probability.
pub fn run_noise_study<S: Scalar>(
    base: &PipelineConfig,
    scenario: &Scenario,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    split: &DatasetSplit,
    p_grid: &[f64],
) -> Result<StudyTable> {
    let configs = p_grid
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            c.noise_p = p;
            (format!("noise={:.0}%", p * 100.0), c)
        })
        .collect();
    run_rows("noise", configs, scenario, store, providers, split)
}

/// Machine-readable verdict as printed by `classify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub label: StanceLabel,
    pub justification: String,
    pub fallback: bool,
    pub model_calls: usize,
    pub tokens_by_stage: BTreeMap<String, u64>,
    pub retrieved: Vec<crate::domain::RetrievedInfo>,
}

impl VerdictRecord {
    pub fn new(id: &str, verdict: &Verdict) -> VerdictRecord {
        VerdictRecord {
            id: id.to_string(),
            label: verdict.label,
            justification: verdict.justification.clone(),
            fallback: verdict.fallback,
            model_calls: verdict.trace.len(),
            tokens_by_stage: verdict
                .trace
                .tokens_by_stage()
                .into_iter()
                .map(|(s, n)| (s.as_str().to_string(), n))
                .collect(),
            retrieved: verdict.retrieved.clone(),
        }
    }

    pub fn parse(json: &str) -> Result<VerdictRecord> {
        Ok(serde_json::from_str(json)?)
    }
}
