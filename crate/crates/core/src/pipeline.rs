//! The four-stage orchestrator: retrieval augmentation, multimodal analysis,
//! debate, and adjudication.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{self, AgentContext, ModelParams, Reflection, TemplateSet};
use crate::domain::{AnalysisBundle, CallTrace, DebateTranscript, Instance, RetrievedInfo, Verdict};
use crate::embedding::{embed_instance, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::llm::ChatBackend;
use crate::scalar::Scalar;
use crate::store::{manifest_hash, ExemplarRecord, ExemplarStore, NoisyExemplar, RetrievalFilter, StoreManifest};

/// Which analysis agents run when the analysis stage is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisAgents {
    pub text: bool,
    pub image: bool,
    pub conflict: bool,
}

impl Default for AnalysisAgents {
    fn default() -> Self {
        AnalysisAgents {
            text: true,
            image: true,
            conflict: true,
        }
    }
}

impl AnalysisAgents {
    pub fn count(&self) -> usize {
        [self.text, self.image, self.conflict].iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    /// Only retrieve exemplars sharing the query's target.
    pub same_target_only: bool,
    pub exclude_targets: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub rounds: u32,
    pub enable_ra: bool,
    pub enable_ma: bool,
    pub enable_red: bool,
    pub enable_sra: bool,
    pub analysis_agents: AnalysisAgents,
    pub noise_p: f64,
    pub rng_seed: u64,
    pub retrieval: RetrievalSettings,
    /// Execution-only: read from config files but left out of snapshots, so
    /// reports do not depend on it. Run manifests record it separately.
    #[serde(skip_serializing)]
    pub parallelism: usize,
    pub models: ModelParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 3,
            rounds: 3,
            enable_ra: true,
            enable_ma: true,
            enable_red: true,
            enable_sra: true,
            analysis_agents: AnalysisAgents::default(),
            noise_p: 0.0,
            rng_seed: 0,
            retrieval: RetrievalSettings::default(),
            parallelism: 1,
            models: ModelParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidInput("rounds must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidInput("parallelism must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(Error::InvalidInput(format!("noise-p {} outside [0, 1]", self.noise_p)));
        }
        Ok(())
    }

    /// Whether classification touches the store at all.
    pub fn retrieves(&self) -> bool {
        self.enable_ra && self.k > 0
    }

    /// Model calls one instance costs when every reply parses.
    pub fn expected_calls(&self) -> usize {
        let ma = if self.enable_ma { self.analysis_agents.count() } else { 0 };
        let red = if self.enable_red { 3 * self.rounds as usize } else { 0 };
        ma + red + 1
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<PipelineConfig> {
        let config: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }
}

/// Model and embedding backends plus prompt templates.
pub struct Providers<'a, S> {
    pub chat: &'a dyn ChatBackend,
    pub embedder: Option<&'a dyn EmbeddingProvider<S>>,
    pub templates: &'a TemplateSet,
}

/// Per-instance seed: the run seed XOR a stable hash of the instance id.
pub fn instance_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn retrieval_filter(config: &PipelineConfig, instance: &Instance) -> RetrievalFilter {
    RetrievalFilter {
        only_target: config.retrieval.same_target_only.then(|| instance.target.clone()),
        exclude_targets: config.retrieval.exclude_targets.clone(),
        exclude_ids: BTreeSet::from([instance.id.clone()]),
    }
}

fn retrieve_exemplars<'s, S: Scalar>(
    config: &PipelineConfig,
    store: Option<&'s ExemplarStore<S>>,
    embedder: Option<&dyn EmbeddingProvider<S>>,
    instance: &Instance,
) -> Result<Vec<NoisyExemplar<'s, S>>> {
    let (Some(store), Some(embedder)) = (store, embedder) else {
        return Err(Error::InvalidInput("retrieval enabled but no store or embedding provider configured".into()));
    };
    let query = embed_instance(instance, embedder)?;
    let filter = retrieval_filter(config, instance);
    let hits = store.retrieve(&query, config.k, &filter)?;
    store.inject_noise(&hits, config.noise_p, &filter, instance_seed(config.rng_seed, &instance.id))
}

/// Classifies one instance. Disabled stages are skipped and replaced by
/// sentinels; retrieval failures degrade to an empty exemplar list.
pub fn classify<S: Scalar>(
    config: &PipelineConfig,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    instance: &Instance,
) -> Result<Verdict> {
    config.validate()?;
    instance.validate_text()?;
    let ctx = AgentContext::new(providers.chat, providers.templates, &config.models);

    // RA
    let mut exemplars: Vec<NoisyExemplar<'_, S>> = Vec::new();
    if config.retrieves() {
        match retrieve_exemplars(config, store, providers.embedder, instance) {
            Ok(found) => exemplars = found,
            Err(e) => log::warn!("{}: retrieval failed, continuing without exemplars: {e}", instance.id),
        }
    }
    let retrieved: Vec<RetrievedInfo> = exemplars
        .iter()
        .map(|e| RetrievedInfo {
            id: e.record.instance.id.clone(),
            similarity: e.similarity.map(|s| s.to_f64_lossy()),
            replaced: e.replaced,
        })
        .collect();

    // MA
    let mut trace = CallTrace::default();
    let mut bundle = AnalysisBundle::default();
    if config.enable_ma {
        let agents_on = config.analysis_agents;
        if agents_on.text {
            bundle.text_analysis = Some(agents::analyze_text(&ctx, &instance.text, &instance.target, &mut trace)?);
        }
        if agents_on.image {
            bundle.image_analysis = Some(agents::analyze_image(&ctx, &instance.image, &instance.target, &mut trace)?);
        }
        if agents_on.conflict {
            let records: Vec<&ExemplarRecord<S>> = exemplars.iter().map(|e| e.record).collect();
            bundle.conflict_analysis = Some(agents::analyze_conflict(&ctx, instance, records, &mut trace)?);
        }
    }

    // RED
    let transcript = if config.enable_red {
        agents::run_debate(&ctx, instance, &bundle, config.rounds, &mut trace)?
    } else {
        DebateTranscript::default()
    };

    // SRA
    let reflection = if config.enable_sra {
        Reflection::Enabled
    } else {
        Reflection::Disabled
    };
    let mut verdict = agents::adjudicate(&ctx, instance, &bundle, &transcript, reflection, trace)?;
    verdict.retrieved = retrieved;
    Ok(verdict)
}

/// Outcome for one instance of a batch.
pub type BatchItem = (String, Result<Verdict>);

/// Classifies `instances` with at most `config.parallelism` workers. Output
/// order follows input order; errors are kept in place.
pub fn classify_batch<S: Scalar>(
    config: &PipelineConfig,
    store: Option<&ExemplarStore<S>>,
    providers: &Providers<'_, S>,
    instances: &[Instance],
) -> Result<Vec<BatchItem>> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("no instances to classify".into()));
    }
    config.validate()?;
    let slots: Vec<Mutex<Option<Result<Verdict>>>> = instances.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.parallelism.min(instances.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(instance) = instances.get(i) else { break };
                let result = classify(config, store, providers, instance).map_err(|e| e.for_record(&instance.id));
                if let Err(e) = &result {
                    log::warn!("{e}");
                }
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
            });
        }
    });
    Ok(instances
        .iter()
        .zip(slots)
        .map(|(inst, slot)| {
            let result = slot
                .into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .unwrap_or_else(|| Err(Error::InvalidInput("instance was not processed".into())));
            (inst.id.clone(), result)
        })
        .collect())
}

/// Provenance written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_at: String,
    pub parallelism: usize,
    pub config: PipelineConfig,
    pub store_manifest: Option<StoreManifest>,
    pub store_manifest_sha256: Option<String>,
    pub templates_stock: bool,
    pub template_sha256: BTreeMap<String, String>,
    pub tokens_by_stage: BTreeMap<String, u64>,
    pub model_calls: usize,
    pub instances: usize,
}

impl RunManifest {
    pub fn new<S: Scalar>(
        config: &PipelineConfig,
        store: Option<&ExemplarStore<S>>,
        templates: &TemplateSet,
        results: &[BatchItem],
    ) -> RunManifest {
        let mut tokens_by_stage = BTreeMap::new();
        let mut model_calls = 0;
        for verdict in results.iter().filter_map(|(_, r)| r.as_ref().ok()) {
            model_calls += verdict.trace.len();
            for (stage, n) in verdict.trace.tokens_by_stage() {
                *tokens_by_stage.entry(stage.as_str().to_string()).or_insert(0) += n;
            }
        }
        RunManifest {
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            parallelism: config.parallelism,
            config: config.clone(),
            store_manifest: store.map(|s| s.manifest().clone()),
            store_manifest_sha256: store.map(|s| manifest_hash(s.manifest())),
            templates_stock: templates.is_stock(),
            template_sha256: templates.checksums(),
            tokens_by_stage,
            model_calls,
            instances: results.len(),
        }
    }
}
