//! The exemplar vector store: building (with rationale generation), exact
//! top-k retrieval, retrieval-noise injection and on-disk persistence.
//!
//! On-disk layout (format version 1), one directory:
//!
//! * `manifest.json`: [`StoreManifest`]
//! * `records.jsonl`: one [`StoredRecord`] per line, in store order
//! * `embeddings.bin`: `u32` LE dim, `u32` LE count, then `count * dim`
//!   little-endian `f32` values, row-major
//! * `images/`: copies of every record's image, named by row number
//! * `checksums.sha256`: `sha256sum`-style lines for the three files above

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{AgentContext, TemplateId};
use crate::domain::{CallTag, CallTrace, ImageSource, Instance, Stage, StanceLabel, Vocabulary};
use crate::embedding::{dot, embed_instance, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::llm::{complete_allow_empty, ChatMessage};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.bin";
const CHECKSUM_FILE: &str = "checksums.sha256";
const IMAGES_DIR: &str = "images";

/// A labeled instance with its rationale and joint embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarRecord<S> {
    pub instance: Instance,
    pub label: StanceLabel,
    pub cot: String,
    pub embedding: Embedding<S>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub embedding_model_id: String,
    pub dim: usize,
    pub record_count: usize,
    pub created_at: String,
    pub cot_model_id: String,
    pub format_version: u32,
}

/// Restricts which records retrieval may return.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalFilter {
    /// When set, only records with exactly this target pass.
    #[serde(default)]
    pub only_target: Option<String>,
    #[serde(default)]
    pub exclude_targets: BTreeSet<String>,
    #[serde(default)]
    pub exclude_ids: BTreeSet<String>,
}

impl RetrievalFilter {
    pub fn accepts(&self, instance: &Instance) -> bool {
        if let Some(t) = &self.only_target {
            if &instance.target != t {
                return false;
            }
        }
        !self.exclude_targets.contains(&instance.target) && !self.exclude_ids.contains(&instance.id)
    }
}

/// A retrieval hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved<'a, S> {
    pub record: &'a ExemplarRecord<S>,
    pub similarity: S,
}

/// A retrieval slot after noise injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyExemplar<'a, S> {
    pub record: &'a ExemplarRecord<S>,
    /// Similarity of the original hit; `None` for replacements.
    pub similarity: Option<S>,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore<S> {
    records: Vec<ExemplarRecord<S>>,
    manifest: StoreManifest,
}

impl<S: Scalar> ExemplarStore<S> {
    /// Assembles a store from finished records, checking id uniqueness and
    /// that all embeddings share one dimension.
    pub fn from_records(
        records: Vec<ExemplarRecord<S>>,
        embedding_model_id: impl Into<String>,
        cot_model_id: impl Into<String>,
        created_at: impl Into<String>,
    ) -> Result<ExemplarStore<S>> {
        let dim = records.first().map_or(0, |r| r.embedding.dim());
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.instance.id.as_str()) {
                return Err(Error::DuplicateId(r.instance.id.clone()));
            }
            if r.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.embedding.dim(),
                });
            }
            if r.cot.trim().is_empty() {
                return Err(Error::InvalidInput(format!("record {} has an empty rationale", r.instance.id)));
            }
        }
        let manifest = StoreManifest {
            embedding_model_id: embedding_model_id.into(),
            dim,
            record_count: records.len(),
            created_at: created_at.into(),
            cot_model_id: cot_model_id.into(),
            format_version: FORMAT_VERSION,
        };
        Ok(ExemplarStore { records, manifest })
    }

    pub fn records(&self) -> &[ExemplarRecord<S>] {
        &self.records
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains_target(&self, target: &str) -> bool {
        self.records.iter().any(|r| r.instance.target == target)
    }

    /// Exact top-k by cosine similarity, descending; ties go to the smaller
    /// record id. Returns fewer than `k` hits when fewer records pass `filter`.
    pub fn retrieve(&self, query: &Embedding<S>, k: usize, filter: &RetrievalFilter) -> Result<Vec<Retrieved<'_, S>>> {
        if !self.records.is_empty() && query.dim() != self.manifest.dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.dim,
                found: query.dim(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut hits: Vec<Retrieved<'_, S>> = self
            .records
            .iter()
            .filter(|r| filter.accepts(&r.instance))
            .map(|r| Retrieved {
                record: r,
                similarity: dot(query.values(), r.embedding.values()),
            })
            .collect();
        let order = |a: &Retrieved<'_, S>, b: &Retrieved<'_, S>| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.record.instance.id.cmp(&b.record.instance.id))
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Replaces each slot independently with probability `p` by a uniformly
    /// drawn record that passes `filter` and is neither an original hit nor
    /// an earlier replacement. Slot order is preserved.
    pub fn inject_noise<'a>(
        &'a self,
        retrieved: &[Retrieved<'a, S>],
        p: f64,
        filter: &RetrievalFilter,
        seed: u64,
    ) -> Result<Vec<NoisyExemplar<'a, S>>> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("noise probability {p} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taken: HashSet<&str> = retrieved.iter().map(|r| r.record.instance.id.as_str()).collect();
        let mut out = Vec::with_capacity(retrieved.len());
        for hit in retrieved {
            if p > 0.0 && rng.gen_bool(p) {
                let candidates: Vec<&ExemplarRecord<S>> = self
                    .records
                    .iter()
                    .filter(|r| filter.accepts(&r.instance) && !taken.contains(r.instance.id.as_str()))
                    .collect();
                if candidates.is_empty() {
                    return Err(Error::StoreTooSmall);
                }
                let pick = candidates[rng.gen_range(0..candidates.len())];
                taken.insert(pick.instance.id.as_str());
                out.push(NoisyExemplar {
                    record: pick,
                    similarity: None,
                    replaced: true,
                });
            } else {
                out.push(NoisyExemplar {
                    record: hit.record,
                    similarity: Some(hit.similarity),
                    replaced: false,
                });
            }
        }
        Ok(out)
    }
}

/// Asks the model to explain why `instance` carries the gold `label`.
/// Empty replies are retried; every attempt is traced.
pub fn generate_cot(
    ctx: &AgentContext<'_>,
    instance: &Instance,
    label: StanceLabel,
    max_attempts: u32,
    trace: &mut CallTrace,
) -> Result<String> {
    let tag = CallTag::new(Stage::Build, "cot");
    let image = instance.image.load().map_err(|e| e.at_stage(tag.to_string()))?;
    let bindings = [
        ("text", instance.text.as_str()),
        ("target", instance.target.as_str()),
        ("stance_type", label.word(Vocabulary::Canonical)),
    ]
    .into_iter()
    .collect();
    let prompt = ctx.templates.render(TemplateId::Cot, &bindings)?;
    let messages = [ChatMessage::user_with_image(prompt, image)];
    for _ in 0..max_attempts.max(1) {
        let completion = complete_allow_empty(ctx.backend, &messages, &ctx.params.cot, &tag)
            .map_err(|e| e.at_stage(tag.to_string()))?;
        trace.push(completion.trace_entry(&tag));
        if !completion.text.trim().is_empty() {
            return Ok(completion.text);
        }
    }
    Err(Error::EmptyCompletion.at_stage(tag.to_string()))
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Manifest timestamp; the current time when `None`.
    pub created_at: Option<String>,
    pub cot_attempts: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            created_at: None,
            cot_attempts: 3,
        }
    }
}

/// Builds a store from labeled instances, in input order.
pub fn build_store<S: Scalar>(
    labeled: &[(Instance, StanceLabel)],
    embedder: &dyn EmbeddingProvider<S>,
    cot: &AgentContext<'_>,
    options: &BuildOptions,
    trace: &mut CallTrace,
) -> Result<ExemplarStore<S>> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(labeled.len());
    for (inst, _) in labeled {
        if !seen.insert(inst.id.as_str()) {
            return Err(Error::DuplicateId(inst.id.clone()));
        }
    }
    let mut records = Vec::with_capacity(labeled.len());
    for (i, (instance, label)) in labeled.iter().enumerate() {
        let embedding = embed_instance(instance, embedder).map_err(|e| e.for_record(&instance.id))?;
        let rationale = generate_cot(cot, instance, *label, options.cot_attempts, trace).map_err(|e| e.for_record(&instance.id))?;
        records.push(ExemplarRecord {
            instance: instance.clone(),
            label: *label,
            cot: rationale,
            embedding,
        });
        if (i + 1) % 100 == 0 {
            log::info!("built {}/{} exemplars", i + 1, labeled.len());
        }
    }
    let created_at = options
        .created_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    ExemplarStore::from_records(records, embedder.model_id(), cot.params.cot.model_id.clone(), created_at)
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub id: String,
    pub text: String,
    pub target: String,
    /// Relative to the store directory.
    pub image_path: String,
    pub label: StanceLabel,
    pub cot: String,
}

fn extension_for(media_type: &str) -> &'static str {
    match media_type {
        "image/png" => "png",
        "image/jpeg" => "jpg",
        "image/gif" => "gif",
        "image/webp" => "webp",
        "image/bmp" => "bmp",
        _ => "img",
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `store` under `dir` (created if needed).
pub fn save_store<S: Scalar>(store: &ExemplarStore<S>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(IMAGES_DIR))?;

    let mut manifest_json = serde_json::to_vec_pretty(&store.manifest)?;
    manifest_json.push(b'\n');

    let mut records_jsonl = Vec::new();
    for (row, r) in store.records.iter().enumerate() {
        let image = r.instance.image.load().map_err(|e| e.for_record(&r.instance.id))?;
        let rel = format!("{IMAGES_DIR}/{row:06}.{}", extension_for(&image.media_type));
        std::fs::write(dir.join(&rel), &image.bytes)?;
        let line = StoredRecord {
            id: r.instance.id.clone(),
            text: r.instance.text.clone(),
            target: r.instance.target.clone(),
            image_path: rel,
            label: r.label,
            cot: r.cot.clone(),
        };
        serde_json::to_writer(&mut records_jsonl, &line)?;
        records_jsonl.push(b'\n');
    }

    let dim = store.manifest.dim;
    let mut matrix = Vec::with_capacity(8 + 4 * dim * store.records.len());
    matrix.extend_from_slice(&(dim as u32).to_le_bytes());
    matrix.extend_from_slice(&(store.records.len() as u32).to_le_bytes());
    for r in &store.records {
        for v in r.embedding.values() {
            let x = v.to_f32().unwrap_or(f32::NAN);
            matrix.extend_from_slice(&x.to_le_bytes());
        }
    }

    let mut checksums = Vec::new();
    for (name, bytes) in [
        (MANIFEST_FILE, &manifest_json),
        (RECORDS_FILE, &records_jsonl),
        (EMBEDDINGS_FILE, &matrix),
    ] {
        std::fs::write(dir.join(name), bytes)?;
        writeln!(checksums, "{}  {name}", sha256_hex(bytes))?;
    }
    std::fs::write(dir.join(CHECKSUM_FILE), checksums)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStore(msg.into())
}

/// Reads a store written by [`save_store`], verifying version and checksums.
pub fn load_store<S: Scalar>(dir: impl AsRef<Path>) -> Result<ExemplarStore<S>> {
    let dir = dir.as_ref();
    let manifest_bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: StoreManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }

    let checksums = std::fs::read_to_string(dir.join(CHECKSUM_FILE)).map_err(|e| corrupt(format!("{CHECKSUM_FILE}: {e}")))?;
    let expected: HashMap<&str, &str> = checksums
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, name)| (name.trim(), h.trim()))
        .collect();
    let records_bytes = std::fs::read(dir.join(RECORDS_FILE))?;
    let matrix = std::fs::read(dir.join(EMBEDDINGS_FILE))?;
    for (name, bytes) in [
        (MANIFEST_FILE, &manifest_bytes),
        (RECORDS_FILE, &records_bytes),
        (EMBEDDINGS_FILE, &matrix),
    ] {
        match expected.get(name) {
            Some(h) if *h == sha256_hex(bytes) => {}
            Some(_) => return Err(corrupt(format!("checksum mismatch for {name}"))),
            None => return Err(corrupt(format!("no checksum recorded for {name}"))),
        }
    }

    if matrix.len() < 8 {
        return Err(corrupt("embedding matrix header truncated"));
    }
    let dim = u32::from_le_bytes(matrix[0..4].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(matrix[4..8].try_into().unwrap()) as usize;
    if matrix.len() != 8 + 4 * dim * count {
        return Err(corrupt(format!(
            "embedding matrix holds {} bytes, header promises {dim}x{count}",
            matrix.len() - 8
        )));
    }
    if dim != manifest.dim || count != manifest.record_count {
        return Err(corrupt("embedding matrix header disagrees with manifest"));
    }

    let text = std::str::from_utf8(&records_bytes).map_err(|e| corrupt(e.to_string()))?;
    let mut records = Vec::with_capacity(count);
    for (row, line) in text.lines().enumerate() {
        let stored: StoredRecord = serde_json::from_str(line).map_err(|e| corrupt(format!("{RECORDS_FILE} row {}: {e}", row + 1)))?;
        if row >= count {
            return Err(corrupt("more records than embeddings"));
        }
        let start = 8 + 4 * dim * row;
        let values: Vec<S> = matrix[start..start + 4 * dim]
            .chunks_exact(4)
            .map(|c| S::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap_or_else(S::nan))
            .collect();
        let embedding = Embedding::from_unit(values).map_err(|e| corrupt(format!("row {}: {e}", row + 1)))?;
        let image = ImageSource::File(PathBuf::from(dir).join(&stored.image_path));
        records.push(ExemplarRecord {
            instance: Instance {
                id: stored.id,
                image,
                text: stored.text,
                target: stored.target,
            },
            label: stored.label,
            cot: stored.cot,
            embedding,
        });
    }
    if records.len() != count {
        return Err(corrupt(format!("{} records for {count} embeddings", records.len())));
    }
    let mut store = ExemplarStore::from_records(records, manifest.embedding_model_id.clone(), manifest.cot_model_id.clone(), manifest.created_at.clone())?;
    store.manifest = manifest;
    Ok(store)
}

/// SHA-256 of the persisted manifest, for run manifests.
pub fn manifest_hash(manifest: &StoreManifest) -> String {
    let mut bytes = serde_json::to_vec_pretty(manifest).unwrap_or_default();
    bytes.push(b'\n');
    sha256_hex(&bytes)
}
