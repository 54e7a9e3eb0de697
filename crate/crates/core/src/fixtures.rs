//! Synthetic instances, datasets and mock scripts for tests, examples and
//! offline CLI runs.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::{AgentContext, ModelParams, TemplateSet};
use crate::domain::{CallTrace, ImageSource, Instance, StanceLabel, Vocabulary};
use crate::embedding::{PrecomputedEmbeddings, PrecomputedRecord};
use crate::error::Result;
use crate::llm::{MockBackend, MockResponse, MockScript, PromptMatcher, ScriptRule};
use crate::scalar::Scalar;
use crate::store::{build_store, BuildOptions, ExemplarStore};

pub const TEXT_ANALYSIS: &str = "ANALYSIS-T";
pub const IMAGE_ANALYSIS: &str = "ANALYSIS-I";
pub const CONFLICT_ANALYSIS: &str = "ANALYSIS-C";
pub const COT: &str = "Both modalities endorse the target.";
pub const FIXTURE_MODEL: &str = "fixture-embed";
pub const FIXTURE_CREATED_AT: &str = "2000-01-01T00:00:00Z";
pub const TARGETS: [&str; 2] = ["Donald Trump", "Joe Biden"];

/// A 4x4 PNG filled with a color derived from `seed`.
pub fn tiny_png(seed: u32) -> Vec<u8> {
    let color = [(seed * 53 % 256) as u8, (seed * 97 % 256) as u8, (seed * 193 % 256) as u8];
    let img = image::RgbImage::from_pixel(4, 4, image::Rgb(color));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encodes");
    out.into_inner()
}

/// Label cycle Support, Neutral, Oppose; targets alternate every row.
pub fn fixture_label(i: usize) -> StanceLabel {
    StanceLabel::ALL[i % 3]
}

pub fn fixture_text(i: usize) -> String {
    format!("fixture post {i} about the candidate")
}

pub fn fixture_instance(prefix: &str, i: usize) -> Instance {
    let image = ImageSource::from_bytes(tiny_png(i as u32)).expect("fixture png");
    Instance::new(format!("{prefix}{i:03}"), image, fixture_text(i), TARGETS[i % 2]).expect("fixture instance")
}

/// `n` labeled rows with ids `{prefix}000..`, texts `fixture post {offset + i} ..`.
pub fn labeled_rows(prefix: &str, offset: usize, n: usize) -> Vec<(Instance, StanceLabel)> {
    (offset..offset + n)
        .map(|i| {
            let mut inst = fixture_instance(prefix, i);
            inst.id = format!("{prefix}{:03}", i - offset);
            (inst, fixture_label(i))
        })
        .collect()
}

/// Writes rows as a JSONL dataset with PNG files under `dir/images`.
pub fn write_dataset(dir: &Path, file_name: &str, rows: &[(Instance, StanceLabel)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut lines = String::new();
    for (inst, label) in rows {
        let rel = format!("images/{}.png", inst.id);
        std::fs::write(dir.join(&rel), inst.image.load()?.bytes)?;
        let row = serde_json::json!({
            "id": inst.id,
            "text": inst.text,
            "image_path": rel,
            "target": inst.target,
            "label": label.value(),
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    let path = dir.join(file_name);
    std::fs::write(&path, lines)?;
    Ok(path)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Seeded random unit vectors, one image and one text vector per id.
pub fn precomputed_records<'a>(ids: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Vec<PrecomputedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.into_iter()
        .map(|id| PrecomputedRecord {
            id: id.to_string(),
            image_vec: unit_vector(&mut rng, dim),
            text_vec: unit_vector(&mut rng, dim),
        })
        .collect()
}

pub fn precomputed_embeddings(records: &[PrecomputedRecord], dim: usize) -> PrecomputedEmbeddings {
    let mut out = PrecomputedEmbeddings::new(FIXTURE_MODEL, Some(dim));
    for r in records {
        out.insert(r.id.clone(), r.image_vec.clone(), r.text_vec.clone());
    }
    out
}

pub fn write_precomputed(path: &Path, records: &[PrecomputedRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn rule(matcher: PromptMatcher, response: impl Into<String>) -> ScriptRule {
    ScriptRule {
        matcher,
        responses: vec![MockResponse::Text(response.into())],
    }
}

/// Replies for every agent except the adjudicator. Debaters answer
/// `ARG-<Word>-first` in round 1 and `ARG-<Word>-later` afterwards.
pub fn agent_rules() -> Vec<ScriptRule> {
    let mut rules = vec![
        rule(PromptMatcher::substring("You are a Text Analysis Agent"), TEXT_ANALYSIS),
        rule(PromptMatcher::substring("You are an Image Analysis Agent"), IMAGE_ANALYSIS),
        rule(PromptMatcher::substring("You are a Modality Conflict Agent"), CONFLICT_ANALYSIS),
        rule(PromptMatcher::substring("You are a Chain-of-Thought Annotation Agent"), COT),
    ];
    for word in ["Favor", "Against", "Neutral"] {
        let role = format!("arguing for the '{word}' stance");
        rules.push(rule(
            PromptMatcher::all_of([role.clone(), "Previous Round Arguments:".to_string()]),
            format!("ARG-{word}-later"),
        ));
        rules.push(rule(PromptMatcher::substring(role), format!("ARG-{word}-first")));
    }
    rules
}

fn adjudicator_reply(label: StanceLabel, why: &str) -> String {
    format!("Stance: {}\nJustification: {why}", label.word(Vocabulary::Adjudicator))
}

/// Adjudicator answers each row's gold label, keyed on the quoted text.
pub fn oracle_script(rows: &[(Instance, StanceLabel)]) -> MockScript {
    let mut rules = agent_rules();
    for (inst, label) in rows {
        rules.push(rule(
            PromptMatcher::all_of(["You are an Adjudicator Agent".to_string(), format!("Text: \"{}\"", inst.text)]),
            adjudicator_reply(*label, &format!("gold for {}", inst.id)),
        ));
    }
    MockScript { rules }
}

/// Adjudicator always answers `label`.
pub fn constant_script(label: StanceLabel) -> MockScript {
    let mut rules = agent_rules();
    rules.push(rule(
        PromptMatcher::substring("You are an Adjudicator Agent"),
        adjudicator_reply(label, "constant"),
    ));
    MockScript { rules }
}

pub fn oracle_mock(rows: &[(Instance, StanceLabel)]) -> MockBackend {
    MockBackend::from_script(oracle_script(rows))
}

/// Builds a store from `rows` with the fixture CoT reply and a fixed timestamp.
pub fn fixture_store<S: Scalar>(
    rows: &[(Instance, StanceLabel)],
    embeddings: &PrecomputedEmbeddings,
    templates: &TemplateSet,
) -> Result<ExemplarStore<S>> {
    let mock = MockBackend::from_script(MockScript { rules: agent_rules() });
    let params = ModelParams::default();
    let ctx = AgentContext::new(&mock, templates, &params);
    let options = BuildOptions {
        created_at: Some(FIXTURE_CREATED_AT.into()),
        ..BuildOptions::default()
    };
    build_store(rows, embeddings, &ctx, &options, &mut CallTrace::default())
}
