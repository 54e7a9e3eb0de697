//! Prompt templates for every agent role, with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Placeholder names recognised inside template bodies.
pub const PLACEHOLDERS: [&str; 11] = [
    "text",
    "target",
    "exemplar_info",
    "stance_type",
    "text_analysis",
    "image_analysis",
    "conflict_analysis",
    "debate_context",
    "favor_arg",
    "against_arg",
    "neutral_arg",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    TextAnalysis,
    ImageAnalysis,
    ModalityConflict,
    Debater,
    Adjudicator,
    /// Adjudicator with the critical self-reflection step removed.
    AdjudicatorNoReflection,
    /// Rationale generation for exemplars at store-build time.
    Cot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::TextAnalysis,
        TemplateId::ImageAnalysis,
        TemplateId::ModalityConflict,
        TemplateId::Debater,
        TemplateId::Adjudicator,
        TemplateId::AdjudicatorNoReflection,
        TemplateId::Cot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::TextAnalysis => "text-analysis",
            TemplateId::ImageAnalysis => "image-analysis",
            TemplateId::ModalityConflict => "modality-conflict",
            TemplateId::Debater => "debater",
            TemplateId::Adjudicator => "adjudicator",
            TemplateId::AdjudicatorNoReflection => "adjudicator-no-reflection",
            TemplateId::Cot => "cot",
        }
    }

    /// File name inside a template directory.
    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str().replace('-', "_"))
    }

    fn stock_body(self) -> &'static str {
        match self {
            TemplateId::TextAnalysis => include_str!("../../templates/text_analysis.txt"),
            TemplateId::ImageAnalysis => include_str!("../../templates/image_analysis.txt"),
            TemplateId::ModalityConflict => include_str!("../../templates/modality_conflict.txt"),
            TemplateId::Debater => include_str!("../../templates/debater.txt"),
            TemplateId::Adjudicator => include_str!("../../templates/adjudicator.txt"),
            TemplateId::AdjudicatorNoReflection => include_str!("../../templates/adjudicator_no_reflection.txt"),
            TemplateId::Cot => include_str!("../../templates/cot.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<TemplateId> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    /// Placeholders used by the body, in first-occurrence order.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for name in Segments::new(&self.body).filter_map(|s| s.name()) {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Substitutes every placeholder verbatim. Values are not rescanned.
    pub fn render<K, V>(&self, bindings: &BTreeMap<K, V>) -> Result<String>
    where
        K: std::borrow::Borrow<str> + Ord,
        V: AsRef<str>,
    {
        let mut out = String::with_capacity(self.body.len() + 256);
        for segment in Segments::new(&self.body) {
            match segment {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) => {
                    let value = bindings.get(name).ok_or_else(|| Error::MissingBinding(name.to_string()))?;
                    out.push_str(value.as_ref());
                }
            }
        }
        Ok(out)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'static str),
}

impl Segment<'_> {
    fn name(&self) -> Option<&'static str> {
        match self {
            Segment::Placeholder(name) => Some(name),
            Segment::Literal(_) => None,
        }
    }
}

/// Splits a body into literal runs and known `{name}` placeholders.
struct Segments<'a> {
    rest: &'a str,
}

impl<'a> Segments<'a> {
    fn new(body: &'a str) -> Self {
        Segments { rest: body }
    }
}

impl<'a> Iterator for Segments<'a> {
    type Item = Segment<'a>;

    fn next(&mut self) -> Option<Segment<'a>> {
        if self.rest.is_empty() {
            return None;
        }
        let mut search_from = 0;
        while let Some(off) = self.rest[search_from..].find('{') {
            let open = search_from + off;
            if let Some(name) = placeholder_at(&self.rest[open..]) {
                if open > 0 {
                    let lit = &self.rest[..open];
                    self.rest = &self.rest[open..];
                    return Some(Segment::Literal(lit));
                }
                self.rest = &self.rest[name.len() + 2..];
                return Some(Segment::Placeholder(name));
            }
            search_from = open + 1;
        }
        let lit = self.rest;
        self.rest = "";
        Some(Segment::Literal(lit))
    }
}

fn placeholder_at(s: &str) -> Option<&'static str> {
    let close = s.find('}')?;
    let name = &s[1..close];
    PLACEHOLDERS.iter().copied().find(|p| *p == name)
}

/// The full set of templates used by one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::stock()
    }
}

impl TemplateSet {
    pub fn stock() -> TemplateSet {
        TemplateSet {
            templates: TemplateId::ALL
                .into_iter()
                .map(|id| {
                    (
                        id,
                        PromptTemplate {
                            id,
                            body: id.stock_body().to_string(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Loads overrides from `dir`; templates without a file there stay stock.
    /// Logs a warning for every template whose checksum differs from stock.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<TemplateSet> {
        let mut set = TemplateSet::stock();
        for id in TemplateId::ALL {
            let path = dir.as_ref().join(id.file_name());
            if !path.exists() {
                continue;
            }
            let mut body = std::fs::read_to_string(&path)?;
            if body.ends_with('\n') {
                body.pop();
            }
            let template = PromptTemplate { id, body };
            if template.sha256() != set.templates[&id].sha256() {
                log::warn!(
                    "template {id} overridden from {} (sha256 {}), results are not comparable with stock prompts",
                    path.display(),
                    template.sha256()
                );
            }
            set.templates.insert(id, template);
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render<K, V>(&self, id: TemplateId, bindings: &BTreeMap<K, V>) -> Result<String>
    where
        K: std::borrow::Borrow<str> + Ord,
        V: AsRef<str>,
    {
        self.get(id).render(bindings)
    }

    pub fn is_stock(&self) -> bool {
        *self == TemplateSet::stock()
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.id.as_str().to_string(), t.sha256()))
            .collect()
    }
}

/// Renders a stock template addressed by its string id.
pub fn render_prompt(template_id: &str, bindings: &BTreeMap<String, String>) -> Result<String> {
    let id: TemplateId = template_id.parse()?;
    TemplateSet::stock().render(id, bindings)
}
