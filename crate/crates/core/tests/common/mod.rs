//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use regex::Regex;
use stancedet::agents::templates::PLACEHOLDERS;
use stancedet::{TemplateId, TemplateSet};

pub const LATEX_PROMPTS: &str = include_str!("../fixtures/agent_prompts.tex");

/// Reads every `tcolorbox` block and converts its body to plain text:
/// bold markers dropped, itemize items become `- `, enumerate items are
/// numbered, `\_` unescaped, trailing `\\` line breaks removed.
pub fn latex_prompts() -> BTreeMap<String, String> {
    let block = Regex::new(r"(?s)\\begin\{tcolorbox\}\[(.*?)\]\n(.*?)\n\\end\{tcolorbox\}").unwrap();
    let title = Regex::new(r"title=([^,\n]+)").unwrap();
    let bold = Regex::new(r"\\textbf\{([^}]*)\}").unwrap();
    let mut out = BTreeMap::new();
    for caps in block.captures_iter(LATEX_PROMPTS) {
        let name = title.captures(&caps[1]).unwrap()[1].trim().to_string();
        let mut lines = Vec::new();
        let mut list: Vec<Option<usize>> = Vec::new();
        for raw in caps[2].lines() {
            let line = raw.trim();
            match line {
                r"\begin{itemize}" => list.push(None),
                r"\begin{enumerate}" => list.push(Some(0)),
                r"\end{itemize}" | r"\end{enumerate}" => {
                    list.pop();
                }
                _ => {
                    let mut text = bold.replace_all(line, "$1").replace(r"\_", "_");
                    if let Some(stripped) = text.strip_suffix(r" \\") {
                        text = stripped.to_string();
                    }
                    if let Some(item) = text.strip_prefix(r"\item ") {
                        text = match list.last_mut() {
                            Some(Some(n)) => {
                                *n += 1;
                                format!("{n}. {item}")
                            }
                            _ => format!("- {item}"),
                        };
                    }
                    lines.push(text);
                }
            }
        }
        out.insert(name, lines.join("\n"));
    }
    out
}

pub const FIDELITY_PAIRS: [(TemplateId, &str); 5] = [
    (TemplateId::TextAnalysis, "Text Analysis Agent Prompt"),
    (TemplateId::ImageAnalysis, "Image Analysis Agent Prompt"),
    (TemplateId::ModalityConflict, "Modality Conflict Agent Prompt"),
    (TemplateId::Debater, "Debater Agent Prompt"),
    (TemplateId::Adjudicator, "Adjudicator Agent Prompt"),
];

/// Renders `id` with a sentinel per placeholder, then turns the sentinels
/// back into `{name}`.
pub fn sentinel_round_trip(templates: &TemplateSet, id: TemplateId) -> String {
    let bindings: BTreeMap<&str, String> = PLACEHOLDERS.iter().map(|p| (*p, format!("\u{27e6}{p}\u{27e7}"))).collect();
    let mut rendered = templates.render(id, &bindings).unwrap();
    for p in PLACEHOLDERS {
        rendered = rendered.replace(&format!("\u{27e6}{p}\u{27e7}"), &format!("{{{p}}}"));
    }
    rendered
}

/// First differing line, for readable failures.
pub fn first_diff(a: &str, b: &str) -> Option<String> {
    if a == b {
        return None;
    }
    for (i, (x, y)) in a.lines().zip(b.lines()).enumerate() {
        if x != y {
            return Some(format!("line {}: {x:?} != {y:?}", i + 1));
        }
    }
    Some(format!("lengths differ: {} vs {} bytes", a.len(), b.len()))
}
