use std::sync::OnceLock;

use regex::Regex;

use crate::domain::{StanceLabel, Vocabulary};
use crate::error::{Error, Result};

fn stance_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s#>*_-]*stance[*_\s]*:(.*)$").unwrap())
}

fn justification_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)[*_]*justification[*_]*\s*:[*_]*").unwrap())
}

/// Extracts `(label, justification)` from the adjudicator's reply.
///
/// The first `Stance:` line (markdown bold tolerated) whose value is a known
/// label word wins. The justification is whatever follows the first
/// `Justification:` marker, or the text after the stance line if there is
/// no marker. An empty justification is rejected.
pub fn parse_adjudicator_output(text: &str) -> Result<(StanceLabel, String)> {
    let mut found = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let end = offset + line.len();
        if let Some(caps) = stance_line().captures(line.trim_end_matches(['\n', '\r'])) {
            let value = caps[1].trim().trim_start_matches(['*', '_', ' ']);
            let word = value.split_whitespace().next().unwrap_or("");
            if let Ok(label) = StanceLabel::from_word(word) {
                found = Some((label, end));
                break;
            }
        }
        offset = end;
    }
    let (label, stance_end) = found.ok_or_else(|| Error::Parse("no valid `Stance:` line".into()))?;
    let justification = match justification_marker().find(text) {
        Some(m) => text[m.end()..].trim(),
        None => text[stance_end..].trim(),
    };
    if justification.is_empty() {
        return Err(Error::Parse("empty justification".into()));
    }
    Ok((label, justification.to_string()))
}

/// The reply shape the adjudicator is asked to produce.
pub fn format_adjudicator_output(label: StanceLabel, justification: &str) -> String {
    format!("Stance: {}\nJustification: {}", label.word(Vocabulary::Adjudicator), justification)
}
