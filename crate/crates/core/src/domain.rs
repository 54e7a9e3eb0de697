//! Value types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way stance towards a target: Support (1), Neutral (0), Oppose (-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum StanceLabel {
    Oppose,
    Neutral,
    Support,
}

/// Word set used when a label is written into text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vocabulary {
    /// Support / Neutral / Oppose
    Canonical,
    /// Favor / Neutral / Against, as requested from the adjudicator.
    Adjudicator,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Support, StanceLabel::Neutral, StanceLabel::Oppose];

    pub fn value(self) -> i64 {
        match self {
            StanceLabel::Support => 1,
            StanceLabel::Neutral => 0,
            StanceLabel::Oppose => -1,
        }
    }

    pub fn from_value(value: i64) -> Option<StanceLabel> {
        match value {
            1 => Some(StanceLabel::Support),
            0 => Some(StanceLabel::Neutral),
            -1 => Some(StanceLabel::Oppose),
            _ => None,
        }
    }

    /// Position in confusion matrices: Support, Neutral, Oppose.
    pub fn index(self) -> usize {
        match self {
            StanceLabel::Support => 0,
            StanceLabel::Neutral => 1,
            StanceLabel::Oppose => 2,
        }
    }

    /// Parses a label word. Case-insensitive; surrounding whitespace and
    /// punctuation (`*`, brackets, quotes, trailing periods) are ignored.
    pub fn from_word(word: &str) -> Result<StanceLabel> {
        let cleaned = word
            .trim()
            .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .to_ascii_lowercase();
        match cleaned.as_str() {
            "support" | "favor" => Ok(StanceLabel::Support),
            "neutral" => Ok(StanceLabel::Neutral),
            "oppose" | "against" => Ok(StanceLabel::Oppose),
            _ => Err(Error::UnknownLabelWord(word.to_string())),
        }
    }

    pub fn word(self, vocabulary: Vocabulary) -> &'static str {
        match (self, vocabulary) {
            (StanceLabel::Support, Vocabulary::Canonical) => "Support",
            (StanceLabel::Support, Vocabulary::Adjudicator) => "Favor",
            (StanceLabel::Neutral, _) => "Neutral",
            (StanceLabel::Oppose, Vocabulary::Canonical) => "Oppose",
            (StanceLabel::Oppose, Vocabulary::Adjudicator) => "Against",
        }
    }
}

/// Maps a free-text label word onto a [`StanceLabel`].
pub fn label_from_word(word: &str) -> Result<StanceLabel> {
    StanceLabel::from_word(word)
}

pub fn label_word(label: StanceLabel, vocabulary: Vocabulary) -> &'static str {
    label.word(vocabulary)
}

impl TryFrom<i64> for StanceLabel {
    type Error = String;

    fn try_from(value: i64) -> std::result::Result<Self, Self::Error> {
        StanceLabel::from_value(value).ok_or_else(|| format!("stance label must be 1, 0 or -1, got {value}"))
    }
}

impl From<StanceLabel> for i64 {
    fn from(label: StanceLabel) -> i64 {
        label.value()
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word(Vocabulary::Canonical))
    }
}

/// Image attached to an instance: either held in memory or referenced on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Inline { media_type: String, bytes: Arc<[u8]> },
    File(PathBuf),
}

/// Decoded-and-validated image bytes ready to be attached to a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub media_type: String,
    pub bytes: Arc<[u8]>,
}

impl ImageSource {
    /// Builds an inline image, sniffing the media type from the bytes.
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Result<ImageSource> {
        let bytes = bytes.into();
        let media_type = sniff_media_type(&bytes)?;
        Ok(ImageSource::Inline { media_type, bytes })
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            ImageSource::File(p) => Some(p),
            ImageSource::Inline { .. } => None,
        }
    }

    /// Reads the image and checks that it decodes to a supported raster format.
    pub fn load(&self) -> Result<ImageData> {
        let (media_type, bytes) = match self {
            ImageSource::Inline { media_type, bytes } => (media_type.clone(), bytes.clone()),
            ImageSource::File(path) => {
                if !path.exists() {
                    return Err(Error::MissingImage(path.clone()));
                }
                let bytes: Arc<[u8]> = std::fs::read(path)?.into();
                (sniff_media_type(&bytes)?, bytes)
            }
        };
        image::load_from_memory(&bytes).map_err(|e| Error::ImageDecode(e.to_string()))?;
        Ok(ImageData { media_type, bytes })
    }
}

fn sniff_media_type(bytes: &[u8]) -> Result<String> {
    let format = image::guess_format(bytes).map_err(|e| Error::ImageDecode(e.to_string()))?;
    Ok(format.to_mime_type().to_string())
}

/// One (image, text, target) triple to classify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub image: ImageSource,
    pub text: String,
    pub target: String,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        image: ImageSource,
        text: impl Into<String>,
        target: impl Into<String>,
    ) -> Result<Instance> {
        let instance = Instance {
            id: id.into(),
            image,
            text: text.into(),
            target: target.into(),
        };
        instance.validate_text()?;
        Ok(instance)
    }

    /// Checks the non-empty text/target invariant.
    pub fn validate_text(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::InvalidInput(format!("instance {}: empty text", self.id)));
        }
        if self.target.trim().is_empty() {
            return Err(Error::InvalidInput(format!("instance {}: empty target", self.id)));
        }
        Ok(())
    }
}

pub const ANALYSIS_UNAVAILABLE: &str = "Analysis unavailable.";
pub const NO_ARGUMENT: &str = "No argument provided.";
pub const UNPARSEABLE: &str = "UNPARSEABLE";

/// Outputs of the three analysis agents; `None` where the agent did not run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub text_analysis: Option<String>,
    pub image_analysis: Option<String>,
    pub conflict_analysis: Option<String>,
}

impl AnalysisBundle {
    pub fn text_or_sentinel(&self) -> &str {
        self.text_analysis.as_deref().unwrap_or(ANALYSIS_UNAVAILABLE)
    }

    pub fn image_or_sentinel(&self) -> &str {
        self.image_analysis.as_deref().unwrap_or(ANALYSIS_UNAVAILABLE)
    }

    pub fn conflict_or_sentinel(&self) -> &str {
        self.conflict_analysis.as_deref().unwrap_or(ANALYSIS_UNAVAILABLE)
    }
}

/// Stance a debater argues for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebateRole {
    Support,
    Oppose,
    Neutral,
}

impl DebateRole {
    /// Fixed speaking order within a round.
    pub const ORDER: [DebateRole; 3] = [DebateRole::Support, DebateRole::Oppose, DebateRole::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            DebateRole::Support => "support",
            DebateRole::Oppose => "oppose",
            DebateRole::Neutral => "neutral",
        }
    }

    pub fn label(self) -> StanceLabel {
        match self {
            DebateRole::Support => StanceLabel::Support,
            DebateRole::Oppose => StanceLabel::Oppose,
            DebateRole::Neutral => StanceLabel::Neutral,
        }
    }
}

pub type DebateRound = BTreeMap<DebateRole, String>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub rounds: Vec<DebateRound>,
    pub final_arguments: DebateRound,
}

impl DebateTranscript {
    pub fn argument(&self, role: DebateRole) -> &str {
        self.final_arguments.get(&role).map(String::as_str).unwrap_or(NO_ARGUMENT)
    }
}

/// Pipeline stage a model call belongs to. Ordered by execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "BUILD")]
    Build,
    #[serde(rename = "RA")]
    Ra,
    #[serde(rename = "MA")]
    Ma,
    #[serde(rename = "RED")]
    Red,
    #[serde(rename = "SRA")]
    Sra,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Build => "BUILD",
            Stage::Ra => "RA",
            Stage::Ma => "MA",
            Stage::Red => "RED",
            Stage::Sra => "SRA",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one model call, e.g. `MA/text` or `RED/oppose/r2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub stage: Stage,
    pub agent: String,
}

impl CallTag {
    pub fn new(stage: Stage, agent: impl Into<String>) -> CallTag {
        CallTag {
            stage,
            agent: agent.into(),
        }
    }
}

impl fmt::Display for CallTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.stage, self.agent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: Stage,
    pub agent: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_time_us: u64,
    /// Backend attempts spent on this call, including retries.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TraceEntry {
    pub fn tag(&self) -> String {
        format!("{}/{}", self.stage, self.agent)
    }

    pub fn wall_time(&self) -> Duration {
        Duration::from_micros(self.wall_time_us)
    }
}

/// Every model call made while classifying one instance, in call order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTrace {
    pub entries: Vec<TraceEntry>,
}

impl CallTrace {
    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: CallTrace) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn calls_in(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    pub fn tokens_by_stage(&self) -> BTreeMap<Stage, u64> {
        let mut totals = BTreeMap::new();
        for e in &self.entries {
            *totals.entry(e.stage).or_insert(0) += e.prompt_tokens + e.completion_tokens;
        }
        totals
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.prompt_tokens + e.completion_tokens).sum()
    }
}

/// A retrieved exemplar as seen by one classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedInfo {
    pub id: String,
    /// Cosine similarity to the query; absent for noise replacements.
    pub similarity: Option<f64>,
    pub replaced: bool,
}

/// Final decision for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: StanceLabel,
    pub justification: String,
    /// True when the adjudicator output could not be parsed and the
    /// Neutral/UNPARSEABLE fallback was used.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub retrieved: Vec<RetrievedInfo>,
    pub trace: CallTrace,
}
