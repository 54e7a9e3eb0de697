//! JSON Lines dataset loader.
//!
//! One row per line: `{"id", "text", "image_path", "target", "label"}` with
//! `label` in {1, 0, -1}. Image paths resolve against the file's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ImageSource, Instance, StanceLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub dataset_name: String,
    /// `None` when the split spans every target in the file.
    pub target: Option<String>,
    pub split: Split,
    pub rows: Vec<(Instance, StanceLabel)>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn instances(&self) -> Vec<Instance> {
        self.rows.iter().map(|(i, _)| i.clone()).collect()
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str, row: usize) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) if key == "id" => Ok(n.to_string()),
        Some(other) => Err(Error::Schema {
            row,
            message: format!("field {key:?} must be a string, got {other}"),
        }),
        None => Err(Error::Schema {
            row,
            message: format!("missing field {key:?}"),
        }),
    }
}

/// Loads and validates one split. Rows whose target differs from `target`
/// are skipped when `target` is given. Every image must exist and decode.
pub fn load_dataset(
    path: impl AsRef<Path>,
    dataset_name: &str,
    target: Option<&str>,
    split: Split,
) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let content = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Schema {
            row,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Schema {
                row,
                message: "row is not a JSON object".into(),
            });
        };
        let id = string_field(&obj, "id", row)?;
        let text = string_field(&obj, "text", row)?;
        let image_path = string_field(&obj, "image_path", row)?;
        let row_target = string_field(&obj, "target", row)?;
        let raw_label = obj.get("label").ok_or_else(|| Error::Schema {
            row,
            message: "missing field \"label\"".into(),
        })?;
        let value = raw_label.as_i64().ok_or_else(|| Error::Schema {
            row,
            message: format!("label must be an integer, got {raw_label}"),
        })?;
        let label = StanceLabel::from_value(value).ok_or(Error::UnknownLabel { row, value })?;

        if target.is_some_and(|t| t != row_target) {
            continue;
        }
        if !ids.insert(id.clone()) {
            return Err(Error::Schema {
                row,
                message: format!("duplicate id {id:?}"),
            });
        }
        let image_file = root.join(&image_path);
        if !image_file.is_file() {
            return Err(Error::MissingImage(image_file));
        }
        let image = ImageSource::File(image_file);
        image.load().map_err(|e| match e {
            Error::ImageDecode(msg) => Error::Schema {
                row,
                message: format!("image {image_path}: {msg}"),
            },
            other => other,
        })?;
        let instance = Instance {
            id,
            image,
            text,
            target: row_target,
        };
        instance.validate_text().map_err(|e| Error::Schema {
            row,
            message: e.to_string(),
        })?;
        rows.push((instance, label));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(DatasetSplit {
        dataset_name: dataset_name.to_string(),
        target: target.map(str::to_string),
        split,
        rows,
    })
}
