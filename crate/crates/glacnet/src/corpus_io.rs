//! JSON-lines story files.
//!
//! Each line holds one story:
//! `{"story_id": "...", "features": [[f64; d]; S], "sentences": [[token; n]; S]}`.
//! Feature files used for generation have the same shape with `sentences`
//! optional. Blank lines are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use glacnet_core::corpus::StoryText;
use serde::{Deserialize, Serialize};

use crate::IoError;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoryLine {
    story_id: String,
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentences: Option<Vec<Vec<String>>>,
}

/// A story to generate text for.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStory {
    pub story_id: String,
    pub features: Vec<Vec<f64>>,
}

fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(StoryLine, usize) -> Result<T, IoError>,
) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(|e| IoError::open(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| IoError::open(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StoryLine = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(parse(parsed, lineno)?);
    }
    Ok(out)
}

fn data_error(path: &Path, line: usize, message: impl ToString) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Reads a corpus; every story must carry aligned features and sentences.
pub fn read_corpus(path: &Path) -> Result<Vec<StoryText>, IoError> {
    read_lines(path, |line, lineno| {
        let sentences = line
            .sentences
            .ok_or_else(|| data_error(path, lineno, "missing field `sentences`"))?;
        let story = StoryText {
            story_id: line.story_id,
            features: line.features,
            sentences,
        };
        story.validate().map_err(|e| data_error(path, lineno, e))?;
        Ok(story)
    })
}

/// Reads stories for generation; `sentences` is ignored when present.
pub fn read_features(path: &Path) -> Result<Vec<FeatureStory>, IoError> {
    read_lines(path, |line, lineno| {
        let story = FeatureStory {
            story_id: line.story_id,
            features: line.features,
        };
        if story.features.is_empty() || story.features.iter().any(|f| f.len() != story.features[0].len()) {
            return Err(data_error(path, lineno, "features must be S equal-length vectors"));
        }
        Ok(story)
    })
}

pub fn write_corpus(path: &Path, stories: &[StoryText]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::open(path, e))?;
    let mut w = BufWriter::new(file);
    for story in stories {
        let line = StoryLine {
            story_id: story.story_id.clone(),
            features: story.features.clone(),
            sentences: Some(story.sentences.clone()),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| data_error(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| IoError::open(path, e))?;
    }
    w.flush().map_err(|e| IoError::open(path, e))
}
