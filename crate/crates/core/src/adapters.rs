//! Converts externally supplied annotation files into dataset records.
//!
//! Input: a JSON array (or JSON Lines) of objects
//!
//! ```json
//! {"annotation_id": "a1", "video": "v1", "description": "the man waves before he falls",
//!  "times": [[0, 1], [0, 1], [1, 1], [0, 1]], "parse": "(S ...)"}
//! ```
//!
//! `times` are inclusive clip indices. `annotation_id` may be a string or a
//! number; `parse` and `tokens` are optional. Without `tokens`, the tree's
//! leaves are used, else the lowercased description split on whitespace.
//! Feature files are looked up as `<features_dir>/<video>.<modality>.bin` or
//! `.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clause_seg::parse_ptb;
use crate::dataset::{majority_segment, DatasetRecord};
use crate::error::{CtgError, Result};
use crate::video_repr::{ClipFeatures, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAnnotation {
    #[serde(alias = "id")]
    pub annotation_id: serde_json::Value,
    #[serde(alias = "video_id")]
    pub video: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
    pub times: Vec<[i64; 2]>,
    #[serde(default, alias = "tree")]
    pub parse: Option<String>,
}

impl ExternalAnnotation {
    fn id(&self) -> String {
        match &self.annotation_id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub kept: usize,
    pub skipped_out_of_range: usize,
    pub skipped_missing_features: usize,
    pub skipped_malformed: usize,
    pub warnings: Vec<String>,
}

pub fn read_external(path: impl AsRef<Path>) -> Result<Vec<ExternalAnnotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CtgError::io(path, e))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| CtgError::Data(format!("{}: {e}", path.display())));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CtgError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn feature_file(dir: &Path, video: &str, modality: &str) -> Option<PathBuf> {
    ["bin", "json"]
        .iter()
        .map(|ext| dir.join(format!("{video}.{modality}.{ext}")))
        .find(|p| p.exists())
}

/// Maps annotations to records. Records whose spans fall outside the video
/// or whose feature files are missing are skipped and counted.
pub fn adapt(annotations: &[ExternalAnnotation], features_dir: &Path, modalities: &[String]) -> Result<(Vec<DatasetRecord>, AdaptSummary)> {
    let mut summary = AdaptSummary::default();
    let mut records = Vec::new();
    let mut clip_counts: std::collections::HashMap<String, Option<usize>> = std::collections::HashMap::new();
    let abs_dir = std::fs::canonicalize(features_dir).unwrap_or_else(|_| features_dir.to_path_buf());

    for a in annotations {
        let id = a.id();
        let warn = |s: &mut AdaptSummary, msg: String| {
            log::warn!("{msg}");
            s.warnings.push(msg);
        };

        let tree = match &a.parse {
            Some(p) => match parse_ptb(p) {
                Ok(t) => Some(t),
                Err(e) => {
                    summary.skipped_malformed += 1;
                    warn(&mut summary, format!("{id}: unreadable parse: {e}"));
                    continue;
                }
            },
            None => None,
        };
        let tokens: Vec<String> = match (&a.tokens, &tree) {
            (Some(t), _) => t.clone(),
            (None, Some(t)) => t.leaves().iter().map(|w| w.to_lowercase()).collect(),
            (None, None) => a.description.split_whitespace().map(str::to_lowercase).collect(),
        };
        if tokens.is_empty() || a.times.is_empty() || tree.as_ref().is_some_and(|t| t.leaves().len() != tokens.len()) {
            summary.skipped_malformed += 1;
            warn(&mut summary, format!("{id}: empty query, no spans, or tree/token mismatch"));
            continue;
        }

        let mut refs = std::collections::BTreeMap::new();
        let mut missing = None;
        for m in modalities {
            match feature_file(features_dir, &a.video, m) {
                Some(_) => {
                    let f = feature_file(&abs_dir, &a.video, m).expect("same directory");
                    refs.insert(m.clone(), f.to_string_lossy().into_owned());
                }
                None => missing = Some(m.clone()),
            }
        }
        if let Some(m) = missing {
            summary.skipped_missing_features += 1;
            warn(&mut summary, format!("{id}: no '{m}' features for video {}", a.video));
            continue;
        }

        let num_clips = match clip_counts.get(&a.video) {
            Some(t) => *t,
            None => {
                let t = match modalities.first() {
                    Some(m) => {
                        let path = feature_file(features_dir, &a.video, m).expect("checked above");
                        ClipFeatures::read(&path, &a.video).ok().map(|f| f.num_clips)
                    }
                    None => None,
                };
                clip_counts.insert(a.video.clone(), t);
                t
            }
        };
        let Some(num_clips) = num_clips else {
            summary.skipped_missing_features += 1;
            warn(&mut summary, format!("{id}: cannot read features of video {}", a.video));
            continue;
        };

        let spans: Option<Vec<Segment>> = a
            .times
            .iter()
            .map(|&[s, e]| {
                (s >= 0 && e >= s && (e as usize) < num_clips).then(|| Segment::new(s as usize, e as usize))
            })
            .collect();
        let Some(spans) = spans else {
            summary.skipped_out_of_range += 1;
            warn(&mut summary, format!("{id}: span outside the {num_clips} clips of video {}", a.video));
            continue;
        };
        if spans.len() != 4 {
            log::info!("{id}: {} annotator spans", spans.len());
        }

        records.push(DatasetRecord {
            id,
            video_id: a.video.clone(),
            tokens,
            tree: tree.map(|t| t.to_string()),
            ground_truth: majority_segment(&spans),
            annotations: spans,
            split: None,
            num_clips: Some(num_clips),
            features: refs,
        });
        summary.kept += 1;
    }
    if records.is_empty() {
        return Err(CtgError::Data(format!(
            "no valid records ({} out of range, {} missing features, {} malformed)",
            summary.skipped_out_of_range, summary.skipped_missing_features, summary.skipped_malformed
        )));
    }
    Ok((records, summary))
}
