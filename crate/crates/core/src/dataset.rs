//! JSON Lines dataset files and their validated in-memory form.
//!
//! One record per line:
//!
//! ```json
//! {"id": "ex00001", "video_id": "vid00001", "tokens": ["the", "dog", "runs"],
//!  "tree": "(S (NP (DT the) (NN dog)) (VP (VBZ runs)))",
//!  "annotations": [[0, 1], [0, 1], [0, 1], [0, 1]], "ground_truth": [0, 1],
//!  "split": "base", "num_clips": 6,
//!  "features": {"rgb": "features/vid00001.rgb.bin"}}
//! ```
//!
//! `tree`, `ground_truth`, `split` and `num_clips` are optional. Feature paths
//! are relative to the dataset file's directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clause_seg::{parse_ptb, PennTree};
use crate::error::{CtgError, Result};
use crate::eval::{split_label, temporal_words, SplitLabel};
use crate::video_repr::{ClipFeatures, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<String>,
    pub annotations: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_clips: Option<usize>,
    #[serde(default)]
    pub features: BTreeMap<String, String>,
}

/// The annotation chosen by the most annotators; ties go to the earliest
/// segment in canonical order.
pub fn majority_segment(annotations: &[Segment]) -> Option<Segment> {
    let mut counts: BTreeMap<Segment, usize> = BTreeMap::new();
    for &a in annotations {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in canonical order, max_by_key keeps the last maximum
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(s, _)| s)
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
    pub tree: Option<PennTree>,
    pub annotations: Vec<Segment>,
    pub ground_truth: Segment,
    pub split: SplitLabel,
    /// Set when the query holds more than one temporal word and the split
    /// came from the priority rule.
    pub multiple_temporal_words: bool,
}

#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    pub num_clips: usize,
    pub features: BTreeMap<String, Arc<ClipFeatures>>,
}

impl Video {
    pub fn modality(&self, name: &str) -> Result<&ClipFeatures> {
        self.features
            .get(name)
            .map(Arc::as_ref)
            .ok_or_else(|| CtgError::record(&self.id, format!("no '{name}' features loaded")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub videos: BTreeMap<String, Video>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Feature modalities every record must reference.
    pub modalities: Vec<String>,
    pub require_trees: bool,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Result<&Video> {
        self.videos
            .get(id)
            .ok_or_else(|| CtgError::Data(format!("unknown video {id}")))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Validates records against already-loaded features. `features` maps
    /// `(video_id, modality)` to clip features.
    pub fn from_records(
        records: Vec<DatasetRecord>,
        features: &BTreeMap<(String, String), Arc<ClipFeatures>>,
        opts: &LoadOptions,
    ) -> Result<Self> {
        let mut ds = Dataset::default();
        let mut seen = std::collections::HashSet::new();
        for rec in records {
            if !seen.insert(rec.id.clone()) {
                return Err(CtgError::record(&rec.id, "duplicate record id"));
            }
            let ex = validate_record(rec, features, opts, &mut ds)?;
            ds.examples.push(ex);
        }
        Ok(ds)
    }

    /// Vocabulary tokens of every query, in order of appearance.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str))
    }
}

fn validate_record(
    rec: DatasetRecord,
    features: &BTreeMap<(String, String), Arc<ClipFeatures>>,
    opts: &LoadOptions,
    ds: &mut Dataset,
) -> Result<Example> {
    let id = rec.id.clone();
    if rec.tokens.is_empty() {
        return Err(CtgError::record(&id, "empty token list"));
    }
    if rec.annotations.is_empty() {
        return Err(CtgError::record(&id, "no annotations"));
    }
    let tree = match &rec.tree {
        Some(t) => {
            let tree = parse_ptb(t).map_err(|e| CtgError::record(&id, e.to_string()))?;
            if tree.leaves().len() != rec.tokens.len() {
                return Err(CtgError::record(
                    &id,
                    format!("tree has {} leaves for {} tokens", tree.leaves().len(), rec.tokens.len()),
                ));
            }
            Some(tree)
        }
        None if opts.require_trees => return Err(CtgError::record(&id, "missing tree (required in parser mode)")),
        None => None,
    };

    let mut loaded = BTreeMap::new();
    for m in &opts.modalities {
        let f = features
            .get(&(rec.video_id.clone(), m.clone()))
            .ok_or_else(|| CtgError::record(&id, format!("missing '{m}' feature file for video {}", rec.video_id)))?;
        loaded.insert(m.clone(), Arc::clone(f));
    }
    let num_clips = match (rec.num_clips, loaded.values().next()) {
        (Some(t), _) => t,
        (None, Some(f)) => f.num_clips,
        (None, None) => return Err(CtgError::record(&id, "clip count unknown: no num_clips and no features")),
    };
    if let Some(f) = loaded.values().find(|f| f.num_clips != num_clips) {
        return Err(CtgError::record(
            &id,
            format!("features have {} clips but the record says {num_clips}", f.num_clips),
        ));
    }
    for a in rec.annotations.iter().chain(rec.ground_truth.iter()) {
        if !a.is_valid(num_clips) {
            return Err(CtgError::record(&id, format!("segment {a} out of bounds for T = {num_clips}")));
        }
    }
    match ds.videos.get_mut(&rec.video_id) {
        Some(v) if v.num_clips != num_clips => {
            return Err(CtgError::record(
                &id,
                format!("video {} has {} clips elsewhere", rec.video_id, v.num_clips),
            ))
        }
        Some(v) => {
            for (m, f) in loaded {
                v.features.entry(m).or_insert(f);
            }
        }
        None => {
            ds.videos.insert(
                rec.video_id.clone(),
                Video {
                    id: rec.video_id.clone(),
                    num_clips,
                    features: loaded,
                },
            );
        }
    }

    let present = temporal_words(&rec.tokens);
    let split = rec.split.unwrap_or_else(|| split_label(&rec.tokens));
    let ground_truth = rec
        .ground_truth
        .or_else(|| majority_segment(&rec.annotations))
        .expect("annotations are non-empty");
    Ok(Example {
        id: rec.id,
        video_id: rec.video_id,
        tokens: rec.tokens,
        tree,
        annotations: rec.annotations,
        ground_truth,
        split,
        multiple_temporal_words: present.len() > 1,
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CtgError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CtgError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| CtgError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CtgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| CtgError::io(path, e))?;
    }
    w.flush().map_err(|e| CtgError::io(path, e))
}

/// Reads a dataset file and every feature file it references.
pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut features = BTreeMap::new();
    for rec in &records {
        for m in &opts.modalities {
            let key = (rec.video_id.clone(), m.clone());
            if features.contains_key(&key) {
                continue;
            }
            let Some(rel) = rec.features.get(m) else {
                return Err(CtgError::record(&rec.id, format!("no '{m}' feature file referenced")));
            };
            let file = base.join(rel);
            if !file.exists() {
                return Err(CtgError::record(&rec.id, format!("feature file {} not found", file.display())));
            }
            let f = ClipFeatures::read(&file, &rec.video_id).map_err(|e| CtgError::record(&rec.id, e.to_string()))?;
            features.insert(key, Arc::new(f));
        }
    }
    let ds = Dataset::from_records(records, &features, opts)?;
    for w in &ds.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(ds)
}
