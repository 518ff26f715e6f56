//! Recall@k and mIoU under the drop-worst annotator rule, temporal-word
//! splits, the Prior baseline and the complexity/novelty breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CtgError, Result};
use crate::video_repr::{enumerate_segments, Segment};

/// Temporal-word split of a query. Declaration order is the report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Base,
    Before,
    After,
    Then,
    While,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 5] = [
        SplitLabel::Base,
        SplitLabel::Before,
        SplitLabel::After,
        SplitLabel::Then,
        SplitLabel::While,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Base => "base",
            SplitLabel::Before => "before",
            SplitLabel::After => "after",
            SplitLabel::Then => "then",
            SplitLabel::While => "while",
        }
    }
}

impl std::fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Temporal words in priority order.
const TEMPORAL_WORDS: [(&str, SplitLabel); 4] = [
    ("before", SplitLabel::Before),
    ("after", SplitLabel::After),
    ("then", SplitLabel::Then),
    ("while", SplitLabel::While),
];

/// Distinct temporal words present in the lowercased tokens.
pub fn temporal_words(tokens: &[String]) -> Vec<SplitLabel> {
    let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    TEMPORAL_WORDS
        .iter()
        .filter(|(w, _)| lower.iter().any(|t| t == w))
        .map(|&(_, l)| l)
        .collect()
}

pub fn split_label(tokens: &[String]) -> SplitLabel {
    temporal_words(tokens).first().copied().unwrap_or(SplitLabel::Base)
}

/// Clip-level intersection over union with inclusive spans.
pub fn iou(a: Segment, b: Segment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// How many annotator agreements survive the discard: three of four, and in
/// general all but the worst one.
pub fn kept_annotations(count: usize) -> usize {
    count.saturating_sub(1).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub hit1: bool,
    pub hit5: bool,
    pub iou: f64,
    /// Mean of the best surviving annotation ranks (1-based).
    pub rank_score: f64,
}

pub fn example_metrics(ranking: &[Segment], annotations: &[Segment]) -> Result<ExampleResult> {
    let top = *ranking
        .first()
        .ok_or_else(|| CtgError::Invalid("empty ranking".into()))?;
    if annotations.is_empty() {
        return Err(CtgError::Invalid("no annotations".into()));
    }
    let keep = kept_annotations(annotations.len());

    let mut ious: Vec<f64> = annotations.iter().map(|&a| iou(top, a)).collect();
    ious.sort_by(|a, b| b.total_cmp(a));
    let iou_mean = ious[..keep].iter().sum::<f64>() / keep as f64;

    let mut ranks = annotations
        .iter()
        .map(|a| {
            ranking
                .iter()
                .position(|s| s == a)
                .map(|p| p + 1)
                .ok_or_else(|| CtgError::Invalid(format!("annotation {a} missing from ranking")))
        })
        .collect::<Result<Vec<usize>>>()?;
    ranks.sort_unstable();
    let rank_score = ranks[..keep].iter().sum::<usize>() as f64 / keep as f64;

    Ok(ExampleResult {
        hit1: rank_score <= 1.0,
        hit5: rank_score <= 5.0,
        iou: iou_mean,
        rank_score,
    })
}

/// Canonical order, so rank 1 is segment (0,0).
pub fn prior_baseline(num_clips: usize) -> Result<Vec<Segment>> {
    enumerate_segments(num_clips)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub r1: f64,
    pub r5: f64,
    pub miou: f64,
    pub count: usize,
}

impl MetricsRow {
    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a ExampleResult>) -> Option<Self> {
        let (mut h1, mut h5, mut iou, mut n) = (0usize, 0usize, 0.0, 0usize);
        for r in results {
            h1 += usize::from(r.hit1);
            h5 += usize::from(r.hit5);
            iou += r.iou;
            n += 1;
        }
        (n > 0).then(|| MetricsRow {
            r1: h1 as f64 / n as f64,
            r5: h5 as f64 / n as f64,
            miou: iou / n as f64,
            count: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Non-empty splits in report order.
    pub splits: Vec<(SplitLabel, MetricsRow)>,
    /// Equal-weight mean over the splits; `count` is the total.
    pub average: MetricsRow,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn split(&self, label: SplitLabel) -> Option<&MetricsRow> {
        self.splits.iter().find(|(l, _)| *l == label).map(|(_, r)| r)
    }
}

/// Per-split metrics and their unweighted average. `expected` lists splits
/// that should be present; any of them without examples is warned about.
pub fn aggregate(results: &[(SplitLabel, ExampleResult)], expected: &[SplitLabel]) -> Result<MetricsReport> {
    let mut by_split: BTreeMap<SplitLabel, Vec<ExampleResult>> = BTreeMap::new();
    for &(l, r) in results {
        by_split.entry(l).or_default().push(r);
    }
    let mut warnings = Vec::new();
    for l in expected {
        if !by_split.contains_key(l) {
            let msg = format!("split '{l}' has no examples and is excluded from the average");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let splits: Vec<(SplitLabel, MetricsRow)> = by_split
        .iter()
        .filter_map(|(&l, rs)| MetricsRow::from_results(rs).map(|row| (l, row)))
        .collect();
    if splits.is_empty() {
        return Err(CtgError::Invalid("no examples to aggregate".into()));
    }
    let n = splits.len() as f64;
    let average = MetricsRow {
        r1: splits.iter().map(|(_, r)| r.r1).sum::<f64>() / n,
        r5: splits.iter().map(|(_, r)| r.r5).sum::<f64>() / n,
        miou: splits.iter().map(|(_, r)| r.miou).sum::<f64>() / n,
        count: results.len(),
    };
    Ok(MetricsReport {
        splits,
        average,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub key: usize,
    pub r1: f64,
    pub count: usize,
}

fn bucket_recall(items: impl IntoIterator<Item = (usize, bool)>) -> Vec<Bucket> {
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, hit) in items {
        let e = acc.entry(k).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(key, (hits, count))| Bucket {
            key,
            r1: hits as f64 / count as f64,
            count,
        })
        .collect()
}

/// Whole-set Recall@1 grouped by clause count; empty buckets are omitted.
pub fn complexity_buckets(items: &[(usize, bool)]) -> Vec<Bucket> {
    bucket_recall(items.iter().copied())
}

/// Linearly interpolated quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; dim];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len().max(1) as f64);
    m
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyAnalysis {
    /// Distance of each test query to its nearest training query.
    pub distances: Vec<f64>,
    /// Quartile index (0..4) per test query.
    pub quartiles: Vec<usize>,
    pub buckets: Vec<Bucket>,
}

/// Each query is given as its per-token embedding rows. Quartile edges come
/// from the test distances; a query falls in the quartile given by the number
/// of edges it strictly exceeds.
pub fn novelty_buckets(test: &[Vec<Vec<f64>>], train: &[Vec<Vec<f64>>], hits: &[bool]) -> Result<NoveltyAnalysis> {
    if train.is_empty() {
        return Err(CtgError::Invalid("novelty analysis needs training queries".into()));
    }
    if test.len() != hits.len() {
        return Err(CtgError::Invalid(format!("{} test queries but {} hits", test.len(), hits.len())));
    }
    let train_means: Vec<Vec<f64>> = train.iter().map(|q| mean_vector(q)).collect();
    let distances: Vec<f64> = test
        .iter()
        .map(|q| {
            let m = mean_vector(q);
            train_means
                .iter()
                .map(|t| euclidean(&m, t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    if distances.is_empty() {
        return Ok(NoveltyAnalysis {
            distances,
            quartiles: Vec::new(),
            buckets: Vec::new(),
        });
    }
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let edges = [quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75)];
    let quartiles: Vec<usize> = distances
        .iter()
        .map(|&d| edges.iter().filter(|&&e| d > e).count())
        .collect();
    let buckets = bucket_recall(quartiles.iter().copied().zip(hits.iter().copied()));
    Ok(NoveltyAnalysis {
        distances,
        quartiles,
        buckets,
    })
}
