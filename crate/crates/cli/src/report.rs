//! Evaluation reports: JSON for provenance, CSV for the bucket analyses.

use std::fmt::Write as _;
use std::path::Path;

use ctg_core::clause_seg::count_clauses;
use ctg_core::eval::{complexity_buckets, novelty_buckets, Bucket, MetricsRow, SplitLabel};
use ctg_core::pipeline::{evaluate, prior_predictions, Prediction};
use ctg_core::{CtgError, CtgNet, Dataset, ExperimentConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub split: SplitLabel,
    #[serde(flatten)]
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: Option<ExperimentConfig>,
    pub examples: usize,
    pub splits: Vec<SplitEntry>,
    pub average: MetricsRow,
    /// Prior baseline on the same examples.
    pub prior: MetricsRow,
    pub warnings: Vec<String>,
    /// Recall@1 by clause count of the query tree.
    pub complexity: Vec<Bucket>,
    /// Recall@1 by quartile of distance to the nearest training query.
    pub novelty: Option<Vec<Bucket>>,
}

/// Training queries and the model whose word embeddings measure novelty.
pub struct NoveltyInputs<'a> {
    pub net: &'a CtgNet<f32>,
    pub train: &'a Dataset,
}

pub fn build_report(
    data: &Dataset,
    preds: &[Prediction],
    config: Option<ExperimentConfig>,
    novelty: Option<NoveltyInputs<'_>>,
) -> Result<EvalReport> {
    let ev = evaluate(data, preds)?;
    let prior = evaluate(data, &prior_predictions(data)?)?.report.average;
    let hits: Vec<bool> = ev.per_example.iter().map(|(_, r)| r.hit1).collect();

    let clause_hits: Vec<(usize, bool)> = data
        .examples
        .iter()
        .zip(&hits)
        .filter_map(|(ex, &h)| ex.tree.as_ref().map(|t| (count_clauses(t), h)))
        .collect();

    let novelty = match novelty {
        Some(n) => {
            let rows = |d: &Dataset| -> Result<Vec<Vec<Vec<f64>>>> {
                d.examples.iter().map(|ex| n.net.embedding_rows(&ex.tokens)).collect()
            };
            Some(novelty_buckets(&rows(data)?, &rows(n.train)?, &hits)?.buckets)
        }
        None => None,
    };

    Ok(EvalReport {
        config,
        examples: data.len(),
        splits: ev
            .report
            .splits
            .iter()
            .map(|&(split, metrics)| SplitEntry { split, metrics })
            .collect(),
        average: ev.report.average,
        prior,
        warnings: ev.report.warnings,
        complexity: complexity_buckets(&clause_hits),
        novelty,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,key,r1,r5,miou,count\n");
        for s in &self.splits {
            let m = s.metrics;
            let _ = writeln!(out, "split,{},{},{},{},{}", s.split, m.r1, m.r5, m.miou, m.count);
        }
        let a = self.average;
        let _ = writeln!(out, "split,average,{},{},{},{}", a.r1, a.r5, a.miou, a.count);
        let p = self.prior;
        let _ = writeln!(out, "prior,average,{},{},{},{}", p.r1, p.r5, p.miou, p.count);
        for b in &self.complexity {
            let _ = writeln!(out, "complexity,{},{},,,{}", b.key, b.r1, b.count);
        }
        for b in self.novelty.iter().flatten() {
            let _ = writeln!(out, "novelty,{},{},,,{}", b.key, b.r1, b.count);
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CtgError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| CtgError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CtgError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CtgError::io(path, e))
}
