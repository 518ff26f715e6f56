//! Dataset-level prediction and evaluation shared by training and the CLI.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{CtgError, Result};
use crate::eval::{aggregate, example_metrics, prior_baseline, ExampleResult, MetricsReport, SplitLabel};
use crate::grounding::{late_fusion, rank_with_scores};
use crate::model::CtgNet;
use crate::video_repr::Segment;

/// Ranked output for one example; `scores[i]` belongs to `ranked_segments[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub ranked_segments: Vec<Segment>,
    pub scores: Vec<f64>,
}

/// Refined scores for every segment of the example's video, in canonical
/// order, fused across models when there are two.
pub fn example_scores(models: &[(&CtgNet<f32>, &str)], fusion_lambda: f64, ex: &Example, data: &Dataset) -> Result<Vec<f64>> {
    let video = data.video(&ex.video_id)?;
    let mut per_model = Vec::with_capacity(models.len());
    for (net, modality) in models {
        let q = net
            .prepare(&ex.tokens, ex.tree.as_ref())
            .map_err(|e| CtgError::record(&ex.id, e.to_string()))?;
        let table = net
            .score_table(&q, video.modality(modality)?)
            .map_err(|e| CtgError::record(&ex.id, e.to_string()))?;
        per_model.push(table.refined);
    }
    match per_model.as_slice() {
        [one] => Ok(one.clone()),
        [rgb, flow] => late_fusion(rgb, flow, fusion_lambda),
        _ => Err(CtgError::Invalid(format!("expected one or two models, got {}", per_model.len()))),
    }
}

pub fn predict(models: &[(&CtgNet<f32>, &str)], fusion_lambda: f64, data: &Dataset) -> Result<Vec<Prediction>> {
    data.examples
        .par_iter()
        .map(|ex| {
            let scores = example_scores(models, fusion_lambda, ex, data)?;
            let segs = crate::video_repr::enumerate_segments(data.video(&ex.video_id)?.num_clips)?;
            let ranked = rank_with_scores(&scores, &segs)?;
            Ok(Prediction {
                id: ex.id.clone(),
                ranked_segments: ranked.iter().map(|r| r.0).collect(),
                scores: ranked.iter().map(|r| r.1).collect(),
            })
        })
        .collect()
}

/// Fused predictions for several fusion weights from one scoring pass.
pub fn predict_fusion_sweep(
    rgb: (&CtgNet<f32>, &str),
    flow: (&CtgNet<f32>, &str),
    lambdas: &[f64],
    data: &Dataset,
) -> Result<Vec<Vec<Prediction>>> {
    let a = predict(&[rgb], 1.0, data)?;
    let b = predict(&[flow], 1.0, data)?;
    let canonical = |p: &Prediction| -> Vec<f64> {
        let mut pairs: Vec<(Segment, f64)> = p.ranked_segments.iter().copied().zip(p.scores.iter().copied()).collect();
        pairs.sort_by_key(|x| x.0);
        pairs.into_iter().map(|x| x.1).collect()
    };
    lambdas
        .iter()
        .map(|&l| {
            a.iter()
                .zip(&b)
                .map(|(pa, pb)| {
                    let fused = late_fusion(&canonical(pa), &canonical(pb), l)?;
                    let mut segs = pa.ranked_segments.clone();
                    segs.sort();
                    let ranked = rank_with_scores(&fused, &segs)?;
                    Ok(Prediction {
                        id: pa.id.clone(),
                        ranked_segments: ranked.iter().map(|r| r.0).collect(),
                        scores: ranked.iter().map(|r| r.1).collect(),
                    })
                })
                .collect()
        })
        .collect()
}

pub fn prior_predictions(data: &Dataset) -> Result<Vec<Prediction>> {
    data.examples
        .iter()
        .map(|ex| {
            let ranked = prior_baseline(data.video(&ex.video_id)?.num_clips)?;
            Ok(Prediction {
                id: ex.id.clone(),
                scores: (0..ranked.len()).map(|i| i as f64).collect(),
                ranked_segments: ranked,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_example: Vec<(String, ExampleResult)>,
    /// Queries whose split came from the temporal-word priority rule.
    pub multiple_temporal_words: usize,
}

/// Scores predictions against the dataset; every example needs exactly one
/// prediction.
pub fn evaluate(data: &Dataset, predictions: &[Prediction]) -> Result<Evaluation> {
    let by_id: std::collections::HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != predictions.len() {
        return Err(CtgError::Data("duplicate prediction ids".into()));
    }
    let mut results = Vec::with_capacity(data.len());
    let mut per_example = Vec::with_capacity(data.len());
    for ex in &data.examples {
        let p = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| CtgError::record(&ex.id, "no prediction"))?;
        let r = example_metrics(&p.ranked_segments, &ex.annotations).map_err(|e| CtgError::record(&ex.id, e.to_string()))?;
        results.push((ex.split, r));
        per_example.push((ex.id.clone(), r));
    }
    let expected: Vec<SplitLabel> = Vec::new();
    let mut report = aggregate(&results, &expected)?;
    let multiple = data.examples.iter().filter(|e| e.multiple_temporal_words).count();
    if multiple > 0 {
        report.warnings.push(format!(
            "{multiple} queries contain more than one temporal word; split assigned by priority before > after > then > while"
        ));
    }
    Ok(Evaluation {
        report,
        per_example,
        multiple_temporal_words: multiple,
    })
}
