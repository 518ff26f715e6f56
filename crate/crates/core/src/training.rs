//! Triplet ranking loss with intra- and inter-video negatives, and the SGD
//! epoch loop with early stopping on validation Average R@1.

use std::cell::Cell;

use ctg_autodiff::{sgd_step, Gradients, Scalar, SgdConfig, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{CtgError, Result};
use crate::eval::MetricsRow;
use crate::model::{CtgNet, Query};
use crate::pipeline::{evaluate, predict};
use crate::video_repr::{enumerate_segments, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub margin: f64,
    /// Weight of the inter-video term.
    pub inter_weight: f64,
    pub patience: usize,
    pub max_inter_resamples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            margin: 0.1,
            inter_weight: 0.2,
            patience: 10,
            max_inter_resamples: 50,
            seed: 0,
        }
    }
}

/// `max(0, pos - neg + margin)`; lower scores are better.
pub fn triplet_loss<F: Scalar>(tape: &mut Tape<F>, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let diff = tape.sub(pos, neg)?;
    let shifted = tape.add_const(diff, F::of(margin));
    let hinge = tape.max_const(shifted, F::zero());
    Ok(tape.sum_all(hinge))
}

pub fn triplet_loss_value(pos: f64, neg: f64, margin: f64) -> f64 {
    (pos - neg + margin).max(0.0)
}

/// Per-record hinge values; `inter` is absent when no inter-video negative
/// could be drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordLoss {
    pub intra: f64,
    pub inter: Option<f64>,
}

impl RecordLoss {
    pub fn total(&self, inter_weight: f64) -> f64 {
        self.intra + inter_weight * self.inter.unwrap_or(0.0)
    }
}

/// Mean over records of `intra + lambda * inter`.
pub fn batch_loss(records: &[RecordLoss], inter_weight: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.total(inter_weight)).sum::<f64>() / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub intra: Segment,
    pub inter: Option<(String, Segment)>,
}

/// Draws negatives over a fixed video list.
pub struct NegativeSampler {
    videos: Vec<(String, usize)>,
    max_tries: usize,
    warned: Cell<bool>,
}

impl NegativeSampler {
    pub fn new(data: &Dataset, max_tries: usize) -> Self {
        NegativeSampler {
            videos: data.videos.values().map(|v| (v.id.clone(), v.num_clips)).collect(),
            max_tries,
            warned: Cell::new(false),
        }
    }

    pub fn sample<R: Rng>(&self, ex: &Example, num_clips: usize, rng: &mut R) -> Result<Negatives> {
        let segs = enumerate_segments(num_clips)?;
        if segs.len() < 2 {
            return Err(CtgError::record(&ex.id, "video has a single segment; no intra-video negative exists"));
        }
        let pos = ex.ground_truth;
        let mut k = rng.gen_range(0..segs.len() - 1);
        if k >= pos.canonical_index(num_clips) {
            k += 1;
        }
        let intra = segs[k];

        let mut inter = None;
        if self.videos.len() < 2 {
            if !self.warned.replace(true) {
                log::warn!("only one training video: inter-video negatives are skipped");
            }
        } else {
            for _ in 0..self.max_tries {
                let (id, t) = &self.videos[rng.gen_range(0..self.videos.len())];
                if *id != ex.video_id && pos.is_valid(*t) {
                    inter = Some((id.clone(), pos));
                    break;
                }
            }
        }
        Ok(Negatives { intra, inter })
    }
}

pub fn sample_negatives<R: Rng>(ex: &Example, data: &Dataset, rng: &mut R) -> Result<Negatives> {
    let t = data.video(&ex.video_id)?.num_clips;
    NegativeSampler::new(data, 50).sample(ex, t, rng)
}

/// Builds the loss of one record on `tape`; returns the loss node and its
/// parts.
pub fn record_loss<F: Scalar>(
    net: &CtgNet<F>,
    tape: &mut Tape<F>,
    query: &Query,
    ex: &Example,
    negatives: &Negatives,
    data: &Dataset,
    modality: &str,
    cfg: &TrainConfig,
) -> Result<(Var, RecordLoss)> {
    let clips = data.video(&ex.video_id)?.modality(modality)?;
    let triplets = net.encode_query(tape, query)?;
    let own = net.score_triplets(tape, triplets, clips, &[ex.ground_truth, negatives.intra])?;
    let pos = tape.slice_cols(own.refined, 0, 1)?;
    let intra_neg = tape.slice_cols(own.refined, 1, 1)?;
    let mut loss = triplet_loss(tape, pos, intra_neg, cfg.margin)?;
    let intra = tape.scalar(loss).as_f64();
    let mut inter = None;
    if let Some((vid, seg)) = &negatives.inter {
        let other = data.video(vid)?.modality(modality)?;
        let s = net.score_triplets(tape, triplets, other, &[*seg])?;
        let l = triplet_loss(tape, pos, s.refined, cfg.margin)?;
        inter = Some(tape.scalar(l).as_f64());
        let weighted = tape.scale(l, F::of(cfg.inter_weight));
        loss = tape.add(loss, weighted)?;
    }
    Ok((loss, RecordLoss { intra, inter }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub inter_skipped: usize,
    pub validation: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_validation: MetricsRow,
    pub stopped_early: bool,
}

/// Validation Average row for a single-modality model.
pub fn validation_metrics(net: &CtgNet<f32>, modality: &str, val: &Dataset) -> Result<MetricsRow> {
    let preds = predict(&[(net, modality)], 1.0, val)?;
    Ok(evaluate(val, &preds)?.report.average)
}

/// Trains in place and leaves the best-validation parameters in `net`.
pub fn train(net: &mut CtgNet<f32>, train: &Dataset, val: &Dataset, modality: &str, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.sgd.validate().map_err(CtgError::Config)?;
    if train.is_empty() || val.is_empty() {
        return Err(CtgError::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = NegativeSampler::new(train, cfg.max_inter_resamples);
    let queries: Vec<Query> = train
        .examples
        .iter()
        .map(|ex| net.prepare(&ex.tokens, ex.tree.as_ref()).map_err(|e| CtgError::record(&ex.id, e.to_string())))
        .collect::<Result<_>>()?;
    let clip_counts: Vec<usize> = train
        .examples
        .iter()
        .map(|ex| train.video(&ex.video_id).map(|v| v.num_clips))
        .collect::<Result<_>>()?;

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_validation: MetricsRow {
            r1: f64::NEG_INFINITY,
            r5: 0.0,
            miou: 0.0,
            count: 0,
        },
        stopped_early: false,
    };
    let mut best_params = net.params.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.sgd.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut skipped = 0;
        for batch in order.chunks(cfg.sgd.batch_size) {
            let negatives: Vec<Negatives> = batch
                .iter()
                .map(|&i| sampler.sample(&train.examples[i], clip_counts[i], &mut rng))
                .collect::<Result<_>>()?;
            let net_ref = &*net;
            let outcomes: Vec<(Gradients<f32>, RecordLoss)> = batch
                .par_iter()
                .zip(negatives.par_iter())
                .map(|(&i, neg)| {
                    let ex = &train.examples[i];
                    let mut tape = Tape::new(&net_ref.params);
                    let (loss, parts) = record_loss(net_ref, &mut tape, &queries[i], ex, neg, train, modality, cfg)?;
                    if !tape.scalar(loss).is_finite() {
                        return Err(CtgError::Numeric(format!("non-finite loss on record {}", ex.id)));
                    }
                    Ok((tape.backward(loss)?, parts))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            for (grads, parts) in &outcomes {
                net.params.accumulate(grads, scale);
                total += parts.total(cfg.inter_weight);
                skipped += usize::from(parts.inter.is_none());
            }
            sgd_step(&mut net.params, epoch, &cfg.sgd);
        }
        if !net.params.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(CtgError::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }

        let validation = validation_metrics(net, modality, val)?;
        let entry = EpochLog {
            epoch,
            loss: total / train.len() as f64,
            lr: cfg.sgd.rate(epoch),
            inter_skipped: skipped,
            validation,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} lr {:.4} val R@1 {:.3} R@5 {:.3} mIoU {:.3}",
            entry.loss,
            entry.lr,
            validation.r1,
            validation.r5,
            validation.miou
        );
        log.epochs.push(entry);
        if validation.r1 > log.best_validation.r1 {
            log.best_validation = validation;
            log.best_epoch = epoch;
            best_params = net.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    net.params = best_params;
    Ok(log)
}
