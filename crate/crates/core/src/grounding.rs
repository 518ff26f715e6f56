//! Query-to-segment scoring: per-sub-event distances, weighted combination,
//! the additive refinement MLP, selection, ranking and late fusion.
//!
//! Scores are distances: lower is better everywhere in this module.

use ctg_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtgError, Result};
use crate::event_repr::Linear;
use crate::video_repr::Segment;

/// Switches that remove model components for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_masks: bool,
    pub use_refinement: bool,
    pub use_position: bool,
    pub use_weights: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_masks: true,
            use_refinement: true,
            use_position: true,
            use_weights: true,
        }
    }
}

/// `phi(D_t, d_kt, p_k, s/T, (e+1)/T)`: a two-layer ReLU MLP with a scalar
/// output. The output layer starts at zero so the refinement is initially a
/// no-op.
#[derive(Debug, Clone)]
pub struct RefinementNet {
    pub hidden: Linear,
    pub output: Linear,
    pub pos_dim: usize,
}

impl RefinementNet {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, pos_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(RefinementNet {
            hidden: Linear::new(store, "refine.hidden", pos_dim + 4, hidden, rng)?,
            output: Linear::zeros(store, "refine.output", hidden, 1)?,
            pos_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.pos_dim + 4
    }

    /// Applies phi to each row of an `[R, 4 + M_pos]` input; returns `[R, 1]`.
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, input: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, input)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }
}

/// `d[k][t] = || l_k - v_t ||_2` as a `[K, S]` node.
pub fn match_subevents<F: Scalar>(tape: &mut Tape<F>, language: Var, segments: Var) -> Result<Var> {
    tape.pairwise_distance(language, segments).map_err(|e| {
        CtgError::Invalid(format!("sub-event/segment embedding dimensions differ: {e}"))
    })
}

/// `D_t = sum_k w_k d_kt` as a `[1, S]` node; `weights` is `[1, K]`.
pub fn combine<F: Scalar>(tape: &mut Tape<F>, distances: Var, weights: Var) -> Result<Var> {
    Ok(tape.matmul(weights, distances)?)
}

/// `D~_t = D_t + sum_k phi(D_t, d_kt, p_k, t)`.
///
/// `tef` holds `(s/T, (e+1)/T)` for each of the S segments. Without
/// refinement the combined node itself is returned, so the two are
/// bit-identical. Without position the position embeddings are replaced by
/// zeros.
pub fn refine<F: Scalar>(
    tape: &mut Tape<F>,
    combined: Var,
    distances: Var,
    position: Var,
    tef: &[(f64, f64)],
    net: &RefinementNet,
    flags: AblationFlags,
) -> Result<Var> {
    if !flags.use_refinement {
        return Ok(combined);
    }
    let (k, s) = {
        let d = tape.value(distances);
        (d.rows(), d.cols())
    };
    if tef.len() != s || tape.value(combined).numel() != s {
        return Err(CtgError::Invalid(format!(
            "refine: {s} segments but {} end-point pairs and {} combined scores",
            tef.len(),
            tape.value(combined).numel()
        )));
    }
    let p_dim = tape.value(position).cols();
    if p_dim != net.pos_dim {
        return Err(CtgError::Invalid(format!("position embedding has {p_dim} dims, refinement expects {}", net.pos_dim)));
    }

    // row k*S + t pairs sub-event k with segment t
    let seg_idx: Vec<usize> = (0..k).flat_map(|_| 0..s).collect();
    let sub_idx: Vec<usize> = (0..k).flat_map(|ki| std::iter::repeat_n(ki, s)).collect();

    let combined_col = tape.reshape(combined, &[s, 1])?;
    let combined_col = tape.gather_rows(combined_col, &seg_idx)?;
    let d_col = tape.reshape(distances, &[k * s, 1])?;
    let pos = if flags.use_position {
        tape.gather_rows(position, &sub_idx)?
    } else {
        tape.constant(Tensor::zeros(&[k * s, p_dim]))
    };
    let tef_rows: Vec<F> = seg_idx
        .iter()
        .flat_map(|&t| [F::of(tef[t].0), F::of(tef[t].1)])
        .collect();
    let tef_col = tape.constant(Tensor::new(vec![k * s, 2], tef_rows)?);
    let input = tape.concat(&[combined_col, d_col, pos, tef_col])?;

    let phi = net.apply(tape, input)?;
    let phi = tape.reshape(phi, &[k, s])?;
    let correction = tape.sum(phi, ctg_autodiff::Axis::Rows);
    let combined_row = tape.reshape(combined, &[1, s])?;
    Ok(tape.add(combined_row, correction)?)
}

/// Concrete scores for one query against one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub segments: Vec<Segment>,
    /// `K x S` sub-event distances.
    pub distances: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
    pub refined: Vec<f64>,
}

/// The lowest-scoring segment; ties go to the earliest in canonical order.
pub fn ground(scores: &[f64], segments: &[Segment]) -> Result<Segment> {
    rank_segments(scores, segments)?
        .first()
        .copied()
        .ok_or_else(|| CtgError::Invalid("no segments to ground".into()))
}

/// Segments sorted by ascending score, ties broken by (start, end).
pub fn rank_segments(scores: &[f64], segments: &[Segment]) -> Result<Vec<Segment>> {
    Ok(rank_with_scores(scores, segments)?.into_iter().map(|(s, _)| s).collect())
}

pub fn rank_with_scores(scores: &[f64], segments: &[Segment]) -> Result<Vec<(Segment, f64)>> {
    if scores.len() != segments.len() {
        return Err(CtgError::Invalid(format!(
            "{} scores for {} segments",
            scores.len(),
            segments.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CtgError::Numeric("NaN segment score".into()));
    }
    let mut pairs: Vec<(Segment, f64)> = segments.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(pairs)
}

/// `lambda * rgb + (1 - lambda) * flow`.
pub fn late_fusion(rgb: &[f64], flow: &[f64], lambda_rgb: f64) -> Result<Vec<f64>> {
    if rgb.len() != flow.len() {
        return Err(CtgError::Invalid(format!(
            "late fusion of {} and {} scores",
            rgb.len(),
            flow.len()
        )));
    }
    Ok(rgb
        .iter()
        .zip(flow)
        .map(|(&a, &b)| lambda_rgb * a + (1.0 - lambda_rgb) * b)
        .collect())
}
