//! Candidate segments and their embeddings.
//!
//! A segment is a contiguous, inclusive span of clips. Its raw feature is
//! `[local mean | global mean | s/T | (e+1)/T]`, embedded by a two-layer MLP.

use std::io::Write;
use std::path::Path;

use ctg_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtgError, Result};
use crate::event_repr::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Segment { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_valid(&self, num_clips: usize) -> bool {
        self.start <= self.end && self.end < num_clips
    }

    /// Normalised temporal end-points `(s/T, (e+1)/T)`.
    pub fn tef(&self, num_clips: usize) -> (f64, f64) {
        let t = num_clips as f64;
        (self.start as f64 / t, (self.end + 1) as f64 / t)
    }

    /// Position in [`enumerate_segments`] order.
    pub fn canonical_index(&self, num_clips: usize) -> usize {
        // segments starting before s: sum_{j<s} (T - j)
        let s = self.start;
        s * num_clips - s * s.saturating_sub(1) / 2 + (self.end - s)
    }
}

impl From<[usize; 2]> for Segment {
    fn from(v: [usize; 2]) -> Self {
        Segment::new(v[0], v[1])
    }
}

impl From<Segment> for [usize; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

/// All `T(T+1)/2` contiguous spans, ordered by start then end.
pub fn enumerate_segments(num_clips: usize) -> Result<Vec<Segment>> {
    if num_clips == 0 {
        return Err(CtgError::Invalid("a video needs at least one clip".into()));
    }
    Ok((0..num_clips)
        .flat_map(|s| (s..num_clips).map(move |e| Segment::new(s, e)))
        .collect())
}

/// Per-clip features of one video in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub video_id: String,
    pub num_clips: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

impl ClipFeatures {
    pub fn new(video_id: impl Into<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let video_id = video_id.into();
        let c = ClipFeatures {
            num_clips: rows.len(),
            dim: rows.first().map_or(0, Vec::len),
            video_id,
            rows,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.video_id;
        if self.num_clips == 0 || self.rows.len() != self.num_clips {
            return Err(CtgError::record(id, format!("expected {} clip rows, found {}", self.num_clips, self.rows.len())));
        }
        if self.dim == 0 || self.rows.iter().any(|r| r.len() != self.dim) {
            return Err(CtgError::record(id, format!("every clip row must have {} values", self.dim)));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CtgError::record(id, "non-finite clip feature"));
        }
        Ok(())
    }

    fn mean_rows(&self, start: usize, end: usize) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for row in &self.rows[start..=end] {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let n = (end + 1 - start) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// `[local mean | global mean | s/T | (e+1)/T]`, length `2 * dim + 2`.
    pub fn segment_features(&self, seg: Segment) -> Result<Vec<f64>> {
        if !seg.is_valid(self.num_clips) {
            return Err(CtgError::record(&self.video_id, format!("segment {seg} outside {} clips", self.num_clips)));
        }
        let mut out = self.mean_rows(seg.start, seg.end);
        out.extend(self.mean_rows(0, self.num_clips - 1));
        let (s, e) = seg.tef(self.num_clips);
        out.push(s);
        out.push(e);
        Ok(out)
    }

    /// Stacked segment features as an `[S, 2 * dim + 2]` tensor.
    pub fn segment_matrix<F: Scalar>(&self, segs: &[Segment]) -> Result<Tensor<F>> {
        let rows = segs
            .iter()
            .map(|&s| self.segment_features(s).map(|v| v.into_iter().map(F::of).collect()))
            .collect::<Result<Vec<Vec<F>>>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CtgError::io(path, e))?;
        let c: ClipFeatures = serde_json::from_str(&text)
            .map_err(|e| CtgError::Data(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| CtgError::io(path, e))
    }

    /// Binary layout: `b"CTGF"`, version u32 = 1, T u32, D u32, then `T * D`
    /// little-endian f32 values, row-major.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.num_clips * self.dim);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.num_clips as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.rows.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(video_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let video_id = video_id.into();
        let bad = |msg: &str| CtgError::record(&video_id, format!("feature file: {msg}"));
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("wrong magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != 1 {
            return Err(bad("unsupported version"));
        }
        let (t, d) = (word(8), word(12));
        if t == 0 || d == 0 || bytes.len() != 16 + 4 * t * d {
            return Err(bad(&format!("size {} does not match T={t}, D={d}", bytes.len())));
        }
        let rows = bytes[16..]
            .chunks(4 * d)
            .map(|row| row.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            .collect();
        let c = ClipFeatures {
            video_id: video_id.clone(),
            num_clips: t,
            dim: d,
            rows,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| CtgError::io(path, e))?;
        f.write_all(&self.to_binary()).map_err(|e| CtgError::io(path, e))
    }

    /// Reads either encoding; `.json` files are parsed as JSON, anything else
    /// as binary with the video id taken from the file stem.
    pub fn read(path: impl AsRef<Path>, video_id: &str) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "json") {
            let c = Self::read_json(path)?;
            if c.video_id != video_id {
                return Err(CtgError::record(video_id, format!("{} holds video {}", path.display(), c.video_id)));
            }
            Ok(c)
        } else {
            let bytes = std::fs::read(path).map_err(|e| CtgError::io(path, e))?;
            Self::from_binary(video_id, &bytes)
        }
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"CTGF";

/// Two-layer MLP mapping segment features to the joint embedding space.
#[derive(Debug, Clone)]
pub struct SegmentEncoder {
    pub hidden: Linear,
    pub output: Linear,
    pub video_dim: usize,
}

impl SegmentEncoder {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        video_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = 2 * video_dim + 2;
        Ok(SegmentEncoder {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), input, hidden, rng)?,
            output: Linear::new(store, &format!("{prefix}.output"), hidden, embed_dim, rng)?,
            video_dim,
        })
    }

    /// `[S, 2D+2]` features -> `[S, M_embed]` embeddings, no normalisation.
    pub fn embed<F: Scalar>(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        let cols = tape.value(features).cols();
        if cols != 2 * self.video_dim + 2 {
            return Err(CtgError::Invalid(format!(
                "segment features have {cols} columns, encoder expects {}",
                2 * self.video_dim + 2
            )));
        }
        let h = self.hidden.forward(tape, features)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }

    pub fn embed_segments<F: Scalar>(&self, tape: &mut Tape<F>, clips: &ClipFeatures, segs: &[Segment]) -> Result<Var> {
        if clips.dim != self.video_dim {
            return Err(CtgError::record(
                &clips.video_id,
                format!("clip dimension {} != configured {}", clips.dim, self.video_dim),
            ));
        }
        let x = tape.constant(clips.segment_matrix(segs)?);
        self.embed(tape, x)
    }
}
