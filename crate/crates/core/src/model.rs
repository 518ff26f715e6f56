//! The full network: embedding table, word LSTM, segmenter, triplet heads,
//! segment encoder and refinement MLP over one parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use ctg_autodiff::{checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clause_seg::{segment_clauses, PennTree, SubEventMasks, MAX_SUBEVENTS};
use crate::error::{CtgError, Result};
use crate::event_repr::{embed_words, pool_subevents, AttentionSegmenter, Lstm, TripletHeads, Triplets, Vocabulary};
use crate::grounding::{combine, match_subevents, refine, AblationFlags, RefinementNet, ScoreTable};
use crate::video_repr::{enumerate_segments, ClipFeatures, Segment, SegmentEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationMode {
    Parser,
    Attention,
}

impl std::str::FromStr for SegmentationMode {
    type Err = CtgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parser" => Ok(SegmentationMode::Parser),
            "attention" => Ok(SegmentationMode::Attention),
            other => Err(CtgError::Config(format!("unknown segmentation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    /// M, the word LSTM width.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub pos_dim: usize,
    pub phi_hidden: usize,
    pub video_dim: usize,
    /// Hidden width of the segment MLP.
    pub video_hidden: usize,
    /// Hidden width of each direction of the attention Bi-LSTM.
    pub attention_hidden: usize,
    pub num_heads: usize,
    pub mode: SegmentationMode,
    pub flags: AblationFlags,
    pub lstm_lr_mult: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 100,
            feature_dim: 1000,
            embed_dim: 100,
            pos_dim: 100,
            phi_hidden: 100,
            video_dim: 500,
            video_hidden: 100,
            attention_hidden: 100,
            num_heads: MAX_SUBEVENTS,
            mode: SegmentationMode::Parser,
            flags: AblationFlags::default(),
            lstm_lr_mult: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("pos_dim", self.pos_dim),
            ("phi_hidden", self.phi_hidden),
            ("video_dim", self.video_dim),
            ("video_hidden", self.video_hidden),
            ("attention_hidden", self.attention_hidden),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CtgError::Config(format!("{name} must be >= 1")));
        }
        if !(self.lstm_lr_mult > 0.0) {
            return Err(CtgError::Config("lstm_lr_mult must be > 0".into()));
        }
        Ok(())
    }
}

/// A query ready for encoding: vocabulary ids plus parser masks when the
/// configuration needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub token_ids: Vec<usize>,
    pub masks: Option<SubEventMasks>,
}

/// Tape handles for one query scored against a list of segments.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub triplets: Triplets,
    pub distances: ctg_autodiff::Var,
    pub combined: ctg_autodiff::Var,
    pub refined: ctg_autodiff::Var,
}

#[derive(Debug, Clone)]
pub struct CtgNet<F: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<F>,
    embeddings: ParamId,
    word_lstm: Lstm,
    attention: Option<AttentionSegmenter>,
    heads: TripletHeads,
    encoder: SegmentEncoder,
    refinement: RefinementNet,
}

impl<F: Scalar> CtgNet<F> {
    /// Seeded random initialisation.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let table = ctg_autodiff::uniform_fan_in(&[vocab.len(), c.word_dim], 1, &mut rng);
        let embeddings = params.add("embeddings", table)?;
        let word_lstm = Lstm::new(&mut params, "word_lstm", c.word_dim, c.feature_dim, c.lstm_lr_mult, &mut rng)?;
        let attention = match c.mode {
            SegmentationMode::Attention => Some(AttentionSegmenter::new(
                &mut params,
                c.feature_dim,
                c.attention_hidden,
                c.num_heads,
                &mut rng,
            )?),
            SegmentationMode::Parser => None,
        };
        let heads = TripletHeads::new(&mut params, c.feature_dim, c.embed_dim, c.pos_dim, &mut rng)?;
        let encoder = SegmentEncoder::new(&mut params, "video", c.video_dim, c.video_hidden, c.embed_dim, &mut rng)?;
        let refinement = RefinementNet::new(&mut params, c.pos_dim, c.phi_hidden, &mut rng)?;
        Ok(CtgNet {
            config,
            vocab,
            params,
            embeddings,
            word_lstm,
            attention,
            heads,
            encoder,
            refinement,
        })
    }

    /// Rebuilds the architecture and copies `stored` into it by name.
    pub fn from_params(config: ModelConfig, vocab: Vocabulary, stored: &ParamStore<F>) -> Result<Self> {
        let mut net = Self::new(config, vocab, 0)?;
        net.params.load_from(stored)?;
        Ok(net)
    }

    pub fn cast<G: Scalar>(&self) -> CtgNet<G> {
        CtgNet {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            embeddings: self.embeddings,
            word_lstm: self.word_lstm.clone(),
            attention: self.attention.clone(),
            heads: self.heads.clone(),
            encoder: self.encoder.clone(),
            refinement: self.refinement.clone(),
        }
    }

    pub fn refinement(&self) -> &RefinementNet {
        &self.refinement
    }

    /// Overwrites embedding rows for words present in the vocabulary.
    /// Returns the number of rows replaced.
    pub fn load_embeddings(&mut self, words: &[String], rows: &[Vec<f32>]) -> Result<usize> {
        let dim = self.config.word_dim;
        let mut replaced = 0;
        let table = &mut self.params.get_mut(self.embeddings).value;
        for (w, row) in words.iter().zip(rows) {
            if row.len() != dim {
                return Err(CtgError::Data(format!(
                    "embedding for '{w}' has {} values, expected {dim}",
                    row.len()
                )));
            }
            let id = self.vocab.lookup(w);
            if id == 0 {
                continue;
            }
            let dst = &mut table.data_mut()[id * dim..(id + 1) * dim];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = F::of(v as f64);
            }
            replaced += 1;
        }
        Ok(replaced)
    }

    /// Embedding-table row for every token, as used by the novelty analysis.
    pub fn embedding_rows(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let ids = self.vocab.ids(tokens)?;
        let table = self.params.value(self.embeddings);
        Ok(ids.iter().map(|&i| table.row_slice(i).iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn prepare(&self, tokens: &[String], tree: Option<&PennTree>) -> Result<Query> {
        let token_ids = self.vocab.ids(tokens)?;
        let masks = if self.config.flags.use_masks && self.config.mode == SegmentationMode::Parser {
            let tree = tree.ok_or_else(|| CtgError::Invalid("parser segmentation needs a tree".into()))?;
            let n_leaves = tree.leaves().len();
            if n_leaves != tokens.len() {
                return Err(CtgError::Invalid(format!(
                    "tree has {n_leaves} leaves but the query has {} tokens",
                    tokens.len()
                )));
            }
            Some(segment_clauses(tree))
        } else {
            None
        };
        Ok(Query { token_ids, masks })
    }

    /// `[N, M]` word features.
    pub fn encode_words(&self, tape: &mut Tape<F>, query: &Query) -> Result<ctg_autodiff::Var> {
        let emb = embed_words(tape, self.embeddings, &query.token_ids)?;
        self.word_lstm.forward(tape, emb, false)
    }

    /// `[K, N]` masks in effect for this configuration.
    pub fn masks(&self, tape: &mut Tape<F>, query: &Query, feats: ctg_autodiff::Var) -> Result<ctg_autodiff::Var> {
        let n = query.token_ids.len();
        if !self.config.flags.use_masks {
            return Ok(tape.constant(Tensor::filled(&[1, n], F::one())));
        }
        match (&self.attention, &query.masks) {
            (Some(att), _) => att.masks(tape, feats),
            (None, Some(m)) => {
                let flat: Vec<f64> = m.masks.iter().flatten().copied().collect();
                Ok(tape.constant(Tensor::from_f64(&[m.k(), n], &flat)?))
            }
            (None, None) => Err(CtgError::Invalid("query prepared without masks".into())),
        }
    }

    pub fn encode_query(&self, tape: &mut Tape<F>, query: &Query) -> Result<Triplets> {
        let feats = self.encode_words(tape, query)?;
        let masks = self.masks(tape, query, feats)?;
        let pooled = pool_subevents(tape, feats, masks)?;
        self.heads.make_triplets(tape, pooled, !self.config.flags.use_weights)
    }

    /// Scores already-encoded triplets against `segs` of one video.
    pub fn score_triplets(
        &self,
        tape: &mut Tape<F>,
        triplets: Triplets,
        clips: &ClipFeatures,
        segs: &[Segment],
    ) -> Result<ScoreVars> {
        let v = self.encoder.embed_segments(tape, clips, segs)?;
        let distances = match_subevents(tape, triplets.language, v)?;
        let combined = combine(tape, distances, triplets.weights)?;
        let tef: Vec<(f64, f64)> = segs.iter().map(|s| s.tef(clips.num_clips)).collect();
        let refined = refine(
            tape,
            combined,
            distances,
            triplets.position,
            &tef,
            &self.refinement,
            self.config.flags,
        )?;
        Ok(ScoreVars {
            triplets,
            distances,
            combined,
            refined,
        })
    }

    pub fn score(&self, tape: &mut Tape<F>, query: &Query, clips: &ClipFeatures, segs: &[Segment]) -> Result<ScoreVars> {
        let triplets = self.encode_query(tape, query)?;
        self.score_triplets(tape, triplets, clips, segs)
    }

    /// Every segment of the video scored in canonical order.
    pub fn score_table(&self, query: &Query, clips: &ClipFeatures) -> Result<ScoreTable> {
        let segments = enumerate_segments(clips.num_clips)?;
        let mut tape = Tape::new(&self.params);
        let vars = self.score(&mut tape, query, clips, &segments)?;
        let d = tape.value(vars.distances);
        let distances = (0..d.rows())
            .map(|k| d.row_slice(k).iter().map(|x| x.as_f64()).collect())
            .collect();
        let table = ScoreTable {
            segments,
            distances,
            combined: tape.value(vars.combined).to_f64_vec(),
            refined: tape.value(vars.refined).to_f64_vec(),
        };
        if !table.refined.iter().all(|x| x.is_finite()) {
            return Err(CtgError::Numeric(format!("non-finite score for video {}", clips.video_id)));
        }
        Ok(table)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredModel {
    modality: String,
    config: ModelConfig,
    vocab: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    models: Vec<StoredModel>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// One trained network per feature modality, plus free-form metadata.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub models: Vec<(String, CtgNet<f32>)>,
    pub extra: serde_json::Value,
}

impl ModelBundle {
    pub fn get(&self, modality: &str) -> Option<&CtgNet<f32>> {
        self.models.iter().find(|(m, _)| m == modality).map(|(_, n)| n)
    }

    pub fn modalities(&self) -> Vec<String> {
        self.models.iter().map(|(m, _)| m.clone()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut store = ParamStore::<f32>::new();
        let mut meta = CheckpointMeta {
            models: Vec::new(),
            extra: self.extra.clone(),
        };
        for (modality, net) in &self.models {
            for (_, p) in net.params.iter() {
                store.add_with_mult(format!("{modality}/{}", p.name), p.value.clone(), p.lr_mult)?;
            }
            meta.models.push(StoredModel {
                modality: modality.clone(),
                config: net.config.clone(),
                vocab: net.vocab.words().to_vec(),
            });
        }
        Ok(checkpoint::encode(&store, &serde_json::to_string(&meta)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = checkpoint::decode::<f32>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        let mut split: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
        for (_, p) in store.iter() {
            let (modality, name) = p
                .name
                .split_once('/')
                .ok_or_else(|| CtgError::Data(format!("checkpoint parameter '{}' has no modality prefix", p.name)))?;
            split
                .entry(modality.to_string())
                .or_default()
                .add_with_mult(name, p.value.clone(), p.lr_mult)?;
        }
        let mut models = Vec::new();
        for m in meta.models {
            let stored = split
                .get(&m.modality)
                .ok_or_else(|| CtgError::Data(format!("checkpoint has no parameters for '{}'", m.modality)))?;
            let vocab = Vocabulary::from_words(&m.vocab)?;
            models.push((m.modality, CtgNet::from_params(m.config, vocab, stored)?));
        }
        if models.is_empty() {
            return Err(CtgError::Data("checkpoint holds no models".into()));
        }
        Ok(ModelBundle {
            models,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| CtgError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CtgError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
