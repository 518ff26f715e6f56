//! Query-side network: word embeddings, word-level LSTM features, the
//! bidirectional-LSTM attention segmenter, mask pooling and the per-sub-event
//! (language, position, weight) heads.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use ctg_autodiff::{Axis, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CtgError, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Lowercased token -> embedding row. Row 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNKNOWN_TOKEN);
        v
    }
}

impl Vocabulary {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::default();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn from_words(words: &[String]) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(CtgError::Data(format!("vocabulary must start with {UNKNOWN_TOKEN}")));
        }
        Ok(Vocabulary::from_tokens(words.iter().map(String::as_str)))
    }

    pub fn insert(&mut self, token: &str) -> usize {
        let key = token.to_lowercase();
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.words.push(key.clone());
        self.index.insert(key, self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(CtgError::Invalid("empty token list".into()));
        }
        Ok(tokens.iter().map(|t| self.lookup(t)).collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Reads text-format word vectors (`token v1 ... vD` per line).
pub fn read_text_embeddings(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f32>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CtgError::io(path, e))?;
    let mut words = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CtgError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let row = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CtgError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(CtgError::Data(format!(
                    "{}:{}: expected {first} values, got {}",
                    path.display(),
                    lineno + 1,
                    row.len()
                )));
            }
        }
        words.push(word.to_string());
        rows.push(row);
    }
    Ok((words, rows))
}

/// Looks up one embedding row per token: `[N, D_word]`.
pub fn embed_words<F: Scalar>(tape: &mut Tape<F>, table: ParamId, token_ids: &[usize]) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(CtgError::Invalid("empty token list".into()));
    }
    let t = tape.param(table);
    Ok(tape.gather_rows(t, token_ids)?)
}

/// Unidirectional LSTM with gate order (input, forget, output, candidate).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        lr_mult: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w_x = ctg_autodiff::uniform_fan_in(&[input, 4 * hidden], input, rng);
        let w_h = ctg_autodiff::uniform_fan_in(&[hidden, 4 * hidden], hidden, rng);
        let bias = ctg_autodiff::uniform_fan_in(&[1, 4 * hidden], hidden, rng);
        Ok(Lstm {
            w_x: store.add_with_mult(format!("{prefix}.w_x"), w_x, lr_mult)?,
            w_h: store.add_with_mult(format!("{prefix}.w_h"), w_h, lr_mult)?,
            bias: store.add_with_mult(format!("{prefix}.bias"), bias, lr_mult)?,
            hidden,
        })
    }

    /// Runs over the rows of `x` (`[N, D_in]`) and returns the hidden state
    /// at every position (`[N, H]`). With `reverse`, the sequence is read
    /// right to left but outputs stay in token order.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, reverse: bool) -> Result<Var> {
        let h = self.hidden;
        let (w_x, w_h, b) = (tape.param(self.w_x), tape.param(self.w_h), tape.param(self.bias));
        let zx = tape.matmul(x, w_x)?;
        let zx = tape.add(zx, b)?;
        let n = tape.value(x).rows();
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        let mut outputs: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        for &t in &order {
            let mut gates = tape.row(zx, t)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(h_prev, w_h)?;
                gates = tape.add(gates, rec)?;
            }
            let i = tape.slice_cols(gates, 0, h)?;
            let i = tape.sigmoid(i);
            let o = tape.slice_cols(gates, 2 * h, h)?;
            let o = tape.sigmoid(o);
            let g = tape.slice_cols(gates, 3 * h, h)?;
            let g = tape.tanh(g);
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = state {
                let f = tape.slice_cols(gates, h, h)?;
                let f = tape.sigmoid(f);
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(c, keep)?;
            }
            let tc = tape.tanh(c);
            let h_t = tape.mul(o, tc)?;
            outputs[t] = Some(h_t);
            state = Some((h_t, c));
        }
        let outs: Vec<Var> = outputs.into_iter().map(|o| o.unwrap()).collect();
        Ok(tape.concat_rows(&outs)?)
    }
}

/// Dense layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add_uniform(format!("{prefix}.weight"), &[input, output], input, rng)?,
            bias: store.add_uniform(format!("{prefix}.bias"), &[1, output], input, rng)?,
        })
    }

    /// A layer whose weights and bias start at exactly zero.
    pub fn zeros<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{prefix}.weight"), Tensor::zeros(&[input, output]))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, output]))?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

/// Bidirectional LSTM followed by `K` per-token linear scorers; each head's
/// scores are softmax-normalised over tokens.
#[derive(Debug, Clone)]
pub struct AttentionSegmenter {
    pub forward_lstm: Lstm,
    pub backward_lstm: Lstm,
    pub heads: Linear,
    pub k: usize,
}

impl AttentionSegmenter {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        input: usize,
        hidden: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentionSegmenter {
            forward_lstm: Lstm::new(store, "attention.fwd", input, hidden, 1.0, rng)?,
            backward_lstm: Lstm::new(store, "attention.bwd", input, hidden, 1.0, rng)?,
            heads: Linear::new(store, "attention.heads", 2 * hidden, k, rng)?,
            k,
        })
    }

    /// `[N, M]` word features -> `[K, N]` masks, each row summing to one.
    pub fn masks<F: Scalar>(&self, tape: &mut Tape<F>, word_feats: Var) -> Result<Var> {
        let fwd = self.forward_lstm.forward(tape, word_feats, false)?;
        let bwd = self.backward_lstm.forward(tape, word_feats, true)?;
        let both = tape.concat(&[fwd, bwd])?;
        let scores = self.heads.forward(tape, both)?;
        let attn = tape.softmax(scores, Axis::Rows);
        Ok(tape.transpose(attn))
    }
}

/// `e_k = sum_i m_ki f_i` with each mask first divided by its sum. Returns
/// `[K, M]`; an all-zero mask is an error.
pub fn pool_subevents<F: Scalar>(tape: &mut Tape<F>, word_feats: Var, masks: Var) -> Result<Var> {
    let norm = tape.normalize_sum(masks).map_err(|_| {
        CtgError::Invalid("sub-event mask with no nonzero entry".into())
    })?;
    Ok(tape.matmul(norm, word_feats)?)
}

/// The three single-layer heads producing (l_k, p_k, w_k).
#[derive(Debug, Clone)]
pub struct TripletHeads {
    pub language: Linear,
    pub position: Linear,
    pub weight: Linear,
}

/// Tape handles for one query's sub-event triplets.
#[derive(Debug, Clone, Copy)]
pub struct Triplets {
    /// `[K, M_embed]`, unit rows.
    pub language: Var,
    /// `[K, M_pos]`.
    pub position: Var,
    /// `[1, K]`, sums to one.
    pub weights: Var,
    pub k: usize,
}

impl TripletHeads {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        feat_dim: usize,
        embed_dim: usize,
        pos_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TripletHeads {
            language: Linear::new(store, "heads.language", feat_dim, embed_dim, rng)?,
            position: Linear::new(store, "heads.position", feat_dim, pos_dim, rng)?,
            weight: Linear::new(store, "heads.weight", feat_dim, 1, rng)?,
        })
    }

    /// `pooled` is `[K, M]`. With `uniform_weights`, `w_k = 1/K`.
    pub fn make_triplets<F: Scalar>(&self, tape: &mut Tape<F>, pooled: Var, uniform_weights: bool) -> Result<Triplets> {
        let k = tape.value(pooled).rows();
        let l = self.language.forward(tape, pooled)?;
        let language = tape.l2_normalize(l)?;
        let position = self.position.forward(tape, pooled)?;
        let weights = if uniform_weights {
            tape.constant(Tensor::filled(&[1, k], F::one() / F::of(k as f64)))
        } else {
            let s = self.weight.forward(tape, pooled)?;
            let w = tape.softmax(s, Axis::Rows);
            tape.transpose(w)
        };
        Ok(Triplets {
            language,
            position,
            weights,
            k,
        })
    }
}
