//! Seeded synthetic grounding data built from templated two-event queries.
//!
//! Every video plants two concepts in disjoint clip spans. A query names
//! one or both concepts through a template; the target is the base moment X
//! for before/after templates and the span from X to Y for "then".

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetRecord, LoadOptions};
use crate::error::{CtgError, Result};
use crate::eval::SplitLabel;
use crate::video_repr::{ClipFeatures, Segment};

const NOUNS: [&str; 24] = [
    "man", "woman", "dog", "cat", "car", "bird", "child", "horse", "ball", "boat", "girl", "boy", "train", "crowd",
    "camera", "light", "baby", "bike", "plane", "door", "fish", "player", "singer", "monkey",
];
const VERBS: [&str; 24] = [
    "runs", "jumps", "waves", "falls", "sings", "turns", "stops", "laughs", "swims", "spins", "dances", "climbs",
    "sits", "flies", "opens", "walks", "rolls", "shakes", "points", "claps", "kicks", "throws", "bends", "slides",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// A single concept, no temporal word.
    Base,
    XBeforeY,
    YCommaBeforeX,
    XAfterY,
    YCommaAfterX,
    XThenY,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Base,
        Template::XBeforeY,
        Template::YCommaBeforeX,
        Template::XAfterY,
        Template::YCommaAfterX,
        Template::XThenY,
    ];

    pub fn pattern(self) -> &'static str {
        match self {
            Template::Base => "X",
            Template::XBeforeY => "X before Y",
            Template::YCommaBeforeX => "Y, before X",
            Template::XAfterY => "X after Y",
            Template::YCommaAfterX => "Y, after X",
            Template::XThenY => "X then Y",
        }
    }

    pub fn split(self) -> SplitLabel {
        match self {
            Template::Base => SplitLabel::Base,
            Template::XBeforeY | Template::YCommaBeforeX => SplitLabel::Before,
            Template::XAfterY | Template::YCommaAfterX => SplitLabel::After,
            Template::XThenY => SplitLabel::Then,
        }
    }

    /// Whether X happens before Y in the video.
    fn x_first(self) -> Option<bool> {
        match self {
            Template::Base => None,
            Template::XBeforeY | Template::YCommaBeforeX | Template::XThenY => Some(true),
            Template::XAfterY | Template::YCommaAfterX => Some(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Overrides the generator-wide noise level.
    #[serde(default)]
    pub noise: Option<f64>,
    /// When false the modality carries only noise.
    #[serde(default = "yes")]
    pub signal: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub concepts: usize,
    pub videos: usize,
    pub num_clips: usize,
    pub noise: f64,
    pub video_dim: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Relative template weights; absent templates are never drawn.
    pub template_mix: BTreeMap<Template, f64>,
    pub min_concept_distance: f64,
    /// Plant X both before and after Y, so that only the temporal word tells
    /// the two X moments apart. Only before/after templates are allowed.
    pub repeat_base: bool,
    pub modalities: Vec<ModalitySpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            concepts: 20,
            videos: 2400,
            num_clips: 6,
            noise: 0.05,
            video_dim: 32,
            train_fraction: 2000.0 / 2400.0,
            val_fraction: 200.0 / 2400.0,
            test_fraction: 200.0 / 2400.0,
            template_mix: Template::ALL.iter().map(|&t| (t, 1.0)).collect(),
            min_concept_distance: 0.5,
            repeat_base: false,
            modalities: vec![
                ModalitySpec {
                    name: "rgb".into(),
                    noise: None,
                    signal: true,
                },
                ModalitySpec {
                    name: "flow".into(),
                    noise: None,
                    signal: true,
                },
            ],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtgError::Config(m));
        if self.concepts < 2 {
            return bad("at least two concepts are needed".into());
        }
        if self.videos == 0 || self.video_dim == 0 {
            return bad("videos and video_dim must be >= 1".into());
        }
        if self.num_clips < 2 {
            return bad(format!("num_clips must be >= 2, got {}", self.num_clips));
        }
        let min_clips = if self.repeat_base { 5 } else { 3 };
        if self.num_clips < min_clips {
            return bad(format!(
                "T = {} is too small to place the planted spans apart (need {min_clips})",
                self.num_clips
            ));
        }
        if !(self.noise >= 0.0) || self.modalities.iter().any(|m| m.noise.is_some_and(|n| !(n >= 0.0))) {
            return bad("noise must be >= 0".into());
        }
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be non-negative and sum to 1, got {fr:?}"));
        }
        if self.template_mix.values().any(|w| !(*w >= 0.0)) || self.template_mix.values().sum::<f64>() <= 0.0 {
            return bad("template weights must be non-negative with a positive total".into());
        }
        if self.repeat_base {
            let other = self
                .template_mix
                .iter()
                .any(|(t, w)| *w > 0.0 && !matches!(t.split(), SplitLabel::Before | SplitLabel::After));
            if other {
                return bad("repeat_base supports only before/after templates".into());
            }
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is needed".into());
        }
        Ok(())
    }

    fn modality_noise(&self, m: &ModalitySpec) -> f64 {
        m.noise.unwrap_or(self.noise)
    }

    /// Number of videos in train, val and test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.train_fraction * self.videos as f64).round() as usize;
        let val = ((self.val_fraction * self.videos as f64).round() as usize).min(self.videos - train.min(self.videos));
        let train = train.min(self.videos);
        [train, val, self.videos - train - val]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub noun: String,
    pub verb: String,
    pub vector: Vec<f32>,
}

impl Concept {
    pub fn tokens(&self) -> [String; 3] {
        ["the".into(), self.noun.clone(), self.verb.clone()]
    }

    fn tree(&self) -> String {
        format!("(S (NP (DT the) (NN {})) (VP (VBZ {})))", self.noun, self.verb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub concept: usize,
    pub segment: Segment,
}

/// Generator-side facts about one example, enough to recompute its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub video_id: String,
    pub split: String,
    pub template: Template,
    pub x: usize,
    pub y: usize,
    pub spans: Vec<PlantedSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub concepts: Vec<Concept>,
    pub examples: Vec<ExampleMeta>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: Manifest,
    /// Records of "train", "val" and "test".
    pub splits: BTreeMap<String, Vec<DatasetRecord>>,
    pub features: BTreeMap<(String, String), Arc<ClipFeatures>>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl SynthOutput {
    pub fn modalities(&self) -> Vec<String> {
        self.manifest.config.modalities.iter().map(|m| m.name.clone()).collect()
    }

    /// The named split as a validated dataset over the given modalities.
    pub fn dataset(&self, split: &str, modalities: &[String]) -> Result<Dataset> {
        let records = self
            .splits
            .get(split)
            .ok_or_else(|| CtgError::Invalid(format!("no split '{split}'")))?;
        let opts = LoadOptions {
            modalities: modalities.to_vec(),
            require_trees: false,
        };
        Dataset::from_records(records.clone(), &self.features, &opts)
    }

    /// Writes `{train,val,test}.jsonl`, `features/` and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir).map_err(|e| CtgError::io(&feat_dir, e))?;
        for ((video, modality), f) in &self.features {
            f.write_binary(feat_dir.join(format!("{video}.{modality}.bin")))?;
        }
        for (name, records) in &self.splits {
            crate::dataset::write_records(dir.join(format!("{name}.jsonl")), records)?;
        }
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&manifest, text + "\n").map_err(|e| CtgError::io(&manifest, e))
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn make_concepts(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Concept>> {
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0;
    while vectors.len() < cfg.concepts {
        tries += 1;
        if tries > 100_000 {
            return Err(CtgError::Config(format!(
                "cannot place {} concepts {} apart in {} dimensions",
                cfg.concepts, cfg.min_concept_distance, cfg.video_dim
            )));
        }
        let v = unit_vector(rng, cfg.video_dim);
        let far = vectors.iter().all(|u| {
            u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= cfg.min_concept_distance
        });
        if far {
            vectors.push(v);
        }
    }
    Ok(vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let word = |list: &[&str; 24]| {
                let base = list[i % list.len()];
                if i < list.len() {
                    base.to_string()
                } else {
                    format!("{base}{}", i / list.len())
                }
            };
            Concept {
                noun: word(&NOUNS),
                verb: word(&VERBS),
                vector: v.into_iter().map(|x| x as f32).collect(),
            }
        })
        .collect())
}

/// Template counts proportional to the mix (largest remainder), shuffled.
fn template_schedule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Template> {
    let total: f64 = cfg.template_mix.values().sum();
    let n = cfg.videos;
    let mut counts: Vec<(Template, usize, f64)> = cfg
        .template_mix
        .iter()
        .map(|(&t, &w)| {
            let exact = w / total * n as f64;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        counts[i].1 += 1;
    }
    let mut schedule: Vec<Template> = counts
        .iter()
        .flat_map(|&(t, c, _)| std::iter::repeat_n(t, c))
        .collect();
    schedule.shuffle(rng);
    schedule
}

/// Places `n` spans of length 1 or 2, in order, with at least one free clip
/// between neighbours; uniform over all valid placements for the drawn lengths.
fn place_spans(n: usize, num_clips: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    loop {
        let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=2)).collect();
        let needed = lens.iter().sum::<usize>() + n - 1;
        if needed > num_clips {
            continue;
        }
        // distribute the slack over n + 1 gaps (stars and bars)
        let slack = num_clips - needed;
        let mut cuts: Vec<usize> = rand::seq::index::sample(rng, slack + n, n).into_vec();
        cuts.sort_unstable();
        let mut extra = Vec::with_capacity(n + 1);
        let mut prev = 0;
        for (j, &c) in cuts.iter().enumerate() {
            extra.push(c - prev - usize::from(j > 0));
            prev = c;
        }
        let mut spans = Vec::with_capacity(n);
        let mut pos = 0;
        for (j, &len) in lens.iter().enumerate() {
            pos += extra[j] + usize::from(j > 0);
            spans.push(Segment::new(pos, pos + len - 1));
            pos += len;
        }
        return spans;
    }
}

/// Recomputes the target segment from planted spans and the template alone.
/// `None` when the template's order relation does not hold for the spans.
pub fn oracle_ground(meta: &ExampleMeta) -> Option<Segment> {
    let of = |c: usize| -> Vec<Segment> {
        let mut v: Vec<Segment> = meta.spans.iter().filter(|p| p.concept == c).map(|p| p.segment).collect();
        v.sort();
        v
    };
    let xs = of(meta.x);
    let y = *of(meta.y).first()?;
    match meta.template {
        Template::Base => xs.first().copied(),
        Template::XBeforeY | Template::YCommaBeforeX => xs.into_iter().rev().find(|x| x.end < y.start),
        Template::XAfterY | Template::YCommaAfterX => xs.into_iter().find(|x| x.start > y.end),
        Template::XThenY => xs
            .into_iter()
            .rev()
            .find(|x| x.end < y.start)
            .map(|x| Segment::new(x.start, y.end)),
    }
}

fn query(template: Template, x: &Concept, y: &Concept) -> (Vec<String>, String) {
    let (xt, yt) = (x.tokens().to_vec(), y.tokens().to_vec());
    let (xs, ys) = (x.tree(), y.tree());
    let cat = |parts: &[&[String]]| parts.concat();
    let w = |s: &str| vec![s.to_string()];
    match template {
        Template::Base => (xt, xs),
        Template::XBeforeY => (cat(&[&xt, &w("before"), &yt]), format!("(S {xs} (SBAR (IN before) {ys}))")),
        Template::XAfterY => (cat(&[&xt, &w("after"), &yt]), format!("(S {xs} (SBAR (IN after) {ys}))")),
        Template::YCommaBeforeX => (
            cat(&[&yt, &w(","), &w("before"), &xt]),
            format!("(S {ys} (, ,) (SBAR (IN before) {xs}))"),
        ),
        Template::YCommaAfterX => (
            cat(&[&yt, &w(","), &w("after"), &xt]),
            format!("(S {ys} (, ,) (SBAR (IN after) {xs}))"),
        ),
        Template::XThenY => (cat(&[&xt, &w("then"), &yt]), format!("(S {xs} (ADVP (RB then)) {ys})")),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let concepts = make_concepts(cfg, &mut rng)?;
    let schedule = template_schedule(cfg, &mut rng);
    let sizes = cfg.split_sizes();
    let width = cfg.videos.to_string().len().max(5);

    let mut splits: BTreeMap<String, Vec<DatasetRecord>> = SPLIT_NAMES.iter().map(|s| (s.to_string(), Vec::new())).collect();
    let mut features = BTreeMap::new();
    let mut metas = Vec::with_capacity(cfg.videos);
    let t = cfg.num_clips;

    for (i, &template) in schedule.iter().enumerate() {
        let split = match i {
            i if i < sizes[0] => "train",
            i if i < sizes[0] + sizes[1] => "val",
            _ => "test",
        };
        let id = format!("ex{i:0width$}");
        let video_id = format!("vid{i:0width$}");
        let x = rng.gen_range(0..cfg.concepts);
        let y = (x + rng.gen_range(1..cfg.concepts)) % cfg.concepts;

        let order: Vec<usize> = if cfg.repeat_base {
            vec![x, y, x]
        } else {
            let x_first = template.x_first().unwrap_or_else(|| rng.gen_bool(0.5));
            if x_first {
                vec![x, y]
            } else {
                vec![y, x]
            }
        };
        let segs = place_spans(order.len(), t, &mut rng);
        let spans: Vec<PlantedSpan> = order
            .iter()
            .zip(&segs)
            .map(|(&concept, &segment)| PlantedSpan { concept, segment })
            .collect();
        let meta = ExampleMeta {
            id: id.clone(),
            video_id: video_id.clone(),
            split: split.to_string(),
            template,
            x,
            y,
            spans,
        };
        let gt = oracle_ground(&meta).expect("layout follows the template");

        let mut refs = BTreeMap::new();
        for m in &cfg.modalities {
            let sigma = cfg.modality_noise(m);
            let mut rows = vec![vec![0f32; cfg.video_dim]; t];
            if m.signal {
                for p in &meta.spans {
                    for c in p.segment.start..=p.segment.end {
                        rows[c].clone_from(&concepts[p.concept].vector);
                    }
                }
            }
            if sigma > 0.0 {
                for row in &mut rows {
                    for v in row.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += (sigma * z) as f32;
                    }
                }
            }
            features.insert((video_id.clone(), m.name.clone()), Arc::new(ClipFeatures::new(&video_id, rows)?));
            refs.insert(m.name.clone(), format!("features/{video_id}.{}.bin", m.name));
        }

        let (tokens, tree) = query(template, &concepts[x], &concepts[y]);
        splits.get_mut(split).expect("known split").push(DatasetRecord {
            id,
            video_id,
            tokens,
            tree: Some(tree),
            annotations: vec![gt; 4],
            ground_truth: Some(gt),
            split: Some(template.split()),
            num_clips: Some(t),
            features: refs,
        });
        metas.push(meta);
    }

    Ok(SynthOutput {
        manifest: Manifest {
            config: cfg.clone(),
            concepts,
            examples: metas,
        },
        splits,
        features,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CtgError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
