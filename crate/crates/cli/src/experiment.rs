//! Training and prediction over whole model bundles.

use ctg_core::eval::MetricsRow;
use ctg_core::event_repr::{read_text_embeddings, Vocabulary};
use ctg_core::grounding::AblationFlags;
use ctg_core::pipeline::{evaluate, predict, predict_fusion_sweep, Prediction};
use ctg_core::training::{train, TrainLog};
use ctg_core::{load_dataset, CtgError, CtgNet, Dataset, ExperimentConfig, LoadOptions, ModelBundle, Result, SegmentationMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityLog {
    pub modality: String,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub logs: Vec<ModalityLog>,
    pub fusion_lambda: f64,
    /// `(lambda, validation R@1)` when the weight was selected.
    pub fusion_sweep: Vec<(f64, f64)>,
}

fn needs_trees(mode: SegmentationMode, use_masks: bool) -> bool {
    mode == SegmentationMode::Parser && use_masks
}

pub fn load_options(cfg: &ExperimentConfig) -> LoadOptions {
    LoadOptions {
        modalities: cfg.active_modalities(),
        require_trees: needs_trees(cfg.mode, cfg.use_masks),
    }
}

/// Loads `train`, `val` or `test` as named by the config.
pub fn load_split(cfg: &ExperimentConfig, which: &str) -> Result<Dataset> {
    load_dataset(cfg.require_path(which)?, &load_options(cfg))
}

pub fn bundle_options(bundle: &ModelBundle) -> LoadOptions {
    LoadOptions {
        modalities: bundle.modalities(),
        require_trees: bundle
            .models
            .iter()
            .any(|(_, n)| needs_trees(n.config.mode, n.config.flags.use_masks)),
    }
}

pub fn bundle_lambda(bundle: &ModelBundle) -> f64 {
    bundle.extra.get("fusion_lambda").and_then(|v| v.as_f64()).unwrap_or(1.0)
}

pub fn bundle_config(bundle: &ModelBundle) -> Option<ExperimentConfig> {
    bundle
        .extra
        .get("config")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

pub fn predict_bundle(bundle: &ModelBundle, lambda: f64, data: &Dataset) -> Result<Vec<Prediction>> {
    let models: Vec<(&CtgNet<f32>, &str)> = bundle.models.iter().map(|(m, n)| (n, m.as_str())).collect();
    predict(&models, lambda, data)
}

/// Grid search of the first modality's weight on validation; ties keep the
/// smaller weight.
pub fn select_fusion_lambda(bundle: &ModelBundle, val: &Dataset) -> Result<(f64, Vec<(f64, f64)>)> {
    let [(ma, a), (mb, b)] = bundle.models.as_slice() else {
        return Err(CtgError::Invalid("fusion needs exactly two models".into()));
    };
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let sweeps = predict_fusion_sweep((a, ma), (b, mb), &grid, val)?;
    let mut scored = Vec::with_capacity(grid.len());
    for (l, preds) in grid.iter().zip(&sweeps) {
        scored.push((*l, evaluate(val, preds)?.report.average.r1));
    }
    let best = scored
        .iter()
        .fold(scored[0], |best, &x| if x.1 > best.1 { x } else { best });
    Ok((best.0, scored))
}

/// Trains one model per active modality, with per-modality seeds
/// `seed`, `seed + 1`.
pub fn train_models(cfg: &ExperimentConfig, train_set: &Dataset, val: &Dataset) -> Result<Trained> {
    let vocab = Vocabulary::from_tokens(train_set.tokens());
    let embeddings = cfg.embeddings_path.as_ref().map(read_text_embeddings).transpose()?;
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for (i, modality) in cfg.active_modalities().into_iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut net = CtgNet::<f32>::new(cfg.model_config(), vocab.clone(), seed)?;
        if let Some((words, rows)) = &embeddings {
            let n = net.load_embeddings(words, rows)?;
            log::info!("{n} of {} vocabulary rows initialised from pretrained embeddings", vocab.len());
        }
        let mut tc = cfg.train_config();
        tc.seed = seed;
        log::info!("training '{modality}' model ({} parameters)", net.params.num_scalars());
        let log = train(&mut net, train_set, val, &modality, &tc)?;
        logs.push(ModalityLog {
            modality: modality.clone(),
            log,
        });
        models.push((modality, net));
    }
    let mut bundle = ModelBundle {
        models,
        extra: serde_json::Value::Null,
    };
    let (fusion_lambda, fusion_sweep) = if bundle.models.len() == 2 && cfg.select_fusion_lambda {
        select_fusion_lambda(&bundle, val)?
    } else if bundle.models.len() == 2 {
        (cfg.fusion_lambda, Vec::new())
    } else {
        (1.0, Vec::new())
    };
    bundle.extra = serde_json::json!({ "config": cfg, "fusion_lambda": fusion_lambda });
    Ok(Trained {
        bundle,
        logs,
        fusion_lambda,
        fusion_sweep,
    })
}

pub fn average(data: &Dataset, preds: &[Prediction]) -> Result<MetricsRow> {
    Ok(evaluate(data, preds)?.report.average)
}

/// The full model and its six ablations, in table order.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let full = AblationFlags::default();
    vec![
        ("w/o m_k, phi", AblationFlags { use_masks: false, use_refinement: false, ..full }),
        ("w/o m_k", AblationFlags { use_masks: false, ..full }),
        ("w/o phi", AblationFlags { use_refinement: false, ..full }),
        ("w/o p_k, w_k", AblationFlags { use_position: false, use_weights: false, ..full }),
        ("w/o p_k", AblationFlags { use_position: false, ..full }),
        ("w/o w_k", AblationFlags { use_weights: false, ..full }),
        ("full", full),
    ]
}
