//! One function per subcommand.

use std::path::{Path, PathBuf};

use ctg_core::adapters::{adapt, read_external};
use ctg_core::clause_seg::{parse_ptb, segment_clauses};
use ctg_core::dataset::write_records;
use ctg_core::eval::MetricsRow;
use ctg_core::grounding::AblationFlags;
use ctg_core::synth::{generate, SynthConfig};
use ctg_core::{load_dataset, CtgError, ExperimentConfig, LoadOptions, ModelBundle};
use serde::{Deserialize, Serialize};

use crate::experiment::{
    ablation_variants, bundle_config, bundle_lambda, bundle_options, load_split, predict_bundle, train_models, ModalityLog,
};
use crate::report::{build_report, read_predictions, write_json, write_predictions, EvalReport, NoveltyInputs, SplitEntry};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CtgError::io(dir, e).into())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run_generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CtgError::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| CtgError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate(&cfg)?;
    create_dir(out)?;
    data.write(out)?;
    let sizes: Vec<String> = data.splits.iter().map(|(k, v)| format!("{k} {}", v.len())).collect();
    println!("wrote {} ({})", out.display(), sizes.join(", "));
    Ok(())
}

#[derive(Deserialize)]
struct SegmentInput {
    id: serde_json::Value,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(alias = "tree")]
    ptb: String,
}

#[derive(Serialize)]
struct SegmentOutput {
    id: serde_json::Value,
    masks: Vec<Vec<u8>>,
}

/// Reads `{id, tokens, ptb}` lines and writes `{id, masks}` lines.
pub fn run_segment(input: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| CtgError::io(input, e))?;
    let mut lines = String::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SegmentInput =
            serde_json::from_str(line).map_err(|e| CtgError::Data(format!("{}:{}: {e}", input.display(), i + 1)))?;
        let name = rec.id.to_string();
        let tree = parse_ptb(&rec.ptb).map_err(|e| CtgError::record(&name, e.to_string()))?;
        let masks = segment_clauses(&tree);
        if let Some(t) = &rec.tokens {
            if t.len() != masks.n_tokens {
                return Err(CtgError::record(&name, format!("{} tokens but the tree has {} leaves", t.len(), masks.n_tokens)).into());
            }
        }
        let out_rec = SegmentOutput {
            id: rec.id,
            masks: masks
                .masks
                .iter()
                .map(|m| m.iter().map(|&v| u8::from(v > 0.0)).collect())
                .collect(),
        };
        lines.push_str(&serde_json::to_string(&out_rec).map_err(CtgError::from)?);
        lines.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, lines).map_err(|e| CtgError::io(p, e))?,
        None => print!("{lines}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config: &'a ExperimentConfig,
    models: &'a [ModalityLog],
    fusion_lambda: f64,
    fusion_sweep: &'a [(f64, f64)],
    /// Validation metrics of the saved checkpoint.
    final_validation: MetricsRow,
    final_validation_splits: Vec<SplitEntry>,
}

/// Writes `checkpoint.ctgp`, `train_log.json` and `config.json` into `out`.
pub fn run_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let train_set = load_split(&cfg, "train")?;
    let val = load_split(&cfg, "val")?;
    let trained = train_models(&cfg, &train_set, &val)?;

    let preds = predict_bundle(&trained.bundle, trained.fusion_lambda, &val)?;
    let val_report = build_report(&val, &preds, None, None)?;

    create_dir(out)?;
    trained.bundle.save(out.join("checkpoint.ctgp"))?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(
        &out.join("train_log.json"),
        &TrainReport {
            config: &cfg,
            models: &trained.logs,
            fusion_lambda: trained.fusion_lambda,
            fusion_sweep: &trained.fusion_sweep,
            final_validation: val_report.average,
            final_validation_splits: val_report.splits,
        },
    )?;
    println!(
        "validation Average R@1 {:.4} R@5 {:.4} mIoU {:.4}; checkpoint in {}",
        val_report.average.r1,
        val_report.average.r5,
        val_report.average.miou,
        out.display()
    );
    Ok(())
}

/// With `--config`, its `fusion_lambda` replaces the stored one unless the
/// config asks for validation selection.
pub fn run_ground(config: Option<&Path>, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let bundle = ModelBundle::load(checkpoint)?;
    let mut lambda = bundle_lambda(&bundle);
    if let Some(p) = config {
        let cfg = ExperimentConfig::load(p)?;
        if !cfg.select_fusion_lambda && bundle.models.len() == 2 {
            lambda = cfg.fusion_lambda;
        }
    }
    let data = load_dataset(dataset, &bundle_options(&bundle))?;
    let preds = predict_bundle(&bundle, lambda, &data)?;
    write_predictions(out, &preds)?;
    println!("ranked {} queries into {}", preds.len(), out.display());
    Ok(())
}

/// Writes the JSON report and a CSV with the same stem. The novelty analysis
/// runs when a checkpoint and a config naming the training set are known.
pub fn run_eval(
    predictions: &Path,
    dataset: &Path,
    report: &Path,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let opts = LoadOptions {
        modalities: Vec::new(),
        require_trees: false,
    };
    let data = load_dataset(dataset, &opts)?;
    let bundle = checkpoint.map(ModelBundle::load).transpose()?;
    let cfg = match config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => bundle.as_ref().and_then(bundle_config),
    };
    let train_set = match (&bundle, cfg.as_ref().and_then(|c| c.train_path.as_ref())) {
        (Some(_), Some(p)) => Some(load_dataset(p, &opts)?),
        _ => None,
    };
    let novelty = match (&bundle, &train_set) {
        (Some(b), Some(t)) => Some(NoveltyInputs {
            net: &b.models[0].1,
            train: t,
        }),
        _ => None,
    };
    let rep = build_report(&data, &preds, cfg, novelty)?;
    write_json(report, &rep)?;
    let csv = report.with_extension("csv");
    std::fs::write(&csv, rep.to_csv()).map_err(|e| CtgError::io(&csv, e))?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    print_table(&rep);
    Ok(())
}

fn print_table(rep: &EvalReport) {
    println!("{:<8} {:>7} {:>7} {:>7} {:>6}", "split", "R@1", "R@5", "mIoU", "n");
    let row = |name: &str, m: &MetricsRow| {
        println!("{name:<8} {:>7.4} {:>7.4} {:>7.4} {:>6}", m.r1, m.r5, m.miou, m.count);
    };
    for s in &rep.splits {
        row(s.split.as_str(), &s.metrics);
    }
    row("average", &rep.average);
    row("prior", &rep.prior);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: AblationFlags,
    pub average: MetricsRow,
    pub splits: Vec<SplitEntry>,
    pub validation: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: ExperimentConfig,
    /// Split the rows were measured on.
    pub evaluated_on: String,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates the full model and six ablations; the test split is
/// used when configured, otherwise validation.
pub fn run_ablate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let train_set = load_split(&cfg, "train")?;
    let val = load_split(&cfg, "val")?;
    let (eval_name, eval_set) = match cfg.test_path {
        Some(_) => ("test", load_split(&cfg, "test")?),
        None => ("val", val.clone()),
    };
    create_dir(out)?;
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let mut c = cfg.clone();
        c.set_flags(flags);
        log::info!("ablation '{name}'");
        let trained = train_models(&c, &train_set, &val)?;
        let preds = predict_bundle(&trained.bundle, trained.fusion_lambda, &eval_set)?;
        let rep = build_report(&eval_set, &preds, None, None)?;
        let val_preds = predict_bundle(&trained.bundle, trained.fusion_lambda, &val)?;
        let validation = build_report(&val, &val_preds, None, None)?.average;
        println!("{name:<14} R@1 {:.4} R@5 {:.4} mIoU {:.4}", rep.average.r1, rep.average.r5, rep.average.miou);
        rows.push(AblationRow {
            variant: name.to_string(),
            flags,
            average: rep.average,
            splits: rep.splits,
            validation,
        });
    }
    let table = AblationTable {
        config: cfg,
        evaluated_on: eval_name.to_string(),
        rows,
    };
    write_json(&out.join("ablation.json"), &table)?;
    let mut csv = String::from("variant,r1,r5,miou,count\n");
    for r in &table.rows {
        csv.push_str(&format!("\"{}\",{},{},{},{}\n", r.variant, r.average.r1, r.average.r5, r.average.miou, r.average.count));
    }
    let p = out.join("ablation.csv");
    std::fs::write(&p, csv).map_err(|e| CtgError::io(&p, e))?;
    Ok(())
}

pub fn run_adapt(annotations: &Path, features_dir: &Path, out: &Path, modalities: &[String]) -> Result<()> {
    let anns = read_external(annotations)?;
    let (records, summary) = adapt(&anns, features_dir, modalities)?;
    write_records(out, &records)?;
    let summary_path: PathBuf = out.with_extension("summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "kept {} of {} annotations ({} out of range, {} missing features, {} malformed)",
        summary.kept,
        anns.len(),
        summary.skipped_out_of_range,
        summary.skipped_missing_features,
        summary.skipped_malformed
    );
    Ok(())
}
