//! Experiment orchestration behind the CLI: dataset synthesis, per-fold
//! training, evaluation with and without adaptation, the component ablation
//! grid, and heatmap export.

pub mod bench;
mod config;
mod eval;
mod report;
mod train;

pub use config::{AdaptConfig, DataConfig, ExperimentConfig, Method, ModelConfig, TrainConfig};
pub use eval::{core_batch, evaluate_method_on_fold, CoreTraceRecord, MethodEval};
pub use report::{
    read_json, source_rev, write_aggregate_csv, write_json, write_traces_jsonl, RunRecord,
};
pub use train::{core_predictions, train_fold, TrainOutcome, TrainSettings};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::denem_steps;
use crate::data::{
    load_dataset, loco_split, save_dataset, synthesize_center, synthesize_core_frame, BiopsyCore,
    CenterShiftParams, SplitPlan, SynthGeometry,
};
use crate::ensemble::{load_checkpoint, save_checkpoint, EnsembleModel, NormPolicy};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, export_heatmap, AggregateReport, FoldReport};
use crate::nn::NormKind;
use crate::util::derive_seed;

/// Everything needed to regenerate frames deterministically; written next to
/// the manifest at synthesis time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub seed: u64,
    pub geometry: SynthGeometry,
    pub centers: Vec<CenterShiftParams>,
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub cancer_rate: f64,
}

pub struct SynthOutput {
    pub n_cores: usize,
    pub manifest_sha256: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Generate the dataset described by the config and write it to
/// `cfg.dataset`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let geometry = cfg.geometry();
    let centers = cfg.centers();
    let mut cores = Vec::new();
    for params in &centers {
        let seed = derive_seed(cfg.seed, &params.center_id, 0);
        cores.extend(synthesize_center(
            params,
            &geometry,
            cfg.data.n_patients,
            cfg.data.cores_per_patient,
            cfg.data.cancer_rate,
            seed,
        )?);
    }
    save_dataset(&cores, &cfg.dataset)?;
    let descriptor = DatasetDescriptor {
        seed: cfg.seed,
        geometry,
        centers,
        n_patients: cfg.data.n_patients,
        cores_per_patient: cfg.data.cores_per_patient,
        cancer_rate: cfg.data.cancer_rate,
    };
    write_json(&cfg.dataset.join("dataset.json"), &descriptor)?;
    Ok(SynthOutput {
        n_cores: cores.len(),
        manifest_sha256: sha256_file(&cfg.dataset.join("manifest.csv"))?,
    })
}

fn split_for(cfg: &ExperimentConfig, cores: &[BiopsyCore]) -> Result<SplitPlan> {
    loco_split(cores, cfg.train.val_fraction, derive_seed(cfg.seed, "split", 0))
}

fn checkpoint_dir(cfg: &ExperimentConfig, train_key: &str, center: &str) -> PathBuf {
    cfg.out
        .join("checkpoints")
        .join(train_key)
        .join(center)
}

fn train_settings(cfg: &ExperimentConfig, fold_idx: usize, track_member_best: bool) -> TrainSettings {
    TrainSettings {
        arch: cfg.arch(),
        norm: cfg.norm_policy(),
        members: cfg.effective_members(),
        lambda: cfg.training_lambda(),
        epochs: cfg.epochs(),
        batch_size: cfg.train.batch_size,
        lr: cfg.lr(),
        warmup_frac: cfg.train.warmup_frac,
        seed: derive_seed(cfg.seed, "train", fold_idx as u64),
        track_member_best,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFoldStats {
    pub test_center: String,
    pub best_epoch: usize,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_auroc: Vec<f64>,
}

/// Train one checkpoint per fold for the configured method's recipe.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let cores = load_dataset(&cfg.dataset)?;
    let plan = split_for(cfg, &cores)?;
    plan.verify(&cores)?;
    let hash = cfg.config_hash()?;
    let mut paths = Vec::new();
    let mut stats = Vec::new();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let settings = train_settings(cfg, fi, false);
        let outcome = train_fold(&cores, fold, &settings)?;
        let dir = checkpoint_dir(cfg, cfg.method.train_key(), &fold.test_center);
        save_checkpoint(&outcome.model, &dir, Some(hash.clone()))?;
        stats.push(TrainFoldStats {
            test_center: fold.test_center.clone(),
            best_epoch: outcome.best_epoch,
            epoch_train_loss: outcome.epoch_train_loss,
            epoch_val_auroc: outcome.epoch_val_auroc,
        });
        paths.push(dir);
    }
    write_json(
        &cfg.out.join(format!("train_{}.json", cfg.method.train_key())),
        &stats,
    )?;
    Ok(paths)
}

pub struct EvalOutput {
    pub fold_reports: Vec<FoldReport>,
    pub aggregate: AggregateReport,
    pub csv_path: PathBuf,
}

/// Evaluate the configured method on every fold, writing per-fold reports,
/// adaptation traces, the aggregate CSV, and a run record.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let cores = load_dataset(&cfg.dataset)?;
    let plan = split_for(cfg, &cores)?;
    let method_dir = cfg.out.join(format!("eval_{}", cfg.method.label()));
    let mut reports = Vec::new();
    for fold in &plan.folds {
        let dir = checkpoint_dir(cfg, cfg.method.train_key(), &fold.test_center);
        if !dir.join("manifest.json").exists() {
            return Err(Error::Checkpoint(format!(
                "no checkpoint for method {} at {} (run `train` first)",
                cfg.method.label(),
                dir.display()
            )));
        }
        let (mut model, _) = load_checkpoint(&dir)?;
        let expected_m = cfg.effective_members();
        if model.member_count() != expected_m {
            return Err(Error::Checkpoint(format!(
                "checkpoint at {} holds {} members but method {} expects {expected_m}",
                dir.display(),
                model.member_count(),
                cfg.method.label()
            )));
        }
        let eval = evaluate_method_on_fold(&cores, fold, &mut model, cfg.method, cfg)?;
        write_json(
            &method_dir.join(format!("fold_{}.json", fold.test_center)),
            &eval.report,
        )?;
        if !eval.traces.is_empty() {
            write_traces_jsonl(
                &method_dir.join(format!("traces_{}.jsonl", fold.test_center)),
                &eval.traces,
            )?;
        }
        reports.push(eval.report);
    }
    let agg = aggregate(&reports)?;
    let csv_path = method_dir.join("aggregate.csv");
    write_aggregate_csv(
        &csv_path,
        &[(cfg.method.label().to_string(), reports.clone(), agg.clone())],
    )?;
    let record = RunRecord {
        config_hash: cfg.config_hash()?,
        source_rev: source_rev(),
        method: cfg.method.label().to_string(),
        seed: cfg.seed,
        fold_reports: reports.clone(),
        aggregate: agg.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_json(&method_dir.join("run_record.json"), &record)?;
    Ok(EvalOutput {
        fold_reports: reports,
        aggregate: agg,
        csv_path,
    })
}

/// Variant grid in report order: flags are
/// (group_norm, ensemble, mutual_info, test_adapt).
fn variant_flags(method: Method, group_norm: bool) -> (bool, bool, bool, bool) {
    (
        group_norm,
        method.uses_ensemble(),
        method.trains_with_mi(),
        method.adapts(),
    )
}

/// Run the five-variant component grid (plus the optional batch-vs-group
/// norm comparison) and emit the ablation table.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let cores = load_dataset(&cfg.dataset)?;
    let plan = split_for(cfg, &cores)?;
    let hash = cfg.config_hash()?;

    let mut rows: Vec<(String, bool, bool, bool, bool, f64, f64)> = Vec::new();
    let mut agg_rows: Vec<(String, Vec<FoldReport>, AggregateReport)> = Vec::new();

    // Train each distinct recipe once per fold, then evaluate all variants.
    let methods = Method::ablation_rows();
    let mut recipe_models: std::collections::BTreeMap<(String, String), PathBuf> =
        std::collections::BTreeMap::new();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let mut keys: Vec<&'static str> = methods.iter().map(|m| m.train_key()).collect();
        keys.sort_unstable();
        keys.dedup();
        for key in keys {
            let mut sub = cfg.clone();
            sub.method = match key {
                "single" => Method::Resnet10,
                "ensemble_ce" => Method::Ensemble,
                _ => Method::EnsembleMi,
            };
            let settings = train_settings(&sub, fi, false);
            let outcome = train_fold(&cores, fold, &settings)?;
            let dir = checkpoint_dir(cfg, key, &fold.test_center);
            save_checkpoint(&outcome.model, &dir, Some(hash.clone()))?;
            recipe_models.insert((key.to_string(), fold.test_center.clone()), dir);
        }
    }

    for method in methods {
        let mut sub = cfg.clone();
        sub.method = method;
        sub.validate()?;
        let mut reports = Vec::new();
        for fold in &plan.folds {
            let dir = &recipe_models[&(method.train_key().to_string(), fold.test_center.clone())];
            let (mut model, _) = load_checkpoint(dir)?;
            let eval = evaluate_method_on_fold(&cores, fold, &mut model, method, &sub)?;
            reports.push(eval.report);
        }
        let agg = aggregate(&reports)?;
        let (gn, ens, mi, ta) = variant_flags(method, matches!(cfg.model.norm, NormKind::Group));
        rows.push((
            method.label().to_string(),
            gn,
            ens,
            mi,
            ta,
            agg.mean.auroc_all,
            agg.std.auroc_all,
        ));
        agg_rows.push((method.label().to_string(), reports, agg));
    }

    // Optional norm-layer comparison: the single-model baseline trained with
    // batch norm versus group norm.
    if cfg.norm_compare {
        for kind in [NormKind::Batch, NormKind::Group] {
            let mut sub = cfg.clone();
            sub.method = Method::Resnet10;
            sub.model.norm = kind;
            if matches!(kind, NormKind::Batch) {
                sub.model.num_groups = 1;
            }
            let mut reports = Vec::new();
            for (fi, fold) in plan.folds.iter().enumerate() {
                let settings = TrainSettings {
                    norm: NormPolicy {
                        kind,
                        num_groups: sub.model.num_groups,
                    },
                    ..train_settings(&sub, fi, false)
                };
                let outcome = train_fold(&cores, fold, &settings)?;
                let mut model = outcome.model;
                let eval = evaluate_method_on_fold(&cores, fold, &mut model, Method::Resnet10, &sub)?;
                reports.push(eval.report);
            }
            let agg = aggregate(&reports)?;
            let label = format!(
                "resnet10_{}",
                match kind {
                    NormKind::Batch => "batch_norm",
                    NormKind::Group => "group_norm",
                }
            );
            rows.push((
                label.clone(),
                matches!(kind, NormKind::Group),
                false,
                false,
                false,
                agg.mean.auroc_all,
                agg.std.auroc_all,
            ));
            agg_rows.push((label, reports, agg));
        }
    }

    let path = cfg.out.join("ablation.csv");
    report::write_ablation_csv(&path, &rows)?;
    write_aggregate_csv(&cfg.out.join("ablation_full.csv"), &agg_rows)?;
    Ok(path)
}

/// Render baseline and adapted heatmaps for one core, side by side.
pub fn cmd_heatmap(cfg: &ExperimentConfig, core_id: &str) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let descriptor: DatasetDescriptor = read_json(&cfg.dataset.join("dataset.json"))?;
    let cores = load_dataset(&cfg.dataset)?;
    let core = cores
        .iter()
        .find(|c| c.core_id == core_id)
        .ok_or_else(|| Error::validation(format!("no core named '{core_id}' in dataset")))?;

    // Identifier layout: <center>-p<patient>-k<core>.
    let parse = || -> Option<(usize, usize)> {
        let rest = core_id.strip_prefix(&format!("{}-p", core.center_id))?;
        let (patient, k) = rest.split_once("-k")?;
        Some((patient.parse().ok()?, k.parse().ok()?))
    };
    let (patient_idx, core_idx) = parse()
        .ok_or_else(|| Error::validation(format!("cannot parse indices from '{core_id}'")))?;
    let params = descriptor
        .centers
        .iter()
        .find(|p| p.center_id == core.center_id)
        .ok_or_else(|| Error::Dataset("core's center missing from dataset descriptor".into()))?;
    let seed = derive_seed(descriptor.seed, &params.center_id, 0);
    let (frame, _, _) = synthesize_core_frame(
        params,
        &descriptor.geometry,
        descriptor.cancer_rate,
        seed,
        patient_idx,
        core_idx,
    )?;

    let load = |key: &str| -> Result<EnsembleModel> {
        let dir = checkpoint_dir(cfg, key, &core.center_id);
        if !dir.join("manifest.json").exists() {
            return Err(Error::Checkpoint(format!(
                "no {key} checkpoint for fold {} (run `train` or `ablate` first)",
                core.center_id
            )));
        }
        Ok(load_checkpoint(&dir)?.0)
    };
    let baseline = load("single")?;
    let mut adapted = load("ensemble_mi")?;

    let out_dir = cfg.out.join("heatmaps");
    let spec = descriptor.geometry.patch;
    let base_path = out_dir.join(format!("{core_id}_resnet10.png"));
    let denem_path = out_dir.join(format!("{core_id}_denem.png"));
    export_heatmap(&baseline, &frame, &spec, &base_path)?;

    // Adapt on the core's needle patches, sweep the frame, then restore.
    let snapshot = adapted.snapshot();
    let batch = core_batch(core)?;
    let mut adapt_cfg = cfg.adaptation_config()?;
    adapt_cfg.lambda_adapt = cfg.adapt.lambda_adapt;
    denem_steps(&mut adapted, &batch, &adapt_cfg)?;
    export_heatmap(&adapted, &frame, &spec, &denem_path)?;
    adapted.restore(&snapshot)?;

    // Composite: the two renderings side by side.
    let a = image::open(&base_path)
        .map_err(|e| Error::Validation(format!("reading {}: {e}", base_path.display())))?
        .into_rgb8();
    let b = image::open(&denem_path)
        .map_err(|e| Error::Validation(format!("reading {}: {e}", denem_path.display())))?
        .into_rgb8();
    let gap = 8u32;
    let mut composite =
        image::RgbImage::from_pixel(a.width() + b.width() + gap, a.height().max(b.height()), image::Rgb([255, 255, 255]));
    image::imageops::overlay(&mut composite, &a, 0, 0);
    image::imageops::overlay(&mut composite, &b, (a.width() + gap) as i64, 0);
    let comp_path = out_dir.join(format!("{core_id}_composite.png"));
    composite
        .save(&comp_path)
        .map_err(|e| Error::Validation(format!("writing composite: {e}")))?;
    Ok(vec![base_path, denem_path, comp_path])
}
