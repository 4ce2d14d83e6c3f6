//! Method-dispatched fold evaluation: un-adapted inference or episodic
//! adaptation per test core, threshold selection on validation, metric
//! bundle assembly.

use std::collections::BTreeSet;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::train::core_predictions;
use crate::adaptation::{
    adapt_core_denem, adapt_core_memo, adapt_core_tent, CoreBatch,
};
use crate::data::{BiopsyCore, Fold};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_fold, filter_involvement, select_decision_threshold, CorePrediction, EvalThresholds,
    FoldReport,
};

/// One adaptation episode's diagnostics, serialized as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoreTraceRecord {
    pub core_id: String,
    pub objective_trace: Vec<f64>,
    pub aborted: bool,
}

pub struct MethodEval {
    pub report: FoldReport,
    pub traces: Vec<CoreTraceRecord>,
    pub decision_threshold: f64,
    pub test_predictions: Vec<CorePrediction>,
}

pub fn core_batch(core: &BiopsyCore) -> Result<CoreBatch> {
    CoreBatch::new(
        core.core_id.clone(),
        core.patches.view().insert_axis(Axis(1)).to_owned(),
    )
}

fn select_cores<'a>(cores: &'a [BiopsyCore], keep: impl Fn(&BiopsyCore) -> bool) -> Vec<&'a BiopsyCore> {
    let mut picked: Vec<&BiopsyCore> = cores.iter().filter(|c| keep(c)).collect();
    picked.sort_by(|a, b| a.core_id.cmp(&b.core_id));
    picked
}

/// Decision threshold from un-adapted validation predictions, frozen for
/// test. Falls back to the unfiltered set when filtering empties a class.
fn validation_threshold(
    model: &EnsembleModel,
    cores: &[BiopsyCore],
    fold: &Fold,
    involvement_threshold: f64,
) -> Result<f64> {
    let val_patients: BTreeSet<&str> = fold.val_patients.iter().map(|p| p.as_str()).collect();
    let val_cores = select_cores(cores, |c| val_patients.contains(c.patient_id.as_str()));
    if val_cores.is_empty() {
        return Err(Error::validation("fold has no validation cores"));
    }
    let preds = core_predictions(model, &val_cores, None)?;
    let filtered = filter_involvement(&preds, involvement_threshold);
    let has_both = |ps: &[CorePrediction]| {
        ps.iter().any(|p| p.label_cancer) && ps.iter().any(|p| !p.label_cancer)
    };
    if has_both(&filtered) {
        select_decision_threshold(&filtered)
    } else if has_both(&preds) {
        select_decision_threshold(&preds)
    } else {
        Ok(0.5)
    }
}

/// Evaluate `method` on one fold's test center. Adaptation methods mutate
/// `model` episodically and always restore it.
pub fn evaluate_method_on_fold(
    cores: &[BiopsyCore],
    fold: &Fold,
    model: &mut EnsembleModel,
    method: Method,
    cfg: &ExperimentConfig,
) -> Result<MethodEval> {
    let test_cores = select_cores(cores, |c| c.center_id == fold.test_center);
    if test_cores.is_empty() {
        return Err(Error::validation(format!(
            "no test cores for center {}",
            fold.test_center
        )));
    }
    let decision_threshold =
        validation_threshold(model, cores, fold, EvalThresholds::default().involvement_threshold)?;

    let mut preds = Vec::with_capacity(test_cores.len());
    let mut traces = Vec::new();
    for core in &test_cores {
        let (score, trace) = score_core(model, core, method, cfg)?;
        if let Some(t) = trace {
            traces.push(t);
        }
        preds.push(CorePrediction {
            core_id: core.core_id.clone(),
            score,
            label_cancer: core.label.is_cancer(),
            involvement: core.involvement,
            center_id: core.center_id.clone(),
        });
    }

    let thresholds = EvalThresholds {
        decision_threshold,
        ..EvalThresholds::default()
    };
    let report = evaluate_fold(&preds, &thresholds)?;
    Ok(MethodEval {
        report,
        traces,
        decision_threshold,
        test_predictions: preds,
    })
}

fn score_core(
    model: &mut EnsembleModel,
    core: &BiopsyCore,
    method: Method,
    cfg: &ExperimentConfig,
) -> Result<(f64, Option<CoreTraceRecord>)> {
    let batch = core_batch(core)?;
    let mean_cancer = |probs: &ndarray::Array2<f64>| probs.column(1).mean().expect("non-empty");
    match method {
        Method::Resnet10 | Method::Ensemble | Method::EnsembleMi => {
            let probs = model.forward_marginal(&batch.patches)?;
            Ok((mean_cancer(&probs), None))
        }
        Method::Denem | Method::EnsembleMe => {
            let adapted = adapt_core_denem(model, &batch, &cfg.adaptation_config()?)?;
            Ok((
                mean_cancer(&adapted.patch_probs),
                Some(CoreTraceRecord {
                    core_id: core.core_id.clone(),
                    objective_trace: adapted.objective_trace,
                    aborted: adapted.aborted,
                }),
            ))
        }
        Method::Tent => {
            let adapted = adapt_core_tent(model, &batch, &cfg.adaptation_config()?)?;
            Ok((
                mean_cancer(&adapted.patch_probs),
                Some(CoreTraceRecord {
                    core_id: core.core_id.clone(),
                    objective_trace: adapted.objective_trace,
                    aborted: adapted.aborted,
                }),
            ))
        }
        Method::Memo => {
            let augs = cfg.augmentations()?;
            let adapted = adapt_core_memo(model, &batch, &augs, &cfg.adaptation_config()?)?;
            Ok((
                mean_cancer(&adapted.patch_probs),
                Some(CoreTraceRecord {
                    core_id: core.core_id.clone(),
                    objective_trace: adapted.objective_trace,
                    aborted: adapted.aborted,
                }),
            ))
        }
    }
}
