//! Per-fold ensemble training: Adam with linear warm-up + cosine annealing,
//! best-validation-AUROC model selection.

use std::collections::BTreeSet;

use ndarray::{Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::{BiopsyCore, Fold};
use crate::ensemble::{build_ensemble, EnsembleModel, MemberSpec, NormPolicy};
use crate::error::{Error, Result};
use crate::evaluation::{auroc, CorePrediction};
use crate::nn::{cosine_warmup_lr, logits_to_probs, Adam, Elem, EncoderArch, ParamSet};
use crate::objectives::{
    prob_grad_to_logit_grad, training_loss_grads, DiversificationWeight, ProbBatch,
};
use crate::util::derive_seed;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub arch: EncoderArch,
    pub norm: NormPolicy,
    pub members: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Also track each member's own best-validation epoch, for single-model
    /// baselines derived from independently trained members.
    pub track_member_best: bool,
}

pub struct TrainOutcome {
    /// Parameters restored to the best ensemble-validation epoch.
    pub model: EnsembleModel,
    /// Per-member parameters at each member's own best epoch.
    pub member_best: Option<Vec<ParamSet>>,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_auroc: Vec<f64>,
    pub best_epoch: usize,
}

struct SampleRef {
    core: usize,
    patch: usize,
    label: usize,
}

fn batch_of(cores: &[&BiopsyCore], samples: &[SampleRef], arch: &EncoderArch) -> (Array4<Elem>, Vec<usize>) {
    let hw = arch.input_hw;
    let mut x = Array4::<Elem>::zeros((samples.len(), 1, hw, hw));
    let mut y = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let patch = cores[s.core].patches.index_axis(Axis(0), s.patch);
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&patch);
        y.push(s.label);
    }
    (x, y)
}

/// Core-level predictions for one member (or the marginal when `member` is
/// `None`), in deterministic eval mode.
pub fn core_predictions(
    model: &EnsembleModel,
    cores: &[&BiopsyCore],
    member: Option<usize>,
) -> Result<Vec<CorePrediction>> {
    let mut preds = Vec::with_capacity(cores.len());
    for core in cores {
        let batch = core
            .patches
            .view()
            .insert_axis(Axis(1))
            .to_owned();
        let probs = match member {
            Some(m) => model.forward_member(m, &batch)?.0,
            None => model.forward_marginal(&batch)?,
        };
        let score = probs.column(1).mean().expect("non-empty core");
        preds.push(CorePrediction {
            core_id: core.core_id.clone(),
            score,
            label_cancer: core.label.is_cancer(),
            involvement: core.involvement,
            center_id: core.center_id.clone(),
        });
    }
    Ok(preds)
}

/// All members' core-level predictions plus the marginal's, sharing one
/// forward pass per member.
fn all_core_predictions(
    model: &EnsembleModel,
    cores: &[&BiopsyCore],
) -> Result<(Vec<Vec<CorePrediction>>, Vec<CorePrediction>)> {
    let m_count = model.member_count();
    let mut member_preds: Vec<Vec<CorePrediction>> = vec![Vec::new(); m_count];
    let mut marginal_preds = Vec::with_capacity(cores.len());
    for core in cores {
        let batch = core.patches.view().insert_axis(Axis(1)).to_owned();
        let mut marginal_score = 0.0;
        for m in 0..m_count {
            let probs = model.forward_member(m, &batch)?.0;
            let score = probs.column(1).mean().expect("non-empty");
            marginal_score += score / m_count as f64;
            member_preds[m].push(CorePrediction {
                core_id: core.core_id.clone(),
                score,
                label_cancer: core.label.is_cancer(),
                involvement: core.involvement,
                center_id: core.center_id.clone(),
            });
        }
        marginal_preds.push(CorePrediction {
            core_id: core.core_id.clone(),
            score: marginal_score,
            label_cancer: core.label.is_cancer(),
            involvement: core.involvement,
            center_id: core.center_id.clone(),
        });
    }
    Ok((member_preds, marginal_preds))
}

/// Train one fold. Deterministic in `(cores, fold, settings)`.
pub fn train_fold(cores: &[BiopsyCore], fold: &Fold, s: &TrainSettings) -> Result<TrainOutcome> {
    let train_patients: BTreeSet<&str> = fold.train_patients.iter().map(|p| p.as_str()).collect();
    let val_patients: BTreeSet<&str> = fold.val_patients.iter().map(|p| p.as_str()).collect();
    let mut train_cores: Vec<&BiopsyCore> = cores
        .iter()
        .filter(|c| train_patients.contains(c.patient_id.as_str()))
        .collect();
    train_cores.sort_by(|a, b| a.core_id.cmp(&b.core_id));
    let mut val_cores: Vec<&BiopsyCore> = cores
        .iter()
        .filter(|c| val_patients.contains(c.patient_id.as_str()))
        .collect();
    val_cores.sort_by(|a, b| a.core_id.cmp(&b.core_id));
    if train_cores.is_empty() || val_cores.is_empty() {
        return Err(Error::validation(
            "fold needs non-empty train and validation sets",
        ));
    }

    let mut samples = Vec::new();
    for (ci, core) in train_cores.iter().enumerate() {
        for p in 0..core.num_patches() {
            samples.push(SampleRef {
                core: ci,
                patch: p,
                label: core.label.as_u8() as usize,
            });
        }
    }

    let specs: Vec<MemberSpec> = (0..s.members)
        .map(|m| MemberSpec {
            arch: s.arch,
            init_seed: derive_seed(s.seed, "member", m as u64),
        })
        .collect();
    let mut model = build_ensemble(&specs, s.norm, 2)?;
    let lambda = DiversificationWeight::new(s.lambda)
        .map_err(|_| Error::Config(format!("bad lambda {}", s.lambda)))?;

    let batches_per_epoch = samples.len().div_ceil(s.batch_size);
    let total_steps = batches_per_epoch * s.epochs;
    let warmup = ((total_steps as f64 * s.warmup_frac).ceil() as usize).max(1);
    let mut adams: Vec<Adam> = (0..s.members).map(|_| Adam::new(model.param_len())).collect();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<Vec<ParamSet>> = None;
    let mut member_best_val = vec![f64::NEG_INFINITY; s.members];
    let mut member_best: Vec<ParamSet> = (0..s.members)
        .map(|m| model.member_params(m).clone())
        .collect();

    let mut epoch_train_loss = Vec::with_capacity(s.epochs);
    let mut epoch_val_auroc = Vec::with_capacity(s.epochs);
    let mut step = 0usize;

    for epoch in 0..s.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(s.batch_size) {
            let refs: Vec<SampleRef> = chunk
                .iter()
                .map(|&i| SampleRef {
                    core: samples[i].core,
                    patch: samples[i].patch,
                    label: samples[i].label,
                })
                .collect();
            let (x, y) = batch_of(&train_cores, &refs, &s.arch);
            let lr_t = cosine_warmup_lr(s.lr, step, total_steps, warmup);
            step += 1;

            let m_count = model.member_count();
            let mut probs = Vec::with_capacity(m_count);
            let mut caches = Vec::with_capacity(m_count);
            for m in 0..m_count {
                let (logits, cache) = model.member_forward_train(m, &x)?;
                probs.push(ProbBatch::from_normalized(logits_to_probs(&logits)));
                caches.push(cache);
            }
            let (loss, dprobs) = training_loss_grads(&probs, &y, lambda)?;
            loss_sum += loss.value();
            for m in 0..m_count {
                let dlogits =
                    prob_grad_to_logit_grad(probs[m].rows(), &dprobs[m]).mapv(|v| v as Elem);
                let mut grads = vec![0.0 as Elem; model.param_len()];
                model.member_backward(m, &caches[m], &dlogits, &mut grads);
                adams[m].step(lr_t, &mut model.member_params_mut(m).params, &grads);
            }
        }
        epoch_train_loss.push(loss_sum / batches_per_epoch as f64);

        // Validation selection: core-level AUROC of the marginal (and of each
        // member when single-model baselines are being tracked).
        let (member_preds, marginal_preds) = all_core_predictions(&model, &val_cores)?;
        let val_auroc = auroc(&marginal_preds).unwrap_or(f64::NAN);
        epoch_val_auroc.push(val_auroc);
        if val_auroc.is_finite() && val_auroc > best_val {
            best_val = val_auroc;
            best_epoch = epoch;
            best_params = Some((0..s.members).map(|m| model.member_params(m).clone()).collect());
        }
        if s.track_member_best {
            for m in 0..s.members {
                let a = auroc(&member_preds[m]).unwrap_or(f64::NAN);
                if a.is_finite() && a > member_best_val[m] {
                    member_best_val[m] = a;
                    member_best[m] = model.member_params(m).clone();
                }
            }
        }
    }

    if let Some(params) = best_params {
        for (m, p) in params.into_iter().enumerate() {
            *model.member_params_mut(m) = p;
        }
    } else {
        best_epoch = s.epochs.saturating_sub(1);
    }

    Ok(TrainOutcome {
        model,
        member_best: s.track_member_best.then_some(member_best),
        epoch_train_loss,
        epoch_val_auroc,
        best_epoch,
    })
}
