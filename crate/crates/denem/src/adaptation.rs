//! Episodic test-time adaptation: fine-tune on the patches of one biopsy
//! core with an unsupervised objective, predict, then recover the trained
//! parameters exactly. Three engines share the episode machinery:
//!
//! - [`adapt_core_denem`]: marginal entropy plus weighted mutual information
//!   across ensemble members, all parameters;
//! - [`adapt_core_tent`]: mean prediction entropy, normalization affine
//!   parameters only by default;
//! - [`adapt_core_memo`]: entropy of the augmentation-averaged prediction.
//!
//! Every episode is optimizer-fresh: plain SGD state has nothing to carry,
//! and parameters are restored from a snapshot taken at entry, so adapting
//! core A then core B gives B exactly what adapting B alone would.

use ndarray::{Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::imgops;
use crate::nn::{logits_to_probs, Elem, GradBuf, Sgd};
use crate::objectives::{
    adaptation_loss, adaptation_loss_grads, mean_prediction_entropy, mean_prediction_entropy_grads,
    memo_marginal_entropy, memo_marginal_entropy_grads, prob_grad_to_logit_grad,
    DiversificationWeight, ProbBatch,
};
use crate::util::derive_seed;

/// Which parameters an adaptation episode may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    All,
    NormAffineOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
}

/// Hyperparameters of one adaptation episode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub lr: f64,
    pub steps: usize,
    pub lambda_adapt: f64,
    pub optimizer: OptimizerKind,
    pub param_scope: ParamScope,
}

impl AdaptationConfig {
    pub fn new(lr: f64, steps: usize, lambda_adapt: f64, param_scope: ParamScope) -> Result<Self> {
        let cfg = AdaptationConfig {
            lr,
            steps,
            lambda_adapt,
            optimizer: OptimizerKind::Sgd,
            param_scope,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 || self.lr > 1.0 {
            return Err(Error::validation(format!(
                "adaptation lr must lie in (0, 1], got {}",
                self.lr
            )));
        }
        if !self.lambda_adapt.is_finite() || self.lambda_adapt < 0.0 {
            return Err(Error::validation("lambda_adapt must be >= 0"));
        }
        Ok(())
    }
}

/// All patches of one biopsy core, shaped `n x 1 x H x W`.
#[derive(Debug, Clone)]
pub struct CoreBatch {
    pub core_id: String,
    pub patches: Array4<Elem>,
}

impl CoreBatch {
    pub fn new(core_id: impl Into<String>, patches: Array4<Elem>) -> Result<Self> {
        if patches.dim().0 == 0 {
            return Err(Error::validation("core must contain at least one patch"));
        }
        Ok(CoreBatch {
            core_id: core_id.into(),
            patches,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.dim().0
    }
}

/// Outcome of one adaptation episode.
#[derive(Debug, Clone)]
pub struct AdaptedPrediction {
    /// Marginal per-patch probabilities from the adapted parameters.
    pub patch_probs: Array2<f64>,
    /// Objective value before each step plus after the last one;
    /// length `S + 1` unless the episode aborted.
    pub objective_trace: Vec<f64>,
    /// Always true on return: parameters were recovered from the snapshot.
    pub restored: bool,
    /// True when a non-finite objective aborted the episode; predictions are
    /// then the un-adapted ones.
    pub aborted: bool,
}

/// Objective value and per-member parameter-space gradients at the current
/// parameters.
type StepFn<'a> = dyn FnMut(&mut EnsembleModel) -> Result<(f64, Vec<GradBuf>)> + 'a;

/// Collect every member's probabilities on a batch in inference mode.
fn member_probs(model: &EnsembleModel, batch: &Array4<Elem>) -> Result<Vec<ProbBatch>> {
    (0..model.member_count())
        .map(|m| Ok(ProbBatch::from_normalized(model.forward_member(m, batch)?.0)))
        .collect()
}

/// Run `steps` SGD iterations of `step_fn` without restoring; returns the
/// trace of objective values before each step. Aborts on the first
/// non-finite objective or gradient.
///
/// Callers own snapshot/restore; the episodic engines wrap this.
pub(crate) fn adapt_in_place(
    model: &mut EnsembleModel,
    cfg: &AdaptationConfig,
    step_fn: &mut StepFn,
) -> Result<(Vec<f64>, bool)> {
    let sgd = Sgd::new(cfg.lr);
    let mask = match cfg.param_scope {
        ParamScope::All => None,
        ParamScope::NormAffineOnly => Some(model.norm_affine_mask()),
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (value, grads) = step_fn(model)?;
        trace.push(value);
        if !value.is_finite() {
            return Ok((trace, true));
        }
        if grads
            .iter()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Ok((trace, true));
        }
        for (m, g) in grads.iter().enumerate() {
            sgd.step(
                &mut model.member_params_mut(m).params,
                g,
                mask.as_deref(),
            );
        }
    }
    Ok((trace, false))
}

fn finish_episode(
    model: &mut EnsembleModel,
    core: &CoreBatch,
    snapshot: &crate::ensemble::ParameterSnapshot,
    mut trace: Vec<f64>,
    aborted_during_steps: bool,
    final_objective: &mut dyn FnMut(&EnsembleModel) -> Result<f64>,
) -> Result<AdaptedPrediction> {
    let mut aborted = aborted_during_steps;
    if !aborted {
        let value = final_objective(model)?;
        trace.push(value);
        if !value.is_finite() {
            aborted = true;
        }
    }
    let patch_probs = if aborted {
        model.restore(snapshot)?;
        model.forward_marginal(&core.patches)?
    } else {
        let probs = model.forward_marginal(&core.patches)?;
        model.restore(snapshot)?;
        probs
    };
    Ok(AdaptedPrediction {
        patch_probs,
        objective_trace: trace,
        restored: true,
        aborted,
    })
}

/// Diversified marginal-entropy adaptation over all parameters of every
/// ensemble member. Requires `M >= 2` (the mutual-information term needs
/// pairs).
pub fn adapt_core_denem(
    model: &mut EnsembleModel,
    core: &CoreBatch,
    cfg: &AdaptationConfig,
) -> Result<AdaptedPrediction> {
    cfg.validate()?;
    if model.member_count() < 2 {
        return Err(Error::validation(
            "diversified adaptation requires an ensemble of at least two members",
        ));
    }
    let lambda = DiversificationWeight::new(cfg.lambda_adapt)?;
    let snapshot = model.snapshot();
    let (trace, aborted) = denem_steps(model, core, cfg)?;
    finish_episode(model, core, &snapshot, trace, aborted, &mut |m| {
        let probs = member_probs(m, &core.patches)?;
        Ok(adaptation_loss(&probs, lambda)?.value())
    })
}

/// The S gradient steps of diversified marginal-entropy adaptation, without
/// snapshot/restore. Exposed so callers that need the *adapted* model (e.g.
/// heatmap sweeps) can manage recovery themselves.
pub fn denem_steps(
    model: &mut EnsembleModel,
    core: &CoreBatch,
    cfg: &AdaptationConfig,
) -> Result<(Vec<f64>, bool)> {
    cfg.validate()?;
    if model.member_count() < 2 {
        return Err(Error::validation(
            "diversified adaptation requires an ensemble of at least two members",
        ));
    }
    let lambda = DiversificationWeight::new(cfg.lambda_adapt)?;
    // Two-phase step: forward all members, compute composite gradients, then
    // backprop each member.
    let mut step_fn = |m: &mut EnsembleModel| -> Result<(f64, Vec<GradBuf>)> {
        let m_count = m.member_count();
        let mut probs = Vec::with_capacity(m_count);
        let mut caches = Vec::with_capacity(m_count);
        for k in 0..m_count {
            let (logits, cache) = m.member_forward_train(k, &core.patches)?;
            probs.push(ProbBatch::from_normalized(logits_to_probs(&logits)));
            caches.push(cache);
        }
        let (value, dprobs) = adaptation_loss_grads(&probs, lambda)?;
        let mut grads = Vec::with_capacity(m_count);
        for k in 0..m_count {
            let dlogits = prob_grad_to_logit_grad(probs[k].rows(), &dprobs[k]).mapv(|v| v as Elem);
            let mut g = vec![0.0 as Elem; m.param_len()];
            m.member_backward(k, &caches[k], &dlogits, &mut g);
            grads.push(g);
        }
        Ok((value.value(), grads))
    };
    adapt_in_place(model, cfg, &mut step_fn)
}

/// Entropy-minimization adaptation on the model's own predictions. The
/// conventional scope adapts only normalization affine parameters; the model
/// may have one member (single-network backbone) or several (averaged
/// objective per member).
pub fn adapt_core_tent(
    model: &mut EnsembleModel,
    core: &CoreBatch,
    cfg: &AdaptationConfig,
) -> Result<AdaptedPrediction> {
    cfg.validate()?;
    let snapshot = model.snapshot();
    let mut step_fn = |m: &mut EnsembleModel| -> Result<(f64, Vec<GradBuf>)> {
        let m_count = m.member_count();
        let mut probs = Vec::with_capacity(m_count);
        let mut caches = Vec::with_capacity(m_count);
        for k in 0..m_count {
            let (logits, cache) = m.member_forward_train(k, &core.patches)?;
            probs.push(ProbBatch::from_normalized(logits_to_probs(&logits)));
            caches.push(cache);
        }
        let (value, dprobs) = mean_prediction_entropy_grads(&probs)?;
        let mut grads = Vec::with_capacity(m_count);
        for k in 0..m_count {
            let dlogits = prob_grad_to_logit_grad(probs[k].rows(), &dprobs[k]).mapv(|v| v as Elem);
            let mut g = vec![0.0 as Elem; m.param_len()];
            m.member_backward(k, &caches[k], &dlogits, &mut g);
            grads.push(g);
        }
        Ok((value.value(), grads))
    };
    let (trace, aborted) = adapt_in_place(model, cfg, &mut step_fn)?;
    finish_episode(model, core, &snapshot, trace, aborted, &mut |m| {
        let probs = member_probs(m, &core.patches)?;
        Ok(mean_prediction_entropy(&probs)?.value())
    })
}

// ---------------------------------------------------------------------------
// Augmentations
// ---------------------------------------------------------------------------

/// Test-time augmentations available to the augmentation-marginal engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    HorizontalFlip,
    VerticalFlip,
    Crop,
    Affine,
}

impl std::str::FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Augmentation::Identity),
            "horizontal_flip" | "hflip" => Ok(Augmentation::HorizontalFlip),
            "vertical_flip" | "vflip" => Ok(Augmentation::VerticalFlip),
            "crop" => Ok(Augmentation::Crop),
            "affine" => Ok(Augmentation::Affine),
            other => Err(Error::validation(format!(
                "unknown augmentation '{other}' (expected identity, horizontal_flip, vertical_flip, crop, affine)"
            ))),
        }
    }
}

impl Augmentation {
    /// Apply to a whole patch batch; randomized parameters are drawn once per
    /// call from `rng`, so a seeded episode is deterministic.
    pub fn apply(&self, batch: &Array4<Elem>, rng: &mut ChaCha8Rng) -> Array4<Elem> {
        let (n, ch, h, w) = batch.dim();
        debug_assert_eq!(ch, 1);
        let mut out = Array4::<Elem>::zeros((n, ch, h, w));
        match self {
            Augmentation::Identity => out.assign(batch),
            Augmentation::HorizontalFlip => {
                for i in 0..n {
                    let src = batch.index_axis(Axis(0), i);
                    let img = src.index_axis(Axis(0), 0);
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&imgops::flip_lr(&img));
                }
            }
            Augmentation::VerticalFlip => {
                for i in 0..n {
                    let src = batch.index_axis(Axis(0), i);
                    let img = src.index_axis(Axis(0), 0);
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&imgops::flip_ud(&img));
                }
            }
            Augmentation::Crop => {
                let frac = rng.random_range(0.75..0.95f64);
                let chh = ((h as f64 * frac).round() as usize).max(1);
                let cww = ((w as f64 * frac).round() as usize).max(1);
                let top = rng.random_range(0..=(h - chh));
                let left = rng.random_range(0..=(w - cww));
                for i in 0..n {
                    let src = batch.index_axis(Axis(0), i);
                    let img = src.index_axis(Axis(0), 0);
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&imgops::crop_resize(&img, top, left, chh, cww));
                }
            }
            Augmentation::Affine => {
                let theta = rng.random_range(-0.2..0.2f32);
                let dy = rng.random_range(-0.06..0.06f32) * h as f32;
                let dx = rng.random_range(-0.06..0.06f32) * w as f32;
                for i in 0..n {
                    let src = batch.index_axis(Axis(0), i);
                    let img = src.index_axis(Axis(0), 0);
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), 0)
                        .assign(&imgops::affine(&img, theta, dy, dx));
                }
            }
        }
        out
    }
}

/// Parse a list of augmentation names, rejecting unknown ones.
pub fn parse_augmentations(names: &[String]) -> Result<Vec<Augmentation>> {
    names.iter().map(|s| s.parse()).collect()
}

/// Augmentation-marginal entropy adaptation: minimize the entropy of the
/// prediction averaged across augmented views of the core's patches.
pub fn adapt_core_memo(
    model: &mut EnsembleModel,
    core: &CoreBatch,
    augmentations: &[Augmentation],
    cfg: &AdaptationConfig,
) -> Result<AdaptedPrediction> {
    cfg.validate()?;
    if augmentations.is_empty() {
        return Err(Error::validation(
            "augmentation-marginal adaptation requires at least one augmentation",
        ));
    }
    let snapshot = model.snapshot();
    let episode_seed = derive_seed(0x4d454d4f, &core.core_id, 0);
    let mut step_index = 0u64;
    let mut step_fn = |m: &mut EnsembleModel| -> Result<(f64, Vec<GradBuf>)> {
        let m_count = m.member_count();
        // One (augmentation x member) probability batch each; the marginal
        // over that flat list equals augmentation-then-member averaging.
        let mut views = Vec::with_capacity(augmentations.len());
        for (ai, aug) in augmentations.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, "step", step_index * 31 + ai as u64));
            views.push(aug.apply(&core.patches, &mut rng));
        }
        step_index += 1;
        let mut probs = Vec::with_capacity(views.len() * m_count);
        let mut caches = Vec::with_capacity(views.len() * m_count);
        for view in &views {
            for k in 0..m_count {
                let (logits, cache) = m.member_forward_train(k, view)?;
                probs.push(ProbBatch::from_normalized(logits_to_probs(&logits)));
                caches.push(cache);
            }
        }
        let (value, dprobs) = memo_marginal_entropy_grads(&probs)?;
        let mut grads = vec![vec![0.0 as Elem; m.param_len()]; m_count];
        for (flat, cache) in caches.iter().enumerate() {
            let k = flat % m_count;
            let dlogits =
                prob_grad_to_logit_grad(probs[flat].rows(), &dprobs[flat]).mapv(|v| v as Elem);
            m.member_backward(k, cache, &dlogits, &mut grads[k]);
        }
        Ok((value.value(), grads))
    };
    let (trace, aborted) = adapt_in_place(model, cfg, &mut step_fn)?;
    let final_seed = derive_seed(episode_seed, "final", 0);
    finish_episode(model, core, &snapshot, trace, aborted, &mut |m| {
        let mut probs = Vec::new();
        for (ai, aug) in augmentations.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(final_seed, "aug", ai as u64));
            let view = aug.apply(&core.patches, &mut rng);
            for p in member_probs(m, &view)? {
                probs.push(p);
            }
        }
        Ok(memo_marginal_entropy(&probs)?.value())
    })
}

/// Core-level score: mean over patches of the marginal cancer-class
/// probability (class index 1).
pub fn predict_core(model: &EnsembleModel, core: &CoreBatch) -> Result<f64> {
    if core.num_patches() == 0 {
        return Err(Error::validation("cannot score an empty core"));
    }
    let probs = model.forward_marginal(&core.patches)?;
    Ok(probs.column(1).mean().expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{build_ensemble, MemberSpec, NormPolicy};
    use crate::nn::EncoderArch;

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            input_hw: 16,
            in_channels: 1,
            widths: [4, 8, 8, 8],
        }
    }

    fn tiny_model(m: usize) -> EnsembleModel {
        let specs: Vec<MemberSpec> = (0..m)
            .map(|k| MemberSpec {
                arch: tiny_arch(),
                init_seed: 50 + k as u64,
            })
            .collect();
        build_ensemble(&specs, NormPolicy::group(4), 2).unwrap()
    }

    fn random_core(seed: u64, n: usize) -> CoreBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = Array4::from_shape_fn((n, 1, 16, 16), |_| rng.random_range(-1.0..1.0f32));
        CoreBatch::new(format!("core-{seed}"), patches).unwrap()
    }

    fn cfg(lr: f64, steps: usize) -> AdaptationConfig {
        AdaptationConfig::new(lr, steps, 0.1, ParamScope::All).unwrap()
    }

    #[test]
    fn zero_steps_is_identity_on_predictions() {
        let mut model = tiny_model(2);
        let core = random_core(1, 4);
        let baseline = model.forward_marginal(&core.patches).unwrap();
        let out = adapt_core_denem(&mut model, &core, &cfg(1e-2, 0)).unwrap();
        assert_eq!(out.objective_trace.len(), 1);
        assert!(out.restored);
        for (a, b) in out.patch_probs.iter().zip(baseline.iter()) {
            assert_eq!(a, b, "S=0 must reproduce un-adapted predictions");
        }
    }

    #[test]
    fn vanishing_lr_is_identity_within_tolerance() {
        let mut model = tiny_model(2);
        let core = random_core(2, 4);
        let baseline = model.forward_marginal(&core.patches).unwrap();
        let out = adapt_core_denem(&mut model, &core, &cfg(1e-30, 5)).unwrap();
        assert_eq!(out.objective_trace.len(), 6);
        for (a, b) in out.patch_probs.iter().zip(baseline.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn episodic_isolation_across_cores() {
        let mut model = tiny_model(2);
        let core_a = random_core(3, 4);
        let core_b = random_core(4, 5);
        let params_before: Vec<Vec<f32>> = (0..2)
            .map(|m| model.member_params(m).params.clone())
            .collect();

        // B alone.
        let only_b = adapt_core_denem(&mut model, &core_b, &cfg(1e-2, 3)).unwrap();
        // A then B.
        let _ = adapt_core_denem(&mut model, &core_a, &cfg(1e-2, 3)).unwrap();
        let after_a_then_b = adapt_core_denem(&mut model, &core_b, &cfg(1e-2, 3)).unwrap();

        for m in 0..2 {
            assert_eq!(
                params_before[m], model.member_params(m).params,
                "episode must restore parameters bitwise"
            );
        }
        for (x, y) in only_b
            .patch_probs
            .iter()
            .zip(after_a_then_b.patch_probs.iter())
        {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn trace_starts_at_unstepped_objective() {
        let mut model = tiny_model(2);
        let core = random_core(5, 4);
        let lambda = DiversificationWeight::new(0.1).unwrap();
        let probs = member_probs(&model, &core.patches).unwrap();
        let initial = adaptation_loss(&probs, lambda).unwrap().value();
        let out = adapt_core_denem(&mut model, &core, &cfg(1e-3, 4)).unwrap();
        assert_eq!(out.objective_trace.len(), 5);
        assert!((out.objective_trace[0] - initial).abs() < 1e-9);
    }

    #[test]
    fn denem_rejects_single_member() {
        let mut model = tiny_model(1);
        let core = random_core(6, 3);
        assert!(adapt_core_denem(&mut model, &core, &cfg(1e-2, 1)).is_err());
    }

    #[test]
    fn tent_scope_leaves_non_norm_params_untouched() {
        let mut model = tiny_model(1);
        let core = random_core(7, 4);
        let tent_cfg = AdaptationConfig::new(1e-2, 3, 0.0, ParamScope::NormAffineOnly).unwrap();
        let mask = model.norm_affine_mask();
        let before = model.member_params(0).params.clone();
        // Drive the in-place machinery directly so parameters can be
        // inspected before restore.
        let mut step_fn = |m: &mut EnsembleModel| -> Result<(f64, Vec<GradBuf>)> {
            let (logits, cache) = m.member_forward_train(0, &core.patches)?;
            let probs = vec![ProbBatch::from_normalized(logits_to_probs(&logits))];
            let (value, dprobs) = mean_prediction_entropy_grads(&probs)?;
            let dlogits = prob_grad_to_logit_grad(probs[0].rows(), &dprobs[0]).mapv(|v| v as Elem);
            let mut g = vec![0.0 as Elem; m.param_len()];
            m.member_backward(0, &cache, &dlogits, &mut g);
            Ok((value.value(), vec![g]))
        };
        let (_, aborted) = adapt_in_place(&mut model, &tent_cfg, &mut step_fn).unwrap();
        assert!(!aborted);
        let after = &model.member_params(0).params;
        let mut norm_changed = false;
        for i in 0..before.len() {
            if mask[i] {
                norm_changed |= before[i] != after[i];
            } else {
                assert_eq!(
                    before[i].to_bits(),
                    after[i].to_bits(),
                    "non-norm parameter {i} moved under norm_affine_only scope"
                );
            }
        }
        assert!(norm_changed, "some norm affine parameter should move");
    }

    #[test]
    fn tent_zero_steps_identity() {
        let mut model = tiny_model(1);
        let core = random_core(8, 3);
        let baseline = model.forward_marginal(&core.patches).unwrap();
        let tent_cfg = AdaptationConfig::new(1e-2, 0, 0.0, ParamScope::NormAffineOnly).unwrap();
        let out = adapt_core_tent(&mut model, &core, &tent_cfg).unwrap();
        assert_eq!(out.objective_trace.len(), 1);
        for (a, b) in out.patch_probs.iter().zip(baseline.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn memo_empty_augmentations_errors() {
        let mut model = tiny_model(1);
        let core = random_core(9, 3);
        assert!(adapt_core_memo(&mut model, &core, &[], &cfg(1e-2, 1)).is_err());
    }

    #[test]
    fn memo_identity_augmentation_matches_tent_objective() {
        let mut model = tiny_model(1);
        let core = random_core(10, 4);
        let memo_cfg = AdaptationConfig::new(1e-2, 0, 0.0, ParamScope::All).unwrap();
        let out = adapt_core_memo(
            &mut model,
            &core,
            &[Augmentation::Identity],
            &memo_cfg,
        )
        .unwrap();
        let probs = member_probs(&model, &core.patches).unwrap();
        let tent_obj = mean_prediction_entropy(&probs).unwrap().value();
        assert!((out.objective_trace[0] - tent_obj).abs() < 1e-9);
    }

    #[test]
    fn memo_two_flips_one_step_trace_bookkeeping() {
        let mut model = tiny_model(1);
        let core = random_core(11, 4);
        let memo_cfg = AdaptationConfig::new(1e-3, 1, 0.0, ParamScope::All).unwrap();
        let out = adapt_core_memo(
            &mut model,
            &core,
            &[Augmentation::HorizontalFlip, Augmentation::VerticalFlip],
            &memo_cfg,
        )
        .unwrap();
        assert_eq!(out.objective_trace.len(), 2);
        assert!(out.restored);
        assert!(!out.aborted);
    }

    #[test]
    fn unknown_augmentation_name_rejected() {
        assert!(parse_augmentations(&["zoom".to_string()]).is_err());
        let ok = parse_augmentations(&["hflip".into(), "crop".into()]).unwrap();
        assert_eq!(ok, vec![Augmentation::HorizontalFlip, Augmentation::Crop]);
    }

    #[test]
    fn predict_core_mean_and_permutation_invariance() {
        let model = tiny_model(2);
        let core = random_core(12, 5);
        let score = predict_core(&model, &core).unwrap();
        let probs = model.forward_marginal(&core.patches).unwrap();
        let mean = probs.column(1).sum() / 5.0;
        assert!((score - mean).abs() < 1e-12);

        // Permute patches.
        let mut idx: Vec<usize> = (0..5).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let permuted = Array4::from_shape_fn(core.patches.dim(), |(n, c, i, j)| {
            core.patches[(idx[n], c, i, j)]
        });
        let core_p = CoreBatch::new("perm", permuted).unwrap();
        let score_p = predict_core(&model, &core_p).unwrap();
        assert!((score - score_p).abs() < 1e-9);
    }

    #[test]
    fn single_patch_core_scores_that_patch() {
        let model = tiny_model(2);
        let core = random_core(13, 1);
        let score = predict_core(&model, &core).unwrap();
        let probs = model.forward_marginal(&core.patches).unwrap();
        assert!((score - probs[(0, 1)]).abs() < 1e-12);
    }
}
