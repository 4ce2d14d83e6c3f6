//! Seeded directional benchmark: trains the component-ablation variants on
//! the synthetic multi-center LOCO setup and reports per-variant AUROC-All
//! and calibration, averaged over folds per seed.
//!
//! The single-model baseline reuses the plain-ensemble members: with
//! `lambda == 0` the members train independently on identical batch
//! sequences, so member `m` evaluated alone (at its own best-validation
//! epoch) is exactly the single network trained from seed `m`. The reported
//! single-model score is the member average.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::core_batch;
use super::train::{core_predictions, train_fold, TrainSettings};
use crate::adaptation::{adapt_core_denem, AdaptationConfig};
use crate::data::{loco_split, synthesize_center, BiopsyCore, CenterShiftParams, SynthGeometry};
use crate::ensemble::NormPolicy;
use crate::error::Result;
use crate::evaluation::{auroc, ece, CorePrediction};
use crate::nn::EncoderArch;
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub geometry: SynthGeometry,
    pub centers: Vec<CenterShiftParams>,
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub cancer_rate: f64,
    pub val_fraction: f64,
    pub arch: EncoderArch,
    pub norm: NormPolicy,
    pub members: usize,
    pub lambda_mi: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub adapt: AdaptationConfig,
}

impl BenchmarkConfig {
    /// Desk-scale defaults used by the acceptance suite.
    pub fn desk_default() -> Self {
        BenchmarkConfig {
            geometry: SynthGeometry::desk(),
            centers: crate::data::default_centers(),
            n_patients: 20,
            cores_per_patient: 2,
            cancer_rate: 0.35,
            val_fraction: 0.25,
            arch: EncoderArch::desk(),
            norm: NormPolicy::group(8),
            members: 5,
            lambda_mi: 1.0,
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            adapt: AdaptationConfig {
                lr: 1e-2,
                steps: 5,
                lambda_adapt: 1.0,
                optimizer: crate::adaptation::OptimizerKind::Sgd,
                param_scope: crate::adaptation::ParamScope::All,
            },
        }
    }
}

/// Fold-averaged AUROC-All per variant plus pooled calibration, one seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedScores {
    pub single: f64,
    pub ensemble: f64,
    pub ensemble_mi: f64,
    pub denem: f64,
    pub ensemble_ece: f64,
    pub member_ece_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub per_seed: Vec<SeedScores>,
    pub mean: SeedScores,
    pub wall_s: f64,
}

pub fn generate_benchmark_dataset(cfg: &BenchmarkConfig, seed: u64) -> Result<Vec<BiopsyCore>> {
    let mut cores = Vec::new();
    for params in &cfg.centers {
        cores.extend(synthesize_center(
            params,
            &cfg.geometry,
            cfg.n_patients,
            cfg.cores_per_patient,
            cfg.cancer_rate,
            derive_seed(seed, &params.center_id, 0),
        )?);
    }
    Ok(cores)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn run_seed(cfg: &BenchmarkConfig, seed: u64, verbose: bool) -> Result<SeedScores> {
    let cores = generate_benchmark_dataset(cfg, seed)?;
    let plan = loco_split(&cores, cfg.val_fraction, derive_seed(seed, "split", 0))?;
    plan.verify(&cores)?;

    let mut single_fold_aurocs: Vec<f64> = Vec::new();
    let mut ensemble_fold_aurocs: Vec<f64> = Vec::new();
    let mut mi_fold_aurocs: Vec<f64> = Vec::new();
    let mut denem_fold_aurocs: Vec<f64> = Vec::new();
    let mut pooled_ensemble: Vec<CorePrediction> = Vec::new();
    let mut pooled_members: Vec<Vec<CorePrediction>> = vec![Vec::new(); cfg.members];

    for (fi, fold) in plan.folds.iter().enumerate() {
        let t0 = Instant::now();
        let base_settings = TrainSettings {
            arch: cfg.arch,
            norm: cfg.norm,
            members: cfg.members,
            lambda: 0.0,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            warmup_frac: cfg.warmup_frac,
            seed: derive_seed(seed, "train", fi as u64),
            track_member_best: true,
        };
        let ce = train_fold(&cores, fold, &base_settings)?;
        let mi_settings = TrainSettings {
            lambda: cfg.lambda_mi,
            track_member_best: false,
            ..base_settings.clone()
        };
        let mi = train_fold(&cores, fold, &mi_settings)?;

        let test_cores: Vec<&BiopsyCore> = {
            let mut t: Vec<&BiopsyCore> = cores
                .iter()
                .filter(|c| c.center_id == fold.test_center)
                .collect();
            t.sort_by(|a, b| a.core_id.cmp(&b.core_id));
            t
        };

        // Plain ensemble (marginal over members at the ensemble's best epoch).
        let ens_preds = core_predictions(&ce.model, &test_cores, None)?;
        ensemble_fold_aurocs.push(auroc(&ens_preds)?);
        pooled_ensemble.extend(ens_preds);

        // Single models: each member at its own best epoch.
        let mut single_model = ce.model.clone();
        for (m, best) in ce.member_best.as_ref().expect("tracked").iter().enumerate() {
            *single_model.member_params_mut(m) = best.clone();
        }
        let mut member_aurocs = Vec::with_capacity(cfg.members);
        for m in 0..cfg.members {
            let preds = core_predictions(&single_model, &test_cores, Some(m))?;
            member_aurocs.push(auroc(&preds)?);
            pooled_members[m].extend(preds);
        }
        single_fold_aurocs.push(mean(&member_aurocs));

        // Diversified ensemble without and with adaptation.
        let mi_preds = core_predictions(&mi.model, &test_cores, None)?;
        mi_fold_aurocs.push(auroc(&mi_preds)?);

        let mut adapted_model = mi.model.clone();
        let mut denem_preds = Vec::with_capacity(test_cores.len());
        for core in &test_cores {
            let batch = core_batch(core)?;
            let adapted = adapt_core_denem(&mut adapted_model, &batch, &cfg.adapt)?;
            let score = adapted.patch_probs.column(1).mean().expect("non-empty");
            denem_preds.push(CorePrediction {
                core_id: core.core_id.clone(),
                score,
                label_cancer: core.label.is_cancer(),
                involvement: core.involvement,
                center_id: core.center_id.clone(),
            });
        }
        denem_fold_aurocs.push(auroc(&denem_preds)?);

        if verbose {
            eprintln!(
                "  seed {seed} fold {} ({}): single {:.3} ens {:.3} mi {:.3} denem {:.3} [{:.1}s]",
                fi,
                fold.test_center,
                single_fold_aurocs.last().unwrap(),
                ensemble_fold_aurocs.last().unwrap(),
                mi_fold_aurocs.last().unwrap(),
                denem_fold_aurocs.last().unwrap(),
                t0.elapsed().as_secs_f64()
            );
        }
    }

    let ensemble_ece = ece(&pooled_ensemble, 10)?.ece;
    let member_eces: Vec<f64> = pooled_members
        .iter()
        .map(|p| ece(p, 10).map(|r| r.ece))
        .collect::<Result<_>>()?;

    Ok(SeedScores {
        single: mean(&single_fold_aurocs),
        ensemble: mean(&ensemble_fold_aurocs),
        ensemble_mi: mean(&mi_fold_aurocs),
        denem: mean(&denem_fold_aurocs),
        ensemble_ece,
        member_ece_mean: mean(&member_eces),
    })
}

/// Run the full grid over `seeds` and average.
pub fn run_directional_benchmark(
    cfg: &BenchmarkConfig,
    seeds: &[u64],
    verbose: bool,
) -> Result<BenchmarkResult> {
    let start = Instant::now();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let scores = run_seed(cfg, seed, verbose)?;
        if verbose {
            eprintln!(
                "seed {seed}: single {:.4} ensemble {:.4} mi {:.4} denem {:.4} ece {:.4}/{:.4}",
                scores.single,
                scores.ensemble,
                scores.ensemble_mi,
                scores.denem,
                scores.ensemble_ece,
                scores.member_ece_mean
            );
        }
        per_seed.push(scores);
    }
    let mean_scores = SeedScores {
        single: mean(&per_seed.iter().map(|s| s.single).collect::<Vec<_>>()),
        ensemble: mean(&per_seed.iter().map(|s| s.ensemble).collect::<Vec<_>>()),
        ensemble_mi: mean(&per_seed.iter().map(|s| s.ensemble_mi).collect::<Vec<_>>()),
        denem: mean(&per_seed.iter().map(|s| s.denem).collect::<Vec<_>>()),
        ensemble_ece: mean(&per_seed.iter().map(|s| s.ensemble_ece).collect::<Vec<_>>()),
        member_ece_mean: mean(&per_seed.iter().map(|s| s.member_ece_mean).collect::<Vec<_>>()),
    };
    Ok(BenchmarkResult {
        per_seed,
        mean: mean_scores,
        wall_s: start.elapsed().as_secs_f64(),
    })
}
