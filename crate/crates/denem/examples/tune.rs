//! Scratch driver for sizing the directional benchmark: dataset statistics,
//! per-fold timings, variant margins, and adaptation hyperparameter sweeps.
//! Not part of the test suite.

use std::time::Instant;

use denem::adaptation::{adapt_core_denem, AdaptationConfig, OptimizerKind, ParamScope};
use denem::data::loco_split;
use denem::evaluation::{auroc, CorePrediction};
use denem::harness::bench::{
    generate_benchmark_dataset, run_directional_benchmark, BenchmarkConfig,
};
use denem::harness::{core_batch, core_predictions, train_fold, TrainSettings};
use denem::util::derive_seed;

/// Noise-dominant center roster: speckle spread wide, texture confound mild.
fn roster_v2() -> Vec<denem::data::CenterShiftParams> {
    let mut centers = denem::data::default_centers();
    let speckle = [0.30, 0.70, 0.18, 0.55, 0.40];
    let texture = [1.00, 1.06, 0.95, 1.03, 0.90];
    for (i, c) in centers.iter_mut().enumerate() {
        c.speckle_scale = speckle[i];
        c.texture_frequency = texture[i];
    }
    centers
}

fn dataset_stats(cfg: &BenchmarkConfig, seed: u64) {
    let cores = generate_benchmark_dataset(cfg, seed).unwrap();
    let counts: Vec<usize> = cores.iter().map(|c| c.num_patches()).collect();
    let total: usize = counts.iter().sum();
    let cancers = cores.iter().filter(|c| c.label.is_cancer()).count();
    println!(
        "seed {seed}: {} cores ({} cancer), {total} patches, per-core min/mean/max = {}/{:.1}/{}",
        cores.len(),
        cancers,
        counts.iter().min().unwrap(),
        total as f64 / cores.len() as f64,
        counts.iter().max().unwrap()
    );
}

fn settings(cfg: &BenchmarkConfig, seed: u64, fold_idx: usize, lambda: f64, track: bool) -> TrainSettings {
    TrainSettings {
        arch: cfg.arch,
        norm: cfg.norm,
        members: cfg.members,
        lambda,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        warmup_frac: cfg.warmup_frac,
        seed: derive_seed(seed, "train", fold_idx as u64),
        track_member_best: track,
    }
}

/// Train the MI ensemble once per fold, then grid over adaptation configs.
fn adapt_sweep(cfg: &BenchmarkConfig, seeds: &[u64]) {
    let grid_lr = [3e-3, 1e-2, 3e-2];
    let grid_steps = [5usize, 10];
    let grid_lambda = [0.0, 1.0, 10.0];
    // gains[config][sample] = denem_auroc - mi_auroc per fold.
    let mut gains: Vec<Vec<f64>> = vec![Vec::new(); grid_lr.len() * grid_steps.len() * grid_lambda.len()];
    let mut mi_scores = Vec::new();

    for &seed in seeds {
        let cores = generate_benchmark_dataset(cfg, seed).unwrap();
        let plan = loco_split(&cores, cfg.val_fraction, derive_seed(seed, "split", 0)).unwrap();
        for (fi, fold) in plan.folds.iter().enumerate() {
            let t0 = Instant::now();
            let mi = train_fold(&cores, fold, &settings(cfg, seed, fi, cfg.lambda_mi, false)).unwrap();
            let test_cores: Vec<&denem::data::BiopsyCore> = {
                let mut t: Vec<_> = cores.iter().filter(|c| c.center_id == fold.test_center).collect();
                t.sort_by(|a, b| a.core_id.cmp(&b.core_id));
                t
            };
            let mi_preds = core_predictions(&mi.model, &test_cores, None).unwrap();
            let mi_auroc = auroc(&mi_preds).unwrap();
            mi_scores.push(mi_auroc);
            let mut ci = 0;
            for lr in grid_lr {
                for steps in grid_steps {
                    for lam in grid_lambda {
                        let acfg = AdaptationConfig {
                            lr,
                            steps,
                            lambda_adapt: lam,
                            optimizer: OptimizerKind::Sgd,
                            param_scope: ParamScope::All,
                        };
                        let mut model = mi.model.clone();
                        let mut preds = Vec::new();
                        for core in &test_cores {
                            let batch = core_batch(core).unwrap();
                            let adapted = adapt_core_denem(&mut model, &batch, &acfg).unwrap();
                            preds.push(CorePrediction {
                                core_id: core.core_id.clone(),
                                score: adapted.patch_probs.column(1).mean().unwrap(),
                                label_cancer: core.label.is_cancer(),
                                involvement: core.involvement,
                                center_id: core.center_id.clone(),
                            });
                        }
                        gains[ci].push(auroc(&preds).unwrap() - mi_auroc);
                        ci += 1;
                    }
                }
            }
            eprintln!(
                "seed {seed} fold {fi}: mi {mi_auroc:.3} [{:.0}s]",
                t0.elapsed().as_secs_f64()
            );
        }
    }
    println!("\nmean mi auroc: {:.4}", mi_scores.iter().sum::<f64>() / mi_scores.len() as f64);
    let mut ci = 0;
    for lr in grid_lr {
        for steps in grid_steps {
            for lam in grid_lambda {
                let g = &gains[ci];
                let mean = g.iter().sum::<f64>() / g.len() as f64;
                let frac_pos = g.iter().filter(|&&x| x >= 0.0).count() as f64 / g.len() as f64;
                let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
                println!(
                    "lr {lr:>5}  S {steps}  lambda {lam:>3}: gain {:+.2}pt (min {:+.2}, >=0 in {:.0}%)",
                    100.0 * mean,
                    100.0 * min,
                    100.0 * frac_pos
                );
                ci += 1;
            }
        }
    }
}

/// Compare training-lambda values on the plain-vs-MI margin.
fn lambda_sweep(cfg: &BenchmarkConfig, seeds: &[u64]) {
    let lambdas = [0.1, 1.0, 10.0];
    for &seed in seeds {
        let cores = generate_benchmark_dataset(cfg, seed).unwrap();
        let plan = loco_split(&cores, cfg.val_fraction, derive_seed(seed, "split", 0)).unwrap();
        let mut ens_scores = Vec::new();
        let mut mi_scores = vec![Vec::new(); lambdas.len()];
        for (fi, fold) in plan.folds.iter().enumerate() {
            let test_cores: Vec<&denem::data::BiopsyCore> = {
                let mut t: Vec<_> = cores.iter().filter(|c| c.center_id == fold.test_center).collect();
                t.sort_by(|a, b| a.core_id.cmp(&b.core_id));
                t
            };
            let ce = train_fold(&cores, fold, &settings(cfg, seed, fi, 0.0, false)).unwrap();
            let preds = core_predictions(&ce.model, &test_cores, None).unwrap();
            ens_scores.push(auroc(&preds).unwrap());
            for (li, &lam) in lambdas.iter().enumerate() {
                let mi = train_fold(&cores, fold, &settings(cfg, seed, fi, lam, false)).unwrap();
                let preds = core_predictions(&mi.model, &test_cores, None).unwrap();
                mi_scores[li].push(auroc(&preds).unwrap());
            }
            eprintln!("seed {seed} fold {fi} done");
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!("seed {seed}: ensemble {:.4}", mean(&ens_scores));
        for (li, &lam) in lambdas.iter().enumerate() {
            println!(
                "  lambda {lam:>4}: mi {:.4} (gain {:+.2}pt)",
                mean(&mi_scores[li]),
                100.0 * (mean(&mi_scores[li]) - mean(&ens_scores))
            );
        }
    }
}

/// Per-core score movement under adaptation, one seed.
fn adapt_diag(cfg: &BenchmarkConfig, seed: u64, folds: &[usize]) {
    let cores = generate_benchmark_dataset(cfg, seed).unwrap();
    let plan = loco_split(&cores, cfg.val_fraction, derive_seed(seed, "split", 0)).unwrap();
    for &fi in folds {
        let fold = &plan.folds[fi];
        let mi = train_fold(&cores, fold, &settings(cfg, seed, fi, cfg.lambda_mi, false)).unwrap();
        let test_cores: Vec<&denem::data::BiopsyCore> = {
            let mut t: Vec<_> = cores.iter().filter(|c| c.center_id == fold.test_center).collect();
            t.sort_by(|a, b| a.core_id.cmp(&b.core_id));
            t
        };
        let before = core_predictions(&mi.model, &test_cores, None).unwrap();
        let acfg = cfg.adapt;
        let mut model = mi.model.clone();
        println!("fold {fi} ({})  lr {} S {} lambda {}", fold.test_center, acfg.lr, acfg.steps, acfg.lambda_adapt);
        let mut after = Vec::new();
        for core in &test_cores {
            let batch = core_batch(core).unwrap();
            let adapted = adapt_core_denem(&mut model, &batch, &acfg).unwrap();
            after.push(adapted.patch_probs.column(1).mean().unwrap());
        }
        for ((b, core), a) in before.iter().zip(&test_cores).zip(&after) {
            println!(
                "  {}  label {}  inv {:.2}  {:.3} -> {:.3}  ({:+.3})",
                core.core_id,
                core.label.as_u8(),
                core.involvement,
                b.score,
                a,
                a - b.score
            );
        }
        let a_before = auroc(&before).unwrap();
        let preds_after: Vec<CorePrediction> = before
            .iter()
            .zip(&after)
            .map(|(p, &s)| CorePrediction { score: s, ..p.clone() })
            .collect();
        println!("  AUROC {:.4} -> {:.4}", a_before, auroc(&preds_after).unwrap());
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("stats");
    let cfg = BenchmarkConfig::desk_default();

    match mode {
        "stats" => {
            for seed in 0..3 {
                dataset_stats(&cfg, seed);
            }
        }
        "one" => {
            let res = run_directional_benchmark(&cfg, &[0], true).unwrap();
            println!("{:#?}", res.mean);
            println!("wall: {:.1}s", res.wall_s);
        }
        "full" => {
            let res = run_directional_benchmark(&cfg, &[0, 1, 2, 3, 4], true).unwrap();
            println!("mean: {:#?}", res.mean);
            println!(
                "margins: (a) ens-single {:.2}pt  (b) mi-ens {:.2}pt  (c) denem-mi {:.2}pt  total {:.2}pt",
                100.0 * (res.mean.ensemble - res.mean.single),
                100.0 * (res.mean.ensemble_mi - res.mean.ensemble),
                100.0 * (res.mean.denem - res.mean.ensemble_mi),
                100.0 * (res.mean.denem - res.mean.single),
            );
            println!("wall: {:.1}s", res.wall_s);
        }
        "adapt_sweep" => adapt_sweep(&cfg, &[0, 1]),
        "b1" => {
            let mut c = cfg.clone();
            c.centers = roster_v2();
            c.cancer_rate = 0.5;
            c.lambda_mi = 1.0;
            adapt_sweep(&c, &[0]);
        }
        "b2" => {
            let mut c = cfg.clone();
            c.centers = roster_v2();
            c.cancer_rate = 0.5;
            c.lambda_mi = 10.0;
            adapt_sweep(&c, &[0]);
        }
        "adapt_diag" => adapt_diag(&cfg, 0, &[1, 2]),
        "lambda_sweep" => lambda_sweep(&cfg, &[0]),
        other => eprintln!("unknown mode {other}"),
    }
}
