//! Python bindings: loss functions, core-level metrics, ensemble
//! construction/adaptation, and synthetic dataset generation.

use ndarray::{Array1, Axis};
use numpy::{IntoPyArray, PyArray2, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use denem::adaptation::{
    adapt_core_denem, adapt_core_memo, adapt_core_tent, parse_augmentations, AdaptationConfig,
    CoreBatch, OptimizerKind, ParamScope,
};
use denem::data::default_centers;
use denem::ensemble::{build_ensemble, load_checkpoint, save_checkpoint, MemberSpec, NormPolicy};
use denem::evaluation::{self, CorePrediction};
use denem::harness::{cmd_synth, ExperimentConfig};
use denem::nn::{EncoderArch, NormKind};
use denem::objectives::{self, DiversificationWeight, ProbBatch, ProbVector};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn prob_batch(a: &PyReadonlyArray2<'_, f64>) -> PyResult<ProbBatch> {
    ProbBatch::new(a.as_array().to_owned()).map_err(err)
}

fn prob_batches(list: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<Vec<ProbBatch>> {
    list.iter().map(prob_batch).collect()
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Shannon entropy of one probability vector, in nats.
#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    let v = ProbVector::new(Array1::from_vec(p)).map_err(err)?;
    Ok(objectives::entropy(&v).map_err(err)?.value())
}

/// Batch-mean entropy of the member-averaged distribution.
#[pyfunction]
fn marginal_entropy_loss(members: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    let b = prob_batches(members)?;
    Ok(objectives::marginal_entropy_loss(&b).map_err(err)?.value())
}

/// KL divergence between the empirical joint of two members' predictions and
/// the product of their marginals.
#[pyfunction]
fn pairwise_mi_loss(
    pa: PyReadonlyArray2<'_, f64>,
    pb: PyReadonlyArray2<'_, f64>,
) -> PyResult<f64> {
    let a = prob_batch(&pa)?;
    let b = prob_batch(&pb)?;
    Ok(objectives::pairwise_mi_loss(&a, &b).map_err(err)?.value())
}

/// Sum of pairwise MI over ordered member pairs.
#[pyfunction]
fn mutual_information_total(members: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    let b = prob_batches(members)?;
    Ok(objectives::mutual_information_total(&b).map_err(err)?.value())
}

/// Training objective: member-summed cross-entropy plus weighted MI total.
#[pyfunction]
fn training_loss(
    members: Vec<PyReadonlyArray2<'_, f64>>,
    labels: Vec<usize>,
    lambda: f64,
) -> PyResult<f64> {
    let b = prob_batches(members)?;
    let w = DiversificationWeight::new(lambda).map_err(err)?;
    Ok(objectives::training_loss(&b, &labels, w).map_err(err)?.value())
}

/// Adaptation objective: marginal entropy plus weighted MI total.
#[pyfunction]
fn adaptation_loss(members: Vec<PyReadonlyArray2<'_, f64>>, lambda: f64) -> PyResult<f64> {
    let b = prob_batches(members)?;
    let w = DiversificationWeight::new(lambda).map_err(err)?;
    Ok(objectives::adaptation_loss(&b, w).map_err(err)?.value())
}

/// Entropy of the across-augmentation average prediction.
#[pyfunction]
fn memo_marginal_entropy(augmented: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    let b = prob_batches(augmented)?;
    Ok(objectives::memo_marginal_entropy(&b).map_err(err)?.value())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn preds_from(scores: &[f64], labels: &[u8]) -> PyResult<Vec<CorePrediction>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores
        .iter()
        .zip(labels.iter())
        .enumerate()
        .map(|(i, (&s, &l))| CorePrediction {
            core_id: format!("core{i}"),
            score: s,
            label_cancer: l != 0,
            involvement: if l != 0 { 1.0 } else { 0.0 },
            center_id: "py".into(),
        })
        .collect())
}

/// Tie-aware AUROC (probability a random positive outranks a random
/// negative).
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluation::auroc(&preds_from(&scores, &labels)?).map_err(err)
}

/// (sensitivity + specificity) / 2 at the given threshold.
#[pyfunction]
fn balanced_accuracy(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    evaluation::balanced_accuracy(&preds_from(&scores, &labels)?, threshold).map_err(err)
}

/// Expected calibration error over equal-width confidence bins.
#[pyfunction]
#[pyo3(signature = (scores, labels, n_bins = 10))]
fn ece(scores: Vec<f64>, labels: Vec<u8>, n_bins: usize) -> PyResult<f64> {
    Ok(evaluation::ece(&preds_from(&scores, &labels)?, n_bins)
        .map_err(err)?
        .ece)
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

/// M-member deep ensemble with episodic test-time adaptation.
#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    inner: denem::ensemble::EnsembleModel,
}

fn patches_to_batch(patches: &PyReadonlyArray3<'_, f32>) -> PyResult<CoreBatch> {
    let arr = patches.as_array().to_owned();
    CoreBatch::new("py-core", arr.insert_axis(Axis(1))).map_err(err)
}

fn adapt_cfg(lr: f64, steps: usize, lambda: f64, scope: &str) -> PyResult<AdaptationConfig> {
    let scope = match scope {
        "all" => ParamScope::All,
        "norm_affine_only" => ParamScope::NormAffineOnly,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown param scope '{other}'"
            )))
        }
    };
    Ok(AdaptationConfig {
        lr,
        steps,
        lambda_adapt: lambda,
        optimizer: OptimizerKind::Sgd,
        param_scope: scope,
    })
}

#[pymethods]
impl PyEnsemble {
    /// Build an ensemble of `members` networks with distinct seeds.
    #[new]
    #[pyo3(signature = (members = 5, input_hw = 64, widths = [8, 16, 32, 64], seed = 0, norm = "group", num_groups = 8, num_classes = 2))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        members: usize,
        input_hw: usize,
        widths: [usize; 4],
        seed: u64,
        norm: &str,
        num_groups: usize,
        num_classes: usize,
    ) -> PyResult<Self> {
        let arch = EncoderArch {
            input_hw,
            in_channels: 1,
            widths,
        };
        let kind = match norm {
            "group" => NormKind::Group,
            "batch" => NormKind::Batch,
            other => return Err(PyValueError::new_err(format!("unknown norm '{other}'"))),
        };
        let specs: Vec<MemberSpec> = (0..members)
            .map(|m| MemberSpec {
                arch,
                init_seed: denem::util::derive_seed(seed, "member", m as u64),
            })
            .collect();
        let inner = build_ensemble(
            &specs,
            NormPolicy {
                kind,
                num_groups,
            },
            num_classes,
        )
        .map_err(err)?;
        Ok(PyEnsemble { inner })
    }

    #[getter]
    fn member_count(&self) -> usize {
        self.inner.member_count()
    }

    #[getter]
    fn param_len(&self) -> usize {
        self.inner.param_len()
    }

    /// Member-averaged probabilities for a stack of patches `(n, H, W)`.
    fn forward_marginal<'py>(
        &self,
        py: Python<'py>,
        patches: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let batch = patches_to_batch(&patches)?;
        let probs = self.inner.forward_marginal(&batch.patches).map_err(err)?;
        Ok(probs.into_pyarray(py))
    }

    /// One member's probabilities for a stack of patches.
    fn forward_member<'py>(
        &self,
        py: Python<'py>,
        member: usize,
        patches: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let batch = patches_to_batch(&patches)?;
        let (probs, _) = self.inner.forward_member(member, &batch.patches).map_err(err)?;
        Ok(probs.into_pyarray(py))
    }

    /// Core-level score: mean marginal cancer probability over patches.
    fn predict_core(&self, patches: PyReadonlyArray3<'_, f32>) -> PyResult<f64> {
        let batch = patches_to_batch(&patches)?;
        denem::adaptation::predict_core(&self.inner, &batch).map_err(err)
    }

    /// Episodic diversified marginal-entropy adaptation on one core.
    /// Returns `(patch_probs, objective_trace, aborted)`; parameters are
    /// restored before returning.
    #[pyo3(signature = (patches, lr = 1e-2, steps = 5, lambda_adapt = 1.0))]
    fn adapt_denem<'py>(
        &mut self,
        py: Python<'py>,
        patches: PyReadonlyArray3<'py, f32>,
        lr: f64,
        steps: usize,
        lambda_adapt: f64,
    ) -> PyResult<(Bound<'py, PyArray2<f64>>, Vec<f64>, bool)> {
        let batch = patches_to_batch(&patches)?;
        let cfg = adapt_cfg(lr, steps, lambda_adapt, "all")?;
        let out = adapt_core_denem(&mut self.inner, &batch, &cfg).map_err(err)?;
        Ok((
            out.patch_probs.into_pyarray(py),
            out.objective_trace,
            out.aborted,
        ))
    }

    /// Episodic entropy-minimization adaptation (normalization affine
    /// parameters only by default).
    #[pyo3(signature = (patches, lr = 1e-2, steps = 5, scope = "norm_affine_only"))]
    fn adapt_tent<'py>(
        &mut self,
        py: Python<'py>,
        patches: PyReadonlyArray3<'py, f32>,
        lr: f64,
        steps: usize,
        scope: &str,
    ) -> PyResult<(Bound<'py, PyArray2<f64>>, Vec<f64>, bool)> {
        let batch = patches_to_batch(&patches)?;
        let cfg = adapt_cfg(lr, steps, 0.0, scope)?;
        let out = adapt_core_tent(&mut self.inner, &batch, &cfg).map_err(err)?;
        Ok((
            out.patch_probs.into_pyarray(py),
            out.objective_trace,
            out.aborted,
        ))
    }

    /// Episodic augmentation-marginal entropy adaptation.
    #[pyo3(signature = (patches, augmentations, lr = 1e-2, steps = 5))]
    fn adapt_memo<'py>(
        &mut self,
        py: Python<'py>,
        patches: PyReadonlyArray3<'py, f32>,
        augmentations: Vec<String>,
        lr: f64,
        steps: usize,
    ) -> PyResult<(Bound<'py, PyArray2<f64>>, Vec<f64>, bool)> {
        let batch = patches_to_batch(&patches)?;
        let augs = parse_augmentations(&augmentations).map_err(err)?;
        let cfg = adapt_cfg(lr, steps, 0.0, "all")?;
        let out = adapt_core_memo(&mut self.inner, &batch, &augs, &cfg).map_err(err)?;
        Ok((
            out.patch_probs.into_pyarray(py),
            out.objective_trace,
            out.aborted,
        ))
    }

    /// Write a checkpoint directory (one archive per member plus manifest).
    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, std::path::Path::new(path), None).map_err(err)
    }

    /// Load a checkpoint directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        Ok(PyEnsemble { inner })
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Generate the default five-center synthetic dataset under `path`.
/// Returns the number of cores written.
#[pyfunction]
#[pyo3(signature = (path, seed = 0, desk_scale = true, n_patients = 20, cores_per_patient = 2, cancer_rate = 0.35))]
fn synth_dataset(
    path: &str,
    seed: u64,
    desk_scale: bool,
    n_patients: usize,
    cores_per_patient: usize,
    cancer_rate: f64,
) -> PyResult<usize> {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.desk_scale = desk_scale;
    cfg.dataset = std::path::PathBuf::from(path);
    cfg.data.n_patients = n_patients;
    cfg.data.cores_per_patient = cores_per_patient;
    cfg.data.cancer_rate = cancer_rate;
    let out = cmd_synth(&cfg).map_err(err)?;
    Ok(out.n_cores)
}

/// Names of the built-in center roster.
#[pyfunction]
fn center_ids() -> Vec<String> {
    default_centers().into_iter().map(|c| c.center_id).collect()
}

/// Load a dataset's patches grouped per core:
/// returns a list of `(core_id, center_id, label, involvement, n_patches)`.
#[pyfunction]
fn dataset_summary(path: &str) -> PyResult<Vec<(String, String, u8, f64, usize)>> {
    let cores = denem::data::load_dataset(std::path::Path::new(path)).map_err(err)?;
    Ok(cores
        .into_iter()
        .map(|c| {
            (
                c.core_id,
                c.center_id,
                c.label.as_u8(),
                c.involvement,
                c.patches.dim().0,
            )
        })
        .collect())
}

#[pymodule]
fn denem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_entropy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_mi_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information_total, m)?)?;
    m.add_function(wrap_pyfunction!(training_loss, m)?)?;
    m.add_function(wrap_pyfunction!(adaptation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(memo_marginal_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(center_ids, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_summary, m)?)?;
    m.add_class::<PyEnsemble>()?;
    Ok(())
}
