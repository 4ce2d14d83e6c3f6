//! Deep ensembles: M identically shaped encoder+classifier members with
//! independently seeded parameters, a batch/group norm policy, exact
//! parameter snapshot/restore, and checkpoint I/O.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    logits_to_probs, Elem, EncoderArch, GradBuf, MemberCache, MemberLayout, NormKind, ParamSet,
};
use crate::objectives::{marginal_probability, ProbBatch};

/// Which normalization layers the encoder carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormPolicy {
    pub kind: NormKind,
    pub num_groups: usize,
}

impl NormPolicy {
    pub fn group(num_groups: usize) -> Self {
        NormPolicy {
            kind: NormKind::Group,
            num_groups,
        }
    }

    pub fn batch() -> Self {
        NormPolicy {
            kind: NormKind::Batch,
            num_groups: 1,
        }
    }
}

impl Default for NormPolicy {
    fn default() -> Self {
        NormPolicy::group(8)
    }
}

/// One member's blueprint: encoder architecture plus its init seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemberSpec {
    pub arch: EncoderArch,
    pub init_seed: u64,
}

/// Record of a batch-to-group (or reverse) norm substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSubstitution {
    pub layers_replaced: usize,
    pub trainable_params: usize,
    pub running_stats_before: usize,
    pub running_stats_after: usize,
}

/// Complete copy of all member parameters and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    members: Vec<ParamSet>,
}

pub struct EnsembleModel {
    layout: MemberLayout,
    members: Vec<ParamSet>,
    seeds: Vec<u64>,
    norm_policy: NormPolicy,
    num_classes: usize,
    substitution: Option<NormSubstitution>,
}

impl Clone for EnsembleModel {
    fn clone(&self) -> Self {
        EnsembleModel {
            layout: MemberLayout::new(
                self.layout.arch,
                self.num_classes,
                self.norm_policy.kind,
                self.norm_policy.num_groups,
            )
            .expect("existing layout is valid"),
            members: self.members.clone(),
            seeds: self.seeds.clone(),
            norm_policy: self.norm_policy,
            num_classes: self.num_classes,
            substitution: self.substitution,
        }
    }
}

/// Build an ensemble of `|specs|` members with distinct init seeds. A single
/// member is a valid model; diversified training rejects it downstream.
pub fn build_ensemble(
    specs: &[MemberSpec],
    norm: NormPolicy,
    num_classes: usize,
) -> Result<EnsembleModel> {
    if specs.is_empty() {
        return Err(Error::validation("ensemble needs at least one member"));
    }
    let arch = specs[0].arch;
    for s in specs {
        if s.arch != arch {
            return Err(Error::validation(
                "all ensemble members must share one architecture",
            ));
        }
    }
    let mut seeds: Vec<u64> = specs.iter().map(|s| s.init_seed).collect();
    {
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::validation("member init seeds must be distinct"));
        }
    }
    let layout = MemberLayout::new(arch, num_classes, norm.kind, norm.num_groups)?;
    let members = seeds.iter().map(|&s| layout.init_params(s)).collect();
    seeds.shrink_to_fit();
    Ok(EnsembleModel {
        layout,
        members,
        seeds,
        norm_policy: norm,
        num_classes,
        substitution: None,
    })
}

impl EnsembleModel {
    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn arch(&self) -> EncoderArch {
        self.layout.arch
    }

    pub fn norm_policy(&self) -> NormPolicy {
        self.norm_policy
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn param_len(&self) -> usize {
        self.layout.param_len()
    }

    pub fn norm_affine_mask(&self) -> Vec<bool> {
        self.layout.norm_affine_mask()
    }

    pub fn substitution_report(&self) -> Option<&NormSubstitution> {
        self.substitution.as_ref()
    }

    pub fn member_params(&self, m: usize) -> &ParamSet {
        &self.members[m]
    }

    pub fn member_params_mut(&mut self, m: usize) -> &mut ParamSet {
        &mut self.members[m]
    }

    fn check_member(&self, m: usize) -> Result<()> {
        if m >= self.members.len() {
            return Err(Error::validation(format!(
                "member index {m} out of range for M={}",
                self.members.len()
            )));
        }
        Ok(())
    }

    /// Replace every normalization layer's kind in place, keeping the learned
    /// affine parameters. Running statistics are reset when the kind changes.
    pub fn substitute_norm_layers(&mut self, policy: NormPolicy) -> Result<NormSubstitution> {
        let before_kind = self.norm_policy.kind;
        let layers = self.layout.norm_layer_count();
        let state_len = self.layout.state_len();
        let stats_per_kind = move |k: NormKind| match k {
            NormKind::Batch => state_len,
            NormKind::Group => 0,
        };
        if policy.kind == before_kind && policy.num_groups == self.norm_policy.num_groups {
            let report = NormSubstitution {
                layers_replaced: 0,
                trainable_params: self.layout.param_len(),
                running_stats_before: stats_per_kind(before_kind),
                running_stats_after: stats_per_kind(before_kind),
            };
            self.substitution = Some(report);
            return Ok(report);
        }
        let next = self.layout.with_norm(policy.kind, policy.num_groups)?;
        let report = NormSubstitution {
            layers_replaced: layers,
            trainable_params: next.param_len(),
            running_stats_before: stats_per_kind(before_kind),
            running_stats_after: stats_per_kind(policy.kind),
        };
        for ps in &mut self.members {
            // Affine layout is identical across kinds; reset running state.
            for v in ps.state.iter_mut() {
                *v = 0.0;
            }
        }
        if matches!(policy.kind, NormKind::Batch) {
            // Fresh running stats: mean 0, var 1.
            let fresh = next.init_params(0);
            for ps in &mut self.members {
                ps.state.copy_from_slice(&fresh.state);
            }
        }
        self.layout = next;
        self.norm_policy = policy;
        self.substitution = Some(report);
        Ok(report)
    }

    /// Softmax probabilities (f64) and raw logits (f32) of member `m` in
    /// deterministic inference mode.
    pub fn forward_member(&self, m: usize, batch: &Array4<Elem>) -> Result<(Array2<f64>, Array2<Elem>)> {
        self.check_member(m)?;
        let logits = self.layout.forward_eval(&self.members[m], batch)?;
        Ok((logits_to_probs(&logits), logits))
    }

    /// Member-averaged probabilities; numerically identical to running
    /// [`marginal_probability`] over all members' outputs.
    pub fn forward_marginal(&self, batch: &Array4<Elem>) -> Result<Array2<f64>> {
        let mut probs = Vec::with_capacity(self.members.len());
        for m in 0..self.members.len() {
            probs.push(ProbBatch::from_normalized(self.forward_member(m, batch)?.0));
        }
        Ok(marginal_probability(&probs)?.rows().clone())
    }

    /// Gradient-ready member forward; used by training and adaptation loops.
    pub fn member_forward_train(
        &mut self,
        m: usize,
        batch: &Array4<Elem>,
    ) -> Result<(Array2<Elem>, MemberCache)> {
        self.check_member(m)?;
        self.layout.forward_train(&mut self.members[m], batch)
    }

    pub fn member_backward(
        &self,
        m: usize,
        cache: &MemberCache,
        dlogits: &Array2<Elem>,
        grads: &mut GradBuf,
    ) {
        self.layout.backward(&self.members[m], cache, dlogits, grads);
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            members: self.members.clone(),
        }
    }

    /// Restore every parameter and normalization statistic to snapshot time,
    /// bitwise.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        if snap.members.len() != self.members.len() {
            return Err(Error::validation(format!(
                "snapshot holds {} members, model has {}",
                snap.members.len(),
                self.members.len()
            )));
        }
        for (dst, src) in self.members.iter_mut().zip(snap.members.iter()) {
            if dst.params.len() != src.params.len() || dst.state.len() != src.state.len() {
                return Err(Error::validation(
                    "snapshot architecture does not match model",
                ));
            }
            dst.params.copy_from_slice(&src.params);
            dst.state.copy_from_slice(&src.state);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: EncoderArch,
    pub norm: NormPolicy,
    pub num_classes: usize,
    pub seeds: Vec<u64>,
    pub param_len: usize,
    pub state_len: usize,
    pub config_hash: Option<String>,
}

/// Write one parameter archive per member plus a JSON manifest.
pub fn save_checkpoint(
    model: &EnsembleModel,
    dir: &Path,
    config_hash: Option<String>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let manifest = CheckpointManifest {
        arch: model.layout.arch,
        norm: model.norm_policy,
        num_classes: model.num_classes,
        seeds: model.seeds.clone(),
        param_len: model.layout.param_len(),
        state_len: model.layout.state_len(),
        config_hash,
    };
    let mf = dir.join("manifest.json");
    let file = File::create(&mf).map_err(|e| Error::io_at(&mf, e))?;
    serde_json::to_writer_pretty(file, &manifest)
        .map_err(|e| Error::Checkpoint(format!("writing manifest: {e}")))?;
    for (k, ps) in model.members.iter().enumerate() {
        let path = dir.join(format!("member_{k}.npz"));
        let file = File::create(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut npz = NpzWriter::new(file);
        let params = Array1::from_vec(ps.params.clone());
        let state = Array1::from_vec(ps.state.clone());
        npz.add_array("params", &params)
            .and_then(|_| npz.add_array("state", &state))
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        npz.finish()
            .map_err(|e| Error::Checkpoint(format!("finishing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn npz_array(npz: &mut NpzReader<File>, name: &str, path: &Path) -> Result<Vec<Elem>> {
    let tried: Array1<Elem> = npz
        .by_name(name)
        .or_else(|_| npz.by_name(&format!("{name}.npy")))
        .map_err(|e| Error::Checkpoint(format!("array '{name}' in {}: {e}", path.display())))?;
    Ok(tried.to_vec())
}

/// Load a checkpoint directory written by [`save_checkpoint`]; restores
/// parameters bitwise.
pub fn load_checkpoint(dir: &Path) -> Result<(EnsembleModel, CheckpointManifest)> {
    let mf = dir.join("manifest.json");
    let file = File::open(&mf).map_err(|e| Error::io_at(&mf, e))?;
    let manifest: CheckpointManifest = serde_json::from_reader(file)
        .map_err(|e| Error::Checkpoint(format!("parsing manifest: {e}")))?;
    let specs: Vec<MemberSpec> = manifest
        .seeds
        .iter()
        .map(|&s| MemberSpec {
            arch: manifest.arch,
            init_seed: s,
        })
        .collect();
    let mut model = build_ensemble(&specs, manifest.norm, manifest.num_classes)?;
    if model.layout.param_len() != manifest.param_len
        || model.layout.state_len() != manifest.state_len
    {
        return Err(Error::Checkpoint(format!(
            "layout sizes {}/{} do not match manifest {}/{}",
            model.layout.param_len(),
            model.layout.state_len(),
            manifest.param_len,
            manifest.state_len
        )));
    }
    for k in 0..model.members.len() {
        let path = dir.join(format!("member_{k}.npz"));
        let file = File::open(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut npz = NpzReader::new(file)
            .map_err(|e| Error::Checkpoint(format!("opening {}: {e}", path.display())))?;
        let params = npz_array(&mut npz, "params", &path)?;
        let state = npz_array(&mut npz, "state", &path)?;
        if params.len() != manifest.param_len || state.len() != manifest.state_len {
            return Err(Error::Checkpoint(format!(
                "member {k} array sizes do not match manifest"
            )));
        }
        model.members[k] = ParamSet { params, state };
    }
    Ok((model, manifest))
}
