//! Leave-one-center-out split planning with patient-wise stratification.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BiopsyCore;
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fold {
    pub test_center: String,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
}

/// One fold per center: that center's data is held out whole, and each
/// remaining center's patients are split into train/validation (stratified
/// by whether the patient has any cancerous core), then pooled.
pub fn loco_split(cores: &[BiopsyCore], val_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::validation(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    // center -> patient -> has any cancer core
    let mut centers: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    for c in cores {
        let entry = centers
            .entry(&c.center_id)
            .or_default()
            .entry(&c.patient_id)
            .or_insert(false);
        *entry |= c.label.is_cancer();
    }
    if centers.len() < 2 {
        return Err(Error::validation(
            "leave-one-center-out needs at least two centers",
        ));
    }
    for (center, patients) in &centers {
        if patients.is_empty() {
            return Err(Error::validation(format!("center {center} has no patients")));
        }
    }

    let mut folds = Vec::with_capacity(centers.len());
    for (fold_idx, test_center) in centers.keys().enumerate() {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (center, patients) in &centers {
            if center == test_center {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                center,
                fold_idx as u64,
            ));
            // Stratify on patient-level cancer presence.
            let mut strata: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
            for (p, &has_cancer) in patients {
                strata[has_cancer as usize].push(p);
            }
            let n_total = patients.len();
            let mut val_here: Vec<&str> = Vec::new();
            let mut train_here: Vec<&str> = Vec::new();
            for stratum in strata.iter_mut() {
                stratum.shuffle(&mut rng);
                let k = (stratum.len() as f64 * val_fraction).round() as usize;
                let k = k.min(stratum.len());
                val_here.extend(stratum.iter().take(k));
                train_here.extend(stratum.iter().skip(k));
            }
            // Keep both sides non-empty whenever the center allows it.
            if n_total >= 2 {
                if val_here.is_empty() {
                    val_here.push(train_here.pop().expect("n_total >= 2"));
                } else if train_here.is_empty() {
                    train_here.push(val_here.pop().expect("n_total >= 2"));
                }
            }
            train.extend(train_here.iter().map(|s| s.to_string()));
            val.extend(val_here.iter().map(|s| s.to_string()));
        }
        train.sort();
        val.sort();
        folds.push(Fold {
            test_center: test_center.to_string(),
            train_patients: train,
            val_patients: val,
        });
    }
    Ok(SplitPlan { folds })
}

impl SplitPlan {
    /// Check the disjointness invariants; used by tests and the harness.
    pub fn verify(&self, cores: &[BiopsyCore]) -> Result<()> {
        let mut patients_by_center: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for c in cores {
            patients_by_center
                .entry(&c.center_id)
                .or_default()
                .insert(&c.patient_id);
        }
        let mut seen_test: BTreeSet<&str> = BTreeSet::new();
        for fold in &self.folds {
            if !seen_test.insert(&fold.test_center) {
                return Err(Error::validation(format!(
                    "center {} is test more than once",
                    fold.test_center
                )));
            }
            let train: BTreeSet<&str> = fold.train_patients.iter().map(|s| s.as_str()).collect();
            let val: BTreeSet<&str> = fold.val_patients.iter().map(|s| s.as_str()).collect();
            if train.intersection(&val).next().is_some() {
                return Err(Error::validation("train and val patients overlap"));
            }
            if let Some(test_patients) = patients_by_center.get(fold.test_center.as_str()) {
                for p in test_patients {
                    if train.contains(p) || val.contains(p) {
                        return Err(Error::validation(format!(
                            "test-center patient {p} leaked into train/val"
                        )));
                    }
                }
            }
        }
        if seen_test.len() != patients_by_center.len() {
            return Err(Error::validation(
                "every center must serve as test exactly once",
            ));
        }
        Ok(())
    }
}
