//! Dataset serialization: a manifest CSV plus one array container per core.
//!
//! Manifest columns, in order:
//! `core_id, patient_id, center_id, label, involvement, gleason, patch_path`.
//! Each referenced container holds a named f32 array `patches` of shape
//! `n x H' x W'`.

use std::fs::File;
use std::path::Path;

use ndarray::Array3;
use ndarray_npy::{NpzReader, NpzWriter};

use super::{BiopsyCore, Label};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.csv";
const CORE_DIR: &str = "cores";

/// Write `cores` under `dir`, sorted by core id for reproducible manifests.
pub fn save_dataset(cores: &[BiopsyCore], dir: &Path) -> Result<()> {
    if cores.is_empty() {
        return Err(Error::Dataset("refusing to save an empty dataset".into()));
    }
    let core_dir = dir.join(CORE_DIR);
    std::fs::create_dir_all(&core_dir).map_err(|e| Error::io_at(&core_dir, e))?;

    let mut order: Vec<&BiopsyCore> = cores.iter().collect();
    order.sort_by(|a, b| a.core_id.cmp(&b.core_id));

    let manifest_path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest_path)
        .map_err(|e| Error::Dataset(format!("creating manifest: {e}")))?;
    w.write_record([
        "core_id",
        "patient_id",
        "center_id",
        "label",
        "involvement",
        "gleason",
        "patch_path",
    ])
    .map_err(|e| Error::Dataset(format!("writing manifest header: {e}")))?;

    for core in order {
        let rel = format!("{CORE_DIR}/{}.npz", core.core_id);
        let path = dir.join(&rel);
        let file = File::create(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut npz = NpzWriter::new(file);
        npz.add_array("patches", &core.patches)
            .and_then(|_| npz.finish().map(|_| ()))
            .map_err(|e| Error::Dataset(format!("writing {}: {e}", path.display())))?;
        w.write_record([
            core.core_id.as_str(),
            core.patient_id.as_str(),
            core.center_id.as_str(),
            &core.label.as_u8().to_string(),
            &core.involvement.to_string(),
            &core.gleason.map(|g| g.to_string()).unwrap_or_default(),
            &rel,
        ])
        .map_err(|e| Error::Dataset(format!("writing manifest row: {e}")))?;
    }
    w.flush().map_err(|e| Error::io_at(&manifest_path, e))?;
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'a str> {
    rec.get(idx)
        .ok_or_else(|| Error::Dataset(format!("manifest line {line}: missing column {name}")))
}

/// Load a dataset written by [`save_dataset`]; round-trips every field.
pub fn load_dataset(dir: &Path) -> Result<Vec<BiopsyCore>> {
    let manifest_path = dir.join(MANIFEST);
    let mut rdr = csv::Reader::from_path(&manifest_path)
        .map_err(|e| Error::Dataset(format!("opening manifest {}: {e}", manifest_path.display())))?;
    {
        let headers = rdr
            .headers()
            .map_err(|e| Error::Dataset(format!("reading manifest header: {e}")))?;
        let expected = [
            "core_id",
            "patient_id",
            "center_id",
            "label",
            "involvement",
            "gleason",
            "patch_path",
        ];
        if headers.len() != expected.len()
            || headers.iter().zip(expected.iter()).any(|(a, &b)| a != b)
        {
            return Err(Error::Dataset(format!(
                "manifest columns {:?} do not match expected {:?}",
                headers, expected
            )));
        }
    }
    let mut cores = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Dataset(format!("manifest line {line}: {e}")))?;
        let core_id = field(&rec, 0, "core_id", line)?.to_string();
        let patient_id = field(&rec, 1, "patient_id", line)?.to_string();
        let center_id = field(&rec, 2, "center_id", line)?.to_string();
        let label = Label::from_u8(
            field(&rec, 3, "label", line)?
                .parse::<u8>()
                .map_err(|e| Error::Dataset(format!("core {core_id}: bad label: {e}")))?,
        )?;
        let involvement: f64 = field(&rec, 4, "involvement", line)?
            .parse()
            .map_err(|e| Error::Dataset(format!("core {core_id}: bad involvement: {e}")))?;
        let gleason_raw = field(&rec, 5, "gleason", line)?;
        let gleason = if gleason_raw.is_empty() {
            None
        } else {
            Some(
                gleason_raw
                    .parse::<u8>()
                    .map_err(|e| Error::Dataset(format!("core {core_id}: bad gleason: {e}")))?,
            )
        };
        let rel = field(&rec, 6, "patch_path", line)?;
        let path = dir.join(rel);
        let file = File::open(&path).map_err(|_| {
            Error::Dataset(format!(
                "core {core_id}: missing patch file {}",
                path.display()
            ))
        })?;
        let mut npz = NpzReader::new(file)
            .map_err(|e| Error::Dataset(format!("core {core_id}: unreadable container: {e}")))?;
        let patches: Array3<f32> = npz
            .by_name("patches")
            .or_else(|_| npz.by_name("patches.npy"))
            .map_err(|e| Error::Dataset(format!("core {core_id}: missing 'patches' array: {e}")))?;
        cores.push(BiopsyCore {
            core_id,
            patient_id,
            center_id,
            patches,
            label,
            involvement,
            gleason,
        });
    }
    if cores.is_empty() {
        return Err(Error::Dataset("manifest lists no cores".into()));
    }
    Ok(cores)
}
