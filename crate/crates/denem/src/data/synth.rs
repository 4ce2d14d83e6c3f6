//! Deterministic per-core frame synthesis.

use ndarray::{Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{extract_patches, BiopsyCore, CenterShiftParams, Label, RFFrame, SynthGeometry};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Separable Gaussian blur with an L2-normalized kernel, so white noise in
/// gives (expected) unit-variance correlated speckle out.
fn blur_unit_variance(field: &Array2<f32>, sigma_px: f64) -> Array2<f32> {
    let radius = (3.0 * sigma_px).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        let x = i as f64 / sigma_px;
        kernel.push((-0.5 * x * x).exp() as f32);
    }
    let l2 = kernel.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt() as f32;
    for v in kernel.iter_mut() {
        *v /= l2;
    }
    let (h, w) = field.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    // Horizontal pass.
    let mut tmp = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + ki as isize - radius, w);
                acc += kv * field[(r, cc)];
            }
            tmp[(r, c)] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + ki as isize - radius, h);
                acc += kv * tmp[(rr, c)];
            }
            out[(r, c)] = acc;
        }
    }
    out
}

struct BandGeometry {
    entry_col_mm: f64,
    angle_rad: f64,
    len_mm: f64,
}

impl BandGeometry {
    /// Signed along-band and perpendicular coordinates of a point in mm.
    fn coords(&self, row_mm: f64, col_mm: f64) -> (f64, f64) {
        let (dy, dx) = (self.angle_rad.cos(), self.angle_rad.sin());
        let py = row_mm;
        let px = col_mm - self.entry_col_mm;
        let along = py * dy + px * dx;
        let perp = -py * dx + px * dy;
        (along, perp)
    }
}

/// Deterministically synthesize one core's frame, label, involvement and
/// Gleason grade from its seed.
fn synth_core_frame(
    params: &CenterShiftParams,
    geo: &SynthGeometry,
    cancer_rate: f64,
    core_seed: u64,
) -> (RFFrame, Label, f64, Option<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(core_seed);
    let (depth_mm, width_mm) = geo.frame_mm;
    let ppm = geo.px_per_mm as f64;
    let h = (depth_mm * ppm).round() as usize;
    let w = (width_mm * ppm).round() as usize;

    // Needle trace geometry.
    let angle_deg = rng.random_range(geo.band_angle_deg.0..=geo.band_angle_deg.1);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let band = BandGeometry {
        entry_col_mm: width_mm * rng.random_range(0.38..0.62),
        angle_rad: sign * angle_deg.to_radians(),
        len_mm: depth_mm * rng.random_range(geo.band_len_frac.0..=geo.band_len_frac.1),
    };

    // Label, involvement, grade.
    let is_cancer = cancer_rate > 0.0 && rng.random_bool(cancer_rate);
    let involvement = if is_cancer {
        rng.random_range(geo.involvement_range.0..=geo.involvement_range.1)
    } else {
        0.0
    };
    let gleason = if is_cancer {
        let u: f64 = rng.random_range(0.0..1.0);
        Some(if u < 0.70 {
            7
        } else if u < 0.90 {
            8
        } else if u < 0.98 {
            9
        } else {
            10
        })
    } else {
        None
    };
    let seg_start = rng.random_range(0.0..=(1.0 - involvement).max(0.0)) * band.len_mm;
    let seg_end = seg_start + involvement * band.len_mm;

    // Texture fields: same white noise smoothed at two correlation lengths.
    let benign_corr_mm = geo.base_corr_mm / params.texture_frequency;
    let sigma_benign = benign_corr_mm * ppm;
    let sigma_cancer = sigma_benign * geo.cancer_corr_ratio;
    let noise = Array2::<f32>::from_shape_fn((h, w), |_| rng.sample::<f32, _>(StandardNormal));
    let field_benign = blur_unit_variance(&noise, sigma_benign);
    let field_cancer = if is_cancer {
        Some(blur_unit_variance(&noise, sigma_cancer))
    } else {
        None
    };

    let half_band = geo.band_width_mm / 2.0;
    let half_region = half_band * geo.cancer_region_scale;
    let mut samples = Array2::<f32>::zeros((h, w));
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    for r in 0..h {
        let row_mm = (r as f64 + 0.5) / ppm;
        let atten = (params.gain * (-params.attenuation_slope * row_mm).exp()) as f32;
        for c in 0..w {
            let col_mm = (c as f64 + 0.5) / ppm;
            let (along, perp) = band.coords(row_mm, col_mm);
            let in_band = perp.abs() <= half_band && (0.0..=band.len_mm).contains(&along);
            if in_band {
                mask[(r, c)] = true;
            }
            let tissue = match &field_cancer {
                Some(fc)
                    if perp.abs() <= half_region && along >= seg_start && along <= seg_end =>
                {
                    fc[(r, c)]
                }
                _ => field_benign[(r, c)],
            };
            let speckle: f32 = rng.sample(StandardNormal);
            samples[(r, c)] = atten * (tissue + params.speckle_scale as f32 * speckle);
        }
    }

    let frame = RFFrame {
        samples,
        physical_mm: geo.frame_mm,
        needle_mask: mask,
    };
    let label = if is_cancer { Label::Cancer } else { Label::Benign };
    (frame, label, involvement, gleason)
}

fn core_seed(dataset_seed: u64, center_id: &str, patient: usize, core: usize) -> u64 {
    derive_seed(
        dataset_seed,
        center_id,
        (patient as u64) << 16 | core as u64,
    )
}

/// Generate all cores of one center. Deterministic in `(params, geometry,
/// seed)`; per-core seeds make generation order-independent.
pub fn synthesize_center(
    params: &CenterShiftParams,
    geo: &SynthGeometry,
    n_patients: usize,
    cores_per_patient: usize,
    cancer_rate: f64,
    seed: u64,
) -> Result<Vec<BiopsyCore>> {
    params.validate()?;
    geo.validate()?;
    if !(0.0..=1.0).contains(&cancer_rate) {
        return Err(Error::validation(format!(
            "cancer_rate must lie in [0, 1], got {cancer_rate}"
        )));
    }
    if n_patients == 0 || cores_per_patient == 0 {
        return Err(Error::validation("need at least one patient and one core"));
    }
    let mut cores = Vec::with_capacity(n_patients * cores_per_patient);
    for p in 0..n_patients {
        let patient_id = format!("{}-p{:03}", params.center_id, p);
        for k in 0..cores_per_patient {
            let core_id = format!("{patient_id}-k{k}");
            // A pathological band draw can leave no window above the overlap
            // threshold; retry with a derived seed.
            let mut result = None;
            for attempt in 0..8u64 {
                let seed_k = core_seed(seed.wrapping_add(attempt * 0x9e37), &params.center_id, p, k);
                let (frame, label, involvement, gleason) =
                    synth_core_frame(params, geo, cancer_rate, seed_k);
                let patches = extract_patches(&frame, &geo.patch)?;
                if !patches.is_empty() {
                    result = Some((patches, label, involvement, gleason));
                    break;
                }
            }
            let (patches, label, involvement, gleason) = result.ok_or_else(|| {
                Error::validation(format!(
                    "core {core_id}: no patch cleared the overlap threshold after retries"
                ))
            })?;
            let (ph, pw) = geo.patch.resize_to;
            let mut stack = Array3::<f32>::zeros((patches.len(), ph, pw));
            for (i, (img, _)) in patches.iter().enumerate() {
                stack.index_axis_mut(Axis(0), i).assign(img);
            }
            cores.push(BiopsyCore {
                core_id,
                patient_id: patient_id.clone(),
                center_id: params.center_id.clone(),
                patches: stack,
                label,
                involvement,
                gleason,
            });
        }
    }
    Ok(cores)
}

/// Regenerate one core's frame (for heatmap rendering) from the dataset seed
/// and the core's position in the roster. Returns the frame actually used
/// for its patches, honoring the retry rule in [`synthesize_center`].
pub fn synthesize_core_frame(
    params: &CenterShiftParams,
    geo: &SynthGeometry,
    cancer_rate: f64,
    seed: u64,
    patient: usize,
    core: usize,
) -> Result<(RFFrame, Label, f64)> {
    params.validate()?;
    geo.validate()?;
    for attempt in 0..8u64 {
        let seed_k = core_seed(seed.wrapping_add(attempt * 0x9e37), &params.center_id, patient, core);
        let (frame, label, involvement, _) = synth_core_frame(params, geo, cancer_rate, seed_k);
        if !extract_patches(&frame, &geo.patch)?.is_empty() {
            return Ok((frame, label, involvement));
        }
    }
    Err(Error::validation(
        "no patch cleared the overlap threshold after retries",
    ))
}
