//! Synthetic multi-center data with controllable distribution shift, patch
//! extraction geometry, leave-one-center-out splitting, and dataset I/O.
//!
//! The class signal is textural: cancerous tissue carries a longer speckle
//! autocorrelation length than benign tissue, while centers differ in gain,
//! depth attenuation, additive speckle noise, and base texture grain. Gain
//! and attenuation are amplitude nuisances; the texture-frequency shift
//! directly confounds the class signal, which is what makes cross-center
//! evaluation non-trivial.

mod patch;
mod split;
mod store;
mod synth;

pub use patch::{extract_patches, sliding_windows, PatchPosition};
pub use split::{loco_split, Fold, SplitPlan};
pub use store::{load_dataset, save_dataset};
pub use synth::{synthesize_center, synthesize_core_frame};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ultrasound-style frame: raw samples plus the needle-trace mask where
/// histopathology labels apply.
#[derive(Debug, Clone)]
pub struct RFFrame {
    pub samples: Array2<f32>,
    /// (depth mm, width mm)
    pub physical_mm: (f64, f64),
    pub needle_mask: Array2<bool>,
}

impl RFFrame {
    pub fn new(samples: Array2<f32>, physical_mm: (f64, f64), needle_mask: Array2<bool>) -> Result<Self> {
        if samples.dim() != needle_mask.dim() {
            return Err(Error::shape(format!(
                "mask shape {:?} does not match samples {:?}",
                needle_mask.dim(),
                samples.dim()
            )));
        }
        if physical_mm.0 <= 0.0 || physical_mm.1 <= 0.0 {
            return Err(Error::validation("frame physical size must be positive"));
        }
        Ok(RFFrame {
            samples,
            physical_mm,
            needle_mask,
        })
    }

    /// Pixels per millimetre along (rows, cols).
    pub fn px_per_mm(&self) -> (f64, f64) {
        (
            self.samples.nrows() as f64 / self.physical_mm.0,
            self.samples.ncols() as f64 / self.physical_mm.1,
        )
    }
}

/// Sliding-window geometry for patch extraction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_mm: (f64, f64),
    pub stride_mm: (f64, f64),
    pub overlap_threshold: f64,
    pub resize_to: (usize, usize),
}

impl PatchSpec {
    pub fn full() -> Self {
        PatchSpec {
            patch_mm: (5.0, 5.0),
            stride_mm: (1.0, 1.0),
            overlap_threshold: 0.60,
            resize_to: (256, 256),
        }
    }

    pub fn desk() -> Self {
        PatchSpec {
            resize_to: (64, 64),
            ..PatchSpec::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.overlap_threshold <= 0.0 || self.overlap_threshold > 1.0 {
            return Err(Error::validation("overlap threshold must lie in (0, 1]"));
        }
        if self.stride_mm.0 > self.patch_mm.0 || self.stride_mm.1 > self.patch_mm.1 {
            return Err(Error::validation("stride must not exceed patch size"));
        }
        if self.patch_mm.0 <= 0.0 || self.patch_mm.1 <= 0.0 || self.stride_mm.0 <= 0.0 || self.stride_mm.1 <= 0.0 {
            return Err(Error::validation("patch and stride must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Cancer,
}

impl Label {
    pub fn is_cancer(self) -> bool {
        matches!(self, Label::Cancer)
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Cancer => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Cancer),
            other => Err(Error::validation(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

/// A group of patches sharing one histopathology record.
#[derive(Debug, Clone)]
pub struct BiopsyCore {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: String,
    /// `n x H' x W'` resized patches.
    pub patches: Array3<f32>,
    pub label: Label,
    /// Fraction of the needle region synthesized as cancerous; 0 iff benign.
    pub involvement: f64,
    pub gleason: Option<u8>,
}

impl BiopsyCore {
    pub fn num_patches(&self) -> usize {
        self.patches.dim().0
    }
}

/// Per-center acquisition shift knobs; all strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenterShiftParams {
    pub center_id: String,
    /// Multiplicative intensity factor.
    pub gain: f64,
    /// Amplitude of unsmoothed additive noise.
    pub speckle_scale: f64,
    /// Base texture grain: higher is finer (shorter correlation length).
    pub texture_frequency: f64,
    /// Depth-dependent exponential decay per mm.
    pub attenuation_slope: f64,
}

impl CenterShiftParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gain", self.gain),
            ("speckle_scale", self.speckle_scale),
            ("texture_frequency", self.texture_frequency),
            ("attenuation_slope", self.attenuation_slope),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::validation(format!(
                    "center {}: {name} must be strictly positive, got {v}",
                    self.center_id
                )));
            }
        }
        Ok(())
    }
}

/// Frame/band/texture geometry of the generator, independent of the
/// per-center shift parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthGeometry {
    /// (depth mm, width mm) of generated frames.
    pub frame_mm: (f64, f64),
    /// Integer pixel density, chosen so a patch maps to at least the resize
    /// target (no upsampling).
    pub px_per_mm: usize,
    pub band_width_mm: f64,
    /// Needle insertion angle from vertical, degrees (min, max).
    pub band_angle_deg: (f64, f64),
    /// Needle trace length as a fraction of frame depth (min, max).
    pub band_len_frac: (f64, f64),
    /// Benign speckle autocorrelation length in mm (before the per-center
    /// texture-frequency division).
    pub base_corr_mm: f64,
    /// Cancerous-to-benign correlation length ratio; the class signal.
    pub cancer_corr_ratio: f64,
    /// Lateral half-width of the cancerous region, as a multiple of the band
    /// width.
    pub cancer_region_scale: f64,
    pub involvement_range: (f64, f64),
    pub patch: PatchSpec,
}

impl SynthGeometry {
    pub fn full() -> Self {
        SynthGeometry {
            frame_mm: (28.0, 46.0),
            px_per_mm: 52,
            band_width_mm: 3.4,
            band_angle_deg: (5.0, 15.0),
            band_len_frac: (0.45, 0.62),
            base_corr_mm: 0.55,
            cancer_corr_ratio: 1.6,
            cancer_region_scale: 2.5,
            involvement_range: (0.15, 0.95),
            patch: PatchSpec::full(),
        }
    }

    pub fn desk() -> Self {
        SynthGeometry {
            frame_mm: (14.0, 20.0),
            px_per_mm: 13,
            patch: PatchSpec::desk(),
            ..SynthGeometry::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.frame_mm.0 < self.patch.patch_mm.0 || self.frame_mm.1 < self.patch.patch_mm.1 {
            return Err(Error::validation("frame smaller than one patch"));
        }
        if self.px_per_mm == 0 {
            return Err(Error::validation("px_per_mm must be positive"));
        }
        if self.cancer_corr_ratio <= 0.0 || self.base_corr_mm <= 0.0 {
            return Err(Error::validation("texture lengths must be positive"));
        }
        let (lo, hi) = self.involvement_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::validation("involvement range must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// Default five-center roster with distinct shift parameters.
pub fn default_centers() -> Vec<CenterShiftParams> {
    vec![
        CenterShiftParams {
            center_id: "center_a".into(),
            gain: 1.0,
            speckle_scale: 0.35,
            texture_frequency: 1.0,
            attenuation_slope: 0.020,
        },
        CenterShiftParams {
            center_id: "center_b".into(),
            gain: 1.35,
            speckle_scale: 0.50,
            texture_frequency: 1.12,
            attenuation_slope: 0.035,
        },
        CenterShiftParams {
            center_id: "center_c".into(),
            gain: 0.75,
            speckle_scale: 0.25,
            texture_frequency: 0.92,
            attenuation_slope: 0.010,
        },
        CenterShiftParams {
            center_id: "center_d".into(),
            gain: 1.15,
            speckle_scale: 0.45,
            texture_frequency: 1.06,
            attenuation_slope: 0.030,
        },
        CenterShiftParams {
            center_id: "center_e".into(),
            gain: 0.90,
            speckle_scale: 0.30,
            texture_frequency: 0.85,
            attenuation_slope: 0.015,
        },
    ]
}
