//! Sliding-window patch extraction over the needle region.

use ndarray::Array2;

use super::{PatchSpec, RFFrame};
use crate::error::{Error, Result};
use crate::imgops::bilinear_resize;

/// Where a patch came from: millimetre grid coordinates and the pixel window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPosition {
    pub row_mm: f64,
    pub col_mm: f64,
    /// (row0, col0, height, width) in pixels.
    pub px: (usize, usize, usize, usize),
}

struct Grid {
    n_rows: usize,
    n_cols: usize,
    patch_px: (usize, usize),
}

fn grid_for(frame: &RFFrame, spec: &PatchSpec) -> Result<Grid> {
    spec.validate()?;
    let (depth, width) = frame.physical_mm;
    let (p_r, p_c) = spec.patch_mm;
    if p_r > depth || p_c > width {
        return Err(Error::validation(format!(
            "patch {p_r}x{p_c} mm larger than frame {depth}x{width} mm"
        )));
    }
    let (ppm_r, ppm_c) = frame.px_per_mm();
    let patch_px = (
        (p_r * ppm_r).round() as usize,
        (p_c * ppm_c).round() as usize,
    );
    if patch_px.0 == 0 || patch_px.1 == 0 {
        return Err(Error::validation("patch maps to zero pixels"));
    }
    if patch_px.0 > frame.samples.nrows() || patch_px.1 > frame.samples.ncols() {
        return Err(Error::validation("patch pixel window exceeds frame"));
    }
    let n_rows = ((depth - p_r) / spec.stride_mm.0 + 1e-9).floor() as usize + 1;
    let n_cols = ((width - p_c) / spec.stride_mm.1 + 1e-9).floor() as usize + 1;
    Ok(Grid {
        n_rows,
        n_cols,
        patch_px,
    })
}

fn window_at(
    frame: &RFFrame,
    spec: &PatchSpec,
    grid: &Grid,
    i: usize,
    j: usize,
) -> PatchPosition {
    let (ppm_r, ppm_c) = frame.px_per_mm();
    let row_mm = i as f64 * spec.stride_mm.0;
    let col_mm = j as f64 * spec.stride_mm.1;
    let r0 = ((row_mm * ppm_r).round() as usize).min(frame.samples.nrows() - grid.patch_px.0);
    let c0 = ((col_mm * ppm_c).round() as usize).min(frame.samples.ncols() - grid.patch_px.1);
    PatchPosition {
        row_mm,
        col_mm,
        px: (r0, c0, grid.patch_px.0, grid.patch_px.1),
    }
}

fn cut_and_resize(frame: &RFFrame, spec: &PatchSpec, pos: &PatchPosition) -> Array2<f32> {
    let (r0, c0, ph, pw) = pos.px;
    let window = frame.samples.slice(ndarray::s![r0..r0 + ph, c0..c0 + pw]);
    bilinear_resize(&window, spec.resize_to.0, spec.resize_to.1)
}

/// Slide a patch window over the frame at the configured stride; keep
/// windows whose area overlap with the needle mask is at least the
/// threshold (inclusive); resize kept windows bilinearly.
pub fn extract_patches(
    frame: &RFFrame,
    spec: &PatchSpec,
) -> Result<Vec<(Array2<f32>, PatchPosition)>> {
    let grid = grid_for(frame, spec)?;
    let area = grid.patch_px.0 * grid.patch_px.1;
    // Integer threshold keeps the >= comparison exact at the boundary.
    let needed = (spec.overlap_threshold * area as f64 - 1e-9).ceil() as usize;
    let mut out = Vec::new();
    for i in 0..grid.n_rows {
        for j in 0..grid.n_cols {
            let pos = window_at(frame, spec, &grid, i, j);
            let (r0, c0, ph, pw) = pos.px;
            let mut covered = 0usize;
            for r in r0..r0 + ph {
                for c in c0..c0 + pw {
                    covered += frame.needle_mask[(r, c)] as usize;
                }
            }
            if covered >= needed {
                out.push((cut_and_resize(frame, spec, &pos), pos));
            }
        }
    }
    Ok(out)
}

/// Every grid window regardless of the needle mask; used to sweep a model
/// across a whole frame for heatmaps.
pub fn sliding_windows(
    frame: &RFFrame,
    spec: &PatchSpec,
) -> Result<Vec<(Array2<f32>, PatchPosition)>> {
    let grid = grid_for(frame, spec)?;
    let mut out = Vec::with_capacity(grid.n_rows * grid.n_cols);
    for i in 0..grid.n_rows {
        for j in 0..grid.n_cols {
            let pos = window_at(frame, spec, &grid, i, j);
            out.push((cut_and_resize(frame, spec, &pos), pos));
        }
    }
    Ok(out)
}
