//! Small 2D image operations shared by patch extraction, test-time
//! augmentations, and heatmap rendering. All bilinear sampling uses the
//! half-pixel-center convention.

use ndarray::{Array2, ArrayView2};

/// Bilinear resample to `(out_h, out_w)`.
pub fn bilinear_resize(src: &ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let scale_r = h as f32 / out_h as f32;
    let scale_c = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let sr = ((r as f32 + 0.5) * scale_r - 0.5).clamp(0.0, (h - 1) as f32);
        let sc = ((c as f32 + 0.5) * scale_c - 0.5).clamp(0.0, (w - 1) as f32);
        let r0 = sr.floor() as usize;
        let c0 = sc.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = sr - r0 as f32;
        let fc = sc - c0 as f32;
        let top = src[(r0, c0)] * (1.0 - fc) + src[(r0, c1)] * fc;
        let bot = src[(r1, c0)] * (1.0 - fc) + src[(r1, c1)] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Flip along the horizontal axis (left-right).
pub fn flip_lr(src: &ArrayView2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(r, c)| src[(r, w - 1 - c)])
}

/// Flip along the vertical axis (top-bottom).
pub fn flip_ud(src: &ArrayView2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(r, c)| src[(h - 1 - r, c)])
}

/// Crop the window starting at `(top, left)` with size `(ch, cw)` and resize
/// back to the source size.
pub fn crop_resize(src: &ArrayView2<f32>, top: usize, left: usize, ch: usize, cw: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(top + ch <= h && left + cw <= w, "crop window out of bounds");
    let window = src.slice(ndarray::s![top..top + ch, left..left + cw]);
    bilinear_resize(&window, h, w)
}

/// Rotate by `theta` radians about the center and translate by
/// `(dy, dx)` pixels, sampling bilinearly with zero padding.
pub fn affine(src: &ArrayView2<f32>, theta: f32, dy: f32, dx: f32) -> Array2<f32> {
    let (h, w) = src.dim();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((h, w), |(r, c)| {
        // Inverse map: undo translation, then rotate backwards about center.
        let y = r as f32 - dy - cy;
        let x = c as f32 - dx - cx;
        let sy = cos * y + sin * x + cy;
        let sx = -sin * y + cos * x + cx;
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f32 || sx > (w - 1) as f32 {
            return 0.0;
        }
        let r0 = sy.floor() as usize;
        let c0 = sx.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = sy - r0 as f32;
        let fc = sx - c0 as f32;
        let top = src[(r0, c0)] * (1.0 - fc) + src[(r0, c1)] * fc;
        let bot = src[(r1, c0)] * (1.0 - fc) + src[(r1, c1)] * fc;
        top * (1.0 - fr) + bot * fr
    })
}
