//! Layer primitives: convolution (im2col + GEMM), batch/group normalization,
//! max pooling, linear, ReLU.
//!
//! Every layer exposes `forward_eval` (no caches, no state updates) and
//! `forward_train` (returns the cache its `backward` needs). Backward passes
//! accumulate parameter gradients into a flat [`GradBuf`] at the layer's
//! slots and return the input gradient.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Elem, GradBuf, ParamAlloc, ParamSet, Slot};

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(x: &Array4<Elem>, k: usize, stride: usize, pad: usize) -> (Array2<Elem>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let row_len = c * k * k;
    let mut cols = Array2::<Elem>::zeros((n * ho * wo, row_len));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oh in 0..ho {
            let ih0 = (oh * stride) as isize - pad as isize;
            for ow in 0..wo {
                let iw0 = (ow * stride) as isize - pad as isize;
                // Valid kj run for this output column; the rest stays zero.
                let kj_lo = (-iw0).max(0) as usize;
                let kj_hi = ((w as isize - iw0).min(k as isize)).max(0) as usize;
                let mut idx = ((ni * ho + oh) * wo + ow) * row_len;
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for ki in 0..k {
                        let ih = ih0 + ki as isize;
                        if ih < 0 || ih >= h as isize || kj_lo >= kj_hi {
                            idx += k;
                            continue;
                        }
                        let src = plane + ih as usize * w + (iw0 + kj_lo as isize) as usize;
                        cs[idx + kj_lo..idx + kj_hi].copy_from_slice(&xs[src..src + kj_hi - kj_lo]);
                        idx += k;
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(
    dcols: &Array2<Elem>,
    x_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<Elem> {
    let (n, c, h, w) = x_dim;
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let row_len = c * k * k;
    let mut dx = Array4::<Elem>::zeros(x_dim);
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oh in 0..ho {
            let ih0 = (oh * stride) as isize - pad as isize;
            for ow in 0..wo {
                let iw0 = (ow * stride) as isize - pad as isize;
                let kj_lo = (-iw0).max(0) as usize;
                let kj_hi = ((w as isize - iw0).min(k as isize)).max(0) as usize;
                let mut idx = ((ni * ho + oh) * wo + ow) * row_len;
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for ki in 0..k {
                        let ih = ih0 + ki as isize;
                        if ih < 0 || ih >= h as isize || kj_lo >= kj_hi {
                            idx += k;
                            continue;
                        }
                        let dst = plane + ih as usize * w + (iw0 + kj_lo as isize) as usize;
                        for (o, v) in (kj_lo..kj_hi).enumerate() {
                            xs[dst + o] += ds[idx + v];
                        }
                        idx += k;
                    }
                }
            }
        }
    }
    dx
}

/// (n*ho*wo, oc) row-major GEMM output -> (n, oc, ho, wo).
fn rows_to_nchw(y_mat: &Array2<Elem>, n: usize, oc: usize, ho: usize, wo: usize) -> Array4<Elem> {
    let mut y = Array4::<Elem>::zeros((n, oc, ho, wo));
    let ym = y_mat.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let r = ((ni * ho + oh) * wo + ow) * oc;
                for c in 0..oc {
                    ys[((ni * oc + c) * ho + oh) * wo + ow] = ym[r + c];
                }
            }
        }
    }
    y
}

fn nchw_to_rows(dy: &Array4<Elem>) -> Array2<Elem> {
    let (n, oc, ho, wo) = dy.dim();
    let mut m = Array2::<Elem>::zeros((n * ho * wo, oc));
    let ds = dy.as_slice().expect("standard layout");
    let ms = m.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let r = ((ni * ho + oh) * wo + ow) * oc;
                for c in 0..oc {
                    ms[r + c] = ds[((ni * oc + c) * ho + oh) * wo + ow];
                }
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2D convolution without bias; weight layout `(out_ch, in_ch * k * k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: Slot,
}

pub struct ConvCache {
    cols: Array2<Elem>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAlloc, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = alloc.alloc(out_ch * in_ch * k * k);
        Conv2d {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            w,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn weight<'a>(&self, ps: &'a ParamSet) -> ArrayView2<'a, Elem> {
        ArrayView2::from_shape((self.out_ch, self.fan_in()), ps.param(self.w)).expect("slot shape")
    }

    fn run(&self, ps: &ParamSet, x: &Array4<Elem>) -> (Array4<Elem>, ConvCache) {
        let (cols, ho, wo) = im2col(x, self.k, self.stride, self.pad);
        let y_mat = cols.dot(&self.weight(ps).t());
        let y = rows_to_nchw(&y_mat, x.dim().0, self.out_ch, ho, wo);
        (
            y,
            ConvCache {
                cols,
                x_dim: x.dim(),
                out_hw: (ho, wo),
            },
        )
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Array4<Elem>) -> Array4<Elem> {
        self.run(ps, x).0
    }

    pub fn forward_train(&self, ps: &ParamSet, x: &Array4<Elem>) -> (Array4<Elem>, ConvCache) {
        self.run(ps, x)
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &ConvCache,
        dy: &Array4<Elem>,
        grads: &mut GradBuf,
    ) -> Array4<Elem> {
        let dy_mat = nchw_to_rows(dy);
        // dW += dy_mat^T . cols
        let dw = dy_mat.t().dot(&cache.cols);
        grads[self.w.range()]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, &v)| *g += v);
        let dcols = dy_mat.dot(&self.weight(ps));
        debug_assert_eq!(cache.out_hw, (dy.dim().2, dy.dim().3));
        col2im(&dcols, cache.x_dim, self.k, self.stride, self.pad)
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
}

/// Per-channel affine normalization over either batch statistics or
/// per-sample channel groups.
///
/// State slots for running statistics are allocated for both kinds so that a
/// batch-to-group substitution preserves the parameter layout; group norm
/// simply never reads them.
#[derive(Debug, Clone)]
pub struct Norm2d {
    pub channels: usize,
    pub kind: NormKind,
    pub num_groups: usize,
    pub eps: Elem,
    pub momentum: Elem,
    pub gamma: Slot,
    pub beta: Slot,
    pub run_mean: Slot,
    pub run_var: Slot,
}

pub struct NormCache {
    xhat: Array4<Elem>,
    invstd: Vec<Elem>, // one per normalization group instance
}

impl Norm2d {
    pub fn new(alloc: &mut ParamAlloc, channels: usize, kind: NormKind, num_groups: usize) -> Self {
        Norm2d {
            channels,
            kind,
            num_groups,
            eps: 1e-5,
            momentum: 0.1,
            gamma: alloc.alloc_norm_affine(channels),
            beta: alloc.alloc_norm_affine(channels),
            run_mean: alloc.alloc_state(channels),
            run_var: alloc.alloc_state(channels),
        }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.param_mut(self.gamma).fill(1.0);
        ps.param_mut(self.beta).fill(0.0);
        ps.state_mut(self.run_mean).fill(0.0);
        ps.state_mut(self.run_var).fill(1.0);
    }

    /// Number of (mean, var) pairs computed for a batch of `n` samples.
    fn group_count(&self, n: usize) -> usize {
        match self.kind {
            NormKind::Batch => self.channels,
            NormKind::Group => n * self.num_groups,
        }
    }

    /// Contiguous plane slices (offset, channel) making up one normalization
    /// group. Group norm groups are single contiguous blocks in NCHW layout;
    /// batch norm groups are one plane per sample.
    fn group_planes(
        &self,
        dim: (usize, usize, usize, usize),
        group: usize,
    ) -> impl Iterator<Item = (usize, usize)> {
        let (n, c, h, w) = dim;
        let hw = h * w;
        let kind = self.kind;
        let num_groups = self.num_groups;
        let cpg = if matches!(kind, NormKind::Group) { c / num_groups } else { 1 };
        (0..match kind {
            NormKind::Batch => n,
            NormKind::Group => cpg,
        })
        .map(move |i| match kind {
            NormKind::Batch => ((i * c + group) * hw, group),
            NormKind::Group => {
                let ni = group / num_groups;
                let ch = (group % num_groups) * cpg + i;
                ((ni * c + ch) * hw, ch)
            }
        })
    }

    fn normalize(
        &self,
        ps: &ParamSet,
        x: &Array4<Elem>,
        use_running: bool,
    ) -> (Array4<Elem>, Array4<Elem>, Vec<Elem>, Vec<Elem>, Vec<Elem>) {
        let dim = x.dim();
        let (n, _, h, w) = dim;
        let hw = h * w;
        let groups = self.group_count(n);
        let elems_per_group = x.len() / groups;
        let xs = x.as_slice().expect("standard layout");
        let mut means = vec![0.0; groups];
        let mut vars = vec![0.0; groups];
        if use_running {
            means.copy_from_slice(ps.state_slice(self.run_mean));
            vars.copy_from_slice(ps.state_slice(self.run_var));
        } else {
            for g in 0..groups {
                let mut sum = 0.0f64;
                for (off, _) in self.group_planes(dim, g) {
                    for &v in &xs[off..off + hw] {
                        sum += v as f64;
                    }
                }
                let mean = sum / elems_per_group as f64;
                let mut var = 0.0f64;
                for (off, _) in self.group_planes(dim, g) {
                    for &v in &xs[off..off + hw] {
                        let d = v as f64 - mean;
                        var += d * d;
                    }
                }
                means[g] = mean as Elem;
                vars[g] = (var / elems_per_group as f64) as Elem;
            }
        }
        let invstd: Vec<Elem> = vars.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = ps.param(self.gamma);
        let beta = ps.param(self.beta);
        let mut xhat = Array4::<Elem>::zeros(dim);
        let mut y = Array4::<Elem>::zeros(dim);
        {
            let hs = xhat.as_slice_mut().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for g in 0..groups {
                let (m, is) = (means[g], invstd[g]);
                for (off, ch) in self.group_planes(dim, g) {
                    let (gm, bt) = (gamma[ch], beta[ch]);
                    for i in off..off + hw {
                        let xh = (xs[i] - m) * is;
                        hs[i] = xh;
                        ys[i] = gm * xh + bt;
                    }
                }
            }
        }
        (y, xhat, means, vars, invstd)
    }

    pub fn forward_eval(&self, ps: &ParamSet, x: &Array4<Elem>) -> Array4<Elem> {
        let use_running = matches!(self.kind, NormKind::Batch);
        self.normalize(ps, x, use_running).0
    }

    /// Training-mode forward. Batch norm uses batch statistics and updates the
    /// running estimates; group norm has no batch dependence in any mode.
    pub fn forward_train(&self, ps: &mut ParamSet, x: &Array4<Elem>) -> (Array4<Elem>, NormCache) {
        let (y, xhat, means, vars, invstd) = self.normalize(ps, x, false);
        if matches!(self.kind, NormKind::Batch) {
            let mom = self.momentum;
            let rm = ps.state_mut(self.run_mean);
            for (r, &m) in rm.iter_mut().zip(means.iter()) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            let rv = ps.state_mut(self.run_var);
            for (r, &v) in rv.iter_mut().zip(vars.iter()) {
                *r = (1.0 - mom) * *r + mom * v;
            }
        }
        (y, NormCache { xhat, invstd })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &NormCache,
        dy: &Array4<Elem>,
        grads: &mut GradBuf,
    ) -> Array4<Elem> {
        let dim = dy.dim();
        let (n, _, h, w) = dim;
        let hw = h * w;
        let groups = self.group_count(n);
        let elems_per_group = dy.len() / groups;
        let dys = dy.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let gamma = ps.param(self.gamma);

        // Parameter gradients.
        {
            let mut dgamma = vec![0.0f64; self.channels];
            let mut dbeta = vec![0.0f64; self.channels];
            for g in 0..groups {
                for (off, ch) in self.group_planes(dim, g) {
                    let mut sg = 0.0f64;
                    let mut sb = 0.0f64;
                    for i in off..off + hw {
                        sg += (dys[i] * hs[i]) as f64;
                        sb += dys[i] as f64;
                    }
                    dgamma[ch] += sg;
                    dbeta[ch] += sb;
                }
            }
            for (g, &v) in grads[self.gamma.range()].iter_mut().zip(dgamma.iter()) {
                *g += v as Elem;
            }
            for (g, &v) in grads[self.beta.range()].iter_mut().zip(dbeta.iter()) {
                *g += v as Elem;
            }
        }

        // Input gradient: dx = invstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        // with means taken over each normalization group.
        let mut dx = Array4::<Elem>::zeros(dim);
        {
            let dxs = dx.as_slice_mut().expect("standard layout");
            for g in 0..groups {
                let mut m1 = 0.0f64;
                let mut m2 = 0.0f64;
                for (off, ch) in self.group_planes(dim, g) {
                    let gm = gamma[ch] as f64;
                    for i in off..off + hw {
                        let dxhat = dys[i] as f64 * gm;
                        m1 += dxhat;
                        m2 += dxhat * hs[i] as f64;
                    }
                }
                m1 /= elems_per_group as f64;
                m2 /= elems_per_group as f64;
                let is = cache.invstd[g] as f64;
                for (off, ch) in self.group_planes(dim, g) {
                    let gm = gamma[ch] as f64;
                    for i in off..off + hw {
                        let dxhat = dys[i] as f64 * gm;
                        dxs[i] = (is * (dxhat - m1 - hs[i] as f64 * m2)) as Elem;
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct PoolCache {
    argmax: Vec<usize>,
    x_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d { k, stride, pad }
    }

    fn run(&self, x: &Array4<Elem>) -> (Array4<Elem>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let ho = conv_out(h, self.k, self.stride, self.pad);
        let wo = conv_out(w, self.k, self.stride, self.pad);
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<Elem>::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for plane_idx in 0..n * c {
                let plane = plane_idx * h * w;
                for oh in 0..ho {
                    let ih0 = (oh * self.stride) as isize - self.pad as isize;
                    let ih_lo = ih0.max(0) as usize;
                    let ih_hi = ((ih0 + self.k as isize).min(h as isize)) as usize;
                    for ow in 0..wo {
                        let iw0 = (ow * self.stride) as isize - self.pad as isize;
                        let iw_lo = iw0.max(0) as usize;
                        let iw_hi = ((iw0 + self.k as isize).min(w as isize)) as usize;
                        let mut best = Elem::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ih in ih_lo..ih_hi {
                            let row = plane + ih * w;
                            for idx in row + iw_lo..row + iw_hi {
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let out = (plane_idx * ho + oh) * wo + ow;
                        ys[out] = best;
                        argmax[out] = best_idx;
                    }
                }
            }
        }
        (
            y,
            PoolCache {
                argmax,
                x_dim: (n, c, h, w),
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<Elem>) -> Array4<Elem> {
        self.run(x).0
    }

    pub fn forward_train(&self, x: &Array4<Elem>) -> (Array4<Elem>, PoolCache) {
        self.run(x)
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Array4<Elem>) -> Array4<Elem> {
        let mut dx = Array4::<Elem>::zeros(cache.x_dim);
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (out, &src) in cache.argmax.iter().enumerate() {
            dxs[src] += dy.as_slice().expect("standard layout")[out];
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, in_f: usize, out_f: usize) -> Self {
        Linear {
            in_f,
            out_f,
            w: alloc.alloc(out_f * in_f),
            b: alloc.alloc(out_f),
        }
    }

    fn weight<'a>(&self, ps: &'a ParamSet) -> ArrayView2<'a, Elem> {
        ArrayView2::from_shape((self.out_f, self.in_f), ps.param(self.w)).expect("slot shape")
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<Elem>) -> Array2<Elem> {
        let mut y = x.dot(&self.weight(ps).t());
        let b = Array1::from_iter(ps.param(self.b).iter().cloned());
        y += &b;
        y
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<Elem>,
        dy: &Array2<Elem>,
        grads: &mut GradBuf,
    ) -> Array2<Elem> {
        let dw = dy.t().dot(x);
        grads[self.w.range()]
            .iter_mut()
            .zip(dw.iter())
            .for_each(|(g, &v)| *g += v);
        for (j, g) in grads[self.b.range()].iter_mut().enumerate() {
            *g += dy.column(j).sum();
        }
        dy.dot(&self.weight(ps))
    }
}

// ---------------------------------------------------------------------------
// ReLU and global average pooling
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &mut Array4<Elem>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Backward through ReLU given the *post-activation* output.
pub fn relu_backward(y: &Array4<Elem>, dy: &mut Array4<Elem>) {
    dy.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn global_avg_pool(x: &Array4<Elem>) -> Array2<Elem> {
    let (n, c, h, w) = x.dim();
    let hw = (h * w) as Elem;
    let mut y = Array2::<Elem>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut sum = 0.0f64;
            for v in x.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), ci) {
                sum += *v as f64;
            }
            y[(ni, ci)] = (sum as Elem) / hw;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    dy: &ArrayView2<Elem>,
    x_dim: (usize, usize, usize, usize),
) -> Array4<Elem> {
    let (n, c, h, w) = x_dim;
    let hw = (h * w) as Elem;
    let mut dx = Array4::<Elem>::zeros(x_dim);
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[(ni, ci)] / hw;
            dx.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_x(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<Elem> {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution oracle.
    fn conv_naive(
        x: &Array4<Elem>,
        w: &Array4<Elem>, // (oc, ic, k, k)
        stride: usize,
        pad: usize,
    ) -> Array4<Elem> {
        let (n, c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let mut y = Array4::<Elem>::zeros((n, oc, ho, wo));
        for ni in 0..n {
            for o in 0..oc {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f32;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd
                                    {
                                        acc += x[(ni, ci, ih as usize, iw as usize)]
                                            * w[(o, ci, ki, kj)];
                                    }
                                }
                            }
                        }
                        y[(ni, o, oh, ow)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 3, 7), (1, 0, 1)] {
            let mut alloc = ParamAlloc::default();
            let conv = Conv2d::new(&mut alloc, 3, 4, k, stride, pad);
            let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
            for v in ps.params.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = random_x(&mut rng, (2, 3, 9, 9));
            let y = conv.forward_eval(&ps, &x);
            let w4 = Array4::from_shape_vec((4, 3, k, k), ps.params.clone()).unwrap();
            let oracle = conv_naive(&x, &w4, stride, pad);
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-4, "conv mismatch {a} vs {b}");
            }
        }
    }

    /// Finite-difference check of a scalar-valued function of the input.
    fn fd_check_input_grad(
        f: &dyn Fn(&Array4<Elem>) -> f32,
        g: &Array4<Elem>,
        x: &Array4<Elem>,
        tol: f32,
    ) {
        let h = 1e-2f32;
        let mut checked = 0;
        for idx in [(0, 0, 0, 0), (0, 0, 1, 2), (1, 0, 3, 3), (0, 1, 2, 1)] {
            if idx.0 >= x.dim().0 || idx.1 >= x.dim().1 || idx.2 >= x.dim().2 || idx.3 >= x.dim().3
            {
                continue;
            }
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = g[idx];
            assert!(
                (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(0.1),
                "input grad mismatch at {idx:?}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut alloc = ParamAlloc::default();
        let conv = Conv2d::new(&mut alloc, 2, 3, 3, 2, 1);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        for v in ps.params.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x = random_x(&mut rng, (2, 2, 6, 6));
        // Scalar objective: sum of outputs weighted by a fixed random tensor.
        let (y, cache) = conv.forward_train(&ps, &x);
        let wsum = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0f32));
        let dy = wsum.clone();
        let mut grads = vec![0.0; ps.params.len()];
        let dx = conv.backward(&ps, &cache, &dy, &mut grads);
        let psf = ps.clone();
        let f = |xq: &Array4<Elem>| {
            let yq = conv.forward_eval(&psf, xq);
            yq.iter().zip(wsum.iter()).map(|(a, b)| a * b).sum::<f32>()
        };
        fd_check_input_grad(&f, &dx, &x, 2e-2);

        // Weight gradient at a few positions.
        let h = 1e-2f32;
        for wi in [0usize, 5, 17] {
            let mut psp = ps.clone();
            psp.params[wi] += h;
            let mut psm = ps.clone();
            psm.params[wi] -= h;
            let yp = conv.forward_eval(&psp, &x);
            let ym = conv.forward_eval(&psm, &x);
            let fp: f32 = yp.iter().zip(wsum.iter()).map(|(a, b)| a * b).sum();
            let fm: f32 = ym.iter().zip(wsum.iter()).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grads[wi]).abs() <= 2e-2 * fd.abs().max(grads[wi].abs()).max(0.1),
                "weight grad mismatch at {wi}: fd {fd} vs {}",
                grads[wi]
            );
        }
    }

    #[test]
    fn group_norm_normalizes_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut alloc = ParamAlloc::default();
        let norm = Norm2d::new(&mut alloc, 4, NormKind::Group, 2);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        norm.init(&mut ps);
        // Random affine so gradients are non-trivial.
        for v in ps.param_mut(norm.gamma) {
            *v = rng.random_range(0.5..1.5);
        }
        for v in ps.param_mut(norm.beta) {
            *v = rng.random_range(-0.3..0.3);
        }
        let x = random_x(&mut rng, (2, 4, 5, 5));
        let (y, cache) = norm.forward_train(&mut ps, &x);

        // Normalized pre-affine activations have zero mean, unit variance per group.
        let hw = 25usize;
        for g in 0..norm.group_count(2) {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let mut cnt = 0usize;
            let hs = cache.xhat.as_slice().unwrap();
            for (off, _) in norm.group_planes(x.dim(), g) {
                for &v in &hs[off..off + hw] {
                    sum += v as f64;
                    sq += (v as f64).powi(2);
                    cnt += 1;
                }
            }
            assert!((sum / cnt as f64).abs() < 1e-4);
            assert!((sq / cnt as f64 - 1.0).abs() < 1e-3);
        }

        let wsum = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0f32));
        let mut grads = vec![0.0; ps.params.len()];
        let dx = norm.backward(&ps, &cache, &wsum, &mut grads);
        let psf = ps.clone();
        let f = |xq: &Array4<Elem>| {
            let yq = norm.forward_eval(&psf, xq);
            yq.iter().zip(wsum.iter()).map(|(a, b)| a * b).sum::<f32>()
        };
        fd_check_input_grad(&f, &dx, &x, 3e-2);
    }

    #[test]
    fn batch_norm_train_vs_eval_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut alloc = ParamAlloc::default();
        let norm = Norm2d::new(&mut alloc, 3, NormKind::Batch, 1);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        norm.init(&mut ps);
        let x = random_x(&mut rng, (4, 3, 4, 4));
        let before = ps.state.clone();
        let (_, _) = norm.forward_train(&mut ps, &x);
        assert_ne!(before, ps.state, "running stats must move in train mode");
        // Eval path consumes running stats and is deterministic.
        let y1 = norm.forward_eval(&ps, &x);
        let y2 = norm.forward_eval(&ps, &x);
        assert_eq!(y1, y2);
    }

    #[test]
    fn maxpool_matches_scalar_path_and_routes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = MaxPool2d::new(3, 2, 1);
        let x = random_x(&mut rng, (1, 2, 6, 6));
        let (y, cache) = pool.forward_train(&x);
        assert_eq!(y.dim(), (1, 2, 3, 3));
        // Every output equals the max over its window.
        for ((ni, ci, oh, ow), &v) in y.indexed_iter() {
            let mut best = f32::NEG_INFINITY;
            for ki in 0..3usize {
                for kj in 0..3usize {
                    let ih = (oh * 2 + ki) as isize - 1;
                    let iw = (ow * 2 + kj) as isize - 1;
                    if ih >= 0 && iw >= 0 && (ih as usize) < 6 && (iw as usize) < 6 {
                        best = best.max(x[(ni, ci, ih as usize, iw as usize)]);
                    }
                }
            }
            assert_eq!(v, best);
        }
        let dy = Array4::from_elem(y.dim(), 1.0f32);
        let dx = pool.backward(&cache, &dy);
        // Total gradient mass is conserved.
        assert!((dx.sum() - dy.sum()).abs() < 1e-5);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut alloc = ParamAlloc::default();
        let lin = Linear::new(&mut alloc, 5, 3);
        let mut ps = ParamSet::zeros(alloc.param_len(), alloc.state_len());
        for v in ps.params.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0f32));
        let wsum = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0f32));
        let y = lin.forward(&ps, &x);
        assert_eq!(y.dim(), (4, 3));
        let mut grads = vec![0.0; ps.params.len()];
        let dx = lin.backward(&ps, &x, &wsum, &mut grads);
        let h = 1e-2f32;
        // input grad
        let f = |xq: &Array2<Elem>| -> f32 {
            lin.forward(&ps, xq)
                .iter()
                .zip(wsum.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut xp = x.clone();
        xp[(1, 2)] += h;
        let mut xm = x.clone();
        xm[(1, 2)] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!((fd - dx[(1, 2)]).abs() < 2e-2 * fd.abs().max(0.1));
        // weight grad
        for wi in [0usize, 7, 14] {
            let mut psp = ps.clone();
            psp.params[wi] += h;
            let mut psm = ps.clone();
            psm.params[wi] -= h;
            let fp: f32 = lin
                .forward(&psp, &x)
                .iter()
                .zip(wsum.iter())
                .map(|(a, b)| a * b)
                .sum();
            let fm: f32 = lin
                .forward(&psm, &x)
                .iter()
                .zip(wsum.iter())
                .map(|(a, b)| a * b)
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grads[wi]).abs() < 2e-2 * fd.abs().max(grads[wi].abs()).max(0.1));
        }
    }

    #[test]
    fn gap_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_x(&mut rng, (2, 3, 4, 4));
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        assert!((y[(0, 0)] - x.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).mean().unwrap()).abs() < 1e-6);
        let dy = Array2::from_elem((2, 3), 1.0f32);
        let dx = global_avg_pool_backward(&dy.view(), x.dim());
        assert!((dx.sum() - 6.0).abs() < 1e-5);
    }
}
