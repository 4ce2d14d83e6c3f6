//! ResNet10-style encoder + linear classifier: a 7x7 stride-2 stem, 3x3
//! stride-2 max pool, four residual stages of one basic block each, global
//! average pooling, and a fully connected head.

use ndarray::{Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, Conv2d, ConvCache,
    Linear, MaxPool2d, Norm2d, NormCache, PoolCache,
};
use super::{Elem, GradBuf, NormKind, ParamAlloc, ParamSet, Slot};
use crate::error::{Error, Result};

/// Convolutional encoder descriptor: input side length and the four stage
/// widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_hw: usize,
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl EncoderArch {
    /// Full-size profile: 256x256 single-channel input, widths 64..512.
    pub fn full() -> Self {
        EncoderArch {
            input_hw: 256,
            in_channels: 1,
            widths: [64, 128, 256, 512],
        }
    }

    /// Desk-scale profile small enough for CPU test runs.
    pub fn desk() -> Self {
        EncoderArch {
            input_hw: 64,
            in_channels: 1,
            widths: [8, 16, 32, 64],
        }
    }
}

struct BasicBlock {
    conv1: Conv2d,
    norm1: Norm2d,
    conv2: Conv2d,
    norm2: Norm2d,
    down: Option<(Conv2d, Norm2d)>,
}

pub struct BlockCache {
    conv1: ConvCache,
    norm1: NormCache,
    relu1: Array4<Elem>,
    conv2: ConvCache,
    norm2: NormCache,
    down: Option<(ConvCache, NormCache)>,
    out: Array4<Elem>,
}

impl BasicBlock {
    fn new(
        alloc: &mut ParamAlloc,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        kind: NormKind,
        groups: usize,
    ) -> Self {
        let conv1 = Conv2d::new(alloc, in_ch, out_ch, 3, stride, 1);
        let norm1 = Norm2d::new(alloc, out_ch, kind, groups);
        let conv2 = Conv2d::new(alloc, out_ch, out_ch, 3, 1, 1);
        let norm2 = Norm2d::new(alloc, out_ch, kind, groups);
        let down = if stride != 1 || in_ch != out_ch {
            let c = Conv2d::new(alloc, in_ch, out_ch, 1, stride, 0);
            let n = Norm2d::new(alloc, out_ch, kind, groups);
            Some((c, n))
        } else {
            None
        };
        BasicBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            down,
        }
    }

    fn forward_eval(&self, ps: &ParamSet, x: &Array4<Elem>) -> Array4<Elem> {
        let mut h = self.norm1.forward_eval(ps, &self.conv1.forward_eval(ps, x));
        relu_forward(&mut h);
        let mut out = self.norm2.forward_eval(ps, &self.conv2.forward_eval(ps, &h));
        match &self.down {
            Some((c, nm)) => out += &nm.forward_eval(ps, &c.forward_eval(ps, x)),
            None => out += x,
        }
        relu_forward(&mut out);
        out
    }

    fn forward_train(&self, ps: &mut ParamSet, x: &Array4<Elem>) -> (Array4<Elem>, BlockCache) {
        let (c1, c1c) = self.conv1.forward_train(ps, x);
        let (mut h, n1c) = self.norm1.forward_train(ps, &c1);
        relu_forward(&mut h);
        let relu1 = h.clone();
        let (c2, c2c) = self.conv2.forward_train(ps, &h);
        let (mut out, n2c) = self.norm2.forward_train(ps, &c2);
        let down = match &self.down {
            Some((c, nm)) => {
                let (d, dc) = c.forward_train(ps, x);
                let (dn, dnc) = nm.forward_train(ps, &d);
                out += &dn;
                Some((dc, dnc))
            }
            None => {
                out += x;
                None
            }
        };
        relu_forward(&mut out);
        let cache = BlockCache {
            conv1: c1c,
            norm1: n1c,
            relu1,
            conv2: c2c,
            norm2: n2c,
            down,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(
        &self,
        ps: &ParamSet,
        cache: &BlockCache,
        dy: &Array4<Elem>,
        grads: &mut GradBuf,
    ) -> Array4<Elem> {
        let mut dsum = dy.clone();
        relu_backward(&cache.out, &mut dsum);
        // Main branch.
        let dc2 = self.norm2.backward(ps, &cache.norm2, &dsum, grads);
        let mut dh = self.conv2.backward(ps, &cache.conv2, &dc2, grads);
        relu_backward(&cache.relu1, &mut dh);
        let dc1 = self.norm1.backward(ps, &cache.norm1, &dh, grads);
        let mut dx = self.conv1.backward(ps, &cache.conv1, &dc1, grads);
        // Shortcut branch.
        match (&self.down, &cache.down) {
            (Some((c, nm)), Some((dc, dnc))) => {
                let dd = nm.backward(ps, dnc, &dsum, grads);
                dx += &c.backward(ps, dc, &dd, grads);
            }
            (None, None) => dx += &dsum,
            _ => unreachable!("cache shape matches layer shape"),
        }
        dx
    }
}

/// Slot layout and layer graph of one ensemble member. Identical for every
/// member of an ensemble; members differ only in their `ParamSet` contents.
pub struct MemberLayout {
    pub arch: EncoderArch,
    pub num_classes: usize,
    pub norm_kind: NormKind,
    pub num_groups: usize,
    stem: Conv2d,
    stem_norm: Norm2d,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock>,
    fc: Linear,
    param_len: usize,
    state_len: usize,
    norm_affine: Vec<Slot>,
}

pub struct MemberCache {
    stem: ConvCache,
    stem_norm: NormCache,
    stem_relu: Array4<Elem>,
    pool: PoolCache,
    blocks: Vec<BlockCache>,
    gap_in_dim: (usize, usize, usize, usize),
    fc_in: Array2<Elem>,
}

impl MemberLayout {
    pub fn new(
        arch: EncoderArch,
        num_classes: usize,
        norm_kind: NormKind,
        num_groups: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        if matches!(norm_kind, NormKind::Group) {
            for w in arch.widths {
                if num_groups == 0 || w % num_groups != 0 {
                    return Err(Error::validation(format!(
                        "num_groups {num_groups} does not divide channel width {w}"
                    )));
                }
            }
        }
        let mut alloc = ParamAlloc::default();
        let w = arch.widths;
        let stem = Conv2d::new(&mut alloc, arch.in_channels, w[0], 7, 2, 3);
        let stem_norm = Norm2d::new(&mut alloc, w[0], norm_kind, num_groups);
        let pool = MaxPool2d::new(3, 2, 1);
        let mut blocks = Vec::with_capacity(4);
        blocks.push(BasicBlock::new(&mut alloc, w[0], w[0], 1, norm_kind, num_groups));
        blocks.push(BasicBlock::new(&mut alloc, w[0], w[1], 2, norm_kind, num_groups));
        blocks.push(BasicBlock::new(&mut alloc, w[1], w[2], 2, norm_kind, num_groups));
        blocks.push(BasicBlock::new(&mut alloc, w[2], w[3], 2, norm_kind, num_groups));
        let fc = Linear::new(&mut alloc, w[3], num_classes);
        Ok(MemberLayout {
            arch,
            num_classes,
            norm_kind,
            num_groups,
            stem,
            stem_norm,
            pool,
            blocks,
            fc,
            param_len: alloc.param_len(),
            state_len: alloc.state_len(),
            norm_affine: alloc.norm_affine_slots().to_vec(),
        })
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn state_len(&self) -> usize {
        self.state_len
    }

    /// Boolean mask over the trainable vector marking normalization affine
    /// parameters (gamma/beta of every norm layer).
    pub fn norm_affine_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.param_len];
        for s in &self.norm_affine {
            for v in &mut mask[s.range()] {
                *v = true;
            }
        }
        mask
    }

    pub fn norm_layer_count(&self) -> usize {
        self.norm_affine.len() / 2
    }

    /// Fan-in-scaled normal initialization; the seed fully determines the
    /// initial parameters.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::zeros(self.param_len, self.state_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_conv = |conv: &Conv2d, ps: &mut ParamSet, rng: &mut ChaCha8Rng| {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            for v in ps.param_mut(conv.w) {
                *v = dist.sample(rng) as Elem;
            }
        };
        init_conv(&self.stem, &mut ps, &mut rng);
        self.stem_norm.init(&mut ps);
        for b in &self.blocks {
            init_conv(&b.conv1, &mut ps, &mut rng);
            b.norm1.init(&mut ps);
            init_conv(&b.conv2, &mut ps, &mut rng);
            b.norm2.init(&mut ps);
            if let Some((c, nm)) = &b.down {
                init_conv(c, &mut ps, &mut rng);
                nm.init(&mut ps);
            }
        }
        let std = (1.0 / self.fc.in_f as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        for v in ps.param_mut(self.fc.w) {
            *v = dist.sample(&mut rng) as Elem;
        }
        for v in ps.param_mut(self.fc.b) {
            *v = 0.0;
        }
        ps
    }

    /// Rebuild this layout with a different normalization kind. Trainable
    /// parameter layout is unchanged (per-channel gamma/beta for both kinds),
    /// so existing parameter vectors remain valid.
    pub fn with_norm(&self, kind: NormKind, num_groups: usize) -> Result<Self> {
        let next = MemberLayout::new(self.arch, self.num_classes, kind, num_groups)?;
        debug_assert_eq!(next.param_len, self.param_len);
        Ok(next)
    }

    pub fn check_input(&self, x: &Array4<Elem>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.arch.in_channels || h != self.arch.input_hw || w != self.arch.input_hw {
            return Err(Error::shape(format!(
                "expected input {}x{}x{}, got {c}x{h}x{w}",
                self.arch.in_channels, self.arch.input_hw, self.arch.input_hw
            )));
        }
        Ok(())
    }

    /// Deterministic inference pass: logits for a batch.
    pub fn forward_eval(&self, ps: &ParamSet, x: &Array4<Elem>) -> Result<Array2<Elem>> {
        self.check_input(x)?;
        let mut h = self.stem_norm.forward_eval(ps, &self.stem.forward_eval(ps, x));
        relu_forward(&mut h);
        let mut h = self.pool.forward_eval(&h);
        for b in &self.blocks {
            h = b.forward_eval(ps, &h);
        }
        let feat = global_avg_pool(&h);
        Ok(self.fc.forward(ps, &feat))
    }

    /// Gradient-ready pass; batch norm (if present) uses batch statistics and
    /// updates running estimates.
    pub fn forward_train(
        &self,
        ps: &mut ParamSet,
        x: &Array4<Elem>,
    ) -> Result<(Array2<Elem>, MemberCache)> {
        self.check_input(x)?;
        let (s, stem_c) = self.stem.forward_train(ps, x);
        let (mut h, stem_nc) = self.stem_norm.forward_train(ps, &s);
        relu_forward(&mut h);
        let stem_relu = h.clone();
        let (mut h, pool_c) = self.pool.forward_train(&h);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_train(ps, &h);
            blocks.push(cache);
            h = next;
        }
        let gap_in_dim = h.dim();
        let feat = global_avg_pool(&h);
        let logits = self.fc.forward(ps, &feat);
        Ok((
            logits,
            MemberCache {
                stem: stem_c,
                stem_norm: stem_nc,
                stem_relu,
                pool: pool_c,
                blocks,
                gap_in_dim,
                fc_in: feat,
            },
        ))
    }

    /// Backpropagate `dlogits`, accumulating parameter gradients.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &MemberCache,
        dlogits: &Array2<Elem>,
        grads: &mut GradBuf,
    ) {
        let dfeat = self.fc.backward(ps, &cache.fc_in, dlogits, grads);
        let mut dh = global_avg_pool_backward(&dfeat.view(), cache.gap_in_dim);
        for (b, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            dh = b.backward(ps, bc, &dh, grads);
        }
        let mut dh = self.pool.backward(&cache.pool, &dh);
        relu_backward(&cache.stem_relu, &mut dh);
        let ds = self.stem_norm.backward(ps, &cache.stem_norm, &dh, grads);
        self.stem.backward(ps, &cache.stem, &ds, grads);
    }
}
