//! Minimal CPU neural-network stack: f32 tensors, explicit backward passes,
//! flat parameter storage.
//!
//! All trainable parameters of one network live in a single `Vec<f32>`, all
//! non-trainable state (batch-norm running statistics) in a second one.
//! Layers hold `(offset, len)` slots into those vectors. This makes
//! snapshot/restore, optimizer steps, parameter masking, and bitwise
//! equality checks trivial: they are all plain slice operations.

mod layers;
mod opt;
mod resnet;

pub use layers::{relu_backward, relu_forward, Conv2d, Linear, MaxPool2d, Norm2d, NormKind};
pub use opt::{cosine_warmup_lr, Adam, Sgd};
pub use resnet::{EncoderArch, MemberCache, MemberLayout};

use ndarray::Array2;

/// Tensor element type for network parameters and activations.
pub type Elem = f32;

/// Contiguous range inside a flat parameter or state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Offset allocator used while building a layer graph.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    params: usize,
    state: usize,
    norm_affine: Vec<Slot>,
}

impl ParamAlloc {
    pub fn alloc(&mut self, len: usize) -> Slot {
        let s = Slot {
            offset: self.params,
            len,
        };
        self.params += len;
        s
    }

    /// Allocates a trainable slot and records it as a normalization affine
    /// parameter (gamma or beta), for scoped adaptation.
    pub fn alloc_norm_affine(&mut self, len: usize) -> Slot {
        let s = self.alloc(len);
        self.norm_affine.push(s);
        s
    }

    pub fn alloc_state(&mut self, len: usize) -> Slot {
        let s = Slot {
            offset: self.state,
            len,
        };
        self.state += len;
        s
    }

    pub fn param_len(&self) -> usize {
        self.params
    }

    pub fn state_len(&self) -> usize {
        self.state
    }

    pub fn norm_affine_slots(&self) -> &[Slot] {
        &self.norm_affine
    }
}

/// Flat storage for one network's parameters and running state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Elem>,
    pub state: Vec<Elem>,
}

impl ParamSet {
    pub fn zeros(param_len: usize, state_len: usize) -> Self {
        ParamSet {
            params: vec![0.0; param_len],
            state: vec![0.0; state_len],
        }
    }

    pub fn param(&self, slot: Slot) -> &[Elem] {
        &self.params[slot.range()]
    }

    pub fn param_mut(&mut self, slot: Slot) -> &mut [Elem] {
        &mut self.params[slot.range()]
    }

    pub fn state_slice(&self, slot: Slot) -> &[Elem] {
        &self.state[slot.range()]
    }

    pub fn state_mut(&mut self, slot: Slot) -> &mut [Elem] {
        &mut self.state[slot.range()]
    }
}

/// Gradient buffer matching a `ParamSet`'s trainable vector.
pub type GradBuf = Vec<Elem>;

/// Cast f32 logits to f64 and apply a numerically stable rowwise softmax.
pub fn logits_to_probs(logits: &Array2<Elem>) -> Array2<f64> {
    let wide = logits.mapv(|v| v as f64);
    crate::objectives::softmax_rows(&wide)
}
