//! Per-position encoder / trunk / two-head / post-net model.
//!
//! ```text
//! token -> embedding -> encoder (tanh) -> [ . ; language one-hot ] -> trunk (tanh)
//!       -> head_lbs | head_rrs (linear)  = pre-postnet frame y
//!       -> y + postnet(y)                = post-postnet frame
//! ```
//!
//! The trunk and post net are shared by both heads. All parameters live in one
//! flat `f64` vector split into named segments.

mod adam;
mod net;

pub use adam::{adam_step, AdamState};
pub use net::{
    finite_diff_check, forward, forward_with, infer, loss_and_grad, loss_and_grad_with, loss_only,
    FrameOutput,
};

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTopology {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub trunk_dim: usize,
    pub frame_dim: usize,
    pub postnet_hidden: usize,
    pub num_languages: usize,
}

impl ModelTopology {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("trunk_dim", self.trunk_dim),
            ("frame_dim", self.frame_dim),
            ("postnet_hidden", self.postnet_hidden),
            ("num_languages", self.num_languages),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Validation(format!("topology.{name} must be >= 1"))),
            None => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Embedding,
    Encoder,
    Trunk,
    HeadLbs,
    HeadRrs,
    Postnet,
}

impl Segment {
    pub const ALL: [Segment; 6] = [
        Segment::Embedding,
        Segment::Encoder,
        Segment::Trunk,
        Segment::HeadLbs,
        Segment::HeadRrs,
        Segment::Postnet,
    ];
}

/// Which projection head a forward pass routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSelector {
    Lbs,
    Rrs,
}

impl HeadSelector {
    pub fn segment(self) -> Segment {
        match self {
            HeadSelector::Lbs => Segment::HeadLbs,
            HeadSelector::Rrs => Segment::HeadRrs,
        }
    }
}

/// A dense `rows x cols` row-major weight block followed by `rows` biases
/// (no bias when `bias` is false).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub bias: bool,
}

impl Dense {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    pub fn biases(&self) -> Range<usize> {
        let w = self.weights().end;
        w..w + if self.bias { self.rows } else { 0 }
    }

    fn end(&self) -> usize {
        self.biases().end
    }
}

/// Offsets of every block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub(crate) topology: ModelTopology,
    pub(crate) embedding: Dense,
    pub(crate) encoder: Dense,
    pub(crate) trunk: Dense,
    pub(crate) head_lbs: Dense,
    pub(crate) head_rrs: Dense,
    pub(crate) postnet_in: Dense,
    pub(crate) postnet_out: Dense,
}

impl Layout {
    fn new(t: &ModelTopology) -> Self {
        let mut at = 0;
        let mut block = |rows, cols, bias| {
            let d = Dense {
                offset: at,
                rows,
                cols,
                bias,
            };
            at = d.end();
            d
        };
        let embedding = block(t.vocab_size, t.embed_dim, false);
        let encoder = block(t.encoder_hidden, t.embed_dim, true);
        let trunk = block(t.trunk_dim, t.encoder_hidden + t.num_languages, true);
        let head_lbs = block(t.frame_dim, t.trunk_dim, true);
        let head_rrs = block(t.frame_dim, t.trunk_dim, true);
        let postnet_in = block(t.postnet_hidden, t.frame_dim, true);
        let postnet_out = block(t.frame_dim, t.postnet_hidden, true);
        Self {
            topology: *t,
            embedding,
            encoder,
            trunk,
            head_lbs,
            head_rrs,
            postnet_in,
            postnet_out,
        }
    }

    pub fn len(&self) -> usize {
        self.postnet_out.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, seg: Segment) -> Range<usize> {
        match seg {
            Segment::Embedding => self.embedding.offset..self.embedding.end(),
            Segment::Encoder => self.encoder.offset..self.encoder.end(),
            Segment::Trunk => self.trunk.offset..self.trunk.end(),
            Segment::HeadLbs => self.head_lbs.offset..self.head_lbs.end(),
            Segment::HeadRrs => self.head_rrs.offset..self.head_rrs.end(),
            Segment::Postnet => self.postnet_in.offset..self.postnet_out.end(),
        }
    }

    pub(crate) fn head(&self, head: HeadSelector) -> Dense {
        match head {
            HeadSelector::Lbs => self.head_lbs,
            HeadSelector::Rrs => self.head_rrs,
        }
    }

    fn blocks(&self) -> [Dense; 7] {
        [
            self.embedding,
            self.encoder,
            self.trunk,
            self.head_lbs,
            self.head_rrs,
            self.postnet_in,
            self.postnet_out,
        ]
    }
}

/// The model's parameters: one flat vector plus its segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub values: Vec<f64>,
    layout: Layout,
}

impl ParameterSet {
    pub fn zeros(topology: &ModelTopology) -> Self {
        let layout = topology.layout();
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(topology: &ModelTopology, values: Vec<f64>) -> Result<Self> {
        let layout = topology.layout();
        if values.len() != layout.len() {
            return Err(Error::Validation(format!(
                "{} parameter values for a topology needing {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn topology(&self) -> &ModelTopology {
        &self.layout.topology
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        &self.values[self.layout.segment(seg)]
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut [f64] {
        let r = self.layout.segment(seg);
        &mut self.values[r]
    }
}

/// Gradient with the same length and segmentation as the parameters it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Gradient {
        Gradient {
            values: self.values.iter().map(|v| v * scale).collect(),
        }
    }
}

/// Pre- and post-postnet mean squared errors of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pre_postnet_mse: f64,
    pub post_postnet_mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(pre: f64, post: f64) -> Self {
        Self {
            pre_postnet_mse: pre,
            post_postnet_mse: post,
            total: pre + post,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `(topology, seed)`.
pub fn init_params(topology: &ModelTopology, seed: u64) -> ParameterSet {
    let mut params = ParameterSet::zeros(topology);
    let mut rng = rng::stream(seed, "init", 0);
    for block in params.layout.blocks() {
        let bound = (6.0 / (block.rows + block.cols) as f64).sqrt();
        for v in &mut params.values[block.weights()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn topo() -> ModelTopology {
        ModelTopology {
            vocab_size: 7,
            embed_dim: 3,
            encoder_hidden: 5,
            trunk_dim: 4,
            frame_dim: 3,
            postnet_hidden: 2,
            num_languages: 2,
        }
    }

    #[test]
    fn segments_cover_vector_exactly() {
        let layout = topo().layout();
        let mut at = 0;
        for seg in Segment::ALL {
            let r = layout.segment(seg);
            assert_eq!(r.start, at, "{seg:?}");
            at = r.end;
        }
        assert_eq!(at, layout.len());
    }

    #[test]
    fn head_segment_size() {
        let layout = topo().layout();
        assert_eq!(layout.segment(Segment::HeadLbs).len(), (4 + 1) * 3);
        assert_eq!(layout.segment(Segment::HeadRrs).len(), 15);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_params(&topo(), 0);
        assert_eq!(a.values, init_params(&topo(), 0).values);
        assert_ne!(a.values, init_params(&topo(), 1).values);
        let layout = a.layout().clone();
        for block in layout.blocks() {
            assert!(a.values[block.biases()].iter().all(|&b| b == 0.0));
            let bound = (6.0 / (block.rows + block.cols) as f64).sqrt();
            assert!(a.values[block.weights()].iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn zero_counts_rejected() {
        let mut t = topo();
        t.trunk_dim = 0;
        assert!(t.validate().is_err());
    }
}
