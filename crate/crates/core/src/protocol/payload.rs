//! What a client sends to the server after local training.
//!
//! The wire encoding is the bare parameter vector: every weight matrix
//! (row-major) followed by its bias, layer by layer in forward order, each
//! value as a little-endian `f64`. Architecture is fixed for a run and known
//! to both sides, so no header is sent; an encoded payload is exactly
//! `8 * param_count` bytes.

use crate::nn::{BackboneNet, SplitModel};

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Shared backbone only; the head stays on the client.
    Backbone(BackboneNet),
    /// Whole model (FedAvg).
    Full(SplitModel),
}

impl Payload {
    pub fn param_count(&self) -> usize {
        match self {
            Payload::Backbone(b) => b.param_count(),
            Payload::Full(m) => m.param_count(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.param_count());
        let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        match self {
            Payload::Backbone(b) => b.params().for_each(&mut push),
            Payload::Full(m) => m.params().for_each(&mut push),
        }
        out
    }

    pub fn carries_head(&self) -> bool {
        matches!(self, Payload::Full(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub payload: Payload,
}
