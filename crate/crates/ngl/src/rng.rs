//! Deterministic randomness, organized as a tree of named streams.
//!
//! Every random decision in the crate is drawn from a stream addressed
//! by a path of labels under a root seed, e.g.
//! `root(seed).child("cluster").child_addr(top).child("type")`. Because
//! the stream depends only on its path and not on when it is first
//! touched, lazily materialized structures come out identical no matter
//! which order their pieces are visited in.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A 256-bit key identifying one stream in the derivation tree.
///
/// Keys are cheap to copy and compare; deriving a child never mutates
/// the parent.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    state: [u8; 32],
}

impl StreamKey {
    /// Root of the derivation tree for one run.
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"ngl-root");
        h.update(seed.to_le_bytes());
        StreamKey { state: h.finalize().into() }
    }

    /// Child stream named by a string label.
    pub fn child(&self, label: &str) -> Self {
        self.child_bytes(label.as_bytes())
    }

    /// Child stream named by an integer (level numbers, indices, ...).
    pub fn child_u64(&self, n: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update(b"u64");
        h.update(n.to_le_bytes());
        StreamKey { state: h.finalize().into() }
    }

    /// Child stream named by raw bytes. Labels and byte strings live in
    /// separate namespaces, so `child("ab")` and `child_bytes(b"ab")`
    /// differ.
    pub fn child_bytes(&self, bytes: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(self.state);
        h.update(b"str");
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
        StreamKey { state: h.finalize().into() }
    }

    /// Child stream named by a vertex address. Generation, path length
    /// and path bits all enter the name, so addresses from truncations
    /// of different depths stay separate.
    pub fn child_addr(&self, v: &crate::canopy::VertexAddr) -> Self {
        let mut buf = [0u8; 16];
        buf[..4].copy_from_slice(&v.generation().to_le_bytes());
        buf[4..8].copy_from_slice(&v.path_len().to_le_bytes());
        buf[8..].copy_from_slice(&v.path_bits().to_le_bytes());
        self.child_bytes(&buf)
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.state)
    }
}

impl std::fmt::Debug for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StreamKey({:02x}{:02x}{:02x}{:02x}..)", self.state[0], self.state[1], self.state[2], self.state[3])
    }
}
