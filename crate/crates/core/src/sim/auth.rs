use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SimRng;
use crate::error::{Error, Result};
use crate::membership::NodeId;

/// Authentication tag over a byte string, bound to one node.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag([u8; 32]);

impl Tag {
    /// A tag that verifies for nobody.
    pub const NONE: Tag = Tag([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

/// Engine-held secret keys. Tags are keyed hashes, so producing a tag for a
/// node requires that node's secret, which never leaves the registry.
#[derive(Debug, Default, Clone)]
pub struct KeyRegistry {
    secrets: BTreeMap<NodeId, [u8; 32]>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, node: NodeId, rng: &mut SimRng) {
        self.secrets.entry(node).or_insert_with(|| rng.random());
    }

    pub fn is_registered(&self, node: NodeId) -> bool {
        self.secrets.contains_key(&node)
    }

    pub fn sign(&self, node: NodeId, bytes: &[u8]) -> Result<Tag> {
        let secret = self
            .secrets
            .get(&node)
            .ok_or_else(|| Error::input(format!("unknown node {node}")))?;
        Ok(Self::mac(secret, node, bytes))
    }

    pub fn verify(&self, node: NodeId, bytes: &[u8], tag: &Tag) -> Result<bool> {
        let secret = self
            .secrets
            .get(&node)
            .ok_or_else(|| Error::input(format!("unknown node {node}")))?;
        Ok(Self::mac(secret, node, bytes) == *tag)
    }

    /// `verify` that treats unknown nodes as a failed check.
    pub fn check(&self, node: NodeId, bytes: &[u8], tag: &Tag) -> bool {
        self.verify(node, bytes, tag).unwrap_or(false)
    }

    /// Signing capability limited to `nodes`. Handed to adversarial code so it
    /// can act as the nodes it controls and nobody else.
    pub fn signer(&self, nodes: BTreeSet<NodeId>) -> Signer<'_> {
        Signer {
            registry: self,
            nodes,
        }
    }

    fn mac(secret: &[u8; 32], node: NodeId, bytes: &[u8]) -> Tag {
        let digest = Sha256::new()
            .chain_update(secret)
            .chain_update(node.0.to_le_bytes())
            .chain_update(bytes)
            .finalize();
        Tag(digest.into())
    }
}

pub struct Signer<'a> {
    registry: &'a KeyRegistry,
    nodes: BTreeSet<NodeId>,
}

impl Signer<'_> {
    pub fn sign(&self, node: NodeId, bytes: &[u8]) -> Result<Tag> {
        if !self.nodes.contains(&node) {
            return Err(Error::input(format!("no signing capability for {node}")));
        }
        self.registry.sign(node, bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng_stream;

    fn registry() -> KeyRegistry {
        let mut rng = rng_stream(7, 0);
        let mut keys = KeyRegistry::new();
        for i in 0..4 {
            keys.register(NodeId(i), &mut rng);
        }
        keys
    }

    #[test]
    fn round_trip_verifies() {
        let keys = registry();
        let tag = keys.sign(NodeId(0), b"hello").unwrap();
        assert!(keys.verify(NodeId(0), b"hello", &tag).unwrap());
    }

    #[test]
    fn tag_bound_to_signer() {
        let keys = registry();
        let tag = keys.sign(NodeId(0), b"hello").unwrap();
        assert!(!keys.verify(NodeId(1), b"hello", &tag).unwrap());
    }

    #[test]
    fn mutated_payload_rejected() {
        let keys = registry();
        let tag = keys.sign(NodeId(0), b"hello").unwrap();
        assert!(!keys.verify(NodeId(0), b"hellp", &tag).unwrap());
        assert!(!keys.check(NodeId(0), b"hello", &Tag::NONE));
    }

    #[test]
    fn unknown_node_is_invalid_input() {
        let keys = registry();
        assert!(keys.sign(NodeId(9), b"x").is_err());
        assert!(keys.verify(NodeId(9), b"x", &Tag::NONE).is_err());
        assert!(!keys.check(NodeId(9), b"x", &Tag::NONE));
    }

    #[test]
    fn restricted_signer_cannot_forge_others() {
        let keys = registry();
        let signer = keys.signer([NodeId(2)].into());
        assert!(signer.sign(NodeId(2), b"x").is_ok());
        assert!(signer.sign(NodeId(0), b"x").is_err());
    }
}
