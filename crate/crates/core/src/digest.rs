//! 64-bit FNV-1a hashing and order-independent parameter digests.

use crate::tensor::{Module, Scalar};

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(OFFSET)
    }

    /// Continues hashing from a previously finished state.
    pub fn resume(state: u64) -> Self {
        Self(state)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Digest over every tensor of `module` (trainable, frozen and buffers).
///
/// Each tensor is hashed with its name, shape and little-endian bytes; the
/// per-tensor hashes are combined with wrapping addition so the result does
/// not depend on visiting order.
pub fn module_digest<T: Scalar>(module: &dyn Module<T>) -> u64 {
    let mut acc = 0u64;
    let mut bytes = Vec::new();
    module.visit("", &mut |name, p| {
        let mut h = Fnv1a::new();
        h.write(name.as_bytes());
        h.write(&[0xff, T::DTYPE]);
        for &d in &p.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        bytes.clear();
        for &v in &p.value {
            v.write_le(&mut bytes);
        }
        h.write(&bytes);
        acc = acc.wrapping_add(h.finish());
    });
    acc
}
