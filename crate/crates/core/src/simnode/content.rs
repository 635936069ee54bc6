//! Deterministic file content.
//!
//! The bytes of `path` on a node with seed `s` are the ChaCha8 keystream
//! (`rand_chacha::ChaCha8Rng`, stream 0) seeded with
//! `SHA-256("datastage-content-v1" || s as u64 little-endian || path)`.
//! The stream is produced in 4 KiB blocks, so any chunking of reads yields
//! the same bytes.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checksum::ChecksumType;

pub const CONTENT_DOMAIN: &[u8] = b"datastage-content-v1";
const BLOCK: usize = 4096;

pub fn content_key(seed: u64, path: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(CONTENT_DOMAIN);
    h.update(seed.to_le_bytes());
    h.update(path.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone)]
pub struct ContentStream {
    rng: ChaCha8Rng,
    buf: Box<[u8; BLOCK]>,
    pos: usize,
}

impl ContentStream {
    pub fn new(seed: u64, path: &str) -> Self {
        Self {
            rng: ChaCha8Rng::from_seed(content_key(seed, path)),
            buf: Box::new([0; BLOCK]),
            pos: BLOCK,
        }
    }

    pub fn fill(&mut self, out: &mut [u8]) {
        let mut done = 0;
        while done < out.len() {
            if self.pos == BLOCK {
                self.rng.fill_bytes(&mut self.buf[..]);
                self.pos = 0;
            }
            let n = (BLOCK - self.pos).min(out.len() - done);
            out[done..done + n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
            self.pos += n;
            done += n;
        }
    }
}

pub fn content_bytes(seed: u64, path: &str, size: u64) -> Vec<u8> {
    let mut out = vec![0u8; size as usize];
    ContentStream::new(seed, path).fill(&mut out);
    out
}

pub fn content_digest(seed: u64, path: &str, size: u64, ty: ChecksumType) -> String {
    let mut stream = ContentStream::new(seed, path);
    let mut hasher = ty.hasher();
    let mut buf = vec![0u8; 64 * 1024];
    let mut left = size;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        stream.fill(&mut buf[..n]);
        hasher.update(&buf[..n]);
        left -= n as u64;
    }
    hasher.finalize_hex()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_does_not_change_bytes() {
        let whole = content_bytes(7, "a/b.nc", 10_000);
        let mut s = ContentStream::new(7, "a/b.nc");
        let mut pieces = Vec::new();
        for n in [1usize, 3, 4095, 2, 5000, 899] {
            let mut b = vec![0; n];
            s.fill(&mut b);
            pieces.extend(b);
        }
        assert_eq!(pieces, whole);
    }

    #[test]
    fn keyed_by_seed_and_path() {
        assert_ne!(content_bytes(1, "x", 64), content_bytes(2, "x", 64));
        assert_ne!(content_bytes(1, "x", 64), content_bytes(1, "y", 64));
        assert_eq!(
            content_digest(1, "x", 0, ChecksumType::Md5),
            "d41d8cd98f00b204e9800998ecf8427e"
        );
    }
}
