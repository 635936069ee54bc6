use std::fmt;
use std::str::FromStr;

use md5::Md5;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChecksumType {
    Md5,
    Sha256,
}

impl ChecksumType {
    pub fn as_str(self) -> &'static str {
        match self {
            ChecksumType::Md5 => "md5",
            ChecksumType::Sha256 => "sha256",
        }
    }

    /// Number of lowercase hex characters in a digest of this type.
    pub fn hex_len(self) -> usize {
        match self {
            ChecksumType::Md5 => 32,
            ChecksumType::Sha256 => 64,
        }
    }

    pub fn hasher(self) -> StreamHasher {
        match self {
            ChecksumType::Md5 => StreamHasher::Md5(Md5::new()),
            ChecksumType::Sha256 => StreamHasher::Sha256(Sha256::new()),
        }
    }

    pub fn digest_hex(self, data: &[u8]) -> String {
        let mut h = self.hasher();
        h.update(data);
        h.finalize_hex()
    }

    /// Checks length and alphabet of a lowercase hex digest.
    pub fn is_valid_hex(self, hex: &str) -> bool {
        hex.len() == self.hex_len() && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    }
}

impl fmt::Display for ChecksumType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown checksum type `{0}`")]
pub struct UnknownChecksumType(pub String);

impl FromStr for ChecksumType {
    type Err = UnknownChecksumType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md5" => Ok(ChecksumType::Md5),
            "sha256" => Ok(ChecksumType::Sha256),
            other => Err(UnknownChecksumType(other.to_string())),
        }
    }
}

/// Incremental digest over a byte stream.
#[derive(Clone)]
pub enum StreamHasher {
    Md5(Md5),
    Sha256(Sha256),
}

impl StreamHasher {
    pub fn update(&mut self, data: &[u8]) {
        match self {
            StreamHasher::Md5(h) => Digest::update(h, data),
            StreamHasher::Sha256(h) => Digest::update(h, data),
        }
    }

    pub fn finalize_hex(self) -> String {
        match self {
            StreamHasher::Md5(h) => hex::encode(h.finalize()),
            StreamHasher::Sha256(h) => hex::encode(h.finalize()),
        }
    }
}

impl fmt::Debug for StreamHasher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamHasher::Md5(_) => f.write_str("StreamHasher::Md5"),
            StreamHasher::Sha256(_) => f.write_str("StreamHasher::Sha256"),
        }
    }
}
