//! Fixtures shared by the benches.

use datastage::manifest::{FileEntry, Manifest};
use datastage::ChecksumType;

/// `files` entries spread over `nodes` hosts, 32 files per directory.
pub fn synthetic_manifest(files: usize, nodes: usize) -> Manifest {
    let entries = (0..files)
        .map(|i| {
            let path = format!("cmip5/output1/run{}/v{}/f{i:06}.nc", i / 32 % 50, i / 1600);
            FileEntry {
                url: format!("http://dn{}.example.org/thredds/fileServer/{path}", i % nodes),
                relative_path: path,
                checksum_type: ChecksumType::Md5,
                checksum_hex: format!("{:032x}", i as u128 * 0x9e37_79b9_7f4a_7c15),
                size_bytes: Some(1_000_000 + i as u64),
            }
        })
        .collect();
    Manifest::new("bench", entries)
}
