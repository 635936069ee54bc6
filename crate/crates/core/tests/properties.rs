use std::collections::BTreeMap;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use datastage::manifest::{
    group_replicas, parse_manifest, summarize_paths, FileEntry, Manifest, NodeId,
};
use datastage::metrics::{mbits_per_sec, parse_run_summary, render_run_summary, RunSummary};
use datastage::{ChecksumType, Recorder, ThroughputSample};
use proptest::prelude::*;

fn rel_path() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z0-9_][a-z0-9_.-]{0,6}", 1..4)
        .prop_map(|segs| segs.join("/"))
        .prop_filter("dot segments", |p| p.split('/').all(|s| s != "." && s != ".."))
}

fn host() -> impl Strategy<Value = String> {
    ("[a-z]{1,6}", prop::option::of(1024u16..9000)).prop_map(|(h, port)| match port {
        Some(p) => format!("{h}.example:{p}"),
        None => format!("{h}.example"),
    })
}

fn entry() -> impl Strategy<Value = FileEntry> {
    (
        rel_path(),
        host(),
        prop::bool::ANY,
        prop::option::of(any::<u64>()),
        any::<[u8; 32]>(),
    )
        .prop_map(|(path, host, sha, size, raw)| {
            let (ty, n) = if sha {
                (ChecksumType::Sha256, 32)
            } else {
                (ChecksumType::Md5, 16)
            };
            FileEntry {
                url: format!("http://{host}/data/{path}"),
                relative_path: path,
                checksum_type: ty,
                checksum_hex: hex::encode(&raw[..n]),
                size_bytes: size,
            }
        })
}

fn manifest() -> impl Strategy<Value = Manifest> {
    ("[A-Za-z0-9_.-]{1,12}", prop::collection::vec(entry(), 0..12)).prop_map(|(id, entries)| {
        // Repeated (path, url) pairs are rejected, and one path has one checksum and size.
        let mut seen = std::collections::HashSet::new();
        let mut sums = std::collections::HashMap::new();
        let entries = entries
            .into_iter()
            .filter(|e| seen.insert((e.relative_path.clone(), e.url.clone())))
            .map(|mut e| {
                let (ty, hex, size) = sums
                    .entry(e.relative_path.clone())
                    .or_insert((e.checksum_type, e.checksum_hex.clone(), e.size_bytes))
                    .clone();
                (e.checksum_type, e.checksum_hex, e.size_bytes) = (ty, hex, size);
                e
            })
            .collect();
        Manifest::new(id, entries)
    })
}

fn instant() -> impl Strategy<Value = DateTime<Utc>> {
    (0i64..4_000_000_000_000).prop_map(|ms| Utc.timestamp_millis_opt(ms).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn manifest_text_round_trips(m in manifest()) {
        let text = m.to_text();
        let back = parse_manifest(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn summary_ignores_order(
        items in prop::collection::btree_map(rel_path(), prop::option::of(0u64..1 << 40), 0..30),
        seed in any::<u64>(),
    ) {
        let items: Vec<_> = items.into_iter().collect();
        let mut shuffled = items.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = summarize_paths(items.iter().map(|(p, s)| (p.as_str(), *s)));
        let b = summarize_paths(shuffled.iter().map(|(p, s)| (p.as_str(), *s)));
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.file_count as usize, items.len());
        let known: u64 = items.iter().filter_map(|(_, s)| *s).sum();
        prop_assert_eq!(a.total_bytes, known);
    }

    #[test]
    fn grouping_conserves_locations(
        paths in prop::collection::btree_set(rel_path(), 1..10),
        hosts in prop::collection::btree_set(host(), 1..4),
        mask in any::<u64>(),
    ) {
        let paths: Vec<_> = paths.into_iter().collect();
        let mut manifests = Vec::new();
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for (h, host) in hosts.iter().enumerate() {
            let entries: Vec<_> = paths
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> ((h * 16 + i) % 64) & 1 == 1 || h == 0)
                .map(|(_, p)| {
                    *expected.entry(p.clone()).or_default() += 1;
                    FileEntry {
                        relative_path: p.clone(),
                        url: format!("http://{host}/data/{p}"),
                        checksum_type: ChecksumType::Md5,
                        checksum_hex: format!("{:032x}", p.len()),
                        size_bytes: Some(p.len() as u64),
                    }
                })
                .collect();
            manifests.push(Manifest::new(format!("ds{h}"), entries));
        }
        let sets = group_replicas(&manifests).unwrap();
        prop_assert_eq!(sets.len(), expected.len());
        for s in &sets {
            prop_assert_eq!(s.locations.len(), expected[&s.relative_path]);
        }
    }

    #[test]
    fn run_summary_round_trips(
        req in instant(),
        elapsed_ms in 0i64..10_000_000_000,
        files in 0u64..1_000_000,
        dirs in 0u64..100_000,
        bytes in 0u64..(1u64 << 52),
        faults in 0u64..10_000,
    ) {
        let comp = req + chrono::Duration::milliseconds(elapsed_ms);
        let s = RunSummary::new("6f0c9a3e-1b2d-4c5e-8f70-123456789abc", req, comp, files, dirs, bytes, faults).unwrap();
        let text = render_run_summary(&s);
        prop_assert_eq!(parse_run_summary(&text).unwrap(), s);
    }

    #[test]
    fn aggregates_ignore_recording_order(
        samples in prop::collection::vec((0usize..3, 1u64..1 << 40, 1u64..10_000_000), 1..40),
    ) {
        let mk = |&(n, b, us): &(usize, u64, u64)| ThroughputSample {
            node_id: NodeId(format!("n{n}")),
            bytes: b,
            transfer: Duration::from_micros(us),
            recorded_at: Utc.timestamp_opt(0, 0).unwrap(),
        };
        let fwd = Recorder::new(0.3);
        let rev = Recorder::new(0.3);
        for s in &samples { fwd.record(mk(s)).unwrap(); }
        for s in samples.iter().rev() { rev.record(mk(s)).unwrap(); }
        prop_assert_eq!(fwd.aggregates(), rev.aggregates());
        for a in fwd.aggregates() {
            let mine: Vec<_> = samples.iter().filter(|s| format!("n{}", s.0) == a.node_id.0).collect();
            prop_assert_eq!(a.total_bytes, mine.iter().map(|s| s.1).sum::<u64>());
            prop_assert_eq!(a.sample_count as usize, mine.len());
        }
    }

    #[test]
    fn mbits_identity(bytes in 0u64..(1u64 << 50), ms in 1i64..1_000_000_000) {
        let t0 = Utc.timestamp_opt(1_384_455_127, 0).unwrap();
        let got = mbits_per_sec(bytes, t0, t0 + chrono::Duration::milliseconds(ms)).unwrap();
        let oracle = (bytes as f64 * 8.0) / (ms as f64 * 1000.0);
        prop_assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }
}
