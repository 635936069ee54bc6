//! Fleet config file: the flat config syntax with one `[node <name>]`
//! section per node.
//!
//! ```text
//! manifest_dir = /tmp/fleet      # optional: write <name>.manifest per node
//! clock = offset                 # system | offset (offset accepts /admin/clock)
//!
//! [node pcmdi]
//! listen = 127.0.0.1:8001
//! bandwidth = 1000000            # bytes/s, or `unlimited`
//! latency_ms = 20
//! content_seed = 1
//! throttle = connection          # connection | node
//! checksum = md5                 # md5 | sha256
//! file = cmip5/tas_day.nc 1048576
//! fault = *.nc corrupt_first_n 1
//! fault = * gone_after 30 http://127.0.0.1:8002
//! ```
//!
//! Fault kinds: `wrong_published_checksum`, `corrupt_first_n <n>`,
//! `gone_after <seconds> [relocation_url]`, `reject_all_tokens`,
//! `drop_connection <p>`.

use std::path::PathBuf;

use super::{FaultKind, FaultSpec, SimNodeConfig};
use crate::config::{parse_sections, ConfigError};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum FleetClock {
    System,
    #[default]
    Offset,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FleetConfig {
    pub manifest_dir: Option<PathBuf>,
    pub clock: FleetClock,
    pub nodes: Vec<SimNodeConfig>,
}

fn parse_fault(line: usize, v: &str) -> Result<FaultSpec, ConfigError> {
    let bad = |why: &str| ConfigError::new(line, format!("fault: {why}"));
    let words: Vec<&str> = v.split_whitespace().collect();
    let (pattern, kind, args) = match words.as_slice() {
        [p, k, rest @ ..] => (*p, *k, rest),
        _ => return Err(bad("expected `<glob> <kind> [args]`")),
    };
    let kind = match (kind, args) {
        ("wrong_published_checksum", []) => FaultKind::WrongPublishedChecksum,
        ("reject_all_tokens", []) => FaultKind::RejectAllTokens,
        ("corrupt_first_n", [n]) => FaultKind::CorruptFirstN {
            n: n.parse().map_err(|_| bad("n must be an integer"))?,
        },
        ("drop_connection", [p]) => FaultKind::DropConnection {
            p: p.parse().map_err(|_| bad("p must be a number"))?,
        },
        ("gone_after", [t, rest @ ..]) if rest.len() <= 1 => FaultKind::GoneAfter {
            after_s: t.parse().map_err(|_| bad("delay must be a number"))?,
            relocation_url: rest.first().map(|s| s.to_string()),
        },
        _ => return Err(bad(&format!("bad kind or arguments in `{v}`"))),
    };
    let spec = FaultSpec::new(pattern, kind);
    spec.validate().map_err(|e| bad(&e))?;
    Ok(spec)
}

pub fn parse_fleet_config(text: &str) -> Result<FleetConfig, ConfigError> {
    let mut out = FleetConfig::default();
    for section in parse_sections(text)? {
        let Some(name) = section.name else {
            for s in &section.settings {
                match s.key.as_str() {
                    "manifest_dir" => out.manifest_dir = Some(PathBuf::from(&s.value)),
                    "clock" => {
                        out.clock = match s.value.as_str() {
                            "system" => FleetClock::System,
                            "offset" => FleetClock::Offset,
                            other => {
                                return Err(ConfigError::new(s.line, format!("unknown clock `{other}`")))
                            }
                        }
                    }
                    other => {
                        return Err(ConfigError::new(s.line, format!("unknown fleet key `{other}`")))
                    }
                }
            }
            continue;
        };
        if section.kind.as_deref() != Some("node") {
            let line = section.settings.first().map_or(0, |s| s.line);
            return Err(ConfigError::new(line, "only `[node <name>]` sections are allowed"));
        }
        let mut node = SimNodeConfig::new(name);
        for s in &section.settings {
            let (l, v) = (s.line, s.value.as_str());
            let err = |what: &str| ConfigError::new(l, format!("`{}`: {what}", s.key));
            match s.key.as_str() {
                "listen" => node.listen = v.parse().map_err(|_| err("not a socket address"))?,
                "bandwidth" => {
                    node.bandwidth = match v {
                        "unlimited" => None,
                        _ => Some(v.parse().map_err(|_| err("not an integer"))?),
                    }
                }
                "latency_ms" => node.latency_ms = v.parse().map_err(|_| err("not an integer"))?,
                "content_seed" => node.content_seed = v.parse().map_err(|_| err("not an integer"))?,
                "throttle" => node.throttle = v.parse().map_err(|e: String| err(&e))?,
                "checksum" => node.checksum_type = v.parse().map_err(|_| err("md5 or sha256"))?,
                "file" => {
                    let (path, size) = v
                        .rsplit_once(char::is_whitespace)
                        .ok_or_else(|| err("expected `<path> <size>`"))?;
                    let size = size.parse().map_err(|_| err("bad size"))?;
                    node.catalog.push((path.trim().to_string(), size));
                }
                "fault" => node.faults.push(parse_fault(l, v)?),
                other => return Err(ConfigError::new(l, format!("unknown node key `{other}`"))),
            }
        }
        node.validate().map_err(|e| ConfigError::new(0, e))?;
        out.nodes.push(node);
    }
    Ok(out)
}
