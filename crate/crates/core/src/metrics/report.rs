//! Report rendering.
//!
//! Node report CSV columns, in order:
//!
//! | column | unit |
//! |---|---|
//! | `node_id` | |
//! | `total_bytes` | bytes |
//! | `total_tb` | decimal TB, 3 decimals |
//! | `transfer_seconds` | seconds, 3 decimals |
//! | `transfer_days` | days, 1 decimal, half-even |
//! | `mean_rate_bytes_per_sec` | bytes/s, 3 decimals |
//! | `mean_rate` | human decimal rate |
//! | `seconds_per_tb` | seconds to move 10^12 bytes at the mean rate, rounded |
//!
//! Rows are sorted by `total_bytes` descending, then `node_id`.

use chrono::{DateTime, NaiveDateTime, Utc};

use super::{mbits_per_sec, time_to_transfer, MetricsError, NodeAggregate};
use crate::units::{self, TB};

pub const NODE_CSV_HEADER: &str = "node_id,total_bytes,total_tb,transfer_seconds,transfer_days,mean_rate_bytes_per_sec,mean_rate,seconds_per_tb";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeReport {
    pub text: String,
    pub csv: String,
}

struct Row {
    node: String,
    bytes: u64,
    tb: String,
    seconds: f64,
    days: String,
    rate: f64,
    rate_human: String,
    seconds_per_tb: String,
}

fn row(a: &NodeAggregate) -> Row {
    let rate = a.mean_rate();
    Row {
        node: a.node_id.to_string(),
        bytes: a.total_bytes,
        tb: units::format_tb(a.total_bytes),
        seconds: a.total_transfer_seconds(),
        days: units::format_days(a.total_transfer_seconds()),
        rate,
        rate_human: units::format_rate(rate),
        seconds_per_tb: time_to_transfer(TB, rate)
            .map(|s| format!("{:.0}", s))
            .unwrap_or_else(|_| "inf".into()),
    }
}

pub fn render_node_report(aggregates: &[NodeAggregate]) -> NodeReport {
    let mut sorted: Vec<&NodeAggregate> = aggregates.iter().collect();
    sorted.sort_by(|a, b| {
        b.total_bytes
            .cmp(&a.total_bytes)
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    let rows: Vec<Row> = sorted.into_iter().map(row).collect();

    let mut csv = String::from(NODE_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.3},{},{:.3},{},{}\n",
            r.node,
            r.bytes,
            r.tb.trim_end_matches(" TB"),
            r.seconds,
            r.days,
            r.rate,
            r.rate_human,
            r.seconds_per_tb
        ));
    }

    let width = rows.iter().map(|r| r.node.len()).max().unwrap_or(4).max(4);
    let mut text = format!(
        "{:<width$}  {:>12}  {:>16}  {:>10}  {:>12}  {:>14}\n",
        "node", "data", "transfer time", "", "mean rate", "time to 1 TB"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<width$}  {:>12}  {:>14.0} s  {:>5} days  {:>12}  {:>12} s\n",
            r.node, r.tb, r.seconds, r.days, r.rate_human, r.seconds_per_tb
        ));
    }
    NodeReport { text, csv }
}

/// End-of-run summary laid out like a bulk-transfer service job summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub task_id: String,
    pub request_time: DateTime<Utc>,
    pub completion_time: DateTime<Utc>,
    pub total_tasks: u64,
    pub files: u64,
    pub dirs: u64,
    pub bytes_transferred: u64,
    /// Derived from bytes and the request-to-completion interval; zero when
    /// the interval is empty.
    pub mbits_per_sec: f64,
    pub faults: u64,
}

fn truncate_ms(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(t.timestamp_millis()).expect("in range")
}

fn derive_mbits(bytes: u64, t0: DateTime<Utc>, t1: DateTime<Utc>) -> f64 {
    mbits_per_sec(bytes, t0, t1).unwrap_or(0.0)
}

impl RunSummary {
    /// Times are kept to millisecond precision; `total_tasks` counts files,
    /// directories and the request itself.
    pub fn new(
        task_id: impl Into<String>,
        request_time: DateTime<Utc>,
        completion_time: DateTime<Utc>,
        files: u64,
        dirs: u64,
        bytes_transferred: u64,
        faults: u64,
    ) -> Result<Self, MetricsError> {
        let request_time = truncate_ms(request_time);
        let completion_time = truncate_ms(completion_time);
        if completion_time < request_time {
            return Err(MetricsError::InvalidInterval);
        }
        Ok(Self {
            task_id: task_id.into(),
            request_time,
            completion_time,
            total_tasks: files + dirs + 1,
            files,
            dirs,
            bytes_transferred,
            mbits_per_sec: derive_mbits(bytes_transferred, request_time, completion_time),
            faults,
        })
    }
}

const LABELS: [&str; 9] = [
    "Task ID:",
    "Request Time:",
    "Completion Time:",
    "Total Tasks:",
    "Files:",
    "Directories:",
    "Bytes Transferred:",
    "MBits/sec:",
    "Faults:",
];

fn format_time(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%d %H:%M:%S%.fZ").to_string()
}

fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    let body = s.strip_suffix('Z')?;
    NaiveDateTime::parse_from_str(body, "%Y-%m-%d %H:%M:%S%.f")
        .ok()
        .map(|n| n.and_utc())
}

/// Shortest exact scientific form: `2.94442E+13`, `1E+00`, `0`.
pub fn format_sci(n: u64) -> String {
    if n == 0 {
        return "0".into();
    }
    let digits = n.to_string();
    let exponent = digits.len() - 1;
    let significant = digits.trim_end_matches('0');
    let (lead, rest) = significant.split_at(1);
    if rest.is_empty() {
        format!("{lead}E+{exponent:02}")
    } else {
        format!("{lead}.{rest}E+{exponent:02}")
    }
}

/// Inverse of [`format_sci`]; also accepts plain integers. Exact, no floats.
pub fn parse_sci(s: &str) -> Option<u64> {
    let Some((mantissa, exp)) = s.split_once(['E', 'e']) else {
        return s.parse().ok();
    };
    let exp: u32 = exp.strip_prefix('+').unwrap_or(exp).parse().ok()?;
    let (int_part, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int_part.is_empty() || !int_part.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let frac_len = frac.len() as u32;
    if exp < frac_len {
        return None;
    }
    let digits: u64 = format!("{int_part}{frac}").parse().ok()?;
    digits.checked_mul(10u64.checked_pow(exp - frac_len)?)
}

/// One `label:\tvalue` line per field.
pub fn render_run_summary(s: &RunSummary) -> String {
    let values = [
        s.task_id.clone(),
        format_time(s.request_time),
        format_time(s.completion_time),
        s.total_tasks.to_string(),
        s.files.to_string(),
        s.dirs.to_string(),
        format_sci(s.bytes_transferred),
        format!("{:.2}", s.mbits_per_sec),
        s.faults.to_string(),
    ];
    let mut out = String::new();
    for (label, value) in LABELS.iter().zip(values) {
        out.push_str(label);
        out.push('\t');
        out.push_str(&value);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("run summary line {line}: {reason}")]
pub struct SummaryParseError {
    pub line: usize,
    pub reason: String,
}

/// Parses `render_run_summary` output. The rendered rate is rounded, so it
/// is checked against the rate derived from bytes and times and the derived
/// value is kept.
pub fn parse_run_summary(text: &str) -> Result<RunSummary, SummaryParseError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    if lines.len() != LABELS.len() {
        return Err(SummaryParseError {
            line: lines.len().min(LABELS.len()) + 1,
            reason: format!("expected {} fields, found {}", LABELS.len(), lines.len()),
        });
    }
    let mut values = Vec::with_capacity(LABELS.len());
    for (i, (line, label)) in lines.iter().zip(LABELS).enumerate() {
        let value = line
            .strip_prefix(label)
            .and_then(|r| r.strip_prefix('\t'))
            .ok_or_else(|| SummaryParseError {
                line: i + 1,
                reason: format!("expected `{label}`"),
            })?;
        values.push(value);
    }
    let bad = |line: usize, what: &str| SummaryParseError {
        line,
        reason: format!("bad {what}"),
    };
    let int = |i: usize, what: &str| values[i].parse::<u64>().map_err(|_| bad(i + 1, what));

    let request_time = parse_time(values[1]).ok_or_else(|| bad(2, "request time"))?;
    let completion_time = parse_time(values[2]).ok_or_else(|| bad(3, "completion time"))?;
    if completion_time < request_time {
        return Err(bad(3, "completion time (before request)"));
    }
    let bytes_transferred = parse_sci(values[6]).ok_or_else(|| bad(7, "byte count"))?;
    let shown: f64 = values[7].parse().map_err(|_| bad(8, "rate"))?;
    let mbits = derive_mbits(bytes_transferred, request_time, completion_time);
    if (shown - mbits).abs() > 0.005 + 1e-9 * mbits.abs() {
        return Err(SummaryParseError {
            line: 8,
            reason: format!("rate {shown} disagrees with bytes and times ({mbits:.4})"),
        });
    }
    Ok(RunSummary {
        task_id: values[0].to_string(),
        request_time,
        completion_time,
        total_tasks: int(3, "total tasks")?,
        files: int(4, "file count")?,
        dirs: int(5, "directory count")?,
        bytes_transferred,
        mbits_per_sec: mbits,
        faults: int(8, "fault count")?,
    })
}
