//! Decimal unit rendering (KB = 10^3, MB = 10^6, TB = 10^12).

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;
pub const GB: u64 = 1_000_000_000;
pub const TB: u64 = 1_000_000_000_000;
pub const SECONDS_PER_DAY: u64 = 86_400;

/// `num / den` rounded to the nearest integer, ties to even.
pub fn div_round_half_even(num: u128, den: u128) -> u128 {
    assert!(den > 0, "division by zero");
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

fn fixed(scaled: u128, decimals: u32) -> String {
    let unit = 10u128.pow(decimals);
    if decimals == 0 {
        return scaled.to_string();
    }
    format!(
        "{}.{:0width$}",
        scaled / unit,
        scaled % unit,
        width = decimals as usize
    )
}

/// Bytes as terabytes with three decimals, e.g. `29.444 TB`.
pub fn format_tb(bytes: u64) -> String {
    let thousandths = div_round_half_even(bytes as u128, (TB / 1000) as u128);
    format!("{} TB", fixed(thousandths, 3))
}

/// Seconds as days with one decimal, rounded half-even. No unit suffix.
pub fn format_days(seconds: f64) -> String {
    let ms = (seconds.max(0.0) * 1000.0).round() as u128;
    let tenths = div_round_half_even(ms * 10, SECONDS_PER_DAY as u128 * 1000);
    fixed(tenths, 1)
}

/// Human rate with one decimal in the largest unit not exceeding the value,
/// e.g. `1.0 MB/s`, `10.0 KB/s`.
pub fn format_rate(bytes_per_sec: f64) -> String {
    let units = [(TB, "TB/s"), (GB, "GB/s"), (MB, "MB/s"), (KB, "KB/s")];
    for (scale, label) in units {
        if bytes_per_sec >= scale as f64 {
            return format!("{:.1} {}", bytes_per_sec / scale as f64, label);
        }
    }
    format!("{bytes_per_sec:.1} B/s")
}
