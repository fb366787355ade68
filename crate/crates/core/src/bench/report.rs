//! Tab-separated and aligned-text renderings of benchmark results.

use std::fmt::Write as _;

use super::stats::{summarize, SummaryStats};
use super::{BenchError, CapacityReport, LoadResult};

/// Secure and insecure summaries of one measured quantity, plus the summary
/// of the per-peer relative differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub insecure: SummaryStats,
    pub secure: SummaryStats,
    pub relative: SummaryStats,
}

impl Comparison {
    /// Builds a comparison from `(insecure, secure)` pairs measured on the
    /// same peers. `penalty` maps a pair to its relative difference.
    pub fn from_pairs(pairs: &[(f64, f64)], penalty: fn(f64, f64) -> f64) -> Result<Comparison, BenchError> {
        let insecure: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let secure: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let relative: Vec<f64> = pairs.iter().map(|&(i, s)| penalty(i, s)).collect();
        Ok(Comparison { insecure: summarize(&insecure)?, secure: summarize(&secure)?, relative: summarize(&relative)? })
    }

    /// `(row name, insecure, secure, relative)` in table order.
    pub fn rows(&self) -> [(&'static str, f64, f64, Option<f64>); 5] {
        let (i, s, r) = (&self.insecure, &self.secure, &self.relative);
        [
            ("Mean", i.mean, s.mean, Some(r.mean)),
            ("Median", i.median, s.median, Some(r.median)),
            ("Maximum", i.max, s.max, Some(r.max)),
            ("Minimum", i.min, s.min, Some(r.min)),
            ("Std. Dev.", i.stddev, s.stddev, None),
        ]
    }
}

fn percent(r: Option<f64>) -> String {
    r.map_or_else(|| "N/A".to_string(), |r| format!("{:.1}%", r * 100.0))
}

/// Seconds with microsecond resolution.
pub fn fmt_rtt(v: f64) -> String {
    format!("{v:.6}")
}

/// Whole units per second.
pub fn fmt_rate(v: f64) -> String {
    format!("{v:.0}")
}

/// `latency.tsv`: one row per summary statistic.
pub fn latency_tsv(c: &Comparison) -> String {
    comparison_tsv(c, "Insecure RTT (sec)\tSecure RTT (sec)", fmt_rtt)
}

/// `throughput.tsv`: one row per summary statistic.
pub fn throughput_tsv(c: &Comparison) -> String {
    comparison_tsv(c, "Insecure Pkts/sec\tSecure Pkts/sec", fmt_rate)
}

fn comparison_tsv(c: &Comparison, columns: &str, fmt: fn(f64) -> String) -> String {
    let mut o = format!("Statistic\t{columns}\tRelative Difference\n");
    for (name, i, s, r) in c.rows() {
        let _ = writeln!(o, "{name}\t{}\t{}\t{}", fmt(i), fmt(s), percent(r));
    }
    o
}

/// Per-peer rows in ascending order of the first value column, the order
/// in which the staircase plots are drawn.
pub fn per_peer_tsv(header: &str, mut rows: Vec<(String, Option<u32>, f64, f64)>, fmt: fn(f64) -> String) -> String {
    rows.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(&b.0)));
    let mut o = format!("{header}\n");
    for (peer, hops, i, s) in rows {
        let hops = hops.map_or_else(|| "-".to_string(), |h| h.to_string());
        let _ = writeln!(o, "{peer}\t{hops}\t{}\t{}", fmt(i), fmt(s));
    }
    o
}

pub fn latency_peers_tsv(rows: Vec<(String, Option<u32>, f64, f64)>) -> String {
    per_peer_tsv("Peer\tHops\tInsecure RTT (sec)\tSecure RTT (sec)", rows, fmt_rtt)
}

pub fn throughput_peers_tsv(rows: Vec<(String, Option<u32>, f64, f64)>) -> String {
    per_peer_tsv("Peer\tHops\tInsecure Pkts/sec\tSecure Pkts/sec", rows, fmt_rate)
}

/// Summary of a single mode: one row per statistic.
pub fn summary_tsv(column: &str, s: &SummaryStats, fmt: fn(f64) -> String) -> String {
    let mut o = format!("Statistic\t{column}\n");
    for (name, v) in [("Mean", s.mean), ("Median", s.median), ("Maximum", s.max), ("Minimum", s.min), ("Std. Dev.", s.stddev)] {
        let _ = writeln!(o, "{name}\t{}", fmt(v));
    }
    o
}

/// Both comparisons side by side, laid out like the summary table.
pub fn summary_table(latency: &Comparison, throughput: &Comparison) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "{:<10} | {:^36} || {:^32}", "", "Latency", "Throughput");
    let _ = writeln!(
        o,
        "{:<10} | {:>10} {:>10} {:>12} || {:>9} {:>9} {:>12}",
        "", "Insecure", "Secure", "Relative", "Insecure", "Secure", "Relative"
    );
    let _ = writeln!(
        o,
        "{:<10} | {:>10} {:>10} {:>12} || {:>9} {:>9} {:>12}",
        "", "RTT (sec)", "RTT (sec)", "Difference", "Pkts/sec", "Pkts/sec", "Difference"
    );
    for ((name, li, ls, lr), (_, ti, ts, tr)) in latency.rows().into_iter().zip(throughput.rows()) {
        let _ = writeln!(
            o,
            "{name:<10} | {:>10} {:>10} {:>12} || {:>9} {:>9} {:>12}",
            fmt_rtt(li),
            fmt_rtt(ls),
            percent(lr),
            fmt_rate(ti),
            fmt_rate(ts),
            percent(tr)
        );
    }
    o
}

/// One comparison on its own, for single-experiment runs.
pub fn comparison_table(c: &Comparison, unit: &str, fmt: fn(f64) -> String) -> String {
    let mut o = format!("{:<10} | {:>12} {:>12} {:>12}\n", unit, "Insecure", "Secure", "Relative");
    for (name, i, s, r) in c.rows() {
        let _ = writeln!(o, "{name:<10} | {:>12} {:>12} {:>12}", fmt(i), fmt(s), percent(r));
    }
    o
}

pub fn latency_table(c: &Comparison) -> String {
    comparison_table(c, "RTT (sec)", fmt_rtt)
}

pub fn throughput_table(c: &Comparison) -> String {
    comparison_table(c, "Pkts/sec", fmt_rate)
}

/// `capacity.tsv`: one row per mode and load level.
pub fn capacity_tsv(reports: &[(&str, &CapacityReport)]) -> String {
    let mut o = String::from("Mode\t# of msgs\tMean\tMedian\tStd. Dev.\tMaximum\tMinimum\tCapacity\tLost\n");
    for (mode, r) in reports {
        for l in &r.levels {
            let s = &l.stats;
            let _ = writeln!(
                o,
                "{mode}\t{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.0}\t{}",
                l.load, s.mean, s.median, s.stddev, s.max, s.min, l.capacity, l.lost
            );
        }
    }
    o
}

/// Passes-per-second statistics with loads as columns.
pub fn capacity_table(title: &str, levels: &[LoadResult]) -> String {
    let mut o = format!("{title}\n{:<11}", "# of msgs");
    for l in levels {
        let _ = write!(o, " {:>7}", l.load);
    }
    o.push('\n');
    let rows: [(&str, fn(&SummaryStats) -> f64); 5] = [
        ("Mean", |s| s.mean),
        ("Median", |s| s.median),
        ("Std. Dev.", |s| s.stddev),
        ("Maximum", |s| s.max),
        ("Minimum", |s| s.min),
    ];
    for (name, get) in rows {
        let _ = write!(o, "{name:<11}");
        for l in levels {
            let v = get(&l.stats);
            if name == "Std. Dev." {
                let _ = write!(o, " {v:>7.1}");
            } else {
                let _ = write!(o, " {v:>7.0}");
            }
        }
        o.push('\n');
    }
    let _ = write!(o, "{:<11}", "Capacity");
    for l in levels {
        let _ = write!(o, " {:>7.0}", l.capacity);
    }
    o.push('\n');
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: f64, median: f64, max: f64, min: f64, stddev: f64) -> SummaryStats {
        SummaryStats { mean, median, max, min, stddev }
    }

    #[test]
    fn reproduces_the_published_summary_layout() {
        let latency = Comparison {
            insecure: stats(0.002874, 0.002897, 0.003542, 0.000759, 0.000335),
            secure: stats(0.003457, 0.003483, 0.004282, 0.000880, 0.000411),
            relative: stats(0.202, 0.202, 0.209, 0.159, 0.0),
        };
        let throughput = Comparison {
            insecure: stats(6148.0, 6389.0, 7794.0, 3107.0, 1164.0),
            secure: stats(4946.0, 5087.0, 6566.0, 2643.0, 930.0),
            relative: stats(0.194, 0.204, 0.158, 0.149, 0.0),
        };
        let text = summary_table(&latency, &throughput);
        let squash = |l: &str| l.split_whitespace().filter(|w| *w != "|" && *w != "||").collect::<Vec<_>>().join(" ");
        let lines: Vec<String> = text.lines().map(squash).collect();
        assert!(lines.contains(&"Mean 0.002874 0.003457 20.2% 6148 4946 19.4%".to_string()));
        assert!(lines.contains(&"Minimum 0.000759 0.000880 15.9% 3107 2643 14.9%".to_string()));
        assert!(lines.contains(&"Std. Dev. 0.000335 0.000411 N/A 1164 930 N/A".to_string()));

        let tsv = latency_tsv(&latency);
        assert_eq!(tsv.lines().nth(1), Some("Mean\t0.002874\t0.003457\t20.2%"));
        assert_eq!(tsv.lines().count(), 6);
        assert_eq!(throughput_tsv(&throughput).lines().nth(3), Some("Maximum\t7794\t6566\t15.8%"));
    }

    #[test]
    fn relative_column_summarizes_per_peer_differences() {
        let pairs = [(1.0, 1.5), (2.0, 2.2), (4.0, 4.0)];
        let c = Comparison::from_pairs(&pairs, super::super::stats::latency_penalty).unwrap();
        assert!((c.relative.mean - 0.2).abs() < 1e-12);
        assert_eq!(c.relative.max, 0.5);
        assert_eq!(c.insecure.min, 1.0);
        assert!(Comparison::from_pairs(&[], super::super::stats::latency_penalty).is_err());
    }

    #[test]
    fn single_mode_summary() {
        let t = summary_tsv("Secure RTT (sec)", &stats(0.002, 0.002, 0.003, 0.001, 0.0005), fmt_rtt);
        assert_eq!(t.lines().next(), Some("Statistic\tSecure RTT (sec)"));
        assert_eq!(t.lines().nth(5), Some("Std. Dev.\t0.000500"));
    }

    #[test]
    fn per_peer_rows_sorted() {
        let rows = vec![("b".into(), Some(4), 0.003, 0.004), ("a".into(), Some(2), 0.001, 0.0012)];
        let t = latency_peers_tsv(rows);
        assert_eq!(t.lines().nth(1), Some("a\t2\t0.001000\t0.001200"));
    }
}
