use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::environment::RegretRecord;
use crate::error::{Result, TjapError};

pub const RUN_HEADER: &str = "algorithm,H,d,s0,N,K,seed,t,cum_regret,forced,episode";
pub const AGGREGATE_HEADER: &str = "algorithm,H,d,s0,N,K,runs,t,mean_cum_regret,mean_forced";

/// Above this horizon only every `SPARSE_STRIDE`-th round is logged.
pub const DENSE_LOG_LIMIT: usize = 4096;
pub const SPARSE_STRIDE: usize = 8;

/// Whether round `t` of a run with `horizon` rounds is written out. The last
/// round is always kept.
pub fn is_logged(t: usize, horizon: usize) -> bool {
    horizon <= DENSE_LOG_LIMIT || t.is_multiple_of(SPARSE_STRIDE) || t == horizon
}

/// Shortest decimal rendering with 9 significant digits, in the style of
/// C's `%.9g`.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One logged round of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub algorithm: String,
    pub h: usize,
    pub d: usize,
    pub s0: usize,
    pub n_items: usize,
    pub capacity: usize,
    pub seed: u64,
    pub t: usize,
    pub cum_regret: f64,
    /// Forced rounds so far.
    pub forced: usize,
    pub episode: usize,
}

/// Run-level constants written on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub algorithm: String,
    pub h: usize,
    pub d: usize,
    pub s0: usize,
    pub n_items: usize,
    pub capacity: usize,
    pub seed: u64,
}

pub fn run_csv(label: &RunLabel, records: &[RegretRecord]) -> String {
    let horizon = records.len();
    let mut out = String::with_capacity(64 * horizon);
    out.push_str(RUN_HEADER);
    out.push('\n');
    let mut forced = 0;
    for r in records {
        forced += usize::from(r.forced);
        if !is_logged(r.t, horizon) {
            continue;
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            label.algorithm,
            label.h,
            label.d,
            label.s0,
            label.n_items,
            label.capacity,
            label.seed,
            r.t,
            format_sig(r.cum_regret),
            forced,
            r.episode
        );
    }
    out
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| TjapError::Verification(format!("line {line}: bad {name} value {raw:?}")))
}

pub fn parse_run_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RUN_HEADER) {
        return Err(TjapError::Verification(
            "run file has an unexpected header".into(),
        ));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let n = k + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(TjapError::Verification(format!(
                    "line {n}: expected 11 fields, got {}",
                    f.len()
                )));
            }
            Ok(ResultRow {
                algorithm: f[0].to_string(),
                h: field(f[1], "H", n)?,
                d: field(f[2], "d", n)?,
                s0: field(f[3], "s0", n)?,
                n_items: field(f[4], "N", n)?,
                capacity: field(f[5], "K", n)?,
                seed: field(f[6], "seed", n)?,
                t: field(f[7], "t", n)?,
                cum_regret: field(f[8], "cum_regret", n)?,
                forced: field(f[9], "forced", n)?,
                episode: field(f[10], "episode", n)?,
            })
        })
        .collect()
}

/// Mean curve of one (algorithm, H) group at one logged round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub algorithm: String,
    pub h: usize,
    pub d: usize,
    pub s0: usize,
    pub n_items: usize,
    pub capacity: usize,
    pub runs: usize,
    pub t: usize,
    pub mean_cum_regret: f64,
    pub mean_forced: f64,
}

/// Averages runs per (algorithm, H). Runs are summed in seed order so the
/// result does not depend on the order they finished in.
pub fn aggregate(runs: &[Vec<ResultRow>]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(String, usize), Vec<&Vec<ResultRow>>> = BTreeMap::new();
    for run in runs.iter().filter(|r| !r.is_empty()) {
        groups
            .entry((run[0].algorithm.clone(), run[0].h))
            .or_default()
            .push(run);
    }
    let mut out = Vec::new();
    for ((algorithm, h), mut members) in groups {
        members.sort_by_key(|r| r[0].seed);
        let first = members[0];
        if members.iter().any(|r| r.len() != first.len()) {
            return Err(TjapError::Verification(format!(
                "runs of {algorithm} H={h} log different numbers of rounds"
            )));
        }
        let n = members.len() as f64;
        for (k, row) in first.iter().enumerate() {
            let mut regret = 0.0;
            let mut forced = 0.0;
            for r in &members {
                if r[k].t != row.t {
                    return Err(TjapError::Verification(format!(
                        "runs of {algorithm} H={h} log different rounds"
                    )));
                }
                regret += r[k].cum_regret;
                forced += r[k].forced as f64;
            }
            out.push(AggregateRow {
                algorithm: algorithm.clone(),
                h,
                d: row.d,
                s0: row.s0,
                n_items: row.n_items,
                capacity: row.capacity,
                runs: members.len(),
                t: row.t,
                mean_cum_regret: regret / n,
                mean_forced: forced / n,
            });
        }
    }
    Ok(out)
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            r.h,
            r.d,
            r.s0,
            r.n_items,
            r.capacity,
            r.runs,
            r.t,
            format_sig(r.mean_cum_regret),
            format_sig(r.mean_forced)
        );
    }
    out
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(AGGREGATE_HEADER) {
        return Err(TjapError::Verification(
            "aggregate file has an unexpected header".into(),
        ));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let n = k + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(TjapError::Verification(format!(
                    "line {n}: expected 10 fields, got {}",
                    f.len()
                )));
            }
            Ok(AggregateRow {
                algorithm: f[0].to_string(),
                h: field(f[1], "H", n)?,
                d: field(f[2], "d", n)?,
                s0: field(f[3], "s0", n)?,
                n_items: field(f[4], "N", n)?,
                capacity: field(f[5], "K", n)?,
                runs: field(f[6], "runs", n)?,
                t: field(f[7], "t", n)?,
                mean_cum_regret: field(f[8], "mean_cum_regret", n)?,
                mean_forced: field(f[9], "mean_forced", n)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(123.456789012), "123.456789");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig(1234567891234.0), "1.23456789e12");
        assert_eq!(format_sig(0.0000123456789), "1.23456789e-5");
        assert_eq!(format_sig(0.000123456789), "0.000123456789");
        assert_eq!(format_sig(999999999.6), "1e9");
        assert_eq!(format_sig(99999999.96), "100000000");
    }

    #[test]
    fn sparse_logging_above_the_limit() {
        assert!(is_logged(3, 4096));
        assert!(!is_logged(3, 5000) && is_logged(8, 5000));
        assert!(!is_logged(5002, 5003) && is_logged(5003, 5003));
    }
}
