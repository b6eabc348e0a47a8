use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MetricsReport, PatternDiff, SampleRecord};
use crate::error::{Error, Result};

const SAMPLE_HEADER: &str = "id,raw_l1,raw_l2,raw_kl,raw_ncc,refined_l1,refined_l2,refined_kl,refined_ncc";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable summary table.
pub fn table(report: &MetricsReport) -> String {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "samples            {}", report.count).unwrap();
    writeln!(w, "accuracy raw       {}", opt(report.raw_accuracy)).unwrap();
    writeln!(w, "accuracy refined   {}", opt(report.refined_accuracy)).unwrap();
    writeln!(w, "entropy raw        {:.4}", report.raw_entropy).unwrap();
    writeln!(w, "entropy refined    {:.4}", report.refined_entropy).unwrap();
    match &report.quality {
        None => writeln!(w, "quality            skipped (no ground-truth pairing)").unwrap(),
        Some(q) => {
            writeln!(w).unwrap();
            writeln!(w, "{:<10}{:>12}{:>12}{:>12}{:>12}", "", "l1", "l2", "kl", "ncc").unwrap();
            let mut row = |name: &str, d: &PatternDiff| {
                writeln!(w, "{name:<10}{:>12.4}{:>12.4}{:>12.5}{:>12.4}", d.l1, d.l2, d.kl, d.ncc).unwrap();
            };
            row("raw mean", &q.raw.mean);
            row("ref mean", &q.refined.mean);
            row("raw med", &q.raw.median);
            row("ref med", &q.refined.median);
            writeln!(w).unwrap();
            writeln!(w, "l1 improved on     {:.1}%", 100.0 * q.l1_improved).unwrap();
            writeln!(w, "kl improved on     {:.1}%", 100.0 * q.kl_improved).unwrap();
        }
    }
    s
}

/// `key,value` lines with full-precision numbers.
pub fn summary_csv(report: &MetricsReport) -> String {
    let mut s = String::from("key,value\n");
    let mut put = |k: &str, v: String| writeln!(s, "{k},{v}").unwrap();
    put("count", report.count.to_string());
    put("raw_accuracy", report.raw_accuracy.map_or(String::new(), |v| v.to_string()));
    put("refined_accuracy", report.refined_accuracy.map_or(String::new(), |v| v.to_string()));
    put("raw_entropy", report.raw_entropy.to_string());
    put("refined_entropy", report.refined_entropy.to_string());
    if let Some(q) = &report.quality {
        for (side, agg) in [("raw", &q.raw), ("refined", &q.refined)] {
            for (stat, d) in [("mean", &agg.mean), ("median", &agg.median)] {
                put(&format!("{side}_{stat}_l1"), d.l1.to_string());
                put(&format!("{side}_{stat}_l2"), d.l2.to_string());
                put(&format!("{side}_{stat}_kl"), d.kl.to_string());
                put(&format!("{side}_{stat}_ncc"), d.ncc.to_string());
            }
        }
        put("l1_improved", q.l1_improved.to_string());
        put("kl_improved", q.kl_improved.to_string());
    }
    s
}

/// Per-sample rows; empty when there is no pairing.
pub fn samples_csv(report: &MetricsReport) -> String {
    let mut s = String::from(SAMPLE_HEADER);
    s.push('\n');
    for r in report.quality.iter().flat_map(|q| &q.samples) {
        let (a, b) = (&r.raw, &r.refined);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.id, a.l1, a.l2, a.kl, a.ncc, b.l1, b.l2, b.kl, b.ncc
        )
        .unwrap();
    }
    s
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<SampleRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLE_HEADER) {
        return Err(Error::format("per-sample report has an unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::format(format!("bad report row {line:?}")));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| Error::format(format!("bad number {:?}", f[i])))
            };
            Ok(SampleRecord {
                id: f[0].parse().map_err(|_| Error::format(format!("bad id {:?}", f[0])))?,
                raw: PatternDiff {
                    l1: num(1)?,
                    l2: num(2)?,
                    kl: num(3)?,
                    ncc: num(4)?,
                },
                refined: PatternDiff {
                    l1: num(5)?,
                    l2: num(6)?,
                    kl: num(7)?,
                    ncc: num(8)?,
                },
            })
        })
        .collect()
}

/// Writes `report.txt`, `summary.csv` and `samples.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), table(report))?;
    fs::write(dir.join("summary.csv"), summary_csv(report))?;
    fs::write(dir.join("samples.csv"), samples_csv(report))?;
    Ok(())
}
