use std::fmt::Write as _;
use std::path::Path;

use super::{IdentityReport, TransferReport};
use crate::data::AuKind;
use crate::error::{EetError, Result};

const NA: &str = "NA";
const IDENTITY_HEADER: &str = "method,accuracy,tar_at_far1,threshold,n_same,n_diff";

fn bad(msg: impl Into<String>) -> EetError {
    EetError::Data(format!("report: {}", msg.into()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| bad(format!("not a number: {s:?}")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == NA {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

/// Column order shared by every report: AUs ascending, then the average.
fn column_order(aus: &[AuKind]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..aus.len()).collect();
    order.sort_by_key(|&i| aus[i]);
    order
}

/// One `pcc`, `mse` and `n` row per method.
pub fn transfer_csv(reports: &[TransferReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| bad("no transfer reports"))?;
    let mut sorted = first.aus.clone();
    sorted.sort();
    let mut out = String::from("method,metric");
    for au in &sorted {
        write!(out, ",{}", au.facs()).expect("string write");
    }
    out.push_str(",Avg\n");
    for r in reports {
        let mut mine = r.aus.clone();
        mine.sort();
        if mine != sorted {
            return Err(bad(format!("method {} reports a different AU set", r.method)));
        }
        let order = column_order(&r.aus);
        let pcc: Vec<String> = order.iter().map(|&i| opt(r.pcc[i])).collect();
        let mse: Vec<String> = order.iter().map(|&i| r.mse[i].to_string()).collect();
        let n = vec![r.samples.to_string(); order.len() + 1];
        writeln!(out, "{},pcc,{},{}", r.method, pcc.join(","), opt(r.avg_pcc)).expect("string write");
        writeln!(out, "{},mse,{},{}", r.method, mse.join(","), r.avg_mse).expect("string write");
        writeln!(out, "{},n,{}", r.method, n.join(",")).expect("string write");
    }
    Ok(out)
}

pub fn parse_transfer_csv(text: &str) -> Result<Vec<TransferReport>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty transfer csv"))?.split(',').collect();
    if header.len() < 4 || header[0] != "method" || header[1] != "metric" || header.last() != Some(&"Avg") {
        return Err(bad("unexpected transfer csv header"));
    }
    let aus = header[2..header.len() - 1]
        .iter()
        .map(|label| {
            AuKind::ALL.into_iter().find(|a| a.facs() == *label).ok_or_else(|| bad(format!("unknown AU column {label}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = aus.len();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    if rows.len() % 3 != 0 {
        return Err(bad("transfer csv rows must come in pcc/mse/n triples"));
    }
    rows.chunks(3)
        .map(|rows| {
            let method = rows[0][0];
            for (row, metric) in rows.iter().zip(["pcc", "mse", "n"]) {
                if row.len() != m + 3 || row[0] != method || row[1] != metric {
                    return Err(bad(format!("malformed {metric} row for {method}")));
                }
            }
            let pcc = rows[0][2..2 + m].iter().map(|s| parse_opt(s)).collect::<Result<Vec<_>>>()?;
            let mse = rows[1][2..2 + m].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let samples = rows[2][2].parse().map_err(|_| bad("sample count"))?;
            Ok(TransferReport {
                method: method.to_string(),
                aus: aus.clone(),
                pcc,
                mse,
                avg_pcc: parse_opt(rows[0][m + 2])?,
                avg_mse: num(rows[1][m + 2])?,
                samples,
            })
        })
        .collect()
}

pub fn identity_csv(reports: &[IdentityReport]) -> String {
    let mut out = format!("{IDENTITY_HEADER}\n");
    for r in reports {
        writeln!(out, "{},{},{},{},{},{}", r.method, r.accuracy, r.tar_at_far1, r.threshold, r.n_same, r.n_diff)
            .expect("string write");
    }
    out
}

pub fn parse_identity_csv(text: &str) -> Result<Vec<IdentityReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(IDENTITY_HEADER) {
        return Err(bad("unexpected identity csv header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("identity row has {} fields", f.len())));
            }
            Ok(IdentityReport {
                method: f[0].to_string(),
                accuracy: num(f[1])?,
                tar_at_far1: num(f[2])?,
                threshold: num(f[3])?,
                n_same: f[4].parse().map_err(|_| bad("n_same"))?,
                n_diff: f[5].parse().map_err(|_| bad("n_diff"))?,
            })
        })
        .collect()
}

/// Aligned plain-text rendering of both tables.
pub fn format_table(transfer: &[TransferReport], identity: &[IdentityReport]) -> String {
    let mut out = String::new();
    if let Some(first) = transfer.first() {
        let order = column_order(&first.aus);
        let width = transfer.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        write!(out, "{:<width$}  {:<6}", "method", "metric").expect("string write");
        for &i in &order {
            write!(out, " {:>8}", first.aus[i].facs()).expect("string write");
        }
        writeln!(out, " {:>8}", "Avg").expect("string write");
        let cell = |v: Option<f64>| v.map_or_else(|| format!("{NA:>8}"), |x| format!("{x:>8.3}"));
        for r in transfer {
            let order = column_order(&r.aus);
            write!(out, "{:<width$}  {:<6}", r.method, "PCC").expect("string write");
            for &i in &order {
                out.push(' ');
                out.push_str(&cell(r.pcc[i]));
            }
            writeln!(out, " {}", cell(r.avg_pcc)).expect("string write");
            write!(out, "{:<width$}  {:<6}", "", "MSE").expect("string write");
            for &i in &order {
                out.push(' ');
                out.push_str(&cell(Some(r.mse[i])));
            }
            writeln!(out, " {}", cell(Some(r.avg_mse))).expect("string write");
        }
    }
    if !identity.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        let width = identity.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        writeln!(out, "{:<width$}  {:>8}  {:>11}", "method", "accuracy", "TAR@FAR1%").expect("string write");
        for r in identity {
            writeln!(out, "{:<width$}  {:>7.1}%  {:>10.1}%", r.method, 100.0 * r.accuracy, 100.0 * r.tar_at_far1)
                .expect("string write");
        }
    }
    out
}

/// Writes `transfer.csv`, `identity.csv` and `report.txt` into `dir`.
pub fn emit_report(dir: &Path, transfer: &[TransferReport], identity: &[IdentityReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EetError::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| EetError::io(path, e))
    };
    if !transfer.is_empty() {
        write("transfer.csv", transfer_csv(transfer)?)?;
    }
    if !identity.is_empty() {
        write("identity.csv", identity_csv(identity))?;
    }
    write("report.txt", format_table(transfer, identity))
}
