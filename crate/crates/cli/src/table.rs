//! Mean ± sample standard deviation of test MSE per method over runs.

use std::fs;
use std::path::{Path, PathBuf};

use rlpf::methods::Method;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub runs: Vec<f64>,
}

impl Row {
    pub fn mean(&self) -> Option<f64> {
        (!self.runs.is_empty()).then(|| self.runs.iter().sum::<f64>() / self.runs.len() as f64)
    }

    /// Sample standard deviation; `None` below two runs.
    pub fn std(&self) -> Option<f64> {
        let n = self.runs.len();
        if n < 2 {
            return None;
        }
        let m = self.mean()?;
        Some((self.runs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
    }

    /// `0.700±0.141`, or `0.700±n/a` for a single run.
    pub fn summary(&self) -> String {
        match (self.mean(), self.std()) {
            (Some(m), Some(s)) => format!("{m:.3}±{s:.3}"),
            (Some(m), None) => format!("{m:.3}±n/a"),
            _ => "absent".into(),
        }
    }
}

/// Methods the table reports as absent.
pub const ABSENT: [&str; 1] = ["transformer"];

/// Run directories holding results: `dir` itself and every `repeat-*`
/// subdirectory, in name order.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = vec![dir.to_path_buf()];
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", dir.display())))?;
    let mut repeats: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let r = name.strip_prefix("repeat-")?.parse().ok()?;
            Some((r, e.path()))
        })
        .collect();
    repeats.sort();
    out.extend(repeats.into_iter().map(|(_, p)| p));
    Ok(out)
}

fn read_eval(path: &Path) -> Result<f64, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "mse")
        .ok_or_else(|| CliError::User(format!("{} has no mse column", path.display())))?;
    let record = r
        .records()
        .next()
        .ok_or_else(|| CliError::User(format!("{} is empty", path.display())))??;
    record[col]
        .parse()
        .map_err(|_| CliError::User(format!("{}: bad mse value", path.display())))
}

/// Test MSEs of every evaluated run of each method, in `methods` order.
/// Fails listing the methods with no runs.
pub fn collect(dir: &Path, methods: &[Method]) -> Result<Vec<Row>, CliError> {
    let dirs = run_dirs(dir)?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for m in methods {
        let mut runs = Vec::new();
        for d in &dirs {
            let path = d.join(m.name()).join("eval.csv");
            if path.exists() {
                runs.push(read_eval(&path)?);
            }
        }
        if runs.is_empty() {
            missing.push(m.name());
        }
        rows.push(Row {
            method: m.name().into(),
            runs,
        });
    }
    if !missing.is_empty() {
        return Err(CliError::User(format!(
            "no evaluated runs for: {}",
            missing.join(", ")
        )));
    }
    Ok(rows)
}

pub fn render_csv(rows: &[Row]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "runs", "mean", "std", "summary"])?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.runs.len().to_string(),
            fmt(r.mean()),
            fmt(r.std()),
            r.summary(),
        ])?;
    }
    for name in ABSENT {
        w.write_record([name, "0", "n/a", "n/a", "absent"])?;
    }
    w.into_inner()
        .map_err(|e| CliError::User(e.to_string()))
}

pub fn render_text(rows: &[Row]) -> String {
    let mut lines: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.method.clone(), format!("{} (n={})", r.summary(), r.runs.len())))
        .collect();
    lines.extend(ABSENT.iter().map(|n| (n.to_string(), "absent".to_string())));
    let width = lines.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  test MSE\n", "method");
    for (m, s) in lines {
        out.push_str(&format!("{m:<width$}  {s}\n"));
    }
    out
}

pub fn write(dir: &Path, rows: &[Row]) -> Result<(), CliError> {
    fs::write(dir.join("table.csv"), render_csv(rows)?)?;
    fs::write(dir.join("table.txt"), render_text(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_the_sample_deviation() {
        let r = Row {
            method: "rlpf-lambda".into(),
            runs: vec![0.6, 0.8],
        };
        assert_eq!(r.summary(), "0.700±0.141");
        let one = Row {
            method: "dbpf".into(),
            runs: vec![0.5],
        };
        assert_eq!(one.std(), None);
        assert_eq!(one.summary(), "0.500±n/a");
    }

    #[test]
    fn rows_follow_the_requested_order_and_missing_runs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, method, mse) in [("", "dbpf", 4.0), ("repeat-0", "rspf", 0.3), ("repeat-1", "rspf", 0.2)] {
            let d = dir.path().join(sub).join(method);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("eval.csv"), format!("method,mse\n{method},{mse}\n")).unwrap();
        }
        let rows = collect(dir.path(), &[Method::Rspf, Method::Dbpf]).unwrap();
        assert_eq!(rows[0].method, "rspf");
        assert_eq!(rows[0].runs, vec![0.3, 0.2]);
        assert_eq!(rows[1].runs, vec![4.0]);
        let text = render_text(&rows);
        assert!(text.lines().nth(1).unwrap().starts_with("rspf"));
        assert!(text.contains("transformer"));
        let err = collect(dir.path(), &[Method::Lstm, Method::Madpf]).unwrap_err();
        assert_eq!(err.to_string(), "no evaluated runs for: lstm, madpf");
    }
}
