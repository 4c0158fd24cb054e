//! Report files and their plain-text tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fbssvep_core::eval::{EvalReport, MethodReport, PCell, PValueMatrix, REPORT_SCHEMA};

use crate::error::{io, json, Error, Result};

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(json(path))?;
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json(path))?;
    let schema = value.get("schema").and_then(serde_json::Value::as_str).unwrap_or("");
    if schema != REPORT_SCHEMA {
        return Err(Error::Version { path: path.into(), found: schema.into(), expected: REPORT_SCHEMA.into() });
    }
    serde_json::from_value(value).map_err(json(path))
}

/// Pools the methods of several reports into one, with subjects put in the
/// first method's order, and recomputes the p-values.
pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
    let mut methods: Vec<MethodReport> = reports.iter().flat_map(|r| r.methods.iter().cloned()).collect();
    if let Some(order) = methods.first().map(|m| m.subjects.iter().map(|s| s.subject.clone()).collect::<Vec<_>>()) {
        for m in methods.iter_mut().skip(1) {
            let mut sorted = Vec::with_capacity(order.len());
            for id in &order {
                if let Some(s) = m.subjects.iter().find(|s| &s.subject == id) {
                    sorted.push(s.clone());
                }
            }
            if sorted.len() == m.subjects.len() {
                m.subjects = sorted;
            }
        }
    }
    Ok(EvalReport::new(methods)?)
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(
                |(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                },
            )
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Subjects down the side, methods across; then mean and standard deviation
/// of accuracy (%) and mean macro F1.
pub fn accuracy_table(methods: &[MethodReport]) -> String {
    let mut rows =
        vec![std::iter::once(String::from("Subject")).chain(methods.iter().map(|m| m.method.clone())).collect()];
    let mut subjects: Vec<&str> = Vec::new();
    for m in methods {
        for s in &m.subjects {
            if !subjects.contains(&s.subject.as_str()) {
                subjects.push(&s.subject);
            }
        }
    }
    for id in subjects {
        let mut row = vec![String::from(id)];
        for m in methods {
            row.push(
                m.subjects
                    .iter()
                    .find(|s| s.subject == id)
                    .map_or_else(|| "-".into(), |s| format!("{:.1}", s.accuracy)),
            );
        }
        rows.push(row);
    }
    let summary = |label: &str, cell: &dyn Fn(&MethodReport) -> String| -> Vec<String> {
        std::iter::once(String::from(label)).chain(methods.iter().map(cell)).collect()
    };
    rows.push(summary("Mean", &|m| format!("{:.1}", m.mean_accuracy)));
    rows.push(summary("Std", &|m| format!("{:.1}", m.std_accuracy)));
    rows.push(summary("F1", &|m| format!("{:.3}", m.mean_f1)));
    render(&rows)
}

pub fn p_value_table(p: &PValueMatrix) -> String {
    let mut rows = vec![std::iter::once(String::new()).chain(p.methods.iter().cloned()).collect::<Vec<_>>()];
    for (name, cells) in p.methods.iter().zip(&p.cells) {
        let mut row = vec![name.clone()];
        row.extend(cells.iter().map(|c| match c {
            None => String::from("-"),
            Some(PCell::P(v)) => format!("{v:.4}"),
            Some(PCell::Degenerate) => String::from("equal"),
            Some(PCell::TooFew) => String::from("n<5"),
        }));
        rows.push(row);
    }
    render(&rows)
}

pub fn render_report(report: &EvalReport) -> String {
    let mut out = accuracy_table(&report.methods);
    if let Some(p) = &report.p_values {
        out.push_str("\nPaired Wilcoxon signed-rank p-values\n");
        out.push_str(&p_value_table(p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbssvep_core::eval::SubjectResult;

    fn method(name: &str, accs: &[f64]) -> MethodReport {
        let subjects = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| SubjectResult {
                subject: format!("S{:02}", i + 1),
                accuracy: a,
                f1: a / 100.0,
                n_windows: 16,
            })
            .collect();
        MethodReport::new(name, subjects)
    }

    #[test]
    fn table_has_subject_rows_then_summary() {
        let text = accuracy_table(&[method("FBCCA", &[80.0, 90.0]), method("RF", &[70.0, 75.0])]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].starts_with("Subject") && lines[0].ends_with("RF"));
        assert!(lines[2].starts_with("S01") && lines[2].contains("80.0") && lines[2].contains("70.0"));
        assert!(lines[4].starts_with("Mean") && lines[4].contains("85.0") && lines[4].contains("72.5"));
        assert!(lines[5].starts_with("Std") && lines[5].contains("7.1"));
        assert!(lines[6].starts_with("F1") && lines[6].contains("0.850"));
    }

    #[test]
    fn self_comparison_is_degenerate() {
        let a = method("FBCCA", &[80.0, 90.0, 70.0, 60.0, 85.0]);
        let b = MethodReport { method: "FBCCA again".into(), ..a.clone() };
        let r = EvalReport::new(vec![a, b]).unwrap();
        let text = p_value_table(r.p_values.as_ref().unwrap());
        assert_eq!(text.matches("equal").count(), 2);
    }

    #[test]
    fn merge_reorders_subjects_and_round_trips() {
        let a = EvalReport::new(vec![method("A", &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0])]).unwrap();
        let mut b_method = method("B", &[11.0, 22.0, 33.0, 44.0, 55.0, 66.0]);
        b_method.subjects.reverse();
        let b = EvalReport::new(vec![b_method]).unwrap();
        let merged = merge(&[a, b]).unwrap();
        assert_eq!(merged.methods[1].subjects[0].subject, "S01");
        let Some(PCell::P(p)) = merged.p_values.as_ref().unwrap().cells[0][1] else { panic!() };
        assert!((p - 0.03125).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        save_report(&path, &merged).unwrap();
        assert_eq!(load_report(&path).unwrap(), merged);
        assert!(render_report(&merged).contains("0.0312"));
    }
}
