//! Report output: one JSON object per line, plus an aligned text table.

use std::io::Write;

use serde::Serialize;

use super::ablation::AblationCell;
use super::eval::EvalReport;
use crate::error::Result;

/// Write each item as a single JSON line.
pub fn write_jsonl<T: Serialize>(out: &mut impl Write, items: &[T]) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Left-aligned first column, right-aligned others.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = fmt_row(header.to_vec());
    s.push('\n');
    s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    s.push('\n');
    for row in rows {
        s.push_str(&fmt_row(row.iter().map(String::as_str).collect()));
        s.push('\n');
    }
    s
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

pub fn eval_table(reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.3}", r.perplexity),
                format!("{:.1}", r.tokens_per_second),
                opt(r.speedup, 2),
                format!("{:.3}", r.retrieval_fraction),
                opt(r.retention, 3),
                r.key_dim.map_or("-".into(), |d| d.to_string()),
                opt(r.lambda, 2),
                format!("{:.2}", r.wall_seconds),
            ]
        })
        .collect();
    table(
        &["model", "ppl", "tok/s", "speedup", "retrieved", "retention", "dim", "lambda", "wall_s"],
        &rows,
    )
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                format!("{:?}/{:?}", c.mask, c.weight).to_lowercase(),
                format!("{:.2}", c.fraction),
                format!("{:.3}", c.retrieval_fraction),
                format!("{:.3}", c.perplexity),
            ]
        })
        .collect();
    table(&["mask/weight", "pruned", "retrieved", "ppl"], &rows)
}
