//! Plain-text tables, CSV and JSON output.

use std::io::{self, Write};

use actplan_core::exact::{to_f64, Exact};
use serde::Serialize;

const GIB: f64 = (1u64 << 30) as f64;

pub fn gib(bytes: u64) -> String {
    format!("{:.2}", bytes as f64 / GIB)
}

pub fn signed_gib(bytes: i128) -> String {
    format!("{:.2}", bytes as f64 / GIB)
}

pub fn percent(value: &Exact) -> String {
    format!("{:.1}%", 100.0 * to_f64(value))
}

pub fn json(out: &mut dyn Write, value: &impl Serialize) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)
}

pub fn csv<R: Serialize>(out: &mut dyn Write, header: &[&str], rows: impl IntoIterator<Item = R>) -> io::Result<()> {
    let mut w = ::csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

/// Aligned columns: the first left-aligned, the rest right-aligned.
pub fn table(out: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    writeln!(out, "{}", line(header.to_vec()))?;
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "))?;
    for row in rows {
        writeln!(out, "{}", line(row.iter().map(String::as_str).collect()))?;
    }
    Ok(())
}
