//! Minimal RFC 4180 CSV writer for experiment result tables.

use std::io::{self, Write};

/// Writes one header row then data rows; fields containing commas,
/// quotes, or newlines are quoted with embedded quotes doubled.
pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &[&str]) -> io::Result<Self> {
        write_row_raw(&mut out, header.iter().map(|s| s.to_string()))?;
        Ok(CsvWriter { out, columns: header.len() })
    }

    pub fn write_row<S: AsRef<str>>(&mut self, fields: &[S]) -> io::Result<()> {
        assert_eq!(fields.len(), self.columns, "row width must match header");
        write_row_raw(&mut self.out, fields.iter().map(|s| s.as_ref().to_string()))
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_row_raw<W: Write>(out: &mut W, fields: impl Iterator<Item = String>) -> io::Result<()> {
    let mut first = true;
    for field in fields {
        if !first {
            out.write_all(b",")?;
        }
        first = false;
        out.write_all(escape(&field).as_bytes())?;
    }
    out.write_all(b"\r\n")
}

fn escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') || field.contains('\r') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Formats a float with enough digits to round-trip, without trailing
/// zero noise for integral values.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{:.1}", v)
    } else {
        format!("{}", v)
    }
}
