use std::fmt::Write as _;

use crate::relengine::{BYTES_PER_ENTRY, DENSE_BYTES_PER_ENTRY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemDims {
    pub rows: usize,
    pub attrs: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemRow {
    pub variable: String,
    pub entries: u64,
}

impl MemRow {
    pub fn dense_bytes(&self) -> u64 {
        self.entries * DENSE_BYTES_PER_ENTRY
    }

    pub fn relational_bytes(&self) -> u64 {
        self.entries * BYTES_PER_ENTRY
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemReport {
    pub dims: MemDims,
    /// One row per matrix of a training iteration.
    pub rows: Vec<MemRow>,
    pub training: MemRow,
    /// Forward pass: features, both activations, labels, one `l_ho` and the
    /// weights.
    pub inference: MemRow,
}

pub fn mem_report(dims: MemDims) -> MemReport {
    let MemDims { rows: n, attrs: m, hidden: h, classes: l } = dims;
    let (n, m, h, l) = (n as u64, m as u64, h as u64, l as u64);
    let row = |v: &str, e: u64| MemRow { variable: v.to_string(), entries: e };
    let rows = vec![
        row("x", n * m),
        row("a_xh", n * h),
        row("l_xh", n * h),
        row("d_xh", n * h),
        row("a_ho", n * l),
        row("l_ho", n * l),
        row("d_ho", n * l),
        row("y_ones", n * l),
        row("w_xh", m * h),
        row("w_ho", h * l),
    ];
    let training = row("sum", rows.iter().map(|r| r.entries).sum());
    let inference = row("inference", n * m + n * h + 2 * n * l + m * h + h * l);
    MemReport { dims, rows, training, inference }
}

pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / 1024.0
}

impl MemReport {
    fn all_rows(&self) -> impl Iterator<Item = &MemRow> {
        self.rows.iter().chain([&self.training, &self.inference])
    }

    pub fn to_text(&self) -> String {
        let header = ["variable", "entries", "dense_bytes", "dense_kib", "rel_bytes", "rel_kib"];
        let body: Vec<[String; 6]> = self
            .all_rows()
            .map(|r| {
                [
                    r.variable.clone(),
                    r.entries.to_string(),
                    r.dense_bytes().to_string(),
                    format!("{:.2}", kib(r.dense_bytes())),
                    r.relational_bytes().to_string(),
                    format!("{:.2}", kib(r.relational_bytes())),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &body {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let d = self.dims;
        let _ = writeln!(out, "n={} m={} h={} l={}", d.rows, d.attrs, d.hidden, d.classes);
        let fmt_line = |out: &mut String, cells: &[&str]| {
            let mut line = format!("{:<w$}", cells[0], w = widths[0]);
            for (c, w) in cells[1..].iter().zip(&widths[1..]) {
                let _ = write!(line, "  {c:>w$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        };
        fmt_line(&mut out, &header);
        for r in &body {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            fmt_line(&mut out, &cells);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,entries,dense_bytes,relational_bytes\n");
        for r in self.all_rows() {
            let _ = writeln!(out, "{},{},{},{}", r.variable, r.entries, r.dense_bytes(), r.relational_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_dims() {
        let r = mem_report(MemDims { rows: 1, attrs: 1, hidden: 1, classes: 1 });
        assert!(r.rows.iter().all(|row| row.entries == 1));
        assert_eq!(r.training.entries, 10);
    }

    #[test]
    fn text_and_csv_have_every_row() {
        let r = mem_report(MemDims { rows: 150, attrs: 4, hidden: 20, classes: 3 });
        assert_eq!(r.to_csv().lines().count(), 13);
        assert!(r.to_text().contains("90.16"));
        assert!(r.to_csv().contains("inference,4640,37120,111360"));
    }
}
