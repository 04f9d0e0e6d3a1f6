//! Deterministic text formatting for CSV artifacts.

use std::fmt::Write;

/// 17 significant digits in scientific notation, enough to round-trip any
/// `f64` and identical across runs.
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn push_float(line: &mut String, x: f64) {
    let _ = write!(line, "{x:.16e}");
}

/// Simple CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    header: Vec<String>,
    body: String,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), body: String::new() }
    }

    pub fn columns(&self) -> usize {
        self.header.len()
    }

    /// Appends one row; leading integer fields are written verbatim.
    pub fn push_row(&mut self, ints: &[u64], floats: &[f64]) {
        debug_assert_eq!(ints.len() + floats.len(), self.header.len());
        let mut first = true;
        for i in ints {
            if !first {
                self.body.push(',');
            }
            first = false;
            let _ = write!(self.body, "{i}");
        }
        for &x in floats {
            if !first {
                self.body.push(',');
            }
            first = false;
            push_float(&mut self.body, x);
        }
        self.body.push('\n');
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        out.push_str(&self.body);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(-3.0), "-3.0000000000000000e0");
        let x = std::f64::consts::PI;
        assert_eq!(float(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn table_render() {
        let mut t = CsvTable::new(["round", "x"]);
        t.push_row(&[3], &[0.5]);
        assert_eq!(t.render(), "round,x\n3,5.0000000000000000e-1\n");
    }
}
