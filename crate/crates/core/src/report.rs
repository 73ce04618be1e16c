//! CSV report rows and number formatting.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `%.{digits}g`-style formatting: shortest of fixed or scientific notation
/// at `digits` significant digits, trailing zeros removed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV number: 12 significant digits.
pub fn csv_num(x: f64) -> String {
    format_sig(x, 12)
}

/// Human-readable number: 6 significant digits.
pub fn human_num(x: f64) -> String {
    format_sig(x, 6)
}

/// How a row's value is judged against its bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Check {
    /// `|value − bound| ≤ tolerance`.
    Equals,
    /// `value ≥ bound − tolerance`.
    AtLeast,
    /// `value ≤ bound + tolerance`.
    AtMost,
}

/// One diagnostic outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub diagnostic: String,
    pub environment: String,
    pub kernel: String,
    pub policy_pair: String,
    pub control: String,
    pub horizon: usize,
    pub value: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub check: Check,
}

impl DiagnosticRow {
    pub fn passes(&self) -> bool {
        match self.check {
            Check::Equals => (self.value - self.bound).abs() <= self.tolerance,
            Check::AtLeast => self.value >= self.bound - self.tolerance,
            Check::AtMost => self.value <= self.bound + self.tolerance,
        }
    }

    fn sort_key(&self) -> (&str, &str, &str, &str, &str, usize) {
        (&self.diagnostic, &self.environment, &self.kernel, &self.policy_pair, &self.control, self.horizon)
    }
}

pub const DIAGNOSTIC_HEADER: &str = "diagnostic,environment,kernel,policy_pair,control,horizon,value,bound,tolerance,pass";

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Rows sorted by their key columns (stable for equal keys).
pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut sorted: Vec<&DiagnosticRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = String::from(DIAGNOSTIC_HEADER);
    out.push('\n');
    for r in sorted {
        let fields = [
            escape(&r.diagnostic),
            escape(&r.environment),
            escape(&r.kernel),
            escape(&r.policy_pair),
            escape(&r.control),
            r.horizon.to_string(),
            csv_num(r.value),
            csv_num(r.bound),
            csv_num(r.tolerance),
            if r.passes() { "pass" } else { "fail" }.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// A header plus already-formatted rows.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|f| escape(f)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn write_report(dir: &Path, file: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(file);
    let mut f = fs::File::create(&path).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(csv_num(0.625), "0.625");
        assert_eq!(csv_num(4.0 / 3.0), "1.33333333333");
        assert_eq!(csv_num(1e-12), "1e-12");
        assert_eq!(csv_num(123456789012345.0), "1.23456789012e+14");
        assert_eq!(csv_num(-0.000123), "-0.000123");
        assert_eq!(csv_num(2.0), "2");
        assert_eq!(human_num(0.1180555555), "0.118056");
        assert_eq!(csv_num(0.0), "0");
        assert_eq!(human_num(999999.7), "1e+06");
    }

    #[test]
    fn rows_are_sorted_and_judged() {
        let row = |d: &str, v: f64| DiagnosticRow {
            diagnostic: d.into(),
            environment: "e".into(),
            kernel: "k".into(),
            policy_pair: "pi_b->pi_e".into(),
            control: "1".into(),
            horizon: 1,
            value: v,
            bound: 0.5,
            tolerance: 1e-9,
            check: Check::Equals,
        };
        let csv = diagnostics_csv(&[row("b", 0.5), row("a", 0.6)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], DIAGNOSTIC_HEADER);
        assert!(lines[1].starts_with("a,") && lines[1].ends_with(",fail"));
        assert!(lines[2].starts_with("b,") && lines[2].ends_with(",pass"));
        assert!(!csv.contains('\r'));
    }
}
