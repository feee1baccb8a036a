use std::io::Write;

use crate::error::{Error, Result};

/// Metrics after `k` rounds. Bits are cumulative and averaged per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub objective: f64,
    pub grad_sq_norm: f64,
    pub uplink_bits: f64,
    pub downlink_bits: f64,
    pub ms: u64,
}

pub const TRACE_HEADER: &str = "k,objective,grad_sq_norm,uplink_bits,downlink_bits,ms";

impl TraceRow {
    fn csv_fields(&self) -> String {
        format!(
            "{},{:e},{:e},{},{},{}",
            self.k, self.objective, self.grad_sq_norm, self.uplink_bits, self.downlink_bits, self.ms
        )
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<csv output>".into(),
        source: e,
    }
}

pub fn write_trace_csv<W: Write>(out: &mut W, rows: &[TraceRow]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}").map_err(io_err)?;
    for r in rows {
        writeln!(out, "{}", r.csv_fields()).map_err(io_err)?;
    }
    Ok(())
}

/// One CSV keyed by `(variant, k)`.
pub fn write_compare_csv<W: Write>(out: &mut W, runs: &[(String, Vec<TraceRow>)]) -> Result<()> {
    writeln!(out, "variant,{TRACE_HEADER}").map_err(io_err)?;
    for (name, rows) in runs {
        for r in rows {
            writeln!(out, "{name},{}", r.csv_fields()).map_err(io_err)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![TraceRow {
            k: 0,
            objective: std::f64::consts::LN_2,
            grad_sq_norm: 0.25,
            uplink_bits: 0.0,
            downlink_bits: 0.0,
            ms: 0,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "k,objective,grad_sq_norm,uplink_bits,downlink_bits,ms\n0,6.931471805599453e-1,2.5e-1,0,0,0\n");

        let mut buf = Vec::new();
        write_compare_csv(&mut buf, &[("cgd".into(), rows)]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("variant,k,"));
    }
}
