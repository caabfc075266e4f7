use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is missing column '{0}'")]
    MissingColumn(String),
    #[error("trace is empty")]
    Empty,
    #[error("trace format: {0}")]
    Format(String),
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Column-addressed table of per-sample records.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Trace columns for `n` segments, in file order.
pub fn schema(n: usize) -> Vec<String> {
    let states = crate::model::state_names(n);
    let mut c: Vec<String> = ["t", "current", "x_nd", "x_smd"].iter().map(|s| s.to_string()).collect();
    c.extend(states.iter().cloned());
    c.extend(states.iter().map(|s| format!("hat_{s}")));
    c.extend(["u_bl_raw", "u_ht_raw", "u_bl", "u_ht"].iter().map(|s| s.to_string()));
    c.extend(states.iter().map(|s| format!("zeta_{s}")));
    c.extend(
        ["h", "h_d", "hdot_d", "hdot_tol", "v_d", "v_ob", "nu_1", "nu_2"]
            .iter()
            .map(|s| s.to_string()),
    );
    for k in 1..=n {
        c.push(format!("supply_{k}"));
    }
    c.push("supply_sm".into());
    for k in 1..=n {
        c.push(format!("hdot_{k}"));
    }
    c.push("hdot_sm".into());
    c.extend(
        ["min_eig_rd", "norm_rd", "guard_mask", "fault", "gain_fault", "e_n", "e_sm", "est_err_n", "est_err_sm"]
            .iter()
            .map(|s| s.to_string()),
    );
    c
}

pub const HEADER_COMMENT: &str = "# pemfds trace: pressures in Pa, rates in Pa/s, energies in Pa^2; \
hat_* are observer estimates; u_*_raw before and u_bl/u_ht after clamping to [0,1]; \
guard_mask bit i set when initial-condition guard i+1 fails; fault/gain_fault are 0/1 flags";

impl Trace {
    pub fn new(columns: Vec<String>) -> Self {
        Trace { columns, rows: Vec::new() }
    }

    pub fn col(&self, name: &str) -> Result<usize, TraceError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TraceError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, TraceError> {
        let i = self.col(name)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn segments(&self) -> Result<usize, TraceError> {
        let n = self
            .columns
            .iter()
            .filter(|c| c.starts_with("supply_") && c.as_str() != "supply_sm")
            .count();
        if n == 0 {
            Err(TraceError::MissingColumn("supply_1".into()))
        } else {
            Ok(n)
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        writeln!(w, "{HEADER_COMMENT}")?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.columns)?;
        for r in &self.rows {
            wr.write_record(r.iter().map(|v| format!("{v:?}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Trace, TraceError> {
        let mut br = BufReader::new(r);
        let mut first = String::new();
        br.read_line(&mut first)?;
        if !first.starts_with('#') {
            return Err(TraceError::Format("missing '#' header comment line".into()));
        }
        let mut rd = csv::Reader::from_reader(br);
        let columns: Vec<String> = rd.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| TraceError::Format(format!("bad number '{s}': {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != columns.len() {
                return Err(TraceError::Format("row length differs from header".into()));
            }
            rows.push(row);
        }
        Ok(Trace { columns, rows })
    }

    pub fn load(path: &Path) -> Result<Trace, TraceError> {
        Trace::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut t = Trace::new(vec!["t".into(), "v".into()]);
        t.rows.push(vec![0.0, 0.1 + 0.2]);
        t.rows.push(vec![1e-3, f64::NAN]);
        t.rows.push(vec![2e-3, -1.234_567_890_123_456_7e-300]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = Trace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.columns, t.columns);
        assert_eq!(back.rows[0], t.rows[0]);
        assert!(back.rows[1][1].is_nan());
        assert_eq!(back.rows[2], t.rows[2]);
    }

    #[test]
    fn missing_column_is_an_error() {
        let t = Trace::new(vec!["t".into()]);
        assert!(matches!(t.column("x1"), Err(TraceError::MissingColumn(_))));
    }

    #[test]
    fn schema_scales_with_segments() {
        assert_eq!(schema(2).len() + 8, schema(3).len());
    }
}
