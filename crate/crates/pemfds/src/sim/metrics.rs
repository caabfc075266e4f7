use std::fmt::Write as _;

use super::trace::{Trace, TraceError};
use crate::ph_core::{segment_passivity, SegmentPort};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSettings {
    /// Seconds excluded after each current or setpoint step (and after t = 0)
    /// when counting energy-rate signs.
    pub transient_window: f64,
    /// Seconds skipped before estimation errors count.
    pub estimate_skip: f64,
    /// Tracking band (Pa) used for settle times.
    pub band: f64,
    /// Relative slack on the passivity inequalities.
    pub passivity_tol: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            transient_window: 5.0,
            estimate_skip: 10.0,
            band: 100.0,
            passivity_tol: 1e-9,
        }
    }
}

/// Ordered key/value summary of a trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub entries: Vec<(String, f64)>,
}

impl Metrics {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn push(&mut self, key: &str, v: f64) {
        self.entries.push((key.to_string(), v));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Metrics, TraceError> {
        let mut m = Metrics::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TraceError::Format(format!("metrics line {}: expected key = value", i + 1)))?;
            let v = v
                .trim()
                .parse::<f64>()
                .map_err(|e| TraceError::Format(format!("metrics line {}: {e}", i + 1)))?;
            m.push(k.trim(), v);
        }
        Ok(m)
    }
}

fn rmse(v: &[f64]) -> f64 {
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

fn max_abs<'a>(v: impl Iterator<Item = &'a f64>) -> f64 {
    v.fold(0.0_f64, |m, e| m.max(e.abs()))
}

/// Step epochs inferred from changes in the current or setpoint columns.
pub fn step_epochs(trace: &Trace) -> Result<Vec<f64>, TraceError> {
    let t = trace.column("t")?;
    let cols = [trace.column("current")?, trace.column("x_nd")?, trace.column("x_smd")?];
    let mut out = vec![t[0]];
    for i in 1..t.len() {
        if cols.iter().any(|c| c[i] != c[i - 1]) {
            out.push(t[i]);
        }
    }
    Ok(out)
}

/// Time from each step until the error last leaves the band, maximised over
/// steps; NaN when the error is still outside the band when the next step
/// (or the end of the trace) arrives.
fn settle_time(t: &[f64], e: &[f64], epochs: &[f64], band: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (j, &t0) in epochs.iter().enumerate() {
        let t1 = epochs.get(j + 1).copied().unwrap_or(f64::INFINITY);
        let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= t0 && t[i] < t1).collect();
        let Some(&last) = idx.last() else { continue };
        if e[last].abs() > band {
            return f64::NAN;
        }
        let out = idx.iter().rev().find(|&&i| e[i].abs() > band);
        let settle = match out {
            Some(&i) => t[(i + 1).min(last)] - t0,
            None => 0.0,
        };
        worst = worst.max(settle);
    }
    worst
}

/// Summary statistics computed only from trace columns.
pub fn metrics(trace: &Trace, s: &MetricSettings) -> Result<Metrics, TraceError> {
    if trace.rows.is_empty() {
        return Err(TraceError::Empty);
    }
    let n = trace.segments()?;
    let t = trace.column("t")?;
    let e_n = trace.column("e_n")?;
    let e_sm = trace.column("e_sm")?;
    let est_n = trace.column("est_err_n")?;
    let est_sm = trace.column("est_err_sm")?;
    let hdot = trace.column("hdot_d")?;
    let tol = trace.column("hdot_tol")?;
    let v_d = trace.column("v_d")?;
    let min_eig = trace.column("min_eig_rd")?;
    let norm_rd = trace.column("norm_rd")?;
    let guard = trace.column("guard_mask")?;
    let fault = trace.column("fault")?;
    let gain_fault = trace.column("gain_fault")?;
    let nu1 = trace.column("nu_1")?;
    let nu2 = trace.column("nu_2")?;
    let epochs = step_epochs(trace)?;

    let mut m = Metrics::default();
    m.push("samples", t.len() as f64);
    m.push("t_final", *t.last().unwrap());
    m.push("rmse_e_n", rmse(&e_n));
    m.push("rmse_e_sm", rmse(&e_sm));
    m.push("max_abs_e_n", max_abs(e_n.iter()));
    m.push("max_abs_e_sm", max_abs(e_sm.iter()));
    m.push("settle_time_n", settle_time(&t, &e_n, &epochs, s.band));
    m.push("settle_time_sm", settle_time(&t, &e_sm, &epochs, s.band));

    let late: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= s.estimate_skip).collect();
    m.push("max_est_err_n", max_abs(late.iter().map(|&i| &est_n[i])));
    m.push("max_est_err_sm", max_abs(late.iter().map(|&i| &est_sm[i])));

    let counted: Vec<usize> = (0..t.len())
        .filter(|&i| hdot[i].is_finite())
        .filter(|&i| !epochs.iter().any(|&te| t[i] >= te && t[i] < te + s.transient_window))
        .collect();
    let nonpos = counted.iter().filter(|&&i| hdot[i] <= tol[i]).count();
    m.push("hdot_samples", counted.len() as f64);
    m.push(
        "hdot_nonpos_fraction",
        if counted.is_empty() { f64::NAN } else { nonpos as f64 / counted.len() as f64 },
    );
    m.push("v_d_initial", v_d[0]);
    m.push("v_d_final", *v_d.last().unwrap());

    let finite_eig: Vec<usize> = (0..t.len()).filter(|&i| min_eig[i].is_finite()).collect();
    m.push("min_eig_rd", finite_eig.iter().map(|&i| min_eig[i]).fold(f64::INFINITY, f64::min));
    m.push(
        "min_eig_rd_rel",
        finite_eig
            .iter()
            .map(|&i| min_eig[i] / norm_rd[i].max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min),
    );
    m.push("singular_rd_samples", (t.len() - finite_eig.len()) as f64);
    m.push("guard_violations", guard.iter().filter(|g| **g != 0.0).count() as f64);
    m.push("faults", fault.iter().filter(|g| **g != 0.0).count() as f64);
    m.push("gain_faults", gain_fault.iter().filter(|g| **g != 0.0).count() as f64);
    m.push(
        "first_nonzero_nu_t",
        (0..t.len()).find(|&i| nu1[i] != 0.0 || nu2[i] != 0.0).map(|i| t[i]).unwrap_or(f64::NAN),
    );

    let totals: Vec<Vec<f64>> = (1..=n).map(|k| trace.column(&format!("x{k}"))).collect::<Result<_, _>>()?;
    let mut supply: Vec<Vec<f64>> = (1..=n).map(|k| trace.column(&format!("supply_{k}"))).collect::<Result<_, _>>()?;
    supply.push(trace.column("supply_sm")?);
    let mut rates: Vec<Vec<f64>> = (1..=n).map(|k| trace.column(&format!("hdot_{k}"))).collect::<Result<_, _>>()?;
    rates.push(trace.column("hdot_sm")?);
    let samples: Vec<(Vec<f64>, Vec<SegmentPort>)> = (0..t.len())
        .map(|i| {
            let tot = totals.iter().map(|c| c[i]).collect();
            let ports = (0..=n)
                .map(|k| SegmentPort {
                    energy: 0.0,
                    energy_rate: rates[k][i],
                    supply: supply[k][i],
                })
                .collect();
            (tot, ports)
        })
        .collect();
    let rep = segment_passivity(samples.iter().map(|(a, b)| (a.as_slice(), b.as_slice())), s.passivity_tol);
    m.push("passivity_ordered_samples", rep.ordered_samples as f64);
    m.push("passivity_ordering_fraction", rep.ordering_fraction());
    m.push("passivity_segment_violations", rep.segment_violations as f64);
    m.push("passivity_total_violations", rep.total_violations as f64);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trace::schema;

    fn flat_trace(rows: usize) -> Trace {
        let cols = schema(2);
        let mut tr = Trace::new(cols.clone());
        for i in 0..rows {
            let mut r = vec![0.0; cols.len()];
            r[0] = i as f64;
            tr.rows.push(r);
        }
        tr
    }

    #[test]
    fn equilibrium_trace_has_zero_errors() {
        let m = metrics(&flat_trace(20), &MetricSettings::default()).unwrap();
        assert_eq!(m.get("rmse_e_n"), Some(0.0));
        assert_eq!(m.get("rmse_e_sm"), Some(0.0));
        assert_eq!(m.get("max_est_err_n"), Some(0.0));
        assert_eq!(m.get("settle_time_n"), Some(0.0));
        assert!(m.get("first_nonzero_nu_t").unwrap().is_nan());
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            metrics(&Trace::new(schema(2)), &MetricSettings::default()),
            Err(TraceError::Empty)
        ));
    }

    #[test]
    fn text_round_trip() {
        let m = metrics(&flat_trace(5), &MetricSettings::default()).unwrap();
        let back = Metrics::parse(&m.to_text()).unwrap();
        assert_eq!(back.entries.len(), m.entries.len());
        for ((ka, va), (kb, vb)) in m.entries.iter().zip(back.entries.iter()) {
            assert_eq!(ka, kb);
            assert!(va.to_bits() == vb.to_bits() || (va.is_nan() && vb.is_nan()));
        }
    }

    #[test]
    fn settle_time_tracks_last_exit() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let e = [500.0, 300.0, 50.0, 200.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(settle_time(&t, &e, &[0.0], 100.0), 4.0);
        assert!(settle_time(&t, &[500.0; 10], &[0.0], 100.0).is_nan());
    }
}
