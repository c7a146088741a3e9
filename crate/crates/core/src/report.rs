use std::io::Write;

use serde::Serialize;

use crate::config::Method;
use crate::diagnostics::{DiagnosticsRecord, Side};
use crate::error::{Error, Result};

/// Wall-clock breakdown of a fit. Phase timings are summed over rows (and
/// therefore over worker threads); `total_secs` is the loop's wall-clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub total_secs: f64,
    /// Time spent building sketches or row samples.
    pub sketch_secs: f64,
    /// Time spent forming and solving the per-row systems.
    pub solve_secs: f64,
    /// Time spent evaluating the objective after each iteration.
    pub objective_secs: f64,
}

/// Diagnostics for one regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub iteration: usize,
    pub side: Side,
    pub index: usize,
    pub record: DiagnosticsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub method: Method,
    /// Regularized objective after each full iteration.
    pub objective_trace: Vec<f64>,
    /// Relative RMSE on the training entries after each full iteration.
    pub rmse_trace: Vec<f64>,
    pub iters_run: usize,
    pub converged: bool,
    pub timings: Timings,
    /// Rows without any training rating, left at their current value.
    pub skipped_users: usize,
    pub skipped_items: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub diagnostics: Vec<DiagnosticsRow>,
}

impl FitReport {
    pub(crate) fn new(method: Method) -> Self {
        FitReport {
            method,
            objective_trace: Vec::new(),
            rmse_trace: Vec::new(),
            iters_run: 0,
            converged: false,
            timings: Timings::default(),
            skipped_users: 0,
            skipped_items: 0,
            warnings: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.rmse_trace.last().copied()
    }

    /// `iteration,objective,rmse,relative_change`; the first change is empty.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["iteration", "objective", "rmse", "relative_change"])?;
        for (t, (&obj, &rmse)) in self.objective_trace.iter().zip(&self.rmse_trace).enumerate() {
            let change = if t == 0 {
                String::new()
            } else {
                format!("{:?}", relative_change(self.objective_trace[t - 1], obj))
            };
            w.write_record([(t + 1).to_string(), format!("{obj:?}"), format!("{rmse:?}"), change])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// One line per regression (`aggregate = false`) or mean/max per
    /// half-iteration (`aggregate = true`).
    pub fn write_diagnostics_csv<W: Write>(&self, w: W, aggregate: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "iteration",
            "side",
            "index",
            "spectral_ratio",
            "c_const",
            "rsse",
            "rss_ratio",
            "gamma",
            "converged",
        ])?;
        if !aggregate {
            for d in &self.diagnostics {
                let r = &d.record;
                w.write_record([
                    d.iteration.to_string(),
                    d.side.name().to_string(),
                    d.index.to_string(),
                    format!("{:?}", r.spectral_ratio),
                    format!("{:?}", r.c_const),
                    format!("{:?}", r.rsse),
                    format!("{:?}", r.rss_ratio),
                    format!("{:?}", r.gamma),
                    r.converged.to_string(),
                ])?;
            }
        } else {
            let mut groups: Vec<(usize, Side, Vec<DiagnosticsRecord>)> = Vec::new();
            for d in &self.diagnostics {
                match groups.last_mut() {
                    Some((it, side, recs)) if *it == d.iteration && *side == d.side => recs.push(d.record),
                    _ => groups.push((d.iteration, d.side, vec![d.record])),
                }
            }
            for (it, side, recs) in groups {
                let (mean, max) = DiagnosticsRecord::mean_max(&recs);
                for (label, r) in [("mean", mean), ("max", max)] {
                    w.write_record([
                        it.to_string(),
                        side.name().to_string(),
                        label.to_string(),
                        format!("{:?}", r.spectral_ratio),
                        format!("{:?}", r.c_const),
                        format!("{:?}", r.rsse),
                        format!("{:?}", r.rss_ratio),
                        format!("{:?}", r.gamma),
                        r.converged.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// `|current - previous| / max(previous, tiny)`.
pub fn relative_change(previous: f64, current: f64) -> f64 {
    (current - previous).abs() / previous.abs().max(f64::MIN_POSITIVE)
}
