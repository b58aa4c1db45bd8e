//! Cross-repeat statistics of error traces.

use std::io::{self, Write};

use fedq_core::engine::{detect_phase_transition, format_float};
use serde::Serialize;

/// Mean of the last 5% of a trace (at least one entry).
pub fn plateau_error(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    let n = ((errors.len() - 1) / 20).max(1).min(errors.len());
    errors[errors.len() - n..].iter().sum::<f64>() / n as f64
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// First iteration with error at or below `threshold`.
pub fn first_hit(errors: &[f64], threshold: f64) -> Option<usize> {
    errors.iter().position(|&e| e <= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSeries {
    pub name: String,
    #[serde(skip)]
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub std: Vec<f64>,
    pub final_errors: Vec<f64>,
    pub plateau_errors: Vec<f64>,
    /// Smoothed-argmin phase transition per repeat.
    pub t0: Vec<usize>,
    /// Smoothed minimum per repeat.
    pub min_errors: Vec<f64>,
}

impl AggregateSeries {
    /// `traces` are per-repeat error series of equal length.
    pub fn from_traces(name: &str, traces: &[&[f64]], window: usize) -> Self {
        assert!(!traces.is_empty(), "no traces to aggregate");
        let len = traces[0].len();
        assert!(traces.iter().all(|t| t.len() == len), "traces differ in length");
        let mut mean = Vec::with_capacity(len);
        let mut std = Vec::with_capacity(len);
        let mut column = vec![0.0; traces.len()];
        for t in 0..len {
            for (c, tr) in column.iter_mut().zip(traces) {
                *c = tr[t];
            }
            let (m, s) = mean_std(&column);
            mean.push(m);
            std.push(s);
        }
        let t0: Vec<usize> = traces.iter().map(|t| detect_phase_transition(t, window)).collect();
        let min_errors = traces
            .iter()
            .zip(&t0)
            .map(|(t, &i)| fedq_core::engine::moving_average(t, window)[i])
            .collect();
        Self {
            name: name.to_string(),
            mean,
            std,
            final_errors: traces.iter().map(|t| *t.last().unwrap()).collect(),
            plateau_errors: traces.iter().map(|t| plateau_error(t)).collect(),
            t0,
            min_errors,
        }
    }

    pub fn plateau_mean_std(&self) -> (f64, f64) {
        mean_std(&self.plateau_errors)
    }

    /// `t,mean,std`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,mean,std")?;
        for (t, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(out, "{t},{},{}", format_float(*m), format_float(*s))?;
        }
        Ok(())
    }
}
