//! The results table: one row per unit and metric, then one aggregate row
//! per model and metric.
//!
//! CSV columns are `model,trial,metric,value,std`. Per-trial rows carry the
//! trial index and an empty `std`. Aggregate rows carry `mean` as the trial
//! (or `single-run` when the experiment ran one trial, with `std = 0`) and
//! the unbiased standard deviation over trials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub trial: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
}

/// Metrics of one model x trial unit, in emission order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitMetrics {
    pub id: usize,
    /// Model name, prefixed by `<variant>/` for injected datasets.
    pub label: String,
    pub trial: usize,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<Row>,
}

pub const AGGREGATE: &str = "mean";
pub const SINGLE_RUN: &str = "single-run";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl Report {
    /// Units are taken in id order; aggregates follow in order of first
    /// appearance.
    pub fn from_units(units: &[UnitMetrics], trials: usize) -> Report {
        let mut units: Vec<&UnitMetrics> = units.iter().collect();
        units.sort_by_key(|u| u.id);
        let mut rows = Vec::new();
        let mut groups: Vec<(String, String, Vec<f64>)> = Vec::new();
        for u in &units {
            for (metric, value) in &u.metrics {
                rows.push(Row {
                    model: u.label.clone(),
                    trial: u.trial.to_string(),
                    metric: metric.clone(),
                    value: *value,
                    std: None,
                });
                match groups.iter_mut().find(|(l, m, _)| *l == u.label && m == metric) {
                    Some(g) => g.2.push(*value),
                    None => groups.push((u.label.clone(), metric.clone(), vec![*value])),
                }
            }
        }
        let tag = if trials == 1 { SINGLE_RUN } else { AGGREGATE };
        for (label, metric, values) in groups {
            let (m, s) = mean_std(&values);
            rows.push(Row {
                model: label,
                trial: tag.into(),
                metric,
                value: m,
                std: Some(s),
            });
        }
        Report { rows }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn parse_csv(text: &str) -> Result<Report> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<Row>, _>>()
            .map_err(|e| Error::Malformed {
                offset: e.position().map_or(0, |p| p.byte() as usize),
                detail: e.to_string(),
            })?;
        Ok(Report { rows })
    }

    pub fn get(&self, model: &str, trial: &str, metric: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.trial == trial && r.metric == metric)
    }

    /// The aggregate row for `model` and `metric`.
    pub fn aggregate(&self, model: &str, metric: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.metric == metric && (r.trial == AGGREGATE || r.trial == SINGLE_RUN))
    }

    /// Per-trial values of a metric, in trial order.
    pub fn per_trial(&self, model: &str, metric: &str) -> Vec<f64> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.metric == metric)
            .filter_map(|r| r.trial.parse::<usize>().ok().map(|t| (t, r.value)))
            .collect();
        v.sort_by_key(|p| p.0);
        v.into_iter().map(|p| p.1).collect()
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }
}
