//! Presentation-attack detection metrics with "live" as the positive class.
//!
//! - APCER = FP / (TN + FP): attacks accepted as live.
//! - BPCER = FN / (FN + TP): live presentations rejected.
//! - ACER  = (APCER + BPCER) / 2.
//!
//! Rates are fractions in `[0, 1]`; tables show them as percentages with two
//! decimals. Protocol aggregates use the sample (n - 1) standard deviation.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;

/// Default decision threshold; a probability equal to it counts as live.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("{0} is undefined: no samples of the required class")]
    UndefinedRate(&'static str),
    #[error("aggregation needs at least 2 protocols, got {0}")]
    InsufficientProtocols(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn live(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn attack(&self) -> u64 {
        self.tn + self.fp
    }
}

/// Tallies decisions `probability >= threshold` against the labels.
pub fn confusion(predictions: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &label) in predictions.iter().zip(labels) {
        match (p >= threshold, label) {
            (true, Label::Live) => c.tp += 1,
            (true, Label::Attack) => c.fp += 1,
            (false, Label::Attack) => c.tn += 1,
            (false, Label::Live) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn apcer_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, MetricsError> {
    match c.attack() {
        0 => Err(MetricsError::UndefinedRate("APCER")),
        d => Ok(Ratio::new(c.fp, d)),
    }
}

pub fn bpcer_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, MetricsError> {
    match c.live() {
        0 => Err(MetricsError::UndefinedRate("BPCER")),
        d => Ok(Ratio::new(c.fn_, d)),
    }
}

pub fn acer_exact(c: &ConfusionCounts) -> Result<Ratio<u64>, MetricsError> {
    Ok((apcer_exact(c)? + bpcer_exact(c)?) / 2)
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn apcer(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    apcer_exact(c).map(to_f64)
}

pub fn bpcer(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    bpcer_exact(c).map(to_f64)
}

pub fn acer(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    acer_exact(c).map(to_f64)
}

/// Rates for one (sub-)protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub sub_protocol: Option<String>,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl ProtocolMetrics {
    pub fn from_counts(c: &ConfusionCounts, sub_protocol: Option<String>) -> Result<Self, MetricsError> {
        Ok(Self {
            sub_protocol,
            apcer: apcer(c)?,
            bpcer: bpcer(c)?,
            acer: acer(c)?,
        })
    }

    /// Builds from the two error rates; ACER is derived.
    pub fn from_rates(sub_protocol: Option<String>, apcer: f64, bpcer: f64) -> Self {
        Self {
            sub_protocol,
            apcer,
            bpcer,
            acer: (apcer + bpcer) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (divides by n - 1).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.len() < 2 {
            return Err(MetricsError::InsufficientProtocols(values.len()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Ok(Self {
            mean,
            std: (ss / (n - 1.0)).sqrt(),
        })
    }

    /// `X.XX±Y.YY` in the values' own unit.
    pub fn format(&self) -> String {
        format_pm(self.mean, self.std)
    }

    /// `X.XX±Y.YY` after scaling fractions to percent.
    pub fn format_percent(&self) -> String {
        format_pm(self.mean * 100.0, self.std * 100.0)
    }
}

pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

pub fn format_percent(rate: f64) -> String {
    format!("{:.2}", rate * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n: usize,
    pub apcer: MeanStd,
    pub bpcer: MeanStd,
    pub acer: MeanStd,
}

pub fn aggregate_protocols(per_protocol: &[ProtocolMetrics]) -> Result<AggregateMetrics, MetricsError> {
    let column = |f: fn(&ProtocolMetrics) -> f64| per_protocol.iter().map(f).collect::<Vec<_>>();
    Ok(AggregateMetrics {
        n: per_protocol.len(),
        apcer: MeanStd::of(&column(|m| m.apcer))?,
        bpcer: MeanStd::of(&column(|m| m.bpcer))?,
        acer: MeanStd::of(&column(|m| m.acer))?,
    })
}

/// Tab-separated table in percent: one row per protocol, then `mean±std`
/// when an aggregate is given.
pub fn protocol_report(rows: &[ProtocolMetrics], aggregate: Option<&AggregateMetrics>) -> String {
    let mut out = String::from("protocol\tapcer\tbpcer\tacer\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            m.sub_protocol.as_deref().unwrap_or("all"),
            format_percent(m.apcer),
            format_percent(m.bpcer),
            format_percent(m.acer)
        );
    }
    if let Some(a) = aggregate {
        let _ = writeln!(
            out,
            "mean±std\t{}\t{}\t{}",
            a.apcer.format_percent(),
            a.bpcer.format_percent(),
            a.acer.format_percent()
        );
    }
    out
}
