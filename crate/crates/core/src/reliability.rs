//! Reliability metrics over score vectors, per-label threshold calibration,
//! and per-instance gating.
//!
//! A prediction is reliable only when its metric value is strictly greater
//! than the calibrated threshold of its estimated label. Labels that never
//! had a correct calibration instance have no threshold and are never
//! reliable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::ScoreVector;
use crate::error::{Error, Result};
use crate::textio::{fmt_real, read_text, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
pub enum MetricId {
    /// Score of the estimated label.
    #[value(name = "I")]
    I,
    /// Estimated score minus the mean of the top 4 other scores.
    #[value(name = "II")]
    II,
    /// Highest minus second-highest score.
    #[value(name = "III")]
    III,
    /// Population variance of all scores.
    #[value(name = "IV")]
    IV,
    /// Estimated score minus the minimum score.
    #[value(name = "V")]
    V,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [MetricId::I, MetricId::II, MetricId::III, MetricId::IV, MetricId::V];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::I => "I",
            MetricId::II => "II",
            MetricId::III => "III",
            MetricId::IV => "IV",
            MetricId::V => "V",
        }
    }

    pub fn min_labels(self) -> usize {
        match self {
            MetricId::I => 1,
            MetricId::II => 5,
            _ => 2,
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric {s:?}; expected one of I, II, III, IV, V")))
    }
}

pub const TOP_OTHERS: usize = 4;

pub fn metric_value(metric: MetricId, s: &ScoreVector) -> Result<f64> {
    let n = s.n_labels();
    if n < metric.min_labels() {
        return Err(Error::MetricArity {
            metric: metric.name(),
            needed: metric.min_labels(),
            got: n,
        });
    }
    let scores = s.scores();
    let est = s.estimated_label();
    let s_est = scores[est];
    Ok(match metric {
        MetricId::I => s_est,
        MetricId::II => {
            let mut others: Vec<f64> = scores
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != est)
                .map(|(_, &v)| v)
                .collect();
            others.sort_by(|a, b| b.total_cmp(a));
            s_est - others[..TOP_OTHERS].iter().sum::<f64>() / TOP_OTHERS as f64
        }
        MetricId::III => {
            // the estimated label holds the maximum
            let second = scores
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != est)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            s_est - second
        }
        MetricId::IV => {
            let mean = scores.iter().sum::<f64>() / n as f64;
            scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        }
        MetricId::V => s_est - scores.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Mean metric value over correctly classified calibration instances.
    Mean,
    /// Highest gated precision subject to a gated-recall floor.
    #[value(name = "recall_sweep")]
    RecallSweep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mean => "mean",
            Strategy::RecallSweep => "recall_sweep",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Strategy::Mean),
            "recall_sweep" => Ok(Strategy::RecallSweep),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s:?}; expected mean or recall_sweep"))),
        }
    }
}

pub const DEFAULT_RECALL_CUTOFF: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// No correct calibration instance; every prediction of the label is
    /// rejected.
    Unset,
    /// `feasible` is false when no candidate met the recall cut-off and the
    /// accept-everything fallback was used.
    Set { value: f64, feasible: bool },
}

impl Threshold {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Threshold::Set { value, .. } => Some(value),
            Threshold::Unset => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, Threshold::Set { feasible: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub metric: MetricId,
    pub strategy: Strategy,
    pub recall_cutoff: f64,
    /// Label value of each score index.
    pub class_labels: Vec<u32>,
    pub thresholds: Vec<Threshold>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedPrediction {
    pub estimated_label: usize,
    pub reliable: bool,
    pub metric_value: f64,
}

/// Gates one prediction: strict `>` against the estimated label's threshold.
pub fn assess(s: &ScoreVector, table: &ThresholdTable) -> Result<GatedPrediction> {
    if s.n_labels() != table.thresholds.len() {
        return Err(Error::InvalidInput(format!(
            "score vector has {} labels, threshold table {}",
            s.n_labels(),
            table.thresholds.len()
        )));
    }
    let est = s.estimated_label();
    let value = metric_value(table.metric, s)?;
    let reliable = match table.thresholds[est] {
        Threshold::Set { value: t, .. } => value > t,
        Threshold::Unset => false,
    };
    Ok(GatedPrediction {
        estimated_label: est,
        reliable,
        metric_value: value,
    })
}

/// Largest representable value below `v`: a threshold that accepts `v`.
fn accept_all_below(v: f64) -> f64 {
    v.next_down()
}

/// Calibration evidence for one label: metric values of instances predicted
/// as the label, whether each was correct, and how many instances truly
/// carry the label.
#[derive(Debug, Clone)]
pub struct LabelEvidence {
    pub predicted: Vec<(f64, bool)>,
    pub true_total: usize,
}

impl LabelEvidence {
    /// `(precision, recall)` of gating at `t`; precision is `None` when
    /// nothing is accepted.
    pub fn gated(&self, t: f64) -> (Option<f64>, f64) {
        let (mut accepted, mut tp) = (0usize, 0usize);
        for &(v, correct) in &self.predicted {
            if v > t {
                accepted += 1;
                tp += correct as usize;
            }
        }
        let precision = (accepted > 0).then(|| tp as f64 / accepted as f64);
        let recall = if self.true_total == 0 { 0.0 } else { tp as f64 / self.true_total as f64 };
        (precision, recall)
    }

    /// Observed values plus one threshold below all of them.
    pub fn candidates(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.predicted.iter().map(|p| p.0).collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        if let Some(&min) = c.first() {
            c.insert(0, accept_all_below(min));
        }
        c
    }
}

fn sweep(ev: &LabelEvidence, cutoff: f64) -> Threshold {
    let candidates = ev.candidates();
    let Some(&floor) = candidates.first() else {
        return Threshold::Unset;
    };
    // ascending candidates; strict improvement keeps the lowest on ties
    let mut best: Option<(f64, f64)> = None;
    // walk from the highest threshold down, accumulating accepted counts
    let mut sorted = ev.predicted.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut accepted, mut tp, mut k) = (0usize, 0usize, 0usize);
    let mut results: Vec<(f64, Option<f64>, f64)> = Vec::with_capacity(candidates.len());
    for &t in candidates.iter().rev() {
        while k < sorted.len() && sorted[k].0 > t {
            accepted += 1;
            tp += sorted[k].1 as usize;
            k += 1;
        }
        let precision = (accepted > 0).then(|| tp as f64 / accepted as f64);
        let recall = if ev.true_total == 0 { 0.0 } else { tp as f64 / ev.true_total as f64 };
        results.push((t, precision, recall));
    }
    for &(t, precision, recall) in results.iter().rev() {
        if let Some(p) = precision {
            if recall >= cutoff && best.is_none_or(|(bp, _)| p > bp) {
                best = Some((p, t));
            }
        }
    }
    match best {
        Some((_, t)) => Threshold::Set { value: t, feasible: true },
        None => Threshold::Set {
            value: floor,
            feasible: false,
        },
    }
}

/// Per-label evidence from calibration scores and true label indices.
pub fn label_evidence(
    scores: &[ScoreVector],
    y_true: &[usize],
    n_labels: usize,
    metric: MetricId,
) -> Result<Vec<LabelEvidence>> {
    if scores.len() != y_true.len() {
        return Err(Error::InvalidInput(format!(
            "{} score vectors but {} labels",
            scores.len(),
            y_true.len()
        )));
    }
    let mut ev: Vec<LabelEvidence> = (0..n_labels)
        .map(|_| LabelEvidence {
            predicted: Vec::new(),
            true_total: 0,
        })
        .collect();
    for (s, &t) in scores.iter().zip(y_true) {
        if s.n_labels() != n_labels || t >= n_labels {
            return Err(Error::InvalidInput(format!(
                "instance with {} scores and label index {t} in a {n_labels}-label calibration",
                s.n_labels()
            )));
        }
        ev[t].true_total += 1;
        let est = s.estimated_label();
        ev[est].predicted.push((metric_value(metric, s)?, est == t));
    }
    Ok(ev)
}

pub fn calibrate_thresholds(
    scores: &[ScoreVector],
    y_true: &[usize],
    class_labels: &[u32],
    metric: MetricId,
    recall_cutoff: f64,
    strategy: Strategy,
) -> Result<ThresholdTable> {
    if !(0.0..=1.0).contains(&recall_cutoff) {
        return Err(Error::InvalidConfig(format!("recall cutoff {recall_cutoff} is outside [0, 1]")));
    }
    let evidence = label_evidence(scores, y_true, class_labels.len(), metric)?;
    let thresholds = evidence
        .iter()
        .map(|ev| {
            let correct: Vec<f64> = ev.predicted.iter().filter(|p| p.1).map(|p| p.0).collect();
            if correct.is_empty() {
                return Threshold::Unset;
            }
            match strategy {
                Strategy::Mean => {
                    let value = correct.iter().sum::<f64>() / correct.len() as f64;
                    let (_, recall) = ev.gated(value);
                    Threshold::Set {
                        value,
                        feasible: recall >= recall_cutoff,
                    }
                }
                Strategy::RecallSweep => sweep(ev, recall_cutoff),
            }
        })
        .collect();
    Ok(ThresholdTable {
        metric,
        strategy,
        recall_cutoff,
        class_labels: class_labels.to_vec(),
        thresholds,
    })
}

impl ThresholdTable {
    /// Accept-everything table: gating reproduces the ungated classifier.
    pub fn permissive(metric: MetricId, class_labels: &[u32]) -> Self {
        Self {
            metric,
            strategy: Strategy::RecallSweep,
            recall_cutoff: 0.0,
            class_labels: class_labels.to_vec(),
            thresholds: vec![
                Threshold::Set {
                    value: f64::NEG_INFINITY,
                    feasible: true,
                };
                class_labels.len()
            ],
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "metric {}\nstrategy {}\nrecall_cutoff {}\nlabels {}\n",
            self.metric,
            self.strategy.name(),
            fmt_real(self.recall_cutoff),
            self.class_labels.len()
        );
        for (label, t) in self.class_labels.iter().zip(&self.thresholds) {
            match t {
                Threshold::Unset => out.push_str(&format!("label {label} UNSET\n")),
                Threshold::Set { value, feasible } => out.push_str(&format!(
                    "label {label} {} {}\n",
                    if value.is_finite() { fmt_real(*value) } else { "-inf".to_string() },
                    if *feasible { "feasible" } else { "fallback" }
                )),
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, t)| !t.is_empty());
        let mut header = |key: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((no, t)) if t.len() == 2 && t[0] == key => Ok((no, t[1].to_string())),
                Some((no, _)) => Err(Error::parse(path, no, format!("expected `{key} <value>`"))),
                None => Err(Error::parse(path, 0, format!("missing {key}"))),
            }
        };
        let (no, metric) = header("metric")?;
        let metric = metric.parse().map_err(|e: Error| Error::parse(path, no, e.to_string()))?;
        let (no, strategy) = header("strategy")?;
        let strategy = strategy.parse().map_err(|e: Error| Error::parse(path, no, e.to_string()))?;
        let (no, cutoff) = header("recall_cutoff")?;
        let recall_cutoff: f64 = cutoff
            .parse()
            .ok()
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| Error::parse(path, no, format!("bad recall cutoff {cutoff:?}")))?;
        let (no, count) = header("labels")?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::parse(path, no, format!("bad label count {count:?}")))?;
        let mut class_labels = Vec::with_capacity(count);
        let mut thresholds = Vec::with_capacity(count);
        for (no, t) in lines {
            let label = match t.as_slice() {
                ["label", label, ..] => label
                    .parse::<u32>()
                    .map_err(|_| Error::parse(path, no, format!("bad label {label:?}")))?,
                _ => return Err(Error::parse(path, no, "expected a label line")),
            };
            let threshold = match &t[2..] {
                ["UNSET"] => Threshold::Unset,
                [value, flag] => {
                    let value: f64 = match *value {
                        "-inf" => f64::NEG_INFINITY,
                        v => crate::textio::parse_real(v, path, no)?,
                    };
                    let feasible = match *flag {
                        "feasible" => true,
                        "fallback" => false,
                        f => return Err(Error::parse(path, no, format!("bad flag {f:?}"))),
                    };
                    Threshold::Set { value, feasible }
                }
                _ => return Err(Error::parse(path, no, "expected `label <n> <value> <flag>` or `label <n> UNSET`")),
            };
            class_labels.push(label);
            thresholds.push(threshold);
        }
        if class_labels.len() != count {
            return Err(Error::parse(
                path,
                text.lines().count(),
                format!("declared {count} labels, found {}", class_labels.len()),
            ));
        }
        Ok(Self {
            metric,
            strategy,
            recall_cutoff,
            class_labels,
            thresholds,
        })
    }
}
