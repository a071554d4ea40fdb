//! Dataset manifests, subject-level splitting, the pruner/identifier cascade
//! and precision/recall reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{ScoreVector, TrainedModel};
use crate::error::{Error, Result};
use crate::features::{
    assemble_feature_vector, engineered_layout, extract_engineered, sift_lite, DescriptorConfig, FeatureLayout,
};
use crate::imaging::{
    find_boundary, locate_centromere, normalize, normalize_and_equalize, resize_nn, rotate_vertical, trace_boundary,
    GrayImage,
};
use crate::reliability::{assess, MetricId, Strategy, Threshold, ThresholdTable};
use crate::textio::{fmt_real, parse_real, read_text, write_atomic};

pub const MAX_LABEL: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneLabel {
    SemiStraight,
    Garbage,
    Curved,
    Overlap,
}

impl PruneLabel {
    pub const ALL: [PruneLabel; 4] = [
        PruneLabel::SemiStraight,
        PruneLabel::Garbage,
        PruneLabel::Curved,
        PruneLabel::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneLabel::SemiStraight => "semi_straight",
            PruneLabel::Garbage => "garbage",
            PruneLabel::Curved => "curved",
            PruneLabel::Overlap => "overlap",
        }
    }

    /// Class code used when training the pruner.
    pub fn code(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }
}

impl FromStr for PruneLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown prune label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: String,
    pub label: u32,
    pub subject: String,
    /// `None` is UNKNOWN.
    pub prune_label: Option<PruneLabel>,
    /// `None` is unassigned.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub instances: Vec<Instance>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 5] = ["path", "label", "subject", "prune_label", "split"];

impl DatasetManifest {
    pub fn resolve(&self, inst: &Instance) -> PathBuf {
        let p = Path::new(&inst.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if !(1..=MAX_LABEL).contains(&inst.label) {
                return Err(Error::InvalidInput(format!(
                    "{}: label {} outside 1..={MAX_LABEL}",
                    inst.path, inst.label
                )));
            }
            if !seen.insert(inst.path.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate path {}", inst.path)));
            }
        }
        if let Some(subject) = self.shared_subject() {
            return Err(Error::InvalidInput(format!("subject {subject} appears in more than one split")));
        }
        Ok(())
    }

    /// A subject assigned to two different splits, if any.
    pub fn shared_subject(&self) -> Option<&str> {
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for inst in &self.instances {
            if let Some(s) = inst.split {
                if *split_of.entry(&inst.subject).or_insert(s) != s {
                    return Some(&inst.subject);
                }
            }
        }
        None
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.split == Some(split))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).map_err(csv_internal)?;
        for i in &self.instances {
            let label = i.label.to_string();
            w.write_record([
                i.path.as_str(),
                &label,
                &i.subject,
                i.prune_label.map_or("UNKNOWN", PruneLabel::name),
                i.split.map_or("", Split::name),
            ])
            .map_err(csv_internal)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, root)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::parse(
                path,
                1,
                format!("header must be {}", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut instances = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::parse(path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |m: String| Error::parse(path, line, m);
            let label: u32 = rec[1].parse().map_err(|_| bad(format!("bad label {:?}", &rec[1])))?;
            let prune_label = match &rec[3] {
                "UNKNOWN" | "" => None,
                p => Some(p.parse().map_err(bad)?),
            };
            let split = match &rec[4] {
                "" => None,
                s => Some(s.parse().map_err(bad)?),
            };
            if rec[0].is_empty() || rec[2].is_empty() {
                return Err(bad("empty path or subject".into()));
            }
            instances.push(Instance {
                path: rec[0].to_string(),
                label,
                subject: rec[2].to_string(),
                prune_label,
                split,
            });
        }
        let m = Self { instances, root };
        m.validate().map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(m)
    }
}

fn csv_internal(e: csv::Error) -> Error {
    Error::Internal(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    /// Achieved instance fraction per split, in `Split::ALL` order.
    pub achieved: Vec<f64>,
    /// Largest absolute gap between achieved and target fractions.
    pub deviation: f64,
}

/// Assigns whole subjects to splits. `fractions` lists train, valid and
/// optionally test shares. Subjects go largest first, each to the split
/// with the largest remaining deficit; equal-size subjects are ordered by a
/// seeded shuffle. A subject is never divided.
pub fn split_by_subject(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<SplitOutcome> {
    if fractions.len() < 2 || fractions.len() > 3 {
        return Err(Error::InvalidConfig(format!(
            "expected 2 or 3 split fractions, got {}",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in &manifest.instances {
        *sizes.entry(&inst.subject).or_default() += 1;
    }
    let needed = fractions.iter().filter(|&&f| f > 0.0).count();
    if sizes.len() < needed {
        return Err(Error::InvalidInput(format!(
            "{} subjects cannot fill {needed} non-empty splits",
            sizes.len()
        )));
    }
    let mut subjects: Vec<(&str, usize)> = sizes.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    subjects.sort_by_key(|s| std::cmp::Reverse(s.1));

    let total = manifest.instances.len() as f64;
    let targets: Vec<f64> = fractions.iter().map(|f| f * total).collect();
    let mut filled = vec![0.0; fractions.len()];
    let mut members = vec![0usize; fractions.len()];
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, &(subject, size)) in subjects.iter().enumerate() {
        let remaining = subjects.len() - i;
        let starving: Vec<usize> = (0..fractions.len())
            .filter(|&s| fractions[s] > 0.0 && members[s] == 0)
            .collect();
        let pick = if remaining <= starving.len() {
            starving[0]
        } else {
            // strict comparison keeps the lowest split on ties
            (0..fractions.len())
                .filter(|&s| fractions[s] > 0.0)
                .fold(None, |best: Option<usize>, s| match best {
                    Some(b) if targets[b] - filled[b] >= targets[s] - filled[s] => Some(b),
                    _ => Some(s),
                })
                .expect("at least one non-empty split")
        };
        filled[pick] += size as f64;
        members[pick] += 1;
        assignment.insert(subject, Split::ALL[pick]);
    }
    let mut out = manifest.clone();
    for inst in &mut out.instances {
        inst.split = Some(assignment[inst.subject.as_str()]);
    }
    let achieved: Vec<f64> = filled.iter().map(|f| f / total.max(1.0)).collect();
    let deviation = achieved
        .iter()
        .zip(fractions)
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max);
    Ok(SplitOutcome {
        manifest: out,
        achieved,
        deviation,
    })
}

/// True-by-estimated label counts plus per-true-label rejections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContingencyMatrix {
    pub n_labels: usize,
    /// Row-major, rows are true labels.
    pub counts: Vec<u64>,
    pub rejected: Vec<u64>,
}

impl ContingencyMatrix {
    pub fn new(n_labels: usize) -> Self {
        Self {
            n_labels,
            counts: vec![0; n_labels * n_labels],
            rejected: vec![0; n_labels],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("contingency matrix must be square".into()));
        }
        let mut c = Self::new(n);
        c.counts = rows.concat();
        Ok(c)
    }

    pub fn get(&self, truth: usize, estimated: usize) -> u64 {
        self.counts[truth * self.n_labels + estimated]
    }

    pub fn add(&mut self, truth: usize, estimated: usize) {
        self.counts[truth * self.n_labels + estimated] += 1;
    }

    pub fn reject(&mut self, truth: usize) {
        self.rejected[truth] += 1;
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.n_labels..(i + 1) * self.n_labels].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.n_labels).map(|i| self.get(i, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.rejected.iter().sum::<u64>()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    /// Diagonal over the estimated-label column.
    pub precision: Option<f64>,
    /// Diagonal over the true-label row of accepted predictions.
    pub recall: Option<f64>,
    /// Diagonal over the row plus that label's rejections.
    pub recall_with_rejections: Option<f64>,
}

pub fn precision_recall(c: &ContingencyMatrix) -> Vec<PrecisionRecall> {
    (0..c.n_labels)
        .map(|i| {
            let diag = c.get(i, i);
            let row = c.row_sum(i);
            PrecisionRecall {
                precision: ratio(diag, c.col_sum(i)),
                recall: ratio(diag, row),
                recall_with_rejections: ratio(diag, row + c.rejected[i]),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelReport {
    pub label: u32,
    /// `None` means UNSET.
    pub threshold: Option<f64>,
    pub threshold_feasible: bool,
    pub reached: u64,
    pub rejected: u64,
    pub gated: PrecisionRecall,
    pub ungated: PrecisionRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: MetricId,
    pub strategy: Strategy,
    pub recall_cutoff: f64,
    pub instances: u64,
    pub pruned: u64,
    pub reached: u64,
    pub rejected: u64,
    /// Pruned plus gated-out, over all instances.
    pub rejection_rate: Option<f64>,
    /// Gated-out over instances that reached the identifier.
    pub gate_rejection_rate: Option<f64>,
    pub labels: Vec<LabelReport>,
    pub gated: ContingencyMatrix,
    pub ungated: ContingencyMatrix,
}

/// Mean of the defined values, `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn mean_gated_precision(&self) -> Option<f64> {
        mean_defined(self.labels.iter().map(|l| l.gated.precision))
    }

    pub fn mean_ungated_precision(&self) -> Option<f64> {
        mean_defined(self.labels.iter().map(|l| l.ungated.precision))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "metric {}  strategy {}  recall_cutoff {}",
            self.metric,
            self.strategy.name(),
            fmt_fixed(Some(self.recall_cutoff))
        );
        let _ = writeln!(
            out,
            "instances {}  pruned {}  reached {}  rejected {}  rejection_rate {}  gate_rejection_rate {}",
            self.instances,
            self.pruned,
            self.reached,
            self.rejected,
            fmt_fixed(self.rejection_rate),
            fmt_fixed(self.gate_rejection_rate)
        );
        let _ = writeln!(
            out,
            "{:>5} {:>12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "label", "threshold", "status", "reached", "rejected", "P_gated", "R_gated", "R_reject", "P_ungated", "R_ungated"
        );
        for l in &self.labels {
            let status = match (l.threshold, l.threshold_feasible) {
                (None, _) => "UNSET",
                (Some(_), true) => "ok",
                (Some(_), false) => "fallback",
            };
            let _ = writeln!(
                out,
                "{:>5} {:>12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
                l.label,
                l.threshold.map_or("UNSET".to_string(), |t| format!("{t:.6}")),
                status,
                l.reached,
                l.rejected,
                fmt_fixed(l.gated.precision),
                fmt_fixed(l.gated.recall),
                fmt_fixed(l.gated.recall_with_rejections),
                fmt_fixed(l.ungated.precision),
                fmt_fixed(l.ungated.recall)
            );
        }
        let _ = writeln!(
            out,
            "{:>5} {:>12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "mean",
            "",
            "",
            "",
            "",
            fmt_fixed(self.mean_gated_precision()),
            fmt_fixed(mean_defined(self.labels.iter().map(|l| l.gated.recall))),
            fmt_fixed(mean_defined(self.labels.iter().map(|l| l.gated.recall_with_rejections))),
            fmt_fixed(self.mean_ungated_precision()),
            fmt_fixed(mean_defined(self.labels.iter().map(|l| l.ungated.recall)))
        );
        out
    }
}

pub fn fmt_fixed(v: Option<f64>) -> String {
    v.map_or("UNDEF".to_string(), |v| format!("{v:.5}"))
}

/// Index of each true label in `class_labels`.
pub fn label_indices(labels: &[u32], class_labels: &[u32]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            class_labels.binary_search(l).map_err(|_| {
                Error::InvalidInput(format!("label {l} is outside the identifier's label space {class_labels:?}"))
            })
        })
        .collect()
}

/// Stage-2 evaluation. `stage2[i]` holds the identifier's scores for
/// instance `i`, or `None` when the pruner filtered it out. Rejected
/// predictions are counted per true label and kept out of the gated
/// contingency matrix.
pub fn run_cascade(true_labels: &[u32], stage2: &[Option<ScoreVector>], table: &ThresholdTable) -> Result<EvalReport> {
    if true_labels.len() != stage2.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} instances",
            true_labels.len(),
            stage2.len()
        )));
    }
    let n = table.class_labels.len();
    let truth = label_indices(true_labels, &table.class_labels)?;
    let mut gated = ContingencyMatrix::new(n);
    let mut ungated = ContingencyMatrix::new(n);
    let mut pruned = 0u64;
    for (&t, s) in truth.iter().zip(stage2) {
        let Some(s) = s else {
            pruned += 1;
            continue;
        };
        if s.n_labels() != n {
            return Err(Error::InvalidInput(format!(
                "identifier emits {} scores, thresholds cover {n} labels",
                s.n_labels()
            )));
        }
        let g = assess(s, table)?;
        ungated.add(t, g.estimated_label);
        if g.reliable {
            gated.add(t, g.estimated_label);
        } else {
            gated.reject(t);
        }
    }
    let reached = ungated.total();
    let rejected: u64 = gated.rejected.iter().sum();
    if gated.total() != reached {
        return Err(Error::Internal("gated and ungated instance counts differ".into()));
    }
    let (g_pr, u_pr) = (precision_recall(&gated), precision_recall(&ungated));
    let labels = (0..n)
        .map(|i| LabelReport {
            label: table.class_labels[i],
            threshold: table.thresholds[i].value(),
            threshold_feasible: table.thresholds[i].is_feasible(),
            reached: ungated.row_sum(i),
            rejected: gated.rejected[i],
            gated: g_pr[i],
            ungated: u_pr[i],
        })
        .collect();
    let instances = true_labels.len() as u64;
    Ok(EvalReport {
        metric: table.metric,
        strategy: table.strategy,
        recall_cutoff: table.recall_cutoff,
        instances,
        pruned,
        reached,
        rejected,
        rejection_rate: ratio(pruned + rejected, instances),
        gate_rejection_rate: ratio(rejected, reached),
        labels,
        gated,
        ungated,
    })
}

/// Pruner verdict per row: true when predicted semi-straight.
pub fn prune_mask(pruner: &TrainedModel, x: &DMatrix<f64>) -> Result<Vec<bool>> {
    let labels = pruner.class_labels().to_vec();
    Ok(pruner
        .score_rows(x)?
        .iter()
        .map(|s| labels[s.estimated_label()] == PruneLabel::SemiStraight.code())
        .collect())
}

/// Identifier scores for the kept rows only.
pub fn score_kept(identifier: &TrainedModel, x: &DMatrix<f64>, kept: &[bool]) -> Result<Vec<Option<ScoreVector>>> {
    (0..x.nrows())
        .into_par_iter()
        .map(|r| {
            kept[r]
                .then(|| identifier.score(&x.row(r).iter().copied().collect::<Vec<_>>()))
                .transpose()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: MetricId,
    pub best_precision: Option<f64>,
    pub best_improvement: Option<f64>,
    /// Labels whose gated precision beats ungated and reaches the floor.
    pub labels_improved: usize,
}

pub const DEFAULT_PRECISION_FLOOR: f64 = 0.8;

pub fn compare_metrics(reports: &[EvalReport], precision_floor: f64) -> Vec<MetricComparison> {
    reports
        .iter()
        .map(|r| {
            let best_precision = r
                .labels
                .iter()
                .filter_map(|l| l.gated.precision)
                .fold(None, |b: Option<f64>, p| Some(b.map_or(p, |b| b.max(p))));
            let improvements: Vec<f64> = r
                .labels
                .iter()
                .filter_map(|l| Some(l.gated.precision? - l.ungated.precision?))
                .collect();
            let best_improvement = improvements.iter().copied().reduce(f64::max);
            let labels_improved = r
                .labels
                .iter()
                .filter(|l| match (l.gated.precision, l.ungated.precision) {
                    (Some(g), Some(u)) => g > u && g >= precision_floor,
                    _ => false,
                })
                .count();
            MetricComparison {
                metric: r.metric,
                best_precision,
                best_improvement,
                labels_improved,
            }
        })
        .collect()
}

pub struct ComparisonTable<'a> {
    pub rows: &'a [MetricComparison],
    pub precision_floor: f64,
}

impl fmt::Display for ComparisonTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision_floor {}", fmt_fixed(Some(self.precision_floor)))?;
        writeln!(f, "{:>6} {:>14} {:>16} {:>15}", "metric", "best_precision", "best_improvement", "labels_improved")?;
        for r in self.rows {
            writeln!(
                f,
                "{:>6} {:>14} {:>16} {:>15}",
                r.metric.name(),
                fmt_fixed(r.best_precision),
                fmt_fixed(r.best_improvement),
                r.labels_improved
            )?;
        }
        Ok(())
    }
}

/// Feature rows keyed by instance id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

impl FeatureTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (r, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for c in 0..self.values.ncols() {
                out.push('\t');
                out.push_str(&fmt_real(self.values[(r, c)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty feature table"))?;
        let mut head = header.split('\t');
        if head.next() != Some("id") {
            return Err(Error::parse(path, 1, "first column must be id"));
        }
        let columns: Vec<String> = head.map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines {
            let mut tokens = line.split('\t');
            let id = tokens.next().unwrap_or_default().to_string();
            let before = data.len();
            for t in tokens {
                data.push(parse_real(t, path, i + 1)?);
            }
            if data.len() - before != columns.len() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected {} values, found {}", columns.len(), data.len() - before),
                ));
            }
            ids.push(id);
        }
        Ok(Self {
            values: DMatrix::from_row_slice(ids.len(), columns.len(), &data),
            ids,
            columns,
        })
    }

    /// Rows for `wanted` ids, in that order. Missing ids are reported.
    pub fn select(&self, wanted: &[&str]) -> Result<DMatrix<f64>> {
        let index: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let rows = wanted
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("no feature row for {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(rows.len(), self.values.ncols(), |r, c| self.values[(rows[r], c)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    /// Histogram-equalize after normalization. Off by default: on blurred
    /// crops equalization spreads background noise into the boundary
    /// threshold range.
    pub equalize: bool,
    /// Background margin kept around the object after rotation.
    pub margin: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            equalize: false,
            margin: 3,
        }
    }
}

/// Normalizes, finds the boundary and centromere, rotates upright with the
/// p-arm on top and crops to the object.
pub fn preprocess_image(img: &GrayImage, opts: &PreprocessOptions) -> Result<GrayImage> {
    let norm = if opts.equalize {
        normalize_and_equalize(img)?
    } else {
        normalize(img)
    };
    let trace = trace_boundary(&find_boundary(&norm))?;
    let cen = locate_centromere(&trace);
    let vertical = rotate_vertical(&norm, &trace.with_centromere(cen))?;
    crop_to_object(&vertical, opts.margin)
}

fn crop_to_object(img: &GrayImage, margin: usize) -> Result<GrayImage> {
    let mask = find_boundary(img);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..img.height() {
        for c in 0..img.width() {
            if mask.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::NoBoundary("rotated image has no boundary".into()));
    }
    let (r0, c0) = (r0.saturating_sub(margin), c0.saturating_sub(margin));
    let r1 = (r1 + margin).min(img.height() - 1);
    let c1 = (c1 + margin).min(img.width() - 1);
    Ok(GrayImage::from_fn(r1 - r0 + 1, c1 - c0 + 1, |r, c| img.get(r + r0, c + c0)))
}

pub const DESCRIPTOR_HEIGHT: usize = 200;
pub const DESCRIPTOR_WIDTH: usize = 100;

/// Engineered layout, followed by descriptor segments when configured.
pub fn extraction_layout(descriptor: Option<&DescriptorConfig>) -> FeatureLayout {
    let mut layout = engineered_layout();
    if let Some(cfg) = descriptor {
        let base = layout.total_len();
        for mut s in cfg.layout().segments {
            s.offset += base;
            layout.segments.push(s);
        }
    }
    layout
}

/// Feature row of one upright chromosome image.
pub fn extract_row(vertical: &GrayImage, descriptor: Option<&DescriptorConfig>) -> Result<Vec<f64>> {
    let parts = extract_engineered(vertical)?;
    let mut values = assemble_feature_vector(&parts, Arc::new(engineered_layout()))?.values;
    if let Some(cfg) = descriptor {
        let resized = resize_nn(vertical, DESCRIPTOR_HEIGHT, DESCRIPTOR_WIDTH)?;
        values.extend(sift_lite(&resized, cfg)?.values);
    }
    Ok(values)
}

/// Instances of `split` with their true labels and feature rows.
pub fn split_rows(
    manifest: &DatasetManifest,
    features: &FeatureTable,
    split: Split,
    filter: impl Fn(&Instance) -> bool,
) -> Result<(Vec<u32>, Vec<Option<PruneLabel>>, DMatrix<f64>)> {
    let chosen: Vec<&Instance> = manifest.in_split(split).filter(|i| filter(i)).collect();
    let ids: Vec<&str> = chosen.iter().map(|i| i.path.as_str()).collect();
    Ok((
        chosen.iter().map(|i| i.label).collect(),
        chosen.iter().map(|i| i.prune_label).collect(),
        features.select(&ids)?,
    ))
}

/// Counts of feasible, fallback and UNSET thresholds.
pub fn thresholds_summary(table: &ThresholdTable) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for t in &table.thresholds {
        match t {
            Threshold::Set { feasible: true, .. } => counts.0 += 1,
            Threshold::Set { feasible: false, .. } => counts.1 += 1,
            Threshold::Unset => counts.2 += 1,
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reliability::calibrate_thresholds;
    use rand::Rng;

    fn manifest_with_subjects(sizes: &[usize]) -> DatasetManifest {
        let mut instances = Vec::new();
        for (s, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                instances.push(Instance {
                    path: format!("s{s}/{k}.png"),
                    label: (k % 24) as u32 + 1,
                    subject: format!("subj{s:03}"),
                    prune_label: Some(PruneLabel::SemiStraight),
                    split: None,
                });
            }
        }
        DatasetManifest {
            instances,
            root: PathBuf::new(),
        }
    }

    fn split_counts(m: &DatasetManifest) -> [usize; 3] {
        let mut subjects: [BTreeSet<&str>; 3] = Default::default();
        for i in &m.instances {
            subjects[i.split.unwrap() as usize].insert(&i.subject);
        }
        [subjects[0].len(), subjects[1].len(), subjects[2].len()]
    }

    #[test]
    fn equal_subjects_split_six_two_two() {
        let m = manifest_with_subjects(&[7; 10]);
        let out = split_by_subject(&m, &[0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(split_counts(&out.manifest), [6, 2, 2]);
        assert!(out.deviation < 1e-12);
    }

    #[test]
    fn giant_subject_goes_to_train_whole() {
        let m = manifest_with_subjects(&[50, 10, 10, 10, 10, 10]);
        let out = split_by_subject(&m, &[0.6, 0.2, 0.2], 3).unwrap();
        assert!(out.manifest.instances.iter().filter(|i| i.subject == "subj000").all(|i| i.split == Some(Split::Train)));
        assert!(out.manifest.shared_subject().is_none());
    }

    #[test]
    fn random_splits_are_subject_disjoint_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let sizes: Vec<usize> = (0..rng.random_range(3..40)).map(|_| rng.random_range(1..15)).collect();
            let m = manifest_with_subjects(&sizes);
            let a = split_by_subject(&m, &[0.6, 0.2, 0.2], seed).unwrap();
            let b = split_by_subject(&m, &[0.6, 0.2, 0.2], seed).unwrap();
            assert_eq!(a, b);
            assert!(a.manifest.shared_subject().is_none());
            assert!(split_counts(&a.manifest).iter().all(|&c| c > 0));
        }
        let m = manifest_with_subjects(&[5, 5]);
        assert!(split_by_subject(&m, &[0.6, 0.2, 0.2], 0).is_err());
        assert!(split_by_subject(&m, &[0.8, 0.2], 0).is_ok());
        assert!(matches!(split_by_subject(&m, &[0.5, 0.2], 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn manifest_csv_round_trip_and_errors() {
        let mut m = manifest_with_subjects(&[3, 2]);
        m.instances[1].prune_label = None;
        m.instances[2].prune_label = Some(PruneLabel::Overlap);
        m.instances[0].split = Some(Split::Valid);
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("path,label,subject,prune_label,split\n"));
        let back = DatasetManifest::parse(&text, Path::new("m.csv"), PathBuf::new()).unwrap();
        assert_eq!(back, m);
        let bad = text.replacen(",1,subj000", ",25,subj000", 1);
        assert!(matches!(
            DatasetManifest::parse(&bad, Path::new("m.csv"), PathBuf::new()),
            Err(Error::Parse { .. })
        ));
        let bad = text.replacen("semi_straight", "wavy", 1);
        assert!(matches!(
            DatasetManifest::parse(&bad, Path::new("m.csv"), PathBuf::new()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn precision_recall_examples() {
        let c = ContingencyMatrix::from_rows(&[vec![5, 0], vec![0, 5]]).unwrap();
        for pr in precision_recall(&c) {
            assert_eq!((pr.precision, pr.recall), (Some(1.0), Some(1.0)));
        }
        let c = ContingencyMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        let pr = precision_recall(&c);
        assert_eq!(pr[0].precision, Some(3.0 / 5.0));
        assert_eq!(pr[0].recall, Some(3.0 / 4.0));
        let c = ContingencyMatrix::from_rows(&[vec![0, 2], vec![0, 4]]).unwrap();
        let pr = precision_recall(&c);
        assert_eq!(pr[0].precision, None);
        assert_eq!(pr[0].recall, Some(0.0));
        assert!(ContingencyMatrix::from_rows(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn precision_recall_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..8);
            let pairs: Vec<(usize, usize)> = (0..rng.random_range(0..60))
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let mut c = ContingencyMatrix::new(n);
            for &(t, e) in &pairs {
                c.add(t, e);
            }
            let pr = precision_recall(&c);
            for i in 0..n {
                let tp = pairs.iter().filter(|p| p.0 == i && p.1 == i).count();
                let predicted = pairs.iter().filter(|p| p.1 == i).count();
                let actual = pairs.iter().filter(|p| p.0 == i).count();
                let p = (predicted > 0).then(|| tp as f64 / predicted as f64);
                let r = (actual > 0).then(|| tp as f64 / actual as f64);
                assert_eq!(pr[i].precision, p);
                assert_eq!(pr[i].recall, r);
            }
        }
    }

    fn noisy_scores(seed: u64, n: usize, labels: usize) -> (Vec<u32>, Vec<ScoreVector>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::new();
        let mut s = Vec::new();
        for _ in 0..n {
            let t = rng.random_range(0..labels);
            let mut v: Vec<f64> = (0..labels).map(|_| rng.random_range(0.0..1.0)).collect();
            v[t] += rng.random_range(0.0..0.7);
            y.push(t as u32 + 1);
            s.push(ScoreVector::new(v).unwrap());
        }
        (y, s)
    }

    #[test]
    fn fully_pruned_cascade_is_undefined() {
        let table = ThresholdTable::permissive(MetricId::I, &[1, 2, 3]);
        let r = run_cascade(&[1, 2, 3], &[None, None, None], &table).unwrap();
        assert_eq!(r.rejection_rate, Some(1.0));
        assert!(r.labels.iter().all(|l| l.gated.precision.is_none() && l.gated.recall.is_none()));
    }

    #[test]
    fn permissive_gate_equals_ungated_and_conserves() {
        let (y, s) = noisy_scores(2, 400, 5);
        let stage2: Vec<Option<ScoreVector>> = s.into_iter().map(Some).collect();
        let labels = [1, 2, 3, 4, 5];
        let r = run_cascade(&y, &stage2, &ThresholdTable::permissive(MetricId::III, &labels)).unwrap();
        assert_eq!(r.gated, r.ungated);
        for l in &r.labels {
            assert_eq!(l.gated, l.ungated);
        }
        let (cal_y, cal_s) = noisy_scores(3, 400, 5);
        let idx = label_indices(&cal_y, &labels).unwrap();
        let table = calibrate_thresholds(&cal_s, &idx, &labels, MetricId::III, 0.5, Strategy::RecallSweep).unwrap();
        let r = run_cascade(&y, &stage2, &table).unwrap();
        for (i, l) in r.labels.iter().enumerate() {
            let tp = r.gated.get(i, i);
            let errors = r.gated.row_sum(i) - tp;
            assert_eq!(tp + errors + l.rejected, l.reached);
        }
    }

    #[test]
    fn sweep_gate_dominates_on_calibration_data() {
        let labels = [1, 2, 3, 4, 5, 6];
        let (y, s) = noisy_scores(8, 600, 6);
        let idx = label_indices(&y, &labels).unwrap();
        let table = calibrate_thresholds(&s, &idx, &labels, MetricId::V, 0.5, Strategy::RecallSweep).unwrap();
        let stage2: Vec<_> = s.into_iter().map(Some).collect();
        let r = run_cascade(&y, &stage2, &table).unwrap();
        for l in r.labels.iter().filter(|l| l.threshold_feasible) {
            assert!(l.gated.precision.unwrap() >= l.ungated.precision.unwrap());
            assert!(l.gated.recall_with_rejections.unwrap() >= 0.5);
        }
    }

    #[test]
    fn label_space_mismatch_is_an_error() {
        let table = ThresholdTable::permissive(MetricId::I, &[1, 2]);
        assert!(run_cascade(&[7], &[None], &table).is_err());
        let s = ScoreVector::new(vec![0.1, 0.2, 0.3]).unwrap();
        assert!(run_cascade(&[1], &[Some(s)], &table).is_err());
    }

    #[test]
    fn comparison_reduces_reports() {
        let (y, s) = noisy_scores(4, 200, 5);
        let stage2: Vec<_> = s.into_iter().map(Some).collect();
        let r = run_cascade(&y, &stage2, &ThresholdTable::permissive(MetricId::II, &[1, 2, 3, 4, 5])).unwrap();
        let rows = compare_metrics(std::slice::from_ref(&r), 0.8);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].best_improvement, Some(0.0));
        assert_eq!(rows[0].labels_improved, 0);
        let text = ComparisonTable { rows: &rows, precision_floor: 0.8 }.to_string();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn feature_table_round_trip_and_select() {
        let t = FeatureTable {
            ids: vec!["a.png".into(), "b.png".into()],
            columns: vec!["x.0".into(), "x.1".into()],
            values: DMatrix::from_row_slice(2, 2, &[0.1, 1e-17, -3.0, 1.0 / 3.0]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        t.save(&p).unwrap();
        let back = FeatureTable::load(&p).unwrap();
        assert_eq!(back, t);
        let sel = back.select(&["b.png", "a.png"]).unwrap();
        assert_eq!(sel[(0, 0)], -3.0);
        assert!(back.select(&["c.png"]).is_err());
    }

    #[test]
    fn extraction_layout_appends_descriptor() {
        let cfg = DescriptorConfig::new(5, 32, 0.01).unwrap();
        let layout = extraction_layout(Some(&cfg));
        layout.validate().unwrap();
        assert_eq!(layout.total_len(), engineered_layout().total_len() + 5 * 32);
    }
}
