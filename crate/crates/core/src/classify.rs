//! Scoring classifiers. Every classifier maps one feature row to a full
//! per-label [`ScoreVector`]; reliability metrics consume nothing else.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimred::Standardizer;
use crate::error::{Error, Result};
use crate::textio::{parse_real, read_text, Bundle};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
    estimated: usize,
}

impl ScoreVector {
    /// Fails on empty or non-finite scores.
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("score vector is empty".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("score vector is not finite".into()));
        }
        let estimated = argmax(&scores);
        Ok(Self { scores, estimated })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Index of the maximum score, lowest index on ties.
    pub fn estimated_label(&self) -> usize {
        self.estimated
    }

    pub fn n_labels(&self) -> usize {
        self.scores.len()
    }
}

fn argmax(v: &[f64]) -> usize {
    (1..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Sorted distinct labels and each row's index into them.
pub fn index_labels(y: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let labels: Vec<u32> = y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = y
        .iter()
        .map(|l| labels.binary_search(l).expect("label present"))
        .collect();
    (labels, idx)
}

/// `n / (C · n_c)` per class.
pub fn inverse_frequency_weights(idx: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    idx.iter().for_each(|&c| counts[c] += 1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                idx.len() as f64 / (n_classes * c) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// Weight `λ` of the `λ/2 ‖w‖²` term.
    pub regularization: f64,
    /// Cap on solver passes over a pair's rows.
    pub epochs: usize,
    /// Stop once the projected-gradient spread falls below this.
    pub tolerance: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            regularization: 1e-3,
            epochs: 1000,
            tolerance: 1e-9,
        }
    }
}

/// One binary model; positive margin means `pos` (the lower class index).
#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    pub pos: usize,
    pub neg: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PairModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvOSvmModel {
    pub class_labels: Vec<u32>,
    pub class_weights: Vec<f64>,
    pub pairs: Vec<PairModel>,
    pub dim: usize,
}

/// Weighted hinge objective of one pair, normalized by the weight total.
struct PairProblem<'a> {
    rows: Vec<&'a [f64]>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl PairProblem<'_> {
    /// Minimizes `λ/2 ‖(w,b)‖² + Σ c_k max(0, 1 − y_k(w·x_k + b)) / Σ c_k`
    /// by dual coordinate descent in row order. The bias is an augmented
    /// constant feature. Each dual variable is boxed by `c_k / (λ Σ c)`.
    fn solve(&self, params: &SvmParams) -> (Vec<f64>, f64) {
        let d = self.rows[0].len();
        let total: f64 = self.weights.iter().sum();
        let bound: Vec<f64> = self
            .weights
            .iter()
            .map(|c| c / (params.regularization * total))
            .collect();
        let q: Vec<f64> = self
            .rows
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0)
            .collect();
        let mut alpha = vec![0.0; self.rows.len()];
        let mut w = vec![0.0; d + 1];
        for _ in 0..params.epochs {
            let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..self.rows.len() {
                let (x, y) = (self.rows[k], self.targets[k]);
                let g = y * (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d]) - 1.0;
                let pg = if alpha[k] <= 0.0 {
                    g.min(0.0)
                } else if alpha[k] >= bound[k] {
                    g.max(0.0)
                } else {
                    g
                };
                hi = hi.max(pg);
                lo = lo.min(pg);
                if pg != 0.0 {
                    let next = (alpha[k] - g / q[k]).clamp(0.0, bound[k]);
                    let step = (next - alpha[k]) * y;
                    alpha[k] = next;
                    w.iter_mut().zip(x.iter()).for_each(|(wi, v)| *wi += step * v);
                    w[d] += step;
                }
            }
            if hi - lo < params.tolerance {
                break;
            }
        }
        let bias = w.pop().unwrap_or(0.0);
        (w, bias)
    }
}

impl OvOSvmModel {
    /// `class_weights` is indexed like the sorted distinct labels of `y`;
    /// `None` uses inverse class frequency.
    pub fn fit(x: &DMatrix<f64>, y: &[u32], class_weights: Option<&[f64]>, params: &SvmParams) -> Result<Self> {
        check_training(x, y)?;
        if !(params.regularization > 0.0 && params.regularization.is_finite())
            || params.epochs == 0
            || !(params.tolerance > 0.0)
        {
            return Err(Error::InvalidConfig(
                "svm needs regularization > 0, epochs > 0 and tolerance > 0".into(),
            ));
        }
        let (labels, idx) = index_labels(y);
        if labels.len() < 2 {
            return Err(Error::InvalidInput("svm needs at least 2 classes".into()));
        }
        let class_weights = match class_weights {
            Some(w) if w.len() != labels.len() => {
                return Err(Error::InvalidConfig(format!(
                    "{} class weights for {} classes",
                    w.len(),
                    labels.len()
                )))
            }
            Some(w) => w.to_vec(),
            None => inverse_frequency_weights(&idx, labels.len()),
        };
        let row_data: Vec<Vec<f64>> = (0..x.nrows()).map(|r| x.row(r).iter().copied().collect()).collect();
        let n_classes = labels.len();
        let pair_ids: Vec<(usize, usize)> = (0..n_classes)
            .flat_map(|i| (i + 1..n_classes).map(move |j| (i, j)))
            .collect();
        let pairs = pair_ids
            .par_iter()
            .map(|&(i, j)| {
                let mut problem = PairProblem {
                    rows: Vec::new(),
                    targets: Vec::new(),
                    weights: Vec::new(),
                };
                for (r, &c) in idx.iter().enumerate() {
                    if c == i || c == j {
                        problem.rows.push(&row_data[r]);
                        problem.targets.push(if c == i { 1.0 } else { -1.0 });
                        problem.weights.push(class_weights[c]);
                    }
                }
                let (weights, bias) = problem.solve(params);
                PairModel {
                    pos: i,
                    neg: j,
                    weights,
                    bias,
                }
            })
            .collect();
        Ok(Self {
            class_labels: labels,
            class_weights,
            pairs,
            dim: x.ncols(),
        })
    }

    pub fn n_labels(&self) -> usize {
        self.class_labels.len()
    }

    /// `S_i = Σ_{j≠i} ReLU(1 + margin of x toward i)`.
    pub fn score(&self, x: &[f64]) -> Result<ScoreVector> {
        check_dim(self.dim, x)?;
        let mut s = vec![0.0; self.n_labels()];
        for p in &self.pairs {
            let m = p.margin(x);
            s[p.pos] += (1.0 + m).max(0.0);
            s[p.neg] += (1.0 - m).max(0.0);
        }
        ScoreVector::new(s)
    }

    fn write_bundle(&self, b: &mut Bundle) {
        b.push_field("class_labels", &self.class_labels);
        b.push_reals("class_weights", &self.class_weights);
        b.push_field("pair_pos", self.pairs.iter().map(|p| p.pos));
        b.push_field("pair_neg", self.pairs.iter().map(|p| p.neg));
        let m = DMatrix::from_fn(self.pairs.len(), self.dim + 1, |r, c| {
            let p = &self.pairs[r];
            if c < self.dim { p.weights[c] } else { p.bias }
        });
        b.push_matrix("pair_weights", &m);
    }

    fn read_bundle(b: &Bundle) -> Result<Self> {
        let class_labels: Vec<u32> = b.field_parsed("class_labels")?;
        let class_weights = b.reals("class_weights")?;
        let pos: Vec<usize> = b.field_parsed("pair_pos")?;
        let neg: Vec<usize> = b.field_parsed("pair_neg")?;
        let m = b.matrix("pair_weights")?;
        let n = class_labels.len();
        if class_weights.len() != n || pos.len() != n * (n - 1) / 2 || neg.len() != pos.len() || m.nrows() != pos.len() || m.ncols() == 0 {
            return Err(Error::InvalidInput("svm bundle shapes are inconsistent".into()));
        }
        if pos.iter().zip(&neg).any(|(&p, &q)| p >= q || q >= n) {
            return Err(Error::InvalidInput("svm bundle pair indices out of range".into()));
        }
        let dim = m.ncols() - 1;
        let pairs = (0..pos.len())
            .map(|r| PairModel {
                pos: pos[r],
                neg: neg[r],
                weights: (0..dim).map(|c| m[(r, c)]).collect(),
                bias: m[(r, dim)],
            })
            .collect();
        Ok(Self {
            class_labels,
            class_weights,
            pairs,
            dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub class_labels: Vec<u32>,
    pub train: DMatrix<f64>,
    /// Class index per training row.
    pub train_idx: Vec<usize>,
    pub k: usize,
}

impl KnnModel {
    pub fn fit(x: &DMatrix<f64>, y: &[u32], k: usize) -> Result<Self> {
        check_training(x, y)?;
        if k == 0 || k > x.nrows() {
            return Err(Error::InvalidConfig(format!("k must be in 1..={}, got {k}", x.nrows())));
        }
        let (class_labels, train_idx) = index_labels(y);
        Ok(Self {
            class_labels,
            train: x.clone(),
            train_idx,
            k,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.class_labels.len()
    }

    /// Fraction of each label among the `k` nearest training rows by
    /// Euclidean distance, ties broken by training index.
    pub fn score(&self, x: &[f64]) -> Result<ScoreVector> {
        check_dim(self.train.ncols(), x)?;
        let mut dist: Vec<(f64, usize)> = (0..self.train.nrows())
            .map(|r| {
                let d = self.train.row(r).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (d, r)
            })
            .collect();
        dist.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut s = vec![0.0; self.n_labels()];
        for &(_, r) in &dist[..self.k] {
            s[self.train_idx[r]] += 1.0;
        }
        s.iter_mut().for_each(|v| *v /= self.k as f64);
        ScoreVector::new(s)
    }

    fn write_bundle(&self, b: &mut Bundle) {
        b.push_field("class_labels", &self.class_labels);
        b.push_field("k", [self.k]);
        b.push_field("train_idx", &self.train_idx);
        b.push_matrix("train", &self.train);
    }

    fn read_bundle(b: &Bundle) -> Result<Self> {
        let m = Self {
            class_labels: b.field_parsed("class_labels")?,
            k: b.scalar("k")?,
            train_idx: b.field_parsed("train_idx")?,
            train: b.matrix("train")?.clone(),
        };
        if m.train_idx.len() != m.train.nrows()
            || m.k == 0
            || m.k > m.train.nrows()
            || m.train_idx.iter().any(|&c| c >= m.class_labels.len())
        {
            return Err(Error::InvalidInput("knn bundle is inconsistent".into()));
        }
        Ok(m)
    }
}

fn check_training(x: &DMatrix<f64>, y: &[u32]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::InvalidInput(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("training matrix is not finite".into()));
    }
    Ok(())
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::InvalidInput(format!(
            "expected {expected} features, got {}",
            x.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Svm,
    Knn,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Svm(OvOSvmModel),
    Knn(KnnModel),
}

/// A classifier behind a standardizer fitted on its training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub standardizer: Standardizer,
    pub classifier: Classifier,
}

impl TrainedModel {
    pub fn fit_svm(x: &DMatrix<f64>, y: &[u32], params: &SvmParams) -> Result<Self> {
        let standardizer = Standardizer::fit(x)?;
        let z = standardizer.transform(x)?;
        Ok(Self {
            standardizer,
            classifier: Classifier::Svm(OvOSvmModel::fit(&z, y, None, params)?),
        })
    }

    pub fn fit_knn(x: &DMatrix<f64>, y: &[u32], k: usize) -> Result<Self> {
        let standardizer = Standardizer::fit(x)?;
        let z = standardizer.transform(x)?;
        Ok(Self {
            standardizer,
            classifier: Classifier::Knn(KnnModel::fit(&z, y, k)?),
        })
    }

    pub fn class_labels(&self) -> &[u32] {
        match &self.classifier {
            Classifier::Svm(m) => &m.class_labels,
            Classifier::Knn(m) => &m.class_labels,
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self.classifier {
            Classifier::Svm(_) => ClassifierKind::Svm,
            Classifier::Knn(_) => ClassifierKind::Knn,
        }
    }

    pub fn score(&self, row: &[f64]) -> Result<ScoreVector> {
        let z = self.standardizer.transform_row(row)?;
        match &self.classifier {
            Classifier::Svm(m) => m.score(&z),
            Classifier::Knn(m) => m.score(&z),
        }
    }

    /// Scores every row, in row order.
    pub fn score_rows(&self, x: &DMatrix<f64>) -> Result<Vec<ScoreVector>> {
        (0..x.nrows())
            .into_par_iter()
            .map(|r| self.score(&x.row(r).iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let kind = match self.classifier {
            Classifier::Svm(_) => "svm",
            Classifier::Knn(_) => "knn",
        };
        let mut b = Bundle::new(kind);
        self.standardizer.write_bundle(&mut b);
        match &self.classifier {
            Classifier::Svm(m) => m.write_bundle(&mut b),
            Classifier::Knn(m) => m.write_bundle(&mut b),
        }
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let kind = text
            .split_whitespace()
            .nth(1)
            .ok_or_else(|| Error::parse(path, 1, "empty model file"))?;
        let b = Bundle::parse(&text, path, kind)?;
        let classifier = match kind {
            "svm" => Classifier::Svm(OvOSvmModel::read_bundle(&b)?),
            "knn" => Classifier::Knn(KnnModel::read_bundle(&b)?),
            other => return Err(Error::parse(path, 1, format!("unknown model kind {other:?}"))),
        };
        let model = Self {
            standardizer: Standardizer::read_bundle(&b)?,
            classifier,
        };
        let width = match &model.classifier {
            Classifier::Svm(m) => m.dim,
            Classifier::Knn(m) => m.train.ncols(),
        };
        if width != model.standardizer.d_out() {
            return Err(Error::InvalidInput("standardizer and classifier widths differ".into()));
        }
        Ok(model)
    }
}

/// One row of an external score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScore {
    pub id: Option<String>,
    pub scores: ScoreVector,
}

/// Whitespace-separated decimal scores, one instance per line. With
/// `has_id`, the first token of each line is an instance id. Blank lines
/// and lines starting with `#` are skipped. The estimated label is always
/// recomputed from the scores.
pub fn load_external_scores(path: &Path, has_id: bool) -> Result<Vec<ExternalScore>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let id = if has_id { tokens.next().map(str::to_string) } else { None };
        let scores = tokens.map(|t| parse_real(t, path, no)).collect::<Result<Vec<_>>>()?;
        if scores.is_empty() {
            return Err(Error::parse(path, no, "row has no scores"));
        }
        match width {
            Some(w) if w != scores.len() => {
                return Err(Error::parse(
                    path,
                    no,
                    format!("row has {} scores, earlier rows have {w}", scores.len()),
                ))
            }
            _ => width = Some(scores.len()),
        }
        out.push(ExternalScore {
            id,
            scores: ScoreVector::new(scores).map_err(|e| Error::parse(path, no, e.to_string()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], n_per: &[usize], sd: f64, seed: u64) -> (DMatrix<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, (center, &n)) in centers.iter().zip(n_per).enumerate() {
            for _ in 0..n {
                rows.push(center[0] + noise.sample(&mut rng));
                rows.push(center[1] + noise.sample(&mut rng));
                y.push(c as u32 + 1);
            }
        }
        (DMatrix::from_row_slice(y.len(), 2, &rows), y)
    }

    fn row(x: &DMatrix<f64>, r: usize) -> Vec<f64> {
        x.row(r).iter().copied().collect()
    }

    #[test]
    fn score_vector_argmax_ties_to_lowest() {
        assert_eq!(ScoreVector::new(vec![0.2, 0.7, 0.7]).unwrap().estimated_label(), 1);
        assert!(ScoreVector::new(vec![]).is_err());
        assert!(ScoreVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn svm_separates_blobs_with_zero_hinge() {
        // clusters of radius < 0.5 at x = ±2: margin 2 after the gap
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..80 {
            let side = if i < 40 { 1.0 } else { -1.0 };
            rows.push(side * 2.0 + rng.random_range(-0.5..0.5));
            rows.push(rng.random_range(-3.0..3.0));
            y.push(if i < 40 { 1 } else { 2 });
        }
        let x = DMatrix::from_row_slice(80, 2, &rows);
        let m = OvOSvmModel::fit(&x, &y, None, &SvmParams { regularization: 1e-3, epochs: 200, tolerance: 1e-9 }).unwrap();
        let p = &m.pairs[0];
        let mut hinge = 0.0;
        for r in 0..80 {
            let t = if y[r] == 1 { 1.0 } else { -1.0 };
            hinge += (1.0 - t * p.margin(&row(&x, r))).max(0.0) / 80.0;
            assert_eq!(m.score(&row(&x, r)).unwrap().estimated_label(), (y[r] - 1) as usize);
        }
        assert!(hinge < 1e-2, "mean hinge {hinge}");
    }

    #[test]
    fn svm_three_classes_three_models() {
        let (x, y) = blobs(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]], &[20, 20, 20], 0.5, 1);
        let m = OvOSvmModel::fit(&x, &y, None, &SvmParams::default()).unwrap();
        assert_eq!(m.pairs.len(), 3);
        assert!(matches!(
            OvOSvmModel::fit(&x, &vec![4; 60], None, &SvmParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn svm_score_formula() {
        let m = OvOSvmModel {
            class_labels: vec![1, 2, 3],
            class_weights: vec![1.0; 3],
            pairs: vec![
                PairModel { pos: 0, neg: 1, weights: vec![1.0], bias: 0.0 },
                PairModel { pos: 0, neg: 2, weights: vec![1.5], bias: 0.0 },
                PairModel { pos: 1, neg: 2, weights: vec![0.0], bias: 0.0 },
            ],
            dim: 1,
        };
        // margins toward label 0: +2 vs 1, +3 vs 2
        assert_eq!(m.score(&[2.0]).unwrap().scores()[0], 7.0);
        // margins -2 and -3
        assert_eq!(m.score(&[-2.0]).unwrap().scores()[0], 0.0);
        assert!(m.score(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn svm_score_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let d = 5;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(PairModel {
                    pos: i,
                    neg: j,
                    weights: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    bias: rng.random_range(-1.0..1.0),
                });
            }
        }
        let m = OvOSvmModel { class_labels: (0..n as u32).collect(), class_weights: vec![1.0; n], pairs, dim: d };
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = m.score(&x).unwrap();
            for i in 0..n {
                let mut oracle = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let p = m.pairs.iter().find(|p| (p.pos, p.neg) == (i.min(j), i.max(j))).unwrap();
                    let raw: f64 = p.weights.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + p.bias;
                    let toward_i = if i < j { raw } else { -raw };
                    oracle += (1.0 + toward_i).max(0.0);
                }
                assert!((s.scores()[i] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svm_duplication_leaves_decisions_unchanged() {
        let (x, y) = blobs(&[[0.0, 0.0], [3.0, 1.0], [1.0, 3.0]], &[15, 30, 20], 1.0, 5);
        let params = SvmParams::default();
        let a = OvOSvmModel::fit(&x, &y, None, &params).unwrap();
        let dup_rows: Vec<usize> = (0..x.nrows()).chain((0..x.nrows()).filter(|&r| y[r] == 1)).collect();
        let xd = DMatrix::from_fn(dup_rows.len(), 2, |r, c| x[(dup_rows[r], c)]);
        let yd: Vec<u32> = dup_rows.iter().map(|&r| y[r]).collect();
        let b = OvOSvmModel::fit(&xd, &yd, None, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let p = [rng.random_range(-2.0..5.0), rng.random_range(-2.0..5.0)];
            assert_eq!(a.score(&p).unwrap().estimated_label(), b.score(&p).unwrap().estimated_label());
        }
        for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
            for (u, v) in pa.weights.iter().zip(&pb.weights) {
                assert!((u - v).abs() < 1e-6 * (1.0 + u.abs()), "{u} vs {v}");
            }
        }
    }

    fn scaled(m: &OvOSvmModel, c: f64) -> OvOSvmModel {
        let mut out = m.clone();
        for p in &mut out.pairs {
            p.weights.iter_mut().for_each(|w| *w *= c);
            p.bias *= c;
        }
        out
    }

    #[test]
    fn svm_scaling_keeps_two_label_argmax() {
        let (x, y) = blobs(&[[0.0, 0.0], [2.0, 1.0]], &[20, 20], 1.0, 9);
        let m = OvOSvmModel::fit(&x, &y, None, &SvmParams::default()).unwrap();
        let big = scaled(&m, 4.0);
        for r in 0..x.nrows() {
            let xr = row(&x, r);
            if m.pairs[0].margin(&xr) != 0.0 {
                assert_eq!(m.score(&xr).unwrap().estimated_label(), big.score(&xr).unwrap().estimated_label());
            }
        }
    }

    /// With every margin outside ±1, `S_k(c) = W_k + c·Σ_{k wins} m` is
    /// linear in the scale `c`; the winner stays on top for every `c > 1`
    /// when it wins all of its pairs and its margin sum is the largest.
    #[test]
    fn svm_scaling_keeps_argmax_when_winner_margin_sum_dominates() {
        let (x, y) = blobs(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], &[40, 40, 40], 0.4, 9);
        let m = OvOSvmModel::fit(&x, &y, None, &SvmParams::default()).unwrap();
        let toward = |p: &PairModel, k: usize, xr: &[f64]| if p.pos == k { p.margin(xr) } else { -p.margin(xr) };
        let mut checked = 0;
        for r in 0..x.nrows() {
            let xr = row(&x, r);
            let est = m.score(&xr).unwrap().estimated_label();
            let outside = m.pairs.iter().all(|p| p.margin(&xr).abs() >= 1.0);
            let win_sum = |k: usize| -> f64 {
                m.pairs
                    .iter()
                    .filter(|p| p.pos == k || p.neg == k)
                    .map(|p| toward(p, k, &xr))
                    .filter(|&v| v > 0.0)
                    .sum()
            };
            let wins_all = m.pairs.iter().filter(|p| p.pos == est || p.neg == est).all(|p| toward(p, est, &xr) > 0.0);
            let dominates = (0..m.n_labels()).all(|k| k == est || win_sum(est) >= win_sum(k));
            if outside && wins_all && dominates {
                checked += 1;
                for c in [1.5, 3.0, 10.0] {
                    assert_eq!(scaled(&m, c).score(&xr).unwrap().estimated_label(), est);
                }
            }
        }
        assert!(checked > 30, "{checked}");
    }

    fn permuted_labels_permute_scores(fit: impl Fn(&DMatrix<f64>, &[u32]) -> Vec<ScoreVector>) {
        let (x, y) = blobs(&[[0.0, 0.0], [2.0, 0.5], [0.5, 2.0], [2.0, 2.0]], &[12, 14, 10, 16], 0.8, 12);
        // label value l ↦ perm[l-1]+1 reorders the sorted label indices
        let perm = [2usize, 0, 3, 1];
        let yp: Vec<u32> = y.iter().map(|&l| perm[(l - 1) as usize] as u32 + 1).collect();
        let a = fit(&x, &y);
        let b = fit(&x, &yp);
        for (sa, sb) in a.iter().zip(&b) {
            for old in 0..4 {
                assert!((sa.scores()[old] - sb.scores()[perm[old]]).abs() < 1e-12);
            }
            let top = sa.scores()[sa.estimated_label()];
            if sa.scores().iter().filter(|&&v| v == top).count() == 1 {
                assert_eq!(perm[sa.estimated_label()], sb.estimated_label());
            }
        }
    }

    #[test]
    fn svm_label_permutation_permutes_scores() {
        permuted_labels_permute_scores(|x, y| {
            let m = OvOSvmModel::fit(x, y, None, &SvmParams::default()).unwrap();
            (0..x.nrows()).map(|r| m.score(&row(x, r)).unwrap()).collect()
        });
    }

    #[test]
    fn knn_label_permutation_permutes_scores() {
        permuted_labels_permute_scores(|x, y| {
            let m = KnnModel::fit(x, y, 5).unwrap();
            (0..x.nrows()).map(|r| m.score(&row(x, r)).unwrap()).collect()
        });
    }

    #[test]
    fn knn_basics() {
        let (x, y) = blobs(&[[0.0, 0.0], [4.0, 0.0]], &[10, 30], 1.0, 2);
        let m1 = KnnModel::fit(&x, &y, 1).unwrap();
        let s = m1.score(&row(&x, 3)).unwrap();
        assert_eq!(s.scores(), &[1.0, 0.0]);
        let all = KnnModel::fit(&x, &y, 40).unwrap();
        assert_eq!(all.score(&[100.0, 100.0]).unwrap().scores(), &[0.25, 0.75]);
        assert!(KnnModel::fit(&x, &y, 41).is_err());
        assert!(KnnModel::fit(&x, &y, 0).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // integer grid coordinates force distance ties
        let x = DMatrix::from_fn(60, 3, |_, _| rng.random_range(0..4) as f64);
        let y: Vec<u32> = (0..60).map(|_| rng.random_range(0..5)).collect();
        for k in [1, 3, 7, 20] {
            let m = KnnModel::fit(&x, &y, k).unwrap();
            for _ in 0..100 {
                let q: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
                let mut order: Vec<(f64, usize)> = (0..60)
                    .map(|r| ((0..3).map(|c| (x[(r, c)] - q[c]).powi(2)).sum::<f64>(), r))
                    .collect();
                order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut counts = vec![0.0; m.n_labels()];
                for &(_, r) in &order[..k] {
                    counts[m.train_idx[r]] += 1.0;
                }
                let s = m.score(&q).unwrap();
                let expected: Vec<f64> = counts.iter().map(|c| c / k as f64).collect();
                assert_eq!(s.scores(), &expected[..]);
                let total: f64 = s.scores().iter().sum();
                assert!((total - 1.0).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }

    #[test]
    fn external_scores_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        std::fs::write(&p, "0.1 0.7 0.2\n").unwrap();
        let v = load_external_scores(&p, false).unwrap();
        assert_eq!(v[0].scores.estimated_label(), 1);

        std::fs::write(&p, "").unwrap();
        assert!(load_external_scores(&p, false).unwrap().is_empty());

        let mut text = String::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            text.push_str(&format!("img{i}"));
            for _ in 0..24 {
                text.push_str(&format!(" {}", rng.random::<f64>()));
            }
            text.push('\n');
        }
        std::fs::write(&p, &text).unwrap();
        let v = load_external_scores(&p, true).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.iter().all(|s| s.scores.n_labels() == 24));
        assert_eq!(v[7].id.as_deref(), Some("img7"));

        std::fs::write(&p, "0.1 0.2\n0.3 0.4 0.5\n").unwrap();
        assert!(matches!(load_external_scores(&p, false), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "0.1 x\n").unwrap();
        assert!(matches!(load_external_scores(&p, false), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            load_external_scores(&dir.path().join("absent"), false),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn trained_models_round_trip() {
        let (x, y) = blobs(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], &[10, 10, 10], 0.7, 4);
        let dir = tempfile::tempdir().unwrap();
        for m in [
            TrainedModel::fit_svm(&x, &y, &SvmParams::default()).unwrap(),
            TrainedModel::fit_knn(&x, &y, 3).unwrap(),
        ] {
            let p = dir.path().join("m.txt");
            m.save(&p).unwrap();
            let back = TrainedModel::load(&p).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.score_rows(&x).unwrap(), m.score_rows(&x).unwrap());
        }
    }
}
