//! Two-stage supervised projection: first onto the directions of least
//! within-class scatter, then onto the directions of greatest pairwise
//! between-class scatter inside that subspace.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::textio::Bundle;

/// `(d_mid, d_out) = (min(d_in, n - C), C - 1)`, each at least 1.
pub fn default_dims(d_in: usize, n: usize, n_classes: usize) -> (usize, usize) {
    let d_mid = d_in.min(n.saturating_sub(n_classes)).max(1);
    let d_out = n_classes.saturating_sub(1).clamp(1, d_mid);
    (d_mid, d_out)
}

/// Class index per row plus the sorted distinct labels.
fn class_index(y: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let labels: Vec<u32> = y.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let pos: BTreeMap<u32, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels, y.iter().map(|l| pos[l]).collect())
}

fn class_means(x: &DMatrix<f64>, idx: &[usize], n_classes: usize) -> (DMatrix<f64>, Vec<usize>) {
    let mut means = DMatrix::zeros(n_classes, x.ncols());
    let mut counts = vec![0usize; n_classes];
    for (r, &c) in idx.iter().enumerate() {
        counts[c] += 1;
        let mut row = means.row_mut(c);
        row += x.row(r);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            means.row_mut(c).scale_mut(1.0 / n as f64);
        }
    }
    (means, counts)
}

/// `X̄ᵀX̄` with each row centered on its class mean.
pub fn within_scatter(x: &DMatrix<f64>, y: &[u32]) -> DMatrix<f64> {
    let (labels, idx) = class_index(y);
    let (means, _) = class_means(x, &idx, labels.len());
    let mut centered = x.clone();
    for (r, &c) in idx.iter().enumerate() {
        let mut row = centered.row_mut(r);
        row -= means.row(c);
    }
    centered.transpose() * &centered
}

/// `Σ_{l_i ≠ l_j} (x_i − x_j)ᵀ(x_i − x_j)` over ordered pairs, via
/// `2 Σ_c (n − n_c) G_c − 2 s sᵀ + 2 Σ_c n_c² μ_c μ_cᵀ` where `G_c` is the
/// Gram matrix of class `c` and `s` the column sum.
pub fn between_pairwise_scatter(x: &DMatrix<f64>, y: &[u32]) -> DMatrix<f64> {
    let (labels, idx) = class_index(y);
    let n = x.nrows();
    let (means, counts) = class_means(x, &idx, labels.len());
    let weights: Vec<f64> = idx.iter().map(|&c| ((n - counts[c]) as f64).sqrt()).collect();
    let mut weighted = x.clone();
    for (r, w) in weights.iter().enumerate() {
        weighted.row_mut(r).scale_mut(*w);
    }
    let mut s = weighted.transpose() * &weighted * 2.0;
    let total: DVector<f64> = x.row_sum().transpose();
    s -= &total * total.transpose() * 2.0;
    for (c, &nc) in counts.iter().enumerate() {
        let mu: DVector<f64> = means.row(c).transpose();
        s += &mu * mu.transpose() * (2.0 * (nc * nc) as f64);
    }
    // symmetric by construction; remove rounding asymmetry
    (&s + s.transpose()) * 0.5
}

/// Eigenvectors as rows, ordered by eigenvalue (ascending or descending),
/// ties kept in solver order. Each row's largest-magnitude component is
/// made positive.
fn sorted_eigenvectors(m: DMatrix<f64>, take: usize, ascending: bool) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        if ascending { va.total_cmp(&vb) } else { vb.total_cmp(&va) }
    });
    let d = eig.eigenvectors.nrows();
    let mut rows = DMatrix::zeros(take, d);
    let mut values = Vec::with_capacity(take);
    for (k, &i) in order.iter().take(take).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            rows[(k, j)] = sign * v[j];
        }
        values.push(eig.eigenvalues[i]);
    }
    (rows, values)
}

/// Orthonormal rows spanning the centered rows of `x`, when `x` has more
/// columns than rows. Numerically null directions are dropped.
fn row_span_basis(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.ncols() <= x.nrows() {
        return None;
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let eig = SymmetricEigen::new(&centered * centered.transpose());
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * top)
        .collect();
    if keep.is_empty() {
        return Some(DMatrix::zeros(0, x.ncols()));
    }
    let u = eig.eigenvectors.select_columns(&keep);
    // re-orthonormalize the projected rows for accuracy
    Some((centered.transpose() * u).qr().q().transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FukunagaModel {
    /// `d_mid × d_in`, orthonormal rows.
    pub w_within: DMatrix<f64>,
    /// `d_out × d_mid`, orthonormal rows.
    pub w_between: DMatrix<f64>,
    pub class_labels: Vec<u32>,
    /// Stage-1 eigenvalues of the kept directions, ascending.
    pub within_eigenvalues: Vec<f64>,
    /// Stage-2 eigenvalues of the kept directions, descending.
    pub between_eigenvalues: Vec<f64>,
}

impl FukunagaModel {
    pub fn fit(x: &DMatrix<f64>, y: &[u32], d_mid: usize, d_out: usize) -> Result<Self> {
        let d_in = x.ncols();
        if x.nrows() != y.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if d_mid == 0 || d_mid > d_in {
            return Err(Error::InvalidConfig(format!("d_mid must be in 1..={d_in}, got {d_mid}")));
        }
        if d_out == 0 || d_out > d_mid {
            return Err(Error::InvalidConfig(format!("d_out must be in 1..={d_mid}, got {d_out}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature matrix is not finite".into()));
        }
        let (labels, idx) = class_index(y);
        if labels.len() < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {}", labels.len())));
        }
        let mut counts = vec![0usize; labels.len()];
        idx.iter().for_each(|&c| counts[c] += 1);
        if let Some(c) = counts.iter().position(|&n| n < 2) {
            return Err(Error::InvalidInput(format!(
                "class {} has {} instance(s), need at least 2",
                labels[c], counts[c]
            )));
        }

        // Wide data: directions orthogonal to every centered row carry no
        // scatter of either kind, so solve inside the row span instead.
        let (w_within, within_eigenvalues) = match row_span_basis(x) {
            Some(basis) => {
                if d_mid > basis.nrows() {
                    return Err(Error::InvalidConfig(format!(
                        "d_mid must be at most {} for {} training rows, got {d_mid}",
                        basis.nrows(),
                        x.nrows()
                    )));
                }
                let inner = x * basis.transpose();
                let (w, values) = sorted_eigenvectors(within_scatter(&inner, y), d_mid, true);
                (w * basis, values)
            }
            None => sorted_eigenvectors(within_scatter(x, y), d_mid, true),
        };
        let projected = x * w_within.transpose();
        let (w_between, between_eigenvalues) =
            sorted_eigenvectors(between_pairwise_scatter(&projected, y), d_out, false);
        Ok(Self {
            w_within,
            w_between,
            class_labels: labels,
            within_eigenvalues,
            between_eigenvalues,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_within.ncols()
    }

    pub fn d_mid(&self) -> usize {
        self.w_within.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w_between.nrows()
    }

    /// Row-instance projection `X · W_withinᵀ · W_betweenᵀ`.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::InvalidInput(format!(
                "expected {} columns, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(x * self.w_within.transpose() * self.w_between.transpose())
    }

    pub fn write_bundle(&self, bundle: &mut Bundle) {
        bundle.push_field("class_labels", &self.class_labels);
        bundle.push_reals("within_eigenvalues", &self.within_eigenvalues);
        bundle.push_reals("between_eigenvalues", &self.between_eigenvalues);
        bundle.push_matrix("w_within", &self.w_within);
        bundle.push_matrix("w_between", &self.w_between);
    }

    pub fn read_bundle(bundle: &Bundle) -> Result<Self> {
        let model = Self {
            class_labels: bundle.field_parsed("class_labels")?,
            within_eigenvalues: bundle.reals("within_eigenvalues")?,
            between_eigenvalues: bundle.reals("between_eigenvalues")?,
            w_within: bundle.matrix("w_within")?.clone(),
            w_between: bundle.matrix("w_between")?.clone(),
        };
        if model.w_between.ncols() != model.d_mid() || model.d_out() > model.d_mid() {
            return Err(Error::InvalidInput(format!(
                "projection shapes {}x{} and {}x{} do not chain",
                model.w_within.nrows(),
                model.w_within.ncols(),
                model.w_between.nrows(),
                model.w_between.ncols()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Bundle::new("fukunaga");
        self.write_bundle(&mut b);
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_bundle(&Bundle::load(path, "fukunaga")?)
    }
}

/// Per-column z-scoring that drops constant columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub d_in: usize,
    pub keep: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot standardize an empty matrix".into()));
        }
        let n = x.nrows() as f64;
        let (mut keep, mut mean, mut scale) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..x.ncols() {
            let col = x.column(c);
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                keep.push(c);
                mean.push(m);
                scale.push(sd);
            }
        }
        if keep.is_empty() {
            return Err(Error::InvalidInput("every feature column is constant".into()));
        }
        Ok(Self {
            d_in: x.ncols(),
            keep,
            mean,
            scale,
        })
    }

    pub fn d_out(&self) -> usize {
        self.keep.len()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d_in {
            return Err(Error::InvalidInput(format!(
                "expected {} columns, got {}",
                self.d_in,
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), self.keep.len(), |r, k| {
            (x[(r, self.keep[k])] - self.mean[k]) / self.scale[k]
        }))
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.d_in {
            return Err(Error::InvalidInput(format!(
                "expected {} values, got {}",
                self.d_in,
                row.len()
            )));
        }
        Ok(self
            .keep
            .iter()
            .enumerate()
            .map(|(k, &c)| (row[c] - self.mean[k]) / self.scale[k])
            .collect())
    }

    pub fn write_bundle(&self, bundle: &mut Bundle) {
        bundle.push_field("standardizer_d_in", [self.d_in]);
        bundle.push_field("standardizer_keep", &self.keep);
        bundle.push_reals("standardizer_mean", &self.mean);
        bundle.push_reals("standardizer_scale", &self.scale);
    }

    pub fn read_bundle(bundle: &Bundle) -> Result<Self> {
        let s = Self {
            d_in: bundle.scalar("standardizer_d_in")?,
            keep: bundle.field_parsed("standardizer_keep")?,
            mean: bundle.reals("standardizer_mean")?,
            scale: bundle.reals("standardizer_scale")?,
        };
        let n = s.keep.len();
        if s.mean.len() != n
            || s.scale.len() != n
            || s.keep.iter().any(|&c| c >= s.d_in)
            || s.scale.iter().any(|&v| v <= 0.0)
        {
            return Err(Error::InvalidInput("inconsistent standardizer".into()));
        }
        Ok(s)
    }
}

/// Standardize then project; the persisted unit of the `reduce` step.
#[derive(Debug, Clone, PartialEq)]
pub struct Reducer {
    pub standardizer: Standardizer,
    pub model: FukunagaModel,
}

impl Reducer {
    /// Dimensions default per [`default_dims`] on the standardized width.
    pub fn fit(x: &DMatrix<f64>, y: &[u32], d_mid: Option<usize>, d_out: Option<usize>) -> Result<Self> {
        let standardizer = Standardizer::fit(x)?;
        let z = standardizer.transform(x)?;
        let n_classes = class_index(y).0.len();
        let (dm, dout) = default_dims(z.ncols(), z.nrows(), n_classes);
        let d_mid = d_mid.unwrap_or(dm);
        let d_out = d_out.unwrap_or(dout.min(d_mid));
        let model = FukunagaModel::fit(&z, y, d_mid, d_out)?;
        Ok(Self { standardizer, model })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.model.transform(&self.standardizer.transform(x)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Bundle::new("reducer");
        self.standardizer.write_bundle(&mut b);
        self.model.write_bundle(&mut b);
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path, "reducer")?;
        let r = Self {
            standardizer: Standardizer::read_bundle(&b)?,
            model: FukunagaModel::read_bundle(&b)?,
        };
        if r.standardizer.d_out() != r.model.d_in() {
            return Err(Error::InvalidInput("standardizer and projection widths differ".into()));
        }
        Ok(r)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Cyclic Jacobi eigen-solver: (eigenvalues, eigenvectors as columns).
    pub(crate) fn jacobi_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = m.nrows();
        let mut a = m.clone();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-26 * a.norm_squared().max(1e-300) {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)]).collect(), v)
    }

    fn brute_between(x: &DMatrix<f64>, y: &[u32]) -> DMatrix<f64> {
        let d = x.ncols();
        let mut s = DMatrix::zeros(d, d);
        for i in 0..x.nrows() {
            for j in 0..x.nrows() {
                if y[i] != y[j] {
                    let diff: DVector<f64> = (x.row(i) - x.row(j)).transpose();
                    s += &diff * diff.transpose();
                }
            }
        }
        s
    }

    fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let z = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(n, d, |_, _| z.sample(rng))
    }

    /// Cosines of principal angles between two row-orthonormal subspaces.
    pub(crate) fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
        (a * b.transpose()).singular_values().iter().copied().collect()
    }

    /// Two classes separated along x, within-class noise mostly along z.
    pub(crate) fn blobs(n_per: usize, seed: u64) -> (DMatrix<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.05).unwrap();
        let big = Normal::new(0.0, 3.0).unwrap();
        let mut x = DMatrix::zeros(2 * n_per, 3);
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let class = (i >= n_per) as u32;
            let mx = if class == 0 { -5.0 } else { 5.0 };
            x[(i, 0)] = mx + small.sample(&mut rng);
            x[(i, 1)] = 1.0 + small.sample(&mut rng);
            x[(i, 2)] = big.sample(&mut rng);
            y.push(class + 1);
        }
        (x, y)
    }

    #[test]
    fn blobs_drop_noise_axis_and_find_mean_axis() {
        let (x, y) = blobs(100, 3);
        let m = FukunagaModel::fit(&x, &y, 2, 1).unwrap();
        let z = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let cos_z = principal_cosines(&m.w_within, &z)[0];
        assert!(cos_z.acos().to_degrees() > 80.0, "angle {}", cos_z.acos().to_degrees());
        let axis = &m.w_between * &m.w_within;
        assert!(axis[(0, 0)].abs() > 0.99, "{axis}");
    }

    #[test]
    fn pairwise_scatter_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(60, 5, &mut rng);
        let y: Vec<u32> = (0..60).map(|i| [3, 7, 7, 9][i % 4]).collect();
        let fast = between_pairwise_scatter(&x, &y);
        let slow = brute_between(&x, &y);
        assert!((&fast - &slow).norm() / slow.norm() < 1e-8);
    }

    #[test]
    fn isotropic_scatter_keeps_lowest_index_directions() {
        // each class is its mean plus ±e_k, so the centered scatter is 4I
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (label, mean) in [(1u32, [0.0, 0.0, 0.0]), (2, [3.0, 1.0, -2.0])] {
            for k in 0..3 {
                for sign in [1.0, -1.0] {
                    let mut p = mean;
                    p[k] += sign;
                    rows.extend_from_slice(&p);
                    y.push(label);
                }
            }
        }
        let x = DMatrix::from_row_slice(12, 3, &rows);
        let s = within_scatter(&x, &y);
        assert!((&s - DMatrix::<f64>::identity(3, 3) * 4.0).norm() < 1e-12, "{s}");
        let m = FukunagaModel::fit(&x, &y, 2, 1).unwrap();
        assert!(m.within_eigenvalues.iter().all(|v| (v - 4.0).abs() < 1e-12));
        let expected = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((&m.w_within - expected).norm() < 1e-12, "{}", m.w_within);
    }

    #[test]
    fn full_rank_projection_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(30, 4, &mut rng);
        let y: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let m = FukunagaModel::fit(&x, &y, 4, 4).unwrap();
        let t = m.transform(&x).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let a = (x.row(i) - x.row(j)).norm();
                let b = (t.row(i) - t.row(j)).norm();
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transform_basics() {
        let (x, y) = blobs(20, 1);
        let m = FukunagaModel::fit(&x, &y, 2, 1).unwrap();
        assert!(m.transform(&DMatrix::zeros(5, 3)).unwrap().iter().all(|&v| v == 0.0));
        let batch = m.transform(&x).unwrap();
        let single = m.transform(&x.rows(7, 1).into_owned()).unwrap();
        assert_eq!(single.row(0), batch.row(7));
        assert!(matches!(m.transform(&DMatrix::zeros(2, 4)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn output_dims_follow_between_eigen_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[0.0, 0.0, 0.0, 0.0], [6.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..40 {
                rows.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
                y.push(c as u32);
            }
        }
        let x = DMatrix::from_row_slice(160, 4, &rows);
        let m = FukunagaModel::fit(&x, &y, 4, 3).unwrap();
        let t = m.transform(&x).unwrap();
        let var: Vec<f64> = (0..3).map(|k| t.column(k).variance()).collect();
        assert!(var.windows(2).all(|w| w[0] >= w[1]), "{var:?}");
        assert!(m.between_eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_data_solves_in_row_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random_matrix(30, 80, &mut rng);
        let y: Vec<u32> = (0..30).map(|i| (i % 3) as u32 + 1).collect();
        for (i, &c) in y.iter().enumerate() {
            x[(i, 7)] += 6.0 * c as f64;
        }
        let m = FukunagaModel::fit(&x, &y, 20, 2).unwrap();
        let gram = &m.w_within * m.w_within.transpose();
        assert!((gram - DMatrix::identity(20, 20)).norm() < 1e-9);
        let sw = within_scatter(&x, &y);
        for (k, v) in m.within_eigenvalues.iter().enumerate() {
            let w = m.w_within.row(k);
            let rayleigh = (&w * &sw * w.transpose())[(0, 0)];
            assert!((rayleigh - v).abs() < 1e-8 * (1.0 + v.abs()), "{rayleigh} vs {v}");
        }
        // every kept direction lies in the span of the centered rows
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(30, 80, |r, c| x[(r, c)] - mean[c]);
        let span = centered.transpose().svd(true, false).u.unwrap().columns(0, 29).into_owned();
        let residual = &m.w_within - &m.w_within * &span * span.transpose();
        assert!(residual.norm() < 1e-8);
        assert!(FukunagaModel::fit(&x, &y, 31, 2).is_err());
    }

    #[test]
    fn stage_one_beats_random_subspaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = random_matrix(90, 6, &mut rng);
        // anisotropic within-class noise
        let scales = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 3.0, 1.0, 0.5, 2.0, 0.1]));
        let mut x = x0 * scales;
        let y: Vec<u32> = (0..90).map(|i| (i % 3) as u32).collect();
        for (i, &c) in y.iter().enumerate() {
            x[(i, 0)] += 4.0 * c as f64;
        }
        let m = FukunagaModel::fit(&x, &y, 3, 2).unwrap();
        let sw = within_scatter(&x, &y);
        let cost = |w: &DMatrix<f64>| (w * &sw * w.transpose()).trace();
        let best = cost(&m.w_within);
        for _ in 0..50 {
            let q = random_matrix(6, 3, &mut rng).qr().q();
            assert!(best <= cost(&q.transpose()) + 1e-9);
        }
    }

    #[test]
    fn eigensolver_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(40, 7, &mut rng);
        let y: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        for s in [within_scatter(&x, &y), between_pairwise_scatter(&x, &y)] {
            let (mut vals, vecs) = jacobi_eigen(&s);
            let mut order: Vec<usize> = (0..7).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            let (ours, _) = sorted_eigenvectors(s.clone(), 7, true);
            let ours_vals: Vec<f64> = {
                let e = SymmetricEigen::new(s.clone());
                let mut v: Vec<f64> = e.eigenvalues.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                v
            };
            vals.sort_by(f64::total_cmp);
            for (a, b) in vals.iter().zip(&ours_vals) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "{a} vs {b}");
            }
            for k in [1, 3, 5] {
                let oracle = DMatrix::from_fn(k, 7, |r, c| vecs[(c, order[r])]);
                let mine = ours.rows(0, k).into_owned();
                let min_cos = principal_cosines(&mine, &oracle).into_iter().fold(1.0, f64::min);
                assert!(min_cos.min(1.0).acos() < 1e-4, "k {k}");
            }
        }
    }

    #[test]
    fn fit_errors() {
        let (x, y) = blobs(10, 1);
        assert!(matches!(FukunagaModel::fit(&x, &y, 4, 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(FukunagaModel::fit(&x, &y, 2, 3), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            FukunagaModel::fit(&x, &vec![1; 20], 2, 1),
            Err(Error::InvalidInput(_))
        ));
        let mut lone = y.clone();
        lone[0] = 9;
        assert!(matches!(FukunagaModel::fit(&x, &lone, 2, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn default_dims_formula() {
        assert_eq!(default_dims(1724, 960, 24), (936, 23));
        assert_eq!(default_dims(10, 960, 24), (10, 10));
        assert_eq!(default_dims(3, 100, 2), (3, 1));
    }

    #[test]
    fn reducer_round_trips_bit_exactly() {
        let (x, y) = blobs(15, 5);
        let mut wide = DMatrix::zeros(30, 4);
        wide.columns_mut(0, 3).copy_from(&x);
        wide.column_mut(3).fill(7.0);
        let r = Reducer::fit(&wide, &y, Some(2), Some(1)).unwrap();
        assert_eq!(r.standardizer.keep, vec![0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        r.save(&p).unwrap();
        let back = Reducer::load(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.transform(&wide).unwrap(), r.transform(&wide).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn transform_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let (x, y) = blobs(12, 9);
                let m = FukunagaModel::fit(&x, &y, 2, 1).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x1 = random_matrix(5, 3, &mut rng);
                let x2 = random_matrix(5, 3, &mut rng);
                let lhs = m.transform(&(&x1 * a + &x2 * b)).unwrap();
                let rhs = m.transform(&x1).unwrap() * a + m.transform(&x2).unwrap() * b;
                prop_assert!((lhs - rhs).amax() < 1e-9);
            }
        }
    }
}
