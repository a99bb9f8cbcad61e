//! Fold-local feature transforms and stratified cross-validation splits.
//!
//! Every `fit` function takes the rows it is allowed to see and nothing else;
//! callers select the training rows of a fold before fitting, so test rows can
//! never influence the fitted parameters.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower bound applied to per-feature standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Per-feature mean and (population) standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerFit {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StandardizerFit {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::Data(format!(
                "standardization needs at least 2 training rows, got {}",
                x.rows()
            )));
        }
        let n = x.rows() as f64;
        let d = x.cols();
        let mut mu = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, &v) in mu.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);

        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mu) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let sigma = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(SIGMA_FLOOR))
            .collect();
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "standardizer fitted on {} features applied to {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mu).zip(&self.sigma) {
                *v = ((f64::from(*v) - m) / s) as f32;
            }
        }
        Ok(out)
    }
}

/// How many principal components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    Components(usize),
    /// Smallest number of components whose cumulative explained variance
    /// ratio reaches the given fraction.
    Variance(f64),
}

/// Principal axes of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    /// Training mean removed before projecting (close to zero for
    /// standardized inputs).
    pub mean: Vec<f64>,
    /// `d x r`, row-major, orthonormal columns.
    pub components: Vec<f64>,
    pub dim: usize,
    pub retained: usize,
    /// Variance along each retained axis with the `n - 1` normalization.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaFit {
    pub fn fit(x: &Matrix, mode: PcaMode) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 || d == 0 {
            return Err(Error::Data(format!("PCA needs at least 2 rows and 1 column, got {n} x {d}")));
        }
        let bound = d.min(n);
        if let PcaMode::Components(r) = mode {
            if r == 0 || r > bound {
                return Err(Error::Config(format!(
                    "cannot keep {r} principal components of a {n} x {d} training matrix (max {bound})"
                )));
            }
        }
        if let PcaMode::Variance(f) = mode {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("variance fraction must lie in (0, 1], got {f}")));
            }
        }

        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += f64::from(v));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| f64::from(x.get(i, j)) - mean[j]);

        let svd = centered.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Data("SVD did not produce right singular vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let variance: Vec<f64> = order
            .iter()
            .map(|&k| svd.singular_values[k].powi(2) / (n as f64 - 1.0))
            .collect();
        let total: f64 = variance.iter().sum();
        let ratio: Vec<f64> = if total > 0.0 {
            variance.iter().map(|v| v / total).collect()
        } else {
            vec![0.0; variance.len()]
        };

        let retained = match mode {
            PcaMode::Components(r) => r.min(order.len()),
            PcaMode::Variance(f) => {
                let mut cum = 0.0;
                let mut r = ratio.len();
                for (k, v) in ratio.iter().enumerate() {
                    cum += v;
                    if cum >= f - 1e-12 {
                        r = k + 1;
                        break;
                    }
                }
                r.max(1)
            }
        };

        let mut components = vec![0.0; d * retained];
        for (c, &k) in order.iter().take(retained).enumerate() {
            let axis: Vec<f64> = (0..d).map(|j| v_t[(k, j)]).collect();
            let pivot = axis
                .iter()
                .copied()
                .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (j, v) in axis.into_iter().enumerate() {
                components[j * retained + c] = sign * v;
            }
        }

        Ok(Self {
            mean,
            components,
            dim: d,
            retained,
            explained_variance: variance[..retained].to_vec(),
            explained_variance_ratio: ratio[..retained].to_vec(),
        })
    }

    /// Column `c` of the component matrix.
    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.dim).map(|j| self.components[j * self.retained + c]).collect()
    }

    /// `(x - mean) P`
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "PCA fitted on {} features applied to {}",
                self.dim,
                x.cols()
            )));
        }
        let r = self.retained;
        let mut out = Matrix::zeros(x.rows(), r);
        for i in 0..x.rows() {
            let mut acc = vec![0.0f64; r];
            for (j, &v) in x.row(i).iter().enumerate() {
                let c = f64::from(v) - self.mean[j];
                let p = &self.components[j * r..(j + 1) * r];
                acc.iter_mut().zip(p).for_each(|(a, p)| *a += c * p);
            }
            out.row_mut(i)
                .iter_mut()
                .zip(acc)
                .for_each(|(o, a)| *o = a as f32);
        }
        Ok(out)
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.retained {
            return Err(Error::Dimension(format!(
                "expected {} projected coordinates, got {}",
                self.retained,
                z.cols()
            )));
        }
        let r = self.retained;
        let mut out = Matrix::zeros(z.rows(), self.dim);
        for i in 0..z.rows() {
            let zi = z.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let p = &self.components[j * r..(j + 1) * r];
                let v: f64 = self.mean[j] + p.iter().zip(zi).map(|(p, &z)| p * f64::from(z)).sum::<f64>();
                *o = v as f32;
            }
        }
        Ok(out)
    }
}

/// One cross-validation fold. Index lists are sorted and pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train_idx: Vec<usize>,
    pub monitor_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn has_monitor(&self) -> bool {
        !self.monitor_idx.is_empty()
    }
}

/// Number of samples in each class `0..C`.
pub fn class_counts(labels: &[usize]) -> Vec<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; c];
    labels.iter().for_each(|&y| counts[y] += 1);
    counts
}

fn indices_by_class(labels: &[usize], subset: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for &i in subset {
        by_class[labels[i]].push(i);
    }
    by_class
}

/// Stratified K-fold split with `K = min(k_requested, smallest class count)`.
///
/// The returned plans carry no monitor split; see [`monitor_split`] and
/// [`plan_folds`].
pub fn stratified_kfold(labels: &[usize], k_requested: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    let counts = class_counts(labels);
    if counts.is_empty() {
        return Err(Error::Data("cannot split an empty label vector".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    let k = k_requested.min(*counts.iter().min().expect("non-empty"));
    if k < 2 {
        return Err(Error::Data(format!(
            "cross-validation needs at least 2 folds; smallest class has {} samples and {k_requested} folds were requested",
            counts.iter().min().expect("non-empty")
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut fold_of = vec![0usize; labels.len()];
    // Continuing the round robin across classes keeps total fold sizes within one.
    let mut offset = 0;
    for mut members in indices_by_class(labels, &all, counts.len()) {
        members.shuffle(&mut rng);
        for (i, idx) in members.iter().enumerate() {
            fold_of[*idx] = (offset + i) % k;
        }
        offset += members.len();
    }

    Ok((0..k)
        .map(|f| {
            let (test_idx, train_idx) = all.iter().partition(|&&i| fold_of[i] == f);
            FoldPlan {
                fold_index: f,
                train_idx,
                monitor_idx: Vec::new(),
                test_idx,
                seed,
            }
        })
        .collect())
}

/// Result of an inner monitor split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorSplit {
    pub inner_train: Vec<usize>,
    pub monitor: Vec<usize>,
}

/// Stratified split of `train_idx` that holds out `max(1, round(fraction * n_c))`
/// samples of every class. Returns `None` when some class has fewer than two
/// training samples, in which case no monitor split is possible.
pub fn monitor_split(
    train_idx: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Option<MonitorSplit> {
    if train_idx.is_empty() || !(fraction > 0.0 && fraction < 1.0) {
        return None;
    }
    let classes = train_idx.iter().map(|&i| labels[i]).max()? + 1;
    let by_class = indices_by_class(labels, train_idx, classes);
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|m| !m.is_empty()).collect();
    if present.iter().any(|m| m.len() < 2) {
        return None;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inner_train = Vec::new();
    let mut monitor = Vec::new();
    for members in present {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let n = members.len();
        let held = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        monitor.extend_from_slice(&members[..held]);
        inner_train.extend_from_slice(&members[held..]);
    }
    inner_train.sort_unstable();
    monitor.sort_unstable();
    Some(MonitorSplit {
        inner_train,
        monitor,
    })
}

/// Stratified folds with an inner monitor split carved out of every training part.
pub fn plan_folds(
    labels: &[usize],
    k_requested: usize,
    monitor_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    let mut plans = stratified_kfold(labels, k_requested, seed)?;
    for plan in &mut plans {
        let fold_seed = seed ^ (plan.fold_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if let Some(split) = monitor_split(&plan.train_idx, labels, monitor_fraction, fold_seed) {
            plan.train_idx = split.inner_train;
            plan.monitor_idx = split.monitor;
        }
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn standardizer_hand_example() {
        let x = Matrix::new(2, 1, vec![0.0, 2.0]).unwrap();
        let fit = StandardizerFit::fit(&x).unwrap();
        assert_eq!(fit.mu, vec![1.0]);
        assert_eq!(fit.sigma, vec![1.0]);
        let t = fit.transform(&Matrix::new(1, 1, vec![4.0]).unwrap()).unwrap();
        assert_eq!(t.as_slice(), &[3.0]);
    }

    #[test]
    fn standardized_training_columns_have_zero_mean_unit_std() {
        let x = random_matrix(40, 5, 1);
        let fit = StandardizerFit::fit(&x).unwrap();
        let t = fit.transform(&x).unwrap();
        let again = StandardizerFit::fit(&t).unwrap();
        for j in 0..5 {
            assert_abs_diff_eq!(again.mu[j], 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(again.sigma[j], 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = Matrix::new(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
        let fit = StandardizerFit::fit(&x).unwrap();
        assert_eq!(fit.sigma[0], SIGMA_FLOOR);
        let t = fit.transform(&x).unwrap();
        assert!(t.all_finite());
        assert!((0..3).all(|i| t.get(i, 0) == 0.0));
    }

    #[test]
    fn standardizer_needs_two_rows() {
        assert!(StandardizerFit::fit(&Matrix::new(1, 2, vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn pca_on_diagonal_line() {
        let x = Matrix::new(4, 2, vec![-2.0, -2.0, -1.0, -1.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let fit = PcaFit::fit(&x, PcaMode::Components(1)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = fit.component(0);
        assert_abs_diff_eq!(c[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], h, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.explained_variance_ratio[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn full_rank_pca_reconstructs_input() {
        let x = random_matrix(30, 6, 2);
        let fit = PcaFit::fit(&x, PcaMode::Components(6)).unwrap();
        let back = fit.reconstruct(&fit.project(&x).unwrap()).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn pca_components_are_orthonormal_and_sign_normalized() {
        let x = random_matrix(50, 10, 3);
        let fit = PcaFit::fit(&x, PcaMode::Components(10)).unwrap();
        for a in 0..10 {
            let ca = fit.component(a);
            let pivot = ca.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
            for b in 0..10 {
                let dot: f64 = ca.iter().zip(fit.component(b)).map(|(x, y)| x * y).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn explained_variance_matches_covariance_eigenvalues() {
        // Oracle: eigenvalues of the n-1 sample covariance, computed directly.
        let x = random_matrix(50, 10, 4);
        let fit = PcaFit::fit(&x, PcaMode::Components(10)).unwrap();
        let n = 50.0;
        let mean: Vec<f64> = (0..10)
            .map(|j| (0..50).map(|i| f64::from(x.get(i, j))).sum::<f64>() / n)
            .collect();
        let cov = DMatrix::from_fn(10, 10, |a, b| {
            (0..50)
                .map(|i| (f64::from(x.get(i, a)) - mean[a]) * (f64::from(x.get(i, b)) - mean[b]))
                .sum::<f64>()
                / (n - 1.0)
        });
        let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in fit.explained_variance.iter().zip(&eig) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let r = &fit.explained_variance_ratio;
        assert!(r.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn variance_mode_keeps_smallest_sufficient_prefix() {
        let x = random_matrix(60, 8, 5);
        let full = PcaFit::fit(&x, PcaMode::Components(8)).unwrap();
        let fit = PcaFit::fit(&x, PcaMode::Variance(0.95)).unwrap();
        let cum = |r: usize| full.explained_variance_ratio[..r].iter().sum::<f64>();
        assert!(cum(fit.retained) >= 0.95 - 1e-12);
        assert!(fit.retained == 1 || cum(fit.retained - 1) < 0.95);
    }

    #[test]
    fn too_many_components_is_a_config_error() {
        let x = random_matrix(5, 8, 6);
        assert!(matches!(
            PcaFit::fit(&x, PcaMode::Components(6)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fits_ignore_rows_outside_the_training_split() {
        let mut x = random_matrix(40, 4, 7);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let plan = &stratified_kfold(&labels, 5, 1).unwrap()[0];
        let fit = |x: &Matrix| {
            let train = x.select_rows(&plan.train_idx);
            let s = StandardizerFit::fit(&train).unwrap();
            let p = PcaFit::fit(&s.transform(&train).unwrap(), PcaMode::Components(3)).unwrap();
            (s, p)
        };
        let before = fit(&x);
        for &i in &plan.test_idx {
            x.row_mut(i).iter_mut().for_each(|v| *v = *v * 100.0 + 7.0);
        }
        assert_eq!(before, fit(&x));
    }

    #[test]
    fn balanced_kfold_puts_one_of_each_class_per_fold() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let plans = stratified_kfold(&labels, 5, 0).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            let mut test: Vec<usize> = p.test_idx.iter().map(|&i| labels[i]).collect();
            test.sort_unstable();
            assert_eq!(test, vec![0, 1]);
        }
    }

    #[test]
    fn fold_count_is_capped_by_smallest_class() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        assert_eq!(stratified_kfold(&labels, 5, 0).unwrap().len(), 3);
        assert!(stratified_kfold(&[0, 1, 1, 1], 5, 0).is_err());
        assert!(stratified_kfold(&[0, 0, 2, 2], 5, 0).is_err());
    }

    #[test]
    fn folds_partition_the_data_with_stratified_counts() {
        let labels: Vec<usize> = (0..103).map(|i| [0, 0, 1, 2, 2, 2, 1][i % 7]).collect();
        let plans = plan_folds(&labels, 5, 0.1, 42).unwrap();
        let counts = class_counts(&labels);
        let mut seen = vec![0; labels.len()];
        for p in &plans {
            for &i in &p.test_idx {
                seen[i] += 1;
            }
            let mut all: Vec<usize> = p
                .train_idx
                .iter()
                .chain(&p.monitor_idx)
                .chain(&p.test_idx)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let fold_counts = indices_by_class(&labels, &p.test_idx, 3);
            for (c, members) in fold_counts.iter().enumerate() {
                let ideal = counts[c] as f64 / plans.len() as f64;
                assert!((members.len() as f64 - ideal).abs() <= 1.0);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(plans, plan_folds(&labels, 5, 0.1, 42).unwrap());
        assert_ne!(plans, plan_folds(&labels, 5, 0.1, 43).unwrap());
    }

    #[test]
    fn monitor_split_holds_out_ten_percent_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let train: Vec<usize> = (0..100).collect();
        let split = monitor_split(&train, &labels, 0.1, 3).unwrap();
        assert_eq!(split.monitor.len(), 10);
        assert_eq!(split.inner_train.len(), 90);
        assert_eq!(split.monitor.iter().filter(|&&i| labels[i] == 0).count(), 5);
        assert_eq!(split, monitor_split(&train, &labels, 0.1, 3).unwrap());
    }

    #[test]
    fn monitor_split_is_skipped_for_singleton_class() {
        let labels = vec![0, 0, 0, 0, 1];
        assert!(monitor_split(&[0, 1, 2, 3, 4], &labels, 0.1, 0).is_none());
    }
}
