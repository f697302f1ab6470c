//! Synthetic classification data: an in-memory feature table with CSV
//! round trips, plus a shared-covariance Gaussian mixture that knows its
//! own optimal classifier, so learned models have an honest baseline to
//! be measured against.

use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

// ===================================================================
// dataset table
// ===================================================================

/// Feature matrix (one row per example) with 1-based class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, k: usize) -> Result<Dataset> {
        if k < 2 {
            return Err(Error::InvalidArity { min: 2, got: k });
        }
        if features.nrows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        for &y in &labels {
            Error::check_class(y, k)?;
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Dataset { features, labels, k })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }
    pub fn d(&self) -> usize {
        self.features.ncols()
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature vector of example `i` as an owned row.
    pub fn example(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().cloned().collect()
    }

    /// Fraction of `predictions` disagreeing with the stored labels.
    pub fn zero_one_risk(&self, predictions: &[usize]) -> Result<f64> {
        Error::check_len(predictions.len(), self.n())?;
        let wrong = predictions
            .iter()
            .zip(self.labels.iter())
            .filter(|(a, b)| a != b)
            .count();
        Ok(wrong as f64 / self.n() as f64)
    }

    /// Seeded shuffle, then a 50/50 split by position parity: even
    /// positions form the first half, odd the second. Deterministic in
    /// the seed and independent of how the data was generated.
    pub fn shuffle_split_by_parity(&self, seed: u64) -> (Dataset, Dataset) {
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let pick = |want_even: bool| -> Dataset {
            let rows: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(pos, _)| (pos % 2 == 0) == want_even)
                .map(|(_, &row)| row)
                .collect();
            let mut features = DMatrix::zeros(rows.len(), self.d());
            let mut labels = Vec::with_capacity(rows.len());
            for (out, &row) in rows.iter().enumerate() {
                features.set_row(out, &self.features.row(row));
                labels.push(self.labels[row]);
            }
            Dataset { features, labels, k: self.k }
        };
        (pick(true), pick(false))
    }

    /// Writes `x1,…,xd,label` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header: Vec<String> =
            (1..=self.d()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|x| x.to_string())
                .collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `x1,…,xd,label` table; the class count is the largest
    /// label present.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let headers = r.headers()?.clone();
        if headers.len() < 2 || headers.iter().last() != Some("label") {
            return Err(Error::InvalidDataset(
                "expected columns x1,…,xd,label".into(),
            ));
        }
        let d = headers.len() - 1;
        let mut rows: Vec<f64> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(Error::InvalidDataset(format!(
                    "row {} has {} fields, expected {}",
                    labels.len() + 2,
                    rec.len(),
                    d + 1
                )));
            }
            for j in 0..d {
                let x: f64 = rec[j].parse().map_err(|_| {
                    Error::InvalidDataset(format!("bad number '{}'", &rec[j]))
                })?;
                rows.push(x);
            }
            let y: usize = rec[d].parse().map_err(|_| {
                Error::InvalidDataset(format!("bad label '{}'", &rec[d]))
            })?;
            labels.push(y);
        }
        let n = labels.len();
        let k = labels.iter().copied().max().unwrap_or(0).max(2);
        let features = DMatrix::from_row_slice(n, d, &rows);
        Dataset::new(features, labels, k)
    }
}

// ===================================================================
// Gaussian mixture with a known optimal rule
// ===================================================================

/// `k` Gaussian classes sharing one covariance, mixed with the given
/// weights. Shared covariance keeps the optimal decision rule linear,
/// which is exactly what a linear model can hope to reach.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    means: Vec<DVector<f64>>,
    weights: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianMixture {
    pub fn new(
        means: Vec<Vec<f64>>,
        covariance: DMatrix<f64>,
        weights: Vec<f64>,
    ) -> Result<GaussianMixture> {
        let k = means.len();
        if k < 2 {
            return Err(Error::InvalidArity { min: 2, got: k });
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidDataset(
                "class means must share one nonzero dimension".into(),
            ));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::InvalidDataset(format!(
                "covariance is {}×{}, means live in R^{d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if weights.len() != k {
            return Err(Error::InvalidDataset(format!(
                "{k} classes but {} mixing weights",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidDataset(
                "mixing weights must be positive and finite".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let chol = Cholesky::new(covariance).ok_or_else(|| {
            Error::InvalidDataset(
                "covariance must be symmetric positive definite".into(),
            )
        })?;
        let means = means.into_iter().map(DVector::from_vec).collect();
        Ok(GaussianMixture { means, weights, chol })
    }

    /// Three equally likely classes in the plane, means at the corners
    /// of an equilateral triangle with side 2, unit covariance. Small
    /// enough to train in moments, overlapping enough that the optimal
    /// risk is visibly nonzero.
    pub fn triangle_demo() -> GaussianMixture {
        let h = 3.0_f64.sqrt();
        GaussianMixture::new(
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, h]],
            DMatrix::identity(2, 2),
            vec![1.0, 1.0, 1.0],
        )
        .expect("triangle mixture is well formed")
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }
    pub fn d(&self) -> usize {
        self.means[0].len()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn draw_label(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i + 1;
            }
        }
        self.k()
    }

    /// Draws `n` labelled points, deterministically in the seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let d = self.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = DMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let l = self.chol.l();
        for i in 0..n {
            let y = self.draw_label(&mut rng);
            let eps = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            let x = &self.means[y - 1] + &l * eps;
            for j in 0..d {
                features[(i, j)] = x[j];
            }
            labels.push(y);
        }
        Dataset::new(features, labels, self.k())
    }

    /// Class score `log w_y − ½·(x−μ_y)ᵀ Σ⁻¹ (x−μ_y)`; shared additive
    /// constants are dropped since only comparisons matter.
    pub fn log_score(&self, x: &[f64], y: usize) -> Result<f64> {
        Error::check_class(y, self.k())?;
        Error::check_len(x.len(), self.d())?;
        let diff = DVector::from_row_slice(x) - &self.means[y - 1];
        let solved = self.chol.solve(&diff);
        Ok(self.weights[y - 1].ln() - 0.5 * diff.dot(&solved))
    }

    /// The optimal prediction at `x`, lowest index on ties.
    pub fn bayes_predict(&self, x: &[f64]) -> Result<usize> {
        let mut best = 1;
        let mut best_score = self.log_score(x, 1)?;
        for y in 2..=self.k() {
            let s = self.log_score(x, y)?;
            if s > best_score {
                best = y;
                best_score = s;
            }
        }
        Ok(best)
    }

    /// Monte-Carlo estimate of the optimal misclassification rate:
    /// `(estimate, standard_error)` from `draws` fresh samples.
    pub fn bayes_risk_mc(&self, draws: usize, seed: u64) -> Result<(f64, f64)> {
        if draws == 0 {
            return Err(Error::InvalidDataset("need at least one draw".into()));
        }
        let data = self.sample(draws, seed)?;
        let mut wrong = 0usize;
        for i in 0..draws {
            let x = data.example(i);
            if self.bayes_predict(&x)? != data.labels()[i] {
                wrong += 1;
            }
        }
        let risk = wrong as f64 / draws as f64;
        let se = (risk * (1.0 - risk) / draws as f64).sqrt();
        Ok((risk, se))
    }
}

// ===================================================================
// tests
// ===================================================================
