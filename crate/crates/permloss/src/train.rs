//! Linear-model training against any smooth loss in the family, plus the
//! end-to-end mixture demo: sample, split, fit by full-batch descent, and
//! report the test error next to a Monte-Carlo estimate of the best
//! achievable error.
//!
//! Batch gradients are split into 64 fixed index chunks; worker threads
//! (capped by the `PERMLOSS_THREADS` environment variable) fill the
//! chunks, and the results are combined by a pairwise tree fold in a
//! fixed order — so the numbers are bit-identical whatever the thread
//! count.

use crate::dataset::{Dataset, GaussianMixture};
use crate::template::{PermLoss, Template};
use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

// ===================================================================
// linear model
// ===================================================================

/// Affine scorer `x ↦ Wᵀx + b` with `W` of shape `d×k`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    w: DMatrix<f64>,
    b: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(d: usize, k: usize) -> LinearModel {
        LinearModel {
            w: DMatrix::zeros(d, k),
            b: vec![0.0; k],
        }
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }
    pub fn k(&self) -> usize {
        self.w.ncols()
    }
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.d(), self.k());
        let mut s = self.b.clone();
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..d {
                acc += self.w[(i, j)] * x[i];
            }
            s[j] += acc;
        }
        s
    }

    /// Argmax of the scores, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 1;
        for j in 2..=self.k() {
            if s[j - 1] > s[best - 1] {
                best = j;
            }
        }
        best
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Vec<usize> {
        (0..data.n()).map(|i| self.predict(&data.example(i))).collect()
    }

    /// Adds `c` to every class bias. Scores shift uniformly, so
    /// predictions — and any relative-margin loss — are unchanged.
    pub fn shift_bias(&mut self, c: f64) {
        for bj in &mut self.b {
            *bj += c;
        }
    }
}

// ===================================================================
// deterministic chunked reduction
// ===================================================================

const CHUNKS: usize = 64;

fn thread_count() -> usize {
    let requested = std::env::var("PERMLOSS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    requested
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
        .min(CHUNKS)
}

/// Runs `f` over the 64 fixed index chunks of `0..n` using at most
/// `threads` workers, returning the per-chunk outputs in chunk order.
/// The chunk boundaries depend only on `n`, never on the thread count.
fn chunked<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let bounds: Vec<(usize, usize)> = (0..CHUNKS)
        .map(|c| (n * c / CHUNKS, n * (c + 1) / CHUNKS))
        .collect();
    let mut results: Vec<Option<T>> = (0..CHUNKS).map(|_| None).collect();
    let threads = threads.clamp(1, CHUNKS);
    std::thread::scope(|s| {
        let mut rest: &mut [Option<T>] = &mut results;
        let mut start = 0usize;
        for t in 0..threads {
            let end = CHUNKS * (t + 1) / threads;
            if end == start {
                continue;
            }
            let (mine, tail) = rest.split_at_mut(end - start);
            rest = tail;
            let bounds = &bounds;
            let f = &f;
            let base = start;
            s.spawn(move || {
                for (off, slot) in mine.iter_mut().enumerate() {
                    let (lo, hi) = bounds[base + off];
                    *slot = Some(f(lo..hi));
                }
            });
            start = end;
        }
    });
    results
        .into_iter()
        .map(|o| o.expect("every chunk is assigned to a worker"))
        .collect()
}

/// Pairwise tree fold in fixed order; the result is independent of how
/// the leaves were produced.
fn tree_fold<T>(mut layer: Vec<T>, combine: impl Fn(T, T) -> T) -> Option<T> {
    while layer.len() > 1 {
        let mut next = Vec::with_capacity(layer.len().div_ceil(2));
        let mut it = layer.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        layer = next;
    }
    layer.into_iter().next()
}

struct BatchGrad {
    gw: DMatrix<f64>,
    gb: Vec<f64>,
    loss_sum: f64,
}

/// Mean loss and its gradient in `(W, b)` over the whole dataset. The
/// per-example score gradient is pulled back through the affine map:
/// `∇W` accumulates the outer products `x gᵀ` and `∇b` the raw `g`.
pub(crate) fn batch_grad(
    loss: &PermLoss,
    data: &Dataset,
    model: &LinearModel,
    threads: usize,
) -> Result<(DMatrix<f64>, Vec<f64>, f64)> {
    let (n, d, k) = (data.n(), data.d(), loss.k());
    let parts = chunked(n, threads, |range| -> Result<BatchGrad> {
        let mut gw = DMatrix::zeros(d, k);
        let mut gb = vec![0.0; k];
        let mut loss_sum = 0.0;
        for i in range {
            let x = data.example(i);
            let y = data.labels()[i];
            let v = model.scores(&x);
            loss_sum += loss.eval(y, &v)?;
            let g = loss.grad_v(y, &v)?;
            for j in 0..k {
                let gj = g[j];
                gb[j] += gj;
                for r in 0..d {
                    gw[(r, j)] += x[r] * gj;
                }
            }
        }
        Ok(BatchGrad { gw, gb, loss_sum })
    });

    let mut oks = Vec::with_capacity(parts.len());
    for p in parts {
        oks.push(p?);
    }
    let total = tree_fold(oks, |mut a, b| {
        a.gw += b.gw;
        for (x, y) in a.gb.iter_mut().zip(b.gb.iter()) {
            *x += y;
        }
        a.loss_sum += b.loss_sum;
        a
    })
    .expect("at least one chunk");

    let scale = 1.0 / n as f64;
    Ok((
        total.gw * scale,
        total.gb.iter().map(|g| g * scale).collect(),
        total.loss_sum * scale,
    ))
}

/// Mean loss of the model over the dataset, chunked the same way.
pub fn mean_loss(
    loss: &PermLoss,
    data: &Dataset,
    model: &LinearModel,
) -> Result<f64> {
    mean_loss_threaded(loss, data, model, thread_count())
}

fn mean_loss_threaded(
    loss: &PermLoss,
    data: &Dataset,
    model: &LinearModel,
    threads: usize,
) -> Result<f64> {
    let n = data.n();
    let parts = chunked(n, threads, |range| -> Result<f64> {
        let mut sum = 0.0;
        for i in range {
            let v = model.scores(&data.example(i));
            sum += loss.eval(data.labels()[i], &v)?;
        }
        Ok(sum)
    });
    let mut oks = Vec::with_capacity(parts.len());
    for p in parts {
        oks.push(p?);
    }
    let total = tree_fold(oks, |a, b| a + b).expect("at least one chunk");
    Ok(total / n as f64)
}

// ===================================================================
// full-batch descent
// ===================================================================

#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial step; the line search adapts it both ways afterwards.
    pub step: f64,
    pub seed: u64,
    /// Stop when the objective improves by less than this, relatively.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, step: 1.0, seed: 0, tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: LinearModel,
    /// Objective after the initial point and each accepted epoch;
    /// non-increasing by construction of the line search.
    pub trajectory: Vec<f64>,
}

/// Fits a linear model by full-batch gradient descent with a
/// backtracking line search. The objective is the mean loss; a step is
/// accepted only on sufficient decrease, so the recorded trajectory
/// never rises. A line search that collapses to nothing reports the
/// objective as diverging.
pub fn train_erm(
    loss: &PermLoss,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    Error::check_len(loss.k(), data.k())?;
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::SolverFailure(format!(
            "initial step must be positive, got {}",
            cfg.step
        )));
    }
    let threads = thread_count();
    let mut model = LinearModel::zeros(data.d(), data.k());
    let mut step = cfg.step;
    let mut trajectory = Vec::with_capacity(cfg.epochs + 1);

    let (mut gw, mut gb, mut f_cur) = batch_grad(loss, data, &model, threads)?;
    trajectory.push(f_cur);

    for _ in 0..cfg.epochs {
        let gg: f64 = gw.iter().map(|g| g * g).sum::<f64>()
            + gb.iter().map(|g| g * g).sum::<f64>();
        if gg.sqrt() <= 1e-12 * (1.0 + f_cur.abs()) {
            break;
        }

        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = model.clone();
            trial.w -= &gw * step;
            for (bj, gj) in trial.b.iter_mut().zip(gb.iter()) {
                *bj -= step * gj;
            }
            match mean_loss_threaded(loss, data, &trial, threads) {
                Ok(f_trial)
                    if f_trial.is_finite()
                        && f_trial <= f_cur - 1e-4 * step * gg =>
                {
                    let improved = f_cur - f_trial;
                    model = trial;
                    f_cur = f_trial;
                    trajectory.push(f_cur);
                    step = (step * 1.2).min(64.0);
                    accepted = true;
                    if improved <= cfg.tol * (1.0 + f_cur.abs()) {
                        return Ok(TrainedModel { model, trajectory });
                    }
                    break;
                }
                _ => {
                    step *= 0.5;
                    if step < 1e-16 {
                        return Err(Error::SolverFailure(
                            "line search collapsed; the objective does not \
                             admit a descent step from here"
                                .into(),
                        ));
                    }
                }
            }
        }
        if !accepted {
            return Err(Error::SolverFailure(
                "no acceptable step found within the backtracking budget".into(),
            ));
        }
        let (ngw, ngb, nf) = batch_grad(loss, data, &model, threads)?;
        gw = ngw;
        gb = ngb;
        f_cur = nf;
    }

    Ok(TrainedModel { model, trajectory })
}

// ===================================================================
// end-to-end mixture demo
// ===================================================================

/// Everything the demo measured, ready for JSON.
#[derive(Clone, Debug, Serialize)]
pub struct RiskReport {
    pub loss: String,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    pub trajectory: Vec<f64>,
    pub final_objective: f64,
    pub train_01: f64,
    pub test_01: f64,
    pub bayes_estimate: f64,
    pub bayes_se: f64,
    pub bayes_draws: usize,
    /// `test_01 − bayes_estimate`: how far the learned rule sits above
    /// the best possible one.
    pub gap: f64,
    pub seed: u64,
}

/// Samples `2·n_per_split` points from the triangular three-class
/// mixture, splits them evenly, trains on one half, and scores the
/// other against a fresh Monte-Carlo estimate of the optimal risk.
/// Deterministic in `seed`, end to end.
pub fn train_demo(
    t: &Template,
    n_per_split: usize,
    seed: u64,
    epochs: usize,
) -> Result<RiskReport> {
    let mix = GaussianMixture::triangle_demo();
    Error::check_len(t.arity(), mix.k())?;
    if n_per_split == 0 {
        return Err(Error::InvalidDataset("need at least one example".into()));
    }
    let data = mix.sample(2 * n_per_split, seed)?;
    let (train, test) = data.shuffle_split_by_parity(seed ^ 0x517f);

    let loss = PermLoss::new(t.clone())?;
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let trained = train_erm(&loss, &train, &cfg)?;

    let train_01 = train.zero_one_risk(&trained.model.predict_dataset(&train))?;
    let test_01 = test.zero_one_risk(&trained.model.predict_dataset(&test))?;
    let bayes_draws = 100_000;
    let (bayes_estimate, bayes_se) = mix.bayes_risk_mc(bayes_draws, seed ^ 0xb0b)?;

    Ok(RiskReport {
        loss: t.name(),
        n_train: train.n(),
        n_test: test.n(),
        epochs_run: trained.trajectory.len() - 1,
        final_objective: *trained
            .trajectory
            .last()
            .expect("trajectory holds at least the initial objective"),
        trajectory: trained.trajectory,
        train_01,
        test_01,
        bayes_estimate,
        bayes_se,
        bayes_draws,
        gap: test_01 - bayes_estimate,
        seed,
    })
}

// ===================================================================
// tests
// ===================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        GaussianMixture::triangle_demo().sample(n, seed).unwrap()
    }

    #[test]
    fn predict_breaks_ties_toward_the_lowest_index() {
        let model = LinearModel::zeros(2, 3);
        assert_eq!(
            model.predict(&[1.0, -2.0]),
            1,
            "all-zero scores tie; label 1 must win"
        );
    }

    #[test]
    fn scores_are_affine_in_the_features() {
        let mut model = LinearModel::zeros(2, 3);
        model.w[(0, 1)] = 2.0;
        model.w[(1, 2)] = -1.0;
        model.b[0] = 0.5;
        let s = model.scores(&[3.0, 4.0]);
        assert_eq!(s, vec![0.5, 6.0, -4.0]);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let loss = PermLoss::new(Template::cross_entropy(3).unwrap()).unwrap();
        let data = toy_data(20, 4);
        let mut model = LinearModel::zeros(2, 3);
        // A non-trivial point so no gradient entry is accidentally zero.
        model.w[(0, 0)] = 0.3;
        model.w[(1, 1)] = -0.4;
        model.w[(0, 2)] = 0.1;
        model.b = vec![0.05, -0.1, 0.2];

        let (gw, gb, _) = batch_grad(&loss, &data, &model, 2).unwrap();
        let h = 1e-5;
        for r in 0..2 {
            for j in 0..3 {
                let mut up = model.clone();
                up.w[(r, j)] += h;
                let mut dn = model.clone();
                dn.w[(r, j)] -= h;
                let fd = (mean_loss(&loss, &data, &up).unwrap()
                    - mean_loss(&loss, &data, &dn).unwrap())
                    / (2.0 * h);
                assert!(
                    (gw[(r, j)] - fd).abs() <= 1e-6,
                    "W[{r},{j}]: analytic {} vs fd {fd}",
                    gw[(r, j)]
                );
            }
        }
        for j in 0..3 {
            let mut up = model.clone();
            up.b[j] += h;
            let mut dn = model.clone();
            dn.b[j] -= h;
            let fd = (mean_loss(&loss, &data, &up).unwrap()
                - mean_loss(&loss, &data, &dn).unwrap())
                / (2.0 * h);
            assert!(
                (gb[j] - fd).abs() <= 1e-6,
                "b[{j}]: analytic {} vs fd {fd}",
                gb[j]
            );
        }
    }

    #[test]
    fn chunked_reduction_is_thread_count_invariant() {
        let loss = PermLoss::new(Template::exponential(3).unwrap()).unwrap();
        let data = toy_data(333, 8);
        let mut model = LinearModel::zeros(2, 3);
        model.w[(0, 0)] = 0.2;
        model.b[1] = -0.3;
        let (gw1, gb1, f1) = batch_grad(&loss, &data, &model, 1).unwrap();
        let (gw4, gb4, f4) = batch_grad(&loss, &data, &model, 4).unwrap();
        let (gw64, gb64, f64_) = batch_grad(&loss, &data, &model, 64).unwrap();
        assert_eq!(f1.to_bits(), f4.to_bits(), "objective must be bit-identical");
        assert_eq!(f1.to_bits(), f64_.to_bits());
        assert_eq!(gb1, gb4);
        assert_eq!(gb1, gb64);
        assert_eq!(gw1, gw4);
        assert_eq!(gw1, gw64);
    }

    #[test]
    fn training_objective_never_rises() {
        let loss = PermLoss::new(Template::cross_entropy(3).unwrap()).unwrap();
        let data = toy_data(300, 12);
        let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
        let out = train_erm(&loss, &data, &cfg).unwrap();
        assert!(out.trajectory.len() >= 2, "should take at least one step");
        for w in out.trajectory.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-15,
                "objective rose from {} to {}",
                w[0],
                w[1]
            );
        }
        // Should have improved substantially on the zero model, whose
        // mean loss is exactly log 3.
        let start = out.trajectory[0];
        assert!((start - 3.0f64.ln()).abs() <= 1e-12);
        assert!(out.trajectory.last().unwrap() < &(0.9 * start));
    }

    #[test]
    fn bias_translation_changes_neither_predictions_nor_objective() {
        let loss = PermLoss::new(Template::cross_entropy(3).unwrap()).unwrap();
        let data = toy_data(200, 15);
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let out = train_erm(&loss, &data, &cfg).unwrap();

        let before = out.model.predict_dataset(&data);
        let obj_before = mean_loss(&loss, &data, &out.model).unwrap();
        let mut shifted = out.model.clone();
        shifted.shift_bias(37.5);
        let after = shifted.predict_dataset(&data);
        let obj_after = mean_loss(&loss, &data, &shifted).unwrap();

        assert_eq!(before, after, "uniform bias shifts must not move predictions");
        assert!(
            (obj_before - obj_after).abs() <= 1e-9,
            "relative-margin objective should ignore uniform score shifts: {obj_before} vs {obj_after}"
        );
    }

    #[test]
    fn non_smooth_losses_are_rejected_up_front() {
        let loss = PermLoss::new(Template::ww_hinge(3).unwrap()).unwrap();
        let data = toy_data(50, 2);
        let err = train_erm(&loss, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonSmooth(_)), "got {err:?}");
    }

    #[test]
    fn small_demo_run_approaches_the_optimal_risk() {
        let t = Template::cross_entropy(3).unwrap();
        let rep = train_demo(&t, 500, 31, 80).unwrap();
        assert_eq!(rep.n_train, 500);
        assert_eq!(rep.n_test, 500);
        assert!(
            rep.test_01 <= rep.bayes_estimate + 0.06,
            "test risk {} should sit near the optimum {}",
            rep.test_01,
            rep.bayes_estimate
        );
        assert!(rep.train_01 < 0.5, "training risk should beat guessing");
        assert!(rep.bayes_se < 2e-3);
    }

    #[test]
    fn demo_is_deterministic_in_the_seed() {
        let t = Template::exponential(3).unwrap();
        let a = train_demo(&t, 150, 9, 25).unwrap();
        let b = train_demo(&t, 150, 9, 25).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap(),
            "same seed must reproduce the identical report"
        );
    }

    #[test]
    fn demo_rejects_mismatched_class_counts() {
        let t = Template::cross_entropy(4).unwrap();
        let err = train_demo(&t, 100, 1, 10).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }), "got {err:?}");
    }
}
