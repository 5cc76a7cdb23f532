//! Ranking metrics, a logistic-regression baseline, and stratified k-fold
//! cross-validation.
//!
//! AU-ROC is the Mann-Whitney statistic (concordance probability with half
//! credit for ties). AU-PRC is average precision with ties grouped at one
//! threshold.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emit::write_atomic;
use crate::error::{Error, Result};

/// Parallel scores and binary labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Data(
                "scores and labels must be equal-length and non-empty".into(),
            ));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("scores must be finite".into()));
        }
        if labels.iter().any(|l| *l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l == 1).count()
    }
}

/// Mann-Whitney AU-ROC: P(score_pos > score_neg) + 0.5 * P(tie), computed
/// through tie-averaged ranks.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    let n_neg = set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs at least one record of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Average precision: sum over positive-introducing thresholds of
/// (delta recall * precision), with tied scores grouped at one threshold.
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.n_positive();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "auprc needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        let mut group_fp = 0usize;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            if set.labels[order[j]] == 1 {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        fp += group_fp;
        if group_tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let delta_recall = group_tp as f64 / n_pos as f64;
            ap += precision * delta_recall;
        }
        i = j;
    }
    Ok(ap)
}

/// Gradient-descent hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub l2_lambda: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            l2_lambda: 0.0,
            lr: 0.1,
            max_iters: 2000,
            tol: 1e-8,
        }
    }
}

/// Default regularization grid swept by cross-validation.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.001, 0.01, 0.1, 1.0]
}

/// Trained model: weights over standardized features plus the
/// standardization statistics captured from the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub l2_lambda: f64,
    pub iterations: usize,
    pub final_loss: f64,
}

impl LogRegModel {
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let mut z = self.bias;
        for ((x, m), (s, w)) in row
            .iter()
            .zip(&self.feature_means)
            .zip(self.feature_stds.iter().zip(&self.weights))
        {
            z += w * (x - m) / s;
        }
        sigmoid(z)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict_proba(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-feature mean and population standard deviation; zero-variance
/// features get std 1 (their standardized column is all zeros, which pins
/// the corresponding weight at 0 under zero initialization).
pub fn standardize(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    let mut means = vec![0.0; dim];
    for row in rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut vars = vec![0.0; dim];
    for row in rows {
        for ((v, x), m) in vars.iter_mut().zip(row).zip(&means) {
            *v += (x - m) * (x - m);
        }
    }
    let stds = vars
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (means, stds)
}

/// L2-regularized mean log loss and its gradient at (weights, bias) over a
/// standardized matrix. Exposed so tests can check the analytic gradient
/// against finite differences.
pub fn logreg_loss_grad(
    x_std: &[Vec<f64>],
    y: &[u8],
    weights: &[f64],
    bias: f64,
    l2_lambda: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x_std.len() as f64;
    let dim = weights.len();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; dim];
    let mut grad_b = 0.0;
    for (row, &label) in x_std.iter().zip(y) {
        let z: f64 = bias + row.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>();
        let yf = f64::from(label);
        // Stable form of -y ln p - (1 - y) ln(1 - p).
        loss += z.max(0.0) - yf * z + (-z.abs()).exp().ln_1p();
        let residual = sigmoid(z) - yf;
        for (g, x) in grad_w.iter_mut().zip(row) {
            *g += residual * x;
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    for g in &mut grad_w {
        *g /= n;
    }
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>();
    loss += 0.5 * l2_lambda * penalty;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g += l2_lambda * w;
    }
    (loss, grad_w, grad_b)
}

/// Full-batch gradient descent on the regularized log loss, zero-initialized
/// and deterministic. The step is halved whenever it would increase the
/// loss, so the accepted loss sequence is non-increasing.
pub fn train_logreg(rows: &[Vec<f64>], y: &[u8], hyper: &Hyper) -> Result<LogRegModel> {
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::Data("feature matrix and labels must align".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Data("ragged feature matrix".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let n_pos = y.iter().filter(|l| **l == 1).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(Error::Data("training requires both classes".into()));
    }

    let (means, stds) = standardize(rows);
    let x_std: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(&means)
                .zip(&stds)
                .map(|((x, m), s)| (x - m) / s)
                .collect()
        })
        .collect();

    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut lr = hyper.lr;
    let (mut loss, mut grad_w, mut grad_b) =
        logreg_loss_grad(&x_std, y, &weights, bias, hyper.l2_lambda);
    let initial_loss = loss;
    let mut iterations = 0;

    'outer: for _ in 0..hyper.max_iters {
        loop {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - lr * g)
                .collect();
            let cand_b = bias - lr * grad_b;
            let (cand_loss, cand_gw, cand_gb) =
                logreg_loss_grad(&x_std, y, &cand_w, cand_b, hyper.l2_lambda);
            if cand_loss <= loss {
                let delta = loss - cand_loss;
                weights = cand_w;
                bias = cand_b;
                loss = cand_loss;
                grad_w = cand_gw;
                grad_b = cand_gb;
                iterations += 1;
                if delta < hyper.tol {
                    break 'outer;
                }
                break;
            }
            lr /= 2.0;
            if lr < 1e-15 {
                break 'outer;
            }
        }
    }

    debug_assert!(loss <= initial_loss);
    Ok(LogRegModel {
        weights,
        bias,
        feature_means: means,
        feature_stds: stds,
        l2_lambda: hyper.l2_lambda,
        iterations,
        final_loss: loss,
    })
}

/// Per-lambda cross-validation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvEntry {
    pub l2_lambda: f64,
    pub fold_aurocs: Vec<f64>,
    pub mean_auroc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub best: Hyper,
    pub entries: Vec<CvEntry>,
}

/// Stratified fold assignment: within each class, indices are shuffled with
/// the seed and dealt round-robin. Every fold must contain both classes.
pub fn stratified_folds(y: &[u8], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || y.len() < folds {
        return Err(Error::Config(format!(
            "need at least 2 folds and n >= folds (n = {}, folds = {folds})",
            y.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Vec::new(); folds];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        for (k, idx) in members.into_iter().enumerate() {
            assignment[k % folds].push(idx);
        }
    }
    for (k, fold) in assignment.iter_mut().enumerate() {
        fold.sort_unstable();
        let pos = fold.iter().filter(|&&i| y[i] == 1).count();
        if pos == 0 || pos == fold.len() {
            return Err(Error::Data(format!(
                "fold {k} lacks one of the classes; dataset too small or too imbalanced"
            )));
        }
    }
    Ok(assignment)
}

/// Sweeps the lambda grid with stratified k-fold cross-validation and picks
/// the lambda maximizing mean held-out AU-ROC (first grid entry wins ties).
/// Folds and grid points evaluate in parallel; the reduction order is fixed,
/// so results are independent of thread count.
pub fn cross_validate(
    rows: &[Vec<f64>],
    y: &[u8],
    folds: usize,
    lambda_grid: &[f64],
    base: &Hyper,
    seed: u64,
) -> Result<CvReport> {
    if lambda_grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let assignment = stratified_folds(y, folds, seed)?;

    let jobs: Vec<(usize, usize)> = (0..lambda_grid.len())
        .flat_map(|g| (0..folds).map(move |f| (g, f)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, f)| -> Result<f64> {
            let held_out = &assignment[f];
            let held: std::collections::HashSet<usize> = held_out.iter().copied().collect();
            let mut train_x = Vec::with_capacity(rows.len() - held_out.len());
            let mut train_y = Vec::with_capacity(rows.len() - held_out.len());
            for i in 0..rows.len() {
                if !held.contains(&i) {
                    train_x.push(rows[i].clone());
                    train_y.push(y[i]);
                }
            }
            let hyper = Hyper {
                l2_lambda: lambda_grid[g],
                ..base.clone()
            };
            let model = train_logreg(&train_x, &train_y, &hyper)?;
            let scores: Vec<f64> = held_out
                .iter()
                .map(|&i| model.predict_proba(&rows[i]))
                .collect();
            let labels: Vec<u8> = held_out.iter().map(|&i| y[i]).collect();
            auroc(&ScoredSet::new(scores, labels)?)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut entries = Vec::with_capacity(lambda_grid.len());
    for (g, &l2_lambda) in lambda_grid.iter().enumerate() {
        let fold_aurocs: Vec<f64> = (0..folds).map(|f| scores[g * folds + f]).collect();
        let mean_auroc = fold_aurocs.iter().sum::<f64>() / folds as f64;
        entries.push(CvEntry {
            l2_lambda,
            fold_aurocs,
            mean_auroc,
        });
    }
    let best_idx = entries
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.mean_auroc.total_cmp(&b.mean_auroc).then(ib.cmp(ia)) // earlier grid entry wins exact ties
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let best = Hyper {
        l2_lambda: lambda_grid[best_idx],
        ..base.clone()
    };
    Ok(CvReport { best, entries })
}

/// The JSON metrics block reported by both evaluation paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub n: usize,
    pub n_pos: usize,
}

pub fn metrics_report(set: &ScoredSet) -> Result<MetricsReport> {
    Ok(MetricsReport {
        auroc: auroc(set)?,
        auprc: auprc(set)?,
        n: set.len(),
        n_pos: set.n_positive(),
    })
}
