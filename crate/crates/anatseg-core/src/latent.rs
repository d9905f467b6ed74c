//! Gaussian mixture modelling of the autoencoder latent space: EM fitting
//! with an eigenvalue floor, effective-rank adjusted AIC model selection,
//! rejection-sampled banks of anatomically valid latent vectors, and the
//! nearest-neighbor projection that repairs masks.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anatomy::{delta, AnatomyConfig};
use crate::autoencoder::{AeModel, LatentVec};
use crate::linalg;
use crate::stack::BinaryMask;
use crate::synth::split_seed;
use crate::{Error, Result};

/// Default eigenvalue floor added to every fitted covariance.
pub const DEFAULT_REG: f64 = 1e-6;
/// Default number of interpolation steps in the repair projection.
pub const DEFAULT_ALPHA_STEPS: usize = 32;
/// Default target size of a sampled latent bank.
pub const DEFAULT_BANK_SIZE: usize = 10_000;
/// EM iteration cap used by [`select_model`] and the CLI.
pub const EM_MAX_ITER: usize = 200;
/// EM convergence threshold on the NLL improvement.
pub const EM_TOL: f64 = 1e-7;

/// A full-covariance Gaussian mixture over d-dimensional latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major `d*d` covariance per component; symmetric, eigenvalues at
    /// or above the regularization floor used during fitting.
    covariances: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn new(
        d: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<GmmModel> {
        let k = weights.len();
        if k == 0 || d == 0 {
            return Err(Error::Input("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::Input("weights, means and covariances disagree on k".into()));
        }
        let wsum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (wsum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("weights must be non-negative and sum to 1, sum {wsum}")));
        }
        for (mu, cov) in means.iter().zip(&covariances) {
            if mu.len() != d || cov.len() != d * d {
                return Err(Error::Input("component dimension mismatch".into()));
            }
            if mu.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Input("non-finite mixture parameter".into()));
            }
            for i in 0..d {
                for j in 0..i {
                    if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-9 {
                        return Err(Error::Input("covariance not symmetric".into()));
                    }
                }
            }
        }
        Ok(GmmModel { d, weights, means, covariances })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    fn cholesky_factors(&self) -> Result<Vec<Vec<f64>>> {
        self.covariances
            .iter()
            .map(|cov| {
                linalg::cholesky(cov, self.d)
                    .ok_or_else(|| Error::Numerical("covariance lost positive definiteness".into()))
            })
            .collect()
    }

    /// Draws one latent vector from the mixture.
    fn sample(&self, chol: &[Vec<f64>], rng: &mut ChaCha12Rng) -> LatentVec {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = self.k() - 1;
        for (j, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = j;
                break;
            }
        }
        let eps: Vec<f64> = (0..self.d).map(|_| rng.sample(StandardNormal)).collect();
        let l = &chol[comp];
        (0..self.d)
            .map(|i| {
                let mut v = self.means[comp][i];
                for j in 0..=i {
                    v += l[i * self.d + j] * eps[j];
                }
                v
            })
            .collect()
    }
}

/// Result of [`fit_gmm_em`]: the model plus the NLL trajectory (the first
/// entry is the NLL of the initialization, later entries follow each EM
/// iteration; EM guarantees the sequence is non-increasing).
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub final_nll: f64,
    pub nll_history: Vec<f64>,
    pub iterations: usize,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let first = points.first().ok_or_else(|| Error::Input("no points".into()))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Input("points must have dimension >= 1".into()));
    }
    for p in points {
        if p.len() != d {
            return Err(Error::Input("points disagree on dimension".into()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite point".into()));
        }
    }
    Ok(d)
}

/// Joint log-probabilities `ln w_j + ln N(x_i; mu_j, Sigma_j)` as an n*k
/// row-major matrix, plus the total NLL via log-sum-exp.
fn log_prob_matrix(model: &GmmModel, points: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let (d, k) = (model.d, model.k());
    let chol = model.cholesky_factors()?;
    let log_norms: Vec<f64> = chol
        .iter()
        .map(|l| {
            -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln()
                + linalg::log_det_from_cholesky(l, d))
        })
        .collect();
    let log_w: Vec<f64> = model.weights.iter().map(|&w| w.max(1e-300).ln()).collect();
    let mut logp = vec![0.0; points.len() * k];
    let mut nll = 0.0;
    let mut diff = vec![0.0; d];
    for (i, x) in points.iter().enumerate() {
        for j in 0..k {
            for (t, v) in diff.iter_mut().enumerate() {
                *v = x[t] - model.means[j][t];
            }
            let m2 = linalg::mahalanobis_sq(&chol[j], d, &diff);
            logp[i * k + j] = log_w[j] + log_norms[j] - 0.5 * m2;
        }
        let row = &logp[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        nll -= lse;
    }
    Ok((logp, nll))
}

/// Negative log-likelihood of the points under the mixture, computed with
/// log-sum-exp for stability.
pub fn gmm_nll(model: &GmmModel, points: &[Vec<f64>]) -> Result<f64> {
    let d = check_points(points)?;
    if d != model.d {
        return Err(Error::Input(format!(
            "points have dimension {d} but the model expects {}",
            model.d
        )));
    }
    log_prob_matrix(model, points).map(|(_, nll)| nll)
}

/// Clamps the eigenvalues of a symmetric matrix at `reg`. When no
/// eigenvalue falls below the floor the matrix is returned bit-identical,
/// so closed-form M-step results survive exactly.
fn floor_eigenvalues(cov: Vec<f64>, d: usize, reg: f64) -> Vec<f64> {
    let (vals, vecs) = linalg::jacobi_eigen(&cov, d);
    if vals.iter().all(|&v| v >= reg) {
        return cov;
    }
    let clamped: Vec<f64> = vals.iter().map(|&v| v.max(reg)).collect();
    linalg::reconstruct_from_eigen(&clamped, &vecs, d)
}

/// Seeded k-means++ centers followed by Lloyd iterations; returns the
/// per-point hard assignment.
fn kmeans_assign(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let d = points[0].len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq(p, centers.last().expect("non-empty")));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq(p, &centers[a]).total_cmp(&sq(p, &centers[b])))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue; // keep the previous center
            }
            for t in 0..d {
                center[t] = members.iter().map(|p| p[t]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

/// Weighted mean and covariance M-step for one component. Sums run in
/// point-index order so results are reproducible bit for bit.
fn weighted_moments(
    points: &[Vec<f64>],
    resp: impl Fn(usize) -> f64,
    d: usize,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let n_j: f64 = (0..points.len()).map(&resp).sum();
    if n_j < 1e-10 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp(i);
        for t in 0..d {
            mean[t] += r * p[t];
        }
    }
    for m in &mut mean {
        *m /= n_j;
    }
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp(i);
        for t in 0..d {
            diff[t] = p[t] - mean[t];
        }
        for a in 0..d {
            for b in 0..=a {
                cov[a * d + b] += r * diff[a] * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            cov[a * d + b] /= n_j;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    Some((n_j, mean, cov))
}

/// Fits a k-component full-covariance mixture with EM from a seeded
/// k-means++ initialization. Covariance eigenvalues are floored at `reg`
/// after every M-step. Stops when the NLL improves by less than `tol` or
/// after `max_iter` iterations.
pub fn fit_gmm_em(
    points: &[Vec<f64>],
    k: usize,
    reg: f64,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GmmFit> {
    let d = check_points(points)?;
    let n = points.len();
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::Input(format!("need more points ({n}) than components ({k})")));
    }
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::Parameter(format!("regularization floor must be positive, got {reg}")));
    }
    if max_iter == 0 || !(tol >= 0.0) {
        return Err(Error::Parameter("max_iter must be >= 1 and tol >= 0".into()));
    }

    // Moment initialization from hard k-means++ clusters.
    let assign = kmeans_assign(points, k, split_seed(seed, 0));
    let global = weighted_moments(points, |_| 1.0, d).expect("n >= 1");
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        match weighted_moments(points, |i| if assign[i] == c { 1.0 } else { 0.0 }, d) {
            Some((n_c, mean, cov)) => {
                weights.push(n_c / n as f64);
                means.push(mean);
                covariances.push(floor_eigenvalues(cov, d, reg));
            }
            None => {
                // Empty cluster: fall back to the global moments.
                weights.push(1.0 / n as f64);
                means.push(global.1.clone());
                covariances.push(floor_eigenvalues(global.2.clone(), d, reg));
            }
        }
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);
    let mut model = GmmModel { d, weights, means, covariances };

    let (mut logp, mut nll) = log_prob_matrix(&model, points)?;
    if !nll.is_finite() {
        return Err(Error::Numerical(format!("initial NLL is {nll}")));
    }
    let mut history = vec![nll];
    let mut iterations = 0;
    for _ in 0..max_iter {
        // E-step: responsibilities from the cached joint log-probabilities.
        let mut resp = vec![0.0; n * k];
        for i in 0..n {
            let row = &logp[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                resp[i * k + j] = (row[j] - max).exp() / denom;
            }
        }
        // M-step.
        for j in 0..k {
            if let Some((n_j, mean, cov)) = weighted_moments(points, |i| resp[i * k + j], d) {
                model.weights[j] = n_j / n as f64;
                model.means[j] = mean;
                model.covariances[j] = floor_eigenvalues(cov, d, reg);
            } else {
                model.weights[j] = 1e-12;
            }
        }
        let wsum: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= wsum);

        let (new_logp, new_nll) = log_prob_matrix(&model, points)?;
        if !new_nll.is_finite() {
            return Err(Error::Numerical(format!(
                "NLL became {new_nll} at EM iteration {iterations}"
            )));
        }
        logp = new_logp;
        iterations += 1;
        history.push(new_nll);
        let improvement = nll - new_nll;
        nll = new_nll;
        if improvement < tol {
            break;
        }
    }
    Ok(GmmFit { model, final_nll: nll, nll_history: history, iterations })
}

/// Effective rank `Tr(S) / sigma_max(S)` of a symmetric positive-definite
/// matrix, with the spectral norm from power iteration (tolerance 1e-10).
/// Always lies in `[1, d]`, reaching `d` exactly when all eigenvalues are
/// equal.
pub fn effective_rank(cov: &[f64], d: usize) -> Result<f64> {
    if d == 0 || cov.len() != d * d {
        return Err(Error::Input(format!("expected a {d}x{d} matrix, got {} entries", cov.len())));
    }
    let scale = cov.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for i in 0..d {
        for j in 0..i {
            if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-9 * scale {
                return Err(Error::Input("matrix is not symmetric".into()));
            }
        }
    }
    if linalg::cholesky(cov, d).is_none() {
        return Err(Error::Input("matrix is not positive definite".into()));
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let sigma_max = linalg::spectral_norm_spd(cov, d, 1e-10);
    Ok(trace / sigma_max)
}

/// The effective-rank adjusted parameter count
/// `P_adj = sum_j (r_j/d) * (d + d(d+1)/2) + (k - 1)`.
pub fn adjusted_param_count(model: &GmmModel) -> Result<f64> {
    let d = model.d as f64;
    let per_component = d + d * (d + 1.0) / 2.0;
    let mut p = (model.k() - 1) as f64;
    for cov in &model.covariances {
        let r = effective_rank(cov, model.d)?;
        p += r / d * per_component;
    }
    Ok(p)
}

/// The adjusted information criterion `AIC' = 2 P_adj + 2 NLL(points)`.
/// Full-rank components pay the full per-component parameter price; low
/// effective rank shrinks the penalty proportionally.
pub fn adjusted_aic(model: &GmmModel, points: &[Vec<f64>]) -> Result<f64> {
    Ok(2.0 * adjusted_param_count(model)? + 2.0 * gmm_nll(model, points)?)
}

/// One row of the model-selection table: the candidate k with its held-out
/// score per fold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub fold_nll: Vec<f64>,
    pub fold_aic: Vec<f64>,
    pub mean_nll: f64,
    pub mean_aic: f64,
}

/// Output of [`select_model`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_k: usize,
    pub folds: usize,
    pub rows: Vec<SelectionRow>,
}

/// K-fold cross-validated model selection. Points are shuffled once by
/// seed, folds are taken strided, and for every candidate k a mixture is
/// fitted on each training split and scored on the held-out split by NLL
/// and adjusted AIC. The chosen k minimizes the mean adjusted AIC; ties go to
/// the smaller k.
pub fn select_model(
    points: &[Vec<f64>],
    ks: &[usize],
    folds: usize,
    reg: f64,
    seed: u64,
) -> Result<SelectionResult> {
    check_points(points)?;
    let n = points.len();
    if ks.is_empty() {
        return Err(Error::Parameter("empty candidate list".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::Input(format!("cannot split {n} points into {folds} folds")));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let min_train = n - n.div_ceil(folds);
    if min_train <= k_max {
        return Err(Error::Input(format!(
            "training folds of {min_train} points cannot fit k={k_max} components"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 0xF01D));
        order.shuffle(&mut rng);
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut fold_nll = Vec::with_capacity(folds);
        let mut fold_aic = Vec::with_capacity(folds);
        for fold in 0..folds {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for (pos, &idx) in order.iter().enumerate() {
                if pos % folds == fold {
                    held.push(points[idx].clone());
                } else {
                    train.push(points[idx].clone());
                }
            }
            let fit = fit_gmm_em(
                &train,
                k,
                reg,
                split_seed(seed, 1 + (k * folds + fold) as u64),
                EM_MAX_ITER,
                EM_TOL,
            )?;
            fold_nll.push(gmm_nll(&fit.model, &held)?);
            fold_aic.push(adjusted_aic(&fit.model, &held)?);
        }
        let mean_nll = fold_nll.iter().sum::<f64>() / folds as f64;
        let mean_aic = fold_aic.iter().sum::<f64>() / folds as f64;
        rows.push(SelectionRow { k, fold_nll, fold_aic, mean_nll, mean_aic });
    }
    let mut chosen_k = rows[0].k;
    let mut best = rows[0].mean_aic;
    for row in &rows[1..] {
        if row.mean_aic < best {
            best = row.mean_aic;
            chosen_k = row.k;
        }
    }
    Ok(SelectionResult { chosen_k, folds, rows })
}

/// Where a bank vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sampled,
    Training,
}

/// A bank of latent vectors, each certified to decode to an anatomically
/// valid mask under the model it was built with.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank {
    d: usize,
    vectors: Vec<LatentVec>,
    provenance: Vec<Provenance>,
    acceptance_rate: f64,
}

impl LatentBank {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[LatentVec] {
        &self.vectors
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Fraction of sampling trials that passed the validity check while
    /// building this bank (1.0 when no sampling was needed).
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_rate
    }

    /// Index and squared distance of the bank vector closest to `z`, by
    /// exhaustive scan; ties resolve to the smallest index.
    pub fn nearest(&self, z: &[f64]) -> Result<(usize, f64)> {
        if self.vectors.is_empty() {
            return Err(Error::Input("empty latent bank".into()));
        }
        if z.len() != self.d {
            return Err(Error::Input(format!(
                "query has dimension {} but the bank stores {}",
                z.len(),
                self.d
            )));
        }
        let mut best = (0usize, f64::INFINITY);
        for (i, v) in self.vectors.iter().enumerate() {
            let dist: f64 = v.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        Ok(best)
    }
}

/// Builds a latent bank: training-set encodings whose decodings pass the
/// validity predicate are inserted first, then vectors are rejection-sampled
/// from the mixture until `n_target` sampled vectors are accepted. Exceeding
/// `max_trials` before that aborts with a sampling-exhausted error carrying
/// the partial bank.
pub fn build_latent_bank(
    model: &GmmModel,
    ae: &AeModel,
    cfg: &AnatomyConfig,
    training_latents: &[LatentVec],
    n_target: usize,
    max_trials: u64,
    seed: u64,
) -> Result<LatentBank> {
    cfg.validate()?;
    if model.d != ae.latent_dim() {
        return Err(Error::Input(format!(
            "mixture dimension {} does not match the autoencoder latent dimension {}",
            model.d,
            ae.latent_dim()
        )));
    }
    let mut vectors = Vec::new();
    let mut provenance = Vec::new();
    for z in training_latents {
        let (_, mask) = ae.decode(z)?;
        if delta(&mask, cfg).passed {
            vectors.push(z.clone());
            provenance.push(Provenance::Training);
        }
    }
    let chol = model.cholesky_factors()?;
    let mut rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 0xBA2C));
    let mut accepted = 0usize;
    let mut trials = 0u64;
    while accepted < n_target {
        if trials >= max_trials {
            let rate = accepted as f64 / trials.max(1) as f64;
            return Err(Error::SamplingExhausted {
                accepted,
                requested: n_target,
                trials,
                partial: Box::new(LatentBank { d: model.d, vectors, provenance, acceptance_rate: rate }),
            });
        }
        trials += 1;
        let z = model.sample(&chol, &mut rng);
        let (_, mask) = ae.decode(&z)?;
        if delta(&mask, cfg).passed {
            vectors.push(z);
            provenance.push(Provenance::Sampled);
            accepted += 1;
        }
    }
    let acceptance_rate = if trials == 0 { 1.0 } else { accepted as f64 / trials as f64 };
    Ok(LatentBank { d: model.d, vectors, provenance, acceptance_rate })
}

/// How [`repair_mask`] arrived at its output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum RepairOutcome {
    /// The input already passed the validity predicate.
    Untouched,
    /// The plain autoencoder round trip was already valid.
    Autoencoded,
    /// Latent interpolation toward the nearest bank vector; `alpha` is the
    /// smallest grid value whose decoding passed.
    Projected { alpha: f64, neighbor: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub outcome: RepairOutcome,
}

/// Repairs a mask so the result satisfies the validity predicate.
///
/// Valid inputs return unchanged. Otherwise the mask is autoencoded and the
/// round trip returned if valid. Failing that, the encoding is interpolated
/// toward its nearest bank neighbor: the smallest `alpha` on the uniform
/// grid `{0, 1/alpha_steps, ..., 1}` whose decoding passes wins, and the
/// final grid point uses the stored bank vector bit-for-bit, so validity at
/// `alpha = 1` is inherited from the bank's certification.
pub fn repair_mask(
    mask: &BinaryMask,
    ae: &AeModel,
    bank: &LatentBank,
    cfg: &AnatomyConfig,
    alpha_steps: usize,
) -> Result<(BinaryMask, RepairReport)> {
    cfg.validate()?;
    if alpha_steps == 0 {
        return Err(Error::Parameter("alpha_steps must be at least 1".into()));
    }
    if bank.d != ae.latent_dim() {
        return Err(Error::Input(format!(
            "bank dimension {} does not match the autoencoder latent dimension {}",
            bank.d,
            ae.latent_dim()
        )));
    }
    if bank.is_empty() {
        return Err(Error::Input("empty latent bank".into()));
    }
    if delta(mask, cfg).passed {
        return Ok((mask.clone(), RepairReport { outcome: RepairOutcome::Untouched }));
    }
    let z_hat = ae.encode(mask)?;
    let (_, decoded) = ae.decode(&z_hat)?;
    if delta(&decoded, cfg).passed {
        return Ok((decoded, RepairReport { outcome: RepairOutcome::Autoencoded }));
    }
    let (neighbor, _) = bank.nearest(&z_hat)?;
    let z_nn = &bank.vectors[neighbor];
    for step in 0..=alpha_steps {
        let alpha = step as f64 / alpha_steps as f64;
        let z: LatentVec = if step == alpha_steps {
            z_nn.clone()
        } else {
            z_hat.iter().zip(z_nn).map(|(a, b)| a + alpha * (b - a)).collect()
        };
        let (_, candidate) = ae.decode(&z)?;
        if delta(&candidate, cfg).passed {
            return Ok((candidate, RepairReport { outcome: RepairOutcome::Projected { alpha, neighbor } }));
        }
    }
    Err(Error::Consistency(
        "bank vector failed validity re-check during repair; the bank does not match this model or config".into(),
    ))
}

// ---- binary containers -------------------------------------------------

fn r_exact(file: &mut impl std::io::Read, buf: &mut [u8], what: &str) -> Result<()> {
    file.read_exact(buf).map_err(|_| Error::Format(format!("truncated {what}")))
}

fn r_u32(file: &mut impl std::io::Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r_exact(file, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(file: &mut impl std::io::Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r_exact(file, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64s(file: &mut impl std::io::Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r_exact(file, &mut b, what)?;
        let v = f64::from_le_bytes(b);
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value in {what}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Mixture, bank and the validity thresholds the bank was certified
/// against, persisted together as one `GMB1` container.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmBankFile {
    pub gmm: GmmModel,
    pub bank: LatentBank,
    pub anatomy: AnatomyConfig,
}

impl GmmBankFile {
    /// A container holding a freshly fitted mixture and no bank yet.
    pub fn without_bank(gmm: GmmModel, anatomy: AnatomyConfig) -> GmmBankFile {
        let d = gmm.d();
        GmmBankFile {
            gmm,
            bank: LatentBank { d, vectors: Vec::new(), provenance: Vec::new(), acceptance_rate: 1.0 },
            anatomy,
        }
    }

    /// Writes the container: magic `GMB1`, k and d as little-endian u32,
    /// weights, means and covariances as f64, then the bank (count,
    /// vectors, provenance bytes, acceptance rate) and the anatomy
    /// thresholds.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.bank.d != self.gmm.d() {
            return Err(Error::Consistency("bank and mixture dimensions differ".into()));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(b"GMB1")?;
        out.write_all(&(self.gmm.k() as u32).to_le_bytes())?;
        out.write_all(&(self.gmm.d() as u32).to_le_bytes())?;
        for &w in &self.gmm.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        for mu in &self.gmm.means {
            for &v in mu {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for cov in &self.gmm.covariances {
            for &v in cov {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.write_all(&(self.bank.len() as u64).to_le_bytes())?;
        for z in &self.bank.vectors {
            for &v in z {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for p in &self.bank.provenance {
            out.write_all(&[match p {
                Provenance::Sampled => 0u8,
                Provenance::Training => 1u8,
            }])?;
        }
        out.write_all(&self.bank.acceptance_rate.to_le_bytes())?;
        let a = &self.anatomy;
        out.write_all(&a.min_circularity.to_le_bytes())?;
        out.write_all(&a.max_defect_depth.to_le_bytes())?;
        out.write_all(&a.min_thickness.to_le_bytes())?;
        out.write_all(&(a.max_components as u32).to_le_bytes())?;
        out.write_all(&(a.max_holes as u32).to_le_bytes())?;
        out.write_all(&[u8::from(a.allow_c_shape)])?;
        out.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GmmBankFile> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r_exact(&mut file, &mut magic, "header")?;
        if &magic != b"GMB1" {
            return Err(Error::Format("bad magic bytes for a mixture/bank file".into()));
        }
        let k = r_u32(&mut file, "component count")? as usize;
        let d = r_u32(&mut file, "dimension")? as usize;
        if k == 0 || d == 0 {
            return Err(Error::Format("k and d must be positive".into()));
        }
        let weights = r_f64s(&mut file, k, "weights")?;
        let mut means = Vec::with_capacity(k);
        for _ in 0..k {
            means.push(r_f64s(&mut file, d, "means")?);
        }
        let mut covariances = Vec::with_capacity(k);
        for _ in 0..k {
            covariances.push(r_f64s(&mut file, d * d, "covariances")?);
        }
        let gmm = GmmModel::new(d, weights, means, covariances)
            .map_err(|e| Error::Format(format!("invalid mixture parameters: {e}")))?;
        let n = r_u64(&mut file, "bank size")? as usize;
        let mut vectors = Vec::with_capacity(n);
        for _ in 0..n {
            vectors.push(r_f64s(&mut file, d, "bank vectors")?);
        }
        let mut provenance = Vec::with_capacity(n);
        let mut byte = [0u8; 1];
        for _ in 0..n {
            r_exact(&mut file, &mut byte, "provenance")?;
            provenance.push(match byte[0] {
                0 => Provenance::Sampled,
                1 => Provenance::Training,
                other => return Err(Error::Format(format!("unknown provenance tag {other}"))),
            });
        }
        let acceptance_rate = r_f64s(&mut file, 1, "acceptance rate")?[0];
        let min_circularity = r_f64s(&mut file, 1, "anatomy thresholds")?[0];
        let max_defect_depth = r_f64s(&mut file, 1, "anatomy thresholds")?[0];
        let min_thickness = r_f64s(&mut file, 1, "anatomy thresholds")?[0];
        let max_components = r_u32(&mut file, "anatomy thresholds")? as usize;
        let max_holes = r_u32(&mut file, "anatomy thresholds")? as usize;
        r_exact(&mut file, &mut byte, "anatomy thresholds")?;
        let anatomy = AnatomyConfig {
            min_circularity,
            max_defect_depth,
            min_thickness,
            max_components,
            max_holes,
            allow_c_shape: byte[0] != 0,
        };
        if file.read(&mut byte)? != 0 {
            return Err(Error::Format("trailing bytes after container".into()));
        }
        Ok(GmmBankFile {
            gmm,
            bank: LatentBank { d, vectors, provenance, acceptance_rate },
            anatomy,
        })
    }
}

/// Writes latent vectors as a `LAT1` file: magic, count and dimension as
/// little-endian u32, then row-major f64 values.
pub fn save_latents(path: &Path, latents: &[LatentVec]) -> Result<()> {
    let first = latents.first().ok_or_else(|| Error::Input("no latent vectors to save".into()))?;
    let d = first.len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::Input("latent vectors disagree on dimension".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(b"LAT1")?;
    out.write_all(&(latents.len() as u32).to_le_bytes())?;
    out.write_all(&(d as u32).to_le_bytes())?;
    for z in latents {
        for &v in z {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<Vec<LatentVec>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r_exact(&mut file, &mut magic, "header")?;
    if &magic != b"LAT1" {
        return Err(Error::Format("bad magic bytes for a latents file".into()));
    }
    let n = r_u32(&mut file, "count")? as usize;
    let d = r_u32(&mut file, "dimension")? as usize;
    if d == 0 {
        return Err(Error::Format("latent dimension must be positive".into()));
    }
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        latents.push(r_f64s(&mut file, d, "latent data")?);
    }
    let mut byte = [0u8; 1];
    if file.read(&mut byte)? != 0 {
        return Err(Error::Format("trailing bytes after latents".into()));
    }
    Ok(latents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_model(d: usize, k: usize, spread: f64) -> GmmModel {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        GmmModel::new(
            d,
            vec![1.0 / k as f64; k],
            (0..k).map(|j| vec![j as f64 * spread; d]).collect(),
            vec![eye; k],
        )
        .unwrap()
    }

    fn cluster_points(centers: &[Vec<f64>], per: usize, noise: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..per {
                pts.push(
                    c.iter()
                        .map(|&m| m + noise * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
            }
        }
        pts
    }

    /// Zeroed autoencoder whose final decoder bias forces every decoded
    /// probability to one side: +bias decodes to a full-frame mask (which
    /// passes the default validity checks), -bias to an empty mask.
    fn constant_decoder(bias: f64) -> AeModel {
        let mut model = AeModel::init(64, 16, 0).unwrap();
        for t in model.tensors_mut().iter_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = model.tensors_mut().len() - 1;
        model.tensors_mut()[last][0] = bias;
        model
    }

    fn broken_ring() -> BinaryMask {
        BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 32.0, y as f64 - 32.0);
            let r = (dx * dx + dy * dy).sqrt();
            r > 8.0 && r <= 13.0 && !(dx.abs() < 1.5) // two split halves
        })
    }

    #[test]
    fn one_component_fit_equals_closed_form_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let points: Vec<Vec<f64>> =
            (0..40).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let fit = fit_gmm_em(&points, 1, 1e-9, 7, 100, 1e-12).unwrap();
        // Hand-computed maximum-likelihood moments in the same index order.
        let n = points.len() as f64;
        let mut mean = vec![0.0; 3];
        for p in &points {
            for t in 0..3 {
                mean[t] += 1.0 * p[t];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; 9];
        let mut diff = [0.0; 3];
        for p in &points {
            for t in 0..3 {
                diff[t] = p[t] - mean[t];
            }
            for a in 0..3 {
                for b in 0..=a {
                    cov[a * 3 + b] += 1.0 * diff[a] * diff[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..=a {
                cov[a * 3 + b] /= n;
                cov[b * 3 + a] = cov[a * 3 + b];
            }
        }
        assert_eq!(fit.model.weights(), &[1.0]);
        for t in 0..3 {
            assert_eq!(fit.model.means()[0][t].to_bits(), mean[t].to_bits());
        }
        for i in 0..9 {
            assert_eq!(fit.model.covariances()[0][i].to_bits(), cov[i].to_bits());
        }
    }

    #[test]
    fn two_well_separated_clusters_are_recovered() {
        let centers = vec![vec![0.0; 3], vec![10.0; 3]];
        let points = cluster_points(&centers, 200, 1.0, 3);
        let fit = fit_gmm_em(&points, 2, DEFAULT_REG, 5, EM_MAX_ITER, EM_TOL).unwrap();
        let mut recovered: Vec<&Vec<f64>> = fit.model.means().iter().collect();
        recovered.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (mu, c) in recovered.iter().zip(&centers) {
            for t in 0..3 {
                assert!((mu[t] - c[t]).abs() < 0.5, "recovered {mu:?} vs true {c:?}");
            }
        }
        for w in fit.model.weights() {
            assert!((w - 0.5).abs() < 0.1);
        }
    }

    #[test]
    fn em_nll_is_monotone_non_increasing() {
        let points = cluster_points(&[vec![0.0; 4], vec![6.0; 4], vec![-5.0; 4]], 80, 1.0, 9);
        let fit = fit_gmm_em(&points, 3, DEFAULT_REG, 2, EM_MAX_ITER, EM_TOL).unwrap();
        assert!(fit.nll_history.len() >= 2);
        for pair in fit.nll_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "NLL rose: {} -> {}", pair[0], pair[1]);
        }
        assert_eq!(fit.final_nll, *fit.nll_history.last().unwrap());
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        let points = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(fit_gmm_em(&points, 3, 1e-6, 0, 10, 1e-6), Err(Error::Input(_))));
        assert!(fit_gmm_em(&points, 2, 1e-6, 0, 10, 1e-6).is_ok());
    }

    #[test]
    fn nll_of_point_at_mean_is_half_log_two_pi() {
        let model = unit_model(1, 1, 0.0);
        let nll = gmm_nll(&model, &[vec![0.0]]).unwrap();
        assert!((nll - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_grows_per_point_and_ignores_component_order() {
        let model = unit_model(2, 2, 3.0);
        let some = vec![vec![0.1, 0.2], vec![2.5, 2.5]];
        let more = vec![vec![0.1, 0.2], vec![2.5, 2.5], vec![1.0, 1.0]];
        let a = gmm_nll(&model, &some).unwrap();
        let b = gmm_nll(&model, &more).unwrap();
        assert!(b > a, "adding a point must increase total NLL under unit covariances");
        let permuted = GmmModel::new(
            2,
            vec![model.weights[1], model.weights[0]],
            vec![model.means[1].clone(), model.means[0].clone()],
            vec![model.covariances[1].clone(), model.covariances[0].clone()],
        )
        .unwrap();
        let c = gmm_nll(&permuted, &some).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn effective_rank_hand_cases() {
        let mut eye16 = vec![0.0; 16 * 16];
        for i in 0..16 {
            eye16[i * 16 + i] = 1.0;
        }
        assert!((effective_rank(&eye16, 16).unwrap() - 16.0).abs() < 1e-12);
        let diag = [4.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!((effective_rank(&diag, 3).unwrap() - 1.5).abs() < 1e-8);
        // Equal eigenvalues reach d exactly even off the identity scale.
        let mut scaled = vec![0.0; 25];
        for i in 0..5 {
            scaled[i * 5 + i] = 0.37;
        }
        assert!((effective_rank(&scaled, 5).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn effective_rank_bounds_on_random_spd() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let d = rng.gen_range(2..9);
            let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        a[i * d + j] += b[i * d + k] * b[j * d + k];
                    }
                }
                a[i * d + i] += 0.05;
            }
            let r = effective_rank(&a, d).unwrap();
            assert!(r >= 1.0 - 1e-9 && r <= d as f64 + 1e-9, "rank {r} outside [1, {d}]");
        }
    }

    #[test]
    fn effective_rank_rejects_non_spd() {
        assert!(effective_rank(&[1.0, 0.5, 0.4, 1.0], 2).is_err(), "asymmetric");
        assert!(effective_rank(&[1.0, 0.0, 0.0, -1.0], 2).is_err(), "indefinite");
    }

    #[test]
    fn identity_covariances_pay_the_full_parameter_price() {
        let model = unit_model(3, 2, 4.0);
        let p = adjusted_param_count(&model).unwrap();
        let unadjusted = 2.0 * (3.0 + 6.0) + 1.0;
        assert!((p - unadjusted).abs() < 1e-9);
    }

    #[test]
    fn dominant_eigenvalue_shrinks_the_penalty() {
        let d = 3;
        let mut low_rank = vec![0.0; 9];
        low_rank[0] = 100.0;
        low_rank[4] = 0.01;
        low_rank[8] = 0.01;
        let skewed = GmmModel::new(d, vec![1.0], vec![vec![0.0; d]], vec![low_rank]).unwrap();
        let round = unit_model(d, 1, 0.0);
        let p_skewed = adjusted_param_count(&skewed).unwrap();
        let p_round = adjusted_param_count(&round).unwrap();
        assert!(
            p_skewed < p_round,
            "one dominant eigenvalue must shrink the penalty: {p_skewed} vs {p_round}"
        );
        // For equal NLL the adjusted criterion is therefore smaller, and it
        // stays monotone in the NLL term for a fixed model.
        let pts_small = cluster_points(&[vec![0.0; 3]], 10, 1.0, 1);
        let pts_large = cluster_points(&[vec![0.0; 3]], 40, 1.0, 1);
        let aic_small = adjusted_aic(&round, &pts_small).unwrap();
        let aic_large = adjusted_aic(&round, &pts_large).unwrap();
        assert!(aic_large > aic_small);
    }

    #[test]
    fn selection_recovers_three_components() {
        let centers = vec![vec![0.0; 4], vec![8.0, -8.0, 8.0, -8.0], vec![-9.0, 9.0, -9.0, 9.0]];
        let points = cluster_points(&centers, 200, 1.0, 21);
        let ks: Vec<usize> = (1..=6).collect();
        let result = select_model(&points, &ks, 5, DEFAULT_REG, 17).unwrap();
        assert_eq!(result.chosen_k, 3);
        assert_eq!(result.rows.len(), 6);
        for row in &result.rows {
            assert_eq!(row.fold_nll.len(), 5);
            assert_eq!(row.fold_aic.len(), 5);
            assert!(row.fold_nll.iter().all(|v| v.is_finite()), "held-out NLL must be finite");
        }
    }

    #[test]
    fn selection_rejects_insufficient_data() {
        let points = cluster_points(&[vec![0.0; 2]], 8, 1.0, 2);
        assert!(matches!(
            select_model(&points, &[7], 4, DEFAULT_REG, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bank_accepts_everything_when_decodes_are_always_valid() {
        let ae = constant_decoder(5.0);
        let gmm = unit_model(16, 1, 0.0);
        let training = vec![vec![0.25; 16], vec![-0.5; 16]];
        let bank =
            build_latent_bank(&gmm, &ae, &AnatomyConfig::default(), &training, 20, 1000, 3).unwrap();
        assert_eq!(bank.acceptance_rate(), 1.0);
        assert_eq!(bank.len(), 22, "2 training + 20 sampled");
        assert_eq!(
            bank.provenance().iter().filter(|p| **p == Provenance::Training).count(),
            2
        );
        // Every stored vector re-verifies against the validity predicate.
        for z in bank.vectors() {
            let (_, mask) = ae.decode(z).unwrap();
            assert!(delta(&mask, &AnatomyConfig::default()).passed);
        }
    }

    #[test]
    fn bank_sampling_exhaustion_carries_the_partial_bank() {
        let ae = constant_decoder(-5.0); // decodes to an empty mask: never valid
        let gmm = unit_model(16, 1, 0.0);
        let err = build_latent_bank(&gmm, &ae, &AnatomyConfig::default(), &[], 5, 40, 3)
            .expect_err("nothing can be accepted");
        match err {
            Error::SamplingExhausted { accepted, requested, trials, partial } => {
                assert_eq!(accepted, 0);
                assert_eq!(requested, 5);
                assert_eq!(trials, 40);
                assert!(partial.is_empty());
            }
            other => panic!("expected SamplingExhausted, got {other:?}"),
        }
    }

    #[test]
    fn bank_sampling_is_deterministic() {
        let ae = constant_decoder(5.0);
        let gmm = unit_model(16, 2, 2.0);
        let a = build_latent_bank(&gmm, &ae, &AnatomyConfig::default(), &[], 10, 100, 9).unwrap();
        let b = build_latent_bank(&gmm, &ae, &AnatomyConfig::default(), &[], 10, 100, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_matches_brute_force_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let vectors: Vec<LatentVec> =
            (0..50).map(|_| (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let bank = LatentBank {
            d: 16,
            vectors: vectors.clone(),
            provenance: vec![Provenance::Sampled; 50],
            acceptance_rate: 1.0,
        };
        for _ in 0..50 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (idx, dist) = bank.nearest(&q).unwrap();
            let mut best = (usize::MAX, f64::INFINITY);
            for (i, v) in vectors.iter().enumerate() {
                let d2: f64 = v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (i, d2);
                }
            }
            assert_eq!(idx, best.0);
            assert_eq!(dist, best.1);
        }
        // Exact ties resolve to the smallest index.
        let twin = LatentBank {
            d: 2,
            vectors: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            provenance: vec![Provenance::Sampled; 2],
            acceptance_rate: 1.0,
        };
        assert_eq!(twin.nearest(&[0.0, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn repair_leaves_valid_masks_untouched() {
        let ring = BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 32.0, y as f64 - 32.0);
            let r = (dx * dx + dy * dy).sqrt();
            r > 8.0 && r <= 13.0
        });
        let ae = constant_decoder(-5.0);
        let bank = LatentBank {
            d: 16,
            vectors: vec![vec![0.0; 16]],
            provenance: vec![Provenance::Sampled],
            acceptance_rate: 1.0,
        };
        let (out, report) =
            repair_mask(&ring, &ae, &bank, &AnatomyConfig::default(), DEFAULT_ALPHA_STEPS).unwrap();
        assert_eq!(out, ring, "valid input must come back bit-identical");
        assert_eq!(report.outcome, RepairOutcome::Untouched);
    }

    #[test]
    fn repair_output_always_satisfies_delta_and_is_idempotent() {
        let ae = constant_decoder(5.0); // round trip decodes to a valid full frame
        let bank = LatentBank {
            d: 16,
            vectors: vec![vec![0.0; 16]],
            provenance: vec![Provenance::Sampled],
            acceptance_rate: 1.0,
        };
        let cfg = AnatomyConfig::default();
        let (repaired, report) = repair_mask(&broken_ring(), &ae, &bank, &cfg, 32).unwrap();
        assert!(delta(&repaired, &cfg).passed);
        assert_eq!(report.outcome, RepairOutcome::Autoencoded);
        let (again, second) = repair_mask(&repaired, &ae, &bank, &cfg, 32).unwrap();
        assert_eq!(again, repaired, "repair must be idempotent");
        assert_eq!(second.outcome, RepairOutcome::Untouched);
    }

    #[test]
    fn repair_reports_a_broken_bank_instead_of_returning_invalid_masks() {
        // Decodes are always empty, so no alpha can succeed and the final
        // bank fallback fails its re-check: that is a consistency error, not
        // a silent invalid output.
        let ae = constant_decoder(-5.0);
        let bank = LatentBank {
            d: 16,
            vectors: vec![vec![0.0; 16]],
            provenance: vec![Provenance::Sampled],
            acceptance_rate: 1.0,
        };
        let err = repair_mask(&broken_ring(), &ae, &bank, &AnatomyConfig::default(), 8)
            .expect_err("certification is violated");
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn repair_rejects_empty_bank() {
        let ae = constant_decoder(5.0);
        let bank = LatentBank {
            d: 16,
            vectors: Vec::new(),
            provenance: Vec::new(),
            acceptance_rate: 1.0,
        };
        assert!(matches!(
            repair_mask(&broken_ring(), &ae, &bank, &AnatomyConfig::default(), 32),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gmb_container_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmb1");
        let points = cluster_points(&[vec![0.0; 4], vec![5.0; 4]], 60, 1.0, 40);
        let fit = fit_gmm_em(&points, 2, DEFAULT_REG, 8, EM_MAX_ITER, EM_TOL).unwrap();
        let ae = constant_decoder(5.0);
        let gmm16 = unit_model(16, 1, 0.0);
        let bank = build_latent_bank(&gmm16, &ae, &AnatomyConfig::default(), &[], 4, 100, 5).unwrap();
        let file = GmmBankFile {
            gmm: gmm16,
            bank,
            anatomy: AnatomyConfig { max_holes: 2, ..AnatomyConfig::default() },
        };
        file.save(&path).unwrap();
        let loaded = GmmBankFile::load(&path).unwrap();
        assert_eq!(file, loaded);

        // A mixture-only container (no bank yet) also round-trips.
        let no_bank = GmmBankFile::without_bank(fit.model, AnatomyConfig::default());
        no_bank.save(&path).unwrap();
        assert_eq!(GmmBankFile::load(&path).unwrap(), no_bank);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(GmmBankFile::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn latents_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.lat1");
        let latents: Vec<LatentVec> =
            (0..7).map(|i| (0..16).map(|j| (i * 16 + j) as f64 * 0.1).collect()).collect();
        save_latents(&path, &latents).unwrap();
        assert_eq!(load_latents(&path).unwrap(), latents);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_latents(&path), Err(Error::Format(_))));
    }
}
