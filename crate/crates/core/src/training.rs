//! Constrained maximum-likelihood training.
//!
//! Training works in the gauge `P_L = I`, where the left constraint says the
//! dictionary stack `V = [M_1; …; M_n]` is an isometry. Each step takes the
//! gradient of the mean negative log trace density of a batch of corpus
//! windows, projects it onto the tangent space of the Stiefel manifold at
//! `V`, moves along it and retracts with the polar factor. `P_R` is then
//! re-solved as the fixed point of the new right channel, warm-started from
//! the previous one, and held constant while differentiating.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channels::{
    isometry_residual, random_isometric_dictionary, solve_right_density_from, DEFAULT_FP_MAX_ITER,
    DEFAULT_FP_TOL,
};
use crate::corpus::{count_windows, empirical_dist, Corpus};
use crate::error::{Result, TdmError};
use crate::linalg::{self, c, CMatrix};
use crate::model::{Density, Dictionary, ScaledMatrix, TraceDensityModel};

/// Isometry defect tolerated on entry to [`riemannian_step`].
pub const STEP_ISOMETRY_TOL: f64 = 1e-10;
/// Allowed epoch-to-epoch increase of training NLL before an epoch is flagged.
pub const MONOTONE_SLACK: f64 = 1e-6;
/// Largest `n^k` for which KL divergence is computed.
pub const MAX_ENUMERATION: u64 = 1_000_000;
/// Fixed-point failures in a row that abort training.
const MAX_CONSECUTIVE_FP_FAILURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Bond dimension.
    pub d: usize,
    /// Window length.
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 4,
            k: 3,
            epochs: 50,
            learning_rate: 0.5,
            batch_size: 100_000,
            seed: 0,
            fp_tol: DEFAULT_FP_TOL,
            fp_max_iter: DEFAULT_FP_MAX_ITER,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TdmError::Argument(format!("{what} must be positive")));
        if self.d == 0 {
            return bad("d");
        }
        if self.k == 0 {
            return bad("k");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.fp_max_iter == 0 {
            return bad("fp_max_iter");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate");
        }
        if !(self.fp_tol > 0.0) {
            return bad("fp_tol");
        }
        Ok(())
    }
}

/// Diagnostics recorded at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative log trace density per training window.
    pub nll: f64,
    /// `exp(nll / k)`.
    pub perplexity: f64,
    pub left_residual: f64,
    pub right_residual: f64,
    /// Fixed-point iterations summed over the epoch's steps.
    pub fp_iterations: usize,
    pub fp_failures: usize,
    /// Learning rate in force at the end of the epoch.
    pub learning_rate: f64,
    pub rejected_steps: usize,
    /// NLL rose by more than [`MONOTONE_SLACK`] over the previous epoch.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose model was returned.
    pub best_epoch: Option<usize>,
    /// `P_R` enters the gradient as a constant (no differentiation through
    /// the fixed point).
    pub stop_gradient_right_density: bool,
}

/// Mean `−ln q(x)` over `batch`.
pub fn batch_nll(model: &TraceDensityModel, batch: &[Vec<usize>]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (phrase, count) in tally(batch) {
        let q = model.trace_density(phrase)?;
        if q.is_zero() {
            return Err(TdmError::Likelihood {
                window: phrase.to_vec(),
            });
        }
        total -= count as f64 * q.ln();
    }
    Ok(total / batch.len() as f64)
}

fn tally(batch: &[Vec<usize>]) -> BTreeMap<&[usize], u64> {
    let mut counts = BTreeMap::new();
    for x in batch {
        *counts.entry(x.as_slice()).or_insert(0u64) += 1;
    }
    counts
}

/// Euclidean gradient of the mean `−ln q` over `batch` with respect to the
/// conjugated dictionary entries, laid out like the `nd×d` stack.
///
/// For a phrase with product `A = L_j M_{i_j} R_j` at slot `j`, the slot adds
/// `−L_j* P_L A P_R R_j* / q(x)` to block `i_j`.
pub fn nll_gradient(model: &TraceDensityModel, batch: &[Vec<usize>]) -> Result<CMatrix> {
    let (n, d) = (model.n(), model.d());
    let mut grad = linalg::zeros(n * d, d);
    if batch.is_empty() {
        return Ok(grad);
    }
    let weight_total = batch.len() as f64;
    let dict = model.dict();
    for (x, count) in tally(batch) {
        dict.check_phrase(x)?;
        let k = x.len();
        let mut prefixes = Vec::with_capacity(k + 1);
        prefixes.push(ScaledMatrix::identity(d));
        for &i in x {
            let mut next = prefixes.last().expect("non-empty").clone();
            next.mul_right(dict.mat(i));
            prefixes.push(next);
        }
        let mut suffixes = vec![ScaledMatrix::identity(d); k + 1];
        for j in (0..k).rev() {
            let mut next = suffixes[j + 1].clone();
            next.mul_left(dict.mat(x[j]));
            suffixes[j] = next;
        }
        let full = &prefixes[k];
        let q = model.trace_density_of(full);
        if q.is_zero() {
            return Err(TdmError::Likelihood { window: x.to_vec() });
        }
        let y = model.p_left().matrix() * &full.mantissa * model.p_right().matrix();
        let w = count as f64 / weight_total;
        for (j, &word) in x.iter().enumerate() {
            let (pre, suf) = (&prefixes[j], &suffixes[j + 1]);
            let e = pre.exp2 + suf.exp2 - full.exp2;
            let scale = -w / q.mantissa * 2f64.powi(e as i32);
            let slot = pre.mantissa.adjoint() * &y * suf.mantissa.adjoint();
            let mut block = grad.view_mut((word * d, 0), (d, d));
            block += slot * c(scale, 0.0);
        }
    }
    Ok(grad)
}

/// One Riemannian gradient-descent step on the isometric dictionaries:
/// project `grad` onto the tangent space at the stack `V`, step, and retract
/// with the polar factor.
pub fn riemannian_step(dict: &Dictionary, grad: &CMatrix, lr: f64) -> Result<Dictionary> {
    let v = dict.stack();
    if grad.shape() != v.shape() {
        return Err(TdmError::Argument(format!(
            "gradient shape {:?} does not match dictionary stack {:?}",
            grad.shape(),
            v.shape()
        )));
    }
    let defect = linalg::isometry_defect(&v);
    if defect > STEP_ISOMETRY_TOL {
        return Err(TdmError::Argument(format!(
            "dictionary is not isometric (defect {defect:e})"
        )));
    }
    if lr == 0.0 {
        return Ok(dict.clone());
    }
    let vg = v.adjoint() * grad;
    let sym = (&vg + vg.adjoint()) * c(0.5, 0.0);
    let tangent = grad - &v * sym;
    let moved = &v - tangent * c(lr, 0.0);
    let u = linalg::polar_factor(&moved).ok_or_else(|| {
        TdmError::Step("retraction hit a rank-deficient point; reduce the learning rate".into())
    })?;
    Dictionary::from_stack(&u)
}

/// Train a model on the length-`k` windows of `corpus`.
///
/// Returns the model of the epoch with the lowest training NLL (the
/// initialization when `epochs == 0`).
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<(TraceDensityModel, TrainReport)> {
    config.validate()?;
    if corpus.len() < config.k {
        return Err(TdmError::Argument(format!(
            "corpus of {} words has no window of length {}",
            corpus.len(),
            config.k
        )));
    }
    let vocab = corpus.vocab().clone();
    let (n, d) = (vocab.len(), config.d);
    let p_left = Density::identity(d);
    let dict = random_isometric_dictionary(n, d, config.seed)?;

    let mut report = TrainReport {
        stop_gradient_right_density: true,
        ..TrainReport::default()
    };

    let mut consecutive_failures = 0usize;
    let initial = solve_for(&dict, &p_left, None, config, &mut consecutive_failures);
    let (p_right, _, _) = initial;
    let mut model = TraceDensityModel::new(vocab.clone(), dict, p_left.clone(), p_right)?;

    let windows: Vec<Vec<usize>> = corpus.ids().windows(config.k).map(<[usize]>::to_vec).collect();
    let all = count_windows(corpus.ids(), config.k)?;

    let mut best: Option<(f64, TraceDensityModel)> = None;
    let mut prev_nll = f64::INFINITY;

    for epoch in 0..config.epochs {
        let mut lr = config.learning_rate;
        let mut fp_iterations = 0;
        let mut fp_failures = 0;
        let mut rejected = 0;

        for batch in windows.chunks(config.batch_size) {
            let candidate = nll_gradient(&model, batch)
                .and_then(|g| riemannian_step(model.dict(), &g, lr));
            let dict = match candidate {
                Ok(dict) => dict,
                Err(TdmError::Likelihood { .. }) | Err(TdmError::Step(_)) => {
                    rejected += 1;
                    lr *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };

            let (p_right, iters, converged) = solve_for(
                &dict,
                &p_left,
                Some(model.p_right().matrix()),
                config,
                &mut consecutive_failures,
            );
            fp_iterations += iters;
            if !converged {
                fp_failures += 1;
                if consecutive_failures >= MAX_CONSECUTIVE_FP_FAILURES {
                    return Err(TdmError::Training {
                        reason: format!(
                            "fixed-point solve failed {MAX_CONSECUTIVE_FP_FAILURES} times in a row in epoch {epoch}"
                        ),
                        report: Box::new(report),
                    });
                }
            }
            let next = TraceDensityModel::new(vocab.clone(), dict, p_left.clone(), p_right)?;
            if matches!(batch_nll(&next, batch), Err(TdmError::Likelihood { .. })) {
                rejected += 1;
                lr *= 0.5;
                continue;
            }
            model = next;
        }

        let nll = mean_nll(&model, &all)?;
        let residuals = model.residuals();
        report.records.push(EpochRecord {
            epoch,
            nll,
            perplexity: (nll / config.k as f64).exp(),
            left_residual: residuals.left,
            right_residual: residuals.right,
            fp_iterations,
            fp_failures,
            learning_rate: lr,
            rejected_steps: rejected,
            flagged: nll > prev_nll + MONOTONE_SLACK,
        });
        prev_nll = nll;
        if best.as_ref().is_none_or(|(b, _)| nll < *b) {
            best = Some((nll, model.clone()));
            report.best_epoch = Some(epoch);
        }
    }

    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, report))
}

/// Solve for `P_R`, falling back to the best iterate on non-convergence.
/// Returns `(P_R, iterations, converged)`.
fn solve_for(
    dict: &Dictionary,
    p_left: &Density,
    init: Option<&CMatrix>,
    config: &TrainConfig,
    consecutive_failures: &mut usize,
) -> (Density, usize, bool) {
    match solve_right_density_from(dict, p_left, init, config.fp_tol, config.fp_max_iter) {
        Ok(r) => {
            *consecutive_failures = 0;
            (r.density, r.iterations, true)
        }
        Err(TdmError::NonConvergence { best }) => {
            *consecutive_failures += 1;
            (best.density, config.fp_max_iter, false)
        }
        Err(_) => {
            // only reachable if the retraction lost isometry; keep a feasible point
            *consecutive_failures += 1;
            debug_assert!(isometry_residual(dict) > 1e-8);
            let d = dict.d();
            let fallback = Density::new(linalg::identity(d) * c(1.0 / d as f64, 0.0))
                .expect("scaled identity is a density");
            (fallback, 0, false)
        }
    }
}

fn mean_nll(model: &TraceDensityModel, table: &crate::corpus::PhraseTable) -> Result<f64> {
    let mut total = 0.0;
    for (x, &count) in &table.counts {
        let q = model.trace_density(x)?;
        if q.is_zero() {
            return Err(TdmError::Likelihood { window: x.clone() });
        }
        total -= count as f64 * q.ln();
    }
    Ok(total / table.positions as f64)
}

/// Held-out evaluation of a model at window length `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub windows: u64,
    /// `−mean ln q / k`, in nats per word.
    pub cross_entropy: f64,
    pub perplexity: f64,
    /// `KL(q̂_k ‖ q_k)`, present when `n^k ≤ 10⁶`.
    pub kl: Option<f64>,
}

pub fn evaluate(model: &TraceDensityModel, corpus: &Corpus, k: usize) -> Result<EvalReport> {
    evaluate_ids(model, corpus.ids(), k)
}

pub fn evaluate_ids(model: &TraceDensityModel, ids: &[usize], k: usize) -> Result<EvalReport> {
    let ll = model.log_likelihood_ids(ids, k)?;
    let cross_entropy = -ll.mean_log_q / k as f64;
    let kl = match enumeration_size(model.n(), k) {
        Some(size) if size <= MAX_ENUMERATION => {
            let table = count_windows(ids, k)?;
            let emp = empirical_dist(&table);
            let mut kl = 0.0;
            for (x, &p) in &emp.probs {
                let q = model.trace_density(x)?;
                kl += p * (p.ln() - q.ln());
            }
            Some(kl)
        }
        _ => None,
    };
    Ok(EvalReport {
        k,
        windows: ll.windows,
        cross_entropy,
        perplexity: cross_entropy.exp(),
        kl,
    })
}

/// `n^k`, or `None` on overflow.
pub fn enumeration_size(n: usize, k: usize) -> Option<u64> {
    (n as u64).checked_pow(u32::try_from(k).ok()?)
}

/// Convenience: the trivial model over a corpus vocabulary.
pub fn trivial_baseline(corpus: &Corpus, d: usize) -> Result<TraceDensityModel> {
    TraceDensityModel::trivial(Arc::clone(corpus.vocab()), d)
}
