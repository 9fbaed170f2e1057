//! Trace-density models.
//!
//! A model is a vocabulary, a dictionary assigning a `d×d` complex matrix
//! `M_i` to each word, and two densities `P_L`, `P_R` with `tr(P_L P_R) = 1`.
//! A phrase `x = w_{i_1} … w_{i_k}` is sent to `A = M_{i_1} ⋯ M_{i_k}` and
//! its probability is
//!
//! ```text
//! q(x) = tr(P_L A P_R A*)
//! ```
//!
//! In tensor-network terms, `A` is the open chain of dictionary tensors with
//! the physical legs fixed to the phrase, `q(x)` closes the chain against its
//! conjugate through `P_L` on the left and `P_R` on the right, and
//! `tr(P_L P_R)` is the closed loop with no tensors at all.
//!
//! Long products are carried as `(B, e)` with `A = B · 2^e` and `‖B‖_F` kept
//! near one, so phrases of millions of words neither overflow nor underflow.

use std::sync::Arc;

use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channels::{apply_left_channel, apply_right_channel};
use crate::corpus::{count_windows, Corpus, Vocabulary};
use crate::error::{Result, TdmError};
use crate::linalg::{self, c, frobenius, CMatrix};

/// Hermiticity and positivity tolerance, relative to `max(1, ‖A‖_F)`.
pub const DENSITY_TOL: f64 = 1e-10;
/// Allowed deviation of `tr(P_L P_R)` from one.
pub const TRACE_TOL: f64 = 1e-9;
/// Scaled trace values at or below this are treated as zero probability.
pub const ZERO_FLOOR: f64 = 1e-300;
/// Residual bound required before sampling.
pub const SAMPLING_RESIDUAL_TOL: f64 = 1e-8;

/// A Hermitian positive semi-definite matrix (not necessarily unit trace).
#[derive(Clone, Debug, PartialEq)]
pub struct Density(CMatrix);

impl Density {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(TdmError::Validation("density must be a non-empty square matrix".into()));
        }
        if !linalg::is_finite(&matrix) {
            return Err(TdmError::Validation("density has non-finite entries".into()));
        }
        let scale = frobenius(&matrix).max(1.0);
        let herm = linalg::hermiticity_defect(&matrix);
        if herm > DENSITY_TOL * scale {
            return Err(TdmError::Validation(format!(
                "density is not Hermitian (‖A − A*‖_F = {herm:e})"
            )));
        }
        let min_ev = linalg::min_hermitian_eigenvalue(&matrix);
        if min_ev < -DENSITY_TOL * scale {
            return Err(TdmError::Validation(format!(
                "density is not positive semi-definite (smallest eigenvalue {min_ev:e})"
            )));
        }
        Ok(Density(matrix))
    }

    pub fn identity(d: usize) -> Self {
        Density(linalg::identity(d))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// One `d×d` matrix per vocabulary word.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    d: usize,
    mats: Vec<CMatrix>,
}

impl Dictionary {
    pub fn new(mats: Vec<CMatrix>) -> Result<Self> {
        let d = mats
            .first()
            .map(|m| m.nrows())
            .ok_or_else(|| TdmError::Validation("dictionary has no matrices".into()))?;
        if d == 0 {
            return Err(TdmError::Validation("bond dimension must be positive".into()));
        }
        for (i, m) in mats.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(TdmError::Validation(format!(
                    "dictionary matrix {i} is {}×{}, expected {d}×{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !linalg::is_finite(m) {
                return Err(TdmError::Validation(format!(
                    "dictionary matrix {i} has non-finite entries"
                )));
            }
        }
        Ok(Dictionary { d, mats })
    }

    /// `M_i = I/√n` for every word.
    pub fn trivial(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(TdmError::Argument("n and d must be positive".into()));
        }
        let m = linalg::identity(d) * c(1.0 / (n as f64).sqrt(), 0.0);
        Self::new(vec![m; n])
    }

    /// Split an `nd×d` stack `[M_1; …; M_n]` back into a dictionary.
    pub fn from_stack(stack: &CMatrix) -> Result<Self> {
        let d = stack.ncols();
        if d == 0 || stack.nrows() % d != 0 {
            return Err(TdmError::Argument(format!(
                "stack of shape {}×{} is not n·d × d",
                stack.nrows(),
                d
            )));
        }
        Self::new(linalg::unstack(stack, d))
    }

    pub fn stack(&self) -> CMatrix {
        linalg::stack(&self.mats)
    }

    pub fn n(&self) -> usize {
        self.mats.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mats(&self) -> &[CMatrix] {
        &self.mats
    }

    pub fn mat(&self, i: usize) -> &CMatrix {
        &self.mats[i]
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Dictionary {
            d: self.d,
            mats: self.mats.iter().map(|m| m * factor).collect(),
        }
    }

    pub(crate) fn check_phrase(&self, x: &[usize]) -> Result<()> {
        match x.iter().find(|&&i| i >= self.n()) {
            Some(bad) => Err(TdmError::Argument(format!(
                "word id {bad} out of range for vocabulary of size {}",
                self.n()
            ))),
            None => Ok(()),
        }
    }

    /// The scaled product `M_{i_1} ⋯ M_{i_k}`.
    pub fn phrase_matrix(&self, x: &[usize]) -> Result<ScaledMatrix> {
        self.check_phrase(x)?;
        let mut acc = ScaledMatrix::identity(self.d);
        for &i in x {
            acc.mul_right(&self.mats[i]);
        }
        Ok(acc)
    }
}

/// A matrix stored as `mantissa · 2^exp2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMatrix {
    pub mantissa: CMatrix,
    pub exp2: i64,
}

impl ScaledMatrix {
    pub fn identity(d: usize) -> Self {
        ScaledMatrix {
            mantissa: linalg::identity(d),
            exp2: 0,
        }
    }

    /// Bring `‖mantissa‖_F` back into `[1/2, 2]` by an exact power of two.
    pub fn renormalize(&mut self) {
        let norm = frobenius(&self.mantissa);
        if norm == 0.0 || !norm.is_finite() || (0.5..=2.0).contains(&norm) {
            return;
        }
        let e = norm.log2().round() as i32;
        linalg::scale_pow2(&mut self.mantissa, -e);
        self.exp2 += e as i64;
    }

    pub fn mul_right(&mut self, m: &CMatrix) {
        self.mantissa = &self.mantissa * m;
        self.renormalize();
    }

    pub fn mul_left(&mut self, m: &CMatrix) {
        self.mantissa = m * &self.mantissa;
        self.renormalize();
    }

    /// The unscaled matrix; may overflow or underflow.
    pub fn to_matrix(&self) -> CMatrix {
        let mut m = self.mantissa.clone();
        scale_by_exp2(&mut m, self.exp2);
        m
    }
}

fn scale_by_exp2(m: &mut CMatrix, e: i64) {
    let mut left = e;
    while left != 0 {
        let step = left.clamp(-1000, 1000);
        linalg::scale_pow2(m, step as i32);
        left -= step;
    }
}

/// A nonnegative real stored as `mantissa · 2^exp2`.
///
/// The mantissa can come out slightly negative through rounding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledValue {
    pub mantissa: f64,
    pub exp2: i64,
}

impl ScaledValue {
    pub fn value(&self) -> f64 {
        if self.mantissa == 0.0 {
            return 0.0;
        }
        let mut v = self.mantissa;
        let mut left = self.exp2;
        while left != 0 {
            let step = left.clamp(-1000, 1000);
            v *= 2f64.powi(step as i32);
            left -= step;
        }
        v
    }

    /// `ln |value|`; `-inf` for zero.
    pub fn ln(&self) -> f64 {
        self.mantissa.abs().ln() + self.exp2 as f64 * std::f64::consts::LN_2
    }

    /// `-1`, `0` or `1`.
    pub fn sign(&self) -> i8 {
        if self.mantissa > 0.0 {
            1
        } else if self.mantissa < 0.0 {
            -1
        } else {
            0
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa <= ZERO_FLOOR
    }
}

/// Constraint residuals of a model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Residuals {
    /// `‖Σ M_i* P_L M_i − P_L‖_F`
    pub left: f64,
    /// `‖Σ M_i P_R M_i* − P_R‖_F`
    pub right: f64,
    /// `|tr(P_L P_R) − 1|`
    pub trace: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.left.max(self.right).max(self.trace)
    }
}

/// Compute the three constraint residuals.
pub fn constraint_residuals(dict: &Dictionary, p_left: &Density, p_right: &Density) -> Residuals {
    let right = apply_right_channel(dict, p_right.matrix()).expect("dimensions checked");
    let left = apply_left_channel(dict, p_left.matrix()).expect("dimensions checked");
    Residuals {
        left: frobenius(&(left - p_left.matrix())),
        right: frobenius(&(right - p_right.matrix())),
        trace: (linalg::trace_of_product(p_left.matrix(), p_right.matrix()).re - 1.0).abs(),
    }
}

/// Vocabulary, dictionary and boundary densities, with cached residuals.
#[derive(Clone, Debug)]
pub struct TraceDensityModel {
    vocab: Arc<Vocabulary>,
    dict: Dictionary,
    p_left: Density,
    p_right: Density,
    residuals: Residuals,
}

impl TraceDensityModel {
    pub fn new(
        vocab: Arc<Vocabulary>,
        dict: Dictionary,
        p_left: Density,
        p_right: Density,
    ) -> Result<Self> {
        if vocab.len() != dict.n() {
            return Err(TdmError::Validation(format!(
                "vocabulary has {} words but the dictionary has {} matrices",
                vocab.len(),
                dict.n()
            )));
        }
        if p_left.dim() != dict.d() || p_right.dim() != dict.d() {
            return Err(TdmError::Validation(format!(
                "density dimensions ({}, {}) do not match bond dimension {}",
                p_left.dim(),
                p_right.dim(),
                dict.d()
            )));
        }
        let residuals = constraint_residuals(&dict, &p_left, &p_right);
        if residuals.trace > TRACE_TOL {
            return Err(TdmError::Validation(format!(
                "tr(P_L P_R) deviates from 1 by {:e}",
                residuals.trace
            )));
        }
        Ok(TraceDensityModel {
            vocab,
            dict,
            p_left,
            p_right,
            residuals,
        })
    }

    /// `P_L = I`, `P_R = I/d`, `M_i = I/√n`.
    pub fn trivial(vocab: Arc<Vocabulary>, d: usize) -> Result<Self> {
        let dict = Dictionary::trivial(vocab.len(), d)?;
        let p_right = Density::new(linalg::identity(d) * c(1.0 / d as f64, 0.0))?;
        Self::new(vocab, dict, Density::identity(d), p_right)
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn p_left(&self) -> &Density {
        &self.p_left
    }

    pub fn p_right(&self) -> &Density {
        &self.p_right
    }

    pub fn residuals(&self) -> Residuals {
        self.residuals
    }

    pub fn n(&self) -> usize {
        self.dict.n()
    }

    pub fn d(&self) -> usize {
        self.dict.d()
    }

    pub fn phrase_matrix(&self, x: &[usize]) -> Result<ScaledMatrix> {
        self.dict.phrase_matrix(x)
    }

    /// `q(x) = tr(P_L A P_R A*)` in scaled form. The empty phrase gives
    /// `tr(P_L P_R)`.
    pub fn trace_density(&self, x: &[usize]) -> Result<ScaledValue> {
        let a = self.phrase_matrix(x)?;
        Ok(self.trace_density_of(&a))
    }

    pub(crate) fn trace_density_of(&self, a: &ScaledMatrix) -> ScaledValue {
        let b = &a.mantissa;
        let left = self.p_left.matrix() * b;
        let right = self.p_right.matrix() * b.adjoint();
        ScaledValue {
            mantissa: linalg::trace_of_product(&left, &right).re,
            exp2: 2 * a.exp2,
        }
    }

    /// `q(x)` as a plain float.
    pub fn prob(&self, x: &[usize]) -> Result<f64> {
        Ok(self.trace_density(x)?.value())
    }

    /// `p_i = q(prefix · w_i) / q(prefix)`.
    pub fn conditional_next(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut env = LeftEnvironment::new(self);
        for &i in prefix {
            self.dict.check_phrase(&[i])?;
            env.push(self, i);
        }
        env.conditional(self)
            .ok_or_else(|| TdmError::UndefinedConditional {
                prefix: prefix.to_vec(),
            })
    }

    /// Draw a phrase word by word from the model's conditionals.
    pub fn sample_phrase(&self, length: usize, seed: u64) -> Result<Vec<usize>> {
        self.sample_phrase_with(length, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_phrase_with<R: Rng>(&self, length: usize, mut rng: R) -> Result<Vec<usize>> {
        if length == 0 {
            return Err(TdmError::Argument("sample length must be positive".into()));
        }
        if self.residuals.max() > SAMPLING_RESIDUAL_TOL {
            return Err(TdmError::Constraint(format!(
                "model residuals (left {:e}, right {:e}, trace {:e}) exceed {SAMPLING_RESIDUAL_TOL:e}",
                self.residuals.left, self.residuals.right, self.residuals.trace
            )));
        }
        let mut env = LeftEnvironment::new(self);
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            let probs = env.conditional(self).ok_or_else(|| TdmError::Sampling {
                prefix: out.clone(),
                reason: "prefix has zero trace density".into(),
            })?;
            let weights: Vec<f64> = probs.iter().map(|p| p.max(0.0)).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| TdmError::Sampling {
                prefix: out.clone(),
                reason: e.to_string(),
            })?;
            let next = dist.sample(&mut rng);
            env.push(self, next);
            out.push(next);
        }
        Ok(out)
    }

    /// Mean `ln q` over the length-`k` windows of `corpus`.
    pub fn log_likelihood(&self, corpus: &Corpus, k: usize) -> Result<LogLikelihood> {
        self.log_likelihood_ids(corpus.ids(), k)
    }

    pub fn log_likelihood_ids(&self, ids: &[usize], k: usize) -> Result<LogLikelihood> {
        let table = count_windows(ids, k)?;
        let mut total = 0.0;
        for (window, &count) in &table.counts {
            let q = self.trace_density(window)?;
            if q.is_zero() {
                return Err(TdmError::Likelihood {
                    window: window.clone(),
                });
            }
            total += count as f64 * q.ln();
        }
        let mean_log_q = total / table.positions as f64;
        Ok(LogLikelihood {
            k,
            windows: table.positions,
            mean_log_q,
            perplexity: (-mean_log_q / k as f64).exp(),
        })
    }

    /// The same model with replaced parts; residuals are recomputed.
    pub fn with_parts(&self, dict: Dictionary, p_left: Density, p_right: Density) -> Result<Self> {
        Self::new(self.vocab.clone(), dict, p_left, p_right)
    }
}

/// Result of [`TraceDensityModel::log_likelihood`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihood {
    pub k: usize,
    pub windows: u64,
    pub mean_log_q: f64,
    /// `exp(−mean_log_q / k)`
    pub perplexity: f64,
}

/// `A* P_L A` for a growing prefix `A`, kept in scaled form.
struct LeftEnvironment {
    env: CMatrix,
}

impl LeftEnvironment {
    fn new(model: &TraceDensityModel) -> Self {
        LeftEnvironment {
            env: model.p_left.matrix().clone(),
        }
    }

    fn push(&mut self, model: &TraceDensityModel, word: usize) {
        let m = model.dict.mat(word);
        let mut s = ScaledMatrix {
            mantissa: m.adjoint() * &self.env * m,
            exp2: 0,
        };
        s.renormalize();
        self.env = s.mantissa;
    }

    fn conditional(&self, model: &TraceDensityModel) -> Option<Vec<f64>> {
        let p_right = model.p_right.matrix();
        let denom = linalg::trace_of_product(&self.env, p_right).re;
        if denom <= ZERO_FLOOR {
            return None;
        }
        Some(
            model
                .dict
                .mats()
                .iter()
                .map(|m| {
                    let next = m.adjoint() * &self.env * m;
                    linalg::trace_of_product(&next, p_right).re / denom
                })
                .collect(),
        )
    }
}
