//! Transfer channels of a dictionary and the operations built on them.
//!
//! The right channel `A ↦ Σ M_i A M_i*` and the left channel
//! `A ↦ Σ M_i* A M_i` are completely positive maps with Kraus family
//! `{M_i}`; they are adjoint to each other under `⟨A, B⟩ = tr(A* B)`.
//! `P_R` is a fixed point of the right channel and `P_L` of the left one.
//!
//! In the gauge `P_L = I` the left constraint reads `Σ M_i* M_i = I`, i.e. the
//! stacked `nd×d` matrix `[M_1; …; M_n]` is an isometry. Those dictionaries
//! form a complex Stiefel manifold, which is where training happens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TdmError};
use crate::linalg::{self, c, frobenius, CMatrix};
use crate::model::{Density, Dictionary, TraceDensityModel};

/// Default tolerance for [`solve_right_density`].
pub const DEFAULT_FP_TOL: f64 = 1e-10;
/// Default iteration cap for [`solve_right_density`].
pub const DEFAULT_FP_MAX_ITER: usize = 10_000;
/// Left residual allowed on entry to the fixed-point solver.
pub const LEFT_PRECONDITION_TOL: f64 = 1e-8;

fn check_dim(dict: &Dictionary, a: &CMatrix) -> Result<()> {
    if a.nrows() != dict.d() || a.ncols() != dict.d() {
        return Err(TdmError::Argument(format!(
            "matrix is {}×{}, dictionary bond dimension is {}",
            a.nrows(),
            a.ncols(),
            dict.d()
        )));
    }
    Ok(())
}

/// `Σ_i M_i A M_i*`.
pub fn apply_right_channel(dict: &Dictionary, a: &CMatrix) -> Result<CMatrix> {
    check_dim(dict, a)?;
    let mut out = linalg::zeros(dict.d(), dict.d());
    for m in dict.mats() {
        out += m * a * m.adjoint();
    }
    Ok(out)
}

/// `Σ_i M_i* A M_i`.
pub fn apply_left_channel(dict: &Dictionary, a: &CMatrix) -> Result<CMatrix> {
    check_dim(dict, a)?;
    let mut out = linalg::zeros(dict.d(), dict.d());
    for m in dict.mats() {
        out += m.adjoint() * a * m;
    }
    Ok(out)
}

/// Outcome of the right fixed-point solve.
#[derive(Clone, Debug)]
pub struct FixedPointResult {
    pub density: Density,
    pub iterations: usize,
    /// `‖M̂(P) − P‖_F` of `density`.
    pub residual: f64,
    /// `tr(P_L M̂(P))` of `density`, before any renormalization.
    pub eigvalue_estimate: f64,
}

/// Find `P ⪰ 0` with `Σ M_i P M_i* = P` and `tr(P_L P) = 1`, starting from
/// `I / tr(P_L)`.
pub fn solve_right_density(
    dict: &Dictionary,
    p_left: &Density,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    solve_right_density_from(dict, p_left, None, tol, max_iter)
}

/// [`solve_right_density`] warm-started from `init` when given.
///
/// Normalized power iteration `A ← M̂(A) / tr(P_L M̂(A))`, re-Hermitized at
/// each step. With the left constraint in force the map preserves the convex
/// set `{A ⪰ 0 : tr(P_L A) = 1}`, and the iteration converges when the
/// channel's peripheral eigenvalue 1 is simple.
///
/// When the slowest residual mode has negative real eigenvalue (a nearly
/// periodic channel), the step is damped to the convex combination
/// `(1 − α) A + α M̂(A)/tr(P_L M̂(A))` with `α ∈ [1/2, 1]` chosen from the
/// observed decay of successive residuals. Iterates never leave the feasible
/// set, and `α = 1` whenever the slow mode is non-negative.
pub fn solve_right_density_from(
    dict: &Dictionary,
    p_left: &Density,
    init: Option<&CMatrix>,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(TdmError::Argument("fixed-point tolerance must be positive".into()));
    }
    let pl = p_left.matrix();
    check_dim(dict, pl)?;
    let left_residual = frobenius(&(apply_left_channel(dict, pl)? - pl));
    if left_residual > LEFT_PRECONDITION_TOL * frobenius(pl).max(1.0) {
        return Err(TdmError::Constraint(format!(
            "left density constraint violated (residual {left_residual:e})"
        )));
    }

    let start = match init {
        Some(a) => {
            check_dim(dict, a)?;
            a.clone()
        }
        None => linalg::identity(dict.d()),
    };
    let norm = linalg::trace_of_product(pl, &start).re;
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(TdmError::Argument(format!(
            "initial point has tr(P_L A) = {norm:e}, cannot normalize"
        )));
    }
    let mut a = linalg::hermitize(&(start * c(1.0 / norm, 0.0)));

    let mut best: Option<(CMatrix, usize, f64, f64)> = None;
    let mut previous: Option<(CMatrix, f64)> = None;
    for iter in 0..=max_iter {
        let ma = apply_right_channel(dict, &a)?;
        let step = &ma - &a;
        let residual = frobenius(&step);
        let eig = linalg::trace_of_product(pl, &ma).re;
        if best.as_ref().is_none_or(|b| residual < b.2) {
            best = Some((a.clone(), iter, residual, eig));
        }
        if residual <= tol {
            return Ok(FixedPointResult {
                density: Density::new(a)?,
                iterations: iter,
                residual,
                eigvalue_estimate: eig,
            });
        }
        if iter == max_iter || !(eig > 0.0) || !eig.is_finite() {
            break;
        }
        let alpha = previous
            .as_ref()
            .map_or(1.0, |(prev, prev_alpha)| damping(prev, *prev_alpha, &step));
        let target = ma * c(1.0 / eig, 0.0);
        a = linalg::hermitize(&(&a * c(1.0 - alpha, 0.0) + target * c(alpha, 0.0)));
        previous = Some((step, alpha));
    }

    let (a, iterations, residual, eig) = best.expect("loop runs at least once");
    Err(TdmError::NonConvergence {
        best: Box::new(FixedPointResult {
            density: Density::new(a)?,
            iterations,
            residual,
            eigvalue_estimate: eig,
        }),
    })
}

/// Step size for the next fixed-point iteration.
///
/// With step `α`, successive residuals obey `R' ≈ (1 − α) R + α M̂(R)`, so
/// `μ = Re⟨R, M̂(R)⟩ / ‖R‖²` is read off without another channel
/// application. For `μ < 0` the damped map has eigenvalue
/// `1 − α + αμ`, which `α = 1/(1 − μ)` sends to zero.
fn damping(prev: &CMatrix, prev_alpha: f64, step: &CMatrix) -> f64 {
    let norm2 = prev.iter().map(|z| z.norm_sqr()).sum::<f64>();
    if norm2 == 0.0 {
        return 1.0;
    }
    let applied = (step - prev * c(1.0 - prev_alpha, 0.0)) * c(1.0 / prev_alpha, 0.0);
    let mu = linalg::trace_of_product(&prev.adjoint(), &applied).re / norm2;
    if mu < 0.0 && mu.is_finite() {
        (1.0 / (1.0 - mu)).clamp(0.5, 1.0)
    } else {
        1.0
    }
}

/// Replace the dictionary stack by its polar factor, the nearest isometry in
/// Frobenius norm.
pub fn project_isometry(dict: &Dictionary) -> Result<Dictionary> {
    let u = linalg::polar_factor(&dict.stack()).ok_or_else(|| {
        TdmError::Projection("dictionary stack does not have full column rank".into())
    })?;
    Dictionary::from_stack(&u)
}

/// `‖Σ M_i* M_i − I‖_F`.
pub fn isometry_residual(dict: &Dictionary) -> f64 {
    linalg::isometry_defect(&dict.stack())
}

/// A dictionary drawn from i.i.d. standard complex Gaussians and projected
/// onto the isometric dictionaries.
pub fn random_isometric_dictionary(n: usize, d: usize, seed: u64) -> Result<Dictionary> {
    if n == 0 || d == 0 {
        return Err(TdmError::Argument("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    loop {
        let mats: Vec<CMatrix> = (0..n)
            .map(|_| {
                CMatrix::from_fn(d, d, |_, _| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    c(re * s, im * s)
                })
            })
            .collect();
        match project_isometry(&Dictionary::new(mats)?) {
            Ok(dict) => return Ok(dict),
            // probability zero; draw again from the same stream
            Err(TdmError::Projection(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Conjugate a model by an invertible `g`:
/// `M_i ← g M_i g⁻¹`, `P_R ← g P_R g*`, `P_L ← g⁻* P_L g⁻¹`.
pub fn gauge_transform(model: &TraceDensityModel, g: &CMatrix) -> Result<TraceDensityModel> {
    let d = model.d();
    if g.nrows() != d || g.ncols() != d {
        return Err(TdmError::Argument(format!("gauge must be {d}×{d}")));
    }
    let sv = linalg::singular_values(g);
    let (smax, smin) = (sv[0], sv[d - 1]);
    if !linalg::is_finite(g) || smax == 0.0 || smin <= d as f64 * f64::EPSILON * smax {
        return Err(TdmError::Argument("gauge matrix is singular".into()));
    }
    let g_inv = g
        .clone()
        .try_inverse()
        .ok_or_else(|| TdmError::Argument("gauge matrix is singular".into()))?;
    let mats = model.dict().mats().iter().map(|m| g * m * &g_inv).collect();
    let p_right = linalg::hermitize(&(g * model.p_right().matrix() * g.adjoint()));
    let p_left = linalg::hermitize(&(g_inv.adjoint() * model.p_left().matrix() * &g_inv));
    model.with_parts(Dictionary::new(mats)?, Density::new(p_left)?, Density::new(p_right)?)
}
