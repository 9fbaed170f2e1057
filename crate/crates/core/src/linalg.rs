//! Small dense complex linear algebra used throughout the crate.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>`; the decompositions (SVD for the
//! polar factor, Hermitian eigensolver for positivity checks) come from
//! nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

/// Dense complex matrix.
pub type CMatrix = DMatrix<Complex64>;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

pub fn zeros(rows: usize, cols: usize) -> CMatrix {
    CMatrix::zeros(rows, cols)
}

/// Unit matrix `E_{ij}` (zero-based indices).
pub fn unit(d: usize, i: usize, j: usize) -> CMatrix {
    let mut m = zeros(d, d);
    m[(i, j)] = c(1.0, 0.0);
    m
}

pub fn frobenius(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace(a: &CMatrix) -> Complex64 {
    a.diagonal().iter().sum()
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `(A + A*) / 2`.
pub fn hermitize(a: &CMatrix) -> CMatrix {
    (a + a.adjoint()) * c(0.5, 0.0)
}

pub fn is_finite(a: &CMatrix) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `‖A − A*‖_F`.
pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    frobenius(&(a - a.adjoint()))
}

/// Eigenvalues of the Hermitian part of `a`, ascending.
pub fn hermitian_eigenvalues(a: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(hermitize(a))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn min_hermitian_eigenvalue(a: &CMatrix) -> f64 {
    hermitian_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Singular values in descending order.
pub fn singular_values(a: &CMatrix) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Polar factor `U` of a tall matrix `V = U H` with `U*U = I`.
///
/// Returns `None` when `V` does not have full column rank.
pub fn polar_factor(v: &CMatrix) -> Option<CMatrix> {
    let cols = v.ncols();
    if cols == 0 || v.nrows() < cols || !is_finite(v) {
        return None;
    }
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let floor = (v.nrows() as f64) * f64::EPSILON * smax;
    if smax == 0.0 || smin <= floor {
        return None;
    }
    let u = svd.u? * svd.v_t?;
    Some(newton_schulz(u))
}

/// One Newton–Schulz sweep `U (3I − U*U) / 2`, which pulls a near-isometry
/// onto the manifold to working precision.
fn newton_schulz(u: CMatrix) -> CMatrix {
    let d = u.ncols();
    let gram = u.adjoint() * &u;
    let corr = (identity(d) * c(3.0, 0.0) - gram) * c(0.5, 0.0);
    u * corr
}

/// `‖V*V − I‖_F`.
pub fn isometry_defect(v: &CMatrix) -> f64 {
    let d = v.ncols();
    frobenius(&(v.adjoint() * v - identity(d)))
}

/// Multiply every entry by `2^e`; exact barring overflow or underflow.
pub fn scale_pow2(a: &mut CMatrix, e: i32) {
    let s = 2f64.powi(e);
    for z in a.iter_mut() {
        *z *= s;
    }
}

/// Vertically stack `d×d` blocks into an `nd×d` matrix.
pub fn stack(blocks: &[CMatrix]) -> CMatrix {
    let d = blocks.first().map_or(0, |b| b.ncols());
    let mut out = zeros(blocks.len() * d, d);
    for (i, b) in blocks.iter().enumerate() {
        out.view_mut((i * d, 0), (d, d)).copy_from(b);
    }
    out
}

/// Inverse of [`stack`].
pub fn unstack(v: &CMatrix, d: usize) -> Vec<CMatrix> {
    (0..v.nrows() / d)
        .map(|i| v.view((i * d, 0), (d, d)).into_owned())
        .collect()
}

/// Largest entrywise modulus of `a − b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
