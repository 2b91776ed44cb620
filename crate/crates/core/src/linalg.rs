//! Dense symmetric linear algebra for ridge regressors.
//!
//! A [`GramState`] keeps `lambda * I + sum x x^T` together with its inverse.
//! The inverse is updated with the Sherman-Morrison identity and fully
//! re-inverted every `recompute_interval` updates to bound drift.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_RECOMPUTE_INTERVAL: u64 = 64;

/// Quadratic forms more negative than this are reported as numeric errors on
/// paths that assume a true inverse.
const NEGATIVE_FORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    lambda_reg: f64,
    gram: DMatrix<f64>,
    inv: DMatrix<f64>,
    n_updates: u64,
    recompute_interval: u64,
}

impl GramState {
    pub fn new(dim: usize, lambda_reg: f64) -> Result<Self> {
        Self::with_recompute_interval(dim, lambda_reg, DEFAULT_RECOMPUTE_INTERVAL)
    }

    pub fn with_recompute_interval(
        dim: usize,
        lambda_reg: f64,
        recompute_interval: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("feature dimension must be at least 1"));
        }
        if !(lambda_reg.is_finite() && lambda_reg > 0.0) {
            return Err(Error::config(format!(
                "regularizer must be positive and finite, got {lambda_reg}"
            )));
        }
        if recompute_interval == 0 {
            return Err(Error::config("recompute interval must be at least 1"));
        }
        Ok(GramState {
            lambda_reg,
            gram: DMatrix::identity(dim, dim) * lambda_reg,
            inv: DMatrix::identity(dim, dim) / lambda_reg,
            n_updates: 0,
            recompute_interval,
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn inv(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn n_updates(&self) -> u64 {
        self.n_updates
    }

    pub fn recompute_interval(&self) -> u64 {
        self.recompute_interval
    }

    /// Adds `x x^T` to the Gram matrix and refreshes the inverse.
    pub fn rank_one_update(&mut self, x: &DVector<f64>) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_finite(x.as_slice())?;
        self.gram.ger(1.0, x, x, 1.0);
        self.n_updates += 1;
        if self.n_updates.is_multiple_of(self.recompute_interval) {
            self.recompute_inverse()
        } else {
            let inv_x = &self.inv * x;
            let denom = 1.0 + x.dot(&inv_x);
            self.inv.ger(-1.0 / denom, &inv_x, &inv_x, 1.0);
            Ok(())
        }
    }

    /// Replaces the maintained inverse with a direct (Cholesky) inversion.
    pub fn recompute_inverse(&mut self) -> Result<()> {
        self.inv = direct_inverse(&self.gram)?;
        Ok(())
    }

    /// `inv * rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), rhs.len())?;
        Ok(&self.inv * rhs)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.gram
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest entrywise deviation of `inv * gram` from the identity.
    pub fn inverse_residual(&self) -> f64 {
        let prod = &self.inv * &self.gram;
        let dim = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn direct_inverse(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = matrix
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    Ok(chol.inverse())
}

/// `sqrt(x^T inv x)` for a true inverse of a positive definite matrix.
pub fn induced_norm(inv: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    check_dim(inv.nrows(), x.len())?;
    let form = quadratic_form(inv, x);
    if !form.is_finite() {
        return Err(Error::numeric("non-finite quadratic form"));
    }
    if form < -NEGATIVE_FORM_TOL {
        return Err(Error::numeric(format!(
            "negative quadratic form {form:e} for a matrix assumed positive definite"
        )));
    }
    Ok(form.max(0.0).sqrt())
}

/// `sqrt(|x^T rinv x|)`: rounded matrices need not be positive semidefinite.
pub fn rounded_induced_norm(rinv: &RoundedInverse, x: &DVector<f64>) -> f64 {
    quadratic_form(&rinv.entries, x).abs().sqrt()
}

fn quadratic_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[i];
        }
        total += col * xj;
    }
    total
}

/// Rounds `value` up to the grid `eps * Z` so the result `r` satisfies
/// `0 <= r - value < eps`, including for negative values.
pub fn round_up_scalar(value: f64, eps: f64) -> f64 {
    let mut n = (value / eps).ceil();
    while n * eps < value {
        n += 1.0;
    }
    while (n - 1.0) * eps >= value {
        n -= 1.0;
    }
    // Avoid emitting -0.0 for values in (-eps, 0].
    n * eps + 0.0
}

pub fn round_up(values: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    check_finite(values)?;
    Ok(values.iter().map(|&v| round_up_scalar(v, eps)).collect())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!(
            "rounding width must be positive and finite, got {eps}"
        )));
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::config(format!(
            "dimension mismatch: expected {expected}, got {got}"
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("non-finite entry"))
    }
}

/// Entrywise upward rounding of an inverse Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundedInverse {
    entries: DMatrix<f64>,
    eps_rnd: f64,
}

impl RoundedInverse {
    pub fn from_inverse(inv: &DMatrix<f64>, eps_rnd: f64) -> Result<Self> {
        let rounded = round_up(inv.as_slice(), eps_rnd)?;
        Ok(RoundedInverse {
            entries: DMatrix::from_vec(inv.nrows(), inv.ncols(), rounded),
            eps_rnd,
        })
    }

    /// Wraps an already-rounded matrix without re-rounding it.
    pub fn from_entries(entries: DMatrix<f64>, eps_rnd: f64) -> Self {
        RoundedInverse { entries, eps_rnd }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn eps_rnd(&self) -> f64 {
        self.eps_rnd
    }
}

/// Least-squares weights with their upward-rounded mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    entries: DVector<f64>,
    rounded: DVector<f64>,
    eps_rnd: f64,
}

impl WeightVector {
    pub fn new(entries: DVector<f64>, eps_rnd: f64) -> Result<Self> {
        let rounded = DVector::from_vec(round_up(entries.as_slice(), eps_rnd)?);
        Ok(WeightVector {
            entries,
            rounded,
            eps_rnd,
        })
    }

    pub fn zeros(dim: usize, eps_rnd: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), eps_rnd)
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    pub fn rounded(&self) -> &DVector<f64> {
        &self.rounded
    }

    pub fn eps_rnd(&self) -> f64 {
        self.eps_rnd
    }
}

/// Solves the ridge system for `rows`, which must be exactly the rows already
/// folded into `state`.
pub fn least_squares_weights<'a, I>(state: &GramState, rows: I, eps_rnd: f64) -> Result<WeightVector>
where
    I: IntoIterator<Item = (&'a DVector<f64>, f64)>,
{
    let mut rhs = DVector::zeros(state.dim());
    let mut count = 0u64;
    for (x, y) in rows {
        check_dim(state.dim(), x.len())?;
        rhs.axpy(y, x, 1.0);
        count += 1;
    }
    if count != state.n_updates() {
        return Err(Error::logic(format!(
            "{count} regression rows supplied but the Gram state absorbed {} updates",
            state.n_updates()
        )));
    }
    WeightVector::new(state.solve(&rhs)?, eps_rnd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn random_unit_ball(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let scale: f64 = rng.gen_range(0.0..=1.0);
        let norm = x.norm();
        if norm == 0.0 { x } else { x * (scale / norm) }
    }

    #[test]
    fn identity_basis_update() {
        let mut g = GramState::new(2, 16.0).unwrap();
        g.rank_one_update(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(g.gram(), &DMatrix::from_row_slice(2, 2, &[17.0, 0.0, 0.0, 16.0]));
        assert!((g.inv()[(0, 0)] - 1.0 / 17.0).abs() < 1e-15);
        assert_eq!(g.n_updates(), 1);
    }

    #[test]
    fn zero_vector_is_a_no_op() {
        let mut g = GramState::new(2, 1.0).unwrap();
        g.rank_one_update(&v(&[0.0, 0.0])).unwrap();
        assert_eq!(g.gram(), &DMatrix::identity(2, 2));
        assert_eq!(g.inv(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn diagonal_outer_product() {
        let mut g = GramState::new(2, 16.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        g.rank_one_update(&v(&[s, s])).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[16.5, 0.5, 0.5, 16.5]);
        assert!((g.gram() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn update_rejects_bad_input() {
        let mut g = GramState::new(2, 1.0).unwrap();
        assert!(matches!(g.rank_one_update(&v(&[1.0])), Err(Error::Config(_))));
        assert!(matches!(
            g.rank_one_update(&v(&[f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
        assert!(GramState::new(0, 1.0).is_err());
        assert!(GramState::new(2, 0.0).is_err());
    }

    #[test]
    fn induced_norm_examples() {
        let inv = DMatrix::identity(3, 3) / 16.0;
        assert!((induced_norm(&inv, &v(&[0.0, 1.0, 0.0])).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(induced_norm(&inv, &v(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        let inv = DMatrix::from_row_slice(2, 2, &[1.0 / 17.0, 0.0, 0.0, 1.0 / 16.0]);
        let n = induced_norm(&inv, &v(&[1.0, 0.0])).unwrap();
        assert!((n - 0.242_535_625_036_333).abs() < 1e-12);
    }

    #[test]
    fn induced_norm_rejects_negative_forms() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]);
        assert!(matches!(induced_norm(&m, &v(&[1.0, -1.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn rounded_norm_examples() {
        let zero = RoundedInverse::from_entries(DMatrix::zeros(2, 2), 0.01);
        assert_eq!(rounded_induced_norm(&zero, &v(&[0.3, -0.7])), 0.0);

        let r = RoundedInverse::from_inverse(&DMatrix::from_element(1, 1, 1.0 / 16.0), 0.01).unwrap();
        assert!((r.entries()[(0, 0)] - 0.07).abs() < 1e-15);
        assert!((rounded_induced_norm(&r, &v(&[1.0])) - 0.264_575_131_106_459).abs() < 1e-12);

        let m = RoundedInverse::from_entries(DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0]), 0.1);
        assert!((rounded_induced_norm(&m, &v(&[1.0, -1.0])) - 0.447_213_595_499_958).abs() < 1e-12);
    }

    #[test]
    fn round_up_examples() {
        assert_eq!(round_up(&[0.0], 0.37).unwrap(), vec![0.0]);
        assert_eq!(round_up(&[0.3], 0.25).unwrap(), vec![0.5]);
        assert_eq!(round_up(&[-0.3], 0.25).unwrap(), vec![-0.25]);
        assert!(matches!(round_up(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(round_up(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn round_up_stays_on_grid_for_awkward_widths() {
        for &x in &[0.3, 0.7, 1e-17, -1e-17, 2.0 / 3.0, -5.55] {
            let r = round_up_scalar(x, 0.1);
            assert!(r >= x && r - x < 0.1, "x={x} r={r}");
        }
    }

    #[test]
    fn least_squares_scalar_examples() {
        let g = GramState::new(1, 16.0).unwrap();
        let w = least_squares_weights(&g, std::iter::empty(), 0.01).unwrap();
        assert_eq!(w.entries()[0], 0.0);

        let one = v(&[1.0]);
        let mut g = GramState::new(1, 16.0).unwrap();
        g.rank_one_update(&one).unwrap();
        let w = least_squares_weights(&g, [(&one, 1.0)], 1e-6).unwrap();
        assert!((w.entries()[0] - 1.0 / 17.0).abs() < 1e-15);

        g.rank_one_update(&one).unwrap();
        let w = least_squares_weights(&g, [(&one, 1.0), (&one, 1.0)], 1e-6).unwrap();
        assert!((w.entries()[0] - 1.0 / 9.0).abs() < 1e-15);
        let diff = w.rounded()[0] - w.entries()[0];
        assert!((0.0..1e-6).contains(&diff));
    }

    #[test]
    fn least_squares_detects_row_mismatch() {
        let one = v(&[1.0]);
        let g = GramState::new(1, 16.0).unwrap();
        assert!(matches!(
            least_squares_weights(&g, [(&one, 1.0)], 0.01),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn incremental_inverse_tracks_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &dim in &[1usize, 4, 16] {
            let mut g = GramState::new(dim, 1.0).unwrap();
            for _ in 0..1000 {
                g.rank_one_update(&random_unit_ball(&mut rng, dim)).unwrap();
            }
            let direct = direct_inverse(g.gram()).unwrap();
            assert!((g.inv() - direct).abs().max() <= 1e-8);
            assert!(g.inverse_residual() <= 1e-8);
            assert!(g.min_eigenvalue() >= 1.0 - 1e-9);
        }
    }

    proptest! {
        #[test]
        fn round_up_is_idempotent_and_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, k in 1u32..20) {
            let eps = 2f64.powi(-(k as i32)) / 3.0;
            let ra = round_up_scalar(a, eps);
            prop_assert!(ra >= a && ra - a < eps);
            prop_assert_eq!(round_up_scalar(ra, eps), ra);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_up_scalar(lo, eps) <= round_up_scalar(hi, eps));
        }

        #[test]
        fn induced_norm_is_bounded_by_regularizer(seed in any::<u64>(), n in 0usize..40, dim in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = GramState::new(dim, 16.0).unwrap();
            for _ in 0..n {
                g.rank_one_update(&random_unit_ball(&mut rng, dim)).unwrap();
            }
            let x = random_unit_ball(&mut rng, dim);
            prop_assert!(induced_norm(g.inv(), &x).unwrap() <= x.norm() / 4.0 + 1e-9);
        }

        #[test]
        fn rounding_error_bounds_hold(seed in any::<u64>(), n in 0usize..30, dim in 1usize..6, k in 2u32..14) {
            let eps = 2f64.powi(-(k as i32)) / dim as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = GramState::new(dim, 16.0).unwrap();
            let mut rows = Vec::new();
            for _ in 0..n {
                let x = random_unit_ball(&mut rng, dim);
                g.rank_one_update(&x).unwrap();
                rows.push((x, rng.gen_range(0.0..4.0)));
            }
            let w = least_squares_weights(&g, rows.iter().map(|(x, y)| (x, *y)), eps).unwrap();
            let rinv = RoundedInverse::from_inverse(g.inv(), eps).unwrap();
            let phi = random_unit_ball(&mut rng, dim);
            let dw = (phi.dot(w.entries()) - phi.dot(w.rounded())).abs();
            prop_assert!(dw <= (dim as f64).sqrt() * eps + 1e-12);
            let dn = (induced_norm(g.inv(), &phi).unwrap() - rounded_induced_norm(&rinv, &phi)).abs();
            prop_assert!(dn <= (dim as f64 * eps).sqrt() + 1e-12);
        }
    }
}
