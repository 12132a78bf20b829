//! Dense symmetric positive-definite matrices and the running information
//! matrix used by greedy D-optimal selection.
//!
//! [`InformationState`] keeps `H`, an explicit inverse maintained by
//! Sherman–Morrison updates, and `log det H` maintained through the matrix
//! determinant lemma. Every [`DEFAULT_REFRESH_EVERY`] updates the inverse and
//! log-determinant are recomputed from a fresh Cholesky factorization so that
//! round-off cannot accumulate without bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Number of rank-one updates between Cholesky refreshes.
pub const DEFAULT_REFRESH_EVERY: usize = 64;

/// A symmetric matrix intended to be positive definite.
///
/// Construction symmetrizes the input as `(M + Mᵀ)/2`. Positive definiteness
/// is not checked until a factorization is requested.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(invalid(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self(sym))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self(DMatrix::identity(dim, dim) * scale)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        Cholesky::factor(&self.0)
    }

    /// `self += alpha · v vᵀ`.
    fn add_outer(&mut self, alpha: f64, v: &DVector<f64>) {
        self.0.ger(alpha, v, v, 1.0);
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors the lower triangle of `a`. Fails with the index of the first
    /// leading minor whose pivot is not strictly positive.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(invalid("cholesky of a non-square matrix"));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NumericFailure { minor: j });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut DVector<f64>) {
        let n = self.l.nrows();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut DVector<f64>) {
        let n = self.l.nrows();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::<f64>::zeros(n);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.set_column(j, &col);
        }
        (&inv + inv.transpose()) * 0.5
    }
}

/// The information matrix `H_k = γI + α Σ v vᵀ` of a partially built design.
#[derive(Clone, Debug)]
pub struct InformationState {
    h: SpdMatrix,
    h_inv: SpdMatrix,
    logdet: f64,
    updates_since_refresh: usize,
    gamma: f64,
    alpha: f64,
    refresh_every: usize,
}

impl InformationState {
    /// `H_0 = γI` with Fisher scale `alpha` applied to every later update.
    pub fn new(gamma: f64, alpha: f64, dim: usize) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(invalid(format!(
                "ridge gamma must be positive, got {gamma}"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(invalid(format!(
                "Fisher scale alpha must be >= 0, got {alpha}"
            )));
        }
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        Ok(Self {
            h: SpdMatrix::scaled_identity(dim, gamma),
            h_inv: SpdMatrix::scaled_identity(dim, 1.0 / gamma),
            logdet: dim as f64 * gamma.ln(),
            updates_since_refresh: 0,
            gamma,
            alpha,
            refresh_every: DEFAULT_REFRESH_EVERY,
        })
    }

    pub fn with_refresh_every(mut self, every: usize) -> Self {
        self.refresh_every = every.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn h(&self) -> &SpdMatrix {
        &self.h
    }

    pub fn h_inv(&self) -> &SpdMatrix {
        &self.h_inv
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn updates_since_refresh(&self) -> usize {
        self.updates_since_refresh
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(invalid(format!(
                "vector has length {}, information matrix is {}x{}",
                v.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `vᵀ H⁻¹ v`, clamped at zero.
    pub fn quad_form(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(v)?;
        let q = (&self.h_inv.0 * v).dot(v);
        Ok(q.max(0.0))
    }

    /// `log det(H + α v vᵀ) − log det H = log(1 + α vᵀH⁻¹v)`.
    pub fn logdet_gain(&self, v: &DVector<f64>) -> Result<f64> {
        Ok((self.alpha * self.quad_form(v)?).ln_1p())
    }

    /// `H ← H + α v vᵀ`, with the inverse updated by Sherman–Morrison.
    pub fn apply_update(&mut self, v: &DVector<f64>) -> Result<()> {
        self.check_dim(v)?;
        let u = &self.h_inv.0 * v;
        let quad = u.dot(v).max(0.0);
        let denom = 1.0 + self.alpha * quad;
        self.h.add_outer(self.alpha, v);
        self.h_inv.0.ger(-self.alpha / denom, &u, &u, 1.0);
        self.logdet += (self.alpha * quad).ln_1p();
        self.updates_since_refresh += 1;
        if self.updates_since_refresh >= self.refresh_every {
            self.refresh()?;
        }
        Ok(())
    }

    /// Recomputes the inverse and log-determinant from a fresh Cholesky
    /// factorization of `H`.
    pub fn refresh(&mut self) -> Result<()> {
        let chol = self.h.cholesky()?;
        self.h_inv = SpdMatrix(chol.inverse());
        self.logdet = chol.logdet();
        self.updates_since_refresh = 0;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn h_inv_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.h_inv.0
    }

    #[cfg(test)]
    pub(crate) fn h_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.h.0
    }
}

/// `H_0 = γI`; see [`InformationState::new`].
pub fn init_information(gamma: f64, alpha: f64, dim: usize) -> Result<InformationState> {
    InformationState::new(gamma, alpha, dim)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lu_logdet(m: &DMatrix<f64>) -> f64 {
        m.clone().lu().determinant().ln()
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.next_gaussian());
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn state_from(h: DMatrix<f64>, alpha: f64) -> InformationState {
        let mut st = InformationState::new(1.0, alpha, h.nrows()).unwrap();
        *st.h_mut() = h;
        st.refresh().unwrap();
        st
    }

    #[test]
    fn init_identity() {
        let st = init_information(1.0, 1.0, 2).unwrap();
        assert_eq!(st.logdet(), 0.0);
        assert_eq!(st.h_inv().as_matrix(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(st.updates_since_refresh(), 0);
    }

    #[test]
    fn init_small_ridge() {
        let st = init_information(0.1, 0.005, 3).unwrap();
        assert_abs_diff_eq!(st.logdet(), 3.0 * 0.1f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(st.logdet(), -6.907755278982137, epsilon = 1e-12);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(matches!(
            init_information(0.0, 1.0, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            init_information(-1.0, 1.0, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            init_information(1.0, 1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gain_on_identity() {
        let st = init_information(1.0, 1.0, 2).unwrap();
        let g = st.logdet_gain(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(g, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(st.logdet_gain(&DVector::zeros(2)).unwrap(), 0.0);
        assert!(st.logdet_gain(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn gain_matches_fresh_logdets() {
        for seed in 0..20 {
            let d = 2 + (seed as usize % 6);
            let h = random_spd(d, seed);
            let alpha = 0.3 + seed as f64 * 0.1;
            let st = state_from(h.clone(), alpha);
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed + 100);
            let v = DVector::from_fn(d, |_, _| rng.next_gaussian());
            let mut h2 = h.clone();
            h2.ger(alpha, &v, &v, 1.0);
            let expected = lu_logdet(&h2) - lu_logdet(&h);
            assert_abs_diff_eq!(st.logdet_gain(&v).unwrap(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn quad_form_examples() {
        let st = init_information(1.0, 1.0, 2).unwrap();
        assert_abs_diff_eq!(
            st.quad_form(&DVector::from_vec(vec![3.0, 4.0])).unwrap(),
            25.0,
            epsilon = 1e-12
        );
        let st = state_from(
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.01, 0.01])),
            1.0,
        );
        assert_abs_diff_eq!(
            st.quad_form(&DVector::from_vec(vec![0.0, 1.0])).unwrap(),
            100.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn quad_form_matches_linear_solve() {
        for seed in 0..20 {
            let d = 3 + (seed as usize % 5);
            let h = random_spd(d, seed);
            let st = state_from(h.clone(), 1.0);
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed + 7);
            let v = DVector::from_fn(d, |_, _| rng.next_gaussian());
            let x = h.clone().lu().solve(&v).unwrap();
            let expected = v.dot(&x);
            let got = st.quad_form(&v).unwrap();
            assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn update_on_identity() {
        let mut st = init_information(1.0, 1.0, 2).unwrap();
        st.apply_update(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        assert_abs_diff_eq!(st.h_inv().as_matrix(), &expect, epsilon = 1e-15);
        assert_abs_diff_eq!(st.logdet(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(st.updates_since_refresh(), 1);
    }

    #[test]
    fn zero_update_only_bumps_counter() {
        let mut st = init_information(0.5, 2.0, 3).unwrap();
        let before = st.clone();
        st.apply_update(&DVector::zeros(3)).unwrap();
        assert_eq!(st.h(), before.h());
        assert_eq!(st.h_inv(), before.h_inv());
        assert_eq!(st.logdet(), before.logdet());
        assert_eq!(st.updates_since_refresh(), 1);
    }

    #[test]
    fn refresh_is_idempotent_on_exact_state() {
        let mut st = init_information(1.0, 1.0, 3).unwrap();
        st.apply_update(&DVector::from_vec(vec![1.0, 2.0, 0.5]))
            .unwrap();
        let before = st.clone();
        st.refresh().unwrap();
        assert_abs_diff_eq!(
            st.h_inv().as_matrix(),
            before.h_inv().as_matrix(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(st.logdet(), before.logdet(), epsilon = 1e-12);
        assert_eq!(st.updates_since_refresh(), 0);
    }

    #[test]
    fn refresh_repairs_perturbed_inverse() {
        let h = random_spd(5, 3);
        let mut st = state_from(h.clone(), 1.0);
        let exact = st.h_inv().as_matrix().clone();
        st.h_inv_mut()[(1, 2)] += 1e-6;
        st.h_inv_mut()[(2, 1)] += 1e-6;
        st.refresh().unwrap();
        assert_abs_diff_eq!(st.h_inv().as_matrix(), &exact, epsilon = 1e-10);
    }

    #[test]
    fn refresh_reports_failing_minor() {
        let mut st = init_information(1.0, 1.0, 3).unwrap();
        st.h_mut()[(2, 2)] = -1.0;
        match st.refresh() {
            Err(Error::NumericFailure { minor }) => assert_eq!(minor, 2),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn automatic_refresh_resets_counter() {
        let mut st = init_information(1.0, 1.0, 2).unwrap().with_refresh_every(4);
        for _ in 0..4 {
            st.apply_update(&DVector::from_vec(vec![0.3, 0.1])).unwrap();
        }
        assert_eq!(st.updates_since_refresh(), 0);
    }

    #[test]
    fn fifty_unit_updates_track_fresh_inverse() {
        let d = 8;
        let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(11);
        let mut st = init_information(0.1, 1.0, d).unwrap();
        for _ in 0..50 {
            let mut v = DVector::from_fn(d, |_, _| rng.next_gaussian());
            v /= v.norm();
            st.apply_update(&v).unwrap();
        }
        let fresh = st.h().as_matrix().clone().try_inverse().unwrap();
        assert!((st.h_inv().as_matrix() - fresh).norm() <= 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sherman_morrison_tracks_direct_inverse(
            seed in any::<u64>(),
            d in 1usize..=32,
            updates in 1usize..=64,
            alpha in 0.01f64..2.0,
        ) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let mut st = init_information(0.5, alpha, d).unwrap().with_refresh_every(usize::MAX);
            let mut prev = st.logdet();
            for _ in 0..updates {
                let v = DVector::from_fn(d, |_, _| rng.next_gaussian());
                st.apply_update(&v).unwrap();
                prop_assert!(st.logdet() > prev);
                prev = st.logdet();
            }
            let direct = st.h().as_matrix().clone().try_inverse().unwrap();
            let dev = (st.h_inv().as_matrix() - &direct).norm();
            prop_assert!(dev <= 1e-8, "frobenius deviation {dev}");
            let product = st.h().as_matrix() * st.h_inv().as_matrix();
            let id_dev = (product - DMatrix::<f64>::identity(d, d)).amax();
            prop_assert!(id_dev <= 1e-8);
            prop_assert!((st.logdet() - lu_logdet(st.h().as_matrix())).abs() <= 1e-8);
        }

        #[test]
        fn determinant_lemma(seed in any::<u64>(), d in 1usize..=12, alpha in 0.0f64..3.0) {
            let h = random_spd(d, seed);
            let st = state_from(h.clone(), alpha);
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed ^ 0xabc);
            let v = DVector::from_fn(d, |_, _| rng.next_gaussian());
            let mut h2 = h.clone();
            h2.ger(alpha, &v, &v, 1.0);
            let lhs = lu_logdet(&h2);
            let rhs = lu_logdet(&h) + st.logdet_gain(&v).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn diminishing_returns(seed in any::<u64>(), d in 1usize..=8, chain in 1usize..=10) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let probe = DVector::from_fn(d, |_, _| rng.next_gaussian());
            let mut st = init_information(0.2, 0.7, d).unwrap();
            let mut last = st.logdet_gain(&probe).unwrap();
            for _ in 0..chain {
                let v = DVector::from_fn(d, |_, _| rng.next_gaussian());
                st.apply_update(&v).unwrap();
                let g = st.logdet_gain(&probe).unwrap();
                prop_assert!(g <= last + 1e-12);
                last = g;
            }
        }
    }
}
