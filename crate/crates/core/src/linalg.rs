//! Dense kernels: thin SVD, truncation with singular-value absorption,
//! thresholded pseudoinverse, damped Cholesky whitening and the
//! retention-to-rank rule.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Default relative damping for whitening, as a fraction of the mean Gram diagonal.
pub const DEFAULT_REL_DAMPING: f64 = 1e-5;

/// Number of 10x damping escalations tried by [`Whitener::with_retries`].
pub const DAMPING_RETRIES: usize = 5;

/// Thin SVD `a = u * diag(sigma) * vt` with `sigma` non-increasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Mat,
    pub sigma: DVector<f64>,
    pub vt: Mat,
}

impl SvdFactors {
    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.vt.ncols()
    }

    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.vt
    }
}

/// Two factors replacing a dense `m x n` matrix: `u_sigma` (`m x k`) and
/// `vt_sigma` (`k x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub u_sigma: Mat,
    pub vt_sigma: Mat,
}

impl LowRankPair {
    pub fn new(u_sigma: Mat, vt_sigma: Mat) -> Result<Self> {
        let k = u_sigma.ncols();
        if vt_sigma.nrows() != k {
            return Err(Error::Shape(format!(
                "factor inner dimensions disagree: u is {}x{}, vt is {}x{}",
                u_sigma.nrows(),
                k,
                vt_sigma.nrows(),
                vt_sigma.ncols()
            )));
        }
        let max = u_sigma.nrows().min(vt_sigma.ncols());
        if k == 0 || k > max {
            return Err(Error::Rank { rank: k, max });
        }
        Ok(Self { u_sigma, vt_sigma })
    }

    pub fn rank(&self) -> usize {
        self.u_sigma.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.u_sigma.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.vt_sigma.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.u_sigma.len() + self.vt_sigma.len()
    }

    pub fn product(&self) -> Mat {
        &self.u_sigma * &self.vt_sigma
    }

    /// `u_sigma * (vt_sigma * x)` without forming the dense product.
    pub fn apply(&self, x: &Mat) -> Mat {
        &self.u_sigma * (&self.vt_sigma * x)
    }
}

/// Cholesky factor `s` of a damped Gram matrix together with its inverse.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub s: Mat,
    pub s_inv: Mat,
    pub damping: f64,
}

impl Whitener {
    /// Runs [`cholesky_damped`], escalating the damping tenfold up to
    /// [`DAMPING_RETRIES`] times before giving up.
    pub fn with_retries(g: &Mat, rel_damping: f64) -> Result<Self> {
        let mut rel = rel_damping;
        let mut last = match cholesky_damped(g, rel) {
            Ok(w) => return Ok(w),
            Err(e) => e,
        };
        for _ in 0..DAMPING_RETRIES {
            rel = if rel > 0.0 { rel * 10.0 } else { 1e-12 };
            match cholesky_damped(g, rel) {
                Ok(w) => return Ok(w),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }
}

pub fn frobenius(a: &Mat) -> f64 {
    a.norm()
}

fn ensure_finite(a: &Mat, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} contains non-finite entries"
        )))
    }
}

/// Thin SVD of `a`; `r = min(m, n)` triplets sorted by decreasing singular value.
pub fn svd_full(a: &Mat) -> Result<SvdFactors> {
    ensure_finite(a, "svd input")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!(
            "cannot decompose an empty {m}x{n} matrix"
        )));
    }
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = fa
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD of {m}x{n} matrix did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let r = m.min(n);
    Ok(SvdFactors {
        u: Mat::from_fn(m, r, |i, j| u[(i, j)]),
        sigma: DVector::from_fn(r, |i, _| s[i]),
        vt: Mat::from_fn(r, n, |i, j| v[(j, i)]),
    })
}

/// Upper-trapezoidal `r` (`min(t, n) x n`) from the thin QR of `x^T`, for
/// `x` of shape `n x t`. It satisfies `r^T r = x x^T` and `||d x||_F =
/// ||d r^T||_F` for any `d`, so token-dimension work can be done once.
pub fn data_factor(x: &Mat) -> Result<Mat> {
    ensure_finite(x, "activations")?;
    let (n, t) = x.shape();
    if n == 0 || t == 0 {
        return Err(Error::Shape(format!(
            "cannot factor an empty {n}x{t} matrix"
        )));
    }
    let xt = faer::Mat::<f64>::from_fn(t, n, |i, j| x[(j, i)]);
    let qr = xt.qr();
    let r = qr.thin_R();
    Ok(Mat::from_fn(r.nrows(), n, |i, j| {
        if j >= i {
            r[(i, j)]
        } else {
            0.0
        }
    }))
}

/// `r^T r` with the lower triangle mirrored from the upper.
pub fn gram_from_factor(r: &Mat) -> Mat {
    symmetrize_upper(r.transpose() * r)
}

pub(crate) fn symmetrize_upper(mut g: Mat) -> Mat {
    let n = g.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// Keeps the leading `k` triplets and splits `sqrt(sigma)` into both factors.
pub fn truncate_absorb(f: &SvdFactors, k: usize) -> Result<LowRankPair> {
    let max = f.sigma.len();
    if k == 0 || k > max {
        return Err(Error::Rank { rank: k, max });
    }
    let mut u = f.u.columns(0, k).into_owned();
    let mut vt = f.vt.rows(0, k).into_owned();
    for i in 0..k {
        let root = f.sigma[i].sqrt();
        u.column_mut(i).scale_mut(root);
        vt.row_mut(i).scale_mut(root);
    }
    Ok(LowRankPair {
        u_sigma: u,
        vt_sigma: vt,
    })
}

/// Default pseudoinverse threshold: `max(m, n) * eps`.
pub fn default_rel_tol(m: usize, n: usize) -> f64 {
    m.max(n) as f64 * f64::EPSILON
}

/// Number of singular values strictly above `rel_tol * sigma_max`.
pub fn numerical_rank(sigma: &DVector<f64>, rel_tol: f64) -> usize {
    let smax = sigma.iter().copied().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let cut = rel_tol * smax;
    sigma.iter().filter(|&&s| s > cut).count()
}

/// Moore-Penrose pseudoinverse `V diag(1/sigma) U^T`, dropping singular
/// values at or below `rel_tol * sigma_max`.
pub fn pinv(a: &Mat, rel_tol: f64) -> Result<Mat> {
    if !(rel_tol > 0.0) {
        return Err(Error::Config(format!(
            "pinv tolerance must be positive, got {rel_tol}"
        )));
    }
    let (m, n) = a.shape();
    let f = svd_full(a)?;
    let r = numerical_rank(&f.sigma, rel_tol);
    if r == 0 {
        return Ok(Mat::zeros(n, m));
    }
    // Leading r right singular vectors as columns, each divided by its sigma.
    let mut v = f.vt.rows(0, r).transpose();
    for i in 0..r {
        v.column_mut(i).scale_mut(1.0 / f.sigma[i]);
    }
    Ok(v * f.u.columns(0, r).transpose())
}

/// `k = floor(r * m * n / (m + n))`, clamped to `[1, min(m, n)]`.
pub fn rank_for_retention(m: usize, n: usize, r: f64) -> usize {
    let ideal = r * (m * n) as f64 / (m + n) as f64;
    // Guard against values like 24.999999999999996 that are exact integers in real arithmetic.
    let k = (ideal + 1e-9).floor() as usize;
    k.clamp(1, m.min(n).max(1))
}

/// Cholesky factor of `g + lambda * I` with `lambda = rel_damping * mean(diag(g))`.
pub fn cholesky_damped(g: &Mat, rel_damping: f64) -> Result<Whitener> {
    let (n, c) = g.shape();
    if n != c || n == 0 {
        return Err(Error::Shape(format!(
            "Gram matrix must be square, got {n}x{c}"
        )));
    }
    if !(rel_damping >= 0.0) {
        return Err(Error::Config(format!(
            "damping must be non-negative, got {rel_damping}"
        )));
    }
    ensure_finite(g, "Gram matrix")?;
    let scale = g.norm().max(f64::MIN_POSITIVE);
    let asym = (g - g.transpose()).norm();
    if asym > 1e-10 * scale {
        return Err(Error::Shape(format!(
            "Gram matrix is not symmetric (asymmetry {asym:e})"
        )));
    }
    let mean_diag = g.diagonal().mean();
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let damping = rel_damping * base;
    let mut damped = g.clone();
    for i in 0..n {
        damped[(i, i)] += damping;
    }
    let chol = Cholesky::new(damped).ok_or_else(|| {
        Error::Numerical(format!(
            "Cholesky factorization failed for {n}x{n} Gram matrix with damping {damping:e}"
        ))
    })?;
    let s = chol.l();
    let s_inv = s
        .solve_lower_triangular(&Mat::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    ensure_finite(&s_inv, "inverse Cholesky factor")?;
    Ok(Whitener { s, s_inv, damping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: &Mat, b: &Mat) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn identity_singular_values() {
        let f = svd_full(&Mat::identity(4, 4)).unwrap();
        assert!(f.sigma.iter().all(|s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let a = Mat::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let f = svd_full(&a).unwrap();
        let s: Vec<f64> = f.sigma.iter().copied().collect();
        for (got, want) in s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        for (m, n) in [(7, 4), (4, 7), (5, 5)] {
            let a = random(m, n, 3);
            let f = svd_full(&a).unwrap();
            assert!(rel(&f.reconstruct(), &a) <= 1e-10);
            let r = m.min(n);
            assert!((f.u.transpose() * &f.u - Mat::identity(r, r)).norm() < 1e-8);
            assert!((&f.vt * f.vt.transpose() - Mat::identity(r, r)).norm() < 1e-8);
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = Mat::identity(3, 3);
        a[(1, 2)] = f64::NAN;
        assert!(matches!(svd_full(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn truncate_full_rank_is_identity() {
        let a = random(6, 9, 11);
        let f = svd_full(&a).unwrap();
        let p = truncate_absorb(&f, 6).unwrap();
        assert!(rel(&p.product(), &a) <= 1e-10);
    }

    #[test]
    fn truncate_diagonal_drops_last_sigma() {
        let a = Mat::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let p = truncate_absorb(&svd_full(&a).unwrap(), 2).unwrap();
        assert!(((p.product() - &a).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncate_absorbs_square_root() {
        let a = random(5, 4, 2);
        let f = svd_full(&a).unwrap();
        let p = truncate_absorb(&f, 2).unwrap();
        for i in 0..2 {
            let root = f.sigma[i].sqrt();
            assert!((p.u_sigma.column(i) - f.u.column(i) * root).norm() < 1e-14);
            assert!((p.vt_sigma.row(i) - f.vt.row(i) * root).norm() < 1e-14);
        }
    }

    #[test]
    fn truncate_rank_out_of_range() {
        let f = svd_full(&random(3, 4, 1)).unwrap();
        assert!(matches!(truncate_absorb(&f, 0), Err(Error::Rank { .. })));
        assert!(matches!(
            truncate_absorb(&f, 4),
            Err(Error::Rank { rank: 4, max: 3 })
        ));
    }

    #[test]
    fn pinv_identity_and_thresholded_diagonal() {
        let i3 = Mat::identity(3, 3);
        assert!((pinv(&i3, 1e-12).unwrap() - &i3).norm() < 1e-14);
        let d = Mat::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let want = Mat::from_diagonal(&DVector::from_vec(vec![0.5, 0.0]));
        assert!((pinv(&d, default_rel_tol(2, 2)).unwrap() - want).norm() < 1e-15);
    }

    #[test]
    fn pinv_of_zero_is_zero_transpose_shape() {
        let z = Mat::zeros(3, 5);
        let p = pinv(&z, 1e-10).unwrap();
        assert_eq!(p.shape(), (5, 3));
        assert_eq!(p.norm(), 0.0);
    }

    #[test]
    fn pinv_rejects_non_positive_tolerance() {
        assert!(matches!(
            pinv(&Mat::identity(2, 2), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rank_for_retention_examples() {
        assert_eq!(rank_for_retention(100, 100, 0.5), 25);
        assert_eq!(rank_for_retention(4096, 4096, 0.6), 1228);
        assert_eq!(rank_for_retention(8, 8, 0.01), 1);
        assert_eq!(rank_for_retention(3, 5, 1.0), 1);
        assert_eq!(rank_for_retention(64, 64, 1.0), 32);
    }

    #[test]
    fn cholesky_trivial_cases() {
        let w = cholesky_damped(&Mat::identity(3, 3), 0.0).unwrap();
        assert!((w.s - Mat::identity(3, 3)).norm() < 1e-15);
        let g = Mat::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let w = cholesky_damped(&g, 0.0).unwrap();
        let want = Mat::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((w.s - want).norm() < 1e-15);
        assert_eq!(w.damping, 0.0);
    }

    #[test]
    fn cholesky_damping_is_relative_to_mean_diagonal() {
        let g = Mat::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let w = cholesky_damped(&g, 0.5).unwrap();
        assert!((w.damping - 1.5).abs() < 1e-15);
    }

    #[test]
    fn cholesky_fails_on_singular_without_damping_and_retry_recovers() {
        let x = Mat::from_column_slice(2, 1, &[1.0, 2.0]);
        let g = &x * x.transpose();
        assert!(matches!(cholesky_damped(&g, 0.0), Err(Error::Numerical(_))));
        let w = Whitener::with_retries(&g, 0.0).unwrap();
        assert!(w.damping > 0.0);
        assert!((&w.s * &w.s_inv - Mat::identity(2, 2)).norm() < 1e-6);
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let g = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(cholesky_damped(&g, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn low_rank_pair_validates_shapes() {
        assert!(LowRankPair::new(Mat::zeros(4, 2), Mat::zeros(3, 5)).is_err());
        assert!(LowRankPair::new(Mat::zeros(4, 0), Mat::zeros(0, 5)).is_err());
        let p = LowRankPair::new(Mat::zeros(4, 2), Mat::zeros(2, 5)).unwrap();
        assert_eq!(p.param_count(), 2 * (4 + 5));
    }

    #[test]
    fn data_factor_reproduces_gram_and_norms() {
        for (n, t) in [(6, 40), (8, 3)] {
            let x = random(n, t, 17);
            let r = data_factor(&x).unwrap();
            assert_eq!(r.shape(), (n.min(t), n));
            let g = x.clone() * x.transpose();
            assert!((gram_from_factor(&r) - &g).norm() <= 1e-12 * g.norm());
            let d = random(5, n, 18);
            let direct = (&d * &x).norm();
            assert!(((&d * r.transpose()).norm() - direct).abs() <= 1e-12 * direct);
        }
    }
}
