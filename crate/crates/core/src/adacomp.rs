//! Adaptive compensation of SVD truncation error.
//!
//! After truncation the two factors are refit in turn against the data-space
//! loss `||U Vt X - W X||_F^2`: `U` as the minimum-norm least-squares
//! solution through the pseudoinverse of `(Vt X)^T`, then `Vt` as `U^+ W`.
//!
//! Internally `X` enters only through the triangular factor `R` of
//! `X^T = Q R`: `||D X|| = ||D R^T||` and `(Vt X)^T = Q (R Vt^T)`, so the
//! pseudoinverse is taken of the small `R Vt^T`, which has the same singular
//! values as `(Vt X)^T`.

use crate::error::{Error, Result};
use crate::linalg::{
    data_factor, default_rel_tol, pinv, svd_full, truncate_absorb, LowRankPair, Mat, Whitener,
};

/// Default number of alternating rounds.
pub const DEFAULT_ITERATIONS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CompLossTrace {
    /// Loss of the truncated initialization.
    pub initial: f64,
    /// Loss after each half-step: U-update, V-update, U-update, ...
    pub per_half_step: Vec<f64>,
    pub iterations: usize,
}

impl CompLossTrace {
    pub fn best(&self) -> f64 {
        self.per_half_step
            .iter()
            .copied()
            .fold(self.initial, f64::min)
    }

    /// `(half_step, loss)` rows with the initialization as half-step 0.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        std::iter::once(self.initial)
            .chain(self.per_half_step.iter().copied())
            .enumerate()
    }
}

fn check_conformable(pair: &LowRankPair, w: &Mat, x: &Mat) -> Result<()> {
    if w.shape() != (pair.nrows(), pair.ncols()) {
        return Err(Error::Shape(format!(
            "factors give {}x{}, weight is {}x{}",
            pair.nrows(),
            pair.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if x.nrows() != w.ncols() {
        return Err(Error::Shape(format!(
            "activations have {} rows, weight has {} columns",
            x.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

fn residual_loss(u: &Mat, vt: &Mat, x: &Mat, wx: &Mat) -> f64 {
    (u * (vt * x) - wx).norm_squared()
}

/// `||u vt r^T - w r^T||^2` with `wr = w r^T`.
fn factored_loss(u: &Mat, vt: &Mat, r: &Mat, wr: &Mat) -> f64 {
    residual_loss(u, vt, &r.transpose(), wr)
}

pub fn svd_loss(pair: &LowRankPair, w: &Mat, x: &Mat) -> Result<f64> {
    check_conformable(pair, w, x)?;
    Ok(residual_loss(&pair.u_sigma, &pair.vt_sigma, x, &(w * x)))
}

fn solve_u(vt: &Mat, r: &Mat, wr: &Mat, tokens: usize, rel_tol: Option<f64>) -> Result<Mat> {
    // A = (Vt X)^T = Q (R Vt^T); U = (A^+ (W X)^T)^T = W R^T ((R Vt^T)^+)^T.
    let a = r * vt.transpose();
    let tol = rel_tol.unwrap_or_else(|| default_rel_tol(tokens, a.ncols()));
    Ok(wr * pinv(&a, tol)?.transpose())
}

fn solve_v(u: &Mat, w: &Mat, rel_tol: Option<f64>) -> Result<Mat> {
    if u.iter().all(|v| *v == 0.0) {
        return Err(Error::Numerical(
            "cannot refit Vt from an all-zero U".into(),
        ));
    }
    let tol = rel_tol.unwrap_or_else(|| default_rel_tol(u.nrows(), u.ncols()));
    Ok(pinv(u, tol)? * w)
}

/// Refit of `u_sigma` with `vt_sigma` held fixed: the minimum-norm minimizer
/// of `||A U^T - B||_F` with `A = X^T Vt^T` and `B = (W X)^T`.
///
/// `rel_tol` is the pseudoinverse cut-off relative to the largest singular
/// value of `A`; `None` uses `max(tokens, k) * eps`.
pub fn update_u(pair: &LowRankPair, w: &Mat, x: &Mat, rel_tol: Option<f64>) -> Result<Mat> {
    check_conformable(pair, w, x)?;
    if x.ncols() == 0 {
        return Err(Error::Shape("activations have no columns".into()));
    }
    let r = data_factor(x)?;
    solve_u(&pair.vt_sigma, &r, &(w * r.transpose()), x.ncols(), rel_tol)
}

/// Refit of `vt_sigma` with `u_sigma` held fixed: `u_sigma^+ * w`.
pub fn update_v(pair: &LowRankPair, w: &Mat, rel_tol: Option<f64>) -> Result<Mat> {
    if w.shape() != (pair.nrows(), pair.ncols()) {
        return Err(Error::Shape(format!(
            "factors give {}x{}, weight is {}x{}",
            pair.nrows(),
            pair.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if !pair.u_sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("u_sigma has non-finite entries".into()));
    }
    solve_v(&pair.u_sigma, w, rel_tol)
}

/// Truncated SVD initialization, whitened when `whitener` is given.
///
/// With a whitener `S` (lower Cholesky factor of the input Gram matrix), the
/// decomposition is of `W S`; the right factor is mapped back through `S^-1`.
pub fn initial_pair(w: &Mat, k: usize, whitener: Option<&Whitener>) -> Result<LowRankPair> {
    match whitener {
        None => truncate_absorb(&svd_full(w)?, k),
        Some(wh) => {
            if wh.dim() != w.ncols() {
                return Err(Error::Shape(format!(
                    "whitener is {0}x{0}, weight has {1} columns",
                    wh.dim(),
                    w.ncols()
                )));
            }
            let pair = truncate_absorb(&svd_full(&(w * &wh.s))?, k)?;
            Ok(LowRankPair {
                vt_sigma: pair.vt_sigma * &wh.s_inv,
                u_sigma: pair.u_sigma,
            })
        }
    }
}

/// Truncates `w` to rank `k` and runs `iterations` alternating (U, Vt)
/// refits against the unwhitened data-space loss.
///
/// Returns the pair with the lowest loss seen at any half-step, so the
/// result is never worse than the initialization.
pub fn ada_comp(
    w: &Mat,
    x: &Mat,
    k: usize,
    iterations: usize,
    rel_tol: Option<f64>,
    whitener: Option<&Whitener>,
) -> Result<(LowRankPair, CompLossTrace)> {
    if x.nrows() != w.ncols() {
        return Err(Error::Shape(format!(
            "activations have {} rows, weight has {} columns",
            x.nrows(),
            w.ncols()
        )));
    }
    let r = data_factor(x)?;
    ada_comp_factored(w, &r, x.ncols(), k, iterations, rel_tol, whitener)
}

/// [`ada_comp`] given `r` from [`data_factor`] of activations with `tokens`
/// columns.
pub fn ada_comp_factored(
    w: &Mat,
    r: &Mat,
    tokens: usize,
    k: usize,
    iterations: usize,
    rel_tol: Option<f64>,
    whitener: Option<&Whitener>,
) -> Result<(LowRankPair, CompLossTrace)> {
    if r.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "activation factor has {} columns, weight has {}",
            r.ncols(),
            w.ncols()
        )));
    }
    let max = w.nrows().min(w.ncols());
    if k == 0 || k > max {
        return Err(Error::Rank { rank: k, max });
    }
    let wr = w * r.transpose();
    let init = initial_pair(w, k, whitener)?;
    let initial = factored_loss(&init.u_sigma, &init.vt_sigma, r, &wr);

    let mut best = init.clone();
    let mut best_loss = initial;
    let mut vt = init.vt_sigma;
    let mut per_half_step = Vec::with_capacity(2 * iterations);
    for _ in 0..iterations {
        let u = solve_u(&vt, r, &wr, tokens, rel_tol)?;
        let loss = factored_loss(&u, &vt, r, &wr);
        per_half_step.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = LowRankPair {
                u_sigma: u.clone(),
                vt_sigma: vt.clone(),
            };
        }

        vt = solve_v(&u, w, rel_tol)?;
        let loss = factored_loss(&u, &vt, r, &wr);
        per_half_step.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = LowRankPair {
                u_sigma: u.clone(),
                vt_sigma: vt.clone(),
            };
        }
    }
    if !per_half_step.iter().all(|l| l.is_finite()) {
        return Err(Error::Numerical(
            "non-finite loss during compensation".into(),
        ));
    }
    Ok((
        best,
        CompLossTrace {
            initial,
            per_half_step,
            iterations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky_damped;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Element-by-element residual, independent of matrix products.
    fn brute_loss(pair: &LowRankPair, w: &Mat, x: &Mat) -> f64 {
        let (m, n, k, t) = (w.nrows(), w.ncols(), pair.rank(), x.ncols());
        let mut total = 0.0;
        for i in 0..m {
            for c in 0..t {
                let mut approx = 0.0;
                let mut exact = 0.0;
                for j in 0..n {
                    let mut wij = 0.0;
                    for r in 0..k {
                        wij += pair.u_sigma[(i, r)] * pair.vt_sigma[(r, j)];
                    }
                    approx += wij * x[(j, c)];
                    exact += w[(i, j)] * x[(j, c)];
                }
                total += (approx - exact).powi(2);
            }
        }
        total
    }

    #[test]
    fn loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(12, 12, &mut rng);
        let x = random(12, 40, &mut rng);
        let pair = truncate_absorb(&svd_full(&w).unwrap(), 4).unwrap();
        let fast = svd_loss(&pair, &w, &x).unwrap();
        let slow = brute_loss(&pair, &w, &x);
        assert!((fast - slow).abs() <= 1e-10 * slow);
    }

    #[test]
    fn loss_exact_factorization_and_zero_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(6, 5, &mut rng);
        let x = random(5, 9, &mut rng);
        let full = truncate_absorb(&svd_full(&w).unwrap(), 5).unwrap();
        let wx2 = (&w * &x).norm_squared();
        assert!(svd_loss(&full, &w, &x).unwrap() <= 1e-16 * wx2 * 10.0);
        let zero = LowRankPair::new(Mat::zeros(6, 2), random(2, 5, &mut rng)).unwrap();
        assert!((svd_loss(&zero, &w, &x).unwrap() - wx2).abs() <= 1e-12 * wx2);
    }

    #[test]
    fn loss_shape_mismatch() {
        let pair = LowRankPair::new(Mat::zeros(3, 1), Mat::zeros(1, 4)).unwrap();
        assert!(matches!(
            svd_loss(&pair, &Mat::zeros(3, 3), &Mat::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            svd_loss(&pair, &Mat::zeros(3, 4), &Mat::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn update_u_recovers_consistent_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u0 = random(8, 3, &mut rng);
        let v0t = random(3, 6, &mut rng);
        let w = &u0 * &v0t;
        let x = random(6, 20, &mut rng);
        let pair = LowRankPair::new(random(8, 3, &mut rng), v0t.clone()).unwrap();
        let u = update_u(&pair, &w, &x, None).unwrap();
        assert!((u - u0).norm() <= 1e-8);
    }

    #[test]
    fn update_u_with_identity_x_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random(7, 7, &mut rng);
        let vt = random(3, 7, &mut rng);
        let pair = LowRankPair::new(Mat::zeros(7, 3), vt.clone()).unwrap();
        let u = update_u(&pair, &w, &Mat::identity(7, 7), None).unwrap();
        let v = vt.transpose();
        let want = &w * &v * (v.transpose() * &v).try_inverse().unwrap();
        assert!((u - &want).norm() <= 1e-10 * want.norm());
    }

    #[test]
    fn update_v_orthonormal_u_is_transpose_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random(6, 3, &mut rng).qr().q();
        let w = random(6, 4, &mut rng);
        let pair = LowRankPair::new(q.clone(), Mat::zeros(3, 4)).unwrap();
        let vt = update_v(&pair, &w, None).unwrap();
        assert!((vt - q.transpose() * &w).norm() <= 1e-12);
    }

    #[test]
    fn update_v_recovers_consistent_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u0 = random(9, 4, &mut rng);
        let v0t = random(4, 7, &mut rng);
        let w = &u0 * &v0t;
        let pair = LowRankPair::new(u0, Mat::zeros(4, 7)).unwrap();
        assert!((update_v(&pair, &w, None).unwrap() - v0t).norm() <= 1e-8);
    }

    #[test]
    fn update_v_rejects_zero_u() {
        let pair = LowRankPair::new(Mat::zeros(3, 1), Mat::zeros(1, 3)).unwrap();
        assert!(matches!(
            update_v(&pair, &Mat::identity(3, 3), None),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn zero_iterations_is_plain_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(10, 8, &mut rng);
        let x = random(8, 30, &mut rng);
        let (pair, trace) = ada_comp(&w, &x, 3, 0, None, None).unwrap();
        assert_eq!(pair, truncate_absorb(&svd_full(&w).unwrap(), 3).unwrap());
        assert!(trace.per_half_step.is_empty());
        assert_eq!(trace.best(), trace.initial);
    }

    #[test]
    fn identity_data_leaves_svd_optimal() {
        let w = Mat::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0, 0.1]));
        let x = Mat::identity(4, 4);
        let (_, trace) = ada_comp(&w, &x, 3, 1, None, None).unwrap();
        assert!((trace.initial - 0.01).abs() < 1e-12);
        for l in &trace.per_half_step {
            assert!((l - trace.initial).abs() <= 1e-10);
        }
    }

    #[test]
    fn trace_has_two_entries_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random(9, 9, &mut rng);
        let x = random(9, 30, &mut rng);
        let (pair, trace) = ada_comp(&w, &x, 2, 4, None, None).unwrap();
        assert_eq!(trace.per_half_step.len(), 8);
        assert_eq!(trace.rows().count(), 9);
        let got = svd_loss(&pair, &w, &x).unwrap();
        assert!((got - trace.best()).abs() <= 1e-12 * trace.initial);
    }

    #[test]
    fn whitened_init_folds_back_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(6, 5, &mut rng);
        let x = random(5, 50, &mut rng);
        let wh = cholesky_damped(&(&x * x.transpose()), 0.0).unwrap();
        let full = initial_pair(&w, 5, Some(&wh)).unwrap();
        assert!((full.product() - &w).norm() <= 1e-10 * w.norm());
        assert!(initial_pair(
            &w,
            2,
            Some(&cholesky_damped(&Mat::identity(4, 4), 0.0).unwrap())
        )
        .is_err());
    }

    #[test]
    fn rank_out_of_range() {
        let w = Mat::identity(3, 3);
        assert!(matches!(
            ada_comp(&w, &w, 0, 1, None, None),
            Err(Error::Rank { .. })
        ));
        assert!(matches!(
            ada_comp(&w, &w, 4, 1, None, None),
            Err(Error::Rank { .. })
        ));
    }
}
