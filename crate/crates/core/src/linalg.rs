//! Dense matrix support shared by every other module: exact and randomized
//! SVD, truncation and reconstruction.
//!
//! Matrices are `ndarray::Array2<f64>` in standard (row-major) layout. The
//! exact SVD delegates to `nalgebra`; the randomized range finder is built
//! here on top of it.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Entries below this magnitude are skipped when choosing column signs.
const SIGN_EPS: f64 = 1e-12;

/// `W = U diag(sigma) V^T` with `sigma` sorted descending.
///
/// `u` is `m x k`, `v` is `n x k`; `k = min(m, n)` for [`svd_full`] and the
/// requested rank for [`svd_randomized`].
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Array1<f64>,
    pub v: Matrix,
}

/// Leading `r` singular triplets of a factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncated {
    pub u: Matrix,
    pub s: Array1<f64>,
    pub v: Matrix,
}

/// Defaults for the randomized path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RandomizedParams {
    pub oversampling: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for RandomizedParams {
    fn default() -> Self {
        Self {
            oversampling: 10,
            power_iters: 2,
            seed: 0,
        }
    }
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        reconstruct(&self.u, &self.sigma, &self.v)
    }
}

impl Truncated {
    pub fn reconstruct(&self) -> Matrix {
        reconstruct(&self.u, &self.s, &self.v)
    }
}

pub fn ensure_finite(w: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if w.nrows() == 0 || w.ncols() == 0 {
        return Err(Error::invalid(format!("{what}: empty matrix")));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite entry")));
    }
    Ok(())
}

/// `u diag(s) v^T`.
pub fn reconstruct(u: &Matrix, s: &Array1<f64>, v: &Matrix) -> Matrix {
    let mut us = u.clone();
    for (mut col, &sv) in us.axis_iter_mut(Axis(1)).zip(s.iter()) {
        col *= sv;
    }
    us.dot(&v.t())
}

pub fn frobenius_sq(w: &Matrix) -> f64 {
    w.iter().map(|x| x * x).sum()
}

pub(crate) fn to_na(w: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]])
}

pub(crate) fn from_na(w: &DMatrix<f64>) -> Matrix {
    Array2::from_shape_fn((w.nrows(), w.ncols()), |(i, j)| w[(i, j)])
}

/// Full thin SVD. Columns are signed so that the first non-negligible entry
/// of every `u` column is positive.
pub fn svd_full(w: &Matrix) -> Result<SvdFactors> {
    ensure_finite(w.view(), "svd_full")?;
    let svd = to_na(w.view()).svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let (m, n, k) = (w.nrows(), w.ncols(), sigma.len());
    let mut out_u = Array2::zeros((m, k));
    let mut out_v = Array2::zeros((n, k));
    let mut out_s = Array1::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        out_s[dst] = sigma[src].max(0.0);
        for i in 0..m {
            out_u[[i, dst]] = u[(i, src)];
        }
        for j in 0..n {
            out_v[[j, dst]] = v_t[(src, j)];
        }
    }
    let mut f = SvdFactors {
        u: out_u,
        sigma: out_s,
        v: out_v,
    };
    fix_signs(&mut f);
    Ok(f)
}

fn fix_signs(f: &mut SvdFactors) {
    for j in 0..f.sigma.len() {
        let first = f.u.column(j).iter().copied().find(|x| x.abs() > SIGN_EPS);
        if matches!(first, Some(x) if x < 0.0) {
            f.u.column_mut(j).mapv_inplace(|x| -x);
            f.v.column_mut(j).mapv_inplace(|x| -x);
        }
    }
}

/// Orthonormal basis for the column space of `y` via Householder QR.
fn orthonormalize(y: &Matrix) -> Matrix {
    let qr = to_na(y.view()).qr();
    from_na(&qr.q())
}

/// Randomized range finder with power iterations, returning the top `k`
/// singular triplets. Deterministic for a fixed seed.
pub fn svd_randomized(w: &Matrix, k: usize, params: RandomizedParams) -> Result<SvdFactors> {
    ensure_finite(w.view(), "svd_randomized")?;
    let (m, n) = w.dim();
    let full = m.min(n);
    if k == 0 || k > full {
        return Err(Error::invalid(format!(
            "svd_randomized: k = {k} outside 1..={full}"
        )));
    }
    let width = (k + params.oversampling).min(full);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let omega = Array2::from_shape_simple_fn((n, width), || StandardNormal.sample(&mut rng));

    let mut q = orthonormalize(&w.dot(&omega));
    for _ in 0..params.power_iters {
        let z = orthonormalize(&w.t().dot(&q));
        q = orthonormalize(&w.dot(&z));
    }

    let b = q.t().dot(w);
    let small = svd_full(&b)?;
    let mut f = SvdFactors {
        u: q.dot(&small.u).slice(s![.., ..k]).to_owned(),
        sigma: small.sigma.slice(s![..k]).to_owned(),
        v: small.v.slice(s![.., ..k]).to_owned(),
    };
    fix_signs(&mut f);
    Ok(f)
}

/// Leading `r` columns and values of `f`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<Truncated> {
    if r == 0 || r > f.rank() {
        return Err(Error::invalid(format!(
            "truncate: rank {r} outside 1..={}",
            f.rank()
        )));
    }
    Ok(Truncated {
        u: f.u.slice(s![.., ..r]).to_owned(),
        s: f.sigma.slice(s![..r]).to_owned(),
        v: f.v.slice(s![.., ..r]).to_owned(),
    })
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rel_recon_error(w: &Matrix, f: &SvdFactors) -> f64 {
        let diff = w - &f.reconstruct();
        (frobenius_sq(&diff) / frobenius_sq(w).max(1e-300)).sqrt()
    }

    /// Singular values from the eigenvalues of `w^T w`, independent of the SVD path.
    fn eigen_oracle(w: &Matrix) -> Vec<f64> {
        let gram = to_na(w.view()).transpose() * to_na(w.view());
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        vals.truncate(w.nrows().min(w.ncols()));
        vals
    }

    #[test]
    fn diagonal_matrix() {
        let f = svd_full(&diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.sigma.to_vec(), vec![3.0, 2.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(f.u[[i, j]].abs(), want, epsilon = 1e-12);
                assert_abs_diff_eq!(f.v[[i, j]].abs(), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix() {
        let f = svd_full(&Array2::zeros((4, 3))).unwrap();
        assert_eq!(f.sigma.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut w = random_matrix(3, 3, 1);
        w[[1, 1]] = f64::NAN;
        assert!(matches!(svd_full(&w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_matrix_against_eigen_oracle() {
        let w = random_matrix(8, 6, 42);
        let f = svd_full(&w).unwrap();
        assert!(rel_recon_error(&w, &f) < 1e-6);
        assert!(max_orthonormality_error(&f.u) < 1e-6);
        assert!(max_orthonormality_error(&f.v) < 1e-6);
        for (got, want) in f.sigma.iter().zip(eigen_oracle(&w)) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn wide_matrix() {
        let w = random_matrix(5, 9, 3);
        let f = svd_full(&w).unwrap();
        assert_eq!(f.u.dim(), (5, 5));
        assert_eq!(f.v.dim(), (9, 5));
        assert!(rel_recon_error(&w, &f) < 1e-10);
    }

    #[test]
    fn sign_convention() {
        let f = svd_full(&random_matrix(7, 4, 9)).unwrap();
        for j in 0..4 {
            let first = f.u.column(j).iter().copied().find(|x| x.abs() > SIGN_EPS).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn randomized_well_separated() {
        let w = diag(&[5.0, 4.0, 3.0, 0.01]);
        let p = RandomizedParams {
            oversampling: 2,
            power_iters: 2,
            seed: 0,
        };
        let f = svd_randomized(&w, 2, p).unwrap();
        assert_abs_diff_eq!(f.sigma[0], 5.0, epsilon = 1e-4);
        assert_abs_diff_eq!(f.sigma[1], 4.0, epsilon = 1e-4);
    }

    #[test]
    fn randomized_full_width_matches_exact() {
        let w = random_matrix(10, 7, 5);
        let exact = svd_full(&w).unwrap();
        let p = RandomizedParams {
            oversampling: 0,
            power_iters: 1,
            seed: 11,
        };
        let f = svd_randomized(&w, 7, p).unwrap();
        for (a, b) in f.sigma.iter().zip(exact.sigma.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn randomized_top_k_of_larger_matrix() {
        // Decaying spectrum so the leading values are resolvable.
        let base = random_matrix(64, 32, 8);
        let f0 = svd_full(&base).unwrap();
        let decay = Array1::from_shape_fn(32, |i| 0.8f64.powi(i as i32));
        let w = reconstruct(&f0.u, &decay, &f0.v);
        let exact = svd_full(&w).unwrap();
        let f = svd_randomized(&w, 8, RandomizedParams::default()).unwrap();
        for i in 0..8 {
            let rel = (f.sigma[i] - exact.sigma[i]).abs() / exact.sigma[i];
            assert!(rel < 1e-3, "sigma[{i}] rel err {rel}");
        }
    }

    #[test]
    fn randomized_is_deterministic_and_checks_k() {
        let w = random_matrix(12, 9, 1);
        let p = RandomizedParams::default();
        assert_eq!(svd_randomized(&w, 4, p).unwrap(), svd_randomized(&w, 4, p).unwrap());
        assert!(svd_randomized(&w, 0, p).is_err());
        assert!(svd_randomized(&w, 10, p).is_err());
    }

    #[test]
    fn truncate_cases() {
        let f = svd_full(&diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(truncate(&f, 2).unwrap().s.to_vec(), vec![3.0, 2.0]);
        let t = truncate(&f, 3).unwrap();
        assert_eq!((t.u, t.s, t.v), (f.u.clone(), f.sigma.clone(), f.v.clone()));
        assert!(truncate(&f, 0).is_err());
        assert!(truncate(&f, 4).is_err());
    }

    #[test]
    fn truncation_residual_is_eckart_young() {
        let w = random_matrix(8, 6, 21);
        let f = svd_full(&w).unwrap();
        let t = truncate(&f, 3).unwrap();
        let resid = frobenius_sq(&(&w - &t.reconstruct()));
        let tail: f64 = f.sigma.iter().skip(3).map(|s| s * s).sum();
        assert_abs_diff_eq!(resid, tail, epsilon = 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn energy_identity_and_monotone_residual(m in 1usize..9, n in 1usize..9, seed in 0u64..1000) {
            let w = random_matrix(m, n, seed);
            let f = svd_full(&w).unwrap();
            let energy: f64 = f.sigma.iter().map(|s| s * s).sum();
            let fro = frobenius_sq(&w);
            prop_assert!((energy - fro).abs() <= 1e-8 * fro.max(1.0));
            prop_assert!(f.sigma.windows(2).into_iter().all(|p| p[0] >= p[1]));

            let mut prev = f64::INFINITY;
            for r in 1..=f.rank() {
                let resid = frobenius_sq(&(&w - &truncate(&f, r).unwrap().reconstruct()));
                prop_assert!(resid <= prev + 1e-10);
                prev = resid;
            }
        }
    }
}
