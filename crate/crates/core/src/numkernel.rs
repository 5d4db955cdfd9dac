//! Dense linear-algebra kernels for small systems (n ≤ 16 in practice).
//!
//! Storage and LU factorisation come from `nalgebra`; the matrix exponential,
//! Lyapunov/Riccati solvers and the symmetric eigensolver are implemented here
//! so that their accuracy contracts are under our control.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// Degree of the Taylor core used by [`expm`].
const EXPM_TAYLOR_DEGREE: u32 = 13;
/// Scaled argument must satisfy `‖M t‖₁ ≤ EXPM_SQUARING_THRESHOLD` before the series is evaluated.
const EXPM_SQUARING_THRESHOLD: f64 = 0.5;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

const RICCATI_MAX_ITERATIONS: usize = 200;
const RICCATI_STEP_TOL: f64 = 1e-11;
const RICCATI_RESIDUAL_TOL: f64 = 1e-10;

fn ensure_square(m: &DenseMatrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    Ok(m.nrows())
}

/// Induced 1-norm (maximum absolute column sum).
pub fn one_norm(m: &DenseMatrix) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `e^{M t}` by scaling and squaring around a degree-13 Taylor core.
pub fn expm(m: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    let n = ensure_square(m)?;
    let x = m * t;
    let norm = one_norm(&x);
    let squarings =
        if norm > EXPM_SQUARING_THRESHOLD { (norm / EXPM_SQUARING_THRESHOLD).log2().ceil() as i32 } else { 0 };
    let scaled = x / 2f64.powi(squarings);

    // Horner form of I + X (I + X/2 (I + X/3 (...)))
    let identity = DenseMatrix::identity(n, n);
    let mut acc = identity.clone();
    for k in (1..=EXPM_TAYLOR_DEGREE).rev() {
        acc = &identity + (&scaled * acc) / f64::from(k);
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    Ok(acc)
}

/// Solves `A x = b` by LU with partial pivoting.
pub fn solve_linear(a: &DenseMatrix, b: &DenseMatrix, context: &'static str) -> Result<DenseMatrix> {
    a.clone().lu().solve(b).ok_or(Error::Singular(context))
}

/// Solves `Fᵀ P + P F = -Q` through the Kronecker-vectorised system with no
/// stability or definiteness checks.
fn lyapunov_kronecker(f: &DenseMatrix, q: &DenseMatrix) -> Result<DenseMatrix> {
    let n = ensure_square(f)?;
    if q.shape() != (n, n) {
        return Err(Error::InvalidInput(format!("Lyapunov right-hand side must be {n}x{n}, got {:?}", q.shape())));
    }
    let identity = DenseMatrix::identity(n, n);
    let ft = f.transpose();
    // column-major vec: vec(FᵀP) = (I ⊗ Fᵀ) vec(P), vec(PF) = (Fᵀ ⊗ I) vec(P)
    let kron = identity.kronecker(&ft) + ft.kronecker(&identity);
    let rhs = DenseMatrix::from_column_slice(n * n, 1, (-q).as_slice());
    let vec_p = solve_linear(&kron, &rhs, "Lyapunov equation")?;
    let p = DenseMatrix::from_column_slice(n, n, vec_p.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Residual `‖Fᵀ P + P F + Q‖_F`.
pub fn lyapunov_residual(f: &DenseMatrix, p: &DenseMatrix, q: &DenseMatrix) -> f64 {
    (f.transpose() * p + p * f + q).norm()
}

/// Solves the continuous Lyapunov equation `Fᵀ P + P F = -Q` for symmetric
/// positive definite `Q`.
///
/// Fails with [`Error::NotHurwitz`] when the solution is not positive
/// definite, which for `Q ≻ 0` happens exactly when `F` is not Hurwitz.
pub fn solve_lyapunov(f: &DenseMatrix, q: &DenseMatrix) -> Result<DenseMatrix> {
    let n = ensure_square(f)?;
    let q_min = sym_eigen(q)?.min();
    if q_min <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "Lyapunov weight must be positive definite (min eigenvalue {q_min:e})"
        )));
    }
    let p = lyapunov_kronecker(f, q).map_err(|_| Error::NotHurwitz("Lyapunov operator is singular".into()))?;
    let eig = sym_eigen(&p)?;
    if !eig.values.iter().all(|v| v.is_finite()) || eig.min() <= 0.0 {
        return Err(Error::NotHurwitz(format!(
            "Lyapunov solution is not positive definite (eigenvalues in [{:e}, {:e}], n = {n})",
            eig.min(),
            eig.max()
        )));
    }
    Ok(p)
}

/// Certifies `F` Hurwitz by solving `Fᵀ P + P F = -I` and checking `P ≻ 0`.
pub fn is_hurwitz(f: &DenseMatrix) -> bool {
    match ensure_square(f) {
        Ok(n) => solve_lyapunov(f, &DenseMatrix::identity(n, n)).is_ok(),
        Err(_) => false,
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DenseVector,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DenseMatrix,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        &self.vectors * DenseMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn sym_eigen(s: &DenseMatrix) -> Result<SymEigen> {
    let n = ensure_square(s)?;
    if n == 0 {
        return Ok(SymEigen { values: DenseVector::zeros(0), vectors: DenseMatrix::zeros(0, 0) });
    }
    let scale = s.norm().max(1.0);
    let asym = (s - s.transpose()).abs().max();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let mut a = (s + s.transpose()) * 0.5;
    let mut v = DenseMatrix::identity(n, n);

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= JACOBI_OFF_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DenseVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let vectors = DenseMatrix::from_columns(&order.iter().map(|&i| v.column(i).into_owned()).collect::<Vec<_>>());
    Ok(SymEigen { values, vectors })
}

/// Largest singular value, `√λ_max(MᵀM)`.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    let gram = m.transpose() * m;
    Ok(sym_eigen(&gram)?.max().max(0.0).sqrt())
}

/// Solution of the filter algebraic Riccati equation.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DenseMatrix,
    /// Observer gain `L = P C̄ᵀ R⁻¹`.
    pub gain: DenseMatrix,
    pub iterations: usize,
    pub residual: f64,
}

/// Residual `‖A P + P Aᵀ − P C̄ᵀ R⁻¹ C̄ P + Q‖_F`.
pub fn riccati_residual(
    a: &DenseMatrix,
    cbar: &DenseMatrix,
    q: &DenseMatrix,
    r_inv: &DenseMatrix,
    p: &DenseMatrix,
) -> f64 {
    (a * p + p * a.transpose() - p * cbar.transpose() * r_inv * cbar * p + q).norm()
}

/// Stabilising initial gain for the pair `(A, C̄)` by Bass' method applied to
/// the dual pair `(Aᵀ, C̄ᵀ)`.
///
/// Any shift `β` above the spectral abscissa of `A` works in exact
/// arithmetic and places the observer poles left of `−β`, but large shifts
/// make the Gramian `Z` badly conditioned. Shifts are therefore tried from
/// small to large, up to `‖A‖₁ + 1` (which always exceeds the abscissa), and
/// the first certified-stable gain is kept.
fn bass_initial_gain(a: &DenseMatrix, cbar: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.nrows();
    let ceiling = one_norm(a) + 1.0;
    let gram_rhs = cbar.transpose() * cbar * -2.0;
    for k in (0..=8).rev() {
        let beta = ceiling / 2f64.powi(k);
        let shifted = a + DenseMatrix::identity(n, n) * beta;
        // (A + βI)ᵀ Z + Z (A + βI) = 2 C̄ᵀ C̄
        let Ok(z) = lyapunov_kronecker(&shifted, &gram_rhs) else { continue };
        let Ok(gain) = solve_linear(&z, &cbar.transpose(), "Bass gain") else { continue };
        if is_hurwitz(&(a - &gain * cbar)) {
            return Ok(gain);
        }
    }
    Err(Error::NotHurwitz("no stabilising initial observer gain (pair not detectable?)".into()))
}

/// Observer gain from the filter Riccati equation
/// `A P + P Aᵀ − P C̄ᵀ R⁻¹ C̄ P + Q = 0` by Newton–Kleinman iteration.
///
/// Each Newton step is one Lyapunov solve. The iteration starts from `L = 0`
/// when `A` is already Hurwitz and from a Bass gain otherwise.
pub fn solve_riccati_dual(
    a: &DenseMatrix,
    cbar: &DenseMatrix,
    q: &DenseMatrix,
    r: &DenseMatrix,
) -> Result<RiccatiSolution> {
    let n = ensure_square(a)?;
    let ny = cbar.nrows();
    if cbar.ncols() != n || q.shape() != (n, n) || r.shape() != (ny, ny) {
        return Err(Error::InvalidInput("Riccati operand dimensions do not agree".into()));
    }
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular("Riccati measurement weight"))?;

    let mut gain = if is_hurwitz(a) {
        DenseMatrix::zeros(n, ny)
    } else {
        bass_initial_gain(a, cbar).map_err(|_| Error::RiccatiDiverged { iterations: 0, residual: f64::INFINITY })?
    };

    let mut p_prev: Option<DenseMatrix> = None;
    for iteration in 1..=RICCATI_MAX_ITERATIONS {
        let closed = a - &gain * cbar;
        let weight = q + &gain * r * gain.transpose();
        // (A − L C̄) P + P (A − L C̄)ᵀ = −(Q + L R Lᵀ)
        let p = match lyapunov_kronecker(&closed.transpose(), &weight) {
            Ok(p) => p,
            Err(_) => return Err(Error::RiccatiDiverged { iterations: iteration, residual: f64::INFINITY }),
        };
        gain = &p * cbar.transpose() * &r_inv;
        let residual = riccati_residual(a, cbar, q, &r_inv, &p);
        let stalled = p_prev.as_ref().is_some_and(|prev| (&p - prev).norm() <= RICCATI_STEP_TOL * (1.0 + p.norm()));
        if residual <= RICCATI_RESIDUAL_TOL || (stalled && residual <= 1e-8) {
            return Ok(RiccatiSolution { p, gain, iterations: iteration, residual });
        }
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        p_prev = Some(p);
    }
    let residual = p_prev.as_ref().map(|p| riccati_residual(a, cbar, q, &r_inv, p)).unwrap_or(f64::INFINITY);
    Err(Error::RiccatiDiverged { iterations: RICCATI_MAX_ITERATIONS, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let m = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // shift left of the Gershgorin discs
        let shift = one_norm(&m) + 0.5;
        m - DenseMatrix::identity(n, n) * shift
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&DenseMatrix::zeros(4, 4), 3.0).unwrap();
        assert_eq!(e, DenseMatrix::identity(4, 4));
    }

    #[test]
    fn expm_of_nilpotent_block() {
        let m = DenseMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        let e = expm(&m, 0.7).unwrap();
        let expected = DenseMatrix::from_row_slice(2, 2, &[1.0, -0.7, 0.0, 1.0]);
        assert_relative_eq!(e, expected, epsilon = 1e-15);
    }

    #[test]
    fn expm_rejects_non_square() {
        assert!(matches!(expm(&DenseMatrix::zeros(2, 3), 1.0), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn expm_matches_diagonal_and_rotation() {
        let d = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![-3.0, 0.5, 2.0]));
        let e = expm(&d, 1.5).unwrap();
        for (i, lam) in [-3.0f64, 0.5, 2.0].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], (lam * 1.5).exp(), max_relative = 1e-13);
        }
        // large rotation exercises many squarings
        let w = 7.0;
        let rot = DenseMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let e = expm(&rot, 1.0).unwrap();
        assert_relative_eq!(e[(0, 0)], w.cos(), epsilon = 1e-12);
        assert_relative_eq!(e[(0, 1)], w.sin(), epsilon = 1e-12);
    }

    #[test]
    fn expm_agrees_with_nalgebra_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(-2.0..2.0));
            let ours = expm(&m, 1.0).unwrap();
            let reference = m.clone().exp();
            let rel = (&ours - &reference).norm() / reference.norm();
            assert!(rel <= 1e-10, "relative error {rel:e}");
        }
    }

    #[test]
    fn expm_semigroup_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let m = random_stable(5, &mut rng);
            let s = rng.random_range(-1.0..1.0);
            let t = rng.random_range(-1.0..1.0);
            let lhs = expm(&m, s).unwrap() * expm(&m, t).unwrap();
            let rhs = expm(&m, s + t).unwrap();
            assert!((&lhs - &rhs).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn lyapunov_scalar_cases() {
        let f = -DenseMatrix::identity(3, 3);
        let p = solve_lyapunov(&f, &(DenseMatrix::identity(3, 3) * 2.0)).unwrap();
        assert_relative_eq!(p, DenseMatrix::identity(3, 3), epsilon = 1e-14);

        let f = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![-1.0, -2.0]));
        let p = solve_lyapunov(&f, &DenseMatrix::identity(2, 2)).unwrap();
        let expected = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![0.5, 0.25]));
        assert_relative_eq!(p, expected, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f = random_stable(6, &mut rng);
            let q = DenseMatrix::identity(6, 6);
            let p = solve_lyapunov(&f, &q).unwrap();
            assert!(lyapunov_residual(&f, &p, &q) <= 1e-8);
            assert_relative_eq!(p.clone(), p.transpose(), epsilon = 1e-14);
        }
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let f = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![-1.0, 0.5]));
        assert!(matches!(solve_lyapunov(&f, &DenseMatrix::identity(2, 2)), Err(Error::NotHurwitz(_))));
        // marginal: zero eigenvalue makes the operator singular
        let f = DenseMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        assert!(!is_hurwitz(&f));
    }

    #[test]
    fn sym_eigen_basic() {
        let e = sym_eigen(&DenseMatrix::identity(4, 4)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let d = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![3.0, 1.0, 2.0]));
        let e = sym_eigen(&d).unwrap();
        assert_eq!(e.values.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sym_eigen_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DenseMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let s = &m + m.transpose();
        let e = sym_eigen(&s).unwrap();
        assert!((e.reconstruct() - &s).abs().max() <= 1e-9);
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DenseMatrix::identity(8, 8)).abs().max() <= 1e-9);
        assert!(e.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sym_eigen_rejects_asymmetric() {
        let m = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eigen(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn spectral_norm_of_shear() {
        let m = DenseMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        // singular values of [[1,1],[0,1]] are the golden ratio and its inverse
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(spectral_norm(&m).unwrap(), golden, epsilon = 1e-12);
    }

    #[test]
    fn riccati_scalar_cases() {
        let one = DenseMatrix::from_element(1, 1, 1.0);
        let sol = solve_riccati_dual(&DenseMatrix::zeros(1, 1), &one, &one, &one).unwrap();
        assert_relative_eq!(sol.p[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.gain[(0, 0)], 1.0, epsilon = 1e-10);

        let sol = solve_riccati_dual(&one, &one, &DenseMatrix::zeros(1, 1), &one).unwrap();
        assert_relative_eq!(sol.p[(0, 0)], 2.0, epsilon = 1e-10);
        assert_relative_eq!(sol.gain[(0, 0)], 2.0, epsilon = 1e-10);
        let closed = 1.0 - sol.gain[(0, 0)];
        assert_relative_eq!(closed, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn riccati_reports_undetectable_pair() {
        // unstable mode invisible to the output
        let a = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![1.0, -1.0]));
        let c = DenseMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let err = solve_riccati_dual(&a, &c, &DenseMatrix::identity(2, 2), &DenseMatrix::identity(1, 1)).unwrap_err();
        assert!(matches!(err, Error::RiccatiDiverged { .. }));
        assert!(err.is_numerical());
    }
}
