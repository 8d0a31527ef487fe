//! Linear time-invariant models, discrete Lyapunov equations and the stacked
//! prediction matrices of the error system `e(k+1) = A_K e(k) + w(k)`.

use crate::error::{dims, Error, Result};
use crate::gaussians::GaussianSequence;
use nalgebra::{DMatrix, DVector};

/// Stability margin: matrices with spectral radius above `1 - STABILITY_MARGIN`
/// are rejected.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// `x(k+1) = A x(k) + B u(k) + affine + w(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    affine: DVector<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::with_affine(a, b, DVector::zeros(n))
    }

    pub fn with_affine(a: DMatrix<f64>, b: DMatrix<f64>, affine: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(dims(format!(
                "A must be square and non-empty, got {}x{}",
                n,
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(dims(format!(
                "B must be {}xn_u with n_u >= 1, got {}x{}",
                n,
                b.nrows(),
                b.ncols()
            )));
        }
        if affine.len() != n {
            return Err(dims(format!(
                "affine offset must have length {n}, got {}",
                affine.len()
            )));
        }
        Ok(Self { a, b, affine })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn affine(&self) -> &DVector<f64> {
        &self.affine
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    /// Same model with a different input matrix, used for simulation-truth
    /// models with actuator mismatch.
    pub fn with_input_matrix(&self, b: DMatrix<f64>) -> Result<Self> {
        Self::with_affine(self.a.clone(), b, self.affine.clone())
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.affine + w
    }
}

/// Tube feedback `u = K e + v` together with the cached `A_K = A + B K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopGain {
    k: DMatrix<f64>,
    a_k: DMatrix<f64>,
}

impl ClosedLoopGain {
    /// Fails with [`Error::NotStable`] unless `A + B K` is Schur stable.
    pub fn new(model: &LtiModel, k: DMatrix<f64>) -> Result<Self> {
        if k.nrows() != model.nu() || k.ncols() != model.nx() {
            return Err(dims(format!(
                "K must be {}x{}, got {}x{}",
                model.nu(),
                model.nx(),
                k.nrows(),
                k.ncols()
            )));
        }
        let a_k = model.a() + model.b() * &k;
        check_stable(&a_k)?;
        Ok(Self { k, a_k })
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn a_k(&self) -> &DMatrix<f64> {
        &self.a_k
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn check_stable(m: &DMatrix<f64>) -> Result<()> {
    let rho = spectral_radius(m);
    if !rho.is_finite() || rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::NotStable(rho));
    }
    Ok(())
}

/// Solves `A Σ Aᵀ + Q = Σ` through the vectorized system
/// `(I - A ⊗ A) vec(Σ) = vec(Q)`.
pub fn dlyap(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(dims(format!(
            "dlyap needs square A and Q of equal size, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    check_stable(a)?;
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let lu = lhs.clone().lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::NotStable(spectral_radius(a)))?;
    // one step of iterative refinement
    let resid = &rhs - &lhs * &sol;
    if let Some(corr) = lu.solve(&resid) {
        sol += corr;
    }
    let sigma = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&sigma))
}

/// Discrete-time LQR gain `u = K x` by fixed-point iteration of the Riccati
/// recursion.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n
        || b.nrows() != n
        || q.shape() != (n, n)
        || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(dims("lqr_gain: inconsistent A, B, Q, R"));
    }
    let mut p = q.clone();
    let mut k = DMatrix::zeros(b.ncols(), n);
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("R + BᵀPB is not positive definite".into()))?;
        k = -chol.solve(&(&btp * a));
        let a_k = a + b * &k;
        let next = q + k.transpose() * r * &k + a_k.transpose() * &p * &a_k;
        let next = symmetrize(&next);
        let delta = (&next - &p).abs().max();
        p = next;
        if delta <= 1e-12 * (1.0 + p.abs().max()) {
            break;
        }
    }
    Ok(k)
}

/// Stacked prediction matrices of the error system over `horizon` steps:
/// `E = [e(1); …; e(horizon)] = A0 e(0) + Abar W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStack {
    a0: DMatrix<f64>,
    abar: DMatrix<f64>,
    nx: usize,
    horizon: usize,
}

impl PredictionStack {
    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
}

pub fn prediction_stack(a_k: &DMatrix<f64>, horizon: usize) -> Result<PredictionStack> {
    let n = a_k.nrows();
    if a_k.ncols() != n || n == 0 {
        return Err(dims("prediction_stack needs a non-empty square matrix"));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument(
            "prediction horizon must be >= 1".into(),
        ));
    }
    let powers = matrix_powers(a_k, horizon);
    let mut a0 = DMatrix::zeros(horizon * n, n);
    let mut abar = DMatrix::zeros(horizon * n, horizon * n);
    for i in 0..horizon {
        a0.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            abar.view_mut((i * n, j * n), (n, n))
                .copy_from(&powers[i - j]);
        }
    }
    Ok(PredictionStack {
        a0,
        abar,
        nx: n,
        horizon,
    })
}

/// Mean and covariance of the stacked error `[e(1); …; e(N̄)]`, using the
/// first `N̄` disturbance blocks of `dist`.
pub fn sequence_moments(
    stack: &PredictionStack,
    e0: &DVector<f64>,
    dist: &GaussianSequence,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = stack.nx;
    let len = stack.horizon * n;
    if e0.len() != n {
        return Err(dims(format!("e0 must have length {n}, got {}", e0.len())));
    }
    if dist.block() != n {
        return Err(dims(format!(
            "disturbance block size {} differs from n_x = {n}",
            dist.block()
        )));
    }
    if dist.steps() < stack.horizon {
        return Err(dims(format!(
            "disturbance sequence has {} steps, stack needs {}",
            dist.steps(),
            stack.horizon
        )));
    }
    let mu = dist.mean().rows(0, len);
    let sigma = dist.cov().view((0, 0), (len, len));
    let mean = &stack.a0 * e0 + &stack.abar * mu;
    let cov = &stack.abar * sigma * stack.abar.transpose();
    Ok((mean, symmetrize(&cov)))
}

/// Block `step` (1-based) of a stacked mean and the matching diagonal block of
/// its covariance.
pub fn marginal(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    step: usize,
    block: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if block == 0 || !mean.len().is_multiple_of(block) || cov.shape() != (mean.len(), mean.len()) {
        return Err(dims(
            "marginal: stacked mean/covariance do not match the block size",
        ));
    }
    let steps = mean.len() / block;
    if step == 0 || step > steps {
        return Err(Error::IndexOutOfRange {
            index: step,
            max: steps,
        });
    }
    let off = (step - 1) * block;
    Ok((
        mean.rows(off, block).into_owned(),
        cov.view((off, off), (block, block)).into_owned(),
    ))
}

/// `[I, M, M², …, M^count]`.
pub fn matrix_powers(m: &DMatrix<f64>, count: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(count + 1);
    out.push(DMatrix::identity(n, n));
    for i in 0..count {
        let next = m * &out[i];
        out.push(next);
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn di_model() -> LtiModel {
        LtiModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn dlyap_zero_dynamics_returns_q() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = dlyap(&DMatrix::zeros(2, 2), &q).unwrap();
        assert!((s - q).norm() < 1e-14);
    }

    #[test]
    fn dlyap_scalar_geometric_series() {
        let s = dlyap(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((s[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        let err = dlyap(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotStable(_)));
        let err = dlyap(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn double_integrator_velocity_variance() {
        let model = di_model();
        let gain =
            ClosedLoopGain::new(&model, DMatrix::from_row_slice(1, 2, &[-0.2, -0.6])).unwrap();
        let sw = DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 1.0]);
        let s = dlyap(gain.a_k(), &sw).unwrap();
        let resid = gain.a_k() * &s * gain.a_k().transpose() + &sw - &s;
        assert!(resid.norm() <= 1e-10 * (1.0 + s.norm()));
        // 1.6424 = χ²₁(0.8)
        let half_width = (1.642_374_415_149_818 * s[(1, 1)]).sqrt();
        assert!((half_width - 1.53).abs() < 0.005, "{half_width}");
    }

    #[test]
    fn gain_rejects_destabilizing_k() {
        let err = ClosedLoopGain::new(&di_model(), DMatrix::from_row_slice(1, 2, &[0.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::NotStable(_)));
    }

    #[test]
    fn stack_horizon_one_and_two() {
        let s = prediction_stack(&DMatrix::from_element(1, 1, 0.3), 1).unwrap();
        assert_eq!(s.a0()[(0, 0)], 0.3);
        assert_eq!(s.abar()[(0, 0)], 1.0);

        let a = 0.7;
        let s = prediction_stack(&DMatrix::from_element(1, 1, a), 2).unwrap();
        assert_eq!(s.a0().as_slice(), &[a, a * a]);
        assert_eq!(
            s.abar(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, a, 1.0])
        );
    }

    #[test]
    fn stack_nilpotent_block_vanishes() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let s = prediction_stack(&a, 3).unwrap();
        assert_eq!(s.abar().view((4, 0), (2, 2)).norm(), 0.0);
        assert_eq!(s.abar().view((2, 0), (2, 2)), a.view((0, 0), (2, 2)));
    }

    #[test]
    fn moments_scalar_examples() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let stack = prediction_stack(&a, 2).unwrap();
        let dist = GaussianSequence::iid(&DVector::zeros(1), &DMatrix::identity(1, 1), 5).unwrap();
        let (mean, cov) = sequence_moments(&stack, &DVector::zeros(1), &dist).unwrap();
        assert_eq!(mean.norm(), 0.0);
        assert!((cov[(1, 1)] - 1.25).abs() < 1e-15);
        let (m1, v1) = marginal(&mean, &cov, 1, 1).unwrap();
        assert_eq!(m1[0], 0.0);
        assert!((v1[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(matches!(
            marginal(&mean, &cov, 3, 1),
            Err(Error::IndexOutOfRange { index: 3, max: 2 })
        ));

        let zero = prediction_stack(&DMatrix::zeros(1, 1), 4).unwrap();
        let (_, cov) =
            sequence_moments(&zero, &DVector::zeros(1), &dist.truncated(4).unwrap()).unwrap();
        assert!((cov - DMatrix::identity(4, 4)).norm() < 1e-15);
    }

    #[test]
    fn marginal_of_block_diagonal_is_verbatim() {
        let mut cov = DMatrix::zeros(4, 4);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 3.0]);
        cov.view_mut((2, 2), (2, 2)).copy_from(&b);
        cov.view_mut((0, 0), (2, 2)).fill_with_identity();
        let (m, c) = marginal(&DVector::zeros(4), &cov, 2, 2).unwrap();
        assert_eq!(m.norm(), 0.0);
        assert_eq!(c, b);
    }

    #[test]
    fn lqr_scalar_matches_riccati_closed_form() {
        // a = 1, b = 1, q = 1, r = 1: p = (1 + √5)/2, k = -p/(1+p)
        let k = lqr_gain(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((k[(0, 0)] + p / (1.0 + p)).abs() < 1e-10);
    }
}
