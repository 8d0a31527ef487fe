//! Probabilistic reachable sets of the error system and the constraint
//! tightening built from them.
//!
//! A PRS at level `p` for `e(k)` is the ellipsoid
//! `{e : (e - E e(k))ᵀ var(e(k))⁻¹ (e - E e(k)) ≤ p̃}`, stored here with shape
//! `M = p̃ · var(e(k))` so that degenerate (singular) covariances are
//! representable. Tightening only ever evaluates support functions
//! `aᵀc + √(aᵀ M a)`, which never invert `M`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::gaussians::{GaussianSequence, LevelRule};
use crate::lti::{dlyap, prediction_stack, sequence_moments, symmetrize, ClosedLoopGain, LtiModel};
use crate::qp::{solve, QpStatus, QuadraticProgram};

const PSD_TOL: f64 = 1e-9;

/// `{e : (e - c)ᵀ M⁻¹ (e - c) ≤ 1}`; `M = 0` is the point `{c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let n = center.len();
        if shape.shape() != (n, n) {
            return Err(dims(format!(
                "shape must be {n}x{n}, got {:?}",
                shape.shape()
            )));
        }
        let scale = shape.abs().max().max(1.0);
        if (&shape - shape.transpose()).abs().max() > 1e-10 * scale {
            return Err(Error::InvalidArgument(
                "ellipsoid shape is not symmetric".into(),
            ));
        }
        let shape = symmetrize(&shape);
        if n > 0 && shape.clone().symmetric_eigenvalues().min() < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(
                "ellipsoid shape is not positive semidefinite".into(),
            ));
        }
        Ok(Self { center, shape })
    }

    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        Self {
            center,
            shape: DMatrix::zeros(n, n),
        }
    }

    pub fn centered(shape: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(shape.nrows()), shape)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn is_point(&self) -> bool {
        self.shape.amax() == 0.0
    }

    /// `max_{e ∈ E} aᵀ e`.
    pub fn support(&self, a: &DVector<f64>) -> f64 {
        a.dot(&self.center) + self.half_width(a)
    }

    /// `√(aᵀ M a)`: the distance from center to the supporting hyperplane,
    /// scaled by `‖a‖`.
    pub fn half_width(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.shape * a)).max(0.0).sqrt()
    }

    /// Image under `x ↦ L x`.
    pub fn linear_map(&self, l: &DMatrix<f64>) -> Ellipsoid {
        Ellipsoid {
            center: l * &self.center,
            shape: symmetrize(&(l * &self.shape * l.transpose())),
        }
    }

    pub fn scaled(&self, factor: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center.clone(),
            shape: &self.shape * factor,
        }
    }

    /// Membership test; points outside the range of a singular shape are
    /// outside.
    pub fn contains_point(&self, x: &DVector<f64>) -> bool {
        let d = x - &self.center;
        let eig = self.shape.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.amax();
        let mut q = 0.0;
        for i in 0..d.len() {
            let proj = eig.eigenvectors.column(i).dot(&d);
            let l = eig.eigenvalues[i];
            if l <= 1e-12 * lmax.max(1e-300) {
                if proj.abs() > 1e-9 * (1.0 + d.norm()) {
                    return false;
                }
            } else {
                q += proj * proj / l;
            }
        }
        q <= 1.0 + 1e-12
    }

    /// Concentric PSD bound `M̃ ⪰` that contains this (possibly off-center)
    /// ellipsoid when centered at the origin:
    /// `M̃ = (1+t) M + (1+1/t) c cᵀ`.
    pub fn centered_hull(&self) -> DMatrix<f64> {
        let cn = self.center.norm();
        if cn == 0.0 {
            return self.shape.clone();
        }
        let tr = self.shape.trace().max(0.0);
        if tr == 0.0 {
            return &self.center * self.center.transpose();
        }
        let t = cn / tr.sqrt();
        &self.shape * (1.0 + t) + &self.center * self.center.transpose() * (1.0 + 1.0 / t)
    }
}

/// `{x : a_jᵀ x ≤ b_j ∀ j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(dims(format!("{} rows but {} offsets", a.nrows(), b.len())));
        }
        for j in 0..a.nrows() {
            if a.row(j).amax() == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "constraint row {j} has a zero normal"
                )));
            }
        }
        Ok(Self { a, b })
    }

    /// Box `lower ≤ x ≤ upper`; infinite entries produce no row.
    pub fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self> {
        let n = lower.len();
        if upper.len() != n {
            return Err(dims("bounds have different lengths"));
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..n {
            if upper[i].is_finite() {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                rows.push(r);
                rhs.push(upper[i]);
            }
            if lower[i].is_finite() {
                let mut r = vec![0.0; n];
                r[i] = -1.0;
                rows.push(r);
                rhs.push(-lower[i]);
            }
        }
        let flat: Vec<f64> = rows.concat();
        Self::new(
            DMatrix::from_row_slice(rows.len(), n, &flat),
            DVector::from_vec(rhs),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn row(&self, j: usize) -> DVector<f64> {
        self.a.row(j).transpose()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let ax = &self.a * x;
        (0..self.rows()).all(|j| ax[j] <= self.b[j] + tol)
    }

    /// Dimension of the span of the constraint normals; this is the dimension
    /// of the error subspace that tightening can see.
    pub fn normal_rank(&self) -> usize {
        if self.rows() == 0 {
            return 0;
        }
        let svd = self.a.clone().svd(false, false);
        let smax = svd.singular_values.amax();
        svd.singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        if self.rows() == 0 {
            return false;
        }
        let n = self.dim();
        let qp = QuadraticProgram::new(DMatrix::identity(n, n), DVector::zeros(n))
            .with_inequalities(self.a.clone(), self.b.clone());
        match solve(&qp, None) {
            Ok(sol) => sol.status == QpStatus::Infeasible,
            Err(_) => true,
        }
    }

    /// `max aᵀx` over the polytope (must be bounded in direction `a`).
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64> {
        let n = self.dim();
        let qp = QuadraticProgram::new(DMatrix::zeros(n, n), -dir)
            .with_inequalities(self.a.clone(), self.b.clone());
        let sol = solve(&qp, None)?;
        match sol.status {
            QpStatus::Optimal => Ok(-sol.objective),
            QpStatus::Infeasible => Err(Error::EmptyResult),
            QpStatus::MaxIterations => Err(Error::MaxIterations(sol.iterations)),
        }
    }

    pub fn linear_preimage(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        Polytope::new(&self.a * m, self.b.clone())
    }
}

/// Row-wise Pontryagin difference `P ⊖ E`:
/// `b_j' = b_j - a_jᵀ c - √(a_jᵀ M a_j)`.
pub fn tighten(constraints: &Polytope, set: &Ellipsoid) -> Result<Polytope> {
    let tightened = tighten_unchecked(constraints, set)?;
    if tightened.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(tightened)
}

/// [`tighten`] without the emptiness check.
pub fn tighten_unchecked(constraints: &Polytope, set: &Ellipsoid) -> Result<Polytope> {
    if constraints.dim() != set.dim() {
        return Err(dims(format!(
            "polytope lives in R^{}, set in R^{}",
            constraints.dim(),
            set.dim()
        )));
    }
    let b = DVector::from_fn(constraints.rows(), |j, _| {
        constraints.b[j] - set.support(&constraints.row(j))
    });
    Ok(Polytope {
        a: constraints.a.clone(),
        b,
    })
}

/// Containment test for concentric ellipsoids: `M_outer - M_inner ⪰ 0`.
pub fn contains(outer: &Ellipsoid, inner: &Ellipsoid) -> Result<bool> {
    if outer.dim() != inner.dim() {
        return Err(dims("ellipsoids have different dimensions"));
    }
    let gap = (outer.center() - inner.center()).amax();
    if gap > 1e-9 {
        return Err(Error::CenterMismatch(gap));
    }
    Ok(psd_dominates(outer.shape(), inner.shape()))
}

fn psd_dominates(outer: &DMatrix<f64>, inner: &DMatrix<f64>) -> bool {
    if outer.nrows() == 0 {
        return true;
    }
    let scale = outer.abs().max().max(inner.abs().max()).max(1e-300);
    let diff = symmetrize(&(outer - inner));
    diff.symmetric_eigenvalues().min() >= -PSD_TOL * scale
}

/// Probability levels for state and input reachable sets. `state_dim` and
/// `input_dim` select the chi-squared / Chebyshev dimension; they default to
/// `n_x` and `n_u` and should equal the rank of the constraint normals when
/// only a subspace is constrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrsLevels {
    pub p_x: f64,
    pub p_u: f64,
    pub rule: LevelRule,
    pub state_dim: Option<usize>,
    pub input_dim: Option<usize>,
}

impl PrsLevels {
    pub fn new(p_x: f64, p_u: f64, rule: LevelRule) -> Self {
        Self {
            p_x,
            p_u,
            rule,
            state_dim: None,
            input_dim: None,
        }
    }

    pub fn with_dims(mut self, state_dim: usize, input_dim: usize) -> Self {
        self.state_dim = Some(state_dim.max(1));
        self.input_dim = Some(input_dim.max(1));
        self
    }

    /// `(p̃_x, p̃_u)`.
    pub fn scalings(&self, nx: usize, nu: usize) -> Result<(f64, f64)> {
        Ok((
            self.rule.level(self.state_dim.unwrap_or(nx), self.p_x)?,
            self.rule.level(self.input_dim.unwrap_or(nu), self.p_u)?,
        ))
    }
}

/// Per-step state and input reachable sets `R^x_k`, `R^u_k` and the terminal
/// pair `(R_f, K R_f)`.
#[derive(Debug, Clone)]
pub struct TighteningSchedule {
    state: Vec<Ellipsoid>,
    input: Vec<Ellipsoid>,
    error_cov: Vec<DMatrix<f64>>,
    gain: DMatrix<f64>,
    scale_x: f64,
    scale_u: f64,
    terminal_state: Ellipsoid,
    terminal_input: Ellipsoid,
}

impl TighteningSchedule {
    /// Assembles a schedule from per-step error means and covariances.
    pub fn from_moments(
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        gain: &DMatrix<f64>,
        scale_x: f64,
        scale_u: f64,
    ) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptySchedule);
        }
        if means.len() != covs.len() {
            return Err(dims("means and covariances differ in length"));
        }
        let mut state = Vec::with_capacity(means.len());
        let mut input = Vec::with_capacity(means.len());
        for (m, s) in means.iter().zip(&covs) {
            let ex = Ellipsoid::new(m.clone(), s * scale_x)?;
            let eu = Ellipsoid::new(
                gain * m,
                symmetrize(&(gain * s * gain.transpose())) * scale_u,
            )?;
            state.push(ex);
            input.push(eu);
        }
        let mut sched = Self {
            terminal_state: state[0].clone(),
            terminal_input: input[0].clone(),
            state,
            input,
            error_cov: covs,
            gain: gain.clone(),
            scale_x,
            scale_u,
        };
        let (rf, krf) = terminal_prs(&sched)?;
        sched.terminal_state = rf;
        sched.terminal_input = krf;
        Ok(sched)
    }

    pub fn len(&self) -> usize {
        self.state.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_empty()
    }

    pub fn state_set(&self, k: usize) -> &Ellipsoid {
        &self.state[k.min(self.state.len() - 1)]
    }

    pub fn input_set(&self, k: usize) -> &Ellipsoid {
        &self.input[k.min(self.input.len() - 1)]
    }

    pub fn state_sets(&self) -> &[Ellipsoid] {
        &self.state
    }

    pub fn input_sets(&self) -> &[Ellipsoid] {
        &self.input
    }

    pub fn error_covariances(&self) -> &[DMatrix<f64>] {
        &self.error_cov
    }

    pub fn terminal_state(&self) -> &Ellipsoid {
        &self.terminal_state
    }

    pub fn terminal_input(&self) -> &Ellipsoid {
        &self.terminal_input
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// `(p̃_x, p̃_u)` used to scale the error covariances.
    pub fn scalings(&self) -> (f64, f64) {
        (self.scale_x, self.scale_u)
    }

    /// `R_f ⊇ R^x_k` and `K R_f ⊇ R^u_k` for every step, with off-center sets
    /// replaced by their concentric hulls.
    pub fn terminal_containment_holds(&self) -> bool {
        let rf = self.terminal_state.shape();
        let krf = self.terminal_input.shape();
        self.state
            .iter()
            .all(|s| psd_dominates(rf, &s.centered_hull()))
            && self
                .input
                .iter()
                .all(|s| psd_dominates(krf, &s.centered_hull()))
    }
}

/// Time-varying schedule from the error moments of `e(k+1) = A_K e(k) + w(k)`
/// with `e(0) = 0`, one set per disturbance step.
pub fn prs_schedule(
    model: &LtiModel,
    gain: &ClosedLoopGain,
    dist: &GaussianSequence,
    levels: &PrsLevels,
) -> Result<TighteningSchedule> {
    let n = model.nx();
    if dist.block() != n {
        return Err(dims(format!(
            "disturbance block {} differs from n_x = {n}",
            dist.block()
        )));
    }
    let (scale_x, scale_u) = levels.scalings(n, model.nu())?;
    let steps = dist.steps();
    let mut means = vec![DVector::zeros(n)];
    let mut covs = vec![DMatrix::zeros(n, n)];
    if steps > 1 {
        let stack = prediction_stack(gain.a_k(), steps - 1)?;
        let (mean, cov) = sequence_moments(&stack, &DVector::zeros(n), dist)?;
        for k in 0..steps - 1 {
            means.push(mean.rows(k * n, n).into_owned());
            covs.push(cov.view((k * n, k * n), (n, n)).into_owned());
        }
    }
    TighteningSchedule::from_moments(means, covs, gain.k(), scale_x, scale_u)
}

/// Constant schedule using the stationary error covariance for every step,
/// `steps` entries long. Valid for i.i.d. zero-mean disturbances, where the
/// stationary set contains every finite-step set.
pub fn stationary_schedule(
    gain: &ClosedLoopGain,
    sigma_w: &DMatrix<f64>,
    levels: &PrsLevels,
    steps: usize,
) -> Result<TighteningSchedule> {
    if steps == 0 {
        return Err(Error::EmptySchedule);
    }
    let n = gain.a_k().nrows();
    let (scale_x, scale_u) = levels.scalings(n, gain.k().nrows())?;
    let cov = dlyap(gain.a_k(), sigma_w)?;
    TighteningSchedule::from_moments(
        vec![DVector::zeros(n); steps],
        vec![cov; steps],
        gain.k(),
        scale_x,
        scale_u,
    )
}

/// Stationary PRS `{e : eᵀ Σ∞⁻¹ e ≤ p̃}` for i.i.d. zero-mean disturbances.
pub fn stationary_prs(
    gain: &ClosedLoopGain,
    sigma_w: &DMatrix<f64>,
    p: f64,
    rule: LevelRule,
    dim: Option<usize>,
) -> Result<Ellipsoid> {
    let sigma = dlyap(gain.a_k(), sigma_w)?;
    let level = rule.level(dim.unwrap_or(sigma.nrows()), p)?;
    Ellipsoid::centered(sigma * level)
}

/// Scaled-shape outer bound of all per-step sets: `R_f = α S` where `α` is
/// the smallest factor covering every state set and (through `K`) every
/// input set. The shape `S` is the best of a few candidates: the largest
/// per-step hull, and weighted means of the hulls reweighted towards the
/// sets that are covered worst. Input hulls enter the means pulled back
/// through `K⁺`.
pub fn terminal_prs(schedule: &TighteningSchedule) -> Result<(Ellipsoid, Ellipsoid)> {
    if schedule.state.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let n = schedule.state[0].dim();
    let k = &schedule.gain;
    let hulls_x: Vec<DMatrix<f64>> = schedule.state.iter().map(|s| s.centered_hull()).collect();
    let hulls_u: Vec<DMatrix<f64>> = schedule.input.iter().map(|s| s.centered_hull()).collect();
    let largest = hulls_x
        .iter()
        .max_by(|a, b| a.trace().total_cmp(&b.trace()))
        .unwrap()
        .clone();
    if largest.trace() <= 0.0 && hulls_u.iter().all(|m| m.trace() <= 0.0) {
        return Ok((
            Ellipsoid::point(DVector::zeros(n)),
            Ellipsoid::point(DVector::zeros(k.nrows())),
        ));
    }
    let jitter = 1e-12 * largest.trace().max(1e-300);
    let eye = DMatrix::<f64>::identity(n, n);
    let ratios = |shape: &DMatrix<f64>| -> Vec<f64> {
        let mut r = generalized_eigs(&hulls_x, shape);
        r.extend(generalized_eigs(
            &hulls_u,
            &symmetrize(&(k * shape * k.transpose())),
        ));
        r
    };
    let scaled_trace = |shape: &DMatrix<f64>| -> (f64, f64) {
        let alpha = ratios(shape).into_iter().fold(0.0, f64::max);
        (alpha, alpha * shape.trace())
    };

    let mut pool = hulls_x.clone();
    let pinv = k
        .clone()
        .pseudo_inverse(1e-12)
        .ok()
        .filter(|p| (k * p).is_identity(1e-9));
    if let Some(pinv) = &pinv {
        pool.extend(
            hulls_u
                .iter()
                .map(|u| symmetrize(&(pinv * u * pinv.transpose()))),
        );
    }
    let mut best = largest.clone() + &eye * jitter;
    let mut best_score = scaled_trace(&best);
    let mut weights = vec![1.0; pool.len()];
    for _ in 0..40 {
        let total: f64 = weights.iter().sum();
        let mut shape = pool
            .iter()
            .zip(&weights)
            .fold(DMatrix::zeros(n, n), |acc, (m, w)| acc + m * (*w / total));
        shape += &eye * jitter;
        let score = scaled_trace(&shape);
        if score.1 < best_score.1 {
            best = shape.clone();
            best_score = score;
        }
        let r = if pinv.is_some() {
            ratios(&shape)
        } else {
            generalized_eigs(&hulls_x, &shape)
        };
        for (w, ri) in weights.iter_mut().zip(r) {
            *w *= (ri / score.0).max(1e-6);
        }
    }
    let rf = Ellipsoid::centered(&best * best_score.0)?;
    let krf = rf.linear_map(k);
    Ok((rf, krf))
}

fn generalized_eigs(ms: &[DMatrix<f64>], s: &DMatrix<f64>) -> Vec<f64> {
    let eig = s.clone().symmetric_eigen();
    let floor = 1e-14 * eig.eigenvalues.amax().max(1e-300);
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    let v = &eig.eigenvectors;
    let w = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * inv_sqrt[j]);
    ms.iter()
        .map(|m| {
            symmetrize(&(w.transpose() * m * &w))
                .symmetric_eigenvalues()
                .max()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::chi2_quantile;

    fn scalar_gain(a: f64) -> ClosedLoopGain {
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        ClosedLoopGain::new(&model, DMatrix::zeros(1, 1)).unwrap()
    }

    #[test]
    fn tighten_by_point_is_identity() {
        let p = Polytope::from_bounds(
            &DVector::from_vec(vec![-1.0, -2.0]),
            &DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let t = tighten(&p, &Ellipsoid::point(DVector::zeros(2))).unwrap();
        assert_eq!(t, p);
    }

    #[test]
    fn tighten_unit_ball_halfspace() {
        let p = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let ball = Ellipsoid::centered(DMatrix::identity(2, 2)).unwrap();
        let t = tighten_unchecked(&p, &ball).unwrap();
        assert!(t.b()[0].abs() < 1e-15);
    }

    #[test]
    fn tighten_velocity_band() {
        let p = Polytope::from_bounds(
            &DVector::from_vec(vec![f64::NEG_INFINITY, -3.0]),
            &DVector::from_vec(vec![f64::INFINITY, 3.0]),
        )
        .unwrap();
        // degenerate shape: only the velocity direction has width 1.53
        let set = Ellipsoid::centered(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.53 * 1.53]))
            .unwrap();
        let t = tighten(&p, &set).unwrap();
        for j in 0..2 {
            assert!((t.b()[j] - 1.47).abs() < 1e-12);
        }
    }

    #[test]
    fn tighten_reports_empty_result() {
        let p = Polytope::from_bounds(
            &DVector::from_element(1, -1.0),
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        let big = Ellipsoid::centered(DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_eq!(tighten(&p, &big), Err(Error::EmptyResult));
    }

    #[test]
    fn containment_psd_order() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let a = Ellipsoid::centered(i2.clone()).unwrap();
        let b = Ellipsoid::centered(&i2 * 2.0).unwrap();
        assert!(contains(&a, &a).unwrap());
        assert!(contains(&b, &a).unwrap());
        assert!(!contains(&a, &b).unwrap());
        let shifted = Ellipsoid::new(DVector::from_vec(vec![1.0, 0.0]), i2).unwrap();
        assert!(matches!(
            contains(&b, &shifted),
            Err(Error::CenterMismatch(_))
        ));
    }

    #[test]
    fn stationary_scalar_chebyshev() {
        let e = stationary_prs(
            &scalar_gain(0.5),
            &DMatrix::from_element(1, 1, 1.0),
            0.8,
            LevelRule::Chebyshev,
            None,
        )
        .unwrap();
        assert!((e.shape()[(0, 0)] - 20.0 / 3.0).abs() < 1e-12);
        let z = stationary_prs(
            &scalar_gain(0.5),
            &DMatrix::zeros(1, 1),
            0.8,
            LevelRule::Gaussian,
            None,
        )
        .unwrap();
        assert!(z.is_point());
    }

    #[test]
    fn terminal_bound_examples() {
        let g = DMatrix::from_element(1, 1, 0.0);
        let same = TighteningSchedule::from_moments(
            vec![DVector::zeros(1); 3],
            vec![DMatrix::from_element(1, 1, 2.0); 3],
            &g,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((same.terminal_state().shape()[(0, 0)] - 2.0).abs() < 1e-9);

        let grow = TighteningSchedule::from_moments(
            vec![DVector::zeros(1); 2],
            vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 4.0),
            ],
            &g,
            1.0,
            1.0,
        )
        .unwrap();
        assert!((grow.terminal_state().shape()[(0, 0)] - 4.0).abs() < 1e-9);
        assert!(grow.terminal_containment_holds());
    }

    #[test]
    fn scalar_schedule_unit_variance() {
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let gain = ClosedLoopGain::new(&model, DMatrix::zeros(1, 1)).unwrap();
        let dist = GaussianSequence::iid(&DVector::zeros(1), &DMatrix::identity(1, 1), 6).unwrap();
        let sched = prs_schedule(
            &model,
            &gain,
            &dist,
            &PrsLevels::new(0.8, 0.8, LevelRule::Gaussian),
        )
        .unwrap();
        let q = chi2_quantile(1, 0.8).unwrap();
        assert!(sched.state_set(0).is_point());
        for k in 1..6 {
            assert!((sched.state_set(k).shape()[(0, 0)] - q).abs() < 1e-12);
        }
        assert!((q - 1.6424).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_schedule_is_points() {
        let model = LtiModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let gain = ClosedLoopGain::new(&model, DMatrix::zeros(1, 1)).unwrap();
        let dist = GaussianSequence::iid(&DVector::zeros(1), &DMatrix::zeros(1, 1), 4).unwrap();
        let sched = prs_schedule(
            &model,
            &gain,
            &dist,
            &PrsLevels::new(0.9, 0.9, LevelRule::Gaussian),
        )
        .unwrap();
        assert!(sched.state_sets().iter().all(Ellipsoid::is_point));
        assert!(sched.terminal_state().is_point());
    }

    #[test]
    fn normal_rank_of_velocity_band() {
        let p = Polytope::from_bounds(
            &DVector::from_vec(vec![f64::NEG_INFINITY, -3.0]),
            &DVector::from_vec(vec![f64::INFINITY, 3.0]),
        )
        .unwrap();
        assert_eq!(p.normal_rank(), 1);
        assert_eq!(p.rows(), 2);
    }

    #[test]
    fn polytope_support_of_box() {
        let p = Polytope::from_bounds(
            &DVector::from_vec(vec![-1.0, -2.0]),
            &DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let s = p.support(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((s - 3.0).abs() < 1e-7, "{s}");
        assert!(!p.is_empty());
    }
}
