//! Stochastic MPC with PRS constraint tightening.
//!
//! The nominal state `z` is constrained against tightened sets and is
//! propagated by its own prediction (`z₀(k) = z₁(k−1)`), while the measured
//! state enters only through the expected cost. The applied input is
//! `u(k) = K (x(k) − z₀(k)) + v₀*(k)`, so the closed-loop error obeys
//! `e(k+1) = A_K e(k) + w(k)`.
//!
//! The QP is condensed over pre-stabilised variables `c_i` with
//! `v_i = K (z_i − z_ref) + v_ref + c_i`, where `(z_ref, v_ref)` is the
//! terminal equilibrium. Auxiliary variables carry the L1 input cost and the
//! soft-constraint slacks of the `recSC` variant.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::gaussians::{ConditionalWindow, ConditioningMap, GaussianSequence};
use crate::lti::{
    dlyap, matrix_powers, prediction_stack, symmetrize, ClosedLoopGain, LtiModel, PredictionStack,
};
use crate::prs::{tighten_unchecked, Polytope, TighteningSchedule};
use crate::qp::{QpSettings, QpStatus, QpWorkspace};

/// Controller variants compared in the double-integrator study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Cost on the nominal trajectory only; no feedback on `z`.
    Nom,
    /// Expected cost with `z₀(k) = z₁(k−1)`.
    Rec,
    /// Direct feedback: `z₀(k) = x(k)` whenever that problem is feasible.
    Df,
    /// `Rec` plus an exact-penalty soft constraint on the predicted mean.
    RecSc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nom, Variant::Rec, Variant::Df, Variant::RecSc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nom => "nom",
            Variant::Rec => "rec",
            Variant::Df => "df",
            Variant::RecSc => "recsc",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nom" => Ok(Variant::Nom),
            "rec" => Ok(Variant::Rec),
            "df" => Ok(Variant::Df),
            "recsc" => Ok(Variant::RecSc),
            other => Err(Error::Config {
                field: "variants".into(),
                message: format!("unknown variant `{other}` (expected nom|rec|df|recsc)"),
            }),
        }
    }
}

/// Stage cost `‖x − r‖²_Q + ‖u‖²_R + λ‖u‖₁`, terminal cost `‖x − r‖²_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub reference: DVector<f64>,
    pub input_l1_weight: f64,
    pub slack_weight: f64,
}

impl CostSpec {
    /// Quadratic cost with the terminal weight from [`terminal_weight`] and
    /// the default soft-constraint weight `10³ · max Q`.
    pub fn quadratic(gain: &ClosedLoopGain, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let p = terminal_weight(gain, &q, &r)?;
        let n = q.nrows();
        let slack_weight = default_slack_weight(&q);
        Ok(Self {
            q,
            r,
            p,
            reference: DVector::zeros(n),
            input_l1_weight: 0.0,
            slack_weight,
        })
    }

    fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if self.q.shape() != (nx, nx) || self.p.shape() != (nx, nx) || self.reference.len() != nx {
            return Err(dims("cost: Q, P and reference must match n_x"));
        }
        if self.r.shape() != (nu, nu) {
            return Err(dims("cost: R must be n_u x n_u"));
        }
        if self.input_l1_weight < 0.0 || self.slack_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "cost weights must be nonnegative".into(),
            ));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P", &self.p)] {
            if m.nrows() > 0
                && symmetrize(m).symmetric_eigenvalues().min() < -1e-10 * m.amax().max(1.0)
            {
                return Err(Error::InvalidArgument(format!(
                    "cost weight {name} is not PSD"
                )));
            }
        }
        Ok(())
    }
}

pub fn default_slack_weight(q: &DMatrix<f64>) -> f64 {
    1e3 * q.amax().max(1e-12)
}

/// Solution of `A_Kᵀ P A_K − P = −(Q + Kᵀ R K)`.
pub fn terminal_weight(
    gain: &ClosedLoopGain,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = gain.k();
    if q.shape() != (k.ncols(), k.ncols()) || r.shape() != (k.nrows(), k.nrows()) {
        return Err(dims("terminal_weight: Q must be n_x x n_x and R n_u x n_u"));
    }
    let stage = q + k.transpose() * r * k;
    dlyap(&gain.a_k().transpose(), &symmetrize(&stage))
}

/// `‖μ‖²_W + tr(W Σ) = E‖x‖²_W` for `x ~ (μ, Σ)`.
pub fn expected_quadratic(mean: &DVector<f64>, cov: &DMatrix<f64>, weight: &DMatrix<f64>) -> f64 {
    mean.dot(&(weight * mean)) + (weight * cov).trace()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    Point(DVector<f64>),
    Polytope(Polytope),
}

/// Moments of predicted states and inputs for `i = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean_x: Vec<DVector<f64>>,
    pub cov_x: Vec<DMatrix<f64>>,
    pub mean_u: Vec<DVector<f64>>,
    pub cov_u: Vec<DMatrix<f64>>,
}

/// Per-step means and covariances.
pub type StepMoments = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Mean and covariance of the predicted errors `e_0..e_N` given `e_0` and the
/// disturbance window (the first `N` blocks are used).
pub fn error_moments(
    stack: &PredictionStack,
    e0: &DVector<f64>,
    window: &ConditionalWindow,
) -> Result<StepMoments> {
    let n = stack.nx();
    let horizon = stack.horizon();
    if window.block != n || window.steps() < horizon {
        return Err(dims(format!(
            "window has {} blocks of {}, need {horizon} of {n}",
            window.steps(),
            window.block
        )));
    }
    let len = horizon * n;
    let mu = stack.a0() * e0 + stack.abar() * window.mean.rows(0, len);
    let cov = stack.abar() * window.cov.view((0, 0), (len, len)) * stack.abar().transpose();
    let mut means = vec![e0.clone()];
    let mut covs = vec![DMatrix::zeros(n, n)];
    for i in 0..horizon {
        means.push(mu.rows(i * n, n).into_owned());
        covs.push(symmetrize(&cov.view((i * n, i * n), (n, n)).into_owned()));
    }
    Ok((means, covs))
}

/// `μ^x_i = z_i + μ^e_i`, `μ^u_i = v_i + K μ^e_i`, `Σ^u_i = K Σ^x_i Kᵀ`.
pub fn propagate_moments(
    gain: &ClosedLoopGain,
    z: &[DVector<f64>],
    v: &[DVector<f64>],
    e0: &DVector<f64>,
    window: &ConditionalWindow,
) -> Result<Moments> {
    let horizon = z.len().saturating_sub(1);
    if horizon == 0 || v.len() != horizon {
        return Err(dims("propagate_moments: need N+1 states and N inputs"));
    }
    let stack = prediction_stack(gain.a_k(), horizon)?;
    let (me, ce) = error_moments(&stack, e0, window)?;
    let k = gain.k();
    let mean_x = z.iter().zip(&me).map(|(z, m)| z + m).collect();
    let mean_u = (0..horizon).map(|i| &v[i] + k * &me[i]).collect();
    let cov_u = ce[..horizon]
        .iter()
        .map(|c| symmetrize(&(k * c * k.transpose())))
        .collect();
    Ok(Moments {
        mean_x,
        cov_x: ce,
        mean_u,
        cov_u,
    })
}

/// Everything needed to build a controller.
#[derive(Debug, Clone)]
pub struct SmpcSetup {
    pub model: LtiModel,
    pub gain: ClosedLoopGain,
    pub horizon: usize,
    pub cost: CostSpec,
    pub schedule: TighteningSchedule,
    pub state_constraints: Polytope,
    pub input_constraints: Option<Polytope>,
    pub terminal: TerminalSet,
    pub variant: Variant,
    pub disturbance: GaussianSequence,
    pub qp: QpSettings,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n_c: usize,
    n_t: usize,
    n_s: usize,
    // row offsets
    r_state: usize,
    r_term: usize,
    r_input: usize,
    r_l1: usize,
    r_soft: usize,
    rows: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        self.n_c + self.n_t + self.n_s
    }
}

/// Immutable, shareable controller data: condensed matrices, tightened
/// bounds per step and conditioning maps.
#[derive(Debug)]
pub struct SmpcDesign {
    model: LtiModel,
    gain: ClosedLoopGain,
    horizon: usize,
    cost: CostSpec,
    schedule: TighteningSchedule,
    state_constraints: Polytope,
    input_constraints: Option<Polytope>,
    terminal: TerminalSet,
    variant: Variant,
    disturbance: GaussianSequence,
    qp_settings: QpSettings,
    z_ref: DVector<f64>,
    v_ref: DVector<f64>,
    // Φ_i = A_K^i, i = 0..=N
    phi: Vec<DMatrix<f64>>,
    // stacked z̃ = Φ z̃₀ + Γ c, (N+1)n × N m
    gamma: DMatrix<f64>,
    // stacked v − v_ref = S_u c + KΦ z̃₀, N m × N m
    s_u: DMatrix<f64>,
    k_phi: Vec<DMatrix<f64>>,
    stack: PredictionStack,
    qbar_diag: Vec<DMatrix<f64>>,
    // g_c = gx · (Q̄ s_x) + gu · (R̄ s_u)
    gx: DMatrix<f64>,
    gu: DMatrix<f64>,
    hessian: DMatrix<f64>,
    constraints: DMatrix<f64>,
    layout: Layout,
    state_rhs: Vec<DVector<f64>>,
    input_rhs: Vec<DVector<f64>>,
    terminal_rhs: Option<DVector<f64>>,
    cond: Option<Vec<ConditioningMap>>,
    iid_window: ConditionalWindow,
    trace_const: Vec<f64>,
}

impl SmpcDesign {
    pub fn new(setup: SmpcSetup) -> Result<Self> {
        let SmpcSetup {
            model,
            gain,
            horizon,
            cost,
            schedule,
            state_constraints,
            input_constraints,
            terminal,
            variant,
            disturbance,
            qp,
        } = setup;
        let n = model.nx();
        let m = model.nu();
        if horizon == 0 {
            return Err(Error::InvalidArgument(
                "prediction horizon N must be >= 1".into(),
            ));
        }
        cost.validate(n, m)?;
        if state_constraints.dim() != n {
            return Err(dims("state constraints must live in R^n_x"));
        }
        if let Some(u) = &input_constraints {
            if u.dim() != m {
                return Err(dims("input constraints must live in R^n_u"));
            }
        }
        if disturbance.block() != n {
            return Err(dims("disturbance block must equal n_x"));
        }
        if disturbance.steps() < horizon + 1 {
            return Err(dims(
                "disturbance sequence shorter than the prediction window",
            ));
        }
        if schedule.is_empty() {
            return Err(Error::EmptySchedule);
        }

        let z_ref = match &terminal {
            TerminalSet::Point(p) => {
                if p.len() != n {
                    return Err(dims("terminal point must have length n_x"));
                }
                p.clone()
            }
            TerminalSet::Polytope(p) => {
                if p.dim() != n {
                    return Err(dims("terminal polytope must live in R^n_x"));
                }
                cost.reference.clone()
            }
        };
        let v_ref = equilibrium_input(&model, &z_ref)?;

        let a_k = gain.a_k();
        let k = gain.k();
        let phi = matrix_powers(a_k, horizon);
        let mut gamma = DMatrix::zeros((horizon + 1) * n, horizon * m);
        for i in 1..=horizon {
            for j in 0..i {
                let blk = &phi[i - 1 - j] * model.b();
                gamma.view_mut((i * n, j * m), (n, m)).copy_from(&blk);
            }
        }
        let mut s_u = DMatrix::identity(horizon * m, horizon * m);
        for i in 0..horizon {
            let kg = k * gamma.view((i * n, 0), (n, horizon * m));
            let mut rows = s_u.view_mut((i * m, 0), (m, horizon * m));
            rows += kg;
        }
        let k_phi: Vec<DMatrix<f64>> = phi.iter().map(|p| k * p).collect();
        let stack = prediction_stack(a_k, horizon)?;

        let mut qbar_diag = vec![cost.q.clone(); horizon];
        qbar_diag.push(cost.p.clone());
        let qbar = block_diag(&qbar_diag);
        let rbar = block_diag(&vec![cost.r.clone(); horizon]);
        let gx = gamma.transpose() * &qbar * 2.0;
        let gu = s_u.transpose() * &rbar * 2.0;
        let h_c = symmetrize(
            &((gamma.transpose() * &qbar * &gamma + s_u.transpose() * &rbar * &s_u) * 2.0),
        );

        let nx_rows = state_constraints.rows();
        let nu_rows = input_constraints.as_ref().map_or(0, |u| u.rows());
        let n_c = horizon * m;
        let n_t = if cost.input_l1_weight > 0.0 {
            horizon * m
        } else {
            0
        };
        let soft = variant == Variant::RecSc && cost.slack_weight > 0.0;
        // with a point terminal set the step-N mean is fixed, so its penalty is
        // a constant and the rows would duplicate the terminal equalities
        let soft_steps = match &terminal {
            TerminalSet::Point(_) => horizon - 1,
            TerminalSet::Polytope(_) => horizon,
        };
        let n_s = if soft { soft_steps * nx_rows } else { 0 };
        let term_rows = match &terminal {
            TerminalSet::Point(_) => n,
            TerminalSet::Polytope(p) => p.rows(),
        };
        let r_state = 0;
        let r_term = r_state + (horizon - 1) * nx_rows;
        let r_input = r_term + term_rows;
        let r_l1 = r_input + horizon * nu_rows;
        let r_soft = r_l1 + 2 * n_t;
        let rows = r_soft + 2 * n_s;
        let layout = Layout {
            n_c,
            n_t,
            n_s,
            r_state,
            r_term,
            r_input,
            r_l1,
            r_soft,
            rows,
        };
        let dim = layout.dim();

        let mut hessian = DMatrix::zeros(dim, dim);
        hessian.view_mut((0, 0), (n_c, n_c)).copy_from(&h_c);
        // Auxiliary variables sit at their lower bounds at the optimum, so a
        // small quadratic term leaves the solution unchanged while keeping the
        // Hessian definite. It is sized from each block's own linear weight and
        // magnitude so the perturbation stays ~1e-6 relative.
        let finite_scale = |b: &DVector<f64>| {
            b.iter()
                .filter(|v| v.is_finite())
                .fold(1.0f64, |a, v| a.max(v.abs()))
        };
        let u_scale = input_constraints
            .as_ref()
            .map_or(1.0 + v_ref.amax(), |u| finite_scale(u.b()));
        let x_scale = finite_scale(state_constraints.b());
        for i in n_c..n_c + n_t {
            hessian[(i, i)] = 1e-6 * cost.input_l1_weight / u_scale;
        }
        for i in n_c + n_t..dim {
            hessian[(i, i)] = 1e-6 * cost.slack_weight / x_scale;
        }

        let xa = state_constraints.a();
        let mut c = DMatrix::zeros(rows, dim);
        for i in 1..horizon {
            let blk = xa * gamma.view((i * n, 0), (n, n_c));
            c.view_mut((r_state + (i - 1) * nx_rows, 0), (nx_rows, n_c))
                .copy_from(&blk);
        }
        let gamma_n = gamma.view((horizon * n, 0), (n, n_c)).into_owned();
        match &terminal {
            TerminalSet::Point(_) => c.view_mut((r_term, 0), (n, n_c)).copy_from(&gamma_n),
            TerminalSet::Polytope(p) => c
                .view_mut((r_term, 0), (term_rows, n_c))
                .copy_from(&(p.a() * &gamma_n)),
        }
        if let Some(u) = &input_constraints {
            for i in 0..horizon {
                let blk = u.a() * s_u.view((i * m, 0), (m, n_c));
                c.view_mut((r_input + i * nu_rows, 0), (nu_rows, n_c))
                    .copy_from(&blk);
            }
        }
        for r in 0..n_t {
            for j in 0..n_c {
                c[(r_l1 + 2 * r, j)] = s_u[(r, j)];
                c[(r_l1 + 2 * r + 1, j)] = -s_u[(r, j)];
            }
            c[(r_l1 + 2 * r, n_c + r)] = -1.0;
            c[(r_l1 + 2 * r + 1, n_c + r)] = -1.0;
        }
        if n_s > 0 {
            // slack rows: X_j (Γ_i c) − σ_ij ≤ …, and −σ_ij ≤ 0
            for i in 1..=soft_steps {
                let blk = xa * gamma.view((i * n, 0), (n, n_c));
                for j in 0..nx_rows {
                    let s = (i - 1) * nx_rows + j;
                    let row = r_soft + 2 * s;
                    for col in 0..n_c {
                        c[(row, col)] = blk[(j, col)];
                    }
                    c[(row, n_c + n_t + s)] = -1.0;
                    c[(row + 1, n_c + n_t + s)] = -1.0;
                }
            }
        }

        let state_rhs: Vec<DVector<f64>> = schedule
            .state_sets()
            .iter()
            .map(|e| tighten_unchecked(&state_constraints, e).map(|p| p.b().clone()))
            .collect::<Result<_>>()?;
        let input_rhs: Vec<DVector<f64>> = match &input_constraints {
            Some(u) => schedule
                .input_sets()
                .iter()
                .map(|e| tighten_unchecked(u, e).map(|p| p.b().clone()))
                .collect::<Result<_>>()?,
            None => vec![DVector::zeros(0); schedule.len()],
        };
        let terminal_rhs = match &terminal {
            TerminalSet::Point(_) => None,
            TerminalSet::Polytope(p) => Some(p.b().clone()),
        };

        // conditional windows: only needed when blocks are correlated
        let steps = disturbance.steps();
        let last_k = steps - horizon - 1;
        let cond = if is_block_independent(&disturbance) {
            None
        } else {
            Some(
                (0..=last_k)
                    .map(|kk| disturbance.conditioning_map(kk, horizon))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let iid_window = disturbance
            .conditioning_map(0, horizon)?
            .apply(&DVector::zeros(0))?;
        let trace_for = |w: &ConditionalWindow| -> Result<f64> {
            let (_, covs) = error_moments(&stack, &DVector::zeros(n), w)?;
            let mut t = 0.0;
            for (i, s) in covs.iter().enumerate() {
                if i < horizon {
                    t += (&cost.q * s).trace() + (&cost.r * (k * s * k.transpose())).trace();
                } else {
                    t += (&cost.p * s).trace();
                }
            }
            Ok(t)
        };
        let trace_const = match &cond {
            None => vec![trace_for(&iid_window)?; last_k + 1],
            Some(maps) => maps
                .iter()
                .map(|mp| {
                    trace_for(&ConditionalWindow {
                        mean: DVector::zeros(mp.cov().nrows()),
                        cov: mp.cov().clone(),
                        block: n,
                    })
                })
                .collect::<Result<_>>()?,
        };

        Ok(Self {
            model,
            gain,
            horizon,
            cost,
            schedule,
            state_constraints,
            input_constraints,
            terminal,
            variant,
            disturbance,
            qp_settings: qp,
            z_ref,
            v_ref,
            phi,
            gamma,
            s_u,
            k_phi,
            stack,
            qbar_diag,
            gx,
            gu,
            hessian,
            constraints: c,
            layout,
            state_rhs,
            input_rhs,
            terminal_rhs,
            cond,
            iid_window,
            trace_const,
        })
    }

    pub fn model(&self) -> &LtiModel {
        &self.model
    }

    pub fn gain(&self) -> &ClosedLoopGain {
        &self.gain
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn schedule(&self) -> &TighteningSchedule {
        &self.schedule
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn disturbance(&self) -> &GaussianSequence {
        &self.disturbance
    }

    pub fn state_constraints(&self) -> &Polytope {
        &self.state_constraints
    }

    pub fn input_constraints(&self) -> Option<&Polytope> {
        self.input_constraints.as_ref()
    }

    pub fn terminal(&self) -> &TerminalSet {
        &self.terminal
    }

    /// Equilibrium `(z_ref, v_ref)` of the nominal dynamics used as the
    /// terminal reference.
    pub fn equilibrium(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.z_ref, &self.v_ref)
    }

    /// Last time index with a full prediction window.
    pub fn last_step(&self) -> usize {
        self.disturbance.steps() - self.horizon - 1
    }

    /// Tightened state bounds `b − support(R^x_k)` at absolute step `k`.
    pub fn state_rhs(&self, k: usize) -> &DVector<f64> {
        &self.state_rhs[k.min(self.state_rhs.len() - 1)]
    }

    pub fn input_rhs(&self, k: usize) -> &DVector<f64> {
        &self.input_rhs[k.min(self.input_rhs.len() - 1)]
    }

    pub fn workspace(&self) -> Result<QpWorkspace> {
        QpWorkspace::new(
            self.hessian.clone(),
            self.constraints.clone(),
            self.qp_settings,
        )
    }

    /// Disturbance window for step `k` given the realized prefix.
    pub fn window(&self, k: usize, observed: &DVector<f64>) -> Result<ConditionalWindow> {
        match &self.cond {
            None => Ok(self.iid_window_at(k)),
            Some(maps) => {
                let map = maps.get(k).ok_or(Error::WindowExceedsHorizon {
                    observed: k,
                    window: self.horizon + 1,
                    steps: self.disturbance.steps(),
                })?;
                let need = map.observed_len();
                if observed.len() < need {
                    return Err(dims(format!(
                        "need {need} observed disturbance values, got {}",
                        observed.len()
                    )));
                }
                map.apply(&observed.rows(0, need).into_owned())
            }
        }
    }

    fn iid_window_at(&self, k: usize) -> ConditionalWindow {
        let n = self.model.nx();
        let len = (self.horizon + 1) * n;
        let off = k * n;
        if off + len <= self.disturbance.mean().len() {
            ConditionalWindow {
                mean: self.disturbance.mean().rows(off, len).into_owned(),
                cov: self.iid_window.cov.clone(),
                block: n,
            }
        } else {
            self.iid_window.clone()
        }
    }

    /// Stacked predicted error means `μ^e_0..μ^e_N` (zero for `Nom`).
    fn error_means(&self, e0: &DVector<f64>, window: &ConditionalWindow) -> Vec<DVector<f64>> {
        let n = self.model.nx();
        if self.variant == Variant::Nom {
            return vec![DVector::zeros(n); self.horizon + 1];
        }
        let len = self.horizon * n;
        let mu = self.stack.a0() * e0 + self.stack.abar() * window.mean.rows(0, len);
        let mut out = Vec::with_capacity(self.horizon + 1);
        out.push(e0.clone());
        for i in 0..self.horizon {
            out.push(mu.rows(i * n, n).into_owned());
        }
        out
    }

    /// Linear term, constant and bounds of the QP at step `k`.
    #[allow(clippy::needless_range_loop)]
    fn assemble(
        &self,
        k: usize,
        z0: &DVector<f64>,
        e_means: &[DVector<f64>],
        include_trace: bool,
    ) -> Assembled {
        let n = self.model.nx();
        let m = self.model.nu();
        let nn = self.horizon;
        let lay = self.layout;
        let zt0 = z0 - &self.z_ref;

        // offsets of μ^x_i − r and μ^u_i that do not depend on c
        let mut s_x = DVector::zeros((nn + 1) * n);
        let mut qs_x = DVector::zeros((nn + 1) * n);
        for i in 0..=nn {
            let zi = &self.phi[i] * &zt0 + &self.z_ref;
            let sx = zi + &e_means[i] - &self.cost.reference;
            qs_x.rows_mut(i * n, n)
                .copy_from(&(&self.qbar_diag[i] * &sx));
            s_x.rows_mut(i * n, n).copy_from(&sx);
        }
        let kmat = self.gain.k();
        let mut s_u = DVector::zeros(nn * m);
        let mut rs_u = DVector::zeros(nn * m);
        for i in 0..nn {
            let su = &self.k_phi[i] * &zt0 + &self.v_ref + kmat * &e_means[i];
            rs_u.rows_mut(i * m, m).copy_from(&(&self.cost.r * &su));
            s_u.rows_mut(i * m, m).copy_from(&su);
        }
        let mut g = DVector::zeros(lay.dim());
        let gc = &self.gx * &qs_x + &self.gu * &rs_u;
        g.rows_mut(0, lay.n_c).copy_from(&gc);
        for i in 0..lay.n_t {
            g[lay.n_c + i] = self.cost.input_l1_weight;
        }
        for i in 0..lay.n_s {
            g[lay.n_c + lay.n_t + i] = self.cost.slack_weight;
        }
        let mut constant = s_x.dot(&qs_x) + s_u.dot(&rs_u);
        if include_trace {
            constant += self.trace_const[k.min(self.trace_const.len() - 1)];
        }

        let mut lo = DVector::from_element(lay.rows, f64::NEG_INFINITY);
        let mut up = DVector::from_element(lay.rows, f64::INFINITY);
        let xa = self.state_constraints.a();
        let nxr = self.state_constraints.rows();
        for i in 1..nn {
            let zi = &self.phi[i] * &zt0 + &self.z_ref;
            let rhs = self.state_rhs(k + i) - xa * zi;
            up.rows_mut(lay.r_state + (i - 1) * nxr, nxr)
                .copy_from(&rhs);
        }
        let zt_n = &self.phi[nn] * &zt0;
        match (&self.terminal, &self.terminal_rhs) {
            (TerminalSet::Polytope(p), Some(f)) => {
                let rhs = f - p.a() * (&zt_n + &self.z_ref);
                up.rows_mut(lay.r_term, p.rows()).copy_from(&rhs);
            }
            _ => {
                let target = -zt_n;
                lo.rows_mut(lay.r_term, n).copy_from(&target);
                up.rows_mut(lay.r_term, n).copy_from(&target);
            }
        }
        if let Some(u) = &self.input_constraints {
            let nur = u.rows();
            for i in 0..nn {
                let vi = &self.k_phi[i] * &zt0 + &self.v_ref;
                let rhs = self.input_rhs(k + i) - u.a() * vi;
                up.rows_mut(lay.r_input + i * nur, nur).copy_from(&rhs);
            }
        }
        for r in 0..lay.n_t {
            up[lay.r_l1 + 2 * r] = -s_u[r];
            up[lay.r_l1 + 2 * r + 1] = s_u[r];
        }
        if lay.n_s > 0 {
            for i in 1..=lay.n_s / nxr {
                let zi = &self.phi[i] * &zt0 + &self.z_ref;
                let offset = xa * &e_means[i];
                let rhs = self.state_rhs(k + i) - xa * zi - &offset;
                for j in 0..nxr {
                    let s = (i - 1) * nxr + j;
                    // where the hard row on z_i exists and the mean offset is
                    // not positive, the soft row is implied; dropping it avoids
                    // a degenerate active set
                    let implied = i < nn && offset[j] <= 1e-9 * (1.0 + rhs[j].abs());
                    up[lay.r_soft + 2 * s] = if implied { f64::INFINITY } else { rhs[j] };
                    up[lay.r_soft + 2 * s + 1] = 0.0;
                }
            }
        }
        Assembled {
            g,
            constant,
            lo,
            up,
        }
    }

    /// Nominal trajectory and inputs from a decision vector.
    fn decode(
        &self,
        z0: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let n = self.model.nx();
        let m = self.model.nu();
        let zt0 = z0 - &self.z_ref;
        let c = y.rows(0, self.layout.n_c);
        let zs = &self.gamma * c;
        let vs = &self.s_u * c;
        let z = (0..=self.horizon)
            .map(|i| &self.phi[i] * &zt0 + zs.rows(i * n, n) + &self.z_ref)
            .collect();
        let v = (0..self.horizon)
            .map(|i| &self.k_phi[i] * &zt0 + vs.rows(i * m, m) + &self.v_ref)
            .collect();
        (z, v)
    }

    /// Candidate from the proof of recursive feasibility:
    /// `V̄ = {v₁, …, v_{N−1}, K(z_N − z_ref) + v_ref}`,
    /// `Z̄ = {z₁, …, z_N, A_K(z_N − z_ref) + z_ref}`.
    pub fn shift_candidate(
        &self,
        v: &[DVector<f64>],
        z: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let zn = &z[z.len() - 1];
        let dz = zn - &self.z_ref;
        let mut vb: Vec<DVector<f64>> = v[1..].to_vec();
        vb.push(self.gain.k() * &dz + &self.v_ref);
        let mut zb: Vec<DVector<f64>> = z[1..].to_vec();
        zb.push(self.gain.a_k() * &dz + &self.z_ref);
        (vb, zb)
    }

    /// Row-wise check of the tightened constraints at absolute step `k` for a
    /// nominal plan (`z₀..z_N`, `v₀..v_{N−1}`).
    pub fn plan_satisfies(
        &self,
        k: usize,
        v: &[DVector<f64>],
        z: &[DVector<f64>],
        tol: f64,
    ) -> bool {
        let nn = self.horizon;
        if v.len() != nn || z.len() != nn + 1 {
            return false;
        }
        // dynamics consistency
        for i in 0..nn {
            let next = self.model.a() * &z[i] + self.model.b() * &v[i] + self.model.affine();
            if (&next - &z[i + 1]).amax() > tol * (1.0 + next.amax()) {
                return false;
            }
        }
        let xa = self.state_constraints.a();
        for (i, zi) in z.iter().enumerate().take(nn) {
            let lhs = xa * zi;
            let rhs = self.state_rhs(k + i);
            if (0..lhs.len()).any(|j| lhs[j] > rhs[j] + tol) {
                return false;
            }
        }
        if let Some(u) = &self.input_constraints {
            for (i, vi) in v.iter().enumerate() {
                let lhs = u.a() * vi;
                let rhs = self.input_rhs(k + i);
                if (0..lhs.len()).any(|j| lhs[j] > rhs[j] + tol) {
                    return false;
                }
            }
        }
        match &self.terminal {
            TerminalSet::Point(p) => (&z[nn] - p).amax() <= tol,
            TerminalSet::Polytope(p) => p.contains(&z[nn], tol),
        }
    }

    /// Checks that the terminal set is invariant under `v = K(z − z_ref) +
    /// v_ref` and lies inside the terminally tightened state and input sets.
    pub fn verify_terminal(&self) -> Result<bool> {
        verify_terminal(
            &self.model,
            &self.terminal,
            &self.gain,
            &self.state_constraints,
            self.input_constraints.as_ref(),
            &self.schedule,
        )
    }
}

struct Assembled {
    g: DVector<f64>,
    constant: f64,
    lo: DVector<f64>,
    up: DVector<f64>,
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

fn is_block_independent(seq: &GaussianSequence) -> bool {
    let n = seq.block();
    let cov = seq.cov();
    let scale = cov.amax().max(1e-300);
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            if i / n != j / n && cov[(i, j)].abs() > 1e-14 * scale {
                return false;
            }
        }
    }
    true
}

/// Input holding `z` at rest: `A z + B v + affine = z`.
pub fn equilibrium_input(model: &LtiModel, z: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.nx();
    let rhs = (DMatrix::identity(n, n) - model.a()) * z - model.affine();
    if rhs.amax() == 0.0 {
        return Ok(DVector::zeros(model.nu()));
    }
    let svd = model.b().clone().svd(true, true);
    let v = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::AssumptionViolated(format!("no equilibrium input: {e}")))?;
    let resid = model.b() * &v - &rhs;
    if resid.amax() > 1e-9 * (1.0 + rhs.amax()) {
        return Err(Error::AssumptionViolated(format!(
            "terminal point is not an equilibrium of the nominal dynamics (residual {:.3e})",
            resid.amax()
        )));
    }
    Ok(v)
}

/// Terminal invariance and terminal tightening check.
pub fn verify_terminal(
    model: &LtiModel,
    terminal: &TerminalSet,
    gain: &ClosedLoopGain,
    state_constraints: &Polytope,
    input_constraints: Option<&Polytope>,
    schedule: &TighteningSchedule,
) -> Result<bool> {
    let x_f = tighten_unchecked(state_constraints, schedule.terminal_state())?;
    let u_f = match input_constraints {
        Some(u) => Some(tighten_unchecked(u, schedule.terminal_input())?),
        None => None,
    };
    let tol = 1e-9;
    match terminal {
        TerminalSet::Point(zf) => {
            let vf = equilibrium_input(model, zf)?;
            let next = model.a() * zf + model.b() * &vf + model.affine();
            if (&next - zf).amax() > tol * (1.0 + zf.amax()) {
                return Err(Error::AssumptionViolated(
                    "terminal point is not invariant".into(),
                ));
            }
            if !x_f.contains(zf, tol) {
                return Err(Error::AssumptionViolated(
                    "terminal point lies outside the terminally tightened state set".into(),
                ));
            }
            if let Some(uf) = &u_f {
                if !uf.contains(&vf, tol) {
                    return Err(Error::AssumptionViolated(
                        "terminal input lies outside the terminally tightened input set".into(),
                    ));
                }
            }
            Ok(true)
        }
        TerminalSet::Polytope(zf) => {
            let z_ref = polytope_equilibrium(model, zf)?;
            let v_ref = equilibrium_input(model, &z_ref)?;
            let a_k = gain.a_k();
            let k = gain.k();
            let n = model.nx();
            let shift = (DMatrix::identity(n, n) - a_k) * &z_ref;
            for j in 0..zf.rows() {
                let row = zf.row(j);
                let s = zf.support(&(a_k.transpose() * &row))? + row.dot(&shift);
                if s > zf.b()[j] + tol {
                    return Err(Error::AssumptionViolated(format!(
                        "terminal set not invariant (row {j})"
                    )));
                }
            }
            for j in 0..x_f.rows() {
                if zf.support(&x_f.row(j))? > x_f.b()[j] + tol {
                    return Err(Error::AssumptionViolated(format!(
                        "terminal set leaves the tightened state set (row {j})"
                    )));
                }
            }
            if let Some(uf) = &u_f {
                for j in 0..uf.rows() {
                    let row = uf.row(j);
                    let dir = k.transpose() * &row;
                    let s = zf.support(&dir)? - dir.dot(&z_ref) + row.dot(&v_ref);
                    if s > uf.b()[j] + tol {
                        return Err(Error::AssumptionViolated(format!(
                            "terminal inputs leave the tightened input set (row {j})"
                        )));
                    }
                }
            }
            Ok(true)
        }
    }
}

// The origin when the model has no offset; otherwise the Chebyshev-free
// choice of the least-norm equilibrium inside the set is not attempted.
fn polytope_equilibrium(model: &LtiModel, zf: &Polytope) -> Result<DVector<f64>> {
    let z = DVector::zeros(model.nx());
    if model.affine().amax() == 0.0 && zf.contains(&z, 1e-12) {
        Ok(z)
    } else {
        Err(Error::AssumptionViolated(
            "polytopic terminal sets require an offset-free model with the origin inside".into(),
        ))
    }
}

/// Nominal state, time index and the last plan (for warm starts and the
/// shifted fallback).
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub z: DVector<f64>,
    pub k: usize,
    plan: Option<Plan>,
}

#[derive(Debug, Clone, PartialEq)]
struct Plan {
    y: DVector<f64>,
    z: Vec<DVector<f64>>,
    v: Vec<DVector<f64>>,
    // QP multipliers (empty for fallback plans)
    mult: DVector<f64>,
}

impl ControllerState {
    /// `z(0) = x(0)`.
    pub fn initial(x0: &DVector<f64>) -> Self {
        Self {
            z: x0.clone(),
            k: 0,
            plan: None,
        }
    }

    pub fn has_plan(&self) -> bool {
        self.plan.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub u: DVector<f64>,
    pub v0: DVector<f64>,
    /// Nominal state used at this step (`z₀(k)`).
    pub z0: DVector<f64>,
    pub z_pred: Vec<DVector<f64>>,
    pub v_pred: Vec<DVector<f64>>,
    pub mean_x: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub slacks: Vec<f64>,
    /// Optimal expected cost `J*(x(k), z(k))` including the variance terms.
    pub cost: f64,
    pub iterations: usize,
    /// `Df` only: the nominal state was reset to the measurement.
    pub reset: bool,
    /// The shifted previous plan was applied because the solve failed.
    pub fallback: bool,
}

/// Per-trial controller: shared design plus a private QP workspace.
#[derive(Debug, Clone)]
pub struct SmpcController {
    design: Arc<SmpcDesign>,
    workspace: QpWorkspace,
    warm_start: bool,
}

impl SmpcController {
    pub fn new(design: Arc<SmpcDesign>) -> Result<Self> {
        let workspace = design.workspace()?;
        Ok(Self {
            design,
            workspace,
            warm_start: true,
        })
    }

    pub fn with_warm_start(mut self, on: bool) -> Self {
        self.warm_start = on;
        self
    }

    pub fn design(&self) -> &SmpcDesign {
        &self.design
    }

    /// One receding-horizon step at time `state.k` with measurement `x` and
    /// the realized disturbances `w(0..k)` stacked in `observed`.
    pub fn step(
        &mut self,
        state: &ControllerState,
        x: &DVector<f64>,
        observed: &DVector<f64>,
    ) -> Result<(StepResult, ControllerState)> {
        let d = Arc::clone(&self.design);
        let k = state.k;
        if x.len() != d.model.nx() || state.z.len() != d.model.nx() {
            return Err(dims("state dimension mismatch"));
        }
        let window = d.window(k, observed)?;

        if d.variant == Variant::Df {
            if let Some(res) = self.try_solve(&d, k, x, x, &window, None, None)? {
                let (mut r, s) = res;
                r.reset = true;
                return Ok((r, s));
            }
        }
        let (warm, warm_mult) = match (&state.plan, self.warm_start) {
            (Some(p), true) => (
                Some(self.shifted_guess(&d, p)),
                Some(shifted_multipliers(&d, p)),
            ),
            _ => (None, None),
        };
        match self.try_solve(
            &d,
            k,
            &state.z,
            x,
            &window,
            warm.as_ref(),
            warm_mult.as_ref(),
        )? {
            Some(res) => Ok(res),
            None => Err(Error::Infeasible(k)),
        }
    }

    fn shifted_guess(&self, d: &SmpcDesign, plan: &Plan) -> DVector<f64> {
        let lay = d.layout;
        let m = d.model.nu();
        let mut y = DVector::zeros(lay.dim());
        // c: drop first block, append zero (terminal gain in shifted coordinates)
        let nc = lay.n_c;
        y.rows_mut(0, nc - m).copy_from(&plan.y.rows(m, nc - m));
        if lay.n_t > 0 {
            y.rows_mut(nc, lay.n_t - m)
                .copy_from(&plan.y.rows(nc + m, lay.n_t - m));
        }
        if lay.n_s > 0 {
            let per = d.state_constraints.rows();
            let off = nc + lay.n_t;
            y.rows_mut(off, lay.n_s - per)
                .copy_from(&plan.y.rows(off + per, lay.n_s - per));
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn try_solve(
        &mut self,
        d: &SmpcDesign,
        k: usize,
        z0: &DVector<f64>,
        x: &DVector<f64>,
        window: &ConditionalWindow,
        warm: Option<&DVector<f64>>,
        warm_mult: Option<&DVector<f64>>,
    ) -> Result<Option<(StepResult, ControllerState)>> {
        let e0 = x - z0;
        let e_means = d.error_means(&e0, window);
        let asm = d.assemble(k, z0, &e_means, d.variant != Variant::Nom);
        let sol = self
            .workspace
            .solve(&asm.g, &asm.lo, &asm.up, warm, warm_mult)?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Ok(None),
            QpStatus::MaxIterations => {
                // accept a primal-feasible, nearly optimal point; otherwise fail
                if sol.residuals.primal > 1e-6 || sol.residuals.stationarity > 1e-4 {
                    return Err(Error::MaxIterations(sol.iterations));
                }
            }
        }
        let (z_pred, v_pred) = d.decode(z0, &sol.y);
        let u = d.gain.k() * &e0 + &v_pred[0];
        let mean_x: Vec<DVector<f64>> = z_pred.iter().zip(&e_means).map(|(z, e)| z + e).collect();
        let lay = d.layout;
        let slacks = (0..lay.n_s)
            .map(|i| sol.y[lay.n_c + lay.n_t + i].max(0.0))
            .collect();
        let result = StepResult {
            u,
            v0: v_pred[0].clone(),
            z0: z0.clone(),
            mean_x,
            status: sol.status,
            slacks,
            cost: sol.objective + asm.constant,
            iterations: sol.iterations,
            reset: false,
            fallback: false,
            z_pred: z_pred.clone(),
            v_pred: v_pred.clone(),
        };
        let next = ControllerState {
            z: z_pred[1].clone(),
            k: k + 1,
            plan: Some(Plan {
                y: sol.y,
                z: z_pred,
                v: v_pred,
                mult: sol.multipliers,
            }),
        };
        Ok(Some((result, next)))
    }

    /// Applies the shifted previous plan: `u = K(x − z₁(k−1)) + v₁(k−1)`.
    /// Without a previous plan the nominal input is the terminal law.
    pub fn fallback(
        &self,
        state: &ControllerState,
        x: &DVector<f64>,
    ) -> (StepResult, ControllerState) {
        let d = &self.design;
        let (zb, vb, yb) = match &state.plan {
            Some(p) => {
                let (vb, zb) = d.shift_candidate(&p.v, &p.z);
                (zb, vb, self.shifted_guess(d, p))
            }
            None => {
                let mut z = vec![state.z.clone()];
                let mut v = Vec::new();
                for _ in 0..d.horizon {
                    let last = z.last().unwrap() - &d.z_ref;
                    v.push(d.gain.k() * &last + &d.v_ref);
                    z.push(d.gain.a_k() * &last + &d.z_ref);
                }
                (z, v, DVector::zeros(d.layout.dim()))
            }
        };
        // the shifted plan starts at the nominal state z₁(k−1) = state.z
        let z0 = state.z.clone();
        let e0 = x - &z0;
        let u = d.gain.k() * &e0 + &vb[0];
        let result = StepResult {
            u,
            v0: vb[0].clone(),
            z0,
            mean_x: zb.clone(),
            status: QpStatus::Infeasible,
            slacks: Vec::new(),
            cost: f64::NAN,
            iterations: 0,
            reset: false,
            fallback: true,
            z_pred: zb.clone(),
            v_pred: vb.clone(),
        };
        let next = ControllerState {
            z: zb[1].clone(),
            k: state.k + 1,
            plan: Some(Plan {
                y: yb,
                z: zb,
                v: vb,
                mult: DVector::zeros(0),
            }),
        };
        (result, next)
    }
}

/// Previous multipliers moved one step earlier in every row group, used as
/// the working-set guess for the next solve.
fn shifted_multipliers(d: &SmpcDesign, plan: &Plan) -> DVector<f64> {
    let lay = d.layout;
    let mut out = DVector::zeros(lay.rows);
    if plan.mult.len() != lay.rows {
        return out;
    }
    let nn = d.horizon;
    let mut shift = |start: usize, blocks: usize, per: usize| {
        if blocks > 1 {
            let len = (blocks - 1) * per;
            out.rows_mut(start, len)
                .copy_from(&plan.mult.rows(start + per, len));
        }
    };
    let nxr = d.state_constraints.rows();
    shift(lay.r_state, nn - 1, nxr);
    shift(
        lay.r_input,
        nn,
        d.input_constraints.as_ref().map_or(0, |u| u.rows()),
    );
    if lay.n_t > 0 {
        shift(lay.r_l1, nn, 2 * d.model.nu());
    }
    if lay.n_s > 0 {
        shift(lay.r_soft, lay.n_s / nxr, 2 * nxr);
    }
    let term = lay.r_input - lay.r_term;
    out.rows_mut(lay.r_term, term)
        .copy_from(&plan.mult.rows(lay.r_term, term));
    out
}
