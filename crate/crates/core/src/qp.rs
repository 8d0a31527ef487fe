//! Dense convex QP solver:
//!
//! ```text
//! minimize    ½ yᵀ H y + gᵀ y
//! subject to  A_eq y = b_eq,  A_in y ≤ b_in
//! ```
//!
//! Rows are stacked as `l ≤ C y ≤ u` and Ruiz-equilibrated. For `H ≻ 0` the
//! default method is the Goldfarb–Idnani dual active-set algorithm, which
//! is exact and copes with degenerate active sets. Operator splitting (ADMM)
//! with adaptive step size and an active-set polish covers singular `H` and
//! serves as the fallback. A
//! [`QpWorkspace`] keeps scaling and factorizations for repeated solves that
//! share `H` and the constraint matrix and differ only in `g` and the bounds,
//! which is the situation inside a receding-horizon controller.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.g.len();
        if self.h.shape() != (n, n) {
            return Err(dims(format!("H must be {n}x{n}, got {:?}", self.h.shape())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(dims("equality block has inconsistent dimensions"));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(dims("inequality block has inconsistent dimensions"));
        }
        Ok(())
    }

    /// Stacked `(C, l, u)` with equalities first.
    pub fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let (me, mi) = (self.a_eq.nrows(), self.a_in.nrows());
        let mut c = DMatrix::zeros(me + mi, n);
        c.view_mut((0, 0), (me, n)).copy_from(&self.a_eq);
        c.view_mut((me, 0), (mi, n)).copy_from(&self.a_in);
        let mut l = DVector::from_element(me + mi, f64::NEG_INFINITY);
        let mut u = DVector::zeros(me + mi);
        l.rows_mut(0, me).copy_from(&self.b_eq);
        u.rows_mut(0, me).copy_from(&self.b_eq);
        u.rows_mut(me, mi).copy_from(&self.b_in);
        (c, l, u)
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.h * y)) + self.g.dot(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// Normalized KKT residuals (each divided by the magnitude of the data it
/// is built from, floored at one).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Multipliers of the stacked rows `l ≤ C y ≤ u`; positive when the upper
    /// bound is active, negative for the lower bound.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub polished: bool,
    /// Farkas residual `max(‖Cᵀδ‖, uᵀδ₊ + lᵀδ₋)` relative to `‖δ‖` when
    /// infeasibility was certified.
    pub certificate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub check_every: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
    /// Required normalized KKT accuracy for `Optimal`.
    pub kkt_tol: f64,
    /// Attempt a polish every this many iterations before ADMM converges
    /// (0 disables).
    pub polish_every: usize,
    /// Run the exact dual active-set method once ADMM has done this many
    /// iterations without reaching `kkt_tol` (`Some(0)`: before ADMM starts,
    /// `None`: never). Only used when `H ≻ 0`.
    pub active_set_after: Option<usize>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-5,
            eps_rel: 1e-5,
            eps_infeasible: 1e-6,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 5,
            adaptive_rho: true,
            polish: true,
            kkt_tol: 1e-6,
            polish_every: 25,
            active_set_after: Some(0),
        }
    }
}

pub fn solve(qp: &QuadraticProgram, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
    solve_with(qp, warm_start, QpSettings::default())
}

pub fn solve_with(
    qp: &QuadraticProgram,
    warm_start: Option<&DVector<f64>>,
    settings: QpSettings,
) -> Result<QpSolution> {
    qp.validate()?;
    let (c, l, u) = qp.stacked();
    let mut ws = QpWorkspace::new(qp.h.clone(), c, settings)?;
    ws.solve(&qp.g, &l, &u, warm_start, None)
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

/// Cached data for repeated solves with fixed `H` and `C`.
#[derive(Debug, Clone)]
pub struct QpWorkspace {
    settings: QpSettings,
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    // scaled problem: hs = cost * D H D, cs = E C D
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
    hs: DMatrix<f64>,
    cs: DMatrix<f64>,
    cs_t: DMatrix<f64>,
    rho: f64,
    factor: Option<(Vec<bool>, Cholesky<f64, Dyn>)>,
    // unscaled H⁻¹ and H⁻¹Cᵀ for the polish step (None if H is singular)
    h_chol: Option<Cholesky<f64, Dyn>>,
    h_inv_ct: Option<DMatrix<f64>>,
    // L⁻ᵀ for the scaled Hessian hs = L Lᵀ (dual active-set start)
    hs_inv_lt: Option<DMatrix<f64>>,
}

impl QpWorkspace {
    pub fn new(h: DMatrix<f64>, c: DMatrix<f64>, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || c.ncols() != n {
            return Err(dims(format!(
                "workspace: H is {:?}, C is {:?}",
                h.shape(),
                c.shape()
            )));
        }
        let (d, e, cost) = ruiz(&h, &c);
        let hs = DMatrix::from_fn(n, n, |i, j| cost * d[i] * h[(i, j)] * d[j]);
        let cs = DMatrix::from_fn(c.nrows(), n, |i, j| e[i] * c[(i, j)] * d[j]);
        let cs_t = cs.transpose();
        let h_chol = h.clone().cholesky();
        let h_inv_ct = h_chol.as_ref().map(|ch| ch.solve(&c.transpose()));
        let hs_inv_lt = hs.clone().cholesky().and_then(|ch| {
            ch.l()
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .map(|li| li.transpose())
        });
        Ok(Self {
            rho: settings.rho,
            settings,
            h,
            c,
            d,
            e,
            cost,
            hs,
            cs,
            cs_t,
            factor: None,
            h_chol,
            h_inv_ct,
            hs_inv_lt,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    fn rho_vec(&self, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(l.len(), |i, _| {
            let (lo, hi) = (l[i], u[i]);
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                RHO_MIN
            } else if (hi - lo).abs() <= 1e-12 * (1.0 + hi.abs()) {
                (RHO_EQ_SCALE * self.rho).min(RHO_MAX)
            } else {
                self.rho
            }
        })
    }

    fn factorize(&mut self, eq_pattern: &[bool], rho: &DVector<f64>) {
        if let Some((pat, _)) = &self.factor {
            if pat.as_slice() == eq_pattern {
                return;
            }
        }
        let n = self.dim();
        let mut k = self.hs.clone();
        for i in 0..n {
            k[(i, i)] += self.settings.sigma;
        }
        let weighted = DMatrix::from_fn(self.cs.nrows(), n, |i, j| rho[i] * self.cs[(i, j)]);
        k.gemm(1.0, &self.cs_t, &weighted, 1.0);
        let chol = k
            .cholesky()
            .expect("H + σI + CᵀρC is positive definite for σ > 0");
        self.factor = Some((eq_pattern.to_vec(), chol));
    }

    /// Solves with linear term `g` and bounds `l ≤ C y ≤ u`. Infinite bounds
    /// are allowed. `warm_y` / `warm_mult` are unscaled primal and dual
    /// guesses.
    pub fn solve(
        &mut self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        warm_y: Option<&DVector<f64>>,
        warm_mult: Option<&DVector<f64>>,
    ) -> Result<QpSolution> {
        let n = self.dim();
        let m = self.rows();
        if g.len() != n || l.len() != m || u.len() != m {
            return Err(dims(format!(
                "workspace solve: expected g[{n}], l[{m}], u[{m}], got {}, {}, {}",
                g.len(),
                l.len(),
                u.len()
            )));
        }
        if let Some(w) = warm_y {
            if w.len() != n {
                return Err(dims("warm start has wrong length"));
            }
        }
        if (0..m).any(|i| l[i] > u[i]) {
            // trivially contradictory bounds on the same row
            return Ok(self.infeasible(g, l, u, 0, Some(0.0)));
        }
        let s = self.settings;
        let gs = DVector::from_fn(n, |i, _| self.cost * self.d[i] * g[i]);
        let ls = DVector::from_fn(m, |i, _| self.e[i] * l[i]);
        let us = DVector::from_fn(m, |i, _| self.e[i] * u[i]);

        let mut x = match warm_y {
            Some(w) => DVector::from_fn(n, |i, _| w[i] / self.d[i]),
            None => DVector::zeros(n),
        };
        let mut y = match warm_mult {
            Some(w) if w.len() == m => DVector::from_fn(m, |i, _| self.cost * w[i] / self.e[i]),
            _ => DVector::zeros(m),
        };
        let mut z = &self.cs * &x;
        clamp(&mut z, &ls, &us);

        let mut rho = self.rho_vec(&ls, &us);
        let eq_pattern: Vec<bool> = (0..m).map(|i| rho[i] > self.rho * 1.5).collect();
        self.factorize(&eq_pattern, &rho);

        let mut rhs = DVector::zeros(n);
        let mut xt = DVector::zeros(n);
        let mut zt = DVector::zeros(m);
        let mut tmp_m = DVector::zeros(m);
        let mut y_prev = y.clone();
        let mut eps_abs = s.eps_abs;
        let mut eps_rel = s.eps_rel;
        let mut iterations = 0;
        let mut best: Option<QpSolution> = None;
        let mut tried_exact = false;
        let guess = self.guess_active(l, u, warm_y, warm_mult);
        if s.active_set_after == Some(0) {
            tried_exact = true;
            if let Some(sol) = self.exact_solve(g, l, u, &gs, &ls, &us, 0, &guess) {
                if sol.status != QpStatus::MaxIterations {
                    return Ok(sol);
                }
            }
        }

        while iterations < s.max_iter {
            iterations += 1;
            // x̃ = K⁻¹ (σx − q + Cᵀ(ρz − y))
            for i in 0..m {
                tmp_m[i] = rho[i] * z[i] - y[i];
            }
            rhs.copy_from(&x);
            rhs *= s.sigma;
            rhs -= &gs;
            rhs.gemv(1.0, &self.cs_t, &tmp_m, 1.0);
            xt.copy_from(&rhs);
            self.factor.as_ref().unwrap().1.solve_mut(&mut xt);
            zt.gemv(1.0, &self.cs, &xt, 0.0);
            y_prev.copy_from(&y);
            for i in 0..n {
                x[i] = s.alpha * xt[i] + (1.0 - s.alpha) * x[i];
            }
            for i in 0..m {
                let relaxed = s.alpha * zt[i] + (1.0 - s.alpha) * z[i];
                let znew = (relaxed + y[i] / rho[i]).clamp(ls[i], us[i]);
                y[i] += rho[i] * (relaxed - znew);
                z[i] = znew;
            }

            if iterations % s.check_every != 0 {
                continue;
            }
            let (r_prim, r_dual, prim_scale, dual_scale) = self.admm_residuals(&x, &z, &y, &gs);
            let eps_p = eps_abs + eps_rel * prim_scale;
            let eps_d = eps_abs + eps_rel * dual_scale;
            if r_prim <= eps_p && r_dual <= eps_d {
                let sol = self.finish(g, l, u, &x, &y, iterations);
                if sol.residuals.max() <= s.kkt_tol {
                    self.rho = rho_from(&rho, &eq_pattern).unwrap_or(self.rho);
                    return Ok(sol);
                }
                if best
                    .as_ref()
                    .is_none_or(|b| sol.residuals.max() < b.residuals.max())
                {
                    best = Some(sol);
                }
                eps_abs = (eps_abs * 0.1).max(1e-13);
                eps_rel = (eps_rel * 0.1).max(1e-13);
            }
            if s.polish && s.polish_every > 0 && iterations % s.polish_every == 0 {
                let sol = self.finish(g, l, u, &x, &y, iterations);
                if sol.residuals.max() <= s.kkt_tol {
                    self.rho = rho_from(&rho, &eq_pattern).unwrap_or(self.rho);
                    return Ok(sol);
                }
            }
            if let Some(cert) = self.farkas(&y, &y_prev, &ls, &us) {
                return Ok(self.infeasible(g, l, u, iterations, Some(cert)));
            }
            if !tried_exact && s.active_set_after.is_some_and(|a| iterations >= a) {
                tried_exact = true;
                if let Some(sol) = self.exact_solve(g, l, u, &gs, &ls, &us, iterations, &guess) {
                    if sol.status != QpStatus::MaxIterations {
                        self.rho = rho_from(&rho, &eq_pattern).unwrap_or(self.rho);
                        return Ok(sol);
                    }
                }
            }
            if s.adaptive_rho && iterations % (s.check_every * 5) == 0 {
                let ratio = ((r_prim / prim_scale.max(1e-30))
                    / (r_dual / dual_scale.max(1e-30)).max(1e-30))
                .sqrt();
                let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if ratio.is_finite() && (new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho) {
                    self.rho = new_rho;
                    rho = self.rho_vec(&ls, &us);
                    self.factor = None;
                    self.factorize(&eq_pattern, &rho);
                }
            }
        }
        let mut sol = match best {
            Some(b) => b,
            None => self.finish(g, l, u, &x, &y, iterations),
        };
        sol.iterations = iterations;
        if sol.residuals.max() > s.kkt_tol {
            sol.status = QpStatus::MaxIterations;
        }
        Ok(sol)
    }

    fn admm_residuals(
        &self,
        x: &DVector<f64>,
        z: &DVector<f64>,
        y: &DVector<f64>,
        gs: &DVector<f64>,
    ) -> (f64, f64, f64, f64) {
        let n = self.dim();
        let m = self.rows();
        let cx = &self.cs * x;
        let hx = &self.hs * x;
        let cty = &self.cs_t * y;
        let mut r_prim: f64 = 0.0;
        let mut p_scale: f64 = 0.0;
        for i in 0..m {
            let inv = 1.0 / self.e[i];
            r_prim = r_prim.max(((cx[i] - z[i]) * inv).abs());
            p_scale = p_scale.max((cx[i] * inv).abs()).max((z[i] * inv).abs());
        }
        let mut r_dual: f64 = 0.0;
        let mut d_scale: f64 = 0.0;
        for i in 0..n {
            let inv = 1.0 / (self.d[i] * self.cost);
            r_dual = r_dual.max(((hx[i] + gs[i] + cty[i]) * inv).abs());
            d_scale = d_scale
                .max((hx[i] * inv).abs())
                .max((gs[i] * inv).abs())
                .max((cty[i] * inv).abs());
        }
        (r_prim, r_dual, p_scale, d_scale)
    }

    // OSQP-style primal infeasibility certificate on δy.
    fn farkas(
        &self,
        y: &DVector<f64>,
        y_prev: &DVector<f64>,
        ls: &DVector<f64>,
        us: &DVector<f64>,
    ) -> Option<f64> {
        let m = self.rows();
        if m == 0 {
            return None;
        }
        let dy = y - y_prev;
        let norm = (0..m)
            .map(|i| (self.e[i] * dy[i]).abs())
            .fold(0.0, f64::max);
        if norm < 1e-30 {
            return None;
        }
        let eps = self.settings.eps_infeasible;
        let ctdy = &self.cs_t * &dy;
        let ct_norm = (0..self.dim())
            .map(|i| (ctdy[i] / self.d[i]).abs())
            .fold(0.0, f64::max);
        if ct_norm > eps * norm {
            return None;
        }
        let mut support = 0.0;
        for i in 0..m {
            if dy[i] > 0.0 {
                if us[i] == f64::INFINITY {
                    if dy[i] * self.e[i] > eps * norm {
                        return None;
                    }
                    continue;
                }
                support += us[i] * dy[i];
            } else if dy[i] < 0.0 {
                if ls[i] == f64::NEG_INFINITY {
                    if -dy[i] * self.e[i] > eps * norm {
                        return None;
                    }
                    continue;
                }
                support += ls[i] * dy[i];
            }
        }
        if support < -eps * norm {
            Some((ct_norm / norm).max(support / norm))
        } else {
            None
        }
    }

    fn infeasible(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        iterations: usize,
        certificate: Option<f64>,
    ) -> QpSolution {
        let y = DVector::zeros(self.dim());
        let mult = DVector::zeros(self.rows());
        let residuals = kkt_residuals(&self.h, g, &self.c, l, u, &y, &mult);
        QpSolution {
            objective: 0.5 * y.dot(&(&self.h * &y)) + g.dot(&y),
            y,
            multipliers: mult,
            status: QpStatus::Infeasible,
            residuals,
            iterations,
            polished: false,
            certificate,
        }
    }

    fn finish(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        xs: &DVector<f64>,
        ys: &DVector<f64>,
        iterations: usize,
    ) -> QpSolution {
        self.finish_with(g, l, u, xs, ys, iterations, self.settings.polish)
    }

    /// Unscales an iterate, optionally polishes it, and grades it.
    #[allow(clippy::too_many_arguments)]
    fn finish_with(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        xs: &DVector<f64>,
        ys: &DVector<f64>,
        iterations: usize,
        polish: bool,
    ) -> QpSolution {
        let n = self.dim();
        let m = self.rows();
        let x = DVector::from_fn(n, |i, _| self.d[i] * xs[i]);
        let mult = DVector::from_fn(m, |i, _| self.e[i] * ys[i] / self.cost);
        let mut y_out = x;
        let mut mult_out = mult;
        let mut residuals = kkt_residuals(&self.h, g, &self.c, l, u, &y_out, &mult_out);
        let mut polished = false;
        if polish && residuals.max() > 1e-12 {
            if let Some((yp, mp)) = self.polish(g, l, u, &y_out, &mult_out) {
                let rp = kkt_residuals(&self.h, g, &self.c, l, u, &yp, &mp);
                if rp.max() < residuals.max() {
                    y_out = yp;
                    mult_out = mp;
                    residuals = rp;
                    polished = true;
                }
            }
        }
        let objective = 0.5 * y_out.dot(&(&self.h * &y_out)) + g.dot(&y_out);
        QpSolution {
            y: y_out,
            multipliers: mult_out,
            objective,
            status: if residuals.max() <= self.settings.kkt_tol {
                QpStatus::Optimal
            } else {
                QpStatus::MaxIterations
            },
            residuals,
            iterations,
            polished,
            certificate: None,
        }
    }

    /// Working-set guess `(row, orientation)`: rows with a nonzero warm
    /// multiplier plus the rows a warm primal point sits on.
    fn guess_active(
        &self,
        l: &DVector<f64>,
        u: &DVector<f64>,
        warm_y: Option<&DVector<f64>>,
        warm_mult: Option<&DVector<f64>>,
    ) -> Vec<(usize, f64)> {
        let m = self.rows();
        let mut out = Vec::new();
        let mut taken = vec![false; m];
        if let Some(w) = warm_mult.filter(|w| w.len() == m) {
            for i in (0..m).filter(|&i| w[i] != 0.0) {
                out.push((i, if w[i] > 0.0 { -1.0 } else { 1.0 }));
                taken[i] = true;
            }
        }
        if let Some(y) = warm_y {
            let cy = &self.c * y;
            let near = |b: f64| 1e-7 * (1.0 + b.abs());
            for i in (0..m).filter(|&i| !taken[i]) {
                if u[i].is_finite() && cy[i] >= u[i] - near(u[i]) {
                    out.push((i, -1.0));
                } else if l[i].is_finite() && cy[i] <= l[i] + near(l[i]) {
                    out.push((i, 1.0));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn exact_solve(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        gs: &DVector<f64>,
        ls: &DVector<f64>,
        us: &DVector<f64>,
        iterations: usize,
        guess: &[(usize, f64)],
    ) -> Option<QpSolution> {
        let (outcome, steps) = self.dual_active_set(gs, ls, us, guess)?;
        let iterations = iterations + steps;
        match outcome {
            DualOutcome::Solved(xs, ys) => {
                let sol = self.finish_with(g, l, u, &xs, &ys, iterations, false);
                if sol.status == QpStatus::Optimal || !self.settings.polish {
                    return Some(sol);
                }
                Some(self.finish(g, l, u, &xs, &ys, iterations))
            }
            DualOutcome::Infeasible(delta) => {
                let norm = delta.amax();
                let ctd = self.c.tr_mul(&delta);
                let cert = if norm > 0.0 { ctd.amax() / norm } else { 0.0 };
                Some(self.infeasible(g, l, u, iterations, Some(cert)))
            }
        }
    }

    #[cfg(test)]
    fn solve_exact(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Option<QpSolution> {
        self.solve_exact_from(g, l, u, &[])
    }

    #[cfg(test)]
    fn solve_exact_from(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        guess: &[(usize, f64)],
    ) -> Option<QpSolution> {
        let gs = DVector::from_fn(self.dim(), |i, _| self.cost * self.d[i] * g[i]);
        let ls = DVector::from_fn(self.rows(), |i, _| self.e[i] * l[i]);
        let us = DVector::from_fn(self.rows(), |i, _| self.e[i] * u[i]);
        self.exact_solve(g, l, u, &gs, &ls, &us, 0, guess)
    }

    /// Goldfarb–Idnani dual active-set method on the scaled problem. Starts
    /// from the unconstrained minimizer and adds the most violated half-row
    /// each outer step, so degenerate or dependent active sets never need
    /// to be guessed. Returns scaled `(x, y)` or a scaled-out Farkas vector.
    fn dual_active_set(
        &self,
        gs: &DVector<f64>,
        ls: &DVector<f64>,
        us: &DVector<f64>,
        guess: &[(usize, f64)],
    ) -> Option<(DualOutcome, usize)> {
        let n = self.dim();
        let m = self.rows();
        let mut jm = self.hs_inv_lt.clone()?;
        let mut r = DMatrix::<f64>::zeros(n, n);
        let mut x = -(&jm * tr_mul(&jm, gs.as_slice()));
        // (row, orientation): +1 means c·x ≥ l, -1 means -c·x ≥ -u
        let mut active: Vec<(usize, f64)> = Vec::new();
        let mut lam: Vec<f64> = Vec::new();
        let mut in_set = vec![false; m];
        let is_eq: Vec<bool> = (0..m)
            .map(|i| us[i].is_finite() && (us[i] - ls[i]).abs() <= 1e-12 * (1.0 + us[i].abs()))
            .collect();
        let normal = |i: usize, sign: f64| -> DVector<f64> { self.cs_t.column(i) * sign };
        let bound = |i: usize, sign: f64| if sign > 0.0 { ls[i] } else { -us[i] };
        let tol = |b: f64| 1e-9 * (1.0 + b.abs());
        let budget = 50 * (n + m) + 100;
        let mut steps = 0;

        // warm phase: take the equalities and the guessed rows as the working
        // set, solve on it in closed form and release rows with negative
        // multipliers until the point is dual feasible
        let forced = (0..m).filter(|&i| is_eq[i]).map(|i| (i, 1.0));
        for (i, sign) in forced.chain(guess.iter().copied().filter(|&(i, _)| !is_eq[i])) {
            if active.len() == n || in_set[i] || !bound(i, sign).is_finite() {
                continue;
            }
            let q = active.len();
            let d = tr_mul(&jm, normal(i, sign).as_slice());
            if d.rows(q, n - q).norm_squared() <= 1e-12 * d.norm_squared() {
                continue;
            }
            givens_add(&mut jm, &mut r, d, q);
            active.push((i, sign));
            in_set[i] = true;
            lam.push(0.0);
        }
        if !active.is_empty() {
            loop {
                steps += 1;
                let q = active.len();
                let b_act = DVector::from_fn(q, |j, _| bound(active[j].0, active[j].1));
                let y1 = solve_rt(&r, q, &b_act)?;
                let jtg = tr_mul(&jm, gs.as_slice());
                let mut yv = -jtg.clone();
                yv.rows_mut(0, q).copy_from(&y1);
                x = &jm * &yv;
                let mult = solve_r(&r, q, &(y1 + jtg.rows(0, q)))?;
                lam = mult.iter().copied().collect();
                let mut worst = (-1e-12 * (1.0 + mult.amax()), usize::MAX);
                for j in 0..q {
                    if !is_eq[active[j].0] && lam[j] < worst.0 {
                        worst = (lam[j], j);
                    }
                }
                if worst.1 == usize::MAX {
                    break;
                }
                givens_drop(&mut jm, &mut r, worst.1, q);
                in_set[active[worst.1].0] = false;
                active.remove(worst.1);
                lam.remove(worst.1);
            }
            for (j, l) in lam.iter_mut().enumerate() {
                if !is_eq[active[j].0] {
                    *l = l.max(0.0);
                }
            }
        }

        let mut eq_rows = (0..m).filter(|&i| is_eq[i]);
        loop {
            // pick the next constraint: equalities first, then the most
            // violated inequality half-row
            let pick = if let Some(i) = eq_rows.next() {
                if in_set[i] {
                    continue;
                }
                let cx = self.cs.row(i).dot(&x.transpose());
                let sign = if cx > ls[i] { -1.0 } else { 1.0 };
                let b = bound(i, sign);
                if sign * cx - b >= -tol(b) {
                    continue;
                }
                Some((i, sign))
            } else {
                let mut worst = (0.0, None);
                let ct = self.cs_t.as_slice();
                for i in 0..m {
                    if is_eq[i]
                        || in_set[i]
                        || (ls[i] == f64::NEG_INFINITY && us[i] == f64::INFINITY)
                    {
                        continue;
                    }
                    let cxi = dot(&ct[i * n..(i + 1) * n], x.as_slice());
                    for sign in [1.0, -1.0] {
                        let b = bound(i, sign);
                        if !b.is_finite() {
                            continue;
                        }
                        let viol = (b - sign * cxi) / (1.0 + b.abs());
                        if sign * cxi - b < -tol(b) && viol > worst.0 {
                            worst = (viol, Some((i, sign)));
                        }
                    }
                }
                worst.1
            };
            let Some((p, sign)) = pick else {
                break;
            };
            let np = normal(p, sign);
            let bp = bound(p, sign);
            let mut up = 0.0;
            loop {
                steps += 1;
                if steps > budget {
                    return None;
                }
                let q = active.len();
                let d = tr_mul(&jm, np.as_slice());
                let mut z = DVector::zeros(n);
                for j in q..n {
                    z.axpy(d[j], &jm.column(j), 1.0);
                }
                let rv = solve_r(&r, q, &d.rows(0, q).clone_owned())?;
                // partial step: largest move keeping inequality multipliers ≥ 0
                let mut t1 = f64::INFINITY;
                let mut k_drop = usize::MAX;
                for j in 0..q {
                    if is_eq[active[j].0] || rv[j] <= 1e-13 {
                        continue;
                    }
                    let t = lam[j] / rv[j];
                    if t < t1 {
                        t1 = t;
                        k_drop = j;
                    }
                }
                let zn = z.dot(&np);
                let slack = np.dot(&x) - bp;
                let t2 = if zn > 1e-14 * d.norm_squared() {
                    (-slack / zn).max(0.0)
                } else {
                    f64::INFINITY
                };
                let t = t1.min(t2);
                if !t.is_finite() {
                    if is_eq[p] && slack.abs() <= tol(bp) {
                        // redundant equality
                        break;
                    }
                    let mut delta = DVector::zeros(m);
                    delta[p] = -sign * self.e[p];
                    for j in 0..q {
                        let (i, sj) = active[j];
                        delta[i] += sj * rv[j] * self.e[i];
                    }
                    return Some((DualOutcome::Infeasible(delta), steps));
                }
                for j in 0..q {
                    lam[j] -= t * rv[j];
                }
                up += t;
                if t2.is_finite() {
                    x.axpy(t, &z, 1.0);
                }
                if t2 <= t1 {
                    givens_add(&mut jm, &mut r, d, q);
                    active.push((p, sign));
                    in_set[p] = true;
                    lam.push(up);
                    break;
                }
                givens_drop(&mut jm, &mut r, k_drop, q);
                in_set[active[k_drop].0] = false;
                active.remove(k_drop);
                lam.remove(k_drop);
            }
        }
        let mut y = DVector::zeros(m);
        for (j, &(i, sign)) in active.iter().enumerate() {
            y[i] -= sign * lam[j];
        }
        Some((DualOutcome::Solved(x, y), steps))
    }

    /// Equality-constrained KKT solve on a guessed active set, refined by a
    /// few primal/dual active-set corrections.
    fn polish(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
        mult: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let m = self.rows();
        let cy = &self.c * y;
        // side: +1 upper active, -1 lower active, 0 inactive
        let mut side: Vec<i8> = (0..m)
            .map(|i| {
                let eq = u[i].is_finite() && (u[i] - l[i]).abs() <= 1e-12 * (1.0 + u[i].abs());
                let scale = 1.0 + cy[i].abs();
                if eq
                    || u[i].is_finite()
                        && (mult[i] > 1e-9 * scale || u[i] - cy[i] < 1e-7 * scale && mult[i] >= 0.0)
                {
                    1
                } else if l[i].is_finite()
                    && (mult[i] < -1e-9 * scale || cy[i] - l[i] < 1e-7 * scale && mult[i] <= 0.0)
                {
                    -1
                } else {
                    0
                }
            })
            .collect();
        let is_eq: Vec<bool> = (0..m)
            .map(|i| u[i].is_finite() && (u[i] - l[i]).abs() <= 1e-12 * (1.0 + u[i].abs()))
            .collect();

        let mut result = None;
        for _round in 0..(2 * m + 5).min(60) {
            let (yp, mp, dependent) = self.reduced_kkt(g, l, u, &side)?;
            for i in dependent {
                side[i] = 0;
            }
            let cyp = &self.c * &yp;
            let p_scale = 1.0 + cyp.amax();
            let d_scale = 1.0 + mp.amax();
            // most violated inactive constraint
            let mut worst_p = (0.0, usize::MAX, 0i8);
            for i in 0..m {
                if side[i] != 0 {
                    continue;
                }
                let over = cyp[i] - u[i];
                let under = l[i] - cyp[i];
                if over > worst_p.0 {
                    worst_p = (over, i, 1);
                }
                if under > worst_p.0 {
                    worst_p = (under, i, -1);
                }
            }
            // most wrong-signed active multiplier
            let mut worst_d = (0.0, usize::MAX);
            for i in 0..m {
                if side[i] == 0 || is_eq[i] {
                    continue;
                }
                let wrong = -(side[i] as f64) * mp[i];
                if wrong > worst_d.0 {
                    worst_d = (wrong, i);
                }
            }
            let p_ok = worst_p.0 <= 1e-10 * p_scale;
            let d_ok = worst_d.0 <= 1e-10 * d_scale;
            result = Some((yp, mp));
            if p_ok && d_ok {
                break;
            }
            if !d_ok && (p_ok || worst_d.0 / d_scale >= worst_p.0 / p_scale) {
                side[worst_d.1] = 0;
            } else {
                side[worst_p.1] = worst_p.2;
            }
        }
        result
    }

    fn reduced_kkt(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        side: &[i8],
    ) -> Option<(DVector<f64>, DVector<f64>, Vec<usize>)> {
        let n = self.dim();
        let m = self.rows();
        let active: Vec<usize> = (0..m).filter(|&i| side[i] != 0).collect();
        let na = active.len();
        let b_act = DVector::from_fn(na, |r, _| {
            let i = active[r];
            if side[i] > 0 {
                u[i]
            } else {
                l[i]
            }
        });
        let mut mult = DVector::zeros(m);
        let mut dependent = Vec::new();
        if let (Some(hc), Some(w)) = (&self.h_chol, &self.h_inv_ct) {
            // Schur complement: (C_S H⁻¹ C_Sᵀ) λ = C_S H⁻¹(-g) - b_S
            let x0 = -hc.solve(g);
            if na == 0 {
                return Some((x0, mult, dependent));
            }
            let cs_all = DMatrix::from_fn(na, n, |r, j| self.c[(active[r], j)]);
            let ws_all = DMatrix::from_fn(n, na, |i, r| w[(i, active[r])]);
            let schur_all = &cs_all * &ws_all;
            // keep a linearly independent subset of the active rows
            let keep = independent_rows(&schur_all);
            for (r, &i) in active.iter().enumerate() {
                if !keep.contains(&r) {
                    dependent.push(i);
                }
            }
            let nk = keep.len();
            let cs = DMatrix::from_fn(nk, n, |r, j| cs_all[(keep[r], j)]);
            let ws = DMatrix::from_fn(n, nk, |i, r| ws_all[(i, keep[r])]);
            let mut schur = DMatrix::from_fn(nk, nk, |a, b| schur_all[(keep[a], keep[b])]);
            let rhs = &cs * &x0 - DVector::from_fn(nk, |r, _| b_act[keep[r]]);
            let reg = 1e-13 * (1.0 + schur.diagonal().amax());
            for r in 0..nk {
                schur[(r, r)] += reg;
            }
            let chol = schur.clone().cholesky()?;
            let mut lam = chol.solve(&rhs);
            // iterative refinement against the unregularized system
            for r in 0..nk {
                schur[(r, r)] -= reg;
            }
            for _ in 0..3 {
                let res = &rhs - &schur * &lam;
                lam += chol.solve(&res);
            }
            let x = x0 - &ws * &lam;
            for (r, &k) in keep.iter().enumerate() {
                mult[active[k]] = lam[r];
            }
            Some((x, mult, dependent))
        } else {
            // singular H: full KKT system with LU
            let dim = n + na;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
            for (r, &i) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = self.c[(i, j)];
                    kkt[(j, n + r)] = self.c[(i, j)];
                }
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&(-g));
            rhs.rows_mut(n, na).copy_from(&b_act);
            let mut reg = kkt.clone();
            for i in 0..n {
                reg[(i, i)] += 1e-10;
            }
            for r in 0..na {
                reg[(n + r, n + r)] -= 1e-10;
            }
            let lu = reg.lu();
            let mut sol = lu.solve(&rhs)?;
            for _ in 0..5 {
                let res = &rhs - &kkt * &sol;
                sol += lu.solve(&res)?;
            }
            for (r, &i) in active.iter().enumerate() {
                mult[i] = sol[n + r];
            }
            Some((sol.rows(0, n).into_owned(), mult, dependent))
        }
    }
}

enum DualOutcome {
    Solved(DVector<f64>, DVector<f64>),
    /// Row weights `δ` (unscaled) with `Cᵀδ ≈ 0` and a positive support gap.
    Infeasible(DVector<f64>),
}

/// Back substitution with the leading `q × q` block of upper-triangular `R`.
fn solve_r(r: &DMatrix<f64>, q: usize, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let mut x = rhs.clone();
    let n = r.nrows();
    let data = r.as_slice();
    for j in (0..q).rev() {
        let col = &data[j * n..j * n + j + 1];
        if col[j] == 0.0 {
            return None;
        }
        x[j] /= col[j];
        let xj = x[j];
        for (xi, cij) in x.as_mut_slice()[..j].iter_mut().zip(&col[..j]) {
            *xi -= xj * cij;
        }
    }
    Some(x)
}

/// Forward substitution with `Rᵀ` (leading `q × q` block).
fn solve_rt(r: &DMatrix<f64>, q: usize, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let mut x = rhs.clone();
    let n = r.nrows();
    let data = r.as_slice();
    for i in 0..q {
        let col = &data[i * n..i * n + i + 1];
        if col[i] == 0.0 {
            return None;
        }
        x[i] = (x[i] - dot(&col[..i], &x.as_slice()[..i])) / col[i];
    }
    Some(x)
}

fn rotation(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_cols(jm: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    debug_assert!(a < b);
    let n = jm.nrows();
    let (head, tail) = jm.as_mut_slice().split_at_mut(b * n);
    let ca = &mut head[a * n..(a + 1) * n];
    let cb = &mut tail[..n];
    for (va, vb) in ca.iter_mut().zip(cb.iter_mut()) {
        let (x, y) = (*va, *vb);
        *va = c * x + s * y;
        *vb = -s * x + c * y;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `Mᵀ v` by contiguous column dots.
fn tr_mul(m: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let n = m.nrows();
    let data = m.as_slice();
    DVector::from_fn(m.ncols(), |j, _| dot(&data[j * n..(j + 1) * n], v))
}

/// Appends the constraint with `d = Jᵀn` as column `q` of `R`, rotating the
/// trailing columns of `J` so that `d` has no component past index `q`.
fn givens_add(jm: &mut DMatrix<f64>, r: &mut DMatrix<f64>, mut d: DVector<f64>, q: usize) {
    let n = d.len();
    for j in (q + 1..n).rev() {
        let (c, s, h) = rotation(d[j - 1], d[j]);
        d[j - 1] = h;
        d[j] = 0.0;
        rotate_cols(jm, j - 1, j, c, s);
    }
    for i in 0..=q {
        r[(i, q)] = d[i];
    }
}

/// Removes active column `k` of the `q` active columns and restores the
/// triangular shape of `R`.
fn givens_drop(jm: &mut DMatrix<f64>, r: &mut DMatrix<f64>, k: usize, q: usize) {
    for col in k..q - 1 {
        for i in 0..q {
            r[(i, col)] = r[(i, col + 1)];
        }
    }
    for i in 0..q {
        r[(i, q - 1)] = 0.0;
    }
    for j in k..q - 1 {
        let (c, s, h) = rotation(r[(j, j)], r[(j + 1, j)]);
        r[(j, j)] = h;
        r[(j + 1, j)] = 0.0;
        for col in j + 1..q - 1 {
            let (a, b) = (r[(j, col)], r[(j + 1, col)]);
            r[(j, col)] = c * a + s * b;
            r[(j + 1, col)] = -s * a + c * b;
        }
        rotate_cols(jm, j, j + 1, c, s);
    }
}

/// Indices of a maximal linearly independent subset of the rows of the PSD
/// Gram matrix `s`, chosen greedily in order (incremental Cholesky that skips
/// rows with a negligible pivot).
fn independent_rows(s: &DMatrix<f64>) -> Vec<usize> {
    let na = s.nrows();
    let mut keep: Vec<usize> = Vec::with_capacity(na);
    let mut l = DMatrix::<f64>::zeros(na, na);
    let mut y = vec![0.0; na];
    for r in 0..na {
        let d = s[(r, r)];
        if d <= 0.0 {
            continue;
        }
        let k = keep.len();
        let mut sq = 0.0;
        for a in 0..k {
            let mut v = s[(keep[a], r)];
            for b in 0..a {
                v -= l[(a, b)] * y[b];
            }
            y[a] = v / l[(a, a)];
            sq += y[a] * y[a];
        }
        let piv = d - sq;
        if piv <= 1e-10 * d {
            continue;
        }
        for a in 0..k {
            l[(k, a)] = y[a];
        }
        l[(k, k)] = piv.sqrt();
        keep.push(r);
    }
    keep
}

fn rho_from(rho: &DVector<f64>, eq: &[bool]) -> Option<f64> {
    (0..rho.len()).find(|&i| !eq[i]).map(|i| rho[i])
}

fn clamp(z: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(l[i], u[i]);
    }
}

/// Modified Ruiz equilibration of the KKT matrix `[H Cᵀ; C 0]`.
fn ruiz(h: &DMatrix<f64>, c: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let n = h.nrows();
    let m = c.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut hs = h.clone();
    let mut cs = c.clone();
    for _ in 0..15 {
        let dd = DVector::from_fn(n, |j, _| {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(hs[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(cs[(i, j)].abs());
            }
            scale_factor(norm)
        });
        let de = DVector::from_fn(m, |i, _| {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(cs[(i, j)].abs());
            }
            scale_factor(norm)
        });
        for i in 0..n {
            for j in 0..n {
                hs[(i, j)] *= dd[i] * dd[j];
            }
        }
        for i in 0..m {
            for j in 0..n {
                cs[(i, j)] *= de[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        (0..n)
            .map(|j| (0..n).map(|i| hs[(i, j)].abs()).fold(0.0, f64::max))
            .sum::<f64>()
            / n as f64
    } else {
        1.0
    };
    let cost = if mean_col > 1e-6 {
        (1.0 / mean_col).clamp(1e-4, 1e4)
    } else {
        1.0
    };
    (d, e, cost)
}

fn scale_factor(norm: f64) -> f64 {
    if norm < 1e-4 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(1e-4, 1e4)
    }
}

/// Normalized KKT residuals of `(y, λ)` for `min ½yᵀHy + gᵀy, l ≤ Cy ≤ u`.
pub fn kkt_residuals(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    mult: &DVector<f64>,
) -> KktResiduals {
    let hy = h * y;
    let ctl = c.transpose() * mult;
    let stat = (&hy + g + &ctl).amax();
    let stat_scale = 1f64.max(hy.amax()).max(g.amax()).max(ctl.amax());
    let cy = c * y;
    let mut primal: f64 = 0.0;
    let mut p_scale: f64 = 1f64.max(cy.amax());
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..cy.len() {
        if u[i].is_finite() {
            p_scale = p_scale.max(u[i].abs());
            primal = primal.max(cy[i] - u[i]);
        }
        if l[i].is_finite() {
            p_scale = p_scale.max(l[i].abs());
            primal = primal.max(l[i] - cy[i]);
        }
        let lam = mult[i];
        if lam > 0.0 {
            if u[i].is_finite() {
                comp = comp.max(lam * (u[i] - cy[i]).abs());
            } else {
                dual = dual.max(lam);
            }
        } else if lam < 0.0 {
            if l[i].is_finite() {
                comp = comp.max(-lam * (cy[i] - l[i]).abs());
            } else {
                dual = dual.max(-lam);
            }
        }
    }
    let d_scale = 1f64.max(mult.amax());
    KktResiduals {
        stationarity: stat / stat_scale,
        primal: primal.max(0.0) / p_scale,
        dual: dual / d_scale,
        complementarity: comp / (p_scale * d_scale),
    }
}
