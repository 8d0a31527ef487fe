//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpc::qp::QuadraticProgram;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

/// Box-constrained QP `min ½yᵀHy + gᵀy, lo ≤ y ≤ hi`, returned with its bounds.
pub fn random_box_qp(
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (QuadraticProgram, DVector<f64>, DVector<f64>) {
    let h = random_pd(rng, n, 0.05);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lo = DVector::from_fn(n, |_, _| rng.random_range(-1.5..-0.1));
    let hi = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.5));
    let mut a = DMatrix::zeros(2 * n, n);
    let mut b = DVector::zeros(2 * n);
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        b[2 * i] = hi[i];
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i + 1] = -lo[i];
    }
    (QuadraticProgram::new(h, g).with_inequalities(a, b), lo, hi)
}

/// General QP with a known feasible point, inequalities and optional equalities.
pub fn random_general_qp(
    rng: &mut ChaCha8Rng,
    n: usize,
    m_in: usize,
    m_eq: usize,
) -> QuadraticProgram {
    let h = random_pd(rng, n, 0.01);
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let y0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a_in = random_matrix(rng, m_in, n);
    let b_in = &a_in * &y0 + DVector::from_fn(m_in, |_, _| rng.random_range(0.0..1.0));
    let a_eq = random_matrix(rng, m_eq, n);
    let b_eq = &a_eq * &y0;
    QuadraticProgram::new(h, g)
        .with_inequalities(a_in, b_in)
        .with_equalities(a_eq, b_eq)
}

/// Accelerated projected gradient (FISTA with restart) on a box; run to
/// stationarity of the projected step.
pub fn projected_gradient(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let n = g.len();
    let lip = h.clone().symmetric_eigenvalues().max();
    let step = 1.0 / lip;
    let project = |v: DVector<f64>| DVector::from_fn(n, |i, _| v[i].clamp(lo[i], hi[i]));
    let mut x = project(DVector::zeros(n));
    let mut y = x.clone();
    let mut t = 1.0f64;
    let obj = |v: &DVector<f64>| 0.5 * v.dot(&(h * v)) + g.dot(v);
    for _ in 0..200_000 {
        let grad = h * &y + g;
        let next = project(&y - grad * step);
        if obj(&next) > obj(&x) {
            // restart momentum
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
        // fixed-point residual of the projected gradient map at x
        let pg = &x - project(&x - (h * &x + g) * step);
        if pg.amax() < 1e-13 {
            break;
        }
    }
    x
}

/// Moments of `e(k) = Σ_{j<k} A^{k-1-j} w(j)` by a direct double sum over
/// disturbance blocks, for `k = 0..=steps`.
pub fn error_moments_by_sum(
    a: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    steps: usize,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n = a.nrows();
    let mut powers = vec![DMatrix::identity(n, n)];
    for i in 1..steps.max(1) {
        let next = a * &powers[i - 1];
        powers.push(next);
    }
    let mut means = vec![DVector::zeros(n)];
    let mut covs = vec![DMatrix::zeros(n, n)];
    for k in 1..=steps {
        let mut m = DVector::zeros(n);
        let mut c = DMatrix::zeros(n, n);
        for i in 0..k {
            let pi = &powers[k - 1 - i];
            m += pi * mean.rows(i * n, n);
            for j in 0..k {
                let pj = &powers[k - 1 - j];
                c += pi * cov.view((i * n, j * n), (n, n)) * pj.transpose();
            }
        }
        means.push(m);
        covs.push(c);
    }
    (means, covs)
}

/// Empirical fraction of error rollouts `e(k+1) = A e(k) + w(k)` with
/// `e(0) = 0` for which `inside(k, e(k))` holds, for `k = 0..steps`.
pub fn rollout_hits<F>(
    a: &DMatrix<f64>,
    seq: &smpc::gaussians::GaussianSequence,
    steps: usize,
    count: usize,
    seed: u64,
    inside: F,
) -> Vec<f64>
where
    F: Fn(usize, &DVector<f64>) -> bool,
{
    let n = a.nrows();
    let sampler = seq.sampler();
    let mut r = rng(seed);
    let mut hits = vec![0usize; steps];
    for _ in 0..count {
        let w = sampler.draw(&mut r);
        let mut e = DVector::zeros(n);
        for (k, h) in hits.iter_mut().enumerate() {
            if inside(k, &e) {
                *h += 1;
            }
            if (k + 1) * n <= w.len() {
                e = a * e + w.rows(k * n, n);
            }
        }
    }
    hits.iter().map(|&h| h as f64 / count as f64).collect()
}

/// [`rollout_hits`] for membership in full-dimensional ellipsoids.
pub fn rollout_coverage(
    a: &DMatrix<f64>,
    seq: &smpc::gaussians::GaussianSequence,
    sets: &[smpc::prs::Ellipsoid],
    count: usize,
    seed: u64,
) -> Vec<f64> {
    // the first set of a schedule is a point; membership there is trivial
    let inverses: Vec<Option<DMatrix<f64>>> = sets
        .iter()
        .map(|s| s.shape().clone().try_inverse())
        .collect();
    rollout_hits(a, seq, sets.len(), count, seed, |k, e| match &inverses[k] {
        Some(inv) => {
            let d = e - sets[k].center();
            d.dot(&(inv * &d)) <= 1.0
        }
        None => sets[k].contains_point(e),
    })
}

/// Largest violation of the KKT conditions of `min ½yᵀHy + gᵀy` subject to
/// `A_eq y = b_eq`, `A_in y ≤ b_in`, with multipliers stacked equalities
/// first. Each condition is measured relative to the size of its terms.
pub fn kkt_violation(prob: &QuadraticProgram, y: &DVector<f64>, mult: &DVector<f64>) -> f64 {
    let me = prob.a_eq.nrows();
    let mi = prob.a_in.nrows();
    let l_eq = mult.rows(0, me);
    let l_in = mult.rows(me, mi);
    let hy = &prob.h * y;
    let force = prob.a_eq.transpose() * l_eq + prob.a_in.transpose() * l_in;
    let scale = 1f64.max(hy.amax()).max(prob.g.amax()).max(force.amax());
    let mut worst = (&hy + &prob.g + &force).amax() / scale;
    let eq = &prob.a_eq * y - &prob.b_eq;
    let slack = &prob.b_in - &prob.a_in * y;
    let p_scale = 1f64.max(prob.b_in.amax()).max(prob.b_eq.amax());
    if me > 0 {
        worst = worst.max(eq.amax() / p_scale);
    }
    for i in 0..mi {
        worst = worst.max(-slack[i] / p_scale);
        worst = worst.max(-l_in[i]);
        worst = worst.max((l_in[i] * slack[i]).abs() / p_scale);
    }
    worst
}

/// One-step Monte Carlo estimate of
/// `E[J*(k+1) − J*(k)] + l(x(k), u(k)) − tr(P Σʷ)` at `states` closed-loop
/// states of the i.i.d. double integrator, returned as `(mean, standard error)`
/// per state.
pub fn cost_decrease_margins(states: usize, samples: usize, seed: u64) -> Vec<(f64, f64)> {
    use smpc::simulate::{stage_cost, DisturbanceSpec, Scenario};
    use smpc::smpc::{ControllerState, SmpcController, Variant};

    let scen = Scenario::double_integrator();
    let sigma_w = match &scen.disturbance {
        DisturbanceSpec::Iid { cov, .. } => cov.clone(),
        _ => unreachable!("double integrator noise is i.i.d."),
    };
    let design = scen.design(Variant::Rec).unwrap();
    let model = design.model().clone();
    let n = model.nx();
    let bound = (design.cost().p.clone() * &sigma_w).trace();
    let noise = smpc::gaussians::GaussianSequence::iid(&DVector::zeros(n), &sigma_w, 1)
        .unwrap()
        .sampler();
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(states);
    for _ in 0..states {
        // walk the closed loop to a random time
        let stop = r.random_range(0..60usize);
        let mut ctrl = SmpcController::new(design.clone()).unwrap();
        let mut state = ControllerState::initial(&scen.x0);
        let mut x = scen.x0.clone();
        let mut observed: Vec<f64> = Vec::new();
        for _ in 0..stop {
            let (res, next) = ctrl
                .step(&state, &x, &DVector::from_vec(observed.clone()))
                .unwrap();
            let w = noise.draw(&mut r);
            x = model.step(&x, &res.u, &w);
            observed.extend(w.iter());
            state = next;
        }
        let obs = DVector::from_vec(observed.clone());
        let (res, next) = ctrl.step(&state, &x, &obs).unwrap();
        let stage = stage_cost(design.cost(), &x, &res.u);
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..samples {
            let w = noise.draw(&mut r);
            let x1 = model.step(&x, &res.u, &w);
            let mut obs1 = observed.clone();
            obs1.extend(w.iter());
            let (res1, _) = ctrl.step(&next, &x1, &DVector::from_vec(obs1)).unwrap();
            let d = res1.cost - res.cost + stage - bound;
            acc += d;
            acc2 += d * d;
        }
        let m = acc / samples as f64;
        let var = (acc2 / samples as f64 - m * m).max(0.0) * samples as f64 / (samples - 1) as f64;
        out.push((m, (var / samples as f64).sqrt()));
    }
    out
}
