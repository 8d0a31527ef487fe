mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smpc::gaussians::{GaussianSequence, LevelRule};
use smpc::lti::{dlyap, ClosedLoopGain, LtiModel};
use smpc::prs::{contains, prs_schedule, stationary_prs, tighten, Ellipsoid, Polytope, PrsLevels};

fn double_integrator() -> (LtiModel, ClosedLoopGain) {
    let model = LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
    )
    .unwrap();
    let gain = ClosedLoopGain::new(&model, DMatrix::from_row_slice(1, 2, &[-0.2, -0.6])).unwrap();
    (model, gain)
}

fn pd(seed: u64, n: usize, floor: f64) -> DMatrix<f64> {
    common::random_pd(&mut common::rng(seed), n, floor)
}

#[test]
fn stationary_variance_oracle() {
    let (_, gain) = double_integrator();
    let sw = DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 1.0]);
    let lyap = dlyap(gain.a_k(), &sw).unwrap();
    // fixed point of the covariance recursion, iterated to convergence
    let mut s = DMatrix::zeros(2, 2);
    for _ in 0..2000 {
        s = gain.a_k() * &s * gain.a_k().transpose() + &sw;
    }
    assert!((&lyap - &s).amax() < 1e-10);
}

#[test]
fn chebyshev_set_contains_gaussian_set() {
    let (_, gain) = double_integrator();
    let sw = pd(4, 2, 0.1);
    for p in [0.5, 0.8, 0.95] {
        let cheb = stationary_prs(&gain, &sw, p, LevelRule::Chebyshev, None).unwrap();
        let gauss = stationary_prs(&gain, &sw, p, LevelRule::Gaussian, None).unwrap();
        assert!(contains(&cheb, &gauss).unwrap());
        assert!(!contains(&gauss, &cheb).unwrap());
    }
}

#[test]
fn contains_rejects_offset_centers() {
    let a = Ellipsoid::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let b = Ellipsoid::new(DVector::from_vec(vec![0.1, 0.0]), DMatrix::identity(2, 2)).unwrap();
    assert!(contains(&a, &b).is_err());
}

#[test]
fn gaussian_prs_coverage_matches_level_iid() {
    let (model, gain) = double_integrator();
    let sw = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.5]);
    let seq = GaussianSequence::iid(&DVector::zeros(2), &sw, 12).unwrap();
    let p = 0.8;
    let count = 40_000;
    let se = (p * (1.0 - p) / count as f64).sqrt();
    let gauss = prs_schedule(
        &model,
        &gain,
        &seq,
        &PrsLevels::new(p, p, LevelRule::Gaussian),
    )
    .unwrap();
    let cov = common::rollout_coverage(gain.a_k(), &seq, gauss.state_sets(), count, 9);
    for (k, c) in cov.iter().enumerate().skip(1) {
        assert!((c - p).abs() < 4.0 * se, "step {k}: {c}");
    }
    let cheb = prs_schedule(
        &model,
        &gain,
        &seq,
        &PrsLevels::new(p, p, LevelRule::Chebyshev),
    )
    .unwrap();
    let cov = common::rollout_coverage(gain.a_k(), &seq, cheb.state_sets(), count, 9);
    assert!(cov.iter().all(|&c| c >= p));
}

#[test]
fn gaussian_prs_coverage_matches_level_correlated() {
    let (model, gain) = double_integrator();
    let steps = 8;
    let l = common::random_matrix(&mut common::rng(21), 2 * steps, 2 * steps);
    let cov = &l * l.transpose() * 0.2 + DMatrix::identity(2 * steps, 2 * steps) * 0.05;
    let mean = DVector::from_fn(2 * steps, |i, _| 0.1 * (i as f64).sin());
    let seq = GaussianSequence::new(mean, cov, 2).unwrap();
    let p = 0.9;
    let count = 40_000;
    let se = (p * (1.0 - p) / count as f64).sqrt();
    let sched = prs_schedule(
        &model,
        &gain,
        &seq,
        &PrsLevels::new(p, p, LevelRule::Gaussian),
    )
    .unwrap();
    let hits = common::rollout_coverage(gain.a_k(), &seq, sched.state_sets(), count, 10);
    for (k, c) in hits.iter().enumerate().skip(1) {
        assert!((c - p).abs() < 4.0 * se, "step {k}: {c}");
    }
}

#[test]
fn schedule_moments_match_direct_sum() {
    let (model, gain) = double_integrator();
    let steps = 6;
    let l = common::random_matrix(&mut common::rng(2), 2 * steps, 2 * steps);
    let cov = &l * l.transpose();
    let mean = DVector::from_fn(2 * steps, |i, _| i as f64 * 0.05 - 0.2);
    let seq = GaussianSequence::new(mean.clone(), cov.clone(), 2).unwrap();
    let levels = PrsLevels::new(0.8, 0.8, LevelRule::Gaussian);
    let sched = prs_schedule(&model, &gain, &seq, &levels).unwrap();
    let (scale, _) = levels.scalings(2, 1).unwrap();
    let (means, covs) = common::error_moments_by_sum(gain.a_k(), &mean, &cov, steps - 1);
    for k in 0..steps {
        let set = sched.state_set(k);
        assert!((set.center() - &means[k]).amax() < 1e-10, "mean {k}");
        assert!((set.shape() - &covs[k] * scale).amax() < 1e-9, "cov {k}");
    }
}

#[test]
fn terminal_set_covers_every_step() {
    let (model, gain) = double_integrator();
    let steps = 10;
    let l = common::random_matrix(&mut common::rng(5), 2 * steps, 2 * steps);
    let seq =
        GaussianSequence::new(DVector::zeros(2 * steps), &l * l.transpose() * 0.1, 2).unwrap();
    let sched = prs_schedule(
        &model,
        &gain,
        &seq,
        &PrsLevels::new(0.8, 0.95, LevelRule::Gaussian),
    )
    .unwrap();
    assert!(sched.terminal_containment_holds());
}

fn polytope_strategy() -> impl Strategy<Value = (Polytope, DMatrix<f64>)> {
    (2usize..4, 1usize..6, any::<u64>()).prop_map(|(n, m, seed)| {
        let mut r = common::rng(seed);
        let a = common::random_matrix(&mut r, m, n);
        let b = DVector::from_element(m, 5.0);
        let shape = common::random_pd(&mut r, n, 0.01) * 0.2;
        (Polytope::new(a, b).unwrap(), shape)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tightening_is_monotone_in_the_shape((poly, shape) in polytope_strategy(), grow in 1.0f64..3.0) {
        let small = Ellipsoid::centered(shape.clone()).unwrap();
        let big = Ellipsoid::centered(&shape * grow).unwrap();
        let ts = tighten(&poly, &small).unwrap();
        let tb = tighten(&poly, &big).unwrap();
        for j in 0..poly.rows() {
            prop_assert!(tb.b()[j] <= ts.b()[j] + 1e-12);
            prop_assert!(ts.b()[j] <= poly.b()[j] + 1e-12);
        }
    }

    #[test]
    fn tightened_set_plus_ellipsoid_stays_inside((poly, shape) in polytope_strategy(), seed in any::<u64>()) {
        let set = Ellipsoid::centered(shape.clone()).unwrap();
        let tight = tighten(&poly, &set).unwrap();
        let n = poly.dim();
        let mut r = common::rng(seed);
        let chol = shape.clone().cholesky().unwrap().l();
        for _ in 0..50 {
            // boundary point of the ellipsoid, origin is inside the tightened set
            let d = common::random_matrix(&mut r, n, 1).column(0).into_owned();
            if d.norm() < 1e-6 {
                continue;
            }
            let e = &chol * d.normalize();
            prop_assert!(set.contains_point(&(&e * (1.0 - 1e-9))));
            let x = DVector::zeros(n);
            if tight.contains(&x, 0.0) {
                prop_assert!(poly.contains(&(&x + &e), 1e-9));
            }
        }
        for j in 0..poly.rows() {
            let a = poly.row(j);
            let support = (a.dot(&(&shape * &a))).sqrt();
            prop_assert!((poly.b()[j] - tight.b()[j] - support).abs() < 1e-12 * (1.0 + support));
        }
    }

    #[test]
    fn psd_containment_matches_eigenvalues(seed in any::<u64>(), factor in 0.2f64..2.0) {
        let m = pd(seed, 3, 0.05);
        let other = pd(seed.wrapping_add(1), 3, 0.05);
        let outer = Ellipsoid::centered(&m * factor).unwrap();
        let inner = Ellipsoid::centered(other.clone()).unwrap();
        let oracle = (&m * factor - &other).symmetric_eigenvalues().min() >= -1e-9;
        prop_assert_eq!(contains(&outer, &inner).unwrap(), oracle);
    }

    #[test]
    fn scaled_set_contains_original(seed in any::<u64>(), s in 1.0f64..4.0) {
        let e = Ellipsoid::centered(pd(seed, 3, 0.01)).unwrap();
        prop_assert!(contains(&e.scaled(s), &e).unwrap());
    }

    #[test]
    fn chebyshev_level_tightens_more((poly, shape) in polytope_strategy(), p in 0.05f64..0.99) {
        let n = poly.dim();
        let g = Ellipsoid::centered(&shape * LevelRule::Gaussian.level(n, p).unwrap()).unwrap();
        let c = Ellipsoid::centered(&shape * LevelRule::Chebyshev.level(n, p).unwrap()).unwrap();
        let tg = smpc::prs::tighten_unchecked(&poly, &g).unwrap();
        let tc = smpc::prs::tighten_unchecked(&poly, &c).unwrap();
        for j in 0..poly.rows() {
            prop_assert!(tc.b()[j] <= tg.b()[j] + 1e-12);
        }
    }
}
