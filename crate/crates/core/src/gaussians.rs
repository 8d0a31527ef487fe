//! Stacked Gaussian disturbance sequences: conditioning on an observed prefix,
//! seeded sampling, and the probability levels used to scale covariance
//! ellipsoids into reachable sets.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::lti::symmetrize;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// `W = [w(0); …; w(steps-1)] ~ N(mean, cov)` with blocks of size `block`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequence {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    block: usize,
}

impl GaussianSequence {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, block: usize) -> Result<Self> {
        let len = mean.len();
        if block == 0 || len == 0 || !len.is_multiple_of(block) {
            return Err(dims(format!(
                "mean length {len} is not a positive multiple of block {block}"
            )));
        }
        if cov.shape() != (len, len) {
            return Err(dims(format!(
                "covariance must be {len}x{len}, got {:?}",
                cov.shape()
            )));
        }
        let scale = cov.abs().max().max(1.0);
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance is not symmetric ({asym:e})"
            )));
        }
        let cov = symmetrize(&cov);
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semidefinite (eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { mean, cov, block })
    }

    /// Independent, identically distributed blocks `w(k) ~ N(mean_w, cov_w)`.
    pub fn iid(mean_w: &DVector<f64>, cov_w: &DMatrix<f64>, steps: usize) -> Result<Self> {
        let n = mean_w.len();
        if cov_w.shape() != (n, n) {
            return Err(dims("iid: mean and covariance sizes differ"));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "sequence needs at least one step".into(),
            ));
        }
        let mut mean = DVector::zeros(n * steps);
        let mut cov = DMatrix::zeros(n * steps, n * steps);
        for k in 0..steps {
            mean.rows_mut(k * n, n).copy_from(mean_w);
            cov.view_mut((k * n, k * n), (n, n)).copy_from(cov_w);
        }
        Self::new(mean, cov, n)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn steps(&self) -> usize {
        self.mean.len() / self.block
    }

    /// The first `steps` blocks.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::IndexOutOfRange {
                index: steps,
                max: self.steps(),
            });
        }
        let len = steps * self.block;
        Ok(Self {
            mean: self.mean.rows(0, len).into_owned(),
            cov: self.cov.view((0, 0), (len, len)).into_owned(),
            block: self.block,
        })
    }

    /// Distribution of `w(k..=k+window)` given the realized `w(0..k)`, where
    /// `k = observed.len() / block`.
    pub fn condition(&self, observed: &DVector<f64>, window: usize) -> Result<ConditionalWindow> {
        if !observed.len().is_multiple_of(self.block) {
            return Err(dims(format!(
                "observed length {} is not a multiple of block {}",
                observed.len(),
                self.block
            )));
        }
        let k = observed.len() / self.block;
        self.conditioning_map(k, window)?.apply(observed)
    }

    /// Precomputes the affine map from observed prefix to conditional mean.
    /// The map depends only on `k`, so it can be shared across trials.
    pub fn conditioning_map(
        &self,
        observed_steps: usize,
        window: usize,
    ) -> Result<ConditioningMap> {
        let n = self.block;
        let steps = self.steps();
        if observed_steps + window + 1 > steps {
            return Err(Error::WindowExceedsHorizon {
                observed: observed_steps,
                window: window + 1,
                steps,
            });
        }
        let la = observed_steps * n;
        let lb = (window + 1) * n;
        let mean_a = self.mean.rows(0, la).into_owned();
        let mean_b = self.mean.rows(la, lb).into_owned();
        let s_bb = self.cov.view((la, la), (lb, lb)).into_owned();
        if la == 0 {
            return Ok(ConditioningMap {
                gain: DMatrix::zeros(lb, 0),
                mean_a,
                mean_b,
                cov: s_bb,
                block: n,
            });
        }
        let s_aa = self.cov.view((0, 0), (la, la)).into_owned();
        let s_ba = self.cov.view((la, 0), (lb, la)).into_owned();
        let gain = solve_right_psd(&s_ba, &s_aa);
        let cov = symmetrize(&(s_bb - &gain * s_ba.transpose()));
        Ok(ConditioningMap {
            gain,
            mean_a,
            mean_b,
            cov,
            block: n,
        })
    }

    /// `count` independent realizations; deterministic per seed.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let sampler = self.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| sampler.draw(&mut rng)).collect()
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            mean: self.mean.clone(),
            root: psd_sqrt(&self.cov),
        }
    }
}

/// `X Σ⁻¹` for symmetric PSD `Σ`, adding Tikhonov jitter when `Σ` is
/// (numerically) singular.
fn solve_right_psd(x: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = sigma.nrows();
    let eig = sigma.clone().symmetric_eigen();
    let jitter = if eig.eigenvalues.min() < 1e-12 {
        1e-10 * sigma.trace().max(0.0) / dim as f64
    } else {
        0.0
    };
    let inv_diag = eig.eigenvalues.map(|l| {
        let l = l + jitter;
        if l > 0.0 {
            1.0 / l
        } else {
            0.0
        }
    });
    let v = &eig.eigenvectors;
    let xv = x * v;
    let scaled = DMatrix::from_fn(xv.nrows(), xv.ncols(), |i, j| xv[(i, j)] * inv_diag[j]);
    scaled * v.transpose()
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let v = &eig.eigenvectors;
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let vd = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * d[j]);
    vd * v.transpose()
}

/// Affine conditioning map `mean = mean_b + gain (w_obs - mean_a)` and the
/// (observation independent) conditional covariance.
#[derive(Debug, Clone)]
pub struct ConditioningMap {
    gain: DMatrix<f64>,
    mean_a: DVector<f64>,
    mean_b: DVector<f64>,
    cov: DMatrix<f64>,
    block: usize,
}

impl ConditioningMap {
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn observed_len(&self) -> usize {
        self.mean_a.len()
    }

    pub fn apply(&self, observed: &DVector<f64>) -> Result<ConditionalWindow> {
        if observed.len() != self.mean_a.len() {
            return Err(dims(format!(
                "expected {} observed values, got {}",
                self.mean_a.len(),
                observed.len()
            )));
        }
        let mean = if observed.is_empty() {
            self.mean_b.clone()
        } else {
            &self.mean_b + &self.gain * (observed - &self.mean_a)
        };
        Ok(ConditionalWindow {
            mean,
            cov: self.cov.clone(),
            block: self.block,
        })
    }
}

/// Predicted distribution of the next `N + 1` disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalWindow {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub block: usize,
}

impl ConditionalWindow {
    pub fn steps(&self) -> usize {
        self.mean.len() / self.block
    }
}

/// Draws stacked realizations `mean + S ξ`, `ξ ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct Sampler {
    mean: DVector<f64>,
    root: DMatrix<f64>,
}

impl Sampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.root * xi
    }
}

/// How the PRS scaling `p̃` is obtained from a probability level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LevelRule {
    /// Distribution-free multivariate Chebyshev bound.
    Chebyshev,
    /// Exact level for Gaussian errors (chi-squared quantile).
    #[default]
    Gaussian,
}

impl LevelRule {
    pub fn level(self, dim: usize, p: f64) -> Result<f64> {
        match self {
            LevelRule::Chebyshev => chebyshev_level(dim, p),
            LevelRule::Gaussian => chi2_quantile(dim, p),
        }
    }
}

impl std::str::FromStr for LevelRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(LevelRule::Chebyshev),
            "gaussian" => Ok(LevelRule::Gaussian),
            other => Err(Error::Config {
                field: "level_rule".into(),
                message: format!("unknown level rule `{other}` (expected chebyshev|gaussian)"),
            }),
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// `p̃ = dim / (1 - p)`.
pub fn chebyshev_level(dim: usize, p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(dim as f64 / (1.0 - p))
}

/// Quantile of the chi-squared distribution by bisection on its CDF.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    check_probability(p)?;
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-squared needs dof >= 1".into()));
    }
    let k = dof as f64;
    let mut lo = 0.0;
    let mut hi = k + 40.0 * k.sqrt();
    while chi2_cdf(dof, hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    regularized_lower_gamma(dof as f64 / 2.0, x / 2.0)
}

/// `P(a, x) = γ(a, x) / Γ(a)`.
pub fn regularized_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..1000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

// Upper tail Q(a, x) by modified Lentz.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
