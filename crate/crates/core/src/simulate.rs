//! Closed-loop Monte Carlo harness, metrics and the shipped scenarios.
//!
//! Each trial draws one disturbance realization for the whole run from the
//! scenario's [`GaussianSequence`] and simulates `x(k+1) = A x + B_true u +
//! affine + w(k)` for `k = 0..N̄` while the controller works with the design
//! model. Trials run in parallel; every trial owns a ChaCha stream derived
//! from the master seed and its index, so results do not depend on the
//! thread count.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::gaussians::{GaussianSequence, LevelRule};
use crate::lti::{check_stable, lqr_gain, spectral_radius, ClosedLoopGain, LtiModel};
use crate::prs::{
    prs_schedule, stationary_schedule, tighten, Polytope, PrsLevels, TighteningSchedule,
};
use crate::qp::{QpSettings, QpStatus};
use crate::smpc::{
    default_slack_weight, terminal_weight, ControllerState, CostSpec, SmpcController, SmpcDesign,
    SmpcSetup, TerminalSet, Variant,
};

/// Feedback gain: given explicitly or from discrete LQR weights.
#[derive(Debug, Clone, PartialEq)]
pub enum GainRule {
    Explicit(DMatrix<f64>),
    Lqr { q: DMatrix<f64>, r: DMatrix<f64> },
}

/// How the per-step reachable sets are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tightening {
    /// Stationary set for every step (i.i.d. zero-mean disturbances).
    Stationary,
    /// One set per step from the unconditional error moments.
    #[default]
    TimeVarying,
}

/// Outside-temperature and process-noise model of the building study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingWeather {
    /// Mean outside temperature `T̄ᵒ` folded into the nominal model [°C].
    pub mean_outside: f64,
    /// Amplitude of the 24 h sinusoidal mean profile [K].
    pub amplitude: f64,
    /// Hour of the daily minimum.
    pub coldest_hour: f64,
    /// Kernel standard deviation of the outside temperature [K].
    pub sigma: f64,
    /// Squared-exponential length scale [h].
    pub length_scale: f64,
    /// Length scale of the daily-periodic factor (dimensionless).
    pub periodic_scale: f64,
    /// Independent per-room process noise standard deviation [K].
    pub process_std: f64,
}

impl Default for BuildingWeather {
    fn default() -> Self {
        Self {
            mean_outside: 18.0,
            amplitude: 3.0,
            coldest_hour: 5.0,
            sigma: 0.5,
            length_scale: 24.0,
            periodic_scale: 1.0,
            process_std: 0.01,
        }
    }
}

impl BuildingWeather {
    /// Outside temperature deviation mean at hour `k`.
    pub fn mean_deviation(&self, k: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (k as f64 - self.coldest_hour) / 24.0;
        -self.amplitude * phase.cos()
    }

    /// Covariance between hours separated by `lag`.
    pub fn kernel(&self, lag: f64) -> f64 {
        let se = (-lag * lag / (2.0 * self.length_scale * self.length_scale)).exp();
        let s = (std::f64::consts::PI * lag / 24.0).sin();
        let per = (-2.0 * s * s / (self.periodic_scale * self.periodic_scale)).exp();
        self.sigma * self.sigma * se * per
    }
}

/// Thermal parameters: conductances between rooms `H`, to the outside `h`,
/// capacities `C` and the sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingParams {
    pub h_rooms: DMatrix<f64>,
    pub h_out: DVector<f64>,
    pub capacity: DVector<f64>,
    pub dt: f64,
}

impl Default for BuildingParams {
    fn default() -> Self {
        let h_rooms = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 2.1, 2.0, 0.0, 2.1, 0.0, 0.0, 1.9, 2.0, 0.0, 0.0, 1.0, 0.0, 1.9, 1.0, 0.0,
            ],
        ) * 1e3;
        Self {
            h_rooms,
            h_out: DVector::from_vec(vec![0.3, 0.5, 0.4, 0.6]) * 1e3,
            capacity: DVector::from_vec(vec![50.0, 110.0, 80.0, 90.0]) * 1e6,
            dt: 3600.0,
        }
    }
}

/// Euler-discretized RC network `x⁺ = A x + B u + B_d Tᵒ` with
/// `A = I + Δt C⁻¹(H − D)`, `B = Δt C⁻¹`, `B_d = Δt C⁻¹ h` and
/// `D = diag(H𝟙 + h)`. Returns the model with offset `B_d · mean_outside`
/// and `B_d` separately.
pub fn building_model(
    params: &BuildingParams,
    mean_outside: f64,
) -> Result<(LtiModel, DVector<f64>)> {
    let n = params.capacity.len();
    if params.h_rooms.shape() != (n, n) || params.h_out.len() != n {
        return Err(dims("building: H must be n x n and h, C of length n"));
    }
    if params.capacity.iter().any(|&c| c <= 0.0) || params.dt <= 0.0 {
        return Err(Error::InvalidArgument(
            "building: capacities and dt must be positive".into(),
        ));
    }
    if params.h_rooms.iter().any(|&v| v < 0.0)
        || (&params.h_rooms - params.h_rooms.transpose()).amax() > 0.0
    {
        return Err(Error::InvalidArgument(
            "building: H must be symmetric and nonnegative".into(),
        ));
    }
    let row_sums = params.h_rooms.column_sum();
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut bd = DVector::zeros(n);
    for i in 0..n {
        let s = params.dt / params.capacity[i];
        for j in 0..n {
            a[(i, j)] += s * params.h_rooms[(i, j)];
        }
        a[(i, i)] -= s * (row_sums[i] + params.h_out[i]);
        b[(i, i)] = s;
        bd[i] = s * params.h_out[i];
    }
    let rho = spectral_radius(&a);
    if rho >= 1.0 {
        return Err(Error::UnstableDiscretization(rho));
    }
    let model = LtiModel::with_affine(a, b, &bd * mean_outside)?;
    Ok((model, bd))
}

/// Stacked disturbance `w(k) = B_d (Tᵒ(k) − T̄ᵒ) + η(k)` over `steps` hours.
pub fn building_disturbance(
    bd: &DVector<f64>,
    weather: &BuildingWeather,
    steps: usize,
) -> Result<GaussianSequence> {
    let n = bd.len();
    let len = steps * n;
    let mut mean = DVector::zeros(len);
    let mut cov = DMatrix::zeros(len, len);
    let outer = bd * bd.transpose();
    for i in 0..steps {
        mean.rows_mut(i * n, n)
            .copy_from(&(bd * weather.mean_deviation(i)));
        for j in 0..steps {
            let kv = weather.kernel(i as f64 - j as f64);
            let mut blk = &outer * kv;
            if i == j {
                for r in 0..n {
                    blk[(r, r)] += weather.process_std * weather.process_std;
                }
            }
            cov.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
        }
    }
    GaussianSequence::new(mean, crate::lti::symmetrize(&cov), n)
}

/// Disturbance model of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    Iid {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    Building {
        bd: DVector<f64>,
        weather: BuildingWeather,
    },
}

impl DisturbanceSpec {
    pub fn sequence(&self, steps: usize) -> Result<GaussianSequence> {
        match self {
            DisturbanceSpec::Iid { mean, cov } => GaussianSequence::iid(mean, cov, steps),
            DisturbanceSpec::Building { bd, weather } => building_disturbance(bd, weather, steps),
        }
    }
}

/// Problem data of one closed-loop study.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: LtiModel,
    /// Simulation-truth input matrix when it differs from the design model.
    pub true_b: Option<DMatrix<f64>>,
    pub disturbance: DisturbanceSpec,
    pub state_constraints: Polytope,
    pub input_constraints: Option<Polytope>,
    pub levels: PrsLevels,
    pub tightening: Tightening,
    pub gain: GainRule,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub reference: DVector<f64>,
    pub input_l1_weight: f64,
    pub slack_weight: Option<f64>,
    pub horizon: usize,
    pub sim_steps: usize,
    pub x0: DVector<f64>,
    pub terminal: TerminalSet,
    pub variants: Vec<Variant>,
    /// Band used for the envelope statistic (all states, all steps).
    pub envelope: Option<(f64, f64)>,
    pub qp: QpSettings,
}

fn double_integrator_model() -> LtiModel {
    LtiModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
    )
    .expect("valid double integrator")
}

impl Scenario {
    /// Double integrator with `|x₂| ≤ 3` at `p = 0.8`, `K = [−0.2, −0.6]`,
    /// `N = 30`, `N̄ = 100`, `x(0) = [10, 0]`.
    pub fn double_integrator() -> Self {
        let inf = f64::INFINITY;
        let state_constraints = Polytope::from_bounds(
            &DVector::from_vec(vec![-inf, -3.0]),
            &DVector::from_vec(vec![inf, 3.0]),
        )
        .expect("velocity bounds");
        Self {
            name: "double_integrator".into(),
            model: double_integrator_model(),
            true_b: None,
            disturbance: DisturbanceSpec::Iid {
                mean: DVector::zeros(2),
                cov: DMatrix::from_row_slice(2, 2, &[0.25, 0.5, 0.5, 1.0]),
            },
            state_constraints,
            input_constraints: None,
            levels: PrsLevels::new(0.8, 0.8, LevelRule::Gaussian),
            tightening: Tightening::Stationary,
            gain: GainRule::Explicit(DMatrix::from_row_slice(1, 2, &[-0.2, -0.6])),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            reference: DVector::zeros(2),
            input_l1_weight: 0.0,
            slack_weight: None,
            horizon: 30,
            sim_steps: 100,
            x0: DVector::from_vec(vec![10.0, 0.0]),
            terminal: TerminalSet::Point(DVector::zeros(2)),
            variants: vec![Variant::Nom, Variant::Rec, Variant::Df],
            envelope: None,
            qp: QpSettings::default(),
        }
    }

    /// Same controller, simulated with `B_true = B / 5`.
    pub fn double_integrator_mismatch() -> Self {
        let mut s = Self::double_integrator();
        s.name = "double_integrator_mismatch".into();
        s.true_b = Some(s.model.b() / 5.0);
        s.variants = Variant::ALL.to_vec();
        s
    }

    /// Four-room building with correlated outside-temperature disturbance.
    pub fn building() -> Self {
        Self::building_with(&BuildingParams::default(), BuildingWeather::default())
            .expect("shipped building parameters are valid")
    }

    pub fn building_with(params: &BuildingParams, weather: BuildingWeather) -> Result<Self> {
        let (model, bd) = building_model(params, weather.mean_outside)?;
        let n = model.nx();
        let state_constraints = Polytope::from_bounds(
            &DVector::from_element(n, 20.0),
            &DVector::from_element(n, 23.5),
        )?;
        let input_constraints = Polytope::from_bounds(
            &DVector::from_element(n, -6e3),
            &DVector::from_element(n, 6e3),
        )?;
        let target = DVector::from_element(n, 21.75);
        Ok(Self {
            name: "building".into(),
            model,
            true_b: None,
            disturbance: DisturbanceSpec::Building { bd, weather },
            state_constraints,
            input_constraints: Some(input_constraints),
            levels: PrsLevels::new(0.90, 0.99, LevelRule::Gaussian),
            tightening: Tightening::TimeVarying,
            gain: GainRule::Lqr {
                q: DMatrix::identity(n, n) * 1e5,
                r: DMatrix::identity(n, n) * 0.03,
            },
            q: DMatrix::identity(n, n) * 550.0,
            r: DMatrix::zeros(n, n),
            reference: target.clone(),
            input_l1_weight: 1.0,
            slack_weight: None,
            horizon: 24,
            sim_steps: 48,
            x0: DVector::from_element(n, 22.5),
            terminal: TerminalSet::Point(target),
            variants: vec![Variant::Rec],
            envelope: Some((19.0, 24.5)),
            qp: QpSettings::default(),
        })
    }

    /// Shipped scenario by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "double_integrator" => Ok(Self::double_integrator()),
            "double_integrator_mismatch" => Ok(Self::double_integrator_mismatch()),
            "building" => Ok(Self::building()),
            other => Err(Error::Config {
                field: "scenario".into(),
                message: format!(
                    "unknown scenario `{other}` (expected double_integrator | double_integrator_mismatch | building | custom)"
                ),
            }),
        }
    }

    pub fn validate_fields(&self) -> Result<()> {
        for (name, p) in [("p_x", self.levels.p_x), ("p_u", self.levels.p_u)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config {
                    field: name.into(),
                    message: format!("probability level must lie in (0, 1), got {p}"),
                });
            }
        }
        if self.horizon == 0 || self.horizon > self.sim_steps {
            return Err(Error::Config {
                field: "horizon".into(),
                message: format!(
                    "need 1 <= N <= N̄, got N = {}, N̄ = {}",
                    self.horizon, self.sim_steps
                ),
            });
        }
        if self.x0.len() != self.model.nx() {
            return Err(Error::Config {
                field: "x0".into(),
                message: "initial state has wrong length".into(),
            });
        }
        if let Some(b) = &self.true_b {
            if b.shape() != self.model.b().shape() {
                return Err(Error::Config {
                    field: "b_true".into(),
                    message: "simulation input matrix has wrong shape".into(),
                });
            }
        }
        Ok(())
    }

    /// Number of disturbance steps: the run plus one full prediction window.
    pub fn sequence_steps(&self) -> usize {
        self.sim_steps + self.horizon + 1
    }

    pub fn closed_loop_gain(&self) -> Result<ClosedLoopGain> {
        let k = match &self.gain {
            GainRule::Explicit(k) => k.clone(),
            GainRule::Lqr { q, r } => lqr_gain(self.model.a(), self.model.b(), q, r)?,
        };
        ClosedLoopGain::new(&self.model, k)
    }

    pub fn disturbance_sequence(&self) -> Result<GaussianSequence> {
        self.disturbance.sequence(self.sequence_steps())
    }

    /// Levels with reachable-set dimensions equal to the rank of the
    /// constraint normals.
    pub fn effective_levels(&self) -> PrsLevels {
        let mut levels = self.levels;
        if levels.state_dim.is_none() {
            levels.state_dim = Some(self.state_constraints.normal_rank().max(1));
        }
        if levels.input_dim.is_none() {
            levels.input_dim = Some(
                self.input_constraints
                    .as_ref()
                    .map_or(self.model.nu(), |u| u.normal_rank().max(1)),
            );
        }
        levels
    }

    pub fn schedule(
        &self,
        gain: &ClosedLoopGain,
        dist: &GaussianSequence,
    ) -> Result<TighteningSchedule> {
        let levels = self.effective_levels();
        match (self.tightening, &self.disturbance) {
            (Tightening::Stationary, DisturbanceSpec::Iid { mean, cov }) => {
                if mean.amax() != 0.0 {
                    return Err(Error::Config {
                        field: "tightening".into(),
                        message: "stationary tightening requires zero-mean disturbances".into(),
                    });
                }
                stationary_schedule(gain, cov, &levels, dist.steps())
            }
            (Tightening::Stationary, _) => Err(Error::Config {
                field: "tightening".into(),
                message: "stationary tightening requires i.i.d. disturbances".into(),
            }),
            (Tightening::TimeVarying, _) => prs_schedule(&self.model, gain, dist, &levels),
        }
    }

    pub fn cost_spec(&self, gain: &ClosedLoopGain) -> Result<CostSpec> {
        Ok(CostSpec {
            p: terminal_weight(gain, &self.q, &self.r)?,
            q: self.q.clone(),
            r: self.r.clone(),
            reference: self.reference.clone(),
            input_l1_weight: self.input_l1_weight,
            slack_weight: self
                .slack_weight
                .unwrap_or_else(|| default_slack_weight(&self.q)),
        })
    }

    /// Controller data for one variant.
    pub fn design(&self, variant: Variant) -> Result<Arc<SmpcDesign>> {
        self.validate_fields()?;
        let gain = self.closed_loop_gain()?;
        let dist = self.disturbance_sequence()?;
        let schedule = self.schedule(&gain, &dist)?;
        let cost = self.cost_spec(&gain)?;
        let design = SmpcDesign::new(SmpcSetup {
            model: self.model.clone(),
            gain,
            horizon: self.horizon,
            cost,
            schedule,
            state_constraints: self.state_constraints.clone(),
            input_constraints: self.input_constraints.clone(),
            terminal: self.terminal.clone(),
            variant,
            disturbance: dist,
            qp: self.qp,
        })?;
        Ok(Arc::new(design))
    }

    pub fn true_model(&self) -> Result<LtiModel> {
        match &self.true_b {
            Some(b) => self.model.with_input_matrix(b.clone()),
            None => Ok(self.model.clone()),
        }
    }
}

/// Per-step outcome of the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Optimal,
    /// `df` only: solved from `z₀ = x(k)`.
    Reset,
    /// Solve failed; the shifted previous plan was applied.
    Fallback,
}

impl StepOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StepOutcome::Optimal => "optimal",
            StepOutcome::Reset => "reset",
            StepOutcome::Fallback => "fallback",
        }
    }
}

/// One closed-loop run for `k = 0..=N̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub outcome: Vec<StepOutcome>,
    pub state_violation: Vec<bool>,
    pub input_violation: Vec<bool>,
    pub iterations: usize,
}

impl TrialRecord {
    pub fn steps(&self) -> usize {
        self.x.len()
    }

    pub fn fallbacks(&self) -> usize {
        self.outcome
            .iter()
            .filter(|o| **o == StepOutcome::Fallback)
            .count()
    }
}

/// Per-trial RNG: ChaCha8 seeded by the master seed, stream = trial index.
pub fn trial_rng(master_seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial as u64);
    rng
}

/// Shared data for running many trials of one variant.
#[derive(Debug, Clone)]
pub struct Experiment {
    design: Arc<SmpcDesign>,
    truth: LtiModel,
    sampler: crate::gaussians::Sampler,
    x0: DVector<f64>,
    sim_steps: usize,
}

impl Experiment {
    pub fn new(scenario: &Scenario, variant: Variant) -> Result<Self> {
        let design = scenario.design(variant)?;
        let sampler = design.disturbance().sampler();
        Ok(Self {
            truth: scenario.true_model()?,
            design,
            sampler,
            x0: scenario.x0.clone(),
            sim_steps: scenario.sim_steps,
        })
    }

    pub fn design(&self) -> &Arc<SmpcDesign> {
        &self.design
    }

    /// Runs trial `trial` with its own stream of `master_seed`.
    pub fn run_trial(&self, master_seed: u64, trial: usize) -> Result<TrialRecord> {
        let mut rng = trial_rng(master_seed, trial);
        let w = self.sampler.draw(&mut rng);
        self.run_with_disturbance(&w, master_seed, trial)
    }

    /// Closed loop for a given stacked disturbance realization.
    pub fn run_with_disturbance(
        &self,
        w: &DVector<f64>,
        seed: u64,
        trial: usize,
    ) -> Result<TrialRecord> {
        let d = &self.design;
        let n = d.model().nx();
        if w.len() < (self.sim_steps + 1) * n {
            return Err(dims("disturbance realization shorter than the run"));
        }
        let mut ctrl = SmpcController::new(Arc::clone(d))?;
        let mut state = ControllerState::initial(&self.x0);
        let mut x = self.x0.clone();
        let steps = self.sim_steps + 1;
        let mut rec = TrialRecord {
            trial,
            seed,
            x: Vec::with_capacity(steps),
            u: Vec::with_capacity(steps),
            z: Vec::with_capacity(steps),
            outcome: Vec::with_capacity(steps),
            state_violation: Vec::with_capacity(steps),
            input_violation: Vec::with_capacity(steps),
            iterations: 0,
        };
        for k in 0..steps {
            let observed = w.rows(0, k * n).into_owned();
            let (res, next) = match ctrl.step(&state, &x, &observed) {
                Ok(ok) => ok,
                Err(Error::Infeasible(_)) | Err(Error::MaxIterations(_)) => {
                    ctrl.fallback(&state, &x)
                }
                Err(e) => return Err(e),
            };
            let outcome = if res.fallback {
                StepOutcome::Fallback
            } else if res.reset {
                StepOutcome::Reset
            } else {
                StepOutcome::Optimal
            };
            rec.iterations += res.iterations;
            rec.state_violation
                .push(!d.state_constraints().contains(&x, 1e-12));
            rec.input_violation.push(
                d.input_constraints()
                    .is_some_and(|p| !p.contains(&res.u, 1e-9)),
            );
            rec.x.push(x.clone());
            rec.z.push(res.z0.clone());
            rec.outcome.push(outcome);
            let wk = w.rows(k * n, n).into_owned();
            x = self.truth.step(&x, &res.u, &wk);
            rec.u.push(res.u);
            state = next;
        }
        Ok(rec)
    }

    /// Trials `0..trials` in parallel, returned in trial order.
    pub fn run_trials(&self, master_seed: u64, trials: usize) -> Result<Vec<TrialRecord>> {
        (0..trials)
            .into_par_iter()
            .map(|t| self.run_trial(master_seed, t))
            .collect()
    }
}

/// `run_trial` for a one-off call.
pub fn run_trial(scenario: &Scenario, variant: Variant, seed: u64) -> Result<TrialRecord> {
    Experiment::new(scenario, variant)?.run_trial(seed, 0)
}

/// Aggregate closed-loop statistics of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub trials: usize,
    /// `(1/N̄) Σ_{k=0}^{N̄} l(x(k), u(k))`, averaged over trials.
    pub j_cl_x0: f64,
    /// Same average from `k = 20`.
    pub j_cl_x20: f64,
    /// `max_k n̄_v(k)` for the state constraints.
    pub max_violation_rate: f64,
    pub violation_curve: Vec<f64>,
    pub max_input_violation_rate: f64,
    pub input_violation_curve: Vec<f64>,
    /// Steps where the solve failed and the shifted plan was applied.
    pub infeasible_steps: usize,
    pub trials_with_fallback: usize,
    pub reset_steps: usize,
    pub mean_iterations: f64,
    /// Fraction of trials whose states stayed inside the envelope band.
    pub envelope_fraction: Option<f64>,
}

impl MetricsReport {
    /// `1 − max_k n̄_v(k)`.
    pub fn state_satisfaction(&self) -> f64 {
        1.0 - self.max_violation_rate
    }

    pub fn input_satisfaction(&self) -> f64 {
        1.0 - self.max_input_violation_rate
    }
}

/// Stage cost `‖x − r‖²_Q + ‖u‖²_R + λ‖u‖₁`.
pub fn stage_cost(cost: &CostSpec, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let dx = x - &cost.reference;
    dx.dot(&(&cost.q * &dx)) + u.dot(&(&cost.r * u)) + cost.input_l1_weight * u.abs().sum()
}

pub fn aggregate(
    variant: Variant,
    cost: &CostSpec,
    records: &[TrialRecord],
    envelope: Option<(f64, f64)>,
) -> Result<MetricsReport> {
    let first = records.first().ok_or(Error::InvalidArgument(
        "aggregate needs at least one record".into(),
    ))?;
    let steps = first.steps();
    if records.iter().any(|r| r.steps() != steps) {
        return Err(dims("records differ in length"));
    }
    let nbar = steps - 1;
    let tail_start = 20.min(nbar);
    let mut j0 = 0.0;
    let mut j20 = 0.0;
    let mut viol = vec![0usize; steps];
    let mut viol_u = vec![0usize; steps];
    let mut infeasible = 0;
    let mut with_fallback = 0;
    let mut resets = 0;
    let mut iters = 0usize;
    let mut inside = 0usize;
    for r in records {
        let stage: Vec<f64> =
            r.x.iter()
                .zip(&r.u)
                .map(|(x, u)| stage_cost(cost, x, u))
                .collect();
        j0 += stage.iter().sum::<f64>() / nbar.max(1) as f64;
        j20 += stage[tail_start..].iter().sum::<f64>() / (nbar - tail_start).max(1) as f64;
        for k in 0..steps {
            viol[k] += r.state_violation[k] as usize;
            viol_u[k] += r.input_violation[k] as usize;
        }
        let f = r.fallbacks();
        infeasible += f;
        with_fallback += (f > 0) as usize;
        resets += r
            .outcome
            .iter()
            .filter(|o| **o == StepOutcome::Reset)
            .count();
        iters += r.iterations;
        if let Some((lo, hi)) = envelope {
            if r.x.iter().all(|x| x.iter().all(|&v| v >= lo && v <= hi)) {
                inside += 1;
            }
        }
    }
    let nt = records.len() as f64;
    let curve: Vec<f64> = viol.iter().map(|&c| c as f64 / nt).collect();
    let curve_u: Vec<f64> = viol_u.iter().map(|&c| c as f64 / nt).collect();
    Ok(MetricsReport {
        variant,
        trials: records.len(),
        j_cl_x0: j0 / nt,
        j_cl_x20: j20 / nt,
        max_violation_rate: curve.iter().cloned().fold(0.0, f64::max),
        violation_curve: curve,
        max_input_violation_rate: curve_u.iter().cloned().fold(0.0, f64::max),
        input_violation_curve: curve_u,
        infeasible_steps: infeasible,
        trials_with_fallback: with_fallback,
        reset_steps: resets,
        mean_iterations: iters as f64 / (nt * steps as f64),
        envelope_fraction: envelope.map(|_| inside as f64 / nt),
    })
}

/// Runs `trials` trials of every variant and aggregates them.
pub fn run_scenario(
    scenario: &Scenario,
    trials: usize,
    seed: u64,
) -> Result<Vec<(MetricsReport, Vec<TrialRecord>)>> {
    if trials == 0 {
        return Err(Error::Config {
            field: "trials".into(),
            message: "need at least one trial".into(),
        });
    }
    scenario
        .variants
        .iter()
        .map(|&v| {
            let exp = Experiment::new(scenario, v)?;
            let records = exp.run_trials(seed, trials)?;
            let report = aggregate(v, exp.design().cost(), &records, scenario.envelope)?;
            Ok((report, records))
        })
        .collect()
}

/// Trace CSV: one row per trial and step with states, inputs, nominal
/// states, outcome, violation flags and the tightened bounds in effect.
pub fn write_trace_csv<W: Write>(
    out: W,
    design: &SmpcDesign,
    records: &[TrialRecord],
) -> Result<()> {
    let n = design.model().nx();
    let m = design.model().nu();
    let nxr = design.state_constraints().rows();
    let nur = design.input_constraints().map_or(0, |p| p.rows());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trial".to_string(), "k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("z{i}")));
    header.extend(["status", "state_violation", "input_violation"].map(String::from));
    header.extend((1..=nxr).map(|j| format!("x_bound{j}")));
    header.extend((1..=nur).map(|j| format!("u_bound{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        for k in 0..r.steps() {
            let mut row = vec![r.trial.to_string(), k.to_string()];
            row.extend(r.x[k].iter().map(|v| v.to_string()));
            row.extend(r.u[k].iter().map(|v| v.to_string()));
            row.extend(r.z[k].iter().map(|v| v.to_string()));
            row.push(r.outcome[k].as_str().into());
            row.push((r.state_violation[k] as u8).to_string());
            row.push((r.input_violation[k] as u8).to_string());
            row.extend(design.state_rhs(k).iter().map(|v| v.to_string()));
            if nur > 0 {
                row.extend(design.input_rhs(k).iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Schedule CSV: per-step tightening `b_j − b'_j` of every constraint row.
pub fn write_schedule_csv<W: Write>(out: W, design: &SmpcDesign, steps: usize) -> Result<()> {
    let xs = design.state_constraints();
    let us = design.input_constraints();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=xs.rows()).map(|j| format!("x_row{j}")));
    if let Some(u) = us {
        header.extend((1..=u.rows()).map(|j| format!("u_row{j}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..steps {
        let mut row = vec![k.to_string()];
        row.extend((xs.b() - design.state_rhs(k)).iter().map(|v| v.to_string()));
        if let Some(u) = us {
            row.extend((u.b() - design.input_rhs(k)).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Metrics JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub scenario: String,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub sim_steps: usize,
    pub level_rule: LevelRule,
    pub variants: Vec<MetricsReport>,
}

/// Writes `metrics.json`, `schedule.csv` and one `trace_<variant>.csv` per
/// variant into `dir`.
pub fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    seed: u64,
    trials: usize,
    results: &[(MetricsReport, Vec<TrialRecord>)],
) -> Result<MetricsDocument> {
    std::fs::create_dir_all(dir)?;
    let doc = MetricsDocument {
        scenario: scenario.name.clone(),
        seed,
        trials,
        horizon: scenario.horizon,
        sim_steps: scenario.sim_steps,
        level_rule: scenario.levels.rule,
        variants: results.iter().map(|(m, _)| m.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), json + "\n")?;
    let mut schedule_written = false;
    for (report, records) in results {
        let design = scenario.design(report.variant)?;
        if !schedule_written {
            let f = std::fs::File::create(dir.join("schedule.csv"))?;
            write_schedule_csv(std::io::BufWriter::new(f), &design, scenario.sim_steps + 1)?;
            schedule_written = true;
        }
        let f = std::fs::File::create(dir.join(format!("trace_{}.csv", report.variant)))?;
        write_trace_csv(std::io::BufWriter::new(f), &design, records)?;
    }
    Ok(doc)
}

/// One row of the validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{mark}  {:<width$}  {}\n", c.name, c.detail));
        }
        s
    }
}

/// Static checks without simulating: stability, terminal ingredients,
/// non-empty tightening and feasibility of the first problem.
pub fn validate(scenario: &Scenario) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, r: std::result::Result<String, String>| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    };
    push(
        "fields",
        scenario
            .validate_fields()
            .map(|_| "ok".into())
            .map_err(|e| e.to_string()),
    );
    let gain = scenario.closed_loop_gain();
    push(
        "closed-loop stability",
        gain.as_ref()
            .map(|g| format!("spectral radius of A+BK = {:.4}", spectral_radius(g.a_k())))
            .map_err(|e| e.to_string()),
    );
    let Ok(gain) = gain else {
        return ValidationReport {
            scenario: scenario.name.clone(),
            checks,
        };
    };
    if let Some(b) = &scenario.true_b {
        let ak = scenario.model.a() + b * gain.k();
        push(
            "simulation-model stability",
            check_stable(&ak)
                .map(|_| format!("spectral radius {:.4}", spectral_radius(&ak)))
                .map_err(|e| e.to_string()),
        );
    }
    let schedule = scenario
        .disturbance_sequence()
        .and_then(|d| scenario.schedule(&gain, &d));
    match &schedule {
        Ok(s) => {
            let mut r = Ok(format!("{} steps", s.len()));
            for k in 0..s.len() {
                if let Err(e) = tighten(&scenario.state_constraints, s.state_set(k)) {
                    r = Err(format!("state tightening at step {k}: {e}"));
                    break;
                }
                if let Some(u) = &scenario.input_constraints {
                    if let Err(e) = tighten(u, s.input_set(k)) {
                        r = Err(format!("input tightening at step {k}: {e}"));
                        break;
                    }
                }
            }
            push("tightening non-empty", r);
            push(
                "terminal containment",
                if s.terminal_containment_holds() {
                    Ok("R_f covers every step".into())
                } else {
                    Err("R_f misses a per-step set".into())
                },
            );
        }
        Err(e) => push("tightening non-empty", Err(e.to_string())),
    }
    let design = scenario.design(Variant::Rec);
    match &design {
        Ok(d) => {
            push(
                "terminal set",
                d.verify_terminal()
                    .map(|_| "invariant and inside tightened sets".into())
                    .map_err(|e| e.to_string()),
            );
            let first = SmpcController::new(Arc::clone(d)).and_then(|mut c| {
                c.step(
                    &ControllerState::initial(&scenario.x0),
                    &scenario.x0,
                    &DVector::zeros(0),
                )
            });
            push(
                "initial problem feasible",
                match first {
                    Ok((r, _)) if r.status != QpStatus::Infeasible => {
                        Ok(format!("J* = {:.4}", r.cost))
                    }
                    Ok(_) => Err("infeasible".into()),
                    Err(e) => Err(e.to_string()),
                },
            );
        }
        Err(e) => push("controller design", Err(e.to_string())),
    }
    ValidationReport {
        scenario: scenario.name.clone(),
        checks,
    }
}

/// Custom scenario document: matrices are nested row-major arrays; `null`
/// bound entries mean unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default)]
    pub affine: Option<Vec<f64>>,
    #[serde(default)]
    pub b_true: Option<Vec<Vec<f64>>>,
    pub sigma_w: Vec<Vec<f64>>,
    #[serde(default)]
    pub w_mean: Option<Vec<f64>>,
    pub state_lower: Vec<Option<f64>>,
    pub state_upper: Vec<Option<f64>>,
    #[serde(default)]
    pub input_lower: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub input_upper: Option<Vec<Option<f64>>>,
    pub p_x: f64,
    #[serde(default)]
    pub p_u: Option<f64>,
    #[serde(default)]
    pub level_rule: Option<LevelRule>,
    #[serde(default)]
    pub tightening: Option<Tightening>,
    #[serde(default)]
    pub k: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub lqr_q: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub lqr_r: Option<Vec<Vec<f64>>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
    #[serde(default)]
    pub input_l1_weight: Option<f64>,
    #[serde(default)]
    pub slack_weight: Option<f64>,
    pub horizon: usize,
    pub sim_steps: usize,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub terminal_point: Option<Vec<f64>>,
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config {
            field: field.into(),
            message: "expected a non-empty rectangular nested array".into(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn bounds(
    field: &str,
    lower: &[Option<f64>],
    upper: &[Option<f64>],
    dim: usize,
) -> Result<Polytope> {
    if lower.len() != dim || upper.len() != dim {
        return Err(Error::Config {
            field: field.into(),
            message: format!("expected {dim} lower and upper bounds"),
        });
    }
    let lo = DVector::from_iterator(dim, lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
    let hi = DVector::from_iterator(dim, upper.iter().map(|v| v.unwrap_or(f64::INFINITY)));
    Polytope::from_bounds(&lo, &hi).map_err(|e| Error::Config {
        field: field.into(),
        message: e.to_string(),
    })
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })
    }

    pub fn into_scenario(self) -> Result<Scenario> {
        let cfg_err = |field: &str, e: Error| Error::Config {
            field: field.into(),
            message: e.to_string(),
        };
        let a = matrix("a", &self.a)?;
        let b = matrix("b", &self.b)?;
        let n = a.nrows();
        let m = b.ncols();
        let model = match &self.affine {
            Some(off) => LtiModel::with_affine(a, b, DVector::from_column_slice(off)),
            None => LtiModel::new(a, b),
        }
        .map_err(|e| cfg_err("a", e))?;
        let true_b = self
            .b_true
            .as_ref()
            .map(|rows| matrix("b_true", rows))
            .transpose()?;
        let cov = matrix("sigma_w", &self.sigma_w)?;
        if cov.shape() != (n, n) {
            return Err(Error::Config {
                field: "sigma_w".into(),
                message: "must be n_x x n_x".into(),
            });
        }
        let mean = self
            .w_mean
            .as_ref()
            .map_or(DVector::zeros(n), |v| DVector::from_column_slice(v));
        let state_constraints = bounds("state_bounds", &self.state_lower, &self.state_upper, n)?;
        let input_constraints = match (&self.input_lower, &self.input_upper) {
            (Some(lo), Some(hi)) => Some(bounds("input_bounds", lo, hi, m)?),
            (None, None) => None,
            _ => {
                return Err(Error::Config {
                    field: "input_bounds".into(),
                    message: "give both input_lower and input_upper".into(),
                })
            }
        };
        let gain = match (&self.k, &self.lqr_q, &self.lqr_r) {
            (Some(k), _, _) => GainRule::Explicit(matrix("k", k)?),
            (None, Some(q), Some(r)) => GainRule::Lqr {
                q: matrix("lqr_q", q)?,
                r: matrix("lqr_r", r)?,
            },
            _ => {
                return Err(Error::Config {
                    field: "k".into(),
                    message: "give either k or both lqr_q and lqr_r".into(),
                })
            }
        };
        let reference = self
            .reference
            .as_ref()
            .map_or(DVector::zeros(n), |v| DVector::from_column_slice(v));
        let terminal = TerminalSet::Point(
            self.terminal_point
                .as_ref()
                .map_or_else(|| reference.clone(), |v| DVector::from_column_slice(v)),
        );
        let tightening = self.tightening.unwrap_or(if mean.amax() == 0.0 {
            Tightening::Stationary
        } else {
            Tightening::TimeVarying
        });
        let scenario = Scenario {
            name: self.name.unwrap_or_else(|| "custom".into()),
            model,
            true_b,
            disturbance: DisturbanceSpec::Iid { mean, cov },
            state_constraints,
            input_constraints,
            levels: PrsLevels::new(
                self.p_x,
                self.p_u.unwrap_or(self.p_x),
                self.level_rule.unwrap_or_default(),
            ),
            tightening,
            gain,
            q: matrix("q", &self.q)?,
            r: matrix("r", &self.r)?,
            reference,
            input_l1_weight: self.input_l1_weight.unwrap_or(0.0),
            slack_weight: self.slack_weight,
            horizon: self.horizon,
            sim_steps: self.sim_steps,
            x0: DVector::from_column_slice(&self.x0),
            terminal,
            variants: self.variants.unwrap_or_else(|| vec![Variant::Rec]),
            envelope: None,
            qp: QpSettings::default(),
        };
        scenario.validate_fields()?;
        Ok(scenario)
    }
}
