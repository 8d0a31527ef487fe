//! Python module `smpc_py`. Matrices cross the boundary as nested lists
//! (row-major); structured results come back as dicts.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use smpc::gaussians::LevelRule;
use smpc::lti::{ClosedLoopGain, LtiModel};
use smpc::prs::stationary_prs;
use smpc::qp::{self, QuadraticProgram};
use smpc::simulate::{
    run_scenario, validate as validate_scenario, Experiment, MetricsDocument, Scenario,
    ScenarioConfig,
};
use smpc::smpc::Variant;
use smpc::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidProbability(_)
        | Error::DimensionMismatch(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Row-major nested list to a matrix; rejects ragged input.
pub fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument(format!("`{name}` is ragged")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Shipped scenario or, when `config` is given, a custom one from JSON text.
pub fn scenario(
    name: &str,
    config: Option<&str>,
    level_rule: Option<&str>,
    horizon: Option<usize>,
) -> Result<Scenario, Error> {
    let mut s = match config {
        Some(text) => ScenarioConfig::from_json(text)?.into_scenario()?,
        None => Scenario::by_name(name)?,
    };
    if let Some(rule) = level_rule {
        s.levels.rule = rule.parse()?;
    }
    if let Some(n) = horizon {
        s.horizon = n;
    }
    s.validate_fields()?;
    Ok(s)
}

pub fn run_document(
    s: &mut Scenario,
    variants: Option<Vec<String>>,
    trials: usize,
    seed: u64,
) -> Result<MetricsDocument, Error> {
    if let Some(list) = variants {
        s.variants = list
            .iter()
            .map(|v| v.parse())
            .collect::<Result<Vec<Variant>, _>>()?;
    }
    let results = run_scenario(s, trials, seed)?;
    Ok(MetricsDocument {
        scenario: s.name.clone(),
        seed,
        trials,
        horizon: s.horizon,
        sim_steps: s.sim_steps,
        level_rule: s.levels.rule,
        variants: results.into_iter().map(|(m, _)| m).collect(),
    })
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Monte Carlo run; returns the metrics document as a dict.
#[pyfunction]
#[pyo3(signature = (scenario="double_integrator", variants=None, trials=100, seed=1, level_rule=None, horizon=None, config=None))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    scenario: &str,
    variants: Option<Vec<String>>,
    trials: usize,
    seed: u64,
    level_rule: Option<&str>,
    horizon: Option<usize>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut s = self::scenario(scenario, config, level_rule, horizon).map_err(py_err)?;
    let doc = py
        .detach(|| run_document(&mut s, variants, trials, seed))
        .map_err(py_err)?;
    let text = serde_json::to_string(&doc).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Static checks; returns a list of `{name, passed, detail}` dicts.
#[pyfunction]
#[pyo3(signature = (scenario="double_integrator", config=None))]
fn validate<'py>(
    py: Python<'py>,
    scenario: &str,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = self::scenario(scenario, config, None, None).map_err(py_err)?;
    let report = validate_scenario(&s);
    let text = serde_json::to_string(&report.checks)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// One closed-loop trial with states `x`, inputs `u`, nominal states `z`
/// and per-step outcomes.
#[pyfunction]
#[pyo3(signature = (scenario="double_integrator", variant="rec", seed=1, trial=0))]
fn simulate_trial<'py>(
    py: Python<'py>,
    scenario: &str,
    variant: &str,
    seed: u64,
    trial: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let s = self::scenario(scenario, None, None, None).map_err(py_err)?;
    let v: Variant = variant.parse().map_err(py_err)?;
    let rec = py
        .detach(|| Experiment::new(&s, v).and_then(|e| e.run_trial(seed, trial)))
        .map_err(py_err)?;
    let vecs = |xs: &[DVector<f64>]| {
        xs.iter()
            .map(|x| x.iter().copied().collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let out = PyDict::new(py);
    out.set_item("x", vecs(&rec.x))?;
    out.set_item("u", vecs(&rec.u))?;
    out.set_item("z", vecs(&rec.z))?;
    out.set_item(
        "outcome",
        rec.outcome.iter().map(|o| o.as_str()).collect::<Vec<_>>(),
    )?;
    out.set_item("state_violation", rec.state_violation.clone())?;
    out.set_item("input_violation", rec.input_violation.clone())?;
    Ok(out)
}

/// Half-width of the stationary reachable set along `direction`.
#[pyfunction]
#[pyo3(signature = (a, b, k, sigma_w, p, direction, rule="gaussian", dim=None))]
#[allow(clippy::too_many_arguments)]
fn stationary_half_width(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    sigma_w: Vec<Vec<f64>>,
    p: f64,
    direction: Vec<f64>,
    rule: &str,
    dim: Option<usize>,
) -> PyResult<f64> {
    let inner = || -> Result<f64, Error> {
        let model = LtiModel::new(matrix("a", &a)?, matrix("b", &b)?)?;
        let gain = ClosedLoopGain::new(&model, matrix("k", &k)?)?;
        let rule: LevelRule = rule.parse()?;
        let set = stationary_prs(&gain, &matrix("sigma_w", &sigma_w)?, p, rule, dim)?;
        Ok(set.half_width(&DVector::from_vec(direction.clone())))
    };
    inner().map_err(py_err)
}

/// Chi-squared quantile with `dof` degrees of freedom.
#[pyfunction]
fn chi2_quantile(dof: usize, p: f64) -> PyResult<f64> {
    smpc::gaussians::chi2_quantile(dof, p).map_err(py_err)
}

/// `min ½yᵀHy + gᵀy` s.t. `A_in y ≤ b_in`, `A_eq y = b_eq`.
#[pyfunction]
#[pyo3(signature = (h, g, a_in=None, b_in=None, a_eq=None, b_eq=None))]
fn solve_qp<'py>(
    py: Python<'py>,
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
    a_in: Option<Vec<Vec<f64>>>,
    b_in: Option<Vec<f64>>,
    a_eq: Option<Vec<Vec<f64>>>,
    b_eq: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let n = g.len();
    let build = || -> Result<QuadraticProgram, Error> {
        let mut prob = QuadraticProgram::new(matrix("h", &h)?, DVector::from_vec(g.clone()));
        if let (Some(a), Some(b)) = (&a_in, &b_in) {
            let a = if a.is_empty() {
                DMatrix::zeros(0, n)
            } else {
                matrix("a_in", a)?
            };
            prob = prob.with_inequalities(a, DVector::from_vec(b.clone()));
        }
        if let (Some(a), Some(b)) = (&a_eq, &b_eq) {
            let a = if a.is_empty() {
                DMatrix::zeros(0, n)
            } else {
                matrix("a_eq", a)?
            };
            prob = prob.with_equalities(a, DVector::from_vec(b.clone()));
        }
        Ok(prob)
    };
    let prob = build().map_err(py_err)?;
    let sol = qp::solve(&prob, None).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("y", sol.y.iter().copied().collect::<Vec<_>>())?;
    out.set_item(
        "multipliers",
        sol.multipliers.iter().copied().collect::<Vec<_>>(),
    )?;
    out.set_item("objective", sol.objective)?;
    out.set_item("status", format!("{:?}", sol.status).to_lowercase())?;
    out.set_item("iterations", sol.iterations)?;
    Ok(out)
}

#[pymodule]
fn smpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_trial, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_half_width, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    Ok(())
}
