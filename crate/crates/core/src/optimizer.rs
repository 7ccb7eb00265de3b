//! Levenberg-Marquardt over the nonlinear parameters only (shortcut mode) or
//! over the concatenated `(p, q)` vector (classical mode).
//!
//! Both modes share one damped Gauss-Newton loop. Per iteration:
//!
//! 1. build the `√w`-weighted Jacobian `J` and residual `r`; `g = 2Jᵀr`,
//!    `H = 2JᵀJ`, stop if `‖g‖∞ ≤ gtol·(1 + F)`;
//! 2. solve `(H + λD)Δ = −g` with `D = diag(H)` (or `I`); stop if the
//!    predicted decrease is at most `ftol·F`;
//! 3. evaluate the trial point. Accept if `F` decreases (`λ ← λ/down`), else
//!    reject (`λ ← λ·up`) and go back to 2 with the same Jacobian.
//!
//! Two consecutive accepted steps with relative decrease below `ftol` also
//! stop the loop. Every trial evaluation counts as an iteration, accepted or
//! not.
//!
//! Evaluation accounting, with `T` sample points and `J` Jacobian builds:
//!
//! * shortcut: `qstar_solves = 1 + 2M·J + iterations`, `model_evals = T·qstar_solves`;
//! * classical: `model_evals = T·(1 + 2(M+N)·J + iterations)`, and one `q*`
//!   solve when the starting `q` is taken from `q*(p_init)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{QStarResult, RankPolicy, ReducedProblem};
use crate::model::{check_p, DataSet, DesignMatrix, SeparableModel};
use crate::shortcut::{shortcut_model_jacobian_with, StepScheme};

const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Shortcut,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    /// `λ·diag(H)`.
    #[default]
    Marquardt,
    /// `λ·I`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub ftol: f64,
    pub gtol: f64,
    pub steps: StepScheme,
    pub mode: Mode,
    pub rank_policy: RankPolicy,
    pub damping: Damping,
    pub ridge: f64,
    /// Evaluate the Jacobian probes on the rayon pool. Results are identical.
    pub parallel_probes: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            ftol: 1e-10,
            gtol: 1e-10,
            steps: StepScheme::default(),
            mode: Mode::Shortcut,
            rank_policy: RankPolicy::MinimumNorm,
            damping: Damping::Marquardt,
            ridge: 0.0,
            parallel_probes: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_up > 1.0) || !(self.lambda_down > 1.0) {
            return cfg(format!(
                "lambda factors must exceed 1, got up = {} and down = {}",
                self.lambda_up, self.lambda_down
            ));
        }
        if !(self.lambda_init > 0.0) {
            return cfg(format!("lambda_init must be positive, got {}", self.lambda_init));
        }
        if !(self.ftol > 0.0) || !(self.gtol > 0.0) {
            return cfg(format!(
                "tolerances must be positive, got ftol = {} and gtol = {}",
                self.ftol, self.gtol
            ));
        }
        if !(self.ridge >= 0.0) {
            return cfg(format!("ridge must be non-negative, got {}", self.ridge));
        }
        self.steps.validate()
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    PredictedDecrease,
    SmallDecrease,
    MaxIterations,
    /// λ grew past its cap without an accepted step.
    Stalled,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::Gradient | Termination::PredictedDecrease | Termination::SmallDecrease
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: Mode,
    pub p_opt: Vec<f64>,
    pub q_opt: Vec<f64>,
    pub chisq: f64,
    /// Trial evaluations, accepted or rejected.
    pub iterations: usize,
    pub accepted_steps: usize,
    pub jacobian_evals: usize,
    /// Single-point model evaluations; a pass over the dataset adds `T`.
    pub model_evals: u64,
    pub qstar_solves: u64,
    pub converged: bool,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct Counts {
    pub model_evals: u64,
    pub qstar_solves: u64,
    pub jacobian_evals: usize,
}

pub(crate) struct Evaluated<S> {
    /// `√w (f − y)`.
    pub residual: DVector<f64>,
    pub objective: f64,
    pub state: S,
}

/// A least-squares problem as seen by the damped Gauss-Newton loop.
pub(crate) trait LmProblem {
    type State;

    fn evaluate(&self, x: &[f64], counts: &mut Counts) -> Result<Evaluated<Self::State>>;

    /// `√w`-weighted Jacobian of the residuals at `x`.
    fn jacobian(&self, x: &[f64], at: &Evaluated<Self::State>, counts: &mut Counts) -> Result<DMatrix<f64>>;
}

pub(crate) struct Outcome<S> {
    pub x: Vec<f64>,
    pub best: Evaluated<S>,
    pub iterations: usize,
    pub accepted: usize,
    pub termination: Termination,
    pub counts: Counts,
    /// Objective at every accepted point, starting with the initial one.
    pub history: Vec<f64>,
}

/// One damped solve `(H + λD)Δ = −g`.
///
/// Returns `Δ` and the decrease predicted by the local quadratic model,
/// `−gᵀΔ − ½ΔᵀHΔ`.
pub fn lm_step(h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64, damping: Damping) -> Result<(DVector<f64>, f64)> {
    let n = g.len();
    let mut damped = h.clone();
    match damping {
        Damping::Marquardt => {
            let floor = h.diagonal().amax() * 1e-12;
            for i in 0..n {
                damped[(i, i)] += lambda * h[(i, i)].max(floor);
            }
        }
        Damping::Identity => {
            for i in 0..n {
                damped[(i, i)] += lambda;
            }
        }
    }
    let chol = damped.cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "damped normal matrix not positive definite at lambda = {lambda:e}"
        ))
    })?;
    let step = chol.solve(&(-g));
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("non-finite step at lambda = {lambda:e}")));
    }
    let predicted = -g.dot(&step) - 0.5 * (step.transpose() * h * &step)[0];
    Ok((step, predicted))
}

fn trial<P: LmProblem>(problem: &P, x: &[f64], counts: &mut Counts) -> Result<Option<Evaluated<P::State>>> {
    match problem.evaluate(x, counts) {
        Ok(e) if e.objective.is_finite() => Ok(Some(e)),
        Ok(_) | Err(Error::Domain { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(crate) fn run_lm<P: LmProblem>(problem: &P, x0: &[f64], options: &FitOptions) -> Result<Outcome<P::State>> {
    options.validate()?;
    let mut counts = Counts::default();
    let mut x = x0.to_vec();
    let mut current = problem.evaluate(&x, &mut counts)?;
    if !current.objective.is_finite() {
        return Err(Error::InvalidData(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut lambda = options.lambda_init;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut small_decreases = 0;
    let mut history = vec![current.objective];
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < options.max_iterations {
        let jw = problem.jacobian(&x, &current, &mut counts)?;
        counts.jacobian_evals += 1;
        let f = current.objective;
        let g = 2.0 * jw.transpose() * &current.residual;
        let h = 2.0 * jw.transpose() * &jw;
        if g.amax() <= options.gtol * (1.0 + f) {
            termination = Termination::Gradient;
            break;
        }
        loop {
            if iterations >= options.max_iterations {
                break 'outer;
            }
            let (step, predicted) = match lm_step(&h, &g, lambda, options.damping) {
                Ok(s) => s,
                Err(e) => {
                    lambda *= options.lambda_up;
                    if lambda > LAMBDA_MAX {
                        return Err(e);
                    }
                    continue;
                }
            };
            if predicted <= options.ftol * f {
                termination = Termination::PredictedDecrease;
                break 'outer;
            }
            iterations += 1;
            let candidate: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match trial(problem, &candidate, &mut counts)? {
                Some(next) if next.objective < f => {
                    let relative = (f - next.objective) / f;
                    small_decreases = if relative < options.ftol {
                        small_decreases + 1
                    } else {
                        0
                    };
                    x = candidate;
                    current = next;
                    history.push(current.objective);
                    accepted += 1;
                    lambda = (lambda / options.lambda_down).max(LAMBDA_MIN);
                    if small_decreases >= 2 {
                        termination = Termination::SmallDecrease;
                        break 'outer;
                    }
                    continue 'outer;
                }
                _ => {
                    lambda *= options.lambda_up;
                    if lambda > LAMBDA_MAX {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(Outcome {
        x,
        best: current,
        iterations,
        accepted,
        termination,
        counts,
        history,
    })
}

pub(crate) fn weighted_residual(fitted: &DVector<f64>, data: &DataSet) -> DVector<f64> {
    DVector::from_iterator(
        data.len(),
        fitted
            .iter()
            .zip(data.y())
            .zip(data.w())
            .map(|((f, y), w)| w.sqrt() * (f - y)),
    )
}

pub(crate) fn weight_rows(j: &mut DMatrix<f64>, data: &DataSet) {
    for (row, w) in data.w().iter().enumerate() {
        let s = w.sqrt();
        j.row_mut(row).scale_mut(s);
    }
}

struct ShortcutProblem<'a> {
    reduced: ReducedProblem<'a>,
    steps: &'a StepScheme,
    parallel: bool,
}

impl LmProblem for ShortcutProblem<'_> {
    type State = QStarResult;

    fn evaluate(&self, p: &[f64], counts: &mut Counts) -> Result<Evaluated<QStarResult>> {
        counts.qstar_solves += 1;
        counts.model_evals += self.reduced.data.len() as u64;
        let r = self.reduced.qstar(p)?;
        Ok(Evaluated {
            residual: weighted_residual(&r.fitted, self.reduced.data),
            objective: r.fstar,
            state: r,
        })
    }

    fn jacobian(&self, p: &[f64], _at: &Evaluated<QStarResult>, counts: &mut Counts) -> Result<DMatrix<f64>> {
        let sj = shortcut_model_jacobian_with(&self.reduced, p, self.steps, self.parallel)?;
        counts.qstar_solves += sj.evals as u64;
        counts.model_evals += (sj.evals * self.reduced.data.len()) as u64;
        let mut j = sj.j;
        weight_rows(&mut j, self.reduced.data);
        Ok(j)
    }
}

/// Shortcut-mode fit: LM on `F*(p)`, finishing with `q_opt = q*(p_opt)`.
pub fn lm_fit(model: &dyn SeparableModel, data: &DataSet, p_init: &[f64], options: &FitOptions) -> Result<FitReport> {
    lm_fit_traced(model, data, p_init, options).map(|(report, _)| report)
}

/// Same as [`lm_fit`] but also returns the accepted objective values.
pub fn lm_fit_traced(
    model: &dyn SeparableModel,
    data: &DataSet,
    p_init: &[f64],
    options: &FitOptions,
) -> Result<(FitReport, Vec<f64>)> {
    check_p(model, p_init)?;
    let problem = ShortcutProblem {
        reduced: ReducedProblem::new(model, data)
            .with_rank_policy(options.rank_policy)
            .with_ridge(options.ridge),
        steps: &options.steps,
        parallel: options.parallel_probes,
    };
    let out = run_lm(&problem, p_init, options)?;
    let report = FitReport {
        mode: Mode::Shortcut,
        q_opt: out.best.state.q_star.as_slice().to_vec(),
        chisq: out.best.objective,
        p_opt: out.x,
        iterations: out.iterations,
        accepted_steps: out.accepted,
        jacobian_evals: out.counts.jacobian_evals,
        model_evals: out.counts.model_evals,
        qstar_solves: out.counts.qstar_solves,
        converged: out.termination.converged(),
        termination: out.termination,
        covariance: None,
        stderr: None,
    };
    Ok((report, out.history))
}

/// Every parameter treated as nonlinear: `x = (p, q)`, model values by a full
/// pass per probe.
pub(crate) struct ClassicalProblem<'a> {
    pub model: &'a dyn SeparableModel,
    pub data: &'a DataSet,
    pub steps: &'a StepScheme,
}

impl ClassicalProblem<'_> {
    fn values(&self, x: &[f64], counts: &mut Counts) -> Result<DVector<f64>> {
        let m = self.model.nonlinear_dim();
        counts.model_evals += self.data.len() as u64;
        let design = DesignMatrix::build(self.model, &x[..m], self.data.t())?;
        Ok(design.values(&DVector::from_column_slice(&x[m..])))
    }
}

impl LmProblem for ClassicalProblem<'_> {
    type State = ();

    fn evaluate(&self, x: &[f64], counts: &mut Counts) -> Result<Evaluated<()>> {
        let fitted = self.values(x, counts)?;
        let residual = weighted_residual(&fitted, self.data);
        Ok(Evaluated {
            objective: residual.norm_squared(),
            residual,
            state: (),
        })
    }

    fn jacobian(&self, x: &[f64], _at: &Evaluated<()>, counts: &mut Counts) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.data.len(), x.len());
        let mut probe = x.to_vec();
        for k in 0..x.len() {
            let d = self.steps.step(k, x[k]);
            probe[k] = x[k] + d;
            let plus = self.values(&probe, counts)?;
            probe[k] = x[k] - d;
            let minus = self.values(&probe, counts)?;
            probe[k] = x[k];
            j.set_column(k, &((plus - minus) / (2.0 * d)));
        }
        weight_rows(&mut j, self.data);
        Ok(j)
    }
}

/// Classical-mode fit over the concatenated `(p, q)` vector.
///
/// When `q_init` is `None` the start is completed with `q*(p_init)`.
pub fn lm_fit_classical(
    model: &dyn SeparableModel,
    data: &DataSet,
    p_init: &[f64],
    q_init: Option<&[f64]>,
    options: &FitOptions,
) -> Result<FitReport> {
    check_p(model, p_init)?;
    let (q0, solves) = match q_init {
        Some(q) if q.len() == model.linear_dim() => (q.to_vec(), 0),
        Some(q) => {
            return Err(Error::Dimension {
                what: "linear parameters",
                expected: model.linear_dim(),
                got: q.len(),
            })
        }
        None => {
            let reduced = ReducedProblem::new(model, data)
                .with_rank_policy(options.rank_policy)
                .with_ridge(options.ridge);
            (reduced.qstar(p_init)?.q_star.as_slice().to_vec(), 1)
        }
    };
    let x0: Vec<f64> = p_init.iter().chain(&q0).copied().collect();
    let problem = ClassicalProblem {
        model,
        data,
        steps: &options.steps,
    };
    let out = run_lm(&problem, &x0, options)?;
    let m = model.nonlinear_dim();
    let mut model_evals = out.counts.model_evals;
    if solves > 0 {
        model_evals += data.len() as u64;
    }
    Ok(FitReport {
        mode: Mode::Classical,
        p_opt: out.x[..m].to_vec(),
        q_opt: out.x[m..].to_vec(),
        chisq: out.best.objective,
        iterations: out.iterations,
        accepted_steps: out.accepted,
        jacobian_evals: out.counts.jacobian_evals,
        model_evals,
        qstar_solves: solves,
        converged: out.termination.converged(),
        termination: out.termination,
        covariance: None,
        stderr: None,
    })
}

/// Dispatch on `options.mode`.
pub fn fit(model: &dyn SeparableModel, data: &DataSet, p_init: &[f64], options: &FitOptions) -> Result<FitReport> {
    match options.mode {
        Mode::Shortcut => lm_fit(model, data, p_init, options),
        Mode::Classical => lm_fit_classical(model, data, p_init, None, options),
    }
}
