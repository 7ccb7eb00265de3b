//! Finite differences in `p` with `q` re-optimised at every probe point.
//!
//! A central difference of `F*(p) = χ²(p, q*(p))` is equal (to `O(δ²)`) to the
//! partial derivative of χ² in `p` at `(p, q*(p))`, because `∇_q χ²` vanishes
//! at `q*`. The same holds for the model values themselves, which gives the
//! Jacobian used by the Gauss-Newton step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{QStarResult, ReducedProblem};

/// Finite-difference step sizes: `δₘ = max(relative_step·|pₘ|, absolute_floor)`
/// unless an explicit per-parameter step is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepScheme {
    pub relative_step: f64,
    pub absolute_floor: f64,
    #[serde(default)]
    pub overrides: Option<Vec<f64>>,
}

impl Default for StepScheme {
    fn default() -> Self {
        Self {
            relative_step: 1e-4,
            absolute_floor: 1e-8,
            overrides: None,
        }
    }
}

impl StepScheme {
    pub fn relative(relative_step: f64) -> Self {
        Self {
            relative_step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} must be positive, got {v}")));
        if !(self.relative_step > 0.0) {
            return bad("relative_step", self.relative_step);
        }
        if !(self.absolute_floor > 0.0) {
            return bad("absolute_floor", self.absolute_floor);
        }
        if let Some(o) = &self.overrides {
            if let Some(&v) = o.iter().find(|&&v| !(v > 0.0)) {
                return bad("step override", v);
            }
        }
        Ok(())
    }

    /// Step for parameter `m` at value `value`.
    pub fn step(&self, m: usize, value: f64) -> f64 {
        match self.overrides.as_ref().and_then(|o| o.get(m)) {
            Some(&d) => d,
            None => (self.relative_step * value.abs()).max(self.absolute_floor),
        }
    }

    pub fn steps(&self, p: &[f64]) -> Vec<f64> {
        p.iter().enumerate().map(|(m, &v)| self.step(m, v)).collect()
    }
}

fn displaced(p: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut x = p.to_vec();
    for &(m, d) in moves {
        x[m] += d;
    }
    x
}

fn probe_label(moves: &[(usize, f64)]) -> String {
    moves
        .iter()
        .map(|&(m, d)| format!("p[{m}]{}{:e}", if d < 0.0 { '-' } else { '+' }, d.abs()))
        .collect::<Vec<_>>()
        .join(",")
}

fn solve_at(problem: &ReducedProblem<'_>, p: &[f64], moves: &[(usize, f64)]) -> Result<QStarResult> {
    problem
        .qstar(&displaced(p, moves))
        .map_err(|e| e.at_probe(|| probe_label(moves)))
}

/// Central differences of `F*`: component `m` is
/// `[F*(p + δₘeₘ) − F*(p − δₘeₘ)] / 2δₘ`.
pub fn shortcut_gradient(problem: &ReducedProblem<'_>, p: &[f64], steps: &StepScheme) -> Result<DVector<f64>> {
    let deltas = steps.steps(p);
    let mut g = DVector::zeros(p.len());
    for (m, &d) in deltas.iter().enumerate() {
        let plus = solve_at(problem, p, &[(m, d)])?.fstar;
        let minus = solve_at(problem, p, &[(m, -d)])?.fstar;
        g[m] = (plus - minus) / (2.0 * d);
    }
    Ok(g)
}

/// The four-corner stencil
/// `[F*(++) − F*(−+) − F*(+−) + F*(−−)] / 4δₘδₘ'` in directions `m`, `m'`.
///
/// For `m = m'` the corners collapse to `p ± 2δₘeₘ` and `p` (twice).
pub fn shortcut_second(
    problem: &ReducedProblem<'_>,
    p: &[f64],
    m: usize,
    m2: usize,
    steps: &StepScheme,
) -> Result<f64> {
    let d1 = steps.step(m, p[m]);
    let d2 = steps.step(m2, p[m2]);
    let f = |s1: f64, s2: f64| solve_at(problem, p, &[(m, s1 * d1), (m2, s2 * d2)]).map(|r| r.fstar);
    Ok((f(1.0, 1.0)? - f(-1.0, 1.0)? - f(1.0, -1.0)? + f(-1.0, -1.0)?) / (4.0 * d1 * d2))
}

/// `∂f(tⱼ; p, q*(p))/∂pₘ` by central differences, `T × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutJacobian {
    pub j: DMatrix<f64>,
    /// Number of `q*` solves consumed (always `2M`).
    pub evals: usize,
}

pub fn shortcut_model_jacobian(
    problem: &ReducedProblem<'_>,
    p: &[f64],
    steps: &StepScheme,
) -> Result<ShortcutJacobian> {
    shortcut_model_jacobian_with(problem, p, steps, false)
}

/// As [`shortcut_model_jacobian`], optionally fanning the `2M` probes out to
/// the rayon pool. The result does not depend on the choice.
pub fn shortcut_model_jacobian_with(
    problem: &ReducedProblem<'_>,
    p: &[f64],
    steps: &StepScheme,
    parallel: bool,
) -> Result<ShortcutJacobian> {
    let deltas = steps.steps(p);
    let column = |m: usize| -> Result<DVector<f64>> {
        let d = deltas[m];
        let plus = solve_at(problem, p, &[(m, d)])?;
        let minus = solve_at(problem, p, &[(m, -d)])?;
        Ok((plus.fitted - minus.fitted) / (2.0 * d))
    };
    let columns: Vec<DVector<f64>> = if parallel {
        (0..p.len()).into_par_iter().map(column).collect::<Result<_>>()?
    } else {
        (0..p.len()).map(column).collect::<Result<_>>()?
    };
    let mut j = DMatrix::zeros(problem.data.len(), p.len());
    for (m, c) in columns.iter().enumerate() {
        j.set_column(m, c);
    }
    Ok(ShortcutJacobian { j, evals: 2 * p.len() })
}

/// Central differences of `q*(p)`, `N × M`.
pub fn fd_qstar_jacobian(problem: &ReducedProblem<'_>, p: &[f64], steps: &StepScheme) -> Result<DMatrix<f64>> {
    let deltas = steps.steps(p);
    let mut jac = DMatrix::zeros(problem.model.linear_dim(), p.len());
    for (m, &d) in deltas.iter().enumerate() {
        let plus = solve_at(problem, p, &[(m, d)])?.q_star;
        let minus = solve_at(problem, p, &[(m, -d)])?.q_star;
        jac.set_column(m, &((plus - minus) / (2.0 * d)));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::RankPolicy;
    use crate::model::{chi_squared, CustomModel, DataSet, ExpSin, ParamSplit};
    use approx::assert_relative_eq;

    fn example1() -> DataSet {
        let t: Vec<f64> = (1..=100).map(f64::from).collect();
        let y = t.iter().map(|&t| 6.0 * (-t / 20.0).exp() + (t / 5.0).sin()).collect();
        DataSet::uniform(t, y).unwrap()
    }

    #[test]
    fn step_scheme() {
        let s = StepScheme::default();
        assert_eq!(s.step(0, 20.0), 20.0 * 1e-4);
        assert_eq!(s.step(0, 0.0), 1e-8);
        let o = StepScheme {
            overrides: Some(vec![0.5]),
            ..StepScheme::default()
        };
        assert_eq!(o.step(0, 20.0), 0.5);
        assert_eq!(o.step(1, 20.0), 20.0 * 1e-4);
        assert!(StepScheme::relative(0.0).validate().is_err());
        assert!(o.validate().is_ok());
    }

    #[test]
    fn gradient_vanishes_at_exact_optimum() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let steps = StepScheme::default();
        let g = shortcut_gradient(&problem, &[20.0, 5.0], &steps).unwrap();
        // scale: gradient magnitude at a 5% displacement
        let scale = shortcut_gradient(&problem, &[19.0, 4.9], &steps).unwrap().amax();
        assert!(g.amax() <= 1e-6 * scale, "{g} vs scale {scale}");
    }

    #[test]
    fn gradient_points_towards_optimum() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let g = shortcut_gradient(&problem, &[19.0, 4.9], &StepScheme::default()).unwrap();
        assert!(g[0] < 0.0);
    }

    #[test]
    fn quadratic_second_difference_is_exact() {
        // χ² = Σ (q − y)² + p² realised with a single point: f = q + i·p is not
        // separable-friendly, so embed p² through the offset with y = 0 and a
        // second point carrying the linear term.
        let model = CustomModel::new("quad", 1, 1, |_, t, phi| phi[0] = if t == 0.0 { 1.0 } else { 0.0 })
            .with_offset(|p, t| if t == 0.0 { 0.0 } else { p[0] });
        let data = DataSet::uniform(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let problem = ReducedProblem::new(&model, &data);
        for p in [-1.3, 0.0, 2.5] {
            let h = shortcut_second(&problem, &[p], 0, 0, &StepScheme::relative(1e-2)).unwrap();
            assert_relative_eq!(h, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn second_difference_symmetry() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let s = StepScheme::relative(1e-3);
        for p in [[19.0, 4.9], [21.0, 5.2], [15.0, 6.0]] {
            let a = shortcut_second(&problem, &p, 0, 1, &s).unwrap();
            let b = shortcut_second(&problem, &p, 1, 0, &s).unwrap();
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn pure_linear_model_has_zero_derivatives() {
        let model = CustomModel::new("line", 1, 2, |_, t, phi| {
            phi[0] = 1.0;
            phi[1] = t;
        });
        let data = example1();
        let problem = ReducedProblem::new(&model, &data);
        let j = shortcut_model_jacobian(&problem, &[3.0], &StepScheme::default()).unwrap();
        assert_eq!(j.evals, 2);
        assert!(j.j.iter().all(|&v| v == 0.0));
        let jq = fd_qstar_jacobian(&problem, &[3.0], &StepScheme::default()).unwrap();
        assert!(jq.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gauss_newton_gradient_matches_shortcut_gradient() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let steps = StepScheme::default();
        let p = [19.0, 4.9];
        let j = shortcut_model_jacobian(&problem, &p, &steps).unwrap().j;
        let r = problem.qstar(&p).unwrap();
        let resid = r.fitted - DVector::from_column_slice(data.y());
        let g_gn = 2.0 * j.transpose() * resid;
        let g = shortcut_gradient(&problem, &p, &steps).unwrap();
        assert_relative_eq!(g_gn, g, max_relative = 1e-6);
    }

    #[test]
    fn jacobian_parallel_matches_sequential() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let a = shortcut_model_jacobian_with(&problem, &[19.0, 4.9], &StepScheme::default(), false).unwrap();
        let b = shortcut_model_jacobian_with(&problem, &[19.0, 4.9], &StepScheme::default(), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_policy_names_probe() {
        // the two columns coincide only when p[0] == 1
        let model = CustomModel::new("degenerate", 1, 2, |p, t, phi| {
            phi[0] = t;
            phi[1] = t * p[0].min(1.0);
        });
        let data = example1();
        let problem = ReducedProblem::new(&model, &data).with_rank_policy(RankPolicy::Strict);
        let err = shortcut_gradient(&problem, &[1.0 - 1e-4], &StepScheme::relative(1e-2)).unwrap_err();
        match err {
            Error::RankDeficient { probe: Some(label), .. } => assert!(label.starts_with("p[0]+"), "{label}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_q_gradient_agrees() {
        // ∇F*(p) = ∇_p χ²(p, q) at q = q*(p)
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let p = [18.5, 5.3];
        let q = problem.qstar(&p).unwrap().q_star;
        let h = 1e-5;
        let g = shortcut_gradient(&problem, &p, &StepScheme::relative(1e-5)).unwrap();
        for m in 0..2 {
            let mut a = p;
            let mut b = p;
            a[m] += h * p[m];
            b[m] -= h * p[m];
            let fa = chi_squared(&ExpSin, &ParamSplit::new(&a, q.as_slice()), &data).unwrap();
            let fb = chi_squared(&ExpSin, &ParamSplit::new(&b, q.as_slice()), &data).unwrap();
            let frozen = (fa - fb) / (2.0 * h * p[m]);
            assert_relative_eq!(g[m], frozen, max_relative = 1e-6);
        }
    }
}
