//! Parameter covariances from the reduced Hessian.
//!
//! With `H` the Hessian of χ² in all `M + N` parameters at `(p, q*(p))`, the
//! four-corner second difference `H*(δ)` of `F*` tends to the Schur complement
//! `H_pp − H_pq H_qq⁻¹ H_qp` as `δ → 0`. Its inverse therefore tends to the
//! upper-left `M × M` block of `H⁻¹` (not to `H_pp⁻¹` unless `H_pq = 0`), which
//! is the `p`-block of the full covariance matrix.
//!
//! [`full_hessian_fd`] keeps the second-derivative terms of the model; it is
//! the true Hessian of χ², not the Gauss-Newton approximation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::ReducedProblem;
use crate::model::{chi_squared, DataSet, ParamSplit, SeparableModel};
use crate::shortcut::{shortcut_second, StepScheme};

/// Second central differences of χ² in `(p, q)`, split into blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub pp: DMatrix<f64>,
    pub pq: DMatrix<f64>,
    pub qp: DMatrix<f64>,
    pub qq: DMatrix<f64>,
}

impl HessianBlocks {
    pub fn full(&self) -> DMatrix<f64> {
        let m = self.pp.nrows();
        let n = self.qq.nrows();
        let mut h = DMatrix::zeros(m + n, m + n);
        h.view_mut((0, 0), (m, m)).copy_from(&self.pp);
        h.view_mut((0, m), (m, n)).copy_from(&self.pq);
        h.view_mut((m, 0), (n, m)).copy_from(&self.qp);
        h.view_mut((m, m), (n, n)).copy_from(&self.qq);
        h
    }

    /// `H_pp − H_pq H_qq⁻¹ H_qp`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        if self.qq.nrows() == 0 {
            return Ok(self.pp.clone());
        }
        let solved = self
            .qq
            .clone()
            .lu()
            .solve(&self.qp)
            .ok_or_else(|| Error::Singular("H_qq is singular".into()))?;
        Ok(&self.pp - &self.pq * solved)
    }

    /// Upper-left `M × M` block of `H⁻¹`.
    pub fn inverse_pp_block(&self) -> Result<DMatrix<f64>> {
        let m = self.pp.nrows();
        let inv = self
            .full()
            .try_inverse()
            .ok_or_else(|| Error::Singular("full Hessian is singular".into()))?;
        Ok(inv.view((0, 0), (m, m)).into_owned())
    }
}

/// Central second-difference Hessian of `χ²(p, q)` at `point`.
///
/// Steps follow `steps` coordinate-wise over the concatenated vector `(p, q)`.
pub fn full_hessian_fd(
    model: &dyn SeparableModel,
    data: &DataSet,
    point: &ParamSplit,
    steps: &StepScheme,
) -> Result<HessianBlocks> {
    point.check(model)?;
    let m = point.p.len();
    let x0: Vec<f64> = point.p.iter().chain(point.q.iter()).copied().collect();
    let dim = x0.len();
    let h: Vec<f64> = steps.steps(&x0);

    let eval = |moves: &[(usize, f64)]| -> Result<f64> {
        let mut x = x0.clone();
        for &(i, d) in moves {
            x[i] += d;
        }
        let v = chi_squared(model, &ParamSplit::new(&x[..m], &x[m..]), data)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::InvalidData(format!("χ² not finite at stencil point {x:?}")))
        }
    };

    let centre = eval(&[])?;
    let mut full = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let d2 = (eval(&[(i, h[i])])? - 2.0 * centre + eval(&[(i, -h[i])])?) / (h[i] * h[i]);
        full[(i, i)] = d2;
        for k in (i + 1)..dim {
            let v =
                (eval(&[(i, h[i]), (k, h[k])])? - eval(&[(i, -h[i]), (k, h[k])])? - eval(&[(i, h[i]), (k, -h[k])])?
                    + eval(&[(i, -h[i]), (k, -h[k])])?)
                    / (4.0 * h[i] * h[k]);
            full[(i, k)] = v;
            full[(k, i)] = v;
        }
    }
    let n = dim - m;
    Ok(HessianBlocks {
        pp: full.view((0, 0), (m, m)).into_owned(),
        pq: full.view((0, m), (m, n)).into_owned(),
        qp: full.view((m, 0), (n, m)).into_owned(),
        qq: full.view((m, m), (n, n)).into_owned(),
    })
}

/// The reduced Hessian `H*(δ)` and its inverse `η*(δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCovariance {
    pub h_star: DMatrix<f64>,
    pub eta_star: DMatrix<f64>,
    /// Relative displacement used for every direction.
    pub delta_used: f64,
}

/// Assemble `H*(δ)` from four-corner stencils of `F*` with relative step `delta`.
pub fn shortcut_hessian(problem: &ReducedProblem<'_>, p: &[f64], delta: f64) -> Result<ReducedCovariance> {
    let steps = StepScheme::relative(delta);
    steps.validate()?;
    let m = p.len();
    let mut h_star = DMatrix::zeros(m, m);
    for i in 0..m {
        for k in i..m {
            let v = shortcut_second(problem, p, i, k, &steps)?;
            h_star[(i, k)] = v;
            h_star[(k, i)] = v;
        }
    }
    let eta_star = h_star
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("reduced Hessian is singular at δ = {delta:e}")))?;
    Ok(ReducedCovariance {
        h_star,
        eta_star,
        delta_used: delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseBlockRow {
    pub delta: f64,
    pub eta_star: DMatrix<f64>,
    /// `‖η*(δ) − [H⁻¹]_pp‖∞` (max-abs entry).
    pub discrepancy: f64,
    /// `discrepancy / ‖[H⁻¹]_pp‖∞`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseBlockReport {
    /// Upper-left block of the inverse full Hessian.
    pub reference: DMatrix<f64>,
    pub rows: Vec<InverseBlockRow>,
}

impl InverseBlockReport {
    /// Whether the discrepancy shrinks at every step of the δ sequence.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].discrepancy < w[0].discrepancy)
    }
}

/// Compares `η*(δ)` for each δ in `deltas` with the `p`-block of the inverse
/// of the full finite-difference Hessian (computed with `full_steps`).
pub fn inverse_block_check(
    model: &dyn SeparableModel,
    data: &DataSet,
    point: &ParamSplit,
    deltas: &[f64],
    full_steps: &StepScheme,
) -> Result<InverseBlockReport> {
    let blocks = full_hessian_fd(model, data, point, full_steps)?;
    let reference = blocks.inverse_pp_block()?;
    let scale = reference.amax();
    let problem = ReducedProblem::new(model, data);
    let rows = deltas
        .iter()
        .map(|&delta| {
            let reduced = shortcut_hessian(&problem, point.p.as_slice(), delta)?;
            let discrepancy = (&reduced.eta_star - &reference).amax();
            Ok(InverseBlockRow {
                delta,
                relative: discrepancy / scale,
                discrepancy,
                eta_star: reduced.eta_star,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InverseBlockReport { reference, rows })
}

/// Covariance estimate for the nonlinear parameters at a fitted point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// `η* = H*(δ)⁻¹`, unscaled.
    pub eta_star: Vec<Vec<f64>>,
    /// `2 η*`: the covariance when the weights are inverse variances.
    pub covariance: Vec<Vec<f64>>,
    pub stderr: Vec<f64>,
    /// `χ²_min / (T − M − N)`; `None` without residual degrees of freedom.
    pub residual_variance: Option<f64>,
    /// `residual_variance · covariance`, for weights known only up to scale.
    pub scaled_covariance: Option<Vec<Vec<f64>>>,
    pub scaled_stderr: Option<Vec<f64>>,
    pub delta: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn sqrt_diagonal(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    m.diagonal()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::Indefinite { index: i, value: v })
            }
        })
        .collect()
}

/// Covariance and standard errors from `H*(δ)` at `p_opt`.
pub fn fit_covariance(problem: &ReducedProblem<'_>, p_opt: &[f64], delta: f64) -> Result<CovarianceEstimate> {
    let reduced = shortcut_hessian(problem, p_opt, delta)?;
    let fstar = problem.fstar(p_opt)?;
    let params = p_opt.len() + problem.model.linear_dim();
    estimate_from(&reduced, fstar, problem.data.len() as isize - params as isize)
}

/// Four-corner second differences of an arbitrary reduced objective.
///
/// Used where the objective is not a single [`ReducedProblem`], for example
/// the summed objective of a multi-file fit.
pub fn stencil_hessian(f: impl Fn(&[f64]) -> Result<f64>, p: &[f64], delta: f64) -> Result<ReducedCovariance> {
    let steps = StepScheme::relative(delta);
    steps.validate()?;
    let h = steps.steps(p);
    let m = p.len();
    let corner = |i: usize, k: usize, si: f64, sk: f64| {
        let mut x = p.to_vec();
        x[i] += si * h[i];
        x[k] += sk * h[k];
        f(&x)
    };
    let mut h_star = DMatrix::zeros(m, m);
    for i in 0..m {
        for k in i..m {
            let v = (corner(i, k, 1.0, 1.0)? - corner(i, k, -1.0, 1.0)? - corner(i, k, 1.0, -1.0)?
                + corner(i, k, -1.0, -1.0)?)
                / (4.0 * h[i] * h[k]);
            h_star[(i, k)] = v;
            h_star[(k, i)] = v;
        }
    }
    let eta_star = h_star
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("reduced Hessian is singular at δ = {delta:e}")))?;
    Ok(ReducedCovariance {
        h_star,
        eta_star,
        delta_used: delta,
    })
}

/// Covariance, standard errors and the residual-variance rescaling, given
/// `H*`, the minimum objective and the residual degrees of freedom.
pub fn estimate_from(reduced: &ReducedCovariance, objective: f64, dof: isize) -> Result<CovarianceEstimate> {
    let covariance = 2.0 * &reduced.eta_star;
    let stderr = sqrt_diagonal(&covariance)?;
    let residual_variance = (dof > 0).then(|| objective / dof as f64);
    let (scaled_covariance, scaled_stderr) = match residual_variance {
        Some(s2) => {
            let scaled = s2 * &covariance;
            let se = sqrt_diagonal(&scaled)?;
            (Some(rows(&scaled)), Some(se))
        }
        None => (None, None),
    };
    Ok(CovarianceEstimate {
        eta_star: rows(&reduced.eta_star),
        covariance: rows(&covariance),
        stderr,
        residual_variance,
        scaled_covariance,
        scaled_stderr,
        delta: reduced.delta_used,
    })
}

/// Default relative displacement for reported covariances.
pub const DEFAULT_COVARIANCE_DELTA: f64 = 1e-3;

/// `2 [H⁻¹]_pp` from the full Hessian, the covariance a classical fit reports.
pub fn full_covariance_pp(blocks: &HessianBlocks) -> Result<DMatrix<f64>> {
    Ok(2.0 * blocks.inverse_pp_block()?)
}

/// Returns `(det H* · det H_qq, det H)`; the two agree when `H*` is the Schur complement.
pub fn determinant_identity(h_star: &DMatrix<f64>, blocks: &HessianBlocks) -> (f64, f64) {
    (
        h_star.determinant() * blocks.qq.determinant(),
        blocks.full().determinant(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::build_normal_system;
    use crate::model::{CustomModel, ExpSin};
    use approx::assert_relative_eq;

    fn example1() -> DataSet {
        let t: Vec<f64> = (1..=100).map(f64::from).collect();
        let y = t.iter().map(|&t| 6.0 * (-t / 20.0).exp() + (t / 5.0).sin()).collect();
        DataSet::uniform(t, y).unwrap()
    }

    /// χ² = (q − 2p)² + 3p² + (q − 1)², realised with three sample points.
    /// Full Hessian [[2·4 + 6, −4], [−4, 4]] = [[14, −4], [−4, 4]].
    fn quadratic() -> (CustomModel, DataSet) {
        let model = CustomModel::new("quad", 1, 1, |_, t, phi| {
            phi[0] = if t == 2.0 { 0.0 } else { 1.0 };
        })
        .with_offset(|p, t| match t as i32 {
            0 => -2.0 * p[0],
            2 => 3f64.sqrt() * p[0],
            _ => 0.0,
        });
        let data = DataSet::uniform(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        (model, data)
    }

    #[test]
    fn quadratic_hessian_is_exact() {
        let (model, data) = quadratic();
        let blocks = full_hessian_fd(
            &model,
            &data,
            &ParamSplit::new(&[0.7], &[1.3]),
            &StepScheme::relative(1e-2),
        )
        .unwrap();
        assert_relative_eq!(blocks.pp[(0, 0)], 14.0, epsilon = 1e-9);
        assert_relative_eq!(blocks.pq[(0, 0)], -4.0, epsilon = 1e-9);
        assert_relative_eq!(blocks.qq[(0, 0)], 4.0, epsilon = 1e-9);
    }

    #[test]
    fn quadratic_reduced_inverse_matches_full_inverse_for_every_delta() {
        let (model, data) = quadratic();
        let problem = ReducedProblem::new(&model, &data);
        // F*(p) = (2p − 1)²/2 + 3p², curvature 14 − 16/4 = 10
        let r = shortcut_hessian(&problem, &[0.4], 1e-3).unwrap();
        assert_relative_eq!(r.h_star[(0, 0)], 10.0, epsilon = 1e-6);
        // [[14, −4], [−4, 4]]⁻¹ has (1,1) entry 4 / (56 − 16) = 0.1
        let report = inverse_block_check(
            &model,
            &data,
            &ParamSplit::new(&[0.4], problem.qstar(&[0.4]).unwrap().q_star.as_slice()),
            &[1e-1, 1e-2, 1e-3],
            &StepScheme::relative(1e-2),
        )
        .unwrap();
        assert_relative_eq!(report.reference[(0, 0)], 0.1, epsilon = 1e-9);
        for row in &report.rows {
            assert!(row.relative < 1e-6, "δ = {}: {}", row.delta, row.relative);
        }
    }

    #[test]
    fn block_diagonal_hessian_degenerates_to_pp_inverse() {
        // χ² = 5 p² + (q − 1)²: no coupling
        let model = CustomModel::new("decoupled", 1, 1, |_, t, phi| phi[0] = if t == 0.0 { 1.0 } else { 0.0 })
            .with_offset(|p, t| if t == 0.0 { 0.0 } else { 5f64.sqrt() * p[0] });
        let data = DataSet::uniform(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let blocks = full_hessian_fd(
            &model,
            &data,
            &ParamSplit::new(&[0.0], &[1.0]),
            &StepScheme::relative(1e-2),
        )
        .unwrap();
        assert!(blocks.pq.amax() < 1e-9);
        let r = shortcut_hessian(&ReducedProblem::new(&model, &data), &[0.2], 1e-2).unwrap();
        assert_relative_eq!(r.eta_star[(0, 0)], 1.0 / blocks.pp[(0, 0)], epsilon = 1e-8);
    }

    #[test]
    fn symmetric_blocks_and_qq_equals_twice_a() {
        let data = example1();
        let point = ParamSplit::new(&[20.0, 5.0], &[6.0, 1.0]);
        let blocks = full_hessian_fd(&ExpSin, &data, &point, &StepScheme::relative(1e-4)).unwrap();
        let h = blocks.full();
        assert!((&h - h.transpose()).amax() <= 1e-8 * h.amax());
        let sys = build_normal_system(&ExpSin, &[20.0, 5.0], &data).unwrap();
        assert_relative_eq!(blocks.qq, 2.0 * &sys.a, max_relative = 1e-6);
    }

    #[test]
    fn singular_reduced_hessian_is_an_error() {
        // F* independent of p
        let model = CustomModel::new("flat", 1, 1, |_, _, phi| phi[0] = 1.0);
        let data = DataSet::uniform(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let err = shortcut_hessian(&ReducedProblem::new(&model, &data), &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn covariance_needs_a_minimum() {
        // no linear terms; F*(p) = 2 − p² is concave
        let concave = CustomModel::new("concave", 1, 0, |_, _, _| {}).with_offset(|p, t| {
            if t == 0.0 {
                (2.0 - p[0] * p[0]).sqrt()
            } else {
                0.0
            }
        });
        let data = DataSet::uniform(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let err = fit_covariance(&ReducedProblem::new(&concave, &data), &[0.0], 1e-2).unwrap_err();
        assert!(matches!(err, Error::Indefinite { .. }), "{err:?}");
    }

    #[test]
    fn generic_stencil_matches_reduced_stencil() {
        let data = example1();
        let problem = ReducedProblem::new(&ExpSin, &data);
        let a = shortcut_hessian(&problem, &[20.0, 5.0], 1e-3).unwrap();
        let b = stencil_hessian(|p| problem.fstar(p), &[20.0, 5.0], 1e-3).unwrap();
        assert_eq!(a.h_star, b.h_star);
    }

    #[test]
    fn covariance_on_example1() {
        let data = example1();
        let est = fit_covariance(
            &ReducedProblem::new(&ExpSin, &data),
            &[20.0, 5.0],
            DEFAULT_COVARIANCE_DELTA,
        )
        .unwrap();
        assert!(est.stderr.iter().all(|&s| s > 0.0));
        assert_eq!(est.covariance.len(), 2);
        assert_relative_eq!(est.covariance[0][1], est.covariance[1][0], max_relative = 1e-12);
    }
}
