//! Elimination of the linear parameters.
//!
//! For fixed `p`, χ² is a quadratic in `q`:
//!
//! ```text
//! χ²(p, q) = qᵀ A q + bᵀ q + c,   ∇_q χ² = 2 A q + b,
//! A = Φᵀ W Φ,   b = 2 Φᵀ W (ψ − y),   c = (ψ − y)ᵀ W (ψ − y).
//! ```
//!
//! The minimiser `q*(p)` is computed from an orthogonal factorisation of the
//! `√w`-scaled design matrix instead of the normal equations; [`NormalSystem`]
//! is kept for identities and gradient checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_p, weighted_sum_sq, DataSet, DesignMatrix, SeparableModel};

/// What to do when the weighted design matrix is rank-deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankPolicy {
    /// Fail with [`Error::RankDeficient`].
    Strict,
    /// Return the minimum-norm least-squares solution with `rank_ok = false`.
    #[default]
    MinimumNorm,
}

/// The quadratic expansion of χ² in `q` at fixed `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl NormalSystem {
    /// `qᵀ A q + bᵀ q + c`.
    pub fn eval(&self, q: &DVector<f64>) -> f64 {
        (q.transpose() * &self.a * q)[0] + self.b.dot(q) + self.c
    }

    /// `2 A q + b`.
    pub fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        2.0 * &self.a * q + &self.b
    }
}

pub fn build_normal_system(model: &dyn SeparableModel, p: &[f64], data: &DataSet) -> Result<NormalSystem> {
    let design = DesignMatrix::build(model, p, data.t())?;
    let w = DVector::from_column_slice(data.w());
    let offset = &design.psi - DVector::from_column_slice(data.y());
    let weighted_phi = DMatrix::from_fn(data.len(), design.phi.ncols(), |j, n| design.phi[(j, n)] * w[j]);
    let a = design.phi.transpose() * &weighted_phi;
    let b = 2.0 * weighted_phi.transpose() * &offset;
    let c = offset.component_mul(&offset).dot(&w);
    Ok(NormalSystem { a, b, c })
}

/// `q*(p)` together with the reduced objective `F*(p) = χ²(p, q*(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct QStarResult {
    pub q_star: DVector<f64>,
    pub fstar: f64,
    /// `false` when the design matrix lost rank at working precision.
    pub rank_ok: bool,
    pub rank: usize,
    /// Model values at the sample points, `Φ q* + ψ`.
    pub fitted: DVector<f64>,
}

/// Weighted linear least squares on an already evaluated design matrix.
pub(crate) fn solve_design(design: &DesignMatrix, data: &DataSet, ridge: f64) -> QStarResult {
    let rows = data.len();
    let n = design.phi.ncols();
    if n == 0 {
        let fitted = design.psi.clone();
        return QStarResult {
            q_star: DVector::zeros(0),
            fstar: weighted_sum_sq(&fitted, data),
            rank_ok: true,
            rank: 0,
            fitted,
        };
    }

    let extra = if ridge > 0.0 { n } else { 0 };
    let mut scaled = DMatrix::zeros(rows + extra, n);
    let mut rhs = DVector::zeros(rows + extra);
    for j in 0..rows {
        let sw = data.w()[j].sqrt();
        for k in 0..n {
            scaled[(j, k)] = sw * design.phi[(j, k)];
        }
        rhs[j] = sw * (data.y()[j] - design.psi[j]);
    }
    if extra > 0 {
        let s = ridge.sqrt();
        for k in 0..n {
            scaled[(rows + k, k)] = s;
        }
    }

    let total_rows = rows + extra;
    let (small, small_rhs) = if total_rows >= n {
        let qr = scaled.qr();
        qr.q_tr_mul(&mut rhs);
        (qr.r(), rhs.rows(0, n).into_owned())
    } else {
        (scaled, rhs)
    };
    let svd = small.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * f64::EPSILON * total_rows.max(n) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let q_star = if sigma_max > 0.0 {
        svd.solve(&small_rhs, tol).expect("SVD computed with both factors")
    } else {
        DVector::zeros(n)
    };
    let fitted = design.values(&q_star);
    QStarResult {
        fstar: weighted_sum_sq(&fitted, data),
        rank_ok: rank == n,
        rank,
        q_star,
        fitted,
    }
}

/// Minimiser of χ² over `q` at fixed `p`, with optional Tikhonov term `ridge·‖q‖²`.
///
/// Rank deficiency is reported through `rank_ok`; use [`ReducedProblem`] to
/// turn it into an error.
pub fn solve_qstar(model: &dyn SeparableModel, p: &[f64], data: &DataSet, ridge: f64) -> Result<QStarResult> {
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let design = DesignMatrix::build(model, p, data.t())?;
    Ok(solve_design(&design, data, ridge))
}

/// `F*(p)`.
pub fn reduced_chisq(model: &dyn SeparableModel, p: &[f64], data: &DataSet) -> Result<f64> {
    Ok(solve_qstar(model, p, data, 0.0)?.fstar)
}

/// A model and dataset viewed as a function of the nonlinear parameters only.
#[derive(Clone, Copy)]
pub struct ReducedProblem<'a> {
    pub model: &'a dyn SeparableModel,
    pub data: &'a DataSet,
    pub ridge: f64,
    pub rank_policy: RankPolicy,
}

impl<'a> ReducedProblem<'a> {
    pub fn new(model: &'a dyn SeparableModel, data: &'a DataSet) -> Self {
        Self {
            model,
            data,
            ridge: 0.0,
            rank_policy: RankPolicy::MinimumNorm,
        }
    }

    pub fn with_rank_policy(mut self, policy: RankPolicy) -> Self {
        self.rank_policy = policy;
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn nonlinear_dim(&self) -> usize {
        self.model.nonlinear_dim()
    }

    /// `q*(p)`, honouring the rank policy.
    pub fn qstar(&self, p: &[f64]) -> Result<QStarResult> {
        check_p(self.model, p)?;
        let result = solve_qstar(self.model, p, self.data, self.ridge)?;
        if !result.rank_ok && self.rank_policy == RankPolicy::Strict {
            return Err(Error::RankDeficient {
                rank: result.rank,
                columns: result.q_star.len(),
                probe: None,
            });
        }
        Ok(result)
    }

    pub fn fstar(&self, p: &[f64]) -> Result<f64> {
        Ok(self.qstar(p)?.fstar)
    }
}
