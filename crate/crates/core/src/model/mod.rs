//! Separable models `f(t) = Σₙ qₙ φₙ(p, t) + ψ(p, t)`, datasets and the χ² objective.
//!
//! A model only has to say how to evaluate its basis functions `φₙ` and its
//! offset `ψ` at a single sample point. Everything else in the crate (the
//! linear solve, the shortcut derivatives, both optimizers) is written
//! against the [`SeparableModel`] trait object.

mod builtin;

pub use builtin::{
    CustomModel, ExpSin, GaussFree, GaussTrain, ModelRegistry, ModelSpec, PeakList, PeakSpec, Role, ThreePeakBackground,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model that is linear in `q` and (possibly) nonlinear in `p`.
///
/// Implementations must be pure: the basis and offset depend on `(p, t)` only.
pub trait SeparableModel: Send + Sync {
    fn name(&self) -> &str;

    /// Number of nonlinear parameters `M`.
    fn nonlinear_dim(&self) -> usize;

    /// Number of linear parameters `N`.
    fn linear_dim(&self) -> usize;

    /// Writes `φ₁(p, t) … φ_N(p, t)` into `phi` (length `N`).
    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]);

    /// The offset `ψ(p, t)`. Zero unless the model overrides it.
    fn offset(&self, _p: &[f64], _t: f64) -> f64 {
        0.0
    }
}

/// Sample points, measurements and positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    t: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

/// How weights are assigned when a dataset is built from `(t, y)` only.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightPolicy {
    #[default]
    Uniform,
    /// `w = 1/y`; every `y` must be strictly positive.
    InverseY,
    Explicit(Vec<f64>),
}

impl DataSet {
    pub fn new(t: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::InvalidData("dataset has no points".into()));
        }
        if y.len() != t.len() {
            return Err(Error::Dimension {
                what: "measurements",
                expected: t.len(),
                got: y.len(),
            });
        }
        if w.len() != t.len() {
            return Err(Error::Dimension {
                what: "weights",
                expected: t.len(),
                got: w.len(),
            });
        }
        for (j, ((&tj, &yj), &wj)) in t.iter().zip(&y).zip(&w).enumerate() {
            if !(tj.is_finite() && yj.is_finite() && wj.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite entry at point {j}")));
            }
            if wj <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "weight at point {j} is {wj}, weights must be positive"
                )));
            }
        }
        Ok(Self { t, y, w })
    }

    /// Dataset with all weights equal to one.
    pub fn uniform(t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let w = vec![1.0; t.len()];
        Self::new(t, y, w)
    }

    pub fn with_policy(t: Vec<f64>, y: Vec<f64>, policy: WeightPolicy) -> Result<Self> {
        let w = match policy {
            WeightPolicy::Uniform => vec![1.0; t.len()],
            WeightPolicy::InverseY => y
                .iter()
                .enumerate()
                .map(|(j, &yj)| {
                    if yj > 0.0 {
                        Ok(1.0 / yj)
                    } else {
                        Err(Error::InvalidData(format!(
                            "inverse-y weights need y > 0, point {j} has y = {yj}"
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            WeightPolicy::Explicit(w) => w,
        };
        Self::new(t, y, w)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Same points and weights with new measurements.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.t.clone(), y, self.w.clone())
    }
}

/// Nonlinear parameters `p` and linear parameters `q`, kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSplit {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl ParamSplit {
    pub fn new(p: &[f64], q: &[f64]) -> Self {
        Self {
            p: DVector::from_column_slice(p),
            q: DVector::from_column_slice(q),
        }
    }

    pub fn check(&self, model: &dyn SeparableModel) -> Result<()> {
        check_p(model, self.p.as_slice())?;
        if self.q.len() != model.linear_dim() {
            return Err(Error::Dimension {
                what: "linear parameters",
                expected: model.linear_dim(),
                got: self.q.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_p(model: &dyn SeparableModel, p: &[f64]) -> Result<()> {
    if p.len() != model.nonlinear_dim() {
        return Err(Error::Dimension {
            what: "nonlinear parameters",
            expected: model.nonlinear_dim(),
            got: p.len(),
        });
    }
    Ok(())
}

/// Basis values `φ` and offset `ψ` at a single point.
pub fn design_row(model: &dyn SeparableModel, p: &[f64], t: f64) -> Result<(DVector<f64>, f64)> {
    check_p(model, p)?;
    let mut phi = DVector::zeros(model.linear_dim());
    let psi = row_into(model, p, t, phi.as_mut_slice())?;
    Ok((phi, psi))
}

fn row_into(model: &dyn SeparableModel, p: &[f64], t: f64, phi: &mut [f64]) -> Result<f64> {
    model.basis(p, t, phi);
    if let Some(n) = phi.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain {
            model: model.name().to_string(),
            basis: Some(n),
            t,
            value: phi[n],
        });
    }
    let psi = model.offset(p, t);
    if !psi.is_finite() {
        return Err(Error::Domain {
            model: model.name().to_string(),
            basis: None,
            t,
            value: psi,
        });
    }
    Ok(psi)
}

/// `f(t) = q·φ(p, t) + ψ(p, t)`.
pub fn eval_model(model: &dyn SeparableModel, params: &ParamSplit, t: f64) -> Result<f64> {
    params.check(model)?;
    let (phi, psi) = design_row(model, params.p.as_slice(), t)?;
    Ok(params.q.dot(&phi) + psi)
}

/// Basis values for a whole set of sample points: `phi` is `T × N`, `psi` has length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub phi: DMatrix<f64>,
    pub psi: DVector<f64>,
}

impl DesignMatrix {
    pub fn build(model: &dyn SeparableModel, p: &[f64], ts: &[f64]) -> Result<Self> {
        check_p(model, p)?;
        let n = model.linear_dim();
        let mut phi = DMatrix::zeros(ts.len(), n);
        let mut psi = DVector::zeros(ts.len());
        let mut row = vec![0.0; n];
        for (j, &t) in ts.iter().enumerate() {
            psi[j] = row_into(model, p, t, &mut row)?;
            for (k, &v) in row.iter().enumerate() {
                phi[(j, k)] = v;
            }
        }
        Ok(Self { phi, psi })
    }

    /// Model values `Φ q + ψ` at every sample point.
    pub fn values(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.phi * q + &self.psi
    }
}

/// `Σₜ (f(t) − yₜ)² wₜ`.
pub fn chi_squared(model: &dyn SeparableModel, params: &ParamSplit, data: &DataSet) -> Result<f64> {
    params.check(model)?;
    let design = DesignMatrix::build(model, params.p.as_slice(), data.t())?;
    Ok(weighted_sum_sq(&design.values(&params.q), data))
}

pub(crate) fn weighted_sum_sq(values: &DVector<f64>, data: &DataSet) -> f64 {
    values
        .iter()
        .zip(data.y())
        .zip(data.w())
        .map(|((f, y), w)| (f - y) * (f - y) * w)
        .sum()
}
