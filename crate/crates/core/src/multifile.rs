//! Simultaneous fits of several data files that share the nonlinear
//! parameters `p` while each file keeps its own linear block `q⁽ᵏ⁾`.
//!
//! The objective is `Φ(p, q⁽¹⁾, …, q⁽ᴷ⁾) = Σₖ χ²ₖ(p, q⁽ᵏ⁾)`. Since `q⁽ᵏ⁾` appears
//! in one summand only, eliminating the linear parameters splits into `K`
//! independent least-squares solves, and `Φ*(p)` is the sum of the per-file
//! reduced objectives.
//!
//! [`concat_classical`] builds the equivalent single-file problem with all
//! `M + Σ Nₖ` parameters, used for the classical comparison.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_from, stencil_hessian, CovarianceEstimate};
use crate::error::{Error, Result};
use crate::linear::{QStarResult, RankPolicy, ReducedProblem};
use crate::model::{check_p, DataSet, SeparableModel};
use crate::optimizer::{
    lm_fit_classical, run_lm, weight_rows, weighted_residual, Counts, Evaluated, FitOptions, FitReport, LmProblem, Mode,
};
use crate::shortcut::{shortcut_gradient, shortcut_model_jacobian_with, StepScheme};

#[derive(Clone)]
pub struct FileEntry {
    pub model: Arc<dyn SeparableModel>,
    pub data: DataSet,
}

/// `K ≥ 1` files sharing `M` nonlinear parameters.
#[derive(Clone)]
pub struct MultiFileProblem {
    files: Vec<FileEntry>,
    rank_policy: RankPolicy,
    ridge: f64,
    parallel: bool,
}

impl MultiFileProblem {
    pub fn new(files: Vec<FileEntry>) -> Result<Self> {
        let first = files
            .first()
            .ok_or_else(|| Error::InvalidData("a multi-file problem needs at least one file".into()))?;
        let m = first.model.nonlinear_dim();
        for (k, f) in files.iter().enumerate() {
            if f.model.nonlinear_dim() != m {
                return Err(Error::Dimension {
                    what: "shared nonlinear parameters",
                    expected: m,
                    got: f.model.nonlinear_dim(),
                }
                .in_file(k));
            }
        }
        Ok(Self {
            files,
            rank_policy: RankPolicy::default(),
            ridge: 0.0,
            parallel: true,
        })
    }

    /// Every file fitted with the same model.
    pub fn shared(model: Arc<dyn SeparableModel>, datasets: Vec<DataSet>) -> Result<Self> {
        Self::new(
            datasets
                .into_iter()
                .map(|data| FileEntry {
                    model: Arc::clone(&model),
                    data,
                })
                .collect(),
        )
    }

    pub fn with_rank_policy(mut self, policy: RankPolicy) -> Self {
        self.rank_policy = policy;
        self
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    /// Solve files on the rayon pool (default) or sequentially.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn nonlinear_dim(&self) -> usize {
        self.files[0].model.nonlinear_dim()
    }

    pub fn linear_dims(&self) -> Vec<usize> {
        self.files.iter().map(|f| f.model.linear_dim()).collect()
    }

    pub fn total_points(&self) -> usize {
        self.files.iter().map(|f| f.data.len()).sum()
    }

    fn reduced(&self, k: usize) -> ReducedProblem<'_> {
        let f = &self.files[k];
        ReducedProblem::new(f.model.as_ref(), &f.data)
            .with_rank_policy(self.rank_policy)
            .with_ridge(self.ridge)
    }

    /// Runs `op` for every file, in parallel if enabled, tagging errors with the file index.
    fn per_file<T: Send>(&self, op: impl Fn(usize, ReducedProblem<'_>) -> Result<T> + Sync) -> Result<Vec<T>> {
        let run = |k: usize| op(k, self.reduced(k)).map_err(|e| e.in_file(k));
        if self.parallel {
            (0..self.len()).into_par_iter().map(run).collect()
        } else {
            (0..self.len()).map(run).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiQStar {
    pub q_blocks: Vec<Vec<f64>>,
    /// `χ²ₖ(p, q⁽ᵏ⁾*)`.
    pub per_file: Vec<f64>,
    pub phi_star: f64,
}

/// Independent `q⁽ᵏ⁾*` solves and `Φ*(p)`.
pub fn multifile_qstar(problem: &MultiFileProblem, p: &[f64]) -> Result<MultiQStar> {
    let solved = problem.per_file(|_, r| r.qstar(p))?;
    Ok(summarize(&solved))
}

fn summarize(solved: &[QStarResult]) -> MultiQStar {
    let per_file: Vec<f64> = solved.iter().map(|r| r.fstar).collect();
    MultiQStar {
        q_blocks: solved.iter().map(|r| r.q_star.as_slice().to_vec()).collect(),
        phi_star: per_file.iter().sum(),
        per_file,
    }
}

/// `∇Φ*(p)` as the sum of the per-file shortcut gradients.
pub fn multifile_gradient(problem: &MultiFileProblem, p: &[f64], steps: &StepScheme) -> Result<DVector<f64>> {
    let parts = problem.per_file(|_, r| shortcut_gradient(&r, p, steps))?;
    Ok(parts.into_iter().fold(DVector::zeros(p.len()), |acc, g| acc + g))
}

/// Covariance of the shared parameters from second differences of `Φ*`.
///
/// The residual degrees of freedom are `Σ Tₖ − M − Σ Nₖ`.
pub fn multifile_covariance(problem: &MultiFileProblem, p_opt: &[f64], delta: f64) -> Result<CovarianceEstimate> {
    let reduced = stencil_hessian(|p| multifile_qstar(problem, p).map(|r| r.phi_star), p_opt, delta)?;
    let phi = multifile_qstar(problem, p_opt)?.phi_star;
    let params = p_opt.len() + problem.linear_dims().iter().sum::<usize>();
    estimate_from(&reduced, phi, problem.total_points() as isize - params as isize)
}

/// A fit report with the linear parameters split by file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiFitReport {
    #[serde(flatten)]
    pub fit: FitReport,
    pub q_blocks: Vec<Vec<f64>>,
    pub per_file_chisq: Vec<f64>,
}

struct MultiShortcut<'a> {
    problem: &'a MultiFileProblem,
    steps: &'a StepScheme,
}

fn stack_residuals(problem: &MultiFileProblem, solved: &[QStarResult]) -> DVector<f64> {
    let parts: Vec<f64> = solved
        .iter()
        .zip(&problem.files)
        .flat_map(|(r, f)| {
            weighted_residual(&r.fitted, &f.data)
                .iter()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    DVector::from_vec(parts)
}

impl LmProblem for MultiShortcut<'_> {
    type State = Vec<QStarResult>;

    fn evaluate(&self, p: &[f64], counts: &mut Counts) -> Result<Evaluated<Vec<QStarResult>>> {
        counts.qstar_solves += self.problem.len() as u64;
        counts.model_evals += self.problem.total_points() as u64;
        let solved = self.problem.per_file(|_, r| r.qstar(p))?;
        Ok(Evaluated {
            residual: stack_residuals(self.problem, &solved),
            objective: solved.iter().map(|r| r.fstar).sum(),
            state: solved,
        })
    }

    fn jacobian(&self, p: &[f64], _at: &Evaluated<Vec<QStarResult>>, counts: &mut Counts) -> Result<DMatrix<f64>> {
        let blocks = self.problem.per_file(|k, r| {
            let sj = shortcut_model_jacobian_with(&r, p, self.steps, false)?;
            let mut j = sj.j;
            weight_rows(&mut j, &self.problem.files[k].data);
            Ok((j, sj.evals))
        })?;
        let mut out = DMatrix::zeros(self.problem.total_points(), p.len());
        let mut row = 0;
        for ((j, evals), f) in blocks.into_iter().zip(&self.problem.files) {
            counts.qstar_solves += evals as u64;
            counts.model_evals += (evals * f.data.len()) as u64;
            out.view_mut((row, 0), (j.nrows(), j.ncols())).copy_from(&j);
            row += j.nrows();
        }
        Ok(out)
    }
}

/// LM on `Φ*(p)` over the shared parameters only.
///
/// `options.rank_policy` and `options.ridge` override the problem's settings;
/// `options.mode` is ignored (see [`multifile_fit_classical`]).
pub fn multifile_fit(problem: &MultiFileProblem, p_init: &[f64], options: &FitOptions) -> Result<MultiFitReport> {
    check_p(problem.files[0].model.as_ref(), p_init)?;
    let problem = problem
        .clone()
        .with_rank_policy(options.rank_policy)
        .with_ridge(options.ridge);
    let lm = MultiShortcut {
        problem: &problem,
        steps: &options.steps,
    };
    let out = run_lm(&lm, p_init, options)?;
    let summary = summarize(&out.best.state);
    Ok(MultiFitReport {
        fit: FitReport {
            mode: Mode::Shortcut,
            p_opt: out.x,
            q_opt: summary.q_blocks.concat(),
            chisq: out.best.objective,
            iterations: out.iterations,
            accepted_steps: out.accepted,
            jacobian_evals: out.counts.jacobian_evals,
            model_evals: out.counts.model_evals,
            qstar_solves: out.counts.qstar_solves,
            converged: out.termination.converged(),
            termination: out.termination,
            covariance: None,
            stderr: None,
        },
        q_blocks: summary.q_blocks,
        per_file_chisq: summary.per_file,
    })
}

/// Index correspondence between the concatenated parameter vector
/// `(p, q⁽¹⁾, …, q⁽ᴷ⁾)` and the per-file blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingMap {
    pub shared: usize,
    /// Range of each `q⁽ᵏ⁾` inside the concatenated linear vector.
    pub blocks: Vec<Range<usize>>,
}

impl PackingMap {
    pub fn total(&self) -> usize {
        self.shared + self.linear_len()
    }

    pub fn linear_len(&self) -> usize {
        self.blocks.last().map_or(0, |r| r.end)
    }

    pub fn pack(&self, p: &[f64], q_blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
        if p.len() != self.shared {
            return Err(Error::Dimension {
                what: "shared parameters",
                expected: self.shared,
                got: p.len(),
            });
        }
        if q_blocks.len() != self.blocks.len() {
            return Err(Error::Dimension {
                what: "linear blocks",
                expected: self.blocks.len(),
                got: q_blocks.len(),
            });
        }
        let mut x = p.to_vec();
        for (k, (q, r)) in q_blocks.iter().zip(&self.blocks).enumerate() {
            if q.len() != r.len() {
                return Err(Error::Dimension {
                    what: "linear parameters",
                    expected: r.len(),
                    got: q.len(),
                }
                .in_file(k));
            }
            x.extend_from_slice(q);
        }
        Ok(x)
    }

    /// Splits a concatenated vector into `(p, q-blocks)`.
    pub fn unpack(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if x.len() != self.total() {
            return Err(Error::Dimension {
                what: "packed parameters",
                expected: self.total(),
                got: x.len(),
            });
        }
        let (p, q) = x.split_at(self.shared);
        Ok((p.to_vec(), self.blocks.iter().map(|r| q[r.clone()].to_vec()).collect()))
    }
}

struct Segment {
    model: Arc<dyn SeparableModel>,
    shift: f64,
    columns: Range<usize>,
}

/// The files placed side by side on one `t` axis.
///
/// File `k` is translated by a shift that leaves a unit gap after the
/// previous file; a sample point belongs to the file whose translated range
/// is nearest.
pub struct ConcatModel {
    segments: Vec<Segment>,
    /// Midpoints of the gaps between consecutive translated ranges.
    boundaries: Vec<f64>,
    shared: usize,
    linear: usize,
}

impl ConcatModel {
    fn segment(&self, t: f64) -> &Segment {
        let k = self.boundaries.partition_point(|&b| b <= t);
        &self.segments[k]
    }
}

impl SeparableModel for ConcatModel {
    fn name(&self) -> &str {
        "concatenated"
    }

    fn nonlinear_dim(&self) -> usize {
        self.shared
    }

    fn linear_dim(&self) -> usize {
        self.linear
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        phi.fill(0.0);
        let s = self.segment(t);
        s.model.basis(p, t - s.shift, &mut phi[s.columns.clone()]);
    }

    fn offset(&self, p: &[f64], t: f64) -> f64 {
        let s = self.segment(t);
        s.model.offset(p, t - s.shift)
    }
}

pub struct Concatenated {
    pub model: ConcatModel,
    pub data: DataSet,
    pub packing: PackingMap,
}

/// Single-file equivalent of `problem`: its χ² at packed parameters is `Φ`.
pub fn concat_classical(problem: &MultiFileProblem) -> Result<Concatenated> {
    let mut segments = Vec::with_capacity(problem.len());
    let mut boundaries = Vec::new();
    let mut blocks = Vec::with_capacity(problem.len());
    let (mut t, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    let mut column = 0;
    let mut end_prev = f64::NEG_INFINITY;
    for (k, f) in problem.files.iter().enumerate() {
        let ts = f.data.t();
        let lo = ts.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shift = if k == 0 { 0.0 } else { end_prev + 1.0 - lo };
        if k > 0 {
            boundaries.push(end_prev + 0.5);
        }
        end_prev = hi + shift;
        let n = f.model.linear_dim();
        blocks.push(column..column + n);
        segments.push(Segment {
            model: Arc::clone(&f.model),
            shift,
            columns: column..column + n,
        });
        column += n;
        t.extend(ts.iter().map(|&v| v + shift));
        y.extend_from_slice(f.data.y());
        w.extend_from_slice(f.data.w());
    }
    let model = ConcatModel {
        segments,
        boundaries,
        shared: problem.nonlinear_dim(),
        linear: column,
    };
    // every translated sample must land back in its own file
    let mut cursor = 0;
    for (k, f) in problem.files.iter().enumerate() {
        for &ti in &t[cursor..cursor + f.data.len()] {
            if model.boundaries.partition_point(|&b| b <= ti) != k {
                return Err(Error::InvalidData(format!("translated ranges overlap near t = {ti}")).in_file(k));
            }
        }
        cursor += f.data.len();
    }
    Ok(Concatenated {
        packing: PackingMap {
            shared: model.shared,
            blocks,
        },
        data: DataSet::new(t, y, w)?,
        model,
    })
}

/// Classical LM on the concatenated problem, all `M + Σ Nₖ` parameters at once.
///
/// Without `q_init` the start is completed with `q⁽ᵏ⁾*(p_init)`.
pub fn multifile_fit_classical(
    problem: &MultiFileProblem,
    p_init: &[f64],
    q_init: Option<&[Vec<f64>]>,
    options: &FitOptions,
) -> Result<MultiFitReport> {
    let concat = concat_classical(problem)?;
    let q0 = match q_init {
        Some(q) => concat.packing.pack(p_init, q)?[p_init.len()..].to_vec(),
        None => {
            let solved = problem
                .clone()
                .with_rank_policy(options.rank_policy)
                .with_ridge(options.ridge);
            multifile_qstar(&solved, p_init)?.q_blocks.concat()
        }
    };
    let mut fit = lm_fit_classical(&concat.model, &concat.data, p_init, Some(&q0), options)?;
    if q_init.is_none() {
        fit.qstar_solves = problem.len() as u64;
        fit.model_evals += problem.total_points() as u64;
    }
    let (_, q_blocks) = concat
        .packing
        .unpack(&[fit.p_opt.as_slice(), fit.q_opt.as_slice()].concat())?;
    let per_file_chisq = problem
        .files
        .iter()
        .zip(&q_blocks)
        .map(|(f, q)| {
            crate::model::chi_squared(f.model.as_ref(), &crate::model::ParamSplit::new(&fit.p_opt, q), &f.data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiFitReport {
        fit,
        q_blocks,
        per_file_chisq,
    })
}
