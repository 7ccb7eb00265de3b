//! Seeded synthetic data and the numerical experiments: χ² slices, basin
//! maps, the peak-train scaling sweep and the multi-file sweep.
//!
//! Random numbers come from ChaCha8 (`rand_chacha` 0.9) seeded with
//! `seed_from_u64`. A uniform draw on `[0, 1)` is `(next_u64() >> 11) · 2⁻⁵³`,
//! so a dataset is fixed by its scenario and seed alone. File `k` of a
//! multi-file scenario uses stream `k` of the same seed.

use std::io::{self, Write};
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::ReducedProblem;
use crate::model::{chi_squared, eval_model, DataSet, ModelSpec, ParamSplit, SeparableModel};
use crate::multifile::{multifile_fit, multifile_fit_classical, MultiFileProblem};
use crate::optimizer::{lm_fit, lm_fit_classical, FitOptions, FitReport, Mode};

/// Name of the generator recorded in every output header and manifest.
pub const GENERATOR: &str = "chacha8/rand_chacha-0.9/u53";

/// A uniform draw on `[0, 1)` with 53 random bits.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    None,
    /// `y = f · u` with `u ~ Uniform[1 − amplitude, 1 + amplitude]`.
    UniformMultiplicative { amplitude: f64 },
}

/// Sample points `start, start + step, …` (`count` of them), or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeGrid {
    Range { start: f64, step: f64, count: usize },
    Explicit { values: Vec<f64> },
}

impl TimeGrid {
    pub fn points(&self) -> Vec<f64> {
        match self {
            // multiply rather than accumulate so the grid has no drift
            TimeGrid::Range { start, step, count } => (0..*count).map(|i| start + step * i as f64).collect(),
            TimeGrid::Explicit { values } => values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub grid: TimeGrid,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    /// Exponential plus sine, `p = (20, 5)`, `q = (6, 1)`, `t = 1..100`, no noise.
    pub fn exp_sin() -> Self {
        Self {
            model: ModelSpec::ExpSin {},
            p: vec![20.0, 5.0],
            q: vec![6.0, 1.0],
            grid: TimeGrid::Range {
                start: 1.0,
                step: 1.0,
                count: 100,
            },
            noise: NoiseSpec::None,
            seed: 0,
        }
    }

    /// `n` unit-height peaks of width 5 plus the variable-width peak at the
    /// origin (`p₁ = 2`), sampled every 0.1 on `[0, n + 1]` with ±30% noise.
    pub fn gauss_train(n: usize, seed: u64) -> Self {
        Self {
            model: ModelSpec::GaussTrain {
                n,
                width: crate::model::GaussTrain::DEFAULT_WIDTH,
            },
            p: vec![2.0],
            q: vec![1.0; n],
            grid: TimeGrid::Range {
                start: 0.0,
                step: 0.1,
                count: 10 * (n + 1) + 1,
            },
            noise: NoiseSpec::UniformMultiplicative { amplitude: 0.3 },
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build_model(&self) -> Result<std::sync::Arc<dyn SeparableModel>> {
        self.model.build()
    }
}

fn noisy_values(
    model: &dyn SeparableModel,
    params: &ParamSplit,
    t: &[f64],
    noise: NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if let NoiseSpec::UniformMultiplicative { amplitude } = noise {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::Config(format!(
                "noise amplitude must lie in [0, 1), got {amplitude}"
            )));
        }
    }
    t.iter()
        .map(|&ti| {
            let f = eval_model(model, params, ti)?;
            Ok(match noise {
                NoiseSpec::None => f,
                NoiseSpec::UniformMultiplicative { amplitude } => {
                    let u = 1.0 - amplitude + 2.0 * amplitude * uniform01(rng);
                    f * u
                }
            })
        })
        .collect()
}

/// Deterministic dataset for `scenario` with unit weights.
pub fn generate_synthetic(scenario: &Scenario) -> Result<DataSet> {
    let model = scenario.build_model()?;
    let params = ParamSplit::new(&scenario.p, &scenario.q);
    params.check(model.as_ref())?;
    let t = scenario.grid.points();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let y = noisy_values(model.as_ref(), &params, &t, scenario.noise, &mut rng)?;
    DataSet::uniform(t, y)
}

/// Shared peaks, per-file heights: file `k` (from 0) has linear parameters
/// `(h₁, h₂, h₃)·(1 + growth·k)` followed by the background `(slope, intercept)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiFileScenario {
    /// Scenario format version.
    pub version: u32,
    /// `(c₁, c₂, c₃, w₁, w₂, w₃)`.
    pub p: Vec<f64>,
    pub heights: [f64; 3],
    pub growth: f64,
    pub background: [f64; 2],
    pub grid: TimeGrid,
    pub noise: NoiseSpec,
    pub files: usize,
    pub seed: u64,
    /// Relative perturbation applied to `p` for the starting point, alternating in sign.
    pub start_perturbation: f64,
}

impl MultiFileScenario {
    pub fn linear_params(&self, k: usize) -> Vec<f64> {
        let s = 1.0 + self.growth * k as f64;
        let mut q: Vec<f64> = self.heights.iter().map(|h| h * s).collect();
        q.extend_from_slice(&self.background);
        q
    }

    pub fn with_files(&self, files: usize) -> Self {
        Self { files, ..self.clone() }
    }

    /// `p` with each entry scaled by `1 ± start_perturbation`.
    pub fn p_init(&self) -> Vec<f64> {
        self.p
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v * if i % 2 == 0 {
                    1.0 + self.start_perturbation
                } else {
                    1.0 - self.start_perturbation
                }
            })
            .collect()
    }
}

pub fn generate_files(scenario: &MultiFileScenario) -> Result<Vec<DataSet>> {
    let model = crate::model::ThreePeakBackground;
    let t = scenario.grid.points();
    (0..scenario.files)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            rng.set_stream(k as u64);
            let q = scenario.linear_params(k);
            let y = noisy_values(&model, &ParamSplit::new(&scenario.p, &q), &t, scenario.noise, &mut rng)?;
            DataSet::uniform(t.clone(), y)
        })
        .collect()
}

pub fn multifile_problem(scenario: &MultiFileScenario) -> Result<MultiFileProblem> {
    MultiFileProblem::shared(
        std::sync::Arc::new(crate::model::ThreePeakBackground),
        generate_files(scenario)?,
    )
}

/// `count` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SliceMode {
    /// `χ²(p, q_ref)` with the linear parameters held fixed.
    Frozen { q_ref: Vec<f64> },
    /// `F*(p)`.
    Reoptimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub value: f64,
    pub chisq: f64,
}

/// χ² along one coordinate of `p_base`, the others held at their base values.
pub fn slice_scan(
    model: &dyn SeparableModel,
    data: &DataSet,
    p_base: &[f64],
    sweep: Sweep,
    mode: &SliceMode,
) -> Result<Vec<SlicePoint>> {
    if sweep.index >= p_base.len() {
        return Err(Error::Dimension {
            what: "sweep index",
            expected: p_base.len(),
            got: sweep.index,
        });
    }
    let reduced = ReducedProblem::new(model, data);
    linspace(sweep.lo, sweep.hi, sweep.count)
        .into_iter()
        .map(|value| {
            let mut p = p_base.to_vec();
            p[sweep.index] = value;
            let chisq = match mode {
                SliceMode::Frozen { q_ref } => chi_squared(model, &ParamSplit::new(&p, q_ref), data)?,
                SliceMode::Reoptimized => reduced.fstar(&p)?,
            };
            Ok(SlicePoint { value, chisq })
        })
        .collect()
}

/// Grid point with the smallest χ².
pub fn argmin(curve: &[SlicePoint]) -> Option<SlicePoint> {
    curve.iter().copied().min_by(|a, b| a.chisq.total_cmp(&b.chisq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Both,
    ShortcutOnly,
    ClassicalOnly,
    Neither,
}

impl Outcome {
    fn classify(shortcut: bool, classical: bool) -> Self {
        match (shortcut, classical) {
            (true, true) => Outcome::Both,
            (true, false) => Outcome::ShortcutOnly,
            (false, true) => Outcome::ClassicalOnly,
            (false, false) => Outcome::Neither,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Both => "both",
            Outcome::ShortcutOnly => "shortcut-only",
            Outcome::ClassicalOnly => "classical-only",
            Outcome::Neither => "neither",
        }
    }

    fn gray(self) -> u8 {
        match self {
            Outcome::Both => 0,
            Outcome::ShortcutOnly => 128,
            Outcome::ClassicalOnly => 192,
            Outcome::Neither => 255,
        }
    }
}

/// A rectangle of starting points `(p₁, p₂)`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinSpec {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub n1: usize,
    pub n2: usize,
    /// A run succeeds when `‖p_opt − p_true‖∞` is at most this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    0.05
}

impl Default for BasinSpec {
    fn default() -> Self {
        Self {
            p1: (10.0, 30.0),
            p2: (2.5, 7.5),
            n1: 21,
            n2: 21,
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub success: bool,
    pub converged: bool,
    pub p_opt: Option<Vec<f64>>,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinCell {
    pub i1: usize,
    pub i2: usize,
    pub p1: f64,
    pub p2: f64,
    pub outcome: Outcome,
    pub shortcut: RunSummary,
    pub classical: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BasinCounts {
    pub both: usize,
    pub shortcut_only: usize,
    pub classical_only: usize,
    pub neither: usize,
}

impl BasinCounts {
    pub fn shortcut_successes(&self) -> usize {
        self.both + self.shortcut_only
    }

    pub fn classical_successes(&self) -> usize {
        self.both + self.classical_only
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinGrid {
    pub spec: BasinSpec,
    /// Row-major in `p₂` then `p₁`: cell `(i1, i2)` is at `i2 * n1 + i1`.
    pub cells: Vec<BasinCell>,
    pub counts: BasinCounts,
}

fn summarize_run(result: Result<FitReport>, p_true: &[f64], tolerance: f64) -> RunSummary {
    match result {
        Ok(r) => {
            let dist = r
                .p_opt
                .iter()
                .zip(p_true)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            RunSummary {
                success: dist <= tolerance,
                converged: r.converged,
                iterations: r.iterations,
                p_opt: Some(r.p_opt),
                error: None,
            }
        }
        Err(e) => RunSummary {
            success: false,
            converged: false,
            p_opt: None,
            iterations: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Runs both modes from every grid point of a two-parameter model.
///
/// The classical run starts from `(p₁, p₂, q*(p₁, p₂))`. Failures are
/// recorded in the cell and never abort the sweep.
pub fn basin_map(
    model: &dyn SeparableModel,
    data: &DataSet,
    p_true: &[f64],
    spec: &BasinSpec,
    options: &FitOptions,
    parallel: bool,
) -> Result<BasinGrid> {
    if model.nonlinear_dim() != 2 || p_true.len() != 2 {
        return Err(Error::Dimension {
            what: "basin map nonlinear parameters",
            expected: 2,
            got: model.nonlinear_dim(),
        });
    }
    options.validate()?;
    let xs = linspace(spec.p1.0, spec.p1.1, spec.n1);
    let ys = linspace(spec.p2.0, spec.p2.1, spec.n2);
    let run = |idx: usize| {
        let (i1, i2) = (idx % spec.n1, idx / spec.n1);
        let p0 = [xs[i1], ys[i2]];
        let shortcut = summarize_run(lm_fit(model, data, &p0, options), p_true, spec.tolerance);
        let classical = summarize_run(
            lm_fit_classical(model, data, &p0, None, options),
            p_true,
            spec.tolerance,
        );
        BasinCell {
            i1,
            i2,
            p1: p0[0],
            p2: p0[1],
            outcome: Outcome::classify(shortcut.success, classical.success),
            shortcut,
            classical,
        }
    };
    let total = spec.n1 * spec.n2;
    let cells: Vec<BasinCell> = if parallel {
        (0..total).into_par_iter().map(run).collect()
    } else {
        (0..total).map(run).collect()
    };
    let mut counts = BasinCounts::default();
    for c in &cells {
        match c.outcome {
            Outcome::Both => counts.both += 1,
            Outcome::ShortcutOnly => counts.shortcut_only += 1,
            Outcome::ClassicalOnly => counts.classical_only += 1,
            Outcome::Neither => counts.neither += 1,
        }
    }
    Ok(BasinGrid {
        spec: *spec,
        cells,
        counts,
    })
}

/// Comment lines naming the seed and generator, for CSV headers.
pub fn provenance_header(seed: u64) -> String {
    format!(
        "# sepfit {}\n# generator = {GENERATOR}\n# seed = {seed}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_curve_csv(out: &mut impl Write, seed: u64, curve: &[SlicePoint]) -> io::Result<()> {
    out.write_all(provenance_header(seed).as_bytes())?;
    writeln!(out, "value,chisq")?;
    for pt in curve {
        writeln!(out, "{},{}", num(pt.value), num(pt.chisq))?;
    }
    Ok(())
}

pub fn write_basin_csv(out: &mut impl Write, seed: u64, grid: &BasinGrid) -> io::Result<()> {
    out.write_all(provenance_header(seed).as_bytes())?;
    writeln!(out, "i1,i2,p1,p2,outcome,shortcut_iterations,classical_iterations")?;
    for c in &grid.cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.i1,
            c.i2,
            num(c.p1),
            num(c.p2),
            c.outcome.as_str(),
            c.shortcut.iterations,
            c.classical.iterations
        )?;
    }
    Ok(())
}

/// Plain (P2) graymap, one pixel per cell, `p₂` increasing upwards.
/// Black: both, mid gray: shortcut only, light gray: classical only, white: neither.
pub fn write_basin_pgm(out: &mut impl Write, grid: &BasinGrid) -> io::Result<()> {
    let (n1, n2) = (grid.spec.n1, grid.spec.n2);
    writeln!(out, "P2\n{n1} {n2}\n255")?;
    for i2 in (0..n2).rev() {
        let row: Vec<String> = (0..n1)
            .map(|i1| grid.cells[i2 * n1 + i1].outcome.gray().to_string())
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub p_init: f64,
    pub seed: u64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            n_list: vec![5, 10, 20, 40, 60],
            repeats: 3,
            p_init: 2.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub mode: Mode,
    pub runs: usize,
    pub converged_runs: usize,
    /// Medians over the converged runs; `None` when no run converged.
    pub wall_time: Option<f64>,
    pub model_evals: Option<f64>,
    pub qstar_solves: Option<f64>,
    pub iterations: Option<f64>,
    pub accepted_steps: Option<f64>,
    /// Largest accepted-step count over all runs.
    pub max_accepted_steps: usize,
    /// `p₁` of each run, converged or not.
    pub p_opt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(wall_time)` against `ln N`.
    pub slope_shortcut: Option<f64>,
    pub slope_classical: Option<f64>,
}

impl ScalingTable {
    pub fn row(&self, n: usize, mode: Mode) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.n == n && r.mode == mode)
    }

    /// Classical over shortcut median model evaluations at `n`.
    pub fn eval_ratio(&self, n: usize) -> Option<f64> {
        Some(self.row(n, Mode::Classical)?.model_evals? / self.row(n, Mode::Shortcut)?.model_evals?)
    }

    /// Slope fitted over the given subset of `N` values only.
    pub fn slope_over(&self, mode: Mode, ns: &[usize]) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode && ns.contains(&r.n))
            .filter_map(|r| Some((r.n as f64, r.wall_time?)))
            .collect();
        log_log_slope(&pts)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Least-squares slope of `ln y` against `ln x`; needs two distinct `x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

struct Run {
    seconds: f64,
    report: Option<FitReport>,
}

fn scaling_row(n: usize, mode: Mode, runs: &[Run]) -> ScalingRow {
    let ok: Vec<&FitReport> = runs
        .iter()
        .filter_map(|r| r.report.as_ref())
        .filter(|r| r.converged)
        .collect();
    let med = |f: &dyn Fn(&FitReport) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    let times: Vec<f64> = runs
        .iter()
        .filter(|r| r.report.as_ref().is_some_and(|r| r.converged))
        .map(|r| r.seconds)
        .collect();
    ScalingRow {
        n,
        mode,
        runs: runs.len(),
        converged_runs: ok.len(),
        wall_time: median(&times),
        model_evals: med(&|r| r.model_evals as f64),
        qstar_solves: med(&|r| r.qstar_solves as f64),
        iterations: med(&|r| r.iterations as f64),
        accepted_steps: med(&|r| r.accepted_steps as f64),
        max_accepted_steps: runs
            .iter()
            .filter_map(|r| r.report.as_ref().map(|r| r.accepted_steps))
            .max()
            .unwrap_or(0),
        p_opt: runs
            .iter()
            .map(|r| r.report.as_ref().map_or(f64::NAN, |r| r.p_opt[0]))
            .collect(),
    }
}

/// Peak-train sweep over `spec.n_list`. Repeat `r` uses seed `spec.seed + r`.
///
/// Runs are sequential so that timings are not distorted by contention.
pub fn scaling_bench(spec: &ScalingSpec, options: &FitOptions) -> Result<ScalingTable> {
    if spec.n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("n_list must be strictly ascending".into()));
    }
    let mut rows = Vec::new();
    for &n in &spec.n_list {
        let mut shortcut = Vec::new();
        let mut classical = Vec::new();
        for r in 0..spec.repeats {
            let scenario = Scenario::gauss_train(n, spec.seed.wrapping_add(r as u64));
            let model = scenario.build_model()?;
            let data = generate_synthetic(&scenario)?;
            let p0 = [spec.p_init];
            let start = Instant::now();
            let report = lm_fit(model.as_ref(), &data, &p0, options).ok();
            shortcut.push(Run {
                seconds: start.elapsed().as_secs_f64(),
                report,
            });
            let start = Instant::now();
            let report = lm_fit_classical(model.as_ref(), &data, &p0, None, options).ok();
            classical.push(Run {
                seconds: start.elapsed().as_secs_f64(),
                report,
            });
        }
        rows.push(scaling_row(n, Mode::Shortcut, &shortcut));
        rows.push(scaling_row(n, Mode::Classical, &classical));
    }
    let mut table = ScalingTable {
        rows,
        slope_shortcut: None,
        slope_classical: None,
    };
    table.slope_shortcut = table.slope_over(Mode::Shortcut, &spec.n_list);
    table.slope_classical = table.slope_over(Mode::Classical, &spec.n_list);
    Ok(table)
}

pub fn write_scaling_csv(out: &mut impl Write, seed: u64, table: &ScalingTable) -> io::Result<()> {
    out.write_all(provenance_header(seed).as_bytes())?;
    writeln!(
        out,
        "n,mode,runs,converged_runs,wall_time,model_evals,qstar_solves,iterations,accepted_steps"
    )?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, num);
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.n,
            mode_name(r.mode),
            r.runs,
            r.converged_runs,
            opt(r.wall_time),
            opt(r.model_evals),
            opt(r.qstar_solves),
            opt(r.iterations),
            opt(r.accepted_steps)
        )?;
    }
    Ok(())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Shortcut => "shortcut",
        Mode::Classical => "classical",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSweepRow {
    pub files: usize,
    pub mode: Mode,
    pub wall_time: f64,
    pub model_evals: u64,
    pub qstar_solves: u64,
    pub iterations: usize,
    pub converged: bool,
    pub phi: f64,
    pub p_opt: Vec<f64>,
}

/// Both fits of the multi-file scenario for each file count in `k_list`.
pub fn multifile_sweep(
    scenario: &MultiFileScenario,
    k_list: &[usize],
    options: &FitOptions,
) -> Result<Vec<MultiSweepRow>> {
    let mut rows = Vec::new();
    for &k in k_list {
        let problem = multifile_problem(&scenario.with_files(k))?;
        let p0 = scenario.p_init();
        let start = Instant::now();
        let s = multifile_fit(&problem, &p0, options)?;
        let ts = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let c = multifile_fit_classical(&problem, &p0, None, options)?;
        let tc = start.elapsed().as_secs_f64();
        for (report, secs) in [(s.fit, ts), (c.fit, tc)] {
            rows.push(MultiSweepRow {
                files: k,
                mode: report.mode,
                wall_time: secs,
                model_evals: report.model_evals,
                qstar_solves: report.qstar_solves,
                iterations: report.iterations,
                converged: report.converged,
                phi: report.chisq,
                p_opt: report.p_opt,
            });
        }
    }
    Ok(rows)
}

pub fn write_multifile_csv(out: &mut impl Write, seed: u64, rows: &[MultiSweepRow]) -> io::Result<()> {
    out.write_all(provenance_header(seed).as_bytes())?;
    writeln!(
        out,
        "files,mode,wall_time,model_evals,qstar_solves,iterations,converged,phi"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.files,
            mode_name(r.mode),
            num(r.wall_time),
            r.model_evals,
            r.qstar_solves,
            r.iterations,
            r.converged,
            num(r.phi)
        )?;
    }
    Ok(())
}

/// Describes one harness run; serialized next to its CSV outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<S: Serialize> {
    pub command: String,
    pub version: &'static str,
    pub generator: &'static str,
    pub seed: u64,
    pub scenario: S,
    pub options: FitOptions,
}

impl<S: Serialize> RunManifest<S> {
    pub fn new(command: impl Into<String>, seed: u64, scenario: S, options: FitOptions) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            generator: GENERATOR,
            seed,
            scenario,
            options,
        }
    }
}
