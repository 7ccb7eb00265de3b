//! One function per subcommand. Each returns whether the fit converged
//! (always `true` for commands without a single fit).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sepfit::bench::{
    argmin, basin_map, generate_files, generate_synthetic, multifile_sweep, provenance_header, scaling_bench,
    slice_scan, write_basin_csv, write_basin_pgm, write_curve_csv, write_multifile_csv, write_scaling_csv,
    MultiFileScenario, RunManifest, SliceMode, SlicePoint, Sweep,
};
use sepfit::covariance::{fit_covariance, CovarianceEstimate, DEFAULT_COVARIANCE_DELTA};
use sepfit::linear::ReducedProblem;
use sepfit::model::{eval_model, DataSet, ModelSpec, ParamSplit, SeparableModel};
use sepfit::multifile::{
    multifile_covariance, multifile_fit, multifile_fit_classical, MultiFileProblem, MultiFitReport,
};
use sepfit::optimizer::{fit, lm_fit_classical, FitOptions, FitReport, Mode};
use serde::Serialize;

use crate::config::{BenchBlock, RunConfig, SliceKind};
use crate::data::{read_data, write_data};
use crate::error::CliError;

/// Settings given on the command line, applied over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(mode) = self.mode {
            cfg.fit.mode = mode;
        }
        if let Some(seed) = self.seed {
            if let Some(s) = cfg.scenario.as_mut() {
                s.seed = seed;
            }
            if let Some(s) = cfg.multifile_scenario.as_mut() {
                s.seed = seed;
            }
            if let Some(BenchBlock::Scaling { seed: s, .. }) = cfg.bench.as_mut() {
                *s = Some(seed);
            }
        }
    }
}

#[derive(Serialize)]
struct FitOutput {
    #[serde(flatten)]
    fit: FitReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance_estimate: Option<CovarianceEstimate>,
}

#[derive(Serialize)]
struct MultiFitOutput {
    #[serde(flatten)]
    fit: MultiFitReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance_estimate: Option<CovarianceEstimate>,
}

#[derive(Serialize)]
struct SliceOutput {
    sweep: Sweep,
    mode: SliceMode,
    p_base: Vec<f64>,
    argmin: Option<SlicePoint>,
    points: Vec<SlicePoint>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Output(format!("cannot create directory {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut out = create(path)?;
    f(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn write_json(cfg: &RunConfig, path: Option<&PathBuf>, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    match path {
        Some(p) => write_file(&cfg.resolve(p), |out| writeln!(out, "{text}")),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

struct SingleInput {
    model: Arc<dyn SeparableModel>,
    data: DataSet,
    /// Set for synthetic data.
    seed: Option<u64>,
}

/// The model and dataset of a single-file command: a data file or a synthetic scenario.
fn single_dataset(cfg: &RunConfig) -> Result<SingleInput, CliError> {
    match (&cfg.data, &cfg.scenario) {
        (Some(data), _) => {
            let path = data
                .path
                .as_ref()
                .ok_or_else(|| CliError::Input("[data] needs `path` for this command".into()))?;
            let model = cfg.require_model()?.build()?;
            let ds = read_data(&cfg.resolve(path), &data.columns, data.weights)?;
            Ok(SingleInput {
                model,
                data: ds,
                seed: None,
            })
        }
        (None, Some(scenario)) => {
            let spec = cfg.model.as_ref().unwrap_or(&scenario.model);
            Ok(SingleInput {
                model: spec.build()?,
                data: generate_synthetic(scenario)?,
                seed: Some(scenario.seed),
            })
        }
        (None, None) => Err(CliError::Input("config needs a [data] or [scenario] table".into())),
    }
}

fn start_p(cfg: &RunConfig, model: &dyn SeparableModel) -> Result<Vec<f64>, CliError> {
    let given = match cfg.start.as_ref().and_then(|s| s.p.clone()) {
        Some(p) => Some(p),
        None => cfg.model.as_ref().map(ModelSpec::initial_p).transpose()?.flatten(),
    };
    let p = given.ok_or_else(|| CliError::Input("no starting point: set [start] p".into()))?;
    if p.len() != model.nonlinear_dim() {
        return Err(CliError::Input(format!(
            "[start] p has {} entries but model `{}` has {} nonlinear parameters",
            p.len(),
            model.name(),
            model.nonlinear_dim()
        )));
    }
    Ok(p)
}

fn covariance_delta(cfg: &RunConfig) -> f64 {
    cfg.output.covariance_delta.unwrap_or(DEFAULT_COVARIANCE_DELTA)
}

fn reduced<'a>(model: &'a dyn SeparableModel, data: &'a DataSet, options: &FitOptions) -> ReducedProblem<'a> {
    ReducedProblem::new(model, data)
        .with_rank_policy(options.rank_policy)
        .with_ridge(options.ridge)
}

fn run_single_fit(cfg: &RunConfig, model: &dyn SeparableModel, data: &DataSet) -> Result<FitReport, CliError> {
    let p0 = start_p(cfg, model)?;
    let q0 = cfg.start.as_ref().and_then(|s| s.q.as_deref());
    let report = match (cfg.fit.mode, q0) {
        (Mode::Classical, Some(q)) => lm_fit_classical(model, data, &p0, Some(q), &cfg.fit)?,
        (Mode::Shortcut, Some(_)) => return Err(CliError::Input("[start] q is only used in classical mode".into())),
        (_, None) => fit(model, data, &p0, &cfg.fit)?,
    };
    Ok(report)
}

pub fn fit_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    let SingleInput { model, data, seed } = single_dataset(cfg)?;
    let mut report = run_single_fit(cfg, model.as_ref(), &data)?;
    let mut estimate = None;
    if cfg.output.covariance {
        match fit_covariance(
            &reduced(model.as_ref(), &data, &cfg.fit),
            &report.p_opt,
            covariance_delta(cfg),
        ) {
            Ok(est) => {
                report.covariance = Some(est.covariance.clone());
                report.stderr = Some(est.stderr.clone());
                estimate = Some(est);
            }
            Err(e) => eprintln!("warning: covariance not available: {e}"),
        }
    }
    if let Some(path) = &cfg.output.csv {
        let params = ParamSplit::new(&report.p_opt, &report.q_opt);
        let fitted = data
            .t()
            .iter()
            .map(|&t| eval_model(model.as_ref(), &params, t))
            .collect::<sepfit::Result<Vec<f64>>>()?;
        write_file(&cfg.resolve(path), |out| {
            match seed {
                Some(s) => out.write_all(provenance_header(s).as_bytes())?,
                None => writeln!(
                    out,
                    "# sepfit {} fit of model {}",
                    env!("CARGO_PKG_VERSION"),
                    model.name()
                )?,
            }
            writeln!(out, "t,y,fitted")?;
            for ((t, y), f) in data.t().iter().zip(data.y()).zip(&fitted) {
                writeln!(out, "{t:.16e},{y:.16e},{f:.16e}")?;
            }
            Ok(())
        })?;
    }
    let converged = report.converged;
    write_json(
        cfg,
        cfg.output.report.as_ref(),
        &FitOutput {
            fit: report,
            covariance_estimate: estimate,
        },
    )?;
    Ok(converged)
}

fn multi_problem(cfg: &RunConfig) -> Result<(MultiFileProblem, Option<&MultiFileScenario>), CliError> {
    let problem = match (&cfg.data, &cfg.multifile_scenario) {
        (Some(data), _) => {
            let paths = data
                .paths
                .as_ref()
                .ok_or_else(|| CliError::Input("[data] needs `paths` for fit-multi".into()))?;
            let model = cfg.require_model()?.build()?;
            let sets = paths
                .iter()
                .map(|p| read_data(&cfg.resolve(p), &data.columns, data.weights))
                .collect::<Result<Vec<_>, _>>()?;
            (MultiFileProblem::shared(model, sets)?, None)
        }
        (None, Some(s)) => {
            let model = match &cfg.model {
                Some(spec) => spec.build()?,
                None => ModelSpec::ThreePeakBg {}.build()?,
            };
            (MultiFileProblem::shared(model, generate_files(s)?)?, Some(s))
        }
        (None, None) => {
            return Err(CliError::Input(
                "config needs [data] paths or a multi-file scenario".into(),
            ))
        }
    };
    let (p, s) = problem;
    Ok((p.with_rank_policy(cfg.fit.rank_policy).with_ridge(cfg.fit.ridge), s))
}

pub fn fit_multi_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    let (problem, scenario) = multi_problem(cfg)?;
    let p0 = match (cfg.start.as_ref().and_then(|s| s.p.clone()), scenario) {
        (Some(p), _) => p,
        (None, Some(s)) => s.p_init(),
        (None, None) => return Err(CliError::Input("no starting point: set [start] p".into())),
    };
    let mut report = match cfg.fit.mode {
        Mode::Shortcut => multifile_fit(&problem, &p0, &cfg.fit)?,
        Mode::Classical => multifile_fit_classical(&problem, &p0, None, &cfg.fit)?,
    };
    let mut estimate = None;
    if cfg.output.covariance {
        match multifile_covariance(&problem, &report.fit.p_opt, covariance_delta(cfg)) {
            Ok(est) => {
                report.fit.covariance = Some(est.covariance.clone());
                report.fit.stderr = Some(est.stderr.clone());
                estimate = Some(est);
            }
            Err(e) => eprintln!("warning: covariance not available: {e}"),
        }
    }
    if let Some(path) = &cfg.output.csv {
        let p = report.fit.p_opt.clone();
        let mut rows = Vec::new();
        for (k, (file, q)) in problem.files().iter().zip(&report.q_blocks).enumerate() {
            let params = ParamSplit::new(&p, q);
            for (t, y) in file.data.t().iter().zip(file.data.y()) {
                rows.push((k, *t, *y, eval_model(file.model.as_ref(), &params, *t)?));
            }
        }
        write_file(&cfg.resolve(path), |out| {
            if let Some(s) = scenario {
                out.write_all(provenance_header(s.seed).as_bytes())?;
            }
            writeln!(out, "file,t,y,fitted")?;
            for (k, t, y, f) in &rows {
                writeln!(out, "{k},{t:.16e},{y:.16e},{f:.16e}")?;
            }
            Ok(())
        })?;
    }
    let converged = report.fit.converged;
    write_json(
        cfg,
        cfg.output.report.as_ref(),
        &MultiFitOutput {
            fit: report,
            covariance_estimate: estimate,
        },
    )?;
    Ok(converged)
}

pub fn slice_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    let block = cfg
        .slice
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [slice] table".into()))?;
    let SingleInput { model, data, seed } = single_dataset(cfg)?;
    let p_base = start_p(cfg, model.as_ref())?;
    let mode = match block.mode {
        SliceKind::Reoptimized => SliceMode::Reoptimized,
        SliceKind::Frozen => SliceMode::Frozen {
            q_ref: match &block.q_ref {
                Some(q) => q.clone(),
                None => reduced(model.as_ref(), &data, &cfg.fit)
                    .qstar(&p_base)?
                    .q_star
                    .as_slice()
                    .to_vec(),
            },
        },
    };
    let sweep = Sweep {
        index: block.index,
        lo: block.lo,
        hi: block.hi,
        count: block.count,
    };
    let points = slice_scan(model.as_ref(), &data, &p_base, sweep, &mode)?;
    if let Some(path) = &cfg.output.csv {
        write_file(&cfg.resolve(path), |out| {
            write_curve_csv(out, seed.unwrap_or(0), &points)
        })?;
    }
    write_json(
        cfg,
        cfg.output.report.as_ref(),
        &SliceOutput {
            sweep,
            mode,
            p_base,
            argmin: argmin(&points),
            points,
        },
    )?;
    Ok(true)
}

pub fn basin_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    let block = cfg
        .basin
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [basin] table".into()))?;
    let SingleInput { model, data, seed } = single_dataset(cfg)?;
    let spec = block.spec();
    let grid = basin_map(model.as_ref(), &data, &block.p_true, &spec, &cfg.fit, true)?;
    let seed = seed.unwrap_or(0);
    if let Some(path) = &cfg.output.csv {
        write_file(&cfg.resolve(path), |out| write_basin_csv(out, seed, &grid))?;
    }
    if let Some(path) = &cfg.output.pgm {
        write_file(&cfg.resolve(path), |out| write_basin_pgm(out, &grid))?;
    }
    if let Some(path) = &cfg.output.manifest {
        let scenario = serde_json::json!({
            "data": cfg.scenario.as_ref().map(|s| serde_json::to_value(s).unwrap_or_default()),
            "p_true": block.p_true,
            "basin": spec,
        });
        write_json(
            cfg,
            Some(path),
            &RunManifest::new("basin", seed, scenario, cfg.fit.clone()),
        )?;
    }
    write_json(
        cfg,
        cfg.output.report.as_ref(),
        &serde_json::json!({
            "spec": grid.spec,
            "counts": grid.counts,
        }),
    )?;
    Ok(true)
}

pub fn bench_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    let block = cfg
        .bench
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [bench] table".into()))?;
    match block {
        BenchBlock::Scaling { .. } => {
            let spec = block.scaling_spec().expect("scaling block");
            let table = scaling_bench(&spec, &cfg.fit)?;
            if let Some(path) = &cfg.output.csv {
                write_file(&cfg.resolve(path), |out| write_scaling_csv(out, spec.seed, &table))?;
            }
            if let Some(path) = &cfg.output.manifest {
                write_json(
                    cfg,
                    Some(path),
                    &RunManifest::new("bench scaling", spec.seed, &spec, cfg.fit.clone()),
                )?;
            }
            write_json(cfg, cfg.output.report.as_ref(), &table)?;
        }
        BenchBlock::Multifile { files } => {
            let scenario = cfg
                .multifile_scenario
                .as_ref()
                .ok_or_else(|| CliError::Input("multi-file bench needs a multi-file scenario".into()))?;
            let rows = multifile_sweep(scenario, files, &cfg.fit)?;
            if let Some(path) = &cfg.output.csv {
                write_file(&cfg.resolve(path), |out| write_multifile_csv(out, scenario.seed, &rows))?;
            }
            if let Some(path) = &cfg.output.manifest {
                write_json(
                    cfg,
                    Some(path),
                    &RunManifest::new("bench multifile", scenario.seed, scenario, cfg.fit.clone()),
                )?;
            }
            write_json(cfg, cfg.output.report.as_ref(), &rows)?;
        }
    }
    Ok(true)
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<bool, CliError> {
    match (&cfg.scenario, &cfg.multifile_scenario) {
        (Some(scenario), _) => {
            let data = generate_synthetic(scenario)?;
            let header = provenance_header(scenario.seed);
            match &cfg.output.csv {
                Some(path) => write_file(&cfg.resolve(path), |out| write_data(out, &header, &data))?,
                None => write_data(&mut std::io::stdout().lock(), &header, &data)
                    .map_err(|e| CliError::Output(e.to_string()))?,
            }
            if let Some(path) = &cfg.output.manifest {
                write_json(
                    cfg,
                    Some(path),
                    &RunManifest::new("simulate", scenario.seed, scenario, cfg.fit.clone()),
                )?;
            }
        }
        (None, Some(scenario)) => {
            let dir = cfg
                .output
                .dir
                .as_ref()
                .ok_or_else(|| CliError::Input("simulating a multi-file scenario needs [output] dir".into()))?;
            let dir = cfg.resolve(dir);
            let header = provenance_header(scenario.seed);
            for (k, data) in generate_files(scenario)?.iter().enumerate() {
                write_file(&dir.join(format!("file_{k:03}.csv")), |out| {
                    write_data(out, &header, data)
                })?;
            }
            if let Some(path) = &cfg.output.manifest {
                write_json(
                    cfg,
                    Some(path),
                    &RunManifest::new("simulate", scenario.seed, scenario, cfg.fit.clone()),
                )?;
            }
        }
        (None, None) => {
            return Err(CliError::Input(
                "simulate needs a [scenario] or multi-file scenario".into(),
            ))
        }
    }
    Ok(true)
}

pub fn prepare(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}
