//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use sepfit::bench::{BasinSpec, MultiFileScenario, ScalingSpec, Scenario};
use sepfit::model::ModelSpec;
use sepfit::optimizer::FitOptions;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    pub data: Option<DataBlock>,
    pub start: Option<StartBlock>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub output: OutputBlock,
    pub slice: Option<SliceBlock>,
    pub basin: Option<BasinBlock>,
    pub bench: Option<BenchBlock>,
    /// Synthetic single-file data, used when `data` is absent.
    pub scenario: Option<Scenario>,
    /// Synthetic multi-file data: inline, or loaded from `multifile_scenario_path`.
    pub multifile_scenario: Option<MultiFileScenario>,
    pub multifile_scenario_path: Option<PathBuf>,
    /// Directory the relative paths above are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A column given by 0-based index or by header name.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    #[serde(default = "col_t")]
    pub t: ColumnRef,
    #[serde(default = "col_y")]
    pub y: ColumnRef,
    pub w: Option<ColumnRef>,
}

fn col_t() -> ColumnRef {
    ColumnRef::Index(0)
}

fn col_y() -> ColumnRef {
    ColumnRef::Index(1)
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            t: col_t(),
            y: col_y(),
            w: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weights {
    Uniform,
    InverseY,
    /// Read from the `w` column (the third column unless mapped).
    Column,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub path: Option<PathBuf>,
    /// One file per entry, for `fit-multi`.
    pub paths: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Default: the weight column if the file has one, otherwise uniform.
    pub weights: Option<Weights>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartBlock {
    pub p: Option<Vec<f64>>,
    /// Classical mode only; defaults to `q*(p)`.
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// JSON report; standard output when absent.
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub covariance: bool,
    /// Relative displacement for the covariance stencil.
    pub covariance_delta: Option<f64>,
    /// Fitted-curve CSV for `fit`, the χ² curve for `slice`, the table for `bench`,
    /// the grid for `basin`, the data file for `simulate`.
    pub csv: Option<PathBuf>,
    /// Graymap of the basin grid.
    pub pgm: Option<PathBuf>,
    /// Run manifest JSON (`basin`, `bench`, `simulate`).
    pub manifest: Option<PathBuf>,
    /// Output directory for `simulate` with a multi-file scenario.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceKind {
    Frozen,
    Reoptimized,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceBlock {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mode: SliceKind,
    /// Frozen mode; defaults to `q*` at the start point.
    pub q_ref: Option<Vec<f64>>,
}

/// [`BasinSpec`] fields, all optional, plus the generating `p`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinBlock {
    pub p_true: Vec<f64>,
    pub p1: Option<(f64, f64)>,
    pub p2: Option<(f64, f64)>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub tolerance: Option<f64>,
}

impl BasinBlock {
    pub fn spec(&self) -> BasinSpec {
        let d = BasinSpec::default();
        BasinSpec {
            p1: self.p1.unwrap_or(d.p1),
            p2: self.p2.unwrap_or(d.p2),
            n1: self.n1.unwrap_or(d.n1),
            n2: self.n2.unwrap_or(d.n2),
            tolerance: self.tolerance.unwrap_or(d.tolerance),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BenchBlock {
    /// Peak-train sweep; unset fields take the [`ScalingSpec`] defaults.
    Scaling {
        n_list: Option<Vec<usize>>,
        repeats: Option<usize>,
        p_init: Option<f64>,
        seed: Option<u64>,
    },
    /// Multi-file sweep over the file counts in `files`.
    Multifile { files: Vec<usize> },
}

impl BenchBlock {
    pub fn scaling_spec(&self) -> Option<ScalingSpec> {
        match self {
            BenchBlock::Scaling {
                n_list,
                repeats,
                p_init,
                seed,
            } => {
                let d = ScalingSpec::default();
                Some(ScalingSpec {
                    n_list: n_list.clone().unwrap_or(d.n_list),
                    repeats: repeats.unwrap_or(d.repeats),
                    p_init: p_init.unwrap_or(d.p_init),
                    seed: seed.unwrap_or(d.seed),
                })
            }
            BenchBlock::Multifile { .. } => None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.fit.validate()?;
        if let Some(path) = cfg.multifile_scenario_path.clone() {
            if cfg.multifile_scenario.is_some() {
                return Err(CliError::Input(
                    "give either multifile_scenario or multifile_scenario_path, not both".into(),
                ));
            }
            let full = cfg.resolve(&path);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Input(format!("cannot read scenario {}: {e}", full.display())))?;
            cfg.multifile_scenario = Some(
                toml::from_str(&text)
                    .map_err(|e| CliError::Input(format!("invalid scenario {}: {e}", full.display())))?,
            );
        }
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn require_model(&self) -> Result<&ModelSpec, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Input("config has no [model] table".into()))
    }
}
