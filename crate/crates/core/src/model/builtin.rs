use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SeparableModel;
use crate::error::{Error, Result};

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-z * z).exp()
}

/// `q₁ e^{−t/p₁} + q₂ sin(t/p₂)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExpSin;

impl SeparableModel for ExpSin {
    fn name(&self) -> &str {
        "exp-sin"
    }

    fn nonlinear_dim(&self) -> usize {
        2
    }

    fn linear_dim(&self) -> usize {
        2
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        phi[0] = (-t / p[0]).exp();
        phi[1] = (t / p[1]).sin();
    }
}

/// A variable-width peak at the origin plus `N` fixed-width peaks with free
/// heights centred on `t = 1, …, N`:
/// `e^{−(t/p₁)²} + Σₙ qₙ e^{−((t−n)/width)²}`.
///
/// The default width is 5; the peak at the origin is the offset term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussTrain {
    peaks: usize,
    width: f64,
}

impl GaussTrain {
    pub const DEFAULT_WIDTH: f64 = 5.0;

    pub fn new(peaks: usize) -> Self {
        Self::with_width(peaks, Self::DEFAULT_WIDTH)
    }

    pub fn with_width(peaks: usize, width: f64) -> Self {
        Self { peaks, width }
    }

    pub fn width(&self) -> f64 {
        self.width
    }
}

impl SeparableModel for GaussTrain {
    fn name(&self) -> &str {
        "gauss-train"
    }

    fn nonlinear_dim(&self) -> usize {
        1
    }

    fn linear_dim(&self) -> usize {
        self.peaks
    }

    fn basis(&self, _p: &[f64], t: f64, phi: &mut [f64]) {
        for (n, v) in phi.iter_mut().enumerate() {
            *v = gaussian(t, (n + 1) as f64, self.width);
        }
    }

    fn offset(&self, p: &[f64], t: f64) -> f64 {
        gaussian(t, 0.0, p[0])
    }
}

/// Three Gaussian peaks with shared-able centres and widths, plus a linear
/// background `q₄ t + q₅`.
///
/// `p = (c₁, c₂, c₃, w₁, w₂, w₃)`, `q = (h₁, h₂, h₃, slope, intercept)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ThreePeakBackground;

impl SeparableModel for ThreePeakBackground {
    fn name(&self) -> &str {
        "three-peak-bg"
    }

    fn nonlinear_dim(&self) -> usize {
        6
    }

    fn linear_dim(&self) -> usize {
        5
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        for k in 0..3 {
            phi[k] = gaussian(t, p[k], p[k + 3]);
        }
        phi[3] = t;
        phi[4] = 1.0;
    }
}

/// `Σₙ qₙ exp(−(p₂ₙ₋₁ / (t − p₂ₙ))²)`, two nonlinear parameters per linear one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussFree {
    terms: usize,
}

impl GaussFree {
    pub fn new(terms: usize) -> Self {
        Self { terms }
    }
}

impl SeparableModel for GaussFree {
    fn name(&self) -> &str {
        "gauss-free"
    }

    fn nonlinear_dim(&self) -> usize {
        2 * self.terms
    }

    fn linear_dim(&self) -> usize {
        self.terms
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        for (n, v) in phi.iter_mut().enumerate() {
            let z = p[2 * n] / (t - p[2 * n + 1]);
            *v = (-z * z).exp();
        }
    }
}

type BasisFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;
type OffsetFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

/// A separable model assembled from closures.
#[derive(Clone)]
pub struct CustomModel {
    name: String,
    nonlinear: usize,
    linear: usize,
    basis: Arc<BasisFn>,
    offset: Option<Arc<OffsetFn>>,
}

impl CustomModel {
    pub fn new(
        name: impl Into<String>,
        nonlinear: usize,
        linear: usize,
        basis: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            nonlinear,
            linear,
            basis: Arc::new(basis),
            offset: None,
        }
    }

    pub fn with_offset(mut self, offset: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        self.offset = Some(Arc::new(offset));
        self
    }
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel")
            .field("name", &self.name)
            .field("nonlinear", &self.nonlinear)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

impl SeparableModel for CustomModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn nonlinear_dim(&self) -> usize {
        self.nonlinear
    }

    fn linear_dim(&self) -> usize {
        self.linear
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        (self.basis)(p, t, phi)
    }

    fn offset(&self, p: &[f64], t: f64) -> f64 {
        self.offset.as_ref().map_or(0.0, |f| f(p, t))
    }
}

/// How a peak parameter enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Role {
    Fixed {
        value: f64,
    },
    /// Part of `p`; `value` is the starting guess.
    Nonlinear {
        #[serde(default)]
        value: Option<f64>,
    },
    /// Part of `q`. Only valid for heights.
    Linear {
        #[serde(default)]
        value: Option<f64>,
    },
}

/// One Gaussian peak `height · exp(−((t − center)/width)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakSpec {
    pub center: Role,
    pub width: Role,
    pub height: Role,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Fixed(f64),
    P(usize),
    Q(usize),
}

impl Source {
    fn value(self, p: &[f64]) -> f64 {
        match self {
            Source::Fixed(v) => v,
            Source::P(i) => p[i],
            Source::Q(_) => unreachable!("linear source read as a nonlinear value"),
        }
    }
}

/// A sum of Gaussian peaks with per-parameter roles and an optional
/// polynomial background whose coefficients are linear.
///
/// Nonlinear parameters are numbered peak by peak in the order
/// (center, width, height); linear ones are the linear heights in peak order
/// followed by the background coefficients of `1, t, t², …`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakList {
    peaks: Vec<[Source; 3]>,
    background: usize,
    nonlinear: usize,
    linear: usize,
    p_init: Vec<Option<f64>>,
    q_init: Vec<Option<f64>>,
}

impl PeakList {
    pub fn new(specs: &[PeakSpec], background_degree: Option<usize>) -> Result<Self> {
        let mut p_init = Vec::new();
        let mut q_init = Vec::new();
        let mut peaks = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let mut sources = [Source::Fixed(0.0); 3];
            for (slot, (label, role)) in [("center", spec.center), ("width", spec.width), ("height", spec.height)]
                .into_iter()
                .enumerate()
            {
                sources[slot] = match role {
                    Role::Fixed { value } => Source::Fixed(value),
                    Role::Nonlinear { value } => {
                        p_init.push(value);
                        Source::P(p_init.len() - 1)
                    }
                    Role::Linear { value } if slot == 2 => {
                        q_init.push(value);
                        Source::Q(q_init.len() - 1)
                    }
                    Role::Linear { .. } => {
                        return Err(Error::Config(format!(
                            "peak {k}: the {label} enters the model nonlinearly and cannot be linear"
                        )))
                    }
                };
            }
            peaks.push(sources);
        }
        let background = background_degree.map_or(0, |d| d + 1);
        q_init.extend(std::iter::repeat_n(None, background));
        Ok(Self {
            nonlinear: p_init.len(),
            linear: q_init.len(),
            peaks,
            background,
            p_init,
            q_init,
        })
    }

    /// Starting values declared for the nonlinear parameters, if all are present.
    pub fn initial_p(&self) -> Option<Vec<f64>> {
        self.p_init.iter().copied().collect()
    }
}

impl SeparableModel for PeakList {
    fn name(&self) -> &str {
        "peaks"
    }

    fn nonlinear_dim(&self) -> usize {
        self.nonlinear
    }

    fn linear_dim(&self) -> usize {
        self.linear
    }

    fn basis(&self, p: &[f64], t: f64, phi: &mut [f64]) {
        for [center, width, height] in &self.peaks {
            if let Source::Q(i) = height {
                phi[*i] = gaussian(t, center.value(p), width.value(p));
            }
        }
        let first = self.linear - self.background;
        let mut power = 1.0;
        for v in &mut phi[first..] {
            *v = power;
            power *= t;
        }
    }

    fn offset(&self, p: &[f64], t: f64) -> f64 {
        self.peaks
            .iter()
            .filter(|[_, _, h]| !matches!(h, Source::Q(_)))
            .map(|[c, w, h]| h.value(p) * gaussian(t, c.value(p), w.value(p)))
            .sum()
    }
}

/// Declarative model selection, as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    // Empty braces so that stray keys are rejected.
    ExpSin {},
    GaussTrain {
        n: usize,
        #[serde(default = "default_train_width")]
        width: f64,
    },
    ThreePeakBg {},
    GaussFree {
        n: usize,
    },
    Peaks {
        peaks: Vec<PeakSpec>,
        #[serde(default)]
        background: Option<usize>,
    },
}

fn default_train_width() -> f64 {
    GaussTrain::DEFAULT_WIDTH
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn SeparableModel>> {
        Ok(match self {
            ModelSpec::ExpSin {} => Arc::new(ExpSin),
            ModelSpec::GaussTrain { n, width } => {
                if !(*width > 0.0) {
                    return Err(Error::Config(format!(
                        "gauss-train width must be positive, got {width}"
                    )));
                }
                Arc::new(GaussTrain::with_width(*n, *width))
            }
            ModelSpec::ThreePeakBg {} => Arc::new(ThreePeakBackground),
            ModelSpec::GaussFree { n } => Arc::new(GaussFree::new(*n)),
            ModelSpec::Peaks { peaks, background } => Arc::new(PeakList::new(peaks, *background)?),
        })
    }

    /// Starting values carried by the spec itself (peak lists only).
    pub fn initial_p(&self) -> Result<Option<Vec<f64>>> {
        match self {
            ModelSpec::Peaks { peaks, background } => Ok(PeakList::new(peaks, *background)?.initial_p()),
            _ => Ok(None),
        }
    }
}

/// Lookup of the built-in models by name.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelRegistry;

impl ModelRegistry {
    pub const NAMES: [&'static str; 4] = ["exp-sin", "gauss-train", "three-peak-bg", "gauss-free"];

    /// `size` is the number of linear terms for the sized families.
    pub fn lookup(&self, name: &str, size: Option<usize>) -> Result<Arc<dyn SeparableModel>> {
        let sized = |what: &str| size.ok_or_else(|| Error::Config(format!("model `{what}` needs a size")));
        let spec = match name {
            "exp-sin" => ModelSpec::ExpSin {},
            "gauss-train" => ModelSpec::GaussTrain {
                n: sized(name)?,
                width: GaussTrain::DEFAULT_WIDTH,
            },
            "three-peak-bg" => ModelSpec::ThreePeakBg {},
            "gauss-free" => ModelSpec::GaussFree { n: sized(name)? },
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        };
        spec.build()
    }
}
