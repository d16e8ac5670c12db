//! Datasets: synthetic generation, CSV ingestion, label truncation, and the
//! measured bound constants used by the step-size schedule.
//!
//! The generators produce covariates from one of two bounded marginals
//! (clipped isotropic Gaussian, uniform on the discrete cube {−1,0,1}^d) and
//! labels from a planted model y = σ(w*·x), optionally perturbed by Gaussian
//! noise or by an adversary that overwrites a fixed fraction of labels.
//!
//! Training requires labels clamped to a level M; with covariates bounded by
//! S and labels by M, the squared loss of any ‖w‖ ≤ W is at most
//!
//! ```text
//!   ℓ(w; x, y) ≤ 2β²W²S² + 2M²,
//! ```
//!
//! and [`measure_bounds`] turns the same data into the gradient bound G and
//! smoothness bound κ consumed by the optimizer's step-size schedule.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, ActivationSpec};
use crate::error::{Error, Result};
use crate::linalg;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A fixed collection of labeled samples (x_j, y_j) with x_j ∈ R^d.
///
/// Covariates are stored flat, row-major. The maximum covariate norm is
/// computed once at construction; the truncation level is `Some(M)` after
/// [`truncate_labels`] has clamped every label into [−M, M].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    max_norm: f64,
    truncation: Option<f64>,
}

impl Dataset {
    /// Build a dataset from covariate rows and labels of matching length.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::param("rows", "dataset must contain at least one sample"));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::param("rows", "covariates must have at least one coordinate"));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if !linalg::all_finite(row) {
                return Err(Error::NonFinite { what: "covariate" });
            }
            features.extend_from_slice(row);
        }
        if !linalg::all_finite(&labels) {
            return Err(Error::NonFinite { what: "label" });
        }
        let max_norm = (0..rows.len())
            .map(|j| linalg::norm2(&features[j * dim..(j + 1) * dim]))
            .fold(0.0, f64::max);
        Ok(Dataset {
            features,
            labels,
            dim,
            max_norm,
            truncation: None,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Covariate vector of sample `j`.
    #[inline]
    pub fn x(&self, j: usize) -> &[f64] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    /// Label of sample `j`.
    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.labels[j]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Iterate over (covariate, label) pairs.
    pub fn samples(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Largest Euclidean norm among the covariates.
    pub fn max_covariate_norm(&self) -> f64 {
        self.max_norm
    }

    /// The level M at which labels were clamped, if they were.
    pub fn truncation_level(&self) -> Option<f64> {
        self.truncation
    }

    /// Largest absolute label.
    pub fn max_abs_label(&self) -> f64 {
        self.labels.iter().fold(0.0, |m, y| m.max(y.abs()))
    }

    /// Write as CSV with header `x1,...,xd,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.push("y".to_string());
        writer.write_record(&header)?;
        for (x, y) in self.samples() {
            let mut record: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            record.push(format!("{y:?}"));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Read a CSV dataset written by [`Dataset::write_csv`] (or any file with
    /// one header row, d covariate columns, and a final label column).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let width = reader.headers()?.len();
        if width < 2 {
            return Err(Error::Data {
                line: 1,
                message: format!("expected at least 2 columns (x1, y), found {width}"),
            });
        }
        let dim = width - 1;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 2; // 1-based, after the header row
            let record = record?;
            if record.len() != width {
                return Err(Error::Data {
                    line,
                    message: format!("expected {width} fields, found {}", record.len()),
                });
            }
            let mut row = Vec::with_capacity(dim);
            for (col, field) in record.iter().enumerate() {
                let value: f64 = field.trim().parse().map_err(|_| Error::Data {
                    line,
                    message: format!("field {} ({field:?}) is not a number", col + 1),
                })?;
                if col < dim {
                    row.push(value);
                } else {
                    labels.push(value);
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data {
                line: 1,
                message: "no data rows".to_string(),
            });
        }
        Dataset::from_rows(rows, labels)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Covariate marginal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    /// Isotropic standard Gaussian, rejection-clipped to ‖x‖₂ ≤ clip_radius.
    GaussianIsotropic,
    /// Uniform on {−1, 0, 1}^d.
    DiscreteCube,
}

/// How labels are produced from the clean signal σ(w*·x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LabelModel {
    /// y = σ(w*·x) exactly.
    Realizable,
    /// y = σ(w*·x) + stddev·z with z standard normal.
    GaussianNoise { stddev: f64 },
    /// A seeded fraction of labels is overwritten with ±magnitude.
    Adversarial { fraction: f64, magnitude: f64 },
}

fn default_concentration() -> f64 {
    1.0
}

fn default_activation() -> ActivationSpec {
    ActivationSpec::Relu
}

/// Configuration for [`generate`]. Serialized as JSON in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub marginal: Marginal,
    pub d: usize,
    pub n: usize,
    /// Planted parameter vector; must satisfy ‖w_star‖₂ ≤ radius.
    pub w_star: Vec<f64>,
    /// Ball radius W of the admissible parameter set.
    pub radius: f64,
    pub label_model: LabelModel,
    pub seed: u64,
    /// Concentration parameter B of the marginal (1 for the built-ins).
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    /// Covariate norm cap; `None` means 10·√d.
    #[serde(default)]
    pub clip_radius: Option<f64>,
    /// Activation producing the clean signal σ(w*·x).
    #[serde(default = "default_activation")]
    pub activation: ActivationSpec,
}

impl GeneratorConfig {
    pub fn effective_clip_radius(&self) -> f64 {
        self.clip_radius
            .unwrap_or_else(|| 10.0 * (self.d as f64).sqrt())
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::param("d", "dimension must be positive"));
        }
        if self.n == 0 {
            return Err(Error::param("n", "sample count must be positive"));
        }
        if self.w_star.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: self.w_star.len(),
            });
        }
        if !linalg::all_finite(&self.w_star) {
            return Err(Error::NonFinite { what: "w_star" });
        }
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(Error::param("radius", format!("must be positive, got {}", self.radius)));
        }
        if linalg::norm2(&self.w_star) > self.radius + 1e-9 {
            return Err(Error::param(
                "w_star",
                format!(
                    "norm {} exceeds the ball radius {}",
                    linalg::norm2(&self.w_star),
                    self.radius
                ),
            ));
        }
        if !self.concentration.is_finite() || self.concentration <= 0.0 {
            return Err(Error::param("concentration", "must be positive"));
        }
        let clip = self.effective_clip_radius();
        if !clip.is_finite() || clip <= 0.0 {
            return Err(Error::param("clip_radius", "must be positive"));
        }
        match self.label_model {
            LabelModel::GaussianNoise { stddev } => {
                if !stddev.is_finite() || stddev < 0.0 {
                    return Err(Error::param("stddev", "must be nonnegative"));
                }
            }
            LabelModel::Adversarial { fraction, magnitude } => {
                if !(0.0..1.0).contains(&fraction) {
                    return Err(Error::param("fraction", "must lie in [0, 1)"));
                }
                if !magnitude.is_finite() {
                    return Err(Error::NonFinite { what: "magnitude" });
                }
            }
            LabelModel::Realizable => {}
        }
        Ok(())
    }
}

/// Draw a dataset per the config. Deterministic given the seed: the stream
/// is consumed in a fixed order (all covariates, then label perturbations).
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let act = Activation::from_spec(&cfg.activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clip = cfg.effective_clip_radius();
    let budget = 1000 * cfg.n;
    let mut draws = 0usize;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.n);
    while rows.len() < cfg.n {
        draws += 1;
        if draws > budget {
            return Err(Error::Generation { draws, budget });
        }
        let x: Vec<f64> = match cfg.marginal {
            Marginal::GaussianIsotropic => {
                (0..cfg.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            }
            Marginal::DiscreteCube => {
                (0..cfg.d).map(|_| (rng.gen_range(0..3i32) - 1) as f64).collect()
            }
        };
        if linalg::norm2(&x) <= clip {
            rows.push(x);
        }
    }

    let mut labels: Vec<f64> = rows
        .iter()
        .map(|x| act.eval(linalg::dot(&cfg.w_star, x)))
        .collect::<Result<_>>()?;

    match cfg.label_model {
        LabelModel::Realizable => {}
        LabelModel::GaussianNoise { stddev } => {
            for y in &mut labels {
                *y += stddev * rng.sample::<f64, _>(StandardNormal);
            }
        }
        LabelModel::Adversarial { fraction, magnitude } => {
            let count = (fraction * cfg.n as f64).round() as usize;
            let chosen = rand::seq::index::sample(&mut rng, cfg.n, count);
            for j in chosen.iter() {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                labels[j] = sign * magnitude;
            }
        }
    }

    Dataset::from_rows(rows, labels)
}

/// Descriptive record written next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub w_star: Vec<f64>,
    pub radius: f64,
    pub marginal: Marginal,
    pub label_model: LabelModel,
    pub activation: ActivationSpec,
    pub concentration: f64,
    pub clip_radius: f64,
    /// Max covariate norm actually observed in the file.
    pub max_covariate_norm: f64,
}

impl DatasetMetadata {
    pub fn describe(cfg: &GeneratorConfig, ds: &Dataset) -> Self {
        DatasetMetadata {
            seed: cfg.seed,
            n: cfg.n,
            d: cfg.d,
            w_star: cfg.w_star.clone(),
            radius: cfg.radius,
            marginal: cfg.marginal,
            label_model: cfg.label_model,
            activation: cfg.activation.clone(),
            concentration: cfg.concentration,
            clip_radius: cfg.effective_clip_radius(),
            max_covariate_norm: ds.max_covariate_norm(),
        }
    }
}

// ---------------------------------------------------------------------------
// Label truncation
// ---------------------------------------------------------------------------

/// Inputs for [`compute_truncation_level`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruncationParams {
    /// Leading constant; 1.0 unless overridden.
    #[serde(default = "default_concentration")]
    pub c_m: f64,
    /// Ball radius W.
    pub radius: f64,
    /// Concentration parameter B.
    pub concentration: f64,
    /// Activation Lipschitz constant β.
    pub beta: f64,
    /// Target accuracy ε.
    pub epsilon: f64,
}

/// The label clamp level M = C_M·W·B·β·ln(βBW/ε).
///
/// Requires βBW/ε > 1 so the logarithm is positive.
pub fn compute_truncation_level(p: &TruncationParams) -> Result<f64> {
    for (name, v) in [
        ("c_m", p.c_m),
        ("radius", p.radius),
        ("concentration", p.concentration),
        ("beta", p.beta),
        ("epsilon", p.epsilon),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::param("truncation", format!("{name} must be positive, got {v}")));
        }
    }
    let ratio = p.beta * p.concentration * p.radius / p.epsilon;
    if ratio <= 1.0 {
        return Err(Error::param(
            "epsilon",
            format!("βBW/ε = {ratio} must exceed 1 for a positive truncation level"),
        ));
    }
    Ok(p.c_m * p.radius * p.concentration * p.beta * ratio.ln())
}

/// Clamp every label into [−M, M], preserving sign: y ↦ sign(y)·min(|y|, M).
/// Idempotent; labels already inside the band are untouched.
pub fn truncate_labels(ds: &Dataset, level: f64) -> Result<Dataset> {
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::param("level", format!("must be positive, got {level}")));
    }
    let mut out = ds.clone();
    for y in &mut out.labels {
        *y = y.clamp(-level, level);
    }
    out.truncation = Some(level);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bound constants
// ---------------------------------------------------------------------------

/// Which formula backs the measured constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Coordinate-wise bound: S = max |x_{j,c}|, G = 2βS√d(√2·βWS + M),
    /// κ = 2β²S²d. Loose but dimension-explicit.
    Paper,
    /// Per-sample norms: S = max ‖x_j‖₂, G = max_j 2β(βW‖x_j‖₂ + M)‖x_j‖₂,
    /// κ = 2β²·max_j ‖x_j‖₂². Never larger than the coordinate-wise bound.
    Tight,
}

/// Measured covariate bound S, gradient-field bound G, and smoothness
/// bound κ.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundConstants {
    pub s: f64,
    pub g: f64,
    pub kappa: f64,
}

/// Measure (S, G, κ) on a truncated dataset.
///
/// In both modes G bounds sup_{‖w‖≤W, j} ‖v(w; x_j, y_j)‖₂ for the update
/// field v(w; x, y) = 2β(σ(w·x) − y)x, and κ bounds its Lipschitz constant
/// in w: ‖v(w) − v(w′)‖ ≤ 2β²‖x‖²‖w − w′‖.
pub fn measure_bounds(
    ds: &Dataset,
    act: &Activation,
    radius: f64,
    level: f64,
    mode: BoundMode,
) -> Result<BoundConstants> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::param("radius", "must be positive"));
    }
    if !level.is_finite() || level <= 0.0 {
        return Err(Error::param("level", "must be positive"));
    }
    if ds.max_abs_label() > level * (1.0 + 1e-12) {
        return Err(Error::Untruncated);
    }
    let beta = act.beta;
    Ok(match mode {
        BoundMode::Paper => {
            let s = ds
                .features
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let sqrt_d = (ds.dim as f64).sqrt();
            BoundConstants {
                s,
                g: 2.0 * beta * s * sqrt_d * (std::f64::consts::SQRT_2 * beta * radius * s + level),
                kappa: 2.0 * beta * beta * s * s * ds.dim as f64,
            }
        }
        BoundMode::Tight => {
            let s = ds.max_norm;
            let g = ds
                .samples()
                .map(|(x, _)| {
                    let nx = linalg::norm2(x);
                    2.0 * beta * (beta * radius * nx + level) * nx
                })
                .fold(0.0, f64::max);
            BoundConstants {
                s,
                g,
                kappa: 2.0 * beta * beta * s * s,
            }
        }
    })
}

/// Sample a point uniformly from the Euclidean ball of the given radius.
pub fn sample_in_ball(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = linalg::norm2(&dir);
        if norm > 1e-12 {
            let u: f64 = rng.gen::<f64>();
            let r = radius * u.powf(1.0 / dim as f64);
            return dir.iter().map(|v| v * r / norm).collect();
        }
    }
}
