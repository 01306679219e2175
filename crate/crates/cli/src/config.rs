//! Experiment configuration: a TOML document with one table per concern.
//!
//! ```toml
//! seed = 7
//!
//! [family]
//! kind = "standard"
//! d_x = 1
//! d_y = 1
//!
//! [schedule]
//! t0 = 0.05
//! t_max = 3.0
//! steps = 100
//! ```
//!
//! Every table is optional and falls back to the defaults below; unknown
//! keys are rejected.

use condit::evaluation::{trend_base_mixture, CoverInputs};
use condit::rng::stream;
use condit::schedule::TimeWindow;
use condit::targets::{
    Family, GaussianMixtureFamily, LatentFamily, MixtureComponent, ProductFamily,
    StrongHolderFamily,
};
use condit::training::TrainConfig;
use condit::transformer::DiTConfig;
use serde::{Deserialize, Serialize};
use std::fmt;

/// A rejected configuration, with the offending location.
#[derive(Debug)]
pub struct ConfigError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        location: format!("field `{field}`"),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub family: FamilySpec,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub risk: RiskSpec,
    pub approx: ApproxSpec,
    pub uat: UatSpec,
    pub cover: CoverSpec,
    pub tv: TvSpec,
    pub trend: TrendSpec,
    pub sample: SampleSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub offset: Vec<f64>,
    /// Row-major `d_x x d_y`.
    pub slope: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilySpec {
    /// `N(0, I)` regardless of the condition.
    Standard { d_x: usize, d_y: usize },
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
        d_y: usize,
    },
    Mixture {
        d_x: usize,
        d_y: usize,
        components: Vec<ComponentSpec>,
    },
    /// Product of the fixed two-component 1-D mixture used by the trend sweeps.
    Matched { d_x: usize },
    /// Standard latent Gaussian on a random `d_0`-dimensional subspace.
    Latent {
        d_x: usize,
        d_0: usize,
        d_y: usize,
        basis_seed: u64,
    },
    Strong {
        c2: f64,
        base: f64,
        amp: f64,
        omega: Vec<f64>,
        nu: Vec<f64>,
    },
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec::Standard { d_x: 1, d_y: 1 }
    }
}

impl FamilySpec {
    pub fn build(&self) -> Result<Family, ConfigError> {
        let wrap = |e: condit::Error| field_err("family", e.to_string());
        Ok(match self {
            FamilySpec::Standard { d_x, d_y } => {
                if *d_x == 0 {
                    return Err(field_err("family.d_x", "must be >= 1"));
                }
                Family::Mixture(GaussianMixtureFamily::standard(*d_x, *d_y))
            }
            FamilySpec::Gaussian {
                mean,
                variance,
                d_y,
            } => {
                if mean.is_empty() {
                    return Err(field_err("family.mean", "must be nonempty"));
                }
                if !(*variance > 0.0) {
                    return Err(field_err("family.variance", "must be > 0"));
                }
                Family::Mixture(GaussianMixtureFamily::gaussian(
                    mean.clone(),
                    *d_y,
                    *variance,
                ))
            }
            FamilySpec::Mixture {
                d_x,
                d_y,
                components,
            } => Family::Mixture(
                GaussianMixtureFamily::new(
                    *d_x,
                    *d_y,
                    components
                        .iter()
                        .map(|c| MixtureComponent {
                            weight: c.weight,
                            offset: c.offset.clone(),
                            slope: c.slope.clone(),
                            variance: c.variance,
                        })
                        .collect(),
                )
                .map_err(wrap)?,
            ),
            FamilySpec::Matched { d_x } => {
                Family::Product(ProductFamily::new(*d_x, trend_base_mixture()).map_err(wrap)?)
            }
            FamilySpec::Latent {
                d_x,
                d_0,
                d_y,
                basis_seed,
            } => {
                if *d_0 == 0 || d_0 > d_x {
                    return Err(field_err("family.d_0", "must be in 1..=d_x"));
                }
                let u = LatentFamily::random_basis(
                    *d_x,
                    *d_0,
                    &mut stream(*basis_seed, "latent-basis", 0),
                );
                Family::Latent(
                    LatentFamily::new(u, GaussianMixtureFamily::standard(*d_0, *d_y))
                        .map_err(wrap)?,
                )
            }
            FamilySpec::Strong {
                c2,
                base,
                amp,
                omega,
                nu,
            } => Family::Strong(
                StrongHolderFamily::new(*c2, *base, *amp, omega.clone(), nu.clone())
                    .map_err(wrap)?,
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t0: f64,
    pub t_max: f64,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t0: 0.05,
            t_max: 3.0,
            steps: 100,
        }
    }
}

impl ScheduleSpec {
    pub fn window(&self) -> Result<TimeWindow, ConfigError> {
        TimeWindow::new(self.t0, self.t_max, self.steps)
            .map_err(|e| field_err("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Token dimension; must divide `d_x` (or the latent dimension).
    pub d: usize,
    pub blocks: usize,
    pub s: usize,
    /// Feed-forward width, `4 s` when absent.
    pub r: Option<usize>,
    pub latent: Option<usize>,
    pub init_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d: 1,
            blocks: 1,
            s: 4,
            r: None,
            latent: None,
            init_scale: 0.05,
        }
    }
}

impl ModelSpec {
    pub fn dit_config(&self, d_x: usize, d_y: usize) -> Result<DiTConfig, ConfigError> {
        let trunk = self.latent.unwrap_or(d_x);
        if self.d == 0 || trunk % self.d != 0 {
            return Err(field_err(
                "model.d",
                format!("token dimension {} must divide {trunk}", self.d),
            ));
        }
        if self.blocks == 0 {
            return Err(field_err("model.blocks", "must be >= 1"));
        }
        if self.s == 0 {
            return Err(field_err("model.s", "must be >= 1"));
        }
        let mut cfg = DiTConfig::new(d_x, d_y, self.d, self.blocks, self.s);
        if let Some(r) = self.r {
            cfg.r = r;
        }
        cfg.latent = self.latent;
        cfg.init_scale = self.init_scale;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub n: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub mask_prob: f64,
    pub time_draws: usize,
    /// Monte-Carlo points for the end-of-training risk.
    pub risk_points: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            batch: 64,
            lr: 0.02,
            epochs: 50,
            mask_prob: 0.1,
            time_draws: 1,
            risk_points: 4000,
        }
    }
}

impl TrainSpec {
    pub fn train_config(&self, window: TimeWindow, seed: u64) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            n: self.n,
            batch: self.batch,
            lr: self.lr,
            epochs: self.epochs,
            window,
            mask_prob: self.mask_prob,
            time_draws: self.time_draws,
            seed,
        };
        cfg.validate()
            .map_err(|e| field_err("train", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    Oracle,
    Zero,
    Checkpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSpec {
    pub predictor: Predictor,
    pub checkpoint: Option<String>,
    pub mc_points: usize,
    /// Restricts the integrand to `||x_t||_inf <= r_trunc`.
    pub r_trunc: Option<f64>,
}

impl Default for RiskSpec {
    fn default() -> Self {
        Self {
            predictor: Predictor::Zero,
            checkpoint: None,
            mc_points: 4000,
            r_trunc: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxSpec {
    pub n: Vec<usize>,
    pub beta: f64,
    pub c_x: f64,
    pub t: f64,
    pub half_width: f64,
    pub points: usize,
    /// Conditions averaged over; one entry per condition.
    pub y: Vec<Vec<f64>>,
}

impl Default for ApproxSpec {
    fn default() -> Self {
        Self {
            n: vec![2, 4, 8, 16],
            beta: 2.0,
            c_x: 2.0,
            t: 0.5,
            half_width: 6.0,
            points: 601,
            y: vec![vec![0.5]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UatTarget {
    /// Every output entry is the sum of all inputs.
    Sum,
    Mean,
    Max,
    /// Entry-wise square.
    Square,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UatSpec {
    pub granularity: usize,
    pub d: usize,
    pub l: usize,
    pub target: UatTarget,
    pub delta_q: Option<f64>,
    pub r: Option<f64>,
}

impl Default for UatSpec {
    fn default() -> Self {
        Self {
            granularity: 3,
            d: 1,
            l: 2,
            target: UatTarget::Sum,
            delta_q: None,
            r: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverSpec {
    pub eps_c: f64,
    pub n: f64,
    pub l: f64,
    pub r_t: f64,
    pub c_f: f64,
    pub c_f_2inf: f64,
    pub c_ov: f64,
    pub c_ov_2inf: f64,
    pub c_kq: f64,
    pub c_kq_2inf: f64,
    pub c_e: f64,
    pub d: f64,
    /// Reads the `C_*` bounds, `L` and `d` from a trained model instead.
    pub checkpoint: Option<String>,
}

impl Default for CoverSpec {
    fn default() -> Self {
        let e = std::f64::consts::E;
        Self {
            eps_c: 1.0,
            n: e,
            l: e,
            r_t: 0.0,
            c_f: 1.0,
            c_f_2inf: 1.0,
            c_ov: 1.0,
            c_ov_2inf: 1.0,
            c_kq: 1.0,
            c_kq_2inf: 1.0,
            c_e: 1.0,
            d: 1.0,
            checkpoint: None,
        }
    }
}

impl CoverSpec {
    pub fn inputs(&self) -> CoverInputs {
        CoverInputs {
            eps_c: self.eps_c,
            n: self.n,
            l: self.l,
            r_t: self.r_t,
            c_f: self.c_f,
            c_f_2inf: self.c_f_2inf,
            c_ov: self.c_ov,
            c_ov_2inf: self.c_ov_2inf,
            c_kq: self.c_kq,
            c_kq_2inf: self.c_kq_2inf,
            c_e: self.c_e,
            d: self.d,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvSpec {
    pub samples: usize,
    pub bins: usize,
    /// Fixed condition; drawn per sample from the family when absent.
    pub y: Option<Vec<f64>>,
    pub checkpoint: Option<String>,
    pub eta: f64,
}

impl Default for TvSpec {
    fn default() -> Self {
        Self {
            samples: 10_000,
            bins: 40,
            y: None,
            checkpoint: None,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendSpec {
    /// Swept input dimensions (exclusive with `t0`).
    pub dx: Vec<usize>,
    /// Swept early-stopping times (exclusive with `dx`).
    pub t0: Vec<f64>,
    pub seeds: usize,
    /// `d_x` used by a `t0` sweep.
    pub d_x: usize,
    pub test_n: usize,
    pub risk_points: usize,
}

impl Default for TrendSpec {
    fn default() -> Self {
        Self {
            dx: Vec::new(),
            t0: Vec::new(),
            seeds: 3,
            d_x: 16,
            test_n: 2000,
            risk_points: 4000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub samples: usize,
    pub y: Option<Vec<f64>>,
    pub checkpoint: Option<String>,
    pub eta: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            samples: 1000,
            y: None,
            checkpoint: None,
            eta: 0.0,
        }
    }
}

/// Parses a config document; syntax and type errors carry the line and
/// column reported by the TOML parser.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("line {line}, column {col}")
            }
            None => "config".to_string(),
        };
        ConfigError {
            location,
            message: e.message().to_string(),
        }
    })
}
