//! Estimation-side metrics: covering-number bound, guided score, histogram
//! TV distance, subspace recovery error, and the trend sweeps.

use crate::error::{Error, Result};
use crate::rng::{stream, stream_seed};
use crate::schedule::TimeWindow;
use crate::targets::{Family, GaussianMixtureFamily, MixtureComponent, ProductFamily};
use crate::training::{empirical_loss, sample_dataset, score_risk, train, ScoreNet, TrainConfig};
use crate::transformer::{norm_report, DiTConfig, DiTModel, NormReport};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Norm bounds entering the log-covering number of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverInputs {
    pub eps_c: f64,
    pub n: f64,
    /// Token length.
    pub l: f64,
    /// Bound on `||X||_{2,inf}` of the inputs.
    pub r_t: f64,
    pub c_f: f64,
    pub c_f_2inf: f64,
    pub c_ov: f64,
    pub c_ov_2inf: f64,
    pub c_kq: f64,
    pub c_kq_2inf: f64,
    pub c_e: f64,
    /// Token dimension.
    pub d: f64,
}

impl CoverInputs {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eps_c", self.eps_c),
            ("n", self.n),
            ("L", self.l),
            ("C_F", self.c_f),
            ("C_F_2inf", self.c_f_2inf),
            ("C_OV", self.c_ov),
            ("C_OV_2inf", self.c_ov_2inf),
            ("C_KQ", self.c_kq),
            ("C_KQ_2inf", self.c_kq_2inf),
            ("C_E", self.c_e),
            ("d", self.d),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.r_t >= 0.0) || !self.r_t.is_finite() {
            return Err(Error::Config(format!("R_T must be >= 0, got {}", self.r_t)));
        }
        Ok(())
    }

    /// Bounds read off a trained model: per-block maxima of
    /// `C_F = ||W_1|| ||W_2||`, `C_OV = ||W_O|| ||W_V||`,
    /// `C_KQ = ||W_K|| ||W_Q||` (spectral and (2,inf) alike), `C_E` the
    /// largest `||E^T||_{2,inf}`.
    pub fn from_report(
        rep: &NormReport,
        blocks: usize,
        eps_c: f64,
        n: f64,
        l: f64,
        r_t: f64,
        d: f64,
    ) -> Self {
        let get = |b: usize, name: &str| rep.get(&format!("block{b}.{name}")).cloned();
        let mut c = Self {
            eps_c,
            n,
            l,
            r_t,
            c_f: 0.0,
            c_f_2inf: 0.0,
            c_ov: 0.0,
            c_ov_2inf: 0.0,
            c_kq: 0.0,
            c_kq_2inf: 0.0,
            c_e: 0.0,
            d,
        };
        for b in 0..blocks {
            let pair = |x: &str, y: &str| match (get(b, x), get(b, y)) {
                (Some(p), Some(q)) => (p.spectral * q.spectral, p.two_inf * q.two_inf),
                _ => (0.0, 0.0),
            };
            let f = pair("W_1", "W_2");
            let ov = pair("W_O", "W_V");
            let kq = pair("W_K", "W_Q^T");
            c.c_f = c.c_f.max(f.0);
            c.c_f_2inf = c.c_f_2inf.max(f.1);
            c.c_ov = c.c_ov.max(ov.0);
            c.c_ov_2inf = c.c_ov_2inf.max(ov.1);
            c.c_kq = c.c_kq.max(kq.0);
            c.c_kq_2inf = c.c_kq_2inf.max(kq.1);
            c.c_e = c.c_e.max(get(b, "E^T").map_or(0.0, |m| m.two_inf));
        }
        c
    }
}

/// `log(nL)/eps^2 * alpha^2 * (d^{2/3} C_F^{2,inf 4/3}
/// + d^{2/3} (2 C_F^2 C_OV C_KQ^{2,inf})^{2/3} + 2 (C_F^2 C_OV^{2,inf})^{2/3})^3`
/// with `alpha = C_F^2 C_OV (1 + 4 C_KQ)(R_T + C_E)`.
pub fn covering_bound(inp: &CoverInputs) -> f64 {
    let p23 = |v: f64| v.powf(2.0 / 3.0);
    let cf2 = inp.c_f * inp.c_f;
    let alpha = cf2 * inp.c_ov * (1.0 + 4.0 * inp.c_kq) * (inp.r_t + inp.c_e);
    let d23 = p23(inp.d);
    let inner = d23 * inp.c_f_2inf.powf(4.0 / 3.0)
        + d23 * p23(2.0 * cf2 * inp.c_ov * inp.c_kq_2inf)
        + 2.0 * p23(cf2 * inp.c_ov_2inf);
    (inp.n * inp.l).ln() / (inp.eps_c * inp.eps_c) * alpha * alpha * inner.powi(3)
}

/// `(1 + eta) s(x, y, t) - eta s(x, null, t)`.
pub fn guided_score<M: ScoreNet + ?Sized>(
    model: &M,
    x: &[f64],
    y: &[f64],
    t: f64,
    eta: f64,
) -> Result<Vec<f64>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!(
            "guidance strength must be >= 0, got {eta}"
        )));
    }
    let cond = model.score(x, Some(y), t)?;
    if eta == 0.0 {
        return Ok(cond);
    }
    let uncond = model.score(x, None, t)?;
    Ok(cond
        .iter()
        .zip(&uncond)
        .map(|(c, u)| (1.0 + eta) * c - eta * u)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TVReport {
    pub tv: f64,
    /// Bins per axis inside the range (two overflow bins per axis are added).
    pub bins: usize,
    pub samples_per_side: (usize, usize),
}

fn sample_dim(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(
            "TV estimate needs nonempty sample sets".into(),
        ));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("samples have mixed dimensions".into()));
    }
    if d == 0 || d > 2 {
        return Err(Error::UnsupportedDimension(format!(
            "TV histogram supports 1-D or 2-D samples, got {d}"
        )));
    }
    Ok(d)
}

/// Half-L1 distance of normalized histograms on the bounding box of both
/// sample sets.
pub fn tv_estimate(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize) -> Result<TVReport> {
    let d = sample_dim(a, b)?;
    let range: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let (lo, hi) = a
                .iter()
                .chain(b)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                    (l.min(v[k]), h.max(v[k]))
                });
            let pad = 1e-9 * (hi - lo).abs().max(1.0);
            (lo - pad, hi + pad)
        })
        .collect();
    tv_estimate_on(a, b, bins, &range)
}

/// Half-L1 distance of normalized histograms on `bins` equal cells per axis
/// of `range`, plus one underflow and one overflow cell per axis.
pub fn tv_estimate_on(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    bins: usize,
    range: &[(f64, f64)],
) -> Result<TVReport> {
    let d = sample_dim(a, b)?;
    if bins == 0 || range.len() != d || range.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Config(
            "TV estimate needs bins >= 1 and a valid range per axis".into(),
        ));
    }
    let side = bins + 2;
    let cell = |v: &[f64]| {
        let mut idx = 0;
        for (k, &(lo, hi)) in range.iter().enumerate() {
            let c = if v[k] < lo {
                0
            } else if v[k] >= hi {
                side - 1
            } else {
                1 + (((v[k] - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            };
            idx = idx * side + c;
        }
        idx
    };
    let total = side.pow(d as u32);
    let mut ha = vec![0usize; total];
    let mut hb = vec![0usize; total];
    a.iter().for_each(|v| ha[cell(v)] += 1);
    b.iter().for_each(|v| hb[cell(v)] += 1);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let tv = 0.5
        * ha.iter()
            .zip(&hb)
            .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
            .sum::<f64>();
    Ok(TVReport {
        tv: tv.clamp(0.0, 1.0),
        bins,
        samples_per_side: (a.len(), b.len()),
    })
}

/// `||W_U W_U^T - U U^T||_F^2`.
pub fn subspace_error(w_u: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<f64> {
    if w_u.shape() != u.shape() {
        return Err(Error::Shape(format!(
            "W_U is {:?} but U is {:?}",
            w_u.shape(),
            u.shape()
        )));
    }
    Ok((w_u * w_u.transpose() - u * u.transpose()).norm_squared())
}

/// One sweep coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    Dx(usize),
    T0(f64),
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Dx(d) => write!(f, "d_x={d}"),
            Setting::T0(t) => write!(f, "t0={t}"),
        }
    }
}

/// Two-component 1-D mixture with condition-dependent means, the per
/// coordinate law of the matched product families.
pub fn trend_base_mixture() -> GaussianMixtureFamily {
    GaussianMixtureFamily::new(
        1,
        1,
        vec![
            MixtureComponent {
                weight: 0.5,
                offset: vec![-1.0],
                slope: vec![0.5],
                variance: 0.25,
            },
            MixtureComponent {
                weight: 0.5,
                offset: vec![1.0],
                slope: vec![-0.5],
                variance: 0.25,
            },
        ],
    )
    .expect("valid base mixture")
}

pub fn matched_family(d_x: usize) -> Result<Family> {
    Ok(Family::Product(ProductFamily::new(
        d_x,
        trend_base_mixture(),
    )?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendConfig {
    pub train: TrainConfig,
    /// Token dimension of the model; must divide every swept `d_x`.
    pub token_dim: usize,
    pub blocks: usize,
    pub s: usize,
    /// `d_x` used when sweeping `t0`.
    pub d_x: usize,
    /// Held-out samples for the test loss.
    pub test_n: usize,
    pub risk_points: usize,
}

/// One `(setting, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub setting: Setting,
    pub seed: u64,
    /// `Err(failure)` when training or evaluation failed.
    pub result: std::result::Result<TrendMetrics, CellFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    /// Stable tag from [`Error::code`].
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendMetrics {
    pub test_loss: f64,
    pub test_stderr: f64,
    pub risk: f64,
    pub stderr: f64,
    pub norm_wo_2inf: f64,
    pub norm_wv_2inf: f64,
}

/// Per-setting medians over successful seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendSummary {
    pub setting: Setting,
    pub cells: usize,
    pub test_loss: f64,
    /// Root-mean-square of the per-seed test-loss standard errors.
    pub test_stderr: f64,
    pub risk: f64,
    pub stderr: f64,
    pub norm_wo_2inf: f64,
    pub norm_wv_2inf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
    pub summary: Vec<TrendSummary>,
}

pub const TREND_COLUMNS: [&str; 9] = [
    "setting",
    "seed",
    "test_loss",
    "risk",
    "stderr",
    "norm_WO_2inf",
    "norm_WV_2inf",
    "test_stderr",
    "status",
];

fn run_cell(setting: Setting, seed: u64, cfg: &TrendConfig) -> Result<TrendMetrics> {
    let (d_x, window) = match setting {
        Setting::Dx(d) => (d, cfg.train.window),
        Setting::T0(t0) => (
            cfg.d_x,
            TimeWindow::new(t0, cfg.train.window.t_max, cfg.train.window.steps)?,
        ),
    };
    let family = matched_family(d_x)?;
    let cell_seed = stream_seed(cfg.train.seed, &format!("trend:{setting}"), seed);
    let mut init = stream(cell_seed, "init", 0);
    let model = DiTModel::new(
        &DiTConfig::new(d_x, family.d_y(), cfg.token_dim, cfg.blocks, cfg.s),
        &mut init,
    )?;
    let tc = TrainConfig {
        window,
        seed: cell_seed,
        ..cfg.train.clone()
    };
    let out = train(model, &family, &tc)?;
    let loss_cfg = tc.loss()?;
    let test = sample_dataset(&family, cfg.test_n, cell_seed, "test-data");
    let per: Vec<f64> = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            empirical_loss(
                &out.model,
                std::slice::from_ref(s),
                &loss_cfg,
                stream_seed(cell_seed, "test-draw", i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let test_loss = per.iter().sum::<f64>() / n;
    let test_var = per.iter().map(|v| (v - test_loss).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let m = &out.model;
    let risk = score_risk(
        |x: &[f64], y: Option<&[f64]>, t: f64| m.forward(x, y, t),
        &family,
        &window,
        cfg.risk_points,
        &mut stream(cell_seed, "risk", 0),
    )?;
    let rep = norm_report(m);
    Ok(TrendMetrics {
        test_loss,
        test_stderr: (test_var / n).sqrt(),
        risk: risk.risk,
        stderr: risk.stderr,
        norm_wo_2inf: rep.max_two_inf("W_O"),
        norm_wv_2inf: rep.max_two_inf("W_V"),
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Trains and evaluates every `(setting, seed)` cell; failed cells are kept
/// as rows with an error status.
pub fn trend_experiment(
    settings: &[Setting],
    seeds: &[u64],
    cfg: &TrendConfig,
) -> Result<TrendTable> {
    if settings.is_empty() || seeds.is_empty() {
        return Err(Error::Config("trend sweep needs settings and seeds".into()));
    }
    cfg.train.validate()?;
    let cells: Vec<(Setting, u64)> = settings
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&k| (s, k)))
        .collect();
    let rows: Vec<TrendRow> = cells
        .par_iter()
        .map(|&(setting, seed)| TrendRow {
            setting,
            seed,
            result: run_cell(setting, seed, cfg).map_err(|e| CellFailure {
                code: e.code(),
                message: e.to_string(),
            }),
        })
        .collect();
    let summary = settings
        .iter()
        .map(|&setting| {
            let ok: Vec<TrendMetrics> = rows
                .iter()
                .filter(|r| r.setting == setting)
                .filter_map(|r| r.result.as_ref().ok().copied())
                .collect();
            let col = |f: fn(&TrendMetrics) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
            TrendSummary {
                setting,
                cells: ok.len(),
                test_loss: median(&mut col(|m| m.test_loss)),
                test_stderr: rms(&col(|m| m.test_stderr)),
                risk: median(&mut col(|m| m.risk)),
                stderr: rms(&col(|m| m.stderr)),
                norm_wo_2inf: median(&mut col(|m| m.norm_wo_2inf)),
                norm_wv_2inf: median(&mut col(|m| m.norm_wv_2inf)),
            }
        })
        .collect();
    Ok(TrendTable { rows, summary })
}

/// Checks that `values` move in the given direction with at most one
/// adjacent inversion, and that inversion no larger than twice the
/// standard error of the difference.
pub fn monotone_within_noise(values: &[f64], stderrs: &[f64], increasing: bool) -> bool {
    let mut inversions = 0;
    for i in 1..values.len() {
        let step = if increasing {
            values[i] - values[i - 1]
        } else {
            values[i - 1] - values[i]
        };
        if !values[i].is_finite() || !values[i - 1].is_finite() {
            return false;
        }
        if step < 0.0 {
            inversions += 1;
            let se = (stderrs[i].powi(2) + stderrs[i - 1].powi(2)).sqrt();
            if inversions > 1 || -step > 2.0 * se {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit() -> CoverInputs {
        let e = std::f64::consts::E;
        CoverInputs {
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
        }
    }

    #[test]
    fn covering_examples() {
        let base = unit();
        let v = covering_bound(&base);
        // 2 * 25 * (3 + 2^{2/3})^3, evaluated at 40 digits
        assert!((v - 4826.920365062455).abs() < 1e-12 * v);
        let half = CoverInputs { eps_c: 0.5, ..base };
        assert!((covering_bound(&half) / v - 4.0).abs() < 1e-14);
        let c = 3.0;
        let s = CoverInputs {
            r_t: 0.7 * c,
            c_e: 1.3 * c,
            ..base
        };
        let s0 = CoverInputs {
            r_t: 0.7,
            c_e: 1.3,
            ..base
        };
        assert!((covering_bound(&s) / covering_bound(&s0) - c * c).abs() < 1e-12);
        assert!(base.validate().is_ok());
        assert!(CoverInputs { c_f: 0.0, ..base }.validate().is_err());
    }

    proptest! {
        #[test]
        fn covering_monotone(k in 0usize..11, f in 1.0f64..3.0) {
            let base = CoverInputs { r_t: 0.5, ..unit() };
            let mut up = base;
            match k {
                0 => up.c_f *= f,
                1 => up.c_f_2inf *= f,
                2 => up.c_ov *= f,
                3 => up.c_ov_2inf *= f,
                4 => up.c_kq *= f,
                5 => up.c_kq_2inf *= f,
                6 => up.c_e *= f,
                7 => up.r_t *= f,
                8 => up.n *= f,
                9 => up.d *= f,
                _ => up.l *= f,
            }
            prop_assert!(covering_bound(&up) >= covering_bound(&base));
            let e2 = CoverInputs { eps_c: base.eps_c / f, ..base };
            prop_assert!((covering_bound(&e2) / covering_bound(&base) / (f * f) - 1.0).abs() < 1e-12);
        }
    }

    struct Affine;
    impl ScoreNet for Affine {
        fn score(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
            let c = y.map_or(-0.7, |y| y[0]);
            Ok(x.iter().map(|v| v * c + t).collect())
        }
    }
    struct Blind;
    impl ScoreNet for Blind {
        fn score(&self, x: &[f64], _: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
            Ok(x.iter().map(|v| v * t).collect())
        }
    }

    #[test]
    fn guided_score_examples() {
        let (x, y, t) = ([0.5, -1.0], [2.0], 0.3);
        let s = Affine.score(&x, Some(&y), t).unwrap();
        let n = Affine.score(&x, None, t).unwrap();
        assert_eq!(guided_score(&Affine, &x, &y, t, 0.0).unwrap(), s);
        let g1 = guided_score(&Affine, &x, &y, t, 1.0).unwrap();
        for i in 0..2 {
            assert!((g1[i] - (2.0 * s[i] - n[i])).abs() < 1e-14);
        }
        for eta in [0.0, 0.5, 3.0] {
            let g = guided_score(&Blind, &x, &y, t, eta).unwrap();
            let b = Blind.score(&x, None, t).unwrap();
            assert!(g.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-14));
        }
        // collinear in eta
        let g0 = guided_score(&Affine, &x, &y, t, 0.0).unwrap();
        let g2 = guided_score(&Affine, &x, &y, t, 2.0).unwrap();
        for i in 0..2 {
            assert!((g1[i] - 0.5 * (g0[i] + g2[i])).abs() < 1e-13);
        }
        assert!(guided_score(&Affine, &x, &y, t, -1.0).is_err());
    }

    fn normals(n: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut r = seeded(seed);
        (0..n)
            .map(|_| vec![mean + r.sample::<f64, _>(StandardNormal)])
            .collect()
    }

    #[test]
    fn tv_examples() {
        let a = normals(1000, 0.0, 1);
        assert_eq!(tv_estimate(&a, &a, 50).unwrap().tv, 0.0);
        let far = normals(1000, 100.0, 2);
        assert!(tv_estimate(&a, &far, 50).unwrap().tv > 1.0 - 1.0 / 1000.0);
        let b = normals(100_000, 1.0, 4);
        let a = normals(100_000, 0.0, 3);
        let r = tv_estimate_on(&a, &b, 200, &[(-6.0, 7.0)]).unwrap();
        assert!((r.tv - 0.3829).abs() < 0.02, "{r:?}");
        let three = vec![vec![0.0; 3]];
        assert!(matches!(
            tv_estimate(&three, &three, 10),
            Err(Error::UnsupportedDimension(_))
        ));
        let two: Vec<Vec<f64>> = (0..500).map(|i| vec![i as f64 / 500.0, 0.3]).collect();
        assert_eq!(tv_estimate(&two, &two, 8).unwrap().tv, 0.0);
    }

    #[test]
    fn tv_contracts_with_samples() {
        let truth = 0.382_924_922_548_026;
        let mut prev: Option<f64> = None;
        for (k, n) in [12_500usize, 25_000, 50_000, 100_000]
            .into_iter()
            .enumerate()
        {
            let a = normals(n, 0.0, 10 + k as u64);
            let b = normals(n, 1.0, 20 + k as u64);
            let err = (tv_estimate_on(&a, &b, 200, &[(-6.0, 7.0)]).unwrap().tv - truth).abs();
            if let Some(p) = prev {
                assert!(err <= p.max(0.01), "error {err} after {p}");
            }
            prev = Some(err);
        }
    }

    fn orthonormal(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        crate::targets::LatentFamily::random_basis(n, k, &mut seeded(seed))
    }

    #[test]
    fn subspace_examples() {
        let u = orthonormal(5, 2, 1);
        assert!(subspace_error(&u, &u).unwrap() < 1e-24);
        let q = orthonormal(2, 2, 2);
        assert!(subspace_error(&(&u * &q), &u).unwrap() < 1e-10);
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((subspace_error(&e2, &e1).unwrap() - 2.0).abs() < 1e-15);
        assert!(subspace_error(&e1, &u).is_err());
        let w = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.1);
        for s in 0..5 {
            let q = orthonormal(2, 2, 10 + s);
            let base = subspace_error(&w, &u).unwrap();
            assert!((subspace_error(&(&w * &q), &u).unwrap() - base).abs() < 1e-10);
            assert!((subspace_error(&w, &(&u * &q)).unwrap() - base).abs() < 1e-10);
        }
    }

    #[test]
    fn monotone_check() {
        assert!(monotone_within_noise(&[1.0, 2.0, 3.0], &[0.1; 3], true));
        assert!(monotone_within_noise(&[1.0, 2.0, 1.9], &[0.1; 3], true));
        assert!(!monotone_within_noise(&[1.0, 2.0, 1.0], &[0.1; 3], true));
        assert!(!monotone_within_noise(
            &[1.0, 0.9, 2.0, 1.9],
            &[0.1; 4],
            true
        ));
        assert!(monotone_within_noise(&[3.0, 2.0, 1.0], &[0.0; 3], false));
    }

    #[test]
    fn degenerate_sweep_agrees_across_settings() {
        let cfg = TrendConfig {
            train: TrainConfig {
                n: 64,
                batch: 32,
                lr: 0.01,
                epochs: 2,
                window: TimeWindow::new(0.1, 3.0, 20).unwrap(),
                mask_prob: 0.5,
                time_draws: 1,
                seed: 5,
            },
            token_dim: 2,
            blocks: 1,
            s: 2,
            d_x: 4,
            test_n: 64,
            risk_points: 200,
        };
        let t = trend_experiment(
            &[Setting::Dx(4), Setting::Dx(4), Setting::Dx(4)],
            &[0, 1, 2],
            &cfg,
        )
        .unwrap();
        assert_eq!(t.rows.len(), 9);
        assert!(t.rows.iter().all(|r| r.result.is_ok()));
        assert_eq!(t.summary[0], t.summary[1]);
        assert_eq!(t.summary[1], t.summary[2]);
        let bad = trend_experiment(&[Setting::Dx(3)], &[0], &cfg).unwrap();
        assert!(bad.rows[0].result.is_err());
    }
}
