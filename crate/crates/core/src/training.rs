//! Classifier-free-guidance score matching: loss draws, exact gradients,
//! clipped gradient descent, and Monte-Carlo score risk against oracles.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::schedule::{forward_sample, kernel_score, TimeWindow};
use crate::targets::{oracle_score, sample_pair, Family};
use crate::transformer::DiTModel;
use rand::Rng;
use rayon::prelude::*;

/// Anything that maps `(x, y or null, t)` to a score estimate.
pub trait ScoreNet: Sync {
    fn score(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>>;
}

impl ScoreNet for DiTModel {
    fn score(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
        self.forward(x, y, t)
    }
}

/// Parameters of a single loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub window: TimeWindow,
    /// Probability that the condition is replaced by the null token.
    pub mask_prob: f64,
    /// Number of `(t, noise)` draws averaged per sample.
    pub time_draws: usize,
}

impl LossConfig {
    pub fn new(window: TimeWindow, mask_prob: f64, time_draws: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob must lie in [0, 1], got {mask_prob}"
            )));
        }
        if time_draws == 0 {
            return Err(Error::Config("time_draws must be >= 1".into()));
        }
        Ok(Self {
            window,
            mask_prob,
            time_draws,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub window: TimeWindow,
    pub mask_prob: f64,
    pub time_draws: usize,
    pub seed: u64,
}

/// Global gradient-norm clip applied before every step.
pub const CLIP_NORM: f64 = 10.0;
/// Epoch loss above which training aborts.
pub const DIVERGENCE_LOSS: f64 = 1e6;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("n, batch and epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        self.loss().map(|_| ())
    }

    pub fn loss(&self) -> Result<LossConfig> {
        LossConfig::new(self.window, self.mask_prob, self.time_draws)
    }
}

/// One `(t, tau, x_t)` draw and its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    pub x_t: Vec<f64>,
    /// `None` when the condition was masked.
    pub y: Option<Vec<f64>>,
    pub t: f64,
    /// `grad log phi_t(x_t | x_0)`.
    pub target: Vec<f64>,
}

/// For each of `time_draws`: `t ~ U(t0, T)`, then the mask, then `x_t`.
pub fn draw_loss_terms<R: Rng + ?Sized>(
    x_0: &[f64],
    y: &[f64],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<Vec<LossDraw>> {
    (0..cfg.time_draws)
        .map(|_| {
            let t = rng.random_range(cfg.window.t0..cfg.window.t_max);
            let masked = rng.random::<f64>() < cfg.mask_prob;
            let x_t = forward_sample(x_0, t, rng)?;
            let target = kernel_score(&x_t, x_0, t)?;
            Ok(LossDraw {
                x_t,
                y: (!masked).then(|| y.to_vec()),
                t,
                target,
            })
        })
        .collect()
}

fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Loss of `model` on explicit draws (mean squared error over draws).
pub fn loss_on_draws<M: ScoreNet + ?Sized>(model: &M, draws: &[LossDraw]) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        total += squared_error(&model.score(&d.x_t, d.y.as_deref(), d.t)?, &d.target);
    }
    Ok(total / draws.len() as f64)
}

/// Single-sample classifier-free-guidance loss.
pub fn cfg_loss<M: ScoreNet + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_0: &[f64],
    y: &[f64],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_loss_terms(x_0, y, cfg, rng)?;
    loss_on_draws(model, &draws)
}

/// Loss and exact parameter gradient on explicit draws, each draw weighted
/// by `weight`.
fn accumulate(
    model: &DiTModel,
    draws: &[LossDraw],
    weight: f64,
    grad: &mut DiTModel,
) -> Result<f64> {
    let mut loss = 0.0;
    for d in draws {
        let (out, tape) = model.forward_cached(&d.x_t, d.y.as_deref(), d.t)?;
        let resid: Vec<f64> = out.iter().zip(&d.target).map(|(a, b)| a - b).collect();
        loss += weight * resid.iter().map(|r| r * r).sum::<f64>();
        let g: Vec<f64> = resid.iter().map(|r| 2.0 * weight * r).collect();
        model.backward(&tape, &g, grad)?;
    }
    Ok(loss)
}

fn check_gradient(grad: &DiTModel, step: usize) -> Result<()> {
    let mut bad = None;
    grad.visit(&mut |name, s| {
        if bad.is_none() && s.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::NonFinite {
            op: format!("gradient of {name}"),
            step,
        }),
        None => Ok(()),
    }
}

/// Mean loss over `draws` and its gradient.
pub fn gradients_on_draws(model: &DiTModel, draws: &[LossDraw]) -> Result<(f64, DiTModel)> {
    if draws.is_empty() {
        return Err(Error::Config("gradient needs at least one draw".into()));
    }
    let mut grad = model.zeros_like();
    let loss = accumulate(model, draws, 1.0 / draws.len() as f64, &mut grad)?;
    check_gradient(&grad, 0)?;
    Ok((loss, grad))
}

/// Mean batch loss and its exact gradient. Sample `i` draws its noise from
/// the stream `(seed, "loss-draw", i)` where `seed` comes from `rng`;
/// per-sample gradients are computed in parallel and summed in order.
pub fn gradients<R: Rng + ?Sized>(
    model: &DiTModel,
    batch: &[(Vec<f64>, Vec<f64>)],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<(f64, DiTModel)> {
    if batch.is_empty() {
        return Err(Error::Config("gradient needs a nonempty batch".into()));
    }
    let seed: u64 = rng.random();
    let weight = 1.0 / (batch.len() * cfg.time_draws) as f64;
    let parts: Vec<Result<(f64, DiTModel)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x0, y))| {
            let mut r = stream(seed, "loss-draw", i as u64);
            let draws = draw_loss_terms(x0, y, cfg, &mut r)?;
            let mut g = model.zeros_like();
            let l = accumulate(model, &draws, weight, &mut g)?;
            Ok((l, g))
        })
        .collect();
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grad.axpy(1.0, &g);
    }
    check_gradient(&grad, 0)?;
    Ok((loss, grad))
}

/// `n` pairs `(x_0, y)` from the named stream `(seed, purpose, 0)`.
pub fn sample_dataset(
    family: &Family,
    n: usize,
    seed: u64,
    purpose: &str,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = stream(seed, purpose, 0);
    (0..n).map(|_| sample_pair(family, &mut rng)).collect()
}

/// Mean single-draw loss over a dataset with per-sample streams.
pub fn empirical_loss<M: ScoreNet + ?Sized>(
    model: &M,
    data: &[(Vec<f64>, Vec<f64>)],
    cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, (x0, y))| cfg_loss(model, x0, y, cfg, &mut stream(seed, "eval-loss", i as u64)))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiTModel,
    /// Mean training loss per epoch.
    pub trace: Vec<f64>,
}

/// Minibatch clipped gradient descent on `n` samples drawn from `family`.
pub fn train(mut model: DiTModel, family: &Family, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if family.d_x() != model.d_x() || family.d_y() != model.d_y {
        return Err(Error::Shape(format!(
            "model is ({}, {}) but family is ({}, {})",
            model.d_x(),
            model.d_y,
            family.d_x(),
            family.d_y()
        )));
    }
    let loss_cfg = cfg.loss()?;
    let data = sample_dataset(family, cfg.n, cfg.seed, "train-data");
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle = stream(cfg.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut rng = stream(cfg.seed, "batch", (epoch * data.len() + b) as u64);
            let (loss, mut grad) =
                gradients(&model, &batch, &loss_cfg, &mut rng).map_err(|e| match e {
                    Error::NonFinite { op, .. } => Error::NonFinite { op, step },
                    other => other,
                })?;
            total += loss * chunk.len() as f64;
            let norm = grad.norm_sq().sqrt();
            if norm > CLIP_NORM {
                grad.scale(CLIP_NORM / norm);
            }
            if cfg.lr > 0.0 {
                model.axpy(-cfg.lr, &grad);
            }
            step += 1;
        }
        let epoch_loss = total / data.len() as f64;
        trace.push(epoch_loss);
        if !(epoch_loss <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
                trace,
            });
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Monte-Carlo estimate of a nonnegative risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskReport {
    pub risk: f64,
    pub mc_points: usize,
    pub stderr: f64,
}

impl RiskReport {
    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            risk: mean,
            mc_points: v.len(),
            stderr: (var / n).sqrt(),
        }
    }
}

/// Squared errors against the oracle and `||x_t||_inf` at `mc_points`
/// draws `t ~ U(t0, T)`, `(x_0, y) ~ family`, `x_t ~ phi_t(.|x_0)`.
fn risk_terms<F>(
    score_fn: &F,
    family: &Family,
    window: &TimeWindow,
    mc_points: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&[f64], Option<&[f64]>, f64) -> Result<Vec<f64>> + Sync,
{
    if mc_points == 0 {
        return Err(Error::Config("risk needs mc_points >= 1".into()));
    }
    (0..mc_points)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "risk-point", i as u64);
            let t = rng.random_range(window.t0..window.t_max);
            let (x0, y) = sample_pair(family, &mut rng);
            let x_t = forward_sample(&x0, t, &mut rng)?;
            let est = score_fn(&x_t, Some(&y), t)?;
            let truth = oracle_score(family, &x_t, &y, t)?;
            if est.len() != truth.len() {
                return Err(Error::Shape(format!(
                    "score has {} entries, expected {}",
                    est.len(),
                    truth.len()
                )));
            }
            Ok((
                squared_error(&est, &truth),
                x_t.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            ))
        })
        .collect()
}

/// `(1/(T - t0)) int E ||s_hat - grad log p_t||^2 dt` by Monte Carlo.
pub fn score_risk<F, R>(
    score_fn: F,
    family: &Family,
    window: &TimeWindow,
    mc_points: usize,
    rng: &mut R,
) -> Result<RiskReport>
where
    F: Fn(&[f64], Option<&[f64]>, f64) -> Result<Vec<f64>> + Sync,
    R: Rng + ?Sized,
{
    let terms = risk_terms(&score_fn, family, window, mc_points, rng.random())?;
    Ok(RiskReport::from_values(
        &terms.iter().map(|p| p.0).collect::<Vec<_>>(),
    ))
}

/// `score_risk` with the integrand restricted to `||x_t||_inf <= r_trunc`
/// (`f64::INFINITY` disables the restriction).
pub fn truncated_risk<F, R>(
    score_fn: F,
    family: &Family,
    window: &TimeWindow,
    r_trunc: f64,
    mc_points: usize,
    rng: &mut R,
) -> Result<RiskReport>
where
    F: Fn(&[f64], Option<&[f64]>, f64) -> Result<Vec<f64>> + Sync,
    R: Rng + ?Sized,
{
    if !(r_trunc >= 0.0) {
        return Err(Error::Domain(format!(
            "truncation radius must be >= 0, got {r_trunc}"
        )));
    }
    let terms = risk_terms(&score_fn, family, window, mc_points, rng.random())?;
    let v: Vec<f64> = terms
        .iter()
        .map(|&(e, m)| if m <= r_trunc { e } else { 0.0 })
        .collect();
    Ok(RiskReport::from_values(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::targets::GaussianMixtureFamily;
    use crate::transformer::DiTConfig;
    use nalgebra::DMatrix;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn window() -> TimeWindow {
        TimeWindow::new(0.05, 3.0, 50).unwrap()
    }

    struct Zero(usize);
    impl ScoreNet for Zero {
        fn score(&self, _: &[f64], _: Option<&[f64]>, _: f64) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    struct Fixed(Vec<f64>);
    impl ScoreNet for Fixed {
        fn score(&self, _: &[f64], _: Option<&[f64]>, _: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct CountNull(AtomicUsize, AtomicUsize);
    impl ScoreNet for CountNull {
        fn score(&self, x: &[f64], y: Option<&[f64]>, _: f64) -> Result<Vec<f64>> {
            if y.is_none() { &self.0 } else { &self.1 }.fetch_add(1, Ordering::Relaxed);
            Ok(vec![0.0; x.len()])
        }
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::new(window(), 0.5, 1).unwrap();
        let x0 = [0.4, -1.2];
        let y = [0.3];
        let l = cfg_loss(&Zero(2), &x0, &y, &cfg, &mut seeded(5)).unwrap();
        let mut r = seeded(5);
        let t = r.random_range(cfg.window.t0..cfg.window.t_max);
        let _mask: f64 = r.random();
        let x_t = forward_sample(&x0, t, &mut r).unwrap();
        let s = crate::schedule::noise_schedule(t).unwrap();
        let want: f64 = x_t
            .iter()
            .zip(&x0)
            .map(|(a, b)| ((a - s.alpha * b) / (s.sigma * s.sigma)).powi(2))
            .sum();
        assert!((l - want).abs() < 1e-12 * want.max(1.0));

        let draws = draw_loss_terms(&x0, &y, &cfg, &mut seeded(6)).unwrap();
        let perfect = Fixed(draws[0].target.clone());
        assert_eq!(
            cfg_loss(&perfect, &x0, &y, &cfg, &mut seeded(6)).unwrap(),
            0.0
        );

        let all_null = LossConfig::new(window(), 1.0, 3).unwrap();
        let m = CountNull(AtomicUsize::new(0), AtomicUsize::new(0));
        for i in 0..20 {
            cfg_loss(&m, &x0, &y, &all_null, &mut seeded(i)).unwrap();
        }
        assert_eq!(
            (m.0.load(Ordering::Relaxed), m.1.load(Ordering::Relaxed)),
            (60, 0)
        );
        assert!(LossConfig::new(window(), 1.5, 1).is_err());
    }

    fn rand_model(seed: u64, d_x: usize, d: usize, s: usize) -> DiTModel {
        let mut rng = seeded(seed);
        let mut cfg = DiTConfig::new(d_x, 1, d, 1, s);
        cfg.r = 2 * s;
        let mut m = DiTModel::new(&cfg, &mut rng).unwrap();
        m.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = rng.random_range(-0.4..0.4)));
        m
    }

    fn batch(n: usize, d_x: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let fam = Family::Mixture(GaussianMixtureFamily::standard(d_x, 1));
        sample_dataset(&fam, n, seed, "test-batch")
    }

    #[test]
    fn gradients_match_finite_differences() {
        // d = 2, L = 3, s = 4, r = 8
        let m = rand_model(1, 6, 2, 4);
        assert_eq!(m.blocks[0].r(), 8);
        let data = batch(3, 6, 2);
        let cfg = LossConfig::new(TimeWindow::new(0.2, 2.0, 10).unwrap(), 0.5, 2).unwrap();
        let (_, grad) = gradients(&m, &data, &cfg, &mut seeded(3)).unwrap();
        let base = m.to_flat();
        let analytic = grad.to_flat();
        let loss_at = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat(p).unwrap();
            gradients(&mm, &data, &cfg, &mut seeded(3)).unwrap().0
        };
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            let up = loss_at(&p);
            p[k] -= 2.0 * h;
            let fd = (up - loss_at(&p)) / (2.0 * h);
            let a = analytic[k];
            assert!(
                (fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3),
                "param {k}: {fd} vs {a}"
            );
        }
    }

    #[test]
    fn dead_path_and_zero_model() {
        let mut m = rand_model(4, 4, 2, 3);
        for b in &mut m.blocks {
            b.w_o.fill(0.0);
        }
        let data = batch(4, 4, 5);
        let cfg = LossConfig::new(window(), 0.5, 1).unwrap();
        let (_, g) = gradients(&m, &data, &cfg, &mut seeded(6)).unwrap();
        assert!(g.blocks[0].w_v.iter().all(|v| *v == 0.0));
        assert!(g.blocks[0].w_o.iter().any(|v| *v != 0.0));

        let z = m.zeros_like();
        let (_, g) = gradients(&z, &data, &cfg, &mut seeded(6)).unwrap();
        assert!(g.w_y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_model_matches_least_squares() {
        let mut m = rand_model(7, 4, 2, 3);
        for b in &mut m.blocks {
            b.w_o.fill(0.0);
            b.w_2.fill(0.0);
            b.b_2.fill(0.0);
            b.e.fill(0.0);
        }
        let data = batch(5, 4, 8);
        let cfg = LossConfig::new(window(), 0.0, 1).unwrap();
        let mut draws = Vec::new();
        let mut r = seeded(9);
        for (x0, y) in &data {
            draws.extend(draw_loss_terms(x0, y, &cfg, &mut r).unwrap());
        }
        let (_, g) = gradients_on_draws(&m, &draws).unwrap();
        // out tokens = W R(x) + b; grad_W = (2/n) sum (W z + b - target) z^T
        let mut gw = DMatrix::zeros(2, 2);
        let mut gb = nalgebra::DVector::zeros(2);
        for d in &draws {
            let z = m.reshape.reshape(&d.x_t).unwrap();
            let tgt = m.reshape.reshape(&d.target).unwrap();
            let mut res = &m.head_w * &z - tgt;
            for mut c in res.column_iter_mut() {
                c += &m.head_b;
            }
            gw += &res * z.transpose() * (2.0 / draws.len() as f64);
            gb += res.column_sum() * (2.0 / draws.len() as f64);
        }
        assert!((g.head_w - gw).amax() < 1e-10);
        assert!((g.head_b - gb).amax() < 1e-10);
    }

    fn gaussian_1d() -> Family {
        Family::Mixture(GaussianMixtureFamily::standard(1, 1))
    }

    #[test]
    fn risk_examples() {
        let fam = Family::Mixture(GaussianMixtureFamily::standard(2, 1));
        let w = window();
        let oracle = |x: &[f64], y: Option<&[f64]>, t: f64| oracle_score(&fam, x, y.unwrap(), t);
        let r = score_risk(oracle, &fam, &w, 2000, &mut seeded(1)).unwrap();
        assert!(r.risk.abs() <= 3.0 * r.stderr + 1e-12);
        let zero = |x: &[f64], _: Option<&[f64]>, _: f64| Ok(vec![0.0; x.len()]);
        let r = score_risk(zero, &fam, &w, 20000, &mut seeded(2)).unwrap();
        assert!((r.risk - 2.0).abs() < 3.0 * r.stderr, "{r:?}");
        let shift = |x: &[f64], y: Option<&[f64]>, t: f64| {
            Ok(oracle_score(&fam, x, y.unwrap(), t)?
                .iter()
                .zip([0.3, -0.4])
                .map(|(a, c)| a + c)
                .collect())
        };
        let r = score_risk(shift, &fam, &w, 500, &mut seeded(3)).unwrap();
        assert!((r.risk - 0.25).abs() <= 3.0 * r.stderr + 1e-12);
    }

    #[test]
    fn truncated_risk_examples() {
        let fam = gaussian_1d();
        let w = window();
        let zero = |x: &[f64], _: Option<&[f64]>, _: f64| Ok(vec![0.0; x.len()]);
        let full = score_risk(zero, &fam, &w, 20000, &mut seeded(4)).unwrap();
        let inf = truncated_risk(zero, &fam, &w, f64::INFINITY, 20000, &mut seeded(4)).unwrap();
        assert_eq!(full, inf);
        assert_eq!(
            truncated_risk(zero, &fam, &w, 0.0, 1000, &mut seeded(4))
                .unwrap()
                .risk,
            0.0
        );
        let one = truncated_risk(zero, &fam, &w, 1.0, 40000, &mut seeded(5)).unwrap();
        assert!((one.risk - 0.1987).abs() < 3.0 * one.stderr, "{one:?}");
        assert!(one.risk <= full.risk + 3.0 * (one.stderr + full.stderr));
    }

    fn small_train_cfg() -> TrainConfig {
        TrainConfig {
            n: 128,
            batch: 32,
            lr: 0.01,
            epochs: 3,
            window: window(),
            mask_prob: 0.5,
            time_draws: 1,
            seed: 11,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = rand_model(12, 1, 1, 2);
        let mut cfg = small_train_cfg();
        cfg.lr = 0.0;
        let out = train(m.clone(), &gaussian_1d(), &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.trace.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = seeded(13);
        let m = DiTModel::new(&DiTConfig::new(1, 1, 1, 1, 2), &mut rng).unwrap();
        let a = train(m.clone(), &gaussian_1d(), &small_train_cfg()).unwrap();
        let b = train(m, &gaussian_1d(), &small_train_cfg()).unwrap();
        assert_eq!(
            a.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let mut rng = seeded(14);
        let m = DiTModel::new(&DiTConfig::new(1, 1, 1, 1, 2), &mut rng).unwrap();
        let mut cfg = small_train_cfg();
        cfg.lr = 1e6;
        match train(m, &gaussian_1d(), &cfg) {
            Err(Error::Divergence { trace, .. }) => assert!(!trace.is_empty()),
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_beats_zero_predictor() {
        let fam = gaussian_1d();
        let mut rng = seeded(15);
        let m = DiTModel::new(&DiTConfig::new(1, 1, 1, 1, 4), &mut rng).unwrap();
        let cfg = TrainConfig {
            n: 2000,
            batch: 64,
            lr: 0.02,
            epochs: 50,
            window: window(),
            mask_prob: 0.5,
            time_draws: 1,
            seed: 16,
        };
        let out = train(m, &fam, &cfg).unwrap();
        let zero = score_risk(
            |x: &[f64], _: Option<&[f64]>, _: f64| Ok(vec![0.0; x.len()]),
            &fam,
            &cfg.window,
            4000,
            &mut seeded(17),
        )
        .unwrap();
        let trained = score_risk(
            |x: &[f64], y: Option<&[f64]>, t: f64| out.model.forward(x, y, t),
            &fam,
            &cfg.window,
            4000,
            &mut seeded(17),
        )
        .unwrap();
        assert!(
            trained.risk < 0.5 * zero.risk,
            "trained {trained:?} vs zero {zero:?}"
        );
    }
}
