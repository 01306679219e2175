//! Ornstein–Uhlenbeck forward process `dX = -X/2 dt + dW`.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// `(alpha_t, sigma_t)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValue {
    pub alpha: f64,
    pub sigma: f64,
    pub t: f64,
}

/// Early-stopping window `[t0, T]` and the number of backward steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub t0: f64,
    pub t_max: f64,
    pub steps: usize,
}

impl TimeWindow {
    pub fn new(t0: f64, t_max: f64, steps: usize) -> Result<Self> {
        if !(t0 > 0.0 && t0.is_finite() && t_max.is_finite() && t0 < t_max) {
            return Err(Error::Config(format!(
                "time window requires 0 < t0 < T, got t0 = {t0}, T = {t_max}"
            )));
        }
        if steps == 0 {
            return Err(Error::Config("time window requires steps >= 1".into()));
        }
        Ok(Self { t0, t_max, steps })
    }

    pub fn step_size(&self) -> f64 {
        (self.t_max - self.t0) / self.steps as f64
    }
}

/// `alpha_t = exp(-t/2)`, `sigma_t = sqrt(1 - exp(-t))`.
pub fn noise_schedule(t: f64) -> Result<ScheduleValue> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be >= 0, got {t}")));
    }
    Ok(ScheduleValue {
        alpha: (-0.5 * t).exp(),
        sigma: (-(-t).exp_m1()).sqrt(),
        t,
    })
}

/// `-(x_t - alpha_t x_0) / sigma_t^2`.
pub fn kernel_score(x_t: &[f64], x_0: &[f64], t: f64) -> Result<Vec<f64>> {
    if x_t.len() != x_0.len() {
        return Err(Error::Shape(format!(
            "kernel_score: x_t has {} entries, x_0 has {}",
            x_t.len(),
            x_0.len()
        )));
    }
    let s = noise_schedule(t)?;
    if s.sigma == 0.0 {
        return Err(Error::SingularKernel { t });
    }
    let var = s.sigma * s.sigma;
    Ok(x_t
        .iter()
        .zip(x_0)
        .map(|(&xt, &x0)| -(xt - s.alpha * x0) / var)
        .collect())
}

/// Draws `alpha_t x_0 + sigma_t eps`.
pub fn forward_sample<R: Rng + ?Sized>(x_0: &[f64], t: f64, rng: &mut R) -> Result<Vec<f64>> {
    let s = noise_schedule(t)?;
    Ok(x_0
        .iter()
        .map(|&x| {
            let e: f64 = rng.sample(StandardNormal);
            s.alpha * x + s.sigma * e
        })
        .collect())
}

/// Euler–Maruyama discretization of the reverse-time SDE
/// `dX = [X/2 + score(X, y, T - tau)] dtau + dW`, started from `N(0, I)` and
/// run for `steps` uniform steps until forward time `t0`.
///
/// `score_fn` receives the forward time `s = T - tau`.
pub fn backward_sample<F, R>(
    score_fn: F,
    window: &TimeWindow,
    d_x: usize,
    y: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], Option<&[f64]>, f64) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let h = window.step_size();
    let sqrt_h = h.sqrt();
    let mut x: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
    for k in 0..window.steps {
        let s = window.t_max - k as f64 * h;
        let score = score_fn(&x, y, s)?;
        if score.len() != d_x {
            return Err(Error::Shape(format!(
                "score_fn returned {} entries, expected {d_x}",
                score.len()
            )));
        }
        if score.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("score_fn at forward time {s}"),
                step: k,
            });
        }
        for (xi, si) in x.iter_mut().zip(&score) {
            let z: f64 = rng.sample(StandardNormal);
            *xi += h * (0.5 * *xi + si) + sqrt_h * z;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    const LN4: f64 = std::f64::consts::LN_2 * 2.0;

    #[test]
    fn schedule_examples() {
        let s = noise_schedule(0.0).unwrap();
        assert_eq!((s.alpha, s.sigma), (1.0, 0.0));
        let s = noise_schedule(LN4).unwrap();
        assert!((s.alpha - 0.5).abs() < 1e-15);
        assert!((s.sigma - 0.75f64.sqrt()).abs() < 1e-15);
        let s = noise_schedule(50.0).unwrap();
        assert!((s.alpha - 1.388794386496402e-11).abs() < 1e-20);
        assert!((s.sigma - 1.0).abs() < 1e-12);
        assert!(matches!(noise_schedule(-1e-3), Err(Error::Domain(_))));
    }

    #[test]
    fn small_t_sigma_has_no_cancellation() {
        let s = noise_schedule(1e-12).unwrap();
        assert!((s.sigma - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn kernel_score_examples() {
        let s = noise_schedule(0.7).unwrap();
        let z = kernel_score(&[s.alpha * 1.3], &[1.3], 0.7).unwrap();
        assert!(z[0].abs() < 1e-15);
        let k = kernel_score(&[1.0], &[0.0], LN4).unwrap();
        assert!((k[0] + 4.0 / 3.0).abs() < 1e-12);
        let k = kernel_score(&[1.0, 1.0], &[0.0, 2.0], LN4).unwrap();
        assert!((k[0] + 4.0 / 3.0).abs() < 1e-12);
        assert!(k[1].abs() < 1e-12);
        assert!(matches!(
            kernel_score(&[1.0], &[0.0], 0.0),
            Err(Error::SingularKernel { .. })
        ));
    }

    #[test]
    fn forward_sample_examples() {
        let mut rng = seeded(3);
        assert_eq!(
            forward_sample(&[1.5, -2.0], 0.0, &mut rng).unwrap(),
            vec![1.5, -2.0]
        );

        let got = forward_sample(&[0.0], LN4, &mut seeded(11)).unwrap()[0];
        let eps: f64 = seeded(11).sample(StandardNormal);
        assert!((got - 0.75f64.sqrt() * eps).abs() < 1e-15);

        let mut rng = seeded(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| forward_sample(&[2.0], LN4, &mut rng).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se);
        // variance of the sample variance of a Gaussian: 2 sigma^4 / (n - 1)
        let var_se = (2.0 * 0.75f64.powi(2) / (n - 1) as f64).sqrt();
        assert!((var - 0.75).abs() < 5.0 * var_se);
    }

    #[test]
    fn backward_sample_stationary_score() {
        let w = TimeWindow::new(0.05, 8.0, 200).unwrap();
        let mut rng = seeded(17);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                backward_sample(
                    |x, _, _| Ok(x.iter().map(|v| -v).collect()),
                    &w,
                    1,
                    None,
                    &mut rng,
                )
                .unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn backward_sample_gaussian_mean_two() {
        // p_t = N(2 alpha_t, 1) so the score is -(x - 2 alpha_t)
        let w = TimeWindow::new(0.05, 8.0, 400).unwrap();
        let mut rng = seeded(23);
        let n = 10_000;
        let score = |x: &[f64], _: Option<&[f64]>, t: f64| {
            let a = (-0.5 * t).exp();
            Ok(vec![-(x[0] - 2.0 * a)])
        };
        let mean = (0..n)
            .map(|_| backward_sample(score, &w, 1, None, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn backward_sample_single_step_matches_hand_update() {
        let w = TimeWindow::new(0.5, 2.0, 1).unwrap();
        let score = |x: &[f64], _: Option<&[f64]>, t: f64| Ok(vec![-x[0] * t]);
        let got = backward_sample(score, &w, 1, None, &mut seeded(9)).unwrap()[0];
        let mut rng = seeded(9);
        let x0: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let h = 1.5;
        let want = x0 + h * (0.5 * x0 - 2.0 * x0) + h.sqrt() * z;
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn backward_sample_reports_non_finite_step() {
        let w = TimeWindow::new(0.1, 1.0, 10).unwrap();
        let score =
            |_: &[f64], _: Option<&[f64]>, t: f64| Ok(vec![if t < 0.5 { f64::NAN } else { 0.0 }]);
        match backward_sample(score, &w, 1, None, &mut seeded(1)) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn window_validation() {
        assert!(TimeWindow::new(1.0, 1.0, 3).is_err());
        assert!(TimeWindow::new(0.0, 1.0, 3).is_err());
        assert!(TimeWindow::new(0.1, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_sigma_unit_circle(t in 0.0f64..60.0) {
            let s = noise_schedule(t).unwrap();
            prop_assert!((s.alpha * s.alpha + s.sigma * s.sigma - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kernel_score_is_linear_in_x_t(t in 0.01f64..10.0, x in -5.0f64..5.0, x0 in -5.0f64..5.0) {
            let h = 1e-3;
            let up = kernel_score(&[x + h], &[x0], t).unwrap()[0];
            let dn = kernel_score(&[x - h], &[x0], t).unwrap()[0];
            let s = noise_schedule(t).unwrap();
            let slope = (up - dn) / (2.0 * h);
            let want = -1.0 / (s.sigma * s.sigma);
            prop_assert!((slope - want).abs() < 1e-6 * want.abs());
        }
    }
}
