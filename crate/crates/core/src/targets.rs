//! Synthetic conditional data families with exact samplers, time-`t`
//! densities and oracle scores.
//!
//! Conditions `y` are drawn uniformly on `[0, 1]^{d_y}`. Every family is
//! immutable after construction.

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, GaussRule};
use crate::schedule::noise_schedule;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::sync::OnceLock;

const LN_2PI: f64 = 1.8378770664093453;

/// One mixture component with affine mean map `mu(y) = offset + slope * y`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub offset: Vec<f64>,
    /// Row-major `d_x x d_y`.
    pub slope: Vec<f64>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture whose component means depend affinely on `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureFamily {
    d_x: usize,
    d_y: usize,
    components: Vec<MixtureComponent>,
}

/// `p(x|y) = exp(-C2 |x|^2 / 2) f(x, y) / Z(y)` with
/// `f = C + amp * prod_i cos(omega_i x_i) * cos(nu . y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongHolderFamily {
    c2: f64,
    base: f64,
    amp: f64,
    omega: Vec<f64>,
    nu: Vec<f64>,
    /// `Z(y) = z_a + z_b * cos(nu . y)`, both cached by quadrature.
    z_a: f64,
    z_b: f64,
}

/// `x = U h` with `h` drawn from a low-dimensional mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFamily {
    u: DMatrix<f64>,
    latent: GaussianMixtureFamily,
}

/// `d_x` conditionally independent copies of one 1-D mixture sharing `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductFamily {
    d_x: usize,
    base: GaussianMixtureFamily,
}

/// Any of the supported conditional families.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Mixture(GaussianMixtureFamily),
    Strong(StrongHolderFamily),
    Latent(LatentFamily),
    Product(ProductFamily),
}

/// Constants of the Gaussian tail bound `p(x|y) <= c1 exp(-c2 |x|^2 / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBound {
    pub c1: f64,
    pub c2: f64,
}

fn hermite_prob(n: usize, u: f64) -> f64 {
    // probabilists' Hermite polynomial He_n
    let (mut a, mut b) = (1.0, u);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let c = u * b - k as f64 * a;
        a = b;
        b = c;
    }
    b
}

/// `d^n/du^n` of the `N(0, s^2)` density at `u`.
pub fn gaussian_derivative(n: usize, u: f64, s: f64) -> f64 {
    let z = u / s;
    let phi = (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt());
    (-1.0 / s).powi(n as i32) * hermite_prob(n, z) * phi
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "{what}: expected {want} entries, got {got}"
        )));
    }
    Ok(())
}

fn positive_time(t: f64) -> Result<crate::schedule::ScheduleValue> {
    let s = noise_schedule(t)?;
    if s.sigma == 0.0 {
        return Err(Error::SingularKernel { t });
    }
    Ok(s)
}

fn hermite64() -> &'static GaussRule {
    static RULE: OnceLock<GaussRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(64))
}

fn uniform_condition<R: Rng + ?Sized>(d_y: usize, rng: &mut R) -> Vec<f64> {
    (0..d_y).map(|_| rng.random::<f64>()).collect()
}

impl GaussianMixtureFamily {
    pub fn new(d_x: usize, d_y: usize, components: Vec<MixtureComponent>) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::Config("mixture needs d_x >= 1".into()));
        }
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        for (k, c) in components.iter().enumerate() {
            if !(c.weight >= 0.0) || !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::Config(format!(
                    "component {k}: weight must be >= 0 and variance > 0"
                )));
            }
            check_len(&format!("component {k} offset"), c.offset.len(), d_x)?;
            check_len(&format!("component {k} slope"), c.slope.len(), d_x * d_y)?;
        }
        Ok(Self {
            d_x,
            d_y,
            components,
        })
    }

    /// `N(0, I_{d_x})` independent of `y`.
    pub fn standard(d_x: usize, d_y: usize) -> Self {
        Self::gaussian(vec![0.0; d_x], d_y, 1.0)
    }

    /// Single `N(mean, variance I)` independent of `y`.
    pub fn gaussian(mean: Vec<f64>, d_y: usize, variance: f64) -> Self {
        let d_x = mean.len();
        Self::new(
            d_x,
            d_y,
            vec![MixtureComponent {
                weight: 1.0,
                offset: mean,
                slope: vec![0.0; d_x * d_y],
                variance,
            }],
        )
        .expect("valid single Gaussian")
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Component mean `mu_k(y)`.
    pub fn mean(&self, k: usize, y: &[f64]) -> Vec<f64> {
        let c = &self.components[k];
        (0..self.d_x)
            .map(|i| {
                c.offset[i]
                    + (0..self.d_y)
                        .map(|j| c.slope[i * self.d_y + j] * y[j])
                        .sum::<f64>()
            })
            .collect()
    }

    fn sample_x<R: Rng + ?Sized>(&self, y: &[f64], rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let mu = self.mean(k, y);
        let s = self.components[k].variance.sqrt();
        let x = mu
            .iter()
            .map(|m| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (k, x)
    }

    /// Draws `(component index, x, y)`.
    pub fn sample_labelled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>, Vec<f64>) {
        let y = uniform_condition(self.d_y, rng);
        let (k, x) = self.sample_x(&y, rng);
        (k, x, y)
    }

    /// Per-component log weights plus log densities at time `t`, and the
    /// component means / variances at `t`.
    fn component_terms(
        &self,
        x: &[f64],
        y: &[f64],
        alpha: f64,
        sigma: f64,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let d = self.d_x as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut means = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            let m: Vec<f64> = self.mean(k, y).into_iter().map(|v| alpha * v).collect();
            let v = alpha * alpha * c.variance + sigma * sigma;
            let r2: f64 = x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            let lw = if c.weight > 0.0 {
                c.weight.ln()
            } else {
                f64::NEG_INFINITY
            };
            logs.push(lw - 0.5 * d * (LN_2PI + v.ln()) - 0.5 * r2 / v);
            means.push(m);
            vars.push(v);
        }
        (logs, means, vars)
    }

    pub fn log_density(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        check_len("x", x.len(), self.d_x)?;
        check_len("y", y.len(), self.d_y)?;
        let s = noise_schedule(t)?;
        let (logs, _, _) = self.component_terms(x, y, s.alpha, s.sigma);
        Ok(log_sum_exp(&logs))
    }

    pub fn score(&self, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.d_x)?;
        check_len("y", y.len(), self.d_y)?;
        let s = positive_time(t)?;
        let (logs, means, vars) = self.component_terms(x, y, s.alpha, s.sigma);
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; self.d_x];
        for k in 0..logs.len() {
            let r = (logs[k] - lse).exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..self.d_x {
                out[i] -= r * (x[i] - means[k][i]) / vars[k];
            }
        }
        Ok(out)
    }

    /// Mixed partial derivative `d^{n_x}_x d^{n_y}_y p_0(x|y)`.
    ///
    /// Each `d/dy_j` acts on a component as `sum_i (-A_ij) d/du_i` with
    /// `u = x - mu(y)`; the resulting operator polynomial in `d/du` is applied
    /// through Hermite derivatives of the Gaussian factors.
    pub fn derivative(&self, x: &[f64], y: &[f64], n_x: &[usize], n_y: &[usize]) -> f64 {
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if c.weight == 0.0 {
                continue;
            }
            let mut ops: Vec<(Vec<usize>, f64)> = vec![(n_x.to_vec(), 1.0)];
            for j in 0..self.d_y {
                for _ in 0..n_y[j] {
                    let mut next: Vec<(Vec<usize>, f64)> = Vec::new();
                    for (m, coef) in &ops {
                        for i in 0..self.d_x {
                            let a = -c.slope[i * self.d_y + j];
                            if a == 0.0 {
                                continue;
                            }
                            let mut m2 = m.clone();
                            m2[i] += 1;
                            match next.iter_mut().find(|(mm, _)| *mm == m2) {
                                Some(e) => e.1 += coef * a,
                                None => next.push((m2, coef * a)),
                            }
                        }
                    }
                    ops = next;
                }
            }
            let mu = self.mean(k, y);
            let s = c.variance.sqrt();
            let comp: f64 = ops
                .iter()
                .map(|(m, coef)| {
                    coef * (0..self.d_x)
                        .map(|i| gaussian_derivative(m[i], x[i] - mu[i], s))
                        .product::<f64>()
                })
                .sum();
            total += c.weight * comp;
        }
        total
    }

    pub fn tail_bound(&self) -> TailBound {
        let d = self.d_x as f64;
        let mut s2_max: f64 = 0.0;
        let mut c1 = 0.0;
        for c in &self.components {
            s2_max = s2_max.max(c.variance);
            // max over the unit cube of |mu(y)|, bounded by |b| + sum_j |A_j|
            let mut m = c.offset.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..self.d_y {
                m += (0..self.d_x)
                    .map(|i| c.slope[i * self.d_y + j].powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
            // (|x| - m)^2 >= |x|^2 / 2 - m^2
            c1 += c.weight
                * (2.0 * PI * c.variance).powf(-0.5 * d)
                * (m * m / (2.0 * c.variance)).exp();
        }
        TailBound {
            c1,
            c2: 1.0 / (2.0 * s2_max),
        }
    }
}

impl StrongHolderFamily {
    pub fn new(c2: f64, base: f64, amp: f64, omega: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::Config("strong family needs d_x >= 1".into()));
        }
        if !(c2 > 0.0) || !(base > 0.0) || !(amp >= 0.0) || !(amp < base) {
            return Err(Error::Config(format!(
                "strong family needs C2 > 0 and 0 <= amp < C, got C2 = {c2}, C = {base}, amp = {amp}"
            )));
        }
        let rule = gauss_hermite(64);
        // int exp(-c2 x^2 / 2) g(x) dx = sqrt(2 / c2) sum w g(sqrt(2 / c2) u)
        let scale = (2.0 / c2).sqrt();
        let axis = |w: f64| -> f64 {
            scale
                * rule
                    .nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(u, q)| q * (w * scale * u).cos())
                    .sum::<f64>()
        };
        let z_a = base * omega.iter().map(|_| axis(0.0)).product::<f64>();
        let z_b = amp * omega.iter().map(|&w| axis(w)).product::<f64>();
        Ok(Self {
            c2,
            base,
            amp,
            omega,
            nu,
            z_a,
            z_b,
        })
    }

    pub fn d_x(&self) -> usize {
        self.omega.len()
    }

    pub fn d_y(&self) -> usize {
        self.nu.len()
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn amp(&self) -> f64 {
        self.amp
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Cached normalization coefficients `(A, B)` with `Z(y) = A + B g(y)`.
    pub fn normalization_parts(&self) -> (f64, f64) {
        (self.z_a, self.z_b)
    }

    pub fn g(&self, y: &[f64]) -> f64 {
        self.nu.iter().zip(y).map(|(a, b)| a * b).sum::<f64>().cos()
    }

    pub fn normalization(&self, y: &[f64]) -> f64 {
        self.z_a + self.z_b * self.g(y)
    }

    /// The unnormalized smooth factor `f(x, y)`.
    pub fn f(&self, x: &[f64], y: &[f64]) -> f64 {
        self.base
            + self.amp
                * self
                    .omega
                    .iter()
                    .zip(x)
                    .map(|(w, v)| (w * v).cos())
                    .product::<f64>()
                * self.g(y)
    }

    /// Mixed partial derivative of `f`.
    pub fn f_derivative(&self, x: &[f64], y: &[f64], n_x: &[usize], n_y: &[usize]) -> f64 {
        let total: usize = n_x.iter().chain(n_y).sum();
        let cos_deriv = |n: usize, w: f64, v: f64| -> f64 {
            // d^n/dv^n cos(w v) = w^n cos(w v + n pi / 2)
            w.powi(n as i32) * (w * v + n as f64 * PI / 2.0).cos()
        };
        let mut px = 1.0;
        for i in 0..self.omega.len() {
            px *= cos_deriv(n_x[i], self.omega[i], x[i]);
        }
        // d^{n_y} cos(nu . y) = prod nu_j^{n_j} * cos(nu . y + |n_y| pi / 2)
        let ny: usize = n_y.iter().sum();
        let arg: f64 = self.nu.iter().zip(y).map(|(a, b)| a * b).sum();
        let mut gy = (arg + ny as f64 * PI / 2.0).cos();
        for j in 0..self.nu.len() {
            gy *= self.nu[j].powi(n_y[j] as i32);
        }
        let pert = self.amp * px * gy;
        if total == 0 {
            self.base + pert
        } else {
            pert
        }
    }

    /// `grad_x f(x, y)`.
    pub fn f_grad(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let d = self.d_x();
        (0..d)
            .map(|i| {
                let mut n = vec![0; d];
                n[i] = 1;
                self.f_derivative(x, y, &n, &vec![0; self.d_y()])
            })
            .collect()
    }

    /// `alpha_t^2 + C2 sigma_t^2`, `hat_alpha`, `hat_sigma`.
    pub fn hat(&self, t: f64) -> Result<(f64, f64, f64)> {
        let s = noise_schedule(t)?;
        let den = s.alpha * s.alpha + self.c2 * s.sigma * s.sigma;
        Ok((den, s.alpha / den, s.sigma / den.sqrt()))
    }

    fn quadrature_check(&self) -> Result<()> {
        if self.d_x() > 2 {
            return Err(Error::UnsupportedDimension(format!(
                "strong-Holder quadrature oracle supports d_x <= 2, got {}",
                self.d_x()
            )));
        }
        Ok(())
    }

    /// Visits the tensor Gauss–Hermite nodes of `E[g(center + spread xi)]`
    /// for a standard normal `xi`, passing each node and its weight.
    fn gauss_expect<G: FnMut(&[f64], f64)>(
        rule: &GaussRule,
        d: usize,
        center: &[f64],
        spread: f64,
        mut g: G,
    ) {
        let n = rule.nodes.len();
        let norm = PI.powf(-0.5 * d as f64);
        let mut z = vec![0.0; d];
        let mut idx = vec![0usize; d];
        loop {
            let mut w = norm;
            for a in 0..d {
                z[a] = center[a] + spread * std::f64::consts::SQRT_2 * rule.nodes[idx[a]];
                w *= rule.weights[idx[a]];
            }
            g(&z, w);
            let mut a = 0;
            loop {
                if a == d {
                    return;
                }
                idx[a] += 1;
                if idx[a] < n {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
        }
    }

    /// `h(x, y, t) = E[f(hat_alpha x + hat_sigma xi, y)]` and its gradient in `x`.
    pub fn h_and_grad(&self, x: &[f64], y: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        self.quadrature_check()?;
        check_len("x", x.len(), self.d_x())?;
        check_len("y", y.len(), self.d_y())?;
        let (_, ha, hs) = self.hat(t)?;
        let d = self.d_x();
        let center: Vec<f64> = x.iter().map(|v| ha * v).collect();
        let ag = self.amp * self.g(y);
        let mut mean_cos = 0.0;
        let mut grad = vec![0.0; d];
        let mut cs = [0.0; 2];
        let mut sn = [0.0; 2];
        Self::gauss_expect(hermite64(), d, &center, hs, |z, w| {
            for i in 0..d {
                (sn[i], cs[i]) = (self.omega[i] * z[i]).sin_cos();
            }
            let prod: f64 = cs[..d].iter().product();
            mean_cos += w * prod;
            for i in 0..d {
                let others: f64 = (0..d).filter(|&j| j != i).map(|j| cs[j]).product();
                grad[i] -= w * self.omega[i] * sn[i] * others;
            }
        });
        for g in grad.iter_mut() {
            *g *= ag * ha;
        }
        Ok((self.base + ag * mean_cos, grad))
    }

    /// Closed form of `h`, used to cross-check the quadrature.
    pub fn h_closed_form(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        let (_, ha, hs) = self.hat(t)?;
        let prod: f64 = self
            .omega
            .iter()
            .zip(x)
            .map(|(w, v)| (w * ha * v).cos() * (-0.5 * w * w * hs * hs).exp())
            .product();
        Ok(self.base + self.amp * self.g(y) * prod)
    }

    pub fn log_density(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        let (den, _, _) = self.hat(t)?;
        let (h, _) = self.h_and_grad(x, y, t)?;
        let r2: f64 = x.iter().map(|v| v * v).sum();
        Ok(
            -0.5 * self.d_x() as f64 * den.ln() - 0.5 * self.c2 * r2 / den + h.ln()
                - self.normalization(y).ln(),
        )
    }

    pub fn score(&self, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        positive_time(t)?;
        let (den, _, _) = self.hat(t)?;
        let (h, gh) = self.h_and_grad(x, y, t)?;
        Ok(x.iter()
            .zip(&gh)
            .map(|(v, g)| -self.c2 * v / den + g / h)
            .collect())
    }

    fn sample_x<R: Rng + ?Sized>(&self, y: &[f64], rng: &mut R) -> Vec<f64> {
        let s = 1.0 / self.c2.sqrt();
        let top = self.base + self.amp;
        loop {
            let x: Vec<f64> = (0..self.d_x())
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let u: f64 = rng.random();
            if u * top <= self.f(&x, y) {
                return x;
            }
        }
    }

    /// Lower bound `C1 = C - amp` of `h`.
    pub fn h_lower(&self) -> f64 {
        self.base - self.amp
    }

    pub fn tail_bound(&self) -> TailBound {
        TailBound {
            c1: (self.base + self.amp) / (self.z_a - self.z_b.abs()),
            c2: self.c2,
        }
    }
}

impl LatentFamily {
    pub fn new(u: DMatrix<f64>, latent: GaussianMixtureFamily) -> Result<Self> {
        if u.ncols() != latent.d_x() {
            return Err(Error::Shape(format!(
                "U has {} columns but the latent mixture has dimension {}",
                u.ncols(),
                latent.d_x()
            )));
        }
        let gram = u.transpose() * &u;
        let err = (gram - DMatrix::<f64>::identity(u.ncols(), u.ncols()))
            .abs()
            .max();
        if err > 1e-10 {
            return Err(Error::Config(format!(
                "U is not column-orthonormal (error {err:e})"
            )));
        }
        Ok(Self { u, latent })
    }

    /// A random column-orthonormal `d_x x d_0` matrix (QR of a Gaussian matrix).
    pub fn random_basis<R: Rng + ?Sized>(d_x: usize, d_0: usize, rng: &mut R) -> DMatrix<f64> {
        let g = DMatrix::<f64>::from_fn(d_x, d_0, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        q.columns(0, d_0).into_owned()
    }

    pub fn d_x(&self) -> usize {
        self.u.nrows()
    }

    pub fn d_0(&self) -> usize {
        self.u.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.latent.d_y()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn latent(&self) -> &GaussianMixtureFamily {
        &self.latent
    }

    fn split(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let xv = DVector::from_column_slice(x);
        let h = self.u.transpose() * &xv;
        let perp = &xv - &self.u * &h;
        (h, perp)
    }

    pub fn log_density(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        check_len("x", x.len(), self.d_x())?;
        let s = positive_time(t)?;
        let (h, perp) = self.split(x);
        let lh = self.latent.log_density(h.as_slice(), y, t)?;
        let k = (self.d_x() - self.d_0()) as f64;
        let v = s.sigma * s.sigma;
        Ok(lh - 0.5 * k * (LN_2PI + v.ln()) - 0.5 * perp.norm_squared() / v)
    }

    pub fn score(&self, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.d_x())?;
        let s = positive_time(t)?;
        let (h, perp) = self.split(x);
        let sh = DVector::from_vec(self.latent.score(h.as_slice(), y, t)?);
        let out = &self.u * sh - perp / (s.sigma * s.sigma);
        Ok(out.as_slice().to_vec())
    }
}

impl ProductFamily {
    pub fn new(d_x: usize, base: GaussianMixtureFamily) -> Result<Self> {
        if base.d_x() != 1 {
            return Err(Error::Config(
                "product family needs a 1-D base mixture".into(),
            ));
        }
        if d_x == 0 {
            return Err(Error::Config("product family needs d_x >= 1".into()));
        }
        Ok(Self { d_x, base })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.base.d_y()
    }

    pub fn base(&self) -> &GaussianMixtureFamily {
        &self.base
    }

    pub fn log_density(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        check_len("x", x.len(), self.d_x)?;
        x.iter().map(|&v| self.base.log_density(&[v], y, t)).sum()
    }

    pub fn score(&self, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.d_x)?;
        x.iter()
            .map(|&v| Ok(self.base.score(&[v], y, t)?[0]))
            .collect()
    }
}

impl Family {
    pub fn d_x(&self) -> usize {
        match self {
            Family::Mixture(m) => m.d_x(),
            Family::Strong(s) => s.d_x(),
            Family::Latent(l) => l.d_x(),
            Family::Product(p) => p.d_x(),
        }
    }

    pub fn d_y(&self) -> usize {
        match self {
            Family::Mixture(m) => m.d_y(),
            Family::Strong(s) => s.d_y(),
            Family::Latent(l) => l.d_y(),
            Family::Product(p) => p.d_y(),
        }
    }

    /// Stable 64-bit fingerprint of every parameter, used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn tail_bound(&self) -> Option<TailBound> {
        match self {
            Family::Mixture(m) => Some(m.tail_bound()),
            Family::Strong(s) => Some(s.tail_bound()),
            Family::Product(p) => {
                let b = p.base.tail_bound();
                Some(TailBound {
                    c1: b.c1.powi(p.d_x as i32),
                    c2: b.c2,
                })
            }
            Family::Latent(_) => None,
        }
    }
}

/// Draws `y ~ U[0,1]^{d_y}` and then `x_0 ~ p_0(.|y)`.
pub fn sample_pair<R: Rng + ?Sized>(family: &Family, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let y = uniform_condition(family.d_y(), rng);
    let x = draw_x(family, &y, rng);
    (x, y)
}

/// `x_0 ~ p_0(.|y)` for a fixed condition.
pub fn sample_given<R: Rng + ?Sized>(family: &Family, y: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if y.len() != family.d_y() {
        return Err(Error::Shape(format!(
            "condition has {} entries, expected {}",
            y.len(),
            family.d_y()
        )));
    }
    Ok(draw_x(family, y, rng))
}

fn draw_x<R: Rng + ?Sized>(family: &Family, y: &[f64], rng: &mut R) -> Vec<f64> {
    match family {
        Family::Mixture(m) => m.sample_x(y, rng).1,
        Family::Strong(s) => s.sample_x(y, rng),
        Family::Latent(l) => {
            let (_, h) = l.latent.sample_x(y, rng);
            (&l.u * DVector::from_vec(h)).as_slice().to_vec()
        }
        Family::Product(p) => (0..p.d_x).map(|_| p.base.sample_x(y, rng).1[0]).collect(),
    }
}

/// Exact `grad_x log p_t(x|y)`; requires `t > 0`.
pub fn oracle_score(family: &Family, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
    positive_time(t)?;
    match family {
        Family::Mixture(m) => m.score(x, y, t),
        Family::Strong(s) => s.score(x, y, t),
        Family::Latent(l) => l.score(x, y, t),
        Family::Product(p) => p.score(x, y, t),
    }
}

/// Exact `log p_t(x|y)`.
pub fn oracle_log_density(family: &Family, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    match family {
        Family::Mixture(m) => m.log_density(x, y, t),
        Family::Strong(s) => s.log_density(x, y, t),
        Family::Latent(l) => l.log_density(x, y, t),
        Family::Product(p) => p.log_density(x, y, t),
    }
}

/// Exact `p_t(x|y)`.
pub fn oracle_density(family: &Family, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    oracle_log_density(family, x, y, t).map(f64::exp)
}
