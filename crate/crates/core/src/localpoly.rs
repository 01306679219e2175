//! Diffused local polynomial score approximators.
//!
//! The initial density (or, under the strong assumption, the smooth factor
//! `f`) is replaced by piecewise Taylor polynomials on a grid: half-open
//! indicator cells in `x` and a trapezoid partition of unity in `y`. Each
//! piece is convolved with the Gaussian kernel whose exponential is replaced
//! by its degree-`k2` Taylor polynomial, restricted to a clipped window. The
//! result is a polynomial-in-disguise approximation `f1 ~ p_t` and
//! `f2 ~ sigma_t grad p_t`, assembled into a score estimate.
//!
//! Both kernels share one parametrization. With `s = (a z - c) / b` the
//! per-coordinate kernel is `exp(-s^2/2) / (b sqrt(2 pi))`:
//!
//! - generic: `a = alpha_t`, `c = x`, `b = sigma_t`, so the kernel is the
//!   forward transition density `N(x; alpha_t z, sigma_t^2)`;
//! - strong: `a = 1`, `c = hat_alpha x`, `b = hat_sigma`, the smoothing kernel
//!   of `h(x, y, t)`.
//!
//! Since cells, clip boxes, monomials and the truncated kernel all factor over
//! coordinates, every cell integral is a product of 1-D integrals of
//! polynomials, evaluated exactly by Gauss–Legendre quadrature.

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, GaussRule};
use crate::schedule::noise_schedule;
use crate::targets::{oracle_density, oracle_score, Family, StrongHolderFamily};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Hölder smoothness and Taylor orders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderParams {
    pub beta: f64,
    pub k1: usize,
    pub k2: usize,
    /// Largest absolute derivative seen on the table grid (filled in by
    /// [`taylor_table`]); a scale, not a certified radius.
    pub b_est: f64,
}

impl HolderParams {
    /// `k1 = floor(beta)` and `k2` from [`kernel_order`].
    pub fn new(beta: f64, grid: &GridSpec) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            beta,
            k1: beta.floor() as usize,
            k2: kernel_order(beta, grid),
            b_est: 0.0,
        })
    }

    pub fn with_k2(mut self, k2: usize) -> Result<Self> {
        if k2 == 0 {
            return Err(Error::Config("k2 must be >= 1".into()));
        }
        self.k2 = k2;
        Ok(self)
    }
}

/// Degree of the truncated exponential.
///
/// On the clip window the exponent `u = s^2/2` is at most
/// `u_max = C_x^2 ln N / 2`; the smallest even `k >= 4` with
/// `u_max^{k+1} / (k+1)! <= N^{-beta}` is returned (capped at 60). Even
/// degrees keep the truncated kernel strictly positive.
pub fn kernel_order(beta: f64, grid: &GridSpec) -> usize {
    let ln_n = (grid.n as f64).ln();
    let u_max = 0.5 * grid.c_x * grid.c_x * ln_n;
    let target = (-beta * ln_n).exp();
    let mut term = 1.0;
    let mut k = 0usize;
    loop {
        term *= u_max / (k + 1) as f64;
        if (k >= 4 && k % 2 == 0 && term <= target) || k >= 60 {
            return k;
        }
        k += 1;
    }
}

/// Grid resolution, clipping constant and dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub c_x: f64,
    pub d_x: usize,
    pub d_y: usize,
}

impl GridSpec {
    pub fn new(n: usize, c_x: f64, d_x: usize, d_y: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!(
                "grid resolution must be >= 2, got {n}"
            )));
        }
        if !(c_x > 0.0) {
            return Err(Error::Config(format!("C_x must be positive, got {c_x}")));
        }
        if d_x == 0 {
            return Err(Error::Config("grid needs d_x >= 1".into()));
        }
        Ok(Self { n, c_x, d_x, d_y })
    }

    /// `C_x sqrt(ln N)`: half-width of the global box and the clip radius in
    /// kernel units.
    pub fn half_width(&self) -> f64 {
        self.c_x * (self.n as f64).ln().sqrt()
    }

    /// `R_B`, the side of the global box.
    pub fn r_b(&self) -> f64 {
        2.0 * self.half_width()
    }

    pub fn cell_width(&self) -> f64 {
        self.r_b() / self.n as f64
    }

    /// Right endpoint of x-cell `v` in `1..=N`, the Taylor expansion point.
    pub fn cell_anchor(&self, v: usize) -> f64 {
        self.r_b() * (v as f64 / self.n as f64 - 0.5)
    }

    /// y-grid point `w / N` for `w` in `0..=N`.
    pub fn y_point(&self, w: usize) -> f64 {
        w as f64 / self.n as f64
    }

    pub fn x_cells(&self) -> usize {
        self.n.pow(self.d_x as u32)
    }

    pub fn y_points(&self) -> usize {
        (self.n + 1).pow(self.d_y as u32)
    }
}

/// A closed box `[lo_i, hi_i]`; empty when some `lo_i > hi_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ClipBox {
    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l > h)
    }
}

/// `1` on `|a| < 1`, `2 - |a|` on `[1, 2]`, `0` beyond.
pub fn trapezoid(a: f64) -> f64 {
    let m = a.abs();
    if m < 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0 - m
    } else {
        0.0
    }
}

fn clip_axis(c: f64, a: f64, b: f64, grid: &GridSpec) -> (f64, f64) {
    let w = grid.half_width();
    let lo = ((c - b * w) / a).max(-w);
    let hi = ((c + b * w) / a).min(w);
    (lo, hi)
}

/// Intersection of the `alpha_t`-rescaled kernel window around `x` with the
/// global box `[-C_x sqrt(ln N), C_x sqrt(ln N)]^{d_x}`.
pub fn clip_domain(x: &[f64], grid: &GridSpec, t: f64) -> Result<ClipBox> {
    let s = noise_schedule(t)?;
    let (lo, hi) = x
        .iter()
        .map(|&c| clip_axis(c, s.alpha, s.sigma, grid))
        .unzip();
    Ok(ClipBox { lo, hi })
}

/// A function whose mixed partial derivatives can be tabulated.
pub trait TaylorSource {
    fn d_x(&self) -> usize;
    fn d_y(&self) -> usize;
    fn value(&self, x: &[f64], y: &[f64]) -> Result<f64>;
    /// Analytic derivative, if available.
    fn derivative(&self, x: &[f64], y: &[f64], n_x: &[usize], n_y: &[usize]) -> Option<f64>;
    fn fingerprint(&self) -> u64;
}

impl TaylorSource for Family {
    fn d_x(&self) -> usize {
        Family::d_x(self)
    }

    fn d_y(&self) -> usize {
        Family::d_y(self)
    }

    fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if let Family::Latent(_) = self {
            return Err(Error::Domain(
                "a latent-subspace family has no Lebesgue density at t = 0".into(),
            ));
        }
        oracle_density(self, x, y, 0.0)
    }

    fn derivative(&self, x: &[f64], y: &[f64], n_x: &[usize], n_y: &[usize]) -> Option<f64> {
        match self {
            Family::Mixture(m) => Some(m.derivative(x, y, n_x, n_y)),
            _ => None,
        }
    }

    fn fingerprint(&self) -> u64 {
        Family::fingerprint(self)
    }
}

/// The smooth factor `f(x, y)` of a strong-Hölder family.
#[derive(Debug, Clone, Copy)]
pub struct StrongFactor<'a>(pub &'a StrongHolderFamily);

impl TaylorSource for StrongFactor<'_> {
    fn d_x(&self) -> usize {
        self.0.d_x()
    }

    fn d_y(&self) -> usize {
        self.0.d_y()
    }

    fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.0.f(x, y))
    }

    fn derivative(&self, x: &[f64], y: &[f64], n_x: &[usize], n_y: &[usize]) -> Option<f64> {
        Some(self.0.f_derivative(x, y, n_x, n_y))
    }

    fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(format!("strong-factor {:?}", self.0).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// All multi-indices of length `dim` with total order `<= max`, graded.
pub fn multi_indices(dim: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for order in 0..=max {
        let mut cur = vec![0; dim];
        fill(&mut out, &mut cur, 0, order);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 >= cur.len() {
        if cur.is_empty() {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        fill(out, cur, pos + 1, left - k);
    }
    cur[pos] = 0;
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Central finite difference of order `n` along every coordinate, step
/// `steps[i]` per coordinate.
fn finite_difference<S: TaylorSource + ?Sized>(
    src: &S,
    x: &[f64],
    y: &[f64],
    n: &[usize],
    steps: &[f64],
) -> Result<f64> {
    let dx = x.len();
    let mut point: Vec<f64> = x.iter().chain(y).cloned().collect();
    let base = point.clone();
    let axes: Vec<usize> = (0..n.len()).filter(|&i| n[i] > 0).collect();
    let mut idx = vec![0usize; axes.len()];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &a) in axes.iter().enumerate() {
            let m = n[a];
            let j = idx[k];
            point[a] = base[a] + (j as f64 - m as f64 / 2.0) * steps[a];
            let sign = if (m - j) % 2 == 0 { 1.0 } else { -1.0 };
            w *= sign * binomial(m, j) / steps[a].powi(m as i32);
        }
        total += w * src.value(&point[..dx], &point[dx..])?;
        let mut k = 0;
        loop {
            if k == axes.len() {
                return Ok(total);
            }
            idx[k] += 1;
            if idx[k] <= n[axes[k]] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Coefficient table of a diffused local polynomial.
///
/// Entry `(v, w, n)` stores `R_B^{|n_x|} / (n_x! n_y!) * d^n p(c_v, y_w)`, the
/// coefficient of `((z - c_v)/R_B)^{n_x} (y - y_w)^{n_y}`.
#[derive(Debug, Clone)]
pub struct DiffusedPoly {
    grid: GridSpec,
    holder: HolderParams,
    source_fingerprint: u64,
    multis: Vec<(Vec<usize>, Vec<usize>)>,
    coeffs: Vec<f64>,
    rule: GaussRule,
    min_positive_density: f64,
}

/// Output of one diffused-polynomial evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffused {
    pub f1: f64,
    pub f2: Vec<f64>,
    /// The clip box was empty; `f2` then comes from the nearest point whose
    /// window overlaps the box by one kernel width.
    pub clipped_empty: bool,
}

/// Kernel parametrization `s = (a z - c) / b`.
#[derive(Debug, Clone, Copy)]
struct KernelForm {
    a: f64,
    b: f64,
    /// `c_i = c_scale * x_i`.
    c_scale: f64,
}

fn mixed_index(mut flat: usize, base: usize, dim: usize) -> Vec<usize> {
    let mut out = vec![0; dim];
    for o in out.iter_mut() {
        *o = flat % base;
        flat /= base;
    }
    out
}

/// Builds the Taylor coefficient table of `source` on the grid.
///
/// Derivatives come from `source.derivative` when available and otherwise
/// from central finite differences with step `1e-3` times the cell width,
/// unless `finite_differences` is false, in which case a missing analytic
/// derivative of order >= 1 is an error.
pub fn taylor_table<S: TaylorSource + ?Sized>(
    source: &S,
    grid: &GridSpec,
    holder: &HolderParams,
    finite_differences: bool,
) -> Result<DiffusedPoly> {
    if source.d_x() != grid.d_x || source.d_y() != grid.d_y {
        return Err(Error::Shape(format!(
            "source has dims ({}, {}) but grid has ({}, {})",
            source.d_x(),
            source.d_y(),
            grid.d_x,
            grid.d_y
        )));
    }
    let multis: Vec<(Vec<usize>, Vec<usize>)> = multi_indices(grid.d_x + grid.d_y, holder.k1)
        .into_iter()
        .map(|m| (m[..grid.d_x].to_vec(), m[grid.d_x..].to_vec()))
        .collect();
    let rb = grid.r_b();
    let mut steps = vec![1e-3 * grid.cell_width(); grid.d_x];
    steps.extend(std::iter::repeat_n(1e-3 / grid.n as f64, grid.d_y));
    let n_cells = grid.x_cells();
    let n_w = grid.y_points();
    let mut coeffs = Vec::with_capacity(n_cells * n_w * multis.len());
    let mut b_est: f64 = 0.0;
    let mut min_pos = f64::INFINITY;
    for cell in 0..n_cells {
        let v = mixed_index(cell, grid.n, grid.d_x);
        let x: Vec<f64> = v.iter().map(|&vi| grid.cell_anchor(vi + 1)).collect();
        for wf in 0..n_w {
            let w = mixed_index(wf, grid.n + 1, grid.d_y);
            let y: Vec<f64> = w.iter().map(|&wi| grid.y_point(wi)).collect();
            for (nx, ny) in &multis {
                let order: usize = nx.iter().chain(ny).sum();
                let d = match source.derivative(&x, &y, nx, ny) {
                    Some(d) => d,
                    None if order == 0 => source.value(&x, &y)?,
                    None if finite_differences => {
                        let n: Vec<usize> = nx.iter().chain(ny).cloned().collect();
                        finite_difference(source, &x, &y, &n, &steps)?
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "no analytic derivative of order {order} and finite differences are disabled"
                        )))
                    }
                };
                if !d.is_finite() {
                    return Err(Error::NonFinite {
                        op: "taylor_table derivative".into(),
                        step: cell,
                    });
                }
                b_est = b_est.max(d.abs());
                if order == 0 && d > 0.0 {
                    min_pos = min_pos.min(d);
                }
                let nxs: usize = nx.iter().sum();
                let fact: f64 = nx.iter().chain(ny).map(|&k| factorial(k)).product();
                coeffs.push(rb.powi(nxs as i32) / fact * d);
            }
        }
    }
    let mut holder = *holder;
    holder.b_est = b_est;
    Ok(DiffusedPoly {
        grid: *grid,
        holder,
        source_fingerprint: source.fingerprint(),
        rule: quadrature_rule(&holder),
        multis,
        coeffs,
        min_positive_density: if min_pos.is_finite() { min_pos } else { 0.0 },
    })
}

fn quadrature_rule(holder: &HolderParams) -> GaussRule {
    // integrand degree: k1 (monomial) + 1 (score factor) + 2 k2 (kernel)
    let deg = holder.k1 + 1 + 2 * holder.k2;
    gauss_legendre(deg / 2 + 1)
}

fn truncated_exp_neg(u: f64, k: usize) -> f64 {
    // sum_{j <= k} (-u)^j / j!, Horner form
    let mut acc = 1.0;
    for j in (1..=k).rev() {
        acc = 1.0 - u * acc / j as f64;
    }
    acc
}

/// Per-axis cell integrals for one query.
struct AxisIntegrals {
    /// `(v, [I0_n], [I1_n])` for cells overlapping the window.
    cells: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

const MAGIC: &[u8; 8] = b"CDPOLY01";

impl DiffusedPoly {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn holder(&self) -> &HolderParams {
        &self.holder
    }

    pub fn source_fingerprint(&self) -> u64 {
        self.source_fingerprint
    }

    /// Stored monomials: `N^{d_x} (N+1)^{d_y}` cells times `C(d_x + d_y + k1, k1)`.
    pub fn monomial_count(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coefficient(
        &self,
        v: &[usize],
        w: &[usize],
        n_x: &[usize],
        n_y: &[usize],
    ) -> Option<f64> {
        let cell = v
            .iter()
            .rev()
            .fold(0, |acc, &vi| acc * self.grid.n + (vi - 1));
        let wf = w
            .iter()
            .rev()
            .fold(0, |acc, &wi| acc * (self.grid.n + 1) + wi);
        let m = self.multis.iter().position(|(a, b)| a == n_x && b == n_y)?;
        self.coeffs
            .get((cell * self.grid.y_points() + wf) * self.multis.len() + m)
            .copied()
    }

    /// Smallest positive zeroth-order entry.
    pub fn min_positive_density(&self) -> f64 {
        self.min_positive_density
    }

    fn axis_integrals(&self, c: f64, form: KernelForm) -> Option<AxisIntegrals> {
        let g = &self.grid;
        let (lo, hi) = clip_axis(c, form.a, form.b, g);
        if lo > hi {
            return None;
        }
        let k1 = self.holder.k1;
        let k2 = self.holder.k2;
        let rb = g.r_b();
        let cw = g.cell_width();
        let h = g.half_width();
        let norm = INV_SQRT_2PI / form.b;
        let mut cells = Vec::new();
        // cell v covers (-H + (v-1) cw, -H + v cw]
        let first = (((lo + h) / cw).floor() as isize).clamp(0, g.n as isize - 1) as usize;
        let last = (((hi + h) / cw).ceil() as isize).clamp(1, g.n as isize) as usize;
        for v in (first + 1)..=last {
            let a = (-h + (v - 1) as f64 * cw).max(lo);
            let b = (-h + v as f64 * cw).min(hi);
            if a >= b {
                continue;
            }
            let anchor = g.cell_anchor(v);
            let mut i0 = vec![0.0; k1 + 1];
            let mut i1 = vec![0.0; k1 + 1];
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&u, &wq) in self.rule.nodes.iter().zip(&self.rule.weights) {
                let z = mid + half * u;
                let s = (form.a * z - c) / form.b;
                let k = wq * half * norm * truncated_exp_neg(0.5 * s * s, k2);
                let r = (z - anchor) / rb;
                let mut mono = 1.0;
                for n in 0..=k1 {
                    i0[n] += k * mono;
                    i1[n] += k * mono * s;
                    mono *= r;
                }
            }
            cells.push((v, i0, i1));
        }
        Some(AxisIntegrals { cells })
    }

    fn y_weights(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let g = &self.grid;
        let n = g.n as f64;
        let mut out = vec![(0usize, 1.0)];
        for j in (0..g.d_y).rev() {
            let mut next = Vec::new();
            for w in 0..=g.n {
                let phi = trapezoid(3.0 * n * (y[j] - w as f64 / n));
                if phi == 0.0 {
                    continue;
                }
                for &(flat, wt) in &out {
                    next.push((flat * (g.n + 1) + w, wt * phi));
                }
            }
            out = next;
        }
        out
    }

    fn eval_form(&self, x: &[f64], y: &[f64], form: KernelForm) -> Result<Diffused> {
        let g = &self.grid;
        if x.len() != g.d_x || y.len() != g.d_y {
            return Err(Error::Shape(format!(
                "query dims ({}, {}) do not match the table ({}, {})",
                x.len(),
                y.len(),
                g.d_x,
                g.d_y
            )));
        }
        let axes: Option<Vec<AxisIntegrals>> = x
            .iter()
            .map(|&xi| self.axis_integrals(form.c_scale * xi, form))
            .collect();
        let Some(axes) = axes else {
            // nearest point whose window overlaps the box by one kernel width
            let reach =
                (form.a * g.half_width() + form.b * (g.half_width() - 1.0).max(0.0)) / form.c_scale;
            let xn: Vec<f64> = x.iter().map(|&v| v.clamp(-reach, reach)).collect();
            let inner = self.eval_form(&xn, y, form)?;
            return Ok(Diffused {
                f1: 0.0,
                f2: inner.f2,
                clipped_empty: true,
            });
        };
        let yw = self.y_weights(y);
        let nm = self.multis.len();
        let n_w = g.y_points();
        let mut f1 = 0.0;
        let mut f2 = vec![0.0; g.d_x];
        let mut pick = vec![0usize; g.d_x];
        if axes.iter().any(|a| a.cells.is_empty()) {
            return Ok(Diffused {
                f1,
                f2,
                clipped_empty: false,
            });
        }
        loop {
            let cell = (0..g.d_x)
                .rev()
                .fold(0, |acc, i| acc * g.n + (axes[i].cells[pick[i]].0 - 1));
            for &(wf, phi) in &yw {
                let w = mixed_index(wf, g.n + 1, g.d_y);
                let base = (cell * n_w + wf) * nm;
                for (m, (nx, ny)) in self.multis.iter().enumerate() {
                    let coef = self.coeffs[base + m];
                    if coef == 0.0 {
                        continue;
                    }
                    let mut ymono = phi;
                    for j in 0..g.d_y {
                        ymono *= (y[j] - g.y_point(w[j])).powi(ny[j] as i32);
                    }
                    let c = coef * ymono;
                    let mut all0 = c;
                    for i in 0..g.d_x {
                        all0 *= axes[i].cells[pick[i]].1[nx[i]];
                    }
                    f1 += all0;
                    for j in 0..g.d_x {
                        let mut term = c;
                        for i in 0..g.d_x {
                            let (_, i0, i1) = &axes[i].cells[pick[i]];
                            term *= if i == j { i1[nx[i]] } else { i0[nx[i]] };
                        }
                        f2[j] += term;
                    }
                }
            }
            let mut i = 0;
            loop {
                if i == g.d_x {
                    return Ok(Diffused {
                        f1,
                        f2,
                        clipped_empty: false,
                    });
                }
                pick[i] += 1;
                if pick[i] < axes[i].cells.len() {
                    break;
                }
                pick[i] = 0;
                i += 1;
            }
        }
    }

    /// `f1` and `f2` with the forward transition kernel at time `t`.
    pub fn eval_generic(&self, x: &[f64], y: &[f64], t: f64) -> Result<Diffused> {
        let s = noise_schedule(t)?;
        if s.sigma == 0.0 {
            return Err(Error::SingularKernel { t });
        }
        self.eval_form(
            x,
            y,
            KernelForm {
                a: s.alpha,
                b: s.sigma,
                c_scale: 1.0,
            },
        )
    }

    /// `f1 ~ h` and `f2 ~ (hat_sigma / hat_alpha) grad h` for a table of the
    /// strong factor `f`.
    pub fn eval_strong(&self, x: &[f64], y: &[f64], decomp: &StrongDecomp) -> Result<Diffused> {
        if decomp.hat_sigma == 0.0 {
            return Err(Error::SingularKernel { t: decomp.t });
        }
        self.eval_form(
            x,
            y,
            KernelForm {
                a: 1.0,
                b: decomp.hat_sigma,
                c_scale: decomp.hat_alpha,
            },
        )
    }

    /// Indicator-times-trapezoid weights `psi_{v,w}(x0, y)`, keyed by
    /// 1-based x-cell and 0-based y-point multi-indices.
    pub fn partition_weights(&self, x0: &[f64], y: &[f64]) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        partition_weights(&self.grid, x0, y)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        for v in [
            self.grid.d_x as u64,
            self.grid.d_y as u64,
            self.grid.n as u64,
            self.holder.k1 as u64,
            self.holder.k2 as u64,
            self.source_fingerprint,
            self.coeffs.len() as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [
            self.grid.c_x,
            self.holder.beta,
            self.holder.b_est,
            self.min_positive_density,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.coeffs {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut inp: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a diffused-polynomial cache file".into()));
        }
        let mut u = [0u64; 7];
        let mut b = [0u8; 8];
        for slot in u.iter_mut() {
            inp.read_exact(&mut b)?;
            *slot = u64::from_le_bytes(b);
        }
        let mut f = [0f64; 4];
        for slot in f.iter_mut() {
            inp.read_exact(&mut b)?;
            *slot = f64::from_le_bytes(b);
        }
        let grid = GridSpec::new(u[2] as usize, f[0], u[0] as usize, u[1] as usize)?;
        let holder = HolderParams {
            beta: f[1],
            k1: u[3] as usize,
            k2: u[4] as usize,
            b_est: f[2],
        };
        let multis: Vec<(Vec<usize>, Vec<usize>)> = multi_indices(grid.d_x + grid.d_y, holder.k1)
            .into_iter()
            .map(|m| (m[..grid.d_x].to_vec(), m[grid.d_x..].to_vec()))
            .collect();
        let count = u[6] as usize;
        if count != grid.x_cells() * grid.y_points() * multis.len() {
            return Err(Error::Format(format!(
                "coefficient count {count} does not match the header"
            )));
        }
        let mut coeffs = Vec::with_capacity(count);
        for _ in 0..count {
            inp.read_exact(&mut b)?;
            coeffs.push(f64::from_le_bytes(b));
        }
        Ok(Self {
            grid,
            rule: quadrature_rule(&holder),
            holder,
            source_fingerprint: u[5],
            multis,
            coeffs,
            min_positive_density: f[3],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// File name of the cache entry for `(source, N, k1, k2, t-window)`.
pub fn cache_path(
    dir: &Path,
    fingerprint: u64,
    grid: &GridSpec,
    holder: &HolderParams,
    t_window: (f64, f64),
) -> PathBuf {
    let key = format!(
        "{fingerprint:016x}-{}-{}-{}-{:?}-{:016x}-{:016x}",
        grid.n,
        holder.k1,
        holder.k2,
        grid.c_x,
        t_window.0.to_bits(),
        t_window.1.to_bits()
    );
    let digest = Sha256::digest(key.as_bytes());
    let short: String = digest[..12].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("poly-N{}-k{}-{short}.bin", grid.n, holder.k1))
}

/// Loads the table from `dir` if present, otherwise builds and stores it.
pub fn taylor_table_cached<S: TaylorSource + ?Sized>(
    dir: &Path,
    source: &S,
    grid: &GridSpec,
    holder: &HolderParams,
    t_window: (f64, f64),
) -> Result<DiffusedPoly> {
    let path = cache_path(dir, source.fingerprint(), grid, holder, t_window);
    if path.exists() {
        let poly = DiffusedPoly::load(&path)?;
        if poly.source_fingerprint == source.fingerprint()
            && poly.grid == *grid
            && poly.holder.k2 == holder.k2
        {
            return Ok(poly);
        }
    }
    let poly = taylor_table(source, grid, holder, true)?;
    std::fs::create_dir_all(dir)?;
    poly.save(&path)?;
    Ok(poly)
}

/// Partition weights `psi_{v,w}(x0, y) = 1{x0 in cell v} phi(3N(y - w/N))`.
///
/// Cells are half-open on the left, so a boundary point belongs to the lower
/// cell. Points outside the global box get no x-cell.
pub fn partition_weights(
    grid: &GridSpec,
    x0: &[f64],
    y: &[f64],
) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    let h = grid.half_width();
    let cw = grid.cell_width();
    let mut v = Vec::with_capacity(grid.d_x);
    for &xi in x0 {
        if xi <= -h || xi > h {
            return Vec::new();
        }
        let k = ((xi + h) / cw).ceil() as usize;
        v.push(k.clamp(1, grid.n));
    }
    let n = grid.n as f64;
    let mut ws: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for &yj in y {
        let mut next = Vec::new();
        for w in 0..=grid.n {
            let phi = trapezoid(3.0 * n * (yj - w as f64 / n));
            if phi > 0.0 {
                for (prefix, wt) in &ws {
                    let mut p = prefix.clone();
                    p.push(w);
                    next.push((p, wt * phi));
                }
            }
        }
        ws = next;
    }
    ws.into_iter().map(|(w, wt)| (v.clone(), w, wt)).collect()
}

/// `f1 ~ p_t(x|y)`.
pub fn f1_eval(poly: &DiffusedPoly, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    Ok(poly.eval_generic(x, y, t)?.f1)
}

/// `f2 ~ sigma_t grad p_t(x|y)`.
pub fn f2_eval(poly: &DiffusedPoly, x: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
    Ok(poly.eval_generic(x, y, t)?.f2)
}

/// Lower clamp and entrywise cap of the generic assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAssemblyConfig {
    pub eps_low: f64,
    pub k_cap: f64,
}

impl ScoreAssemblyConfig {
    pub fn new(eps_low: f64, k_cap: f64) -> Result<Self> {
        if !(eps_low > 0.0) || !(k_cap > 0.0) {
            return Err(Error::Config(format!(
                "eps_low and K_cap must be positive, got {eps_low} and {k_cap}"
            )));
        }
        Ok(Self { eps_low, k_cap })
    }

    /// `eps_low = C3 N^{-beta} (ln N)^{(d_x + k1)/2}` with `C3` half the
    /// smallest positive tabulated density, and
    /// `K_cap = K (C_x sqrt(d_x ln N) + 1) / sigma_t^2`.
    pub fn for_poly(poly: &DiffusedPoly, t: f64, k: f64) -> Result<Self> {
        let g = poly.grid();
        let h = poly.holder();
        let ln_n = (g.n as f64).ln();
        let c3 = 0.5 * poly.min_positive_density();
        let eps_low = c3 * (g.n as f64).powf(-h.beta) * ln_n.powf(0.5 * (g.d_x + h.k1) as f64);
        let s = noise_schedule(t)?;
        if s.sigma == 0.0 {
            return Err(Error::SingularKernel { t });
        }
        let k_cap = k * (g.c_x * (g.d_x as f64 * ln_n).sqrt() + 1.0) / (s.sigma * s.sigma);
        Self::new(eps_low, k_cap)
    }
}

/// `clamp(f2 / (sigma_t max(f1, eps_low)), -K_cap, K_cap)` entrywise.
pub fn assemble_generic(
    f1: f64,
    f2: &[f64],
    t: f64,
    cfg: &ScoreAssemblyConfig,
) -> Result<Vec<f64>> {
    let s = noise_schedule(t)?;
    if s.sigma == 0.0 {
        return Err(Error::SingularKernel { t });
    }
    let den = s.sigma * f1.max(cfg.eps_low);
    Ok(f2
        .iter()
        .map(|v| (v / den).clamp(-cfg.k_cap, cfg.k_cap))
        .collect())
}

/// Generic score estimate at `(x, y, t)`; an empty clip box yields
/// `K_cap sign(f2)`.
pub fn score_generic(
    poly: &DiffusedPoly,
    x: &[f64],
    y: &[f64],
    t: f64,
    cfg: &ScoreAssemblyConfig,
) -> Result<Vec<f64>> {
    let d = poly.eval_generic(x, y, t)?;
    if d.clipped_empty {
        return Ok(d.f2.iter().map(|v| cfg.k_cap * sign(*v)).collect());
    }
    assemble_generic(d.f1, &d.f2, t, cfg)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `hat_alpha`, `hat_sigma` of the strong decomposition at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongDecomp {
    pub c2: f64,
    pub hat_alpha: f64,
    pub hat_sigma: f64,
    pub t: f64,
    /// `alpha_t^2 + C2 sigma_t^2`.
    pub denom: f64,
}

pub fn hat_coeffs(t: f64, c2: f64) -> Result<StrongDecomp> {
    if !(c2 > 0.0) {
        return Err(Error::Domain(format!("C2 must be positive, got {c2}")));
    }
    let s = noise_schedule(t)?;
    let denom = s.alpha * s.alpha + c2 * s.sigma * s.sigma;
    Ok(StrongDecomp {
        c2,
        hat_alpha: s.alpha / denom,
        hat_sigma: s.sigma / denom.sqrt(),
        t,
        denom,
    })
}

/// `-C2 x / (alpha_t^2 + C2 sigma_t^2) + (hat_alpha / hat_sigma) f2 / f1`.
pub fn assemble_strong(
    x: &[f64],
    f1_h: f64,
    f2_h: &[f64],
    decomp: &StrongDecomp,
) -> Result<Vec<f64>> {
    if !(f1_h > 0.0) {
        return Err(Error::LowerBound(format!(
            "f1 approximation of h is {f1_h} (must be positive)"
        )));
    }
    if x.len() != f2_h.len() {
        return Err(Error::Shape(format!(
            "x has {} entries, f2 has {}",
            x.len(),
            f2_h.len()
        )));
    }
    let ratio = decomp.hat_alpha / decomp.hat_sigma / f1_h;
    Ok(x.iter()
        .zip(f2_h)
        .map(|(xi, fi)| -decomp.c2 * xi / decomp.denom + ratio * fi)
        .collect())
}

/// Strong-assumption score estimate from a table of the strong factor.
pub fn score_strong(
    poly: &DiffusedPoly,
    x: &[f64],
    y: &[f64],
    decomp: &StrongDecomp,
) -> Result<Vec<f64>> {
    let d = poly.eval_strong(x, y, decomp)?;
    assemble_strong(x, d.f1, &d.f2, decomp)
}

/// `int p_t |s_hat - s|^2 dx / int p_t dx` on a uniform grid over
/// `[-half_width, half_width]^{d_x}` (`d_x <= 2`), averaged over `ys`.
pub fn weighted_score_mse<F>(
    family: &Family,
    ys: &[Vec<f64>],
    t: f64,
    half_width: f64,
    points: usize,
    mut score: F,
) -> Result<f64>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let d = family.d_x();
    if d > 2 {
        return Err(Error::UnsupportedDimension(format!(
            "weighted MSE grid supports d_x <= 2, got {d}"
        )));
    }
    let step = 2.0 * half_width / (points - 1) as f64;
    let mut total = 0.0;
    for y in ys {
        let mut num = 0.0;
        let mut den = 0.0;
        let count = points.pow(d as u32);
        for flat in 0..count {
            let idx = mixed_index(flat, points, d);
            let x: Vec<f64> = idx.iter().map(|&i| -half_width + i as f64 * step).collect();
            let p = oracle_density(family, &x, y, t)?;
            let truth = oracle_score(family, &x, y, t)?;
            let est = score(&x, y)?;
            let err: f64 = est.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum();
            num += p * err;
            den += p;
        }
        total += num / den;
    }
    Ok(total / ys.len() as f64)
}
