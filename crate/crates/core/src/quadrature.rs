//! Gauss quadrature rules computed by the Golub–Welsch eigenvalue method.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of an `n`-point Gauss rule.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> GaussRule {
    let n = diag.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = diag[i];
        if i + 1 < n {
            jac[(i, i + 1)] = off[i];
            jac[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Legendre rule on `[-1, 1]`; exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> GaussRule {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &off, 2.0)
}

/// Gauss–Hermite rule for the weight `exp(-u^2)` on the real line.
pub fn gauss_hermite(n: usize) -> GaussRule {
    assert!(n >= 1);
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&diag, &off, std::f64::consts::PI.sqrt())
}

impl GaussRule {
    /// Integrates `f` over `[a, b]` assuming `self` is a Legendre rule.
    pub fn integrate_on<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &w)| w * f(mid + half * u))
            .sum::<f64>()
            * half
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(5);
        // x^9 + 3 x^4 on [0, 2]: 2^10/10 + 3 * 2^5 / 5
        let got = rule.integrate_on(0.0, 2.0, |x| x.powi(9) + 3.0 * x.powi(4));
        let want = 1024.0 / 10.0 + 96.0 / 5.0;
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn hermite_moments() {
        let rule = gauss_hermite(64);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m0: f64 = rule.weights.iter().sum();
        let m2: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(u, w)| w * u * u)
            .sum();
        assert!((m0 - pi_sqrt).abs() < 1e-12);
        assert!((m2 - pi_sqrt / 2.0).abs() < 1e-12);
        // E[cos(2 sqrt(2) U)] for U ~ N(0, 1/2) weight: sqrt(pi) exp(-2)
        let c: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(u, w)| w * (2.0 * u).cos())
            .sum();
        assert!((c - pi_sqrt * (-1.0f64).exp()).abs() < 1e-12);
    }
}
