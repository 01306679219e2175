use super::dit::DiTModel;
use crate::rng::seeded;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Largest singular value by power iteration (50 sweeps, tol 1e-8).
///
/// The iteration runs on `(A^T A)^16`, formed by repeated normalized
/// squaring, so that nearly tied singular values still separate within
/// the sweep budget; the value is read off as a Rayleigh quotient of `A^T A`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ata = a.transpose() * a;
    let scale = ata.norm();
    if scale == 0.0 || !scale.is_finite() {
        return if scale == 0.0 { 0.0 } else { f64::NAN };
    }
    let mut m = &ata / scale;
    for _ in 0..4 {
        m = &m * &m;
        let n = m.norm();
        if n == 0.0 {
            break;
        }
        m /= n;
    }
    let n = ata.ncols();
    // uneven start so that no singular direction is missed by symmetry
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt());
    v /= v.norm();
    let mut prev = 0.0;
    for _ in 0..50 {
        let w = &m * &v;
        let nw = w.norm();
        if nw == 0.0 {
            break;
        }
        v = w / nw;
        let rq = v.dot(&(&ata * &v));
        if (rq - prev).abs() <= 1e-8 * rq.abs() {
            break;
        }
        prev = rq;
    }
    v.dot(&(&ata * &v)).max(0.0).sqrt()
}

/// Maximum row 2-norm.
pub fn two_inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNorm {
    pub name: String,
    pub spectral: f64,
    pub two_inf: f64,
}

/// Measured parameter norms and output statistics of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NormReport {
    pub matrices: Vec<MatrixNorm>,
    /// Largest trunk output Frobenius norm over the sampled inputs.
    pub c_t: f64,
    /// Per-block Lipschitz estimate (max finite-difference ratio).
    pub l_t: Vec<f64>,
}

impl NormReport {
    pub fn get(&self, name: &str) -> Option<&MatrixNorm> {
        self.matrices.iter().find(|m| m.name == name)
    }

    /// Maximum (2,inf) norm of a per-block matrix over all blocks.
    pub fn max_two_inf(&self, suffix: &str) -> f64 {
        self.matrices
            .iter()
            .filter(|m| m.name.rsplit('.').next() == Some(suffix))
            .map(|m| m.two_inf)
            .fold(0.0, f64::max)
    }
}

/// Region from which inputs are drawn for `C_T` and `L_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSampling {
    pub x_radius: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for NormSampling {
    fn default() -> Self {
        Self {
            x_radius: 3.0,
            t_min: 0.01,
            t_max: 5.0,
            samples: 1000,
            seed: 0,
        }
    }
}

pub fn norm_report(model: &DiTModel) -> NormReport {
    norm_report_with(model, &NormSampling::default())
}

fn push(out: &mut Vec<MatrixNorm>, name: String, m: &DMatrix<f64>) {
    out.push(MatrixNorm {
        name,
        spectral: spectral_norm(m),
        two_inf: two_inf_norm(m),
    });
}

/// `W_Q` and `E` are measured through their transposes, matching the
/// bound on `||W_Q^T||_{2,inf}` and `||E^T||_{2,inf}` in the network class.
pub fn norm_report_with(model: &DiTModel, sampling: &NormSampling) -> NormReport {
    let mut matrices = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, m) in b.tensors() {
            match name {
                "W_Q" | "E" => push(&mut matrices, format!("block{i}.{name}^T"), &m.transpose()),
                _ => push(&mut matrices, format!("block{i}.{name}"), m),
            }
        }
    }
    push(&mut matrices, "head_w".into(), &model.head_w);
    if let Some(w) = &model.w_u {
        push(&mut matrices, "W_U".into(), w);
    }

    let mut rng = seeded(sampling.seed);
    let d_x = model.d_x();
    let d_y = model.d_y;
    let nb = model.blocks.len();
    let mut c_t: f64 = 0.0;
    let mut l_t = vec![0.0f64; nb];
    let (lo, hi) = (sampling.t_min.max(1e-12).ln(), sampling.t_max.ln());
    for k in 0..sampling.samples {
        let x: Vec<f64> = (0..d_x)
            .map(|_| rng.random_range(-sampling.x_radius..=sampling.x_radius))
            .collect();
        let y: Vec<f64> = (0..d_y).map(|_| rng.random::<f64>()).collect();
        let t = rng.random_range(lo..=hi).exp();
        let x_trunk = match &model.w_u {
            Some(w) => (w.transpose() * DVector::from_vec(x)).as_slice().to_vec(),
            None => x,
        };
        let yy = if k % 5 == 4 { None } else { Some(y.as_slice()) };
        let Ok(mut z) = model.tokens(&x_trunk, yy, t) else {
            continue;
        };
        for (j, b) in model.blocks.iter().enumerate() {
            let Ok(next) = b.forward(&z) else { break };
            let dir =
                DMatrix::<f64>::from_fn(z.nrows(), z.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-4 * (1.0 + z.norm()) / dir.norm().max(1e-300);
            if let Ok(pert) = b.forward(&(&z + &dir * h)) {
                let ratio = (pert - &next).norm() / (dir.norm() * h);
                if ratio.is_finite() {
                    l_t[j] = l_t[j].max(ratio);
                }
            }
            z = next;
        }
        let n = z.norm();
        if n.is_finite() {
            c_t = c_t.max(n);
        }
    }
    NormReport { matrices, c_t, l_t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::dit::DiTConfig;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((spectral_norm(&i) - 1.0).abs() < 1e-10);
        assert!((two_inf_norm(&i) - 1.0).abs() < 1e-15);
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        assert!((spectral_norm(&a) - 5.0).abs() < 1e-10);
        assert!((two_inf_norm(&a) - 5.0).abs() < 1e-15);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 2)), 0.0);
    }

    #[test]
    fn agrees_with_svd_oracle() {
        let mut rng = seeded(4);
        for _ in 0..200 {
            let r = rng.random_range(1..=8);
            let c = rng.random_range(1..=8);
            let a = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let oracle = a.singular_values().max();
            let p = spectral_norm(&a);
            assert!((p - oracle).abs() / oracle < 1e-6, "{p} vs {oracle}");
        }
    }

    proptest! {
        #[test]
        fn homogeneity(c in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let a = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = a.clone() * c;
            prop_assert!((spectral_norm(&s) - c.abs() * spectral_norm(&a)).abs() < 1e-7 * (1.0 + c.abs()));
            prop_assert!((two_inf_norm(&s) - c.abs() * two_inf_norm(&a)).abs() < 1e-12 * (1.0 + c.abs()));
            prop_assert!(two_inf_norm(&a) >= a.row_iter().map(|r| r.norm()).fold(0.0, f64::max));
        }
    }

    #[test]
    fn report_covers_all_blocks() {
        let mut rng = seeded(9);
        let m = DiTModel::new(&DiTConfig::new(4, 1, 2, 2, 4), &mut rng).unwrap();
        let rep = norm_report_with(
            &m,
            &NormSampling {
                samples: 50,
                ..Default::default()
            },
        );
        assert_eq!(rep.matrices.len(), 2 * 7 + 1);
        assert!(rep.get("block1.W_Q^T").is_some());
        assert!(rep
            .matrices
            .iter()
            .all(|n| n.spectral >= 0.0 && n.two_inf >= 0.0));
        assert!(rep.c_t > 0.0);
        assert_eq!(rep.l_t.len(), 2);
        assert!(rep.l_t.iter().all(|&l| l >= 1.0 - 1e-6));
        let mut scaled = m.clone();
        scaled.blocks[0].w_v *= -3.0;
        let r2 = norm_report_with(
            &scaled,
            &NormSampling {
                samples: 1,
                ..Default::default()
            },
        );
        let (a, b) = (
            rep.get("block0.W_V").unwrap(),
            r2.get("block0.W_V").unwrap(),
        );
        assert!((b.two_inf - 3.0 * a.two_inf).abs() < 1e-12);
        assert!((b.spectral - 3.0 * a.spectral).abs() < 1e-8);
    }
}
