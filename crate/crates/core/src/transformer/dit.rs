use super::block::{BlockCache, TransformerParams};
use super::reshape::ReshapeSpec;
use crate::error::{Error, Result};
use crate::schedule::noise_schedule;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Frequencies of the sinusoidal features of `log t`.
pub const TIME_FREQS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Length of the time feature vector `[log t, sin(w log t), cos(w log t)]`.
pub const TIME_FEATURES: usize = 1 + 2 * TIME_FREQS.len();

/// `[log t, sin(w_k log t), cos(w_k log t)]_k`.
pub fn time_features(t: f64) -> Result<DVector<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!(
            "time embedding needs t > 0, got {t}"
        )));
    }
    let lt = t.ln();
    let mut f = Vec::with_capacity(TIME_FEATURES);
    f.push(lt);
    for w in TIME_FREQS {
        f.push((w * lt).sin());
        f.push((w * lt).cos());
    }
    Ok(DVector::from_vec(f))
}

/// Architecture and initialization knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiTConfig {
    pub d_x: usize,
    pub d_y: usize,
    /// Token dimension; the trunk input is chunked column-major.
    pub d: usize,
    pub blocks: usize,
    pub s: usize,
    pub r: usize,
    /// Latent dimension `d_0` for the encoder/decoder variant.
    pub latent: Option<usize>,
    pub init_scale: f64,
    pub e_scale: f64,
}

impl DiTConfig {
    pub fn new(d_x: usize, d_y: usize, d: usize, blocks: usize, s: usize) -> Self {
        Self {
            d_x,
            d_y,
            d,
            blocks,
            s,
            r: 4 * s,
            latent: None,
            init_scale: 0.05,
            e_scale: 0.1,
        }
    }
}

/// Toy in-context conditional DiT. The same struct doubles as the gradient
/// record of its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DiTModel {
    pub reshape: ReshapeSpec,
    pub d_y: usize,
    pub w_y: DMatrix<f64>,
    pub b_y: DVector<f64>,
    /// Learned token standing in for the masked condition.
    pub null_token: DVector<f64>,
    pub w_t: DMatrix<f64>,
    pub b_t: DVector<f64>,
    pub blocks: Vec<TransformerParams>,
    /// Per-token affine output map.
    pub head_w: DMatrix<f64>,
    pub head_b: DVector<f64>,
    /// Decoder `W_U` (`d_x x d_0`); the encoder is its transpose.
    pub w_u: Option<DMatrix<f64>>,
}

/// Forward intermediates for one input.
#[derive(Debug, Clone)]
pub struct Tape {
    y: Option<Vec<f64>>,
    phi: DVector<f64>,
    caches: Vec<BlockCache>,
    out_tokens: DMatrix<f64>,
    latent: Option<LatentTape>,
}

#[derive(Debug, Clone)]
struct LatentTape {
    x: DVector<f64>,
    g: DVector<f64>,
    inv_var: f64,
}

impl DiTModel {
    pub fn new<R: Rng + ?Sized>(cfg: &DiTConfig, rng: &mut R) -> Result<Self> {
        if cfg.blocks == 0 || cfg.s == 0 || cfg.r == 0 {
            return Err(Error::Config(
                "model needs at least one block and positive s, r".into(),
            ));
        }
        let trunk_dim = match cfg.latent {
            Some(d0) => {
                if d0 == 0 || d0 > cfg.d_x {
                    return Err(Error::Config(format!(
                        "latent dimension {d0} must be in 1..=d_x"
                    )));
                }
                d0
            }
            None => cfg.d_x,
        };
        let reshape = ReshapeSpec::columns(trunk_dim, cfg.d)?;
        let d = cfg.d;
        let lp = reshape.l() + 2;
        let sc = cfg.init_scale;
        let mut uni =
            |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-sc..=sc));
        let w_y = uni(d, cfg.d_y);
        let w_t = uni(d, TIME_FEATURES);
        let blocks = (0..cfg.blocks)
            .map(|_| TransformerParams::init(d, cfg.s, cfg.r, lp, sc, cfg.e_scale, rng))
            .collect();
        let w_u = cfg.latent.map(|d0| {
            let g = DMatrix::<f64>::from_fn(cfg.d_x, d0, |_, _| rng.sample(StandardNormal));
            g.qr().q().columns(0, d0).into_owned()
        });
        Ok(Self {
            reshape,
            d_y: cfg.d_y,
            w_y,
            b_y: DVector::zeros(d),
            null_token: DVector::zeros(d),
            w_t,
            b_t: DVector::zeros(d),
            blocks,
            head_w: DMatrix::identity(d, d),
            head_b: DVector::zeros(d),
            w_u,
        })
    }

    /// Flat input dimension.
    pub fn d_x(&self) -> usize {
        match &self.w_u {
            Some(w) => w.nrows(),
            None => self.reshape.d_x(),
        }
    }

    pub fn d(&self) -> usize {
        self.reshape.d()
    }

    pub fn is_latent(&self) -> bool {
        self.w_u.is_some()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, s| s.fill(0.0));
        z
    }

    /// Visits every parameter tensor in declaration order.
    pub fn visit<F: FnMut(&str, &[f64])>(&self, f: &mut F) {
        f("w_y", self.w_y.as_slice());
        f("b_y", self.b_y.as_slice());
        f("null_token", self.null_token.as_slice());
        f("w_t", self.w_t.as_slice());
        f("b_t", self.b_t.as_slice());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |name, s| f(&format!("block{i}.{name}"), s));
        }
        f("head_w", self.head_w.as_slice());
        f("head_b", self.head_b.as_slice());
        if let Some(w) = &self.w_u {
            f("W_U", w.as_slice());
        }
    }

    pub fn visit_mut<F: FnMut(&str, &mut [f64])>(&mut self, f: &mut F) {
        f("w_y", self.w_y.as_mut_slice());
        f("b_y", self.b_y.as_mut_slice());
        f("null_token", self.null_token.as_mut_slice());
        f("w_t", self.w_t.as_mut_slice());
        f("b_t", self.b_t.as_mut_slice());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, s| f(&format!("block{i}.{name}"), s));
        }
        f("head_w", self.head_w.as_mut_slice());
        f("head_b", self.head_b.as_mut_slice());
        if let Some(w) = &mut self.w_u {
            f("W_U", w.as_mut_slice());
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut i = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[i..i + s.len()]);
            i += s.len();
        });
        Ok(())
    }

    /// `self += c * other` (shapes must match).
    pub fn axpy(&mut self, c: f64, other: &Self) {
        let flat = other.to_flat();
        let mut i = 0;
        self.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                *v += c * flat[i];
                i += 1;
            }
        });
    }

    pub fn scale(&mut self, c: f64) {
        self.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v *= c));
    }

    pub fn norm_sq(&self) -> f64 {
        let mut n = 0.0;
        self.visit(&mut |_, s| n += s.iter().map(|v| v * v).sum::<f64>());
        n
    }

    fn condition_token(&self, y: Option<&[f64]>) -> Result<DVector<f64>> {
        match y {
            None => Ok(self.null_token.clone()),
            Some(y) => {
                if y.len() != self.d_y {
                    return Err(Error::Shape(format!(
                        "condition has {} entries, expected {}",
                        y.len(),
                        self.d_y
                    )));
                }
                Ok(&self.w_y * DVector::from_column_slice(y) + &self.b_y)
            }
        }
    }

    /// Token matrix `[R(x) | y-token | t-token]` fed to the trunk.
    pub fn tokens(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<DMatrix<f64>> {
        let zx = self.reshape.reshape(x)?;
        let l = self.reshape.l();
        let mut z = DMatrix::zeros(self.d(), l + 2);
        z.columns_mut(0, l).copy_from(&zx);
        z.set_column(l, &self.condition_token(y)?);
        z.set_column(l + 1, &(&self.w_t * time_features(t)? + &self.b_t));
        Ok(z)
    }

    /// Blocks only, on a token matrix.
    pub fn trunk(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut z = z.clone();
        for b in &self.blocks {
            z = b.forward(&z)?;
        }
        Ok(z)
    }

    fn trunk_cached(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<(Vec<f64>, Tape)> {
        let mut z = self.tokens(x, y, t)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_cached(&z)?;
            caches.push(cache);
            z = next;
        }
        let l = self.reshape.l();
        let out_tokens = z.columns(0, l).into_owned();
        let mut p = &self.head_w * &out_tokens;
        for mut col in p.column_iter_mut() {
            col += &self.head_b;
        }
        let out = self.reshape.unreshape(&p)?;
        let tape = Tape {
            y: y.map(|v| v.to_vec()),
            phi: time_features(t)?,
            caches,
            out_tokens,
            latent: None,
        };
        Ok((out, tape))
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward_cached(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<(Vec<f64>, Tape)> {
        match &self.w_u {
            None => self.trunk_cached(x, y, t),
            Some(w_u) => {
                if x.len() != w_u.nrows() {
                    return Err(Error::Shape(format!(
                        "input has {} entries, expected {}",
                        x.len(),
                        w_u.nrows()
                    )));
                }
                let s = noise_schedule(t)?;
                if s.sigma == 0.0 {
                    return Err(Error::SingularKernel { t });
                }
                let inv_var = 1.0 / (s.sigma * s.sigma);
                let xv = DVector::from_column_slice(x);
                let u = w_u.transpose() * &xv;
                let (g, mut tape) = self.trunk_cached(u.as_slice(), y, t)?;
                let g = DVector::from_vec(g);
                let out = (w_u * &g - &xv) * inv_var;
                tape.latent = Some(LatentTape { x: xv, g, inv_var });
                Ok((out.as_slice().to_vec(), tape))
            }
        }
    }

    pub fn forward(&self, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, y, t)?.0)
    }

    /// Accumulates `d(g_out . output)/d(params)` into `grad`; returns the
    /// gradient with respect to the input `x`.
    pub fn backward(&self, tape: &Tape, g_out: &[f64], grad: &mut DiTModel) -> Result<Vec<f64>> {
        let (g_trunk, latent) = match (&self.w_u, &tape.latent) {
            (Some(w_u), Some(lt)) => {
                let g = DVector::from_column_slice(g_out);
                let gw = grad.w_u.as_mut().expect("gradient record has W_U");
                *gw += &g * lt.g.transpose() * lt.inv_var;
                (
                    (w_u.transpose() * &g * lt.inv_var).as_slice().to_vec(),
                    Some((g, lt)),
                )
            }
            (None, None) => (g_out.to_vec(), None),
            _ => return Err(Error::Shape("tape does not match the model variant".into())),
        };
        let gp = self.reshape.reshape(&g_trunk)?;
        grad.head_w += &gp * tape.out_tokens.transpose();
        grad.head_b += gp.column_sum();
        let l = self.reshape.l();
        let mut gz = DMatrix::zeros(self.d(), l + 2);
        gz.columns_mut(0, l)
            .copy_from(&(self.head_w.transpose() * gp));
        for (i, b) in self.blocks.iter().enumerate().rev() {
            gz = b.backward(&tape.caches[i], &gz, &mut grad.blocks[i]);
        }
        let gy = gz.column(l).into_owned();
        match &tape.y {
            Some(y) => {
                grad.w_y += &gy * DVector::from_column_slice(y).transpose();
                grad.b_y += &gy;
            }
            None => grad.null_token += &gy,
        }
        let gt = gz.column(l + 1).into_owned();
        grad.w_t += &gt * tape.phi.transpose();
        grad.b_t += &gt;
        let gu = self.reshape.unreshape(&gz.columns(0, l).into_owned())?;
        match latent {
            Some((g, lt)) => {
                let w_u = self.w_u.as_ref().expect("latent model");
                let du = DVector::from_vec(gu);
                let gw = grad.w_u.as_mut().expect("gradient record has W_U");
                *gw += &lt.x * du.transpose();
                Ok((w_u * du - g * lt.inv_var).as_slice().to_vec())
            }
            None => Ok(gu),
        }
    }
}

/// Trunk pass `R^{-1}(head(f_T([R(x) | y | t])[:, :L]))`; ignores any latent
/// encoder/decoder.
pub fn dit_forward(model: &DiTModel, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
    Ok(model.trunk_cached(x, y, t)?.0)
}

/// `(W_U g(W_U^T x, y, t) - x) / sigma_t^2`.
pub fn latent_forward(model: &DiTModel, x: &[f64], y: Option<&[f64]>, t: f64) -> Result<Vec<f64>> {
    if model.w_u.is_none() {
        return Err(Error::Config("model has no latent encoder/decoder".into()));
    }
    model.forward(x, y, t)
}
