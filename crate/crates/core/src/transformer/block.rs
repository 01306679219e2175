use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// One single-head transformer block `f(Z) = FF(SA(Z + E))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub w_1: DMatrix<f64>,
    pub b_1: DVector<f64>,
    pub w_2: DMatrix<f64>,
    pub b_2: DVector<f64>,
    pub e: DMatrix<f64>,
}

/// Intermediate values of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    z0: DMatrix<f64>,
    k: DMatrix<f64>,
    q: DMatrix<f64>,
    v: DMatrix<f64>,
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    z1: DMatrix<f64>,
    p: DMatrix<f64>,
    r: DMatrix<f64>,
}

fn check_finite(m: &DMatrix<f64>, op: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: op.into(),
            step: 0,
        })
    }
}

fn add_column(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

/// Column-wise softmax with max subtraction: column `q` is a distribution
/// over keys.
pub fn softmax_columns(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = s.clone();
    for mut col in a.column_iter_mut() {
        let m = col.max();
        col.apply(|v| *v = (*v - m).exp());
        let total = col.sum();
        col /= total;
    }
    a
}

impl TransformerParams {
    /// All-zero block with token dimension `d`, hidden `s`, MLP width `r`
    /// and `l` tokens.
    pub fn zeros(d: usize, s: usize, r: usize, l: usize) -> Self {
        Self {
            w_q: DMatrix::zeros(s, d),
            w_k: DMatrix::zeros(s, d),
            w_v: DMatrix::zeros(s, d),
            w_o: DMatrix::zeros(d, s),
            w_1: DMatrix::zeros(r, d),
            b_1: DVector::zeros(r),
            w_2: DMatrix::zeros(d, r),
            b_2: DVector::zeros(d),
            e: DMatrix::zeros(d, l),
        }
    }

    /// Output matrices `W_O`, `W_2` zero, inner matrices uniform on
    /// `[-scale, scale]`, biases zero, `E` the ramp `e_scale * (j + 1) / l`
    /// in every row of column `j`.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        s: usize,
        r: usize,
        l: usize,
        scale: f64,
        e_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(d, s, r, l);
        for m in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_1] {
            m.apply(|v| *v = rng.random_range(-scale..=scale));
        }
        p.e = DMatrix::from_fn(d, l, |_, j| e_scale * (j + 1) as f64 / l as f64);
        p
    }

    pub fn d(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn s(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn r(&self) -> usize {
        self.w_1.nrows()
    }

    pub fn l(&self) -> usize {
        self.e.ncols()
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> [(&'static str, &DMatrix<f64>); 7] {
        [
            ("W_Q", &self.w_q),
            ("W_K", &self.w_k),
            ("W_V", &self.w_v),
            ("W_O", &self.w_o),
            ("W_1", &self.w_1),
            ("W_2", &self.w_2),
            ("E", &self.e),
        ]
    }

    pub(crate) fn visit<F: FnMut(&str, &[f64])>(&self, f: &mut F) {
        f("W_Q", self.w_q.as_slice());
        f("W_K", self.w_k.as_slice());
        f("W_V", self.w_v.as_slice());
        f("W_O", self.w_o.as_slice());
        f("W_1", self.w_1.as_slice());
        f("b_1", self.b_1.as_slice());
        f("W_2", self.w_2.as_slice());
        f("b_2", self.b_2.as_slice());
        f("E", self.e.as_slice());
    }

    pub(crate) fn visit_mut<F: FnMut(&str, &mut [f64])>(&mut self, f: &mut F) {
        f("W_Q", self.w_q.as_mut_slice());
        f("W_K", self.w_k.as_mut_slice());
        f("W_V", self.w_v.as_mut_slice());
        f("W_O", self.w_o.as_mut_slice());
        f("W_1", self.w_1.as_mut_slice());
        f("b_1", self.b_1.as_mut_slice());
        f("W_2", self.w_2.as_mut_slice());
        f("b_2", self.b_2.as_mut_slice());
        f("E", self.e.as_mut_slice());
    }

    fn check_input(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.nrows() != self.d() || z.ncols() != self.l() {
            return Err(Error::Shape(format!(
                "block expects {}x{} input, got {}x{}",
                self.d(),
                self.l(),
                z.nrows(),
                z.ncols()
            )));
        }
        check_finite(z, "block input")
    }

    /// The self-attention layer's attention weights and hidden values for
    /// input `z` (positional encoding not added).
    fn attention_parts(
        &self,
        z: &DMatrix<f64>,
    ) -> (
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
        DMatrix<f64>,
    ) {
        let k = &self.w_k * z;
        let q = &self.w_q * z;
        let v = &self.w_v * z;
        let a = softmax_columns(&(k.transpose() * &q));
        let h = &v * &a;
        (k, q, v, a, h)
    }

    /// Attention weights `softmax((W_K Z)^T (W_Q Z))`.
    pub fn attention_weights(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.attention_parts(z).3
    }

    /// `Z + W_O (W_V Z) softmax((W_K Z)^T (W_Q Z))`.
    pub fn attention_forward(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.d() {
            return Err(Error::Shape(format!(
                "attention expects {} rows, got {}",
                self.d(),
                z.nrows()
            )));
        }
        check_finite(z, "attention input")?;
        let (_, _, _, _, h) = self.attention_parts(z);
        Ok(z + &self.w_o * h)
    }

    /// `Z + W_2 ReLU(W_1 Z + b_1) + b_2`.
    pub fn ffn_forward(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.d() {
            return Err(Error::Shape(format!(
                "feed-forward expects {} rows, got {}",
                self.d(),
                z.nrows()
            )));
        }
        check_finite(z, "feed-forward input")?;
        let mut p = &self.w_1 * z;
        add_column(&mut p, &self.b_1);
        p.apply(|v| *v = v.max(0.0));
        let mut out = z + &self.w_2 * p;
        add_column(&mut out, &self.b_2);
        Ok(out)
    }

    pub fn forward(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(z)?.0)
    }

    pub fn forward_cached(&self, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, BlockCache)> {
        self.check_input(z)?;
        let z0 = z + &self.e;
        let (k, q, v, a, h) = self.attention_parts(&z0);
        let z1 = &z0 + &self.w_o * &h;
        let mut p = &self.w_1 * &z1;
        add_column(&mut p, &self.b_1);
        let r = p.map(|v| v.max(0.0));
        let mut z2 = &z1 + &self.w_2 * &r;
        add_column(&mut z2, &self.b_2);
        check_finite(&z2, "block output")?;
        Ok((
            z2,
            BlockCache {
                z0,
                k,
                q,
                v,
                a,
                h,
                z1,
                p,
                r,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` given `g2 = dL/dZ_out` and
    /// returns `dL/dZ_in`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        g2: &DMatrix<f64>,
        grad: &mut TransformerParams,
    ) -> DMatrix<f64> {
        // feed-forward
        grad.w_2 += g2 * cache.r.transpose();
        grad.b_2 += g2.column_sum();
        let dr = self.w_2.transpose() * g2;
        let dp = dr.zip_map(&cache.p, |g, p| if p > 0.0 { g } else { 0.0 });
        grad.w_1 += &dp * cache.z1.transpose();
        grad.b_1 += dp.column_sum();
        let g1 = g2 + self.w_1.transpose() * &dp;
        // attention
        grad.w_o += &g1 * cache.h.transpose();
        let dh = self.w_o.transpose() * &g1;
        let dv = &dh * cache.a.transpose();
        let da = cache.v.transpose() * &dh;
        let mut ds = DMatrix::zeros(da.nrows(), da.ncols());
        for c in 0..da.ncols() {
            let ac = cache.a.column(c);
            let dac = da.column(c);
            let inner = ac.dot(&dac);
            for k in 0..da.nrows() {
                ds[(k, c)] = ac[k] * (dac[k] - inner);
            }
        }
        let dk = &cache.q * ds.transpose();
        let dq = &cache.k * &ds;
        let z0t = cache.z0.transpose();
        grad.w_q += &dq * &z0t;
        grad.w_k += &dk * &z0t;
        grad.w_v += &dv * &z0t;
        let g0 =
            g1 + self.w_q.transpose() * dq + self.w_k.transpose() * dk + self.w_v.transpose() * dv;
        grad.e += &g0;
        g0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_block(seed: u64, d: usize, s: usize, r: usize, l: usize) -> TransformerParams {
        let mut rng = seeded(seed);
        let mut p = TransformerParams::init(d, s, r, l, 0.8, 0.3, &mut rng);
        p.w_o.apply(|v| *v = rng.random_range(-0.8..0.8));
        p.w_2.apply(|v| *v = rng.random_range(-0.8..0.8));
        p.b_1.apply(|v| *v = rng.random_range(-0.5..0.5));
        p.b_2.apply(|v| *v = rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn zero_output_matrix_is_identity() {
        let mut p = random_block(1, 2, 4, 8, 3);
        p.w_o.fill(0.0);
        let z = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 2.0, 1.3, 0.0, -0.7]);
        assert_eq!(p.attention_forward(&z).unwrap(), z);
    }

    #[test]
    fn single_token_attention() {
        let p = random_block(2, 2, 4, 8, 1);
        let z = DMatrix::from_column_slice(2, 1, &[0.3, -1.2]);
        let want = &z + &p.w_o * &p.w_v * &z;
        assert!((p.attention_forward(&z).unwrap() - want).abs().max() < 1e-14);
    }

    #[test]
    fn attention_matches_scalar_loops() {
        let p = random_block(3, 2, 4, 8, 3);
        let z = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 1.1, 0.9, 0.4, -1.5]);
        let (d, s, l) = (2, 4, 3);
        let lin = |w: &DMatrix<f64>, c: usize, i: usize| {
            (0..d).map(|j| w[(i, j)] * z[(j, c)]).sum::<f64>()
        };
        let mut out = z.clone();
        for q in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|k| (0..s).map(|i| lin(&p.w_k, k, i) * lin(&p.w_q, q, i)).sum())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for row in 0..d {
                let mut acc = 0.0;
                for i in 0..s {
                    let hv: f64 = (0..l).map(|k| lin(&p.w_v, k, i) * e[k] / tot).sum();
                    acc += p.w_o[(row, i)] * hv;
                }
                out[(row, q)] += acc;
            }
        }
        assert!((p.attention_forward(&z).unwrap() - out).abs().max() < 1e-13);
    }

    #[test]
    fn ffn_examples() {
        let mut p = random_block(4, 2, 4, 2, 3);
        let z = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 1.1, 0.9, 0.4, -1.5]);
        let mut id = p.clone();
        id.w_2.fill(0.0);
        id.b_2.fill(0.0);
        assert_eq!(id.ffn_forward(&z).unwrap(), z);

        p.w_1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        p.b_1 = DVector::from_vec(vec![-10.0, -10.0]);
        let mut want = z.clone();
        add_column(&mut want, &p.b_2);
        assert_eq!(p.ffn_forward(&z).unwrap(), want);

        p.w_1 = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        p.b_1 = DVector::from_vec(vec![0.1, -0.3]);
        p.w_2 = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 0.3, 1.1]);
        p.b_2 = DVector::from_vec(vec![0.05, -0.05]);
        let got = p.ffn_forward(&z).unwrap();
        for c in 0..3 {
            let h0 = (z[(0, c)] - z[(1, c)] + 0.1f64).max(0.0);
            let h1 = (0.5 * z[(0, c)] + 2.0 * z[(1, c)] - 0.3f64).max(0.0);
            let o0 = z[(0, c)] + 0.7 * h0 - 0.2 * h1 + 0.05;
            let o1 = z[(1, c)] + 0.3 * h0 + 1.1 * h1 - 0.05;
            assert!((got[(0, c)] - o0).abs() < 1e-15 && (got[(1, c)] - o1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_columns_are_distributions() {
        let s = DMatrix::from_row_slice(3, 2, &[1000.0, -3.0, 999.0, 2.0, -1000.0, 0.5]);
        let a = softmax_columns(&s);
        for c in a.column_iter() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = random_block(5, 2, 4, 8, 2);
        let z = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(
            p.attention_forward(&z),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = random_block(6, 2, 4, 8, 3);
        let z = DMatrix::from_row_slice(2, 3, &[0.5, -0.2, 1.1, 0.9, 0.4, -1.5]);
        let c = DMatrix::from_row_slice(2, 3, &[0.3, 1.0, -0.6, 0.2, -0.9, 0.4]);
        let loss =
            |p: &TransformerParams, z: &DMatrix<f64>| p.forward(z).unwrap().component_mul(&c).sum();
        let (_, cache) = p.forward_cached(&z).unwrap();
        let mut grad = TransformerParams::zeros(2, 4, 8, 3);
        let gz = p.backward(&cache, &c, &mut grad);
        let mut analytic = Vec::new();
        grad.visit(&mut |_, s| analytic.extend_from_slice(s));
        let mut count = 0;
        p.visit(&mut |_, s| count += s.len());
        for k in 0..count {
            let mut plus = p.clone();
            let mut minus = p.clone();
            let mut j = 0;
            plus.visit_mut(&mut |_, s| {
                for v in s.iter_mut() {
                    if j == k {
                        *v += 1e-6;
                    }
                    j += 1;
                }
            });
            j = 0;
            minus.visit_mut(&mut |_, s| {
                for v in s.iter_mut() {
                    if j == k {
                        *v -= 1e-6;
                    }
                    j += 1;
                }
            });
            let fd = (loss(&plus, &z) - loss(&minus, &z)) / 2e-6;
            assert!(
                (fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {k}: {fd} vs {}",
                analytic[k]
            );
        }
        for i in 0..2 {
            for j in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[(i, j)] += 1e-6;
                zm[(i, j)] -= 1e-6;
                let fd = (loss(&p, &zp) - loss(&p, &zm)) / 2e-6;
                assert!((fd - gz[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
