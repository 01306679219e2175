//! Explicit one-layer single-head attention universal approximator.
//!
//! The network is three ordinary transformer blocks with the unused sublayer
//! zeroed: a quantizing feed-forward block, a rank-`rho` attention block that
//! assigns every (token, vocabulary) pair a separated context ID, and a
//! memorizing feed-forward block made of trapezoid bumps.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::transformer::TransformerParams;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeSet;

/// Seed root for the deterministic direction searches.
const DIRECTION_ROOT: u64 = 0x5eed_da7a;

/// Ideal quantizer: `((j-1)/D, j/D] -> j/D`, non-positive inputs to 0,
/// inputs above 1 to 1.
pub fn quant(x: f64, d_gran: usize) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x > 1.0 {
        1.0
    } else {
        let n = d_gran as f64;
        ((x * n).ceil() / n).min(1.0)
    }
}

/// Ideal out-of-range indicator: `-1` outside `(0, 1]`, else 0.
pub fn penalty(x: f64) -> f64 {
    if x <= 0.0 || x > 1.0 {
        -1.0
    } else {
        0.0
    }
}

/// Target values on the grid `{1/D, ..., 1}^{d x L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub granularity: usize,
    pub d: usize,
    pub l: usize,
    /// `(G, f(G))` for every grid cell, in lexicographic order of the
    /// column-major entry indices.
    pub labels: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl GridFunction {
    pub fn from_target<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(
        granularity: usize,
        d: usize,
        l: usize,
        target: F,
    ) -> Result<Self> {
        if granularity == 0 || d == 0 || l == 0 {
            return Err(Error::Config("grid needs D, d, L >= 1".into()));
        }
        let cells = granularity
            .checked_pow((d * l) as u32)
            .filter(|&c| c <= 1 << 20)
            .ok_or_else(|| {
                Error::Config(format!(
                    "grid with D={granularity}, d*L={} is too large",
                    d * l
                ))
            })?;
        let mut labels = Vec::with_capacity(cells);
        for mut idx in 0..cells {
            let g = DMatrix::from_fn(d, l, |_, _| {
                let j = idx % granularity;
                idx /= granularity;
                (j + 1) as f64 / granularity as f64
            });
            let y = target(&g);
            if y.shape() != (d, l) || y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(
                    "target must return a finite d x L matrix".into(),
                ));
            }
            labels.push((g, y));
        }
        Ok(Self {
            granularity,
            d,
            l,
            labels,
        })
    }

    /// Cell `G + [-1/D, 0)^{d x L}` has its center at `G - 1/(2D)`.
    pub fn center(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        g.add_scalar(-0.5 / self.granularity as f64)
    }
}

/// True when two columns of `g` coincide.
pub fn has_duplicate_tokens(g: &DMatrix<f64>) -> bool {
    (0..g.ncols()).any(|a| (a + 1..g.ncols()).any(|b| g.column(a) == g.column(b)))
}

/// Quantizing feed-forward block for `d x L` inputs: each entry gets
/// `quant_D` and each column additionally gets the sum of its entries'
/// penalties. The residual path is cancelled with `ReLU(x) - ReLU(-x)`.
pub fn build_quantizer(
    granularity: usize,
    delta_q: f64,
    d: usize,
    l: usize,
) -> Result<TransformerParams> {
    let n = granularity as f64;
    if granularity == 0 || !(delta_q > 0.0 && delta_q < 1.0 / n) {
        return Err(Error::Config(format!(
            "delta_q must lie in (0, 1/D), got {delta_q} with D={granularity}"
        )));
    }
    let per = 2 * granularity + 6;
    let mut p = TransformerParams::zeros(d, 1, d * per, l);
    let inv = 1.0 / delta_q;
    for t in 0..d {
        let base = t * per;
        let mut unit = |k: usize, w: f64, b: f64, out: &[(usize, f64)]| {
            p.w_1[(base + k, t)] = w;
            p.b_1[base + k] = b;
            for &(row, c) in out {
                p.w_2[(row, base + k)] = c;
            }
        };
        for s in 0..granularity {
            let shift = s as f64 / (delta_q * n);
            unit(2 * s, inv, -shift, &[(t, 1.0 / n)]);
            unit(2 * s + 1, inv, -1.0 - shift, &[(t, -1.0 / n)]);
        }
        let k = 2 * granularity;
        let all = |c: f64| (0..d).map(|r| (r, c)).collect::<Vec<_>>();
        // above 1: -(ReLU((x-1)/dq) - ReLU((x-1)/dq - 1))
        unit(k, inv, -inv, &all(-1.0));
        unit(k + 1, inv, -inv - 1.0, &all(1.0));
        // at or below 0: -(ReLU(1 - x/dq) - ReLU(-x/dq))
        unit(k + 2, -inv, 1.0, &all(-1.0));
        unit(k + 3, -inv, 0.0, &all(1.0));
        unit(k + 4, 1.0, 0.0, &[(t, -1.0)]);
        unit(k + 5, -1.0, 0.0, &[(t, 1.0)]);
    }
    Ok(p)
}

/// Tokenwise separation constants and attention rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub rho: usize,
    /// Logit separation target, `4 ln L`.
    pub delta: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub eps_sep: f64,
    /// Upper bound on `|logit|`; the key/query scale is reduced to respect it.
    pub logit_cap: f64,
}

impl ContextConfig {
    /// Grid vocabulary `{1/D, ..., 1}^d`: `gamma_min = eps = 0.99/D`,
    /// `gamma_max = 1.01 sqrt(d)`, full rank.
    pub fn for_grid(granularity: usize, d: usize, l: usize) -> Self {
        let eps = 0.99 / granularity as f64;
        Self {
            rho: d,
            delta: 4.0 * (l as f64).ln(),
            gamma_min: eps,
            gamma_max: 1.01 * (d as f64).sqrt(),
            eps_sep: eps,
            logit_cap: 5.0,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.gamma_min < self.gamma_max) || !(self.eps_sep > 0.0) || !(self.logit_cap > 0.0) {
            return Err(Error::Config(
                "need gamma_min < gamma_max, eps > 0, logit_cap > 0".into(),
            ));
        }
        if self.rho == 0 || self.rho > d {
            return Err(Error::Config(format!(
                "rank {} must be in 1..={d}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Checks tokenwise `(gamma_min, gamma_max, eps)` separation.
pub fn check_separated(vocab: &[DVector<f64>], cfg: &ContextConfig) -> Result<()> {
    for (i, v) in vocab.iter().enumerate() {
        let n = v.norm();
        if !(n > cfg.gamma_min && n < cfg.gamma_max) {
            return Err(Error::Separation(format!(
                "token {i} has norm {n} outside ({}, {})",
                cfg.gamma_min, cfg.gamma_max
            )));
        }
        for (j, w) in vocab.iter().enumerate().skip(i + 1) {
            let gap = (v - w).norm();
            if !(gap > cfg.eps_sep) {
                return Err(Error::Separation(format!(
                    "tokens {i} and {j} are {gap} apart, need > {}",
                    cfg.eps_sep
                )));
            }
        }
    }
    Ok(())
}

fn random_unit<R: Rng + ?Sized>(d: usize, positive: bool, rng: &mut R) -> DVector<f64> {
    let mut u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    if positive {
        u.apply(|v| *v = v.abs() + 0.05);
    }
    let n = u.norm();
    u / n
}

/// Worst ratio `|u^T (a - b)| / ||a - b||` over distinct pairs.
fn projection_ratio(points: &[DVector<f64>], u: &DVector<f64>) -> f64 {
    let mut worst = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let diff = a - b;
            let n = diff.norm();
            if n > 0.0 {
                worst = worst.min(u.dot(&diff).abs() / n);
            }
        }
    }
    worst
}

/// Unit vector keeping distinct points of `V + {0}` apart after projection,
/// at least by the factor `sqrt(8 / (pi d)) / |X|^2`.
pub fn separating_direction(vocab: &[DVector<f64>]) -> Result<DVector<f64>> {
    let d = vocab.first().map_or(0, |v| v.len());
    if d == 0 {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let mut pts = vocab.to_vec();
    pts.push(DVector::zeros(d));
    let need = (8.0 / (std::f64::consts::PI * d as f64)).sqrt() / (pts.len() * pts.len()) as f64;
    let mut rng = stream(DIRECTION_ROOT, "uat-attention-direction", 0);
    let mut best = (f64::NEG_INFINITY, DVector::zeros(d));
    for trial in 0..512 {
        let u = if trial == 0 && d == 1 {
            DVector::from_element(1, 1.0)
        } else {
            random_unit(d, false, &mut rng)
        };
        let r = projection_ratio(&pts, &u);
        if r > best.0 {
            best = (r, u);
        }
        if best.0 >= 4.0 * need {
            break;
        }
    }
    if best.0 < need {
        return Err(Error::Separation(format!(
            "no direction separates the vocabulary (best ratio {})",
            best.0
        )));
    }
    Ok(best.1)
}

/// Orthonormal `[u, q_2, ..., q_rho]` by Gram-Schmidt over the standard basis.
fn completion(u: &DVector<f64>, rho: usize) -> Vec<DVector<f64>> {
    let d = u.len();
    let mut qs = vec![u.clone()];
    for e in 0..d {
        if qs.len() == rho {
            break;
        }
        let mut v = DVector::zeros(d);
        v[e] = 1.0;
        for q in &qs {
            v -= q * q.dot(&v);
        }
        let n = v.norm();
        if n > 1e-8 {
            qs.push(v / n);
        }
    }
    qs
}

/// Rank-`rho` contextual-mapping attention and its constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAttention {
    pub block: TransformerParams,
    pub cfg: ContextConfig,
    pub vocab_size: usize,
    pub direction: DVector<f64>,
    /// `5 (|V| + 1)^4 d delta / (eps gamma_min)`, the scale needed for full separation.
    pub lambda_nominal: f64,
    /// Scale actually used, `min(lambda_nominal, logit_cap / gamma_max^2)`.
    pub lambda: f64,
    /// `W_O p''_i` for each rank component.
    pub out_vectors: Vec<DVector<f64>>,
    /// Separation scale `ln^2 L e^{-2 gamma} eps / (4 lambda gamma_max^2)`
    /// with `gamma = lambda gamma_max^2`.
    pub delta_prime: f64,
}

/// `W_K = sum p_i q_i^T`, `W_Q = lambda sum p_i q_i^T`, `W_V = sum p_i q_i^T`,
/// `W_O = sum c q_i p_i^T` with orthonormal `p_i` and `q_i`, `q_1 = u`, and
/// `c = eps / (4 rho gamma_max)`.
pub fn build_context_attention(
    vocab: &[DVector<f64>],
    cfg: &ContextConfig,
    l: usize,
) -> Result<ContextAttention> {
    let d = vocab.first().map_or(0, |v| v.len());
    cfg.validate(d)?;
    if l < 2 {
        return Err(Error::Config("contextual mapping needs L >= 2".into()));
    }
    check_separated(vocab, cfg)?;
    let u = separating_direction(vocab)?;
    let qs = completion(&u, cfg.rho);
    let rho = qs.len();
    let s = rho;
    let nv = vocab.len() as f64;
    let lambda_nominal =
        5.0 * (nv + 1.0).powi(4) * d as f64 * cfg.delta / (cfg.eps_sep * cfg.gamma_min);
    let lambda = lambda_nominal.min(cfg.logit_cap / (cfg.gamma_max * cfg.gamma_max));
    let c = cfg.eps_sep / (4.0 * rho as f64 * cfg.gamma_max);
    let mut block = TransformerParams::zeros(d, s, 1, l);
    for (i, q) in qs.iter().enumerate() {
        for j in 0..d {
            block.w_k[(i, j)] = q[j];
            block.w_q[(i, j)] = lambda * q[j];
            block.w_v[(i, j)] = q[j];
            block.w_o[(j, i)] = c * q[j];
        }
    }
    let out_vectors = (0..s).map(|i| block.w_o.column(i).into_owned()).collect();
    let g = lambda * cfg.gamma_max * cfg.gamma_max;
    let ln_l = (l as f64).ln();
    let delta_prime = ln_l * ln_l * (-2.0 * g).exp() * cfg.eps_sep / (4.0 * g);
    Ok(ContextAttention {
        block,
        cfg: cfg.clone(),
        vocab_size: vocab.len(),
        direction: u,
        lambda_nominal,
        lambda,
        out_vectors,
        delta_prime,
    })
}

impl ContextAttention {
    pub fn forward(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.block.attention_forward(z)
    }
}

/// Bump memorizer over one-dimensional projections of the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Memorizer {
    pub block: TransformerParams,
    pub direction: DVector<f64>,
    pub r: f64,
    /// Smallest gap between projected distinct keys.
    pub gap: f64,
}

/// `(key, label)` pairs; equal keys must carry equal labels.
pub type MemoryTable = Vec<(DVector<f64>, DVector<f64>)>;

fn dedup_table(table: &[(DVector<f64>, DVector<f64>)]) -> Result<MemoryTable> {
    let mut out: MemoryTable = Vec::new();
    for (k, v) in table {
        match out.iter().find(|(k2, _)| (k - k2).amax() <= 1e-12) {
            Some((_, v2)) if (v - v2).amax() > 1e-12 => {
                return Err(Error::Separation(
                    "one context ID carries two different labels".into(),
                ))
            }
            Some(_) => {}
            None => out.push((k.clone(), v.clone())),
        }
    }
    Ok(out)
}

fn projected_gap(keys: &[f64]) -> f64 {
    let mut s = keys.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// Maps each key to its label and every input with all entries below
/// `floor` to zero. Keys must have all entries above `floor`. `r = None`
/// picks `3 / gap`.
pub fn build_memorizer(
    table: &[(DVector<f64>, DVector<f64>)],
    floor: f64,
    r: Option<f64>,
    l: usize,
) -> Result<Memorizer> {
    let table = dedup_table(table)?;
    let d = table.first().map_or(0, |(k, _)| k.len());
    if d == 0 {
        return Err(Error::Config("empty memory table".into()));
    }
    if table.iter().any(|(k, _)| k.min() <= floor) {
        return Err(Error::Resolution(
            "a key lies at or below the zero floor".into(),
        ));
    }
    let mut rng = stream(DIRECTION_ROOT, "uat-memorizer-direction", 0);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for trial in 0..256 {
        let w = if d == 1 && trial == 0 {
            DVector::from_element(1, 1.0)
        } else {
            random_unit(d, true, &mut rng)
        };
        let proj: Vec<f64> = table.iter().map(|(k, _)| w.dot(k)).collect();
        let floor_margin = proj.iter().cloned().fold(f64::INFINITY, f64::min) - floor * w.sum();
        let gap = projected_gap(&proj).min(floor_margin);
        if best.as_ref().is_none_or(|(g, _)| gap > *g) {
            best = Some((gap, w));
        }
        if d == 1 {
            break;
        }
    }
    let (gap, w) = best.expect("at least one trial");
    if !(gap > 0.0) {
        return Err(Error::Resolution(
            "context IDs collide after projection".into(),
        ));
    }
    let r = r.unwrap_or(3.0 / gap);
    if !(r * gap > 2.0) {
        return Err(Error::Resolution(format!(
            "bump scale {r} too small for ID gap {gap}: need R * gap > 2"
        )));
    }
    let live: Vec<_> = table
        .iter()
        .filter(|(_, v)| v.iter().any(|x| *x != 0.0))
        .collect();
    let mut block = TransformerParams::zeros(d, 1, 2 * d + 4 * live.len().max(1), l);
    for t in 0..d {
        block.w_1[(2 * t, t)] = 1.0;
        block.w_1[(2 * t + 1, t)] = -1.0;
        block.w_2[(t, 2 * t)] = -1.0;
        block.w_2[(t, 2 * t + 1)] = 1.0;
    }
    for (i, (k, v)) in live.iter().enumerate() {
        let s = w.dot(k);
        for (j, (off, sign)) in [(2.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-2.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            let unit = 2 * d + 4 * i + j;
            for c in 0..d {
                block.w_1[(unit, c)] = r * w[c];
                block.w_2[(c, unit)] = sign * v[c];
            }
            block.b_1[unit] = off - r * s;
        }
    }
    Ok(Memorizer {
        block,
        direction: w,
        r,
        gap,
    })
}

impl Memorizer {
    pub fn forward(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.block.ffn_forward(z)
    }
}

/// Composed `FF_2 o SA o FF_1` network with its construction data.
#[derive(Debug, Clone)]
pub struct UatNetwork {
    pub grid: GridFunction,
    pub delta_q: f64,
    pub quantizer: TransformerParams,
    pub attention: ContextAttention,
    pub memorizer: Memorizer,
    /// Minimum distance between context IDs of distinct (token, vocabulary)
    /// pairs over all grid cells.
    pub separation_margin: f64,
    /// Largest column displacement caused by the attention over the grid.
    pub max_movement: f64,
}

/// Builds the network for `target` on `[0,1]^{d x L}` at granularity `D`.
/// Duplicate-token cells are memorized with label 0.
pub fn assemble_uat<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(
    target: F,
    d: usize,
    l: usize,
    granularity: usize,
    delta_q: Option<f64>,
    r: Option<f64>,
) -> Result<UatNetwork> {
    let grid = GridFunction::from_target(granularity, d, l, target)?;
    let delta_q = delta_q.unwrap_or(0.1 / granularity as f64);
    let quantizer = build_quantizer(granularity, delta_q, d, l)?;
    let vocab: Vec<DVector<f64>> = (0..granularity.pow(d as u32))
        .map(|mut idx| {
            DVector::from_fn(d, |_, _| {
                let j = idx % granularity;
                idx /= granularity;
                (j + 1) as f64 / granularity as f64
            })
        })
        .collect();
    let attention =
        build_context_attention(&vocab, &ContextConfig::for_grid(granularity, d, l), l)?;
    let mut table = Vec::new();
    let mut ids = Vec::new();
    let mut max_movement: f64 = 0.0;
    for (g, y) in &grid.labels {
        let out = attention.forward(g)?;
        let dup = has_duplicate_tokens(g);
        for k in 0..l {
            let id = out.column(k).into_owned();
            max_movement = max_movement.max((&id - g.column(k)).norm());
            let label = if dup {
                DVector::zeros(d)
            } else {
                y.column(k).into_owned()
            };
            table.push((id.clone(), label));
            ids.push((token_key(&g.column(k).into_owned()), vocab_key(g), id));
        }
    }
    let separation_margin = separation_margin(&ids);
    if !(separation_margin > 0.0) {
        return Err(Error::Separation(
            "two distinct (token, vocabulary) pairs share a context ID".into(),
        ));
    }
    let floor = 0.25 / granularity as f64;
    let memorizer = build_memorizer(&table, floor, r, l)?;
    Ok(UatNetwork {
        grid,
        delta_q,
        quantizer,
        attention,
        memorizer,
        separation_margin,
        max_movement,
    })
}

type Key = Vec<u64>;

fn token_key(v: &DVector<f64>) -> Key {
    v.iter().map(|x| x.to_bits()).collect()
}

fn vocab_key(g: &DMatrix<f64>) -> BTreeSet<Key> {
    g.column_iter()
        .map(|c| token_key(&c.into_owned()))
        .collect()
}

/// Smallest distance between IDs whose (token, vocabulary) pairs differ.
pub fn separation_margin(ids: &[(Key, BTreeSet<Key>, DVector<f64>)]) -> f64 {
    let mut m = f64::INFINITY;
    for (i, (ta, va, a)) in ids.iter().enumerate() {
        for (tb, vb, b) in &ids[i + 1..] {
            if ta != tb || va != vb {
                m = m.min((a - b).norm());
            }
        }
    }
    m
}

/// Context IDs for every duplicate-free sequence of `L` distinct tokens
/// drawn from `vocab` (one ordering per vocabulary set).
pub fn context_ids(
    attention: &ContextAttention,
    vocab: &[DVector<f64>],
    l: usize,
) -> Result<Vec<(Key, BTreeSet<Key>, DVector<f64>)>> {
    let n = vocab.len();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..l).collect();
    if l > n {
        return Ok(out);
    }
    loop {
        let z = DMatrix::from_columns(&idx.iter().map(|&i| vocab[i].clone()).collect::<Vec<_>>());
        let ids = attention.forward(&z)?;
        let vk = vocab_key(&z);
        for (k, &i) in idx.iter().enumerate() {
            out.push((token_key(&vocab[i]), vk.clone(), ids.column(k).into_owned()));
        }
        // next combination
        let mut pos = l;
        while pos > 0 && idx[pos - 1] == n - l + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        for j in pos..l {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Per-cell comparison at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorizationReport {
    pub cells: usize,
    pub duplicate_free: usize,
    /// `max |net(center) - f(G)|` over duplicate-free cells.
    pub max_label_error: f64,
    /// `max |net(center) - f(center)|` over duplicate-free cells.
    pub max_target_error: f64,
    /// `max |net(center)|` over duplicate-token cells.
    pub max_duplicate_output: f64,
}

impl UatNetwork {
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let q = self.quantizer.ffn_forward(x)?;
        let c = self.attention.forward(&q)?;
        self.memorizer.forward(&c)
    }

    pub fn memorization_report<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(
        &self,
        target: F,
    ) -> Result<MemorizationReport> {
        let mut rep = MemorizationReport {
            cells: self.grid.labels.len(),
            duplicate_free: 0,
            max_label_error: 0.0,
            max_target_error: 0.0,
            max_duplicate_output: 0.0,
        };
        for (g, y) in &self.grid.labels {
            let c = self.grid.center(g);
            let out = self.forward(&c)?;
            if has_duplicate_tokens(g) {
                rep.max_duplicate_output = rep.max_duplicate_output.max(out.amax());
            } else {
                rep.duplicate_free += 1;
                rep.max_label_error = rep.max_label_error.max((&out - y).amax());
                rep.max_target_error = rep.max_target_error.max((&out - target(&c)).amax());
            }
        }
        Ok(rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn col_sum(z: &DMatrix<f64>) -> DMatrix<f64> {
        let s = z.sum();
        DMatrix::from_element(z.nrows(), z.ncols(), s)
    }

    fn quantize(p: &TransformerParams, x: f64) -> f64 {
        p.ffn_forward(&DMatrix::from_element(1, 1, x)).unwrap()[0]
    }

    #[test]
    fn quantizer_examples() {
        let p = build_quantizer(4, 0.025, 1, 1).unwrap();
        assert!((quantize(&p, 0.3) - 0.5).abs() < 1e-12);
        assert_eq!(quant(0.3, 4), 0.5);
        assert!((quantize(&p, 1.0) - 1.0).abs() < 1e-12);
        assert!((quantize(&p, -0.1) - (quant(-0.1, 4) + penalty(-0.1))).abs() < 1e-12);
        assert_eq!((quant(-0.1, 4), penalty(-0.1)), (0.0, -1.0));
        assert!((quantize(&p, 1.5) - 0.0).abs() < 1e-12);
        assert!(build_quantizer(4, 0.25, 1, 1).is_err());
        assert!(build_quantizer(4, 0.0, 1, 1).is_err());
    }

    #[test]
    fn quantizer_penalty_is_tokenwise() {
        let p = build_quantizer(3, 0.03, 2, 2).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.4, 0.9]);
        let out = p.ffn_forward(&x).unwrap();
        // column 0 has one entry out of range, column 1 none
        let want = DMatrix::from_row_slice(
            2,
            2,
            &[quant(0.5, 3) - 1.0, quant(0.2, 3), -1.0, quant(0.9, 3)],
        );
        assert!((out - want).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantizer_matches_ideal_off_boundaries(x in -0.5f64..1.5, dg in 1usize..8) {
            let dq = 0.1 / dg as f64;
            let p = build_quantizer(dg, dq, 1, 1).unwrap();
            let frac = (x * dg as f64).fract().abs();
            prop_assume!(!(x > 0.0 && x < 1.0 + dq && frac < 0.1 + 1e-9 && frac > 1e-9) && !(x > 1.0 && x < 1.0 + dq) && !(x > -dq && x <= 0.0));
            let ideal = quant(x, dg) + penalty(x);
            prop_assert!((quantize(&p, x) - ideal).abs() < 1e-9);
            let q = quant(x, dg);
            prop_assert_eq!(quant(q, dg), q);
        }
    }

    fn grid_vocab(dg: usize) -> Vec<DVector<f64>> {
        (1..=dg)
            .map(|j| DVector::from_element(1, j as f64 / dg as f64))
            .collect()
    }

    #[test]
    fn attention_examples() {
        let vocab = grid_vocab(3);
        let cfg = ContextConfig::for_grid(3, 1, 2);
        let att = build_context_attention(&vocab, &cfg, 2).unwrap();
        let z = DMatrix::from_row_slice(1, 2, &[1.0 / 3.0, 2.0 / 3.0]);
        let out = att.forward(&z).unwrap();
        assert_ne!(out[0], out[1]);
        // token 2/3 in contexts {1/3, 2/3} and {2/3, 1}
        let z2 = DMatrix::from_row_slice(1, 2, &[2.0 / 3.0, 1.0]);
        let out2 = att.forward(&z2).unwrap();
        let gap = (out[1] - out2[0]).abs();
        assert!(
            gap > att.delta_prime && att.delta_prime > 0.0,
            "{gap} vs {}",
            att.delta_prime
        );
        for (a, b) in [(&out, &z), (&out2, &z2)] {
            assert!((a - b).amax() < cfg.eps_sep / 4.0);
        }
        for w in &att.out_vectors {
            assert!(
                (w.norm() - cfg.eps_sep / (4.0 * att.cfg.rho as f64 * cfg.gamma_max)).abs() < 1e-9
            );
        }
        assert!(att.lambda <= att.lambda_nominal);
    }

    #[test]
    fn attention_rejects_unseparated_vocab() {
        let vocab = vec![
            DVector::from_element(1, 0.5),
            DVector::from_element(1, 0.501),
        ];
        let cfg = ContextConfig::for_grid(3, 1, 2);
        assert!(matches!(
            build_context_attention(&vocab, &cfg, 2),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn contextual_separation_on_random_vocabularies() {
        let mut rng = crate::rng::seeded(17);
        for (nv, d, l) in [(12usize, 2usize, 4usize), (8, 3, 3), (8, 1, 2), (10, 2, 3)] {
            let mut vocab: Vec<DVector<f64>> = Vec::new();
            while vocab.len() < nv {
                let v = DVector::from_fn(d, |_, _| rng.random_range(0.1..1.0));
                if vocab.iter().all(|w| (w - &v).norm() > 0.08) {
                    vocab.push(v);
                }
            }
            let cfg = ContextConfig {
                rho: d,
                delta: 4.0 * (l as f64).ln(),
                gamma_min: 0.05,
                gamma_max: 1.01 * (d as f64).sqrt(),
                eps_sep: 0.08,
                logit_cap: 5.0,
            };
            let att = build_context_attention(&vocab, &cfg, l).unwrap();
            let ids = context_ids(&att, &vocab, l).unwrap();
            let m = separation_margin(&ids);
            assert!(
                m > att.delta_prime && att.delta_prime > 0.0,
                "|V|={nv} d={d} L={l}: {m}"
            );
            assert!(att.block.w_v.singular_values().max() <= (d as f64).sqrt() + 1e-12);
            for (t, _, id) in &ids {
                let tok = DVector::from_iterator(d, t.iter().map(|b| f64::from_bits(*b)));
                assert!((id - tok).norm() < cfg.eps_sep / 4.0);
            }
        }
    }

    #[test]
    fn memorizer_examples() {
        let keys = [0.4, 0.55, 0.9];
        let zero: MemoryTable = keys
            .iter()
            .map(|&k| (DVector::from_element(1, k), DVector::from_element(1, 0.0)))
            .collect();
        let m = build_memorizer(&zero, 0.1, None, 1).unwrap();
        for x in [-3.0, 0.0, 0.4, 0.55, 2.0] {
            assert_eq!(m.forward(&DMatrix::from_element(1, 1, x)).unwrap()[0], 0.0);
        }
        let mut one = zero.clone();
        one[1].1[0] = 0.7;
        let m = build_memorizer(&one, 0.1, None, 1).unwrap();
        assert!((m.forward(&DMatrix::from_element(1, 1, 0.55)).unwrap()[0] - 0.7).abs() < 1e-9);
        assert!(m.forward(&DMatrix::from_element(1, 1, 0.4)).unwrap()[0].abs() < 1e-9);
        for x in [-5.0, 0.0, 0.05, 0.0999] {
            assert_eq!(m.forward(&DMatrix::from_element(1, 1, x)).unwrap()[0], 0.0);
        }
        assert!(matches!(
            build_memorizer(&one, 0.1, Some(5.0), 1),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn memorizer_in_two_dimensions() {
        let table: MemoryTable = vec![
            (
                DVector::from_vec(vec![0.3, 0.6]),
                DVector::from_vec(vec![1.0, -1.0]),
            ),
            (
                DVector::from_vec(vec![0.6, 0.3]),
                DVector::from_vec(vec![2.0, 0.5]),
            ),
            (
                DVector::from_vec(vec![0.6, 0.6]),
                DVector::from_vec(vec![0.0, 3.0]),
            ),
        ];
        let m = build_memorizer(&table, 0.2, None, 1).unwrap();
        for (k, v) in &table {
            let out = m
                .forward(&DMatrix::from_column_slice(2, 1, k.as_slice()))
                .unwrap();
            assert!((out.column(0) - v).amax() < 1e-9);
        }
        let low = DMatrix::from_column_slice(2, 1, &[0.19, -4.0]);
        assert_eq!(m.forward(&low).unwrap().amax(), 0.0);
    }

    #[test]
    fn uat_sum_target() {
        let net = assemble_uat(col_sum, 1, 2, 3, None, None).unwrap();
        let rep = net.memorization_report(col_sum).unwrap();
        assert_eq!((rep.cells, rep.duplicate_free), (9, 6));
        assert!(rep.max_label_error < 1e-3, "{rep:?}");
        assert!(rep.max_duplicate_output < 1e-9);
        assert!(net.separation_margin > net.attention.delta_prime);
        assert!(net.max_movement < net.attention.cfg.eps_sep / 4.0);
    }

    #[test]
    fn uat_constant_target_and_refinement() {
        let c = |z: &DMatrix<f64>| DMatrix::from_element(z.nrows(), z.ncols(), 0.37);
        let net = assemble_uat(c, 1, 2, 4, None, None).unwrap();
        for (g, _) in net
            .grid
            .labels
            .iter()
            .filter(|(g, _)| !has_duplicate_tokens(g))
        {
            let out = net.forward(g).unwrap();
            assert!((out.add_scalar(-0.37)).amax() < 1e-9);
        }
        let e3 = assemble_uat(col_sum, 1, 2, 3, None, None)
            .unwrap()
            .memorization_report(col_sum)
            .unwrap();
        let e6 = assemble_uat(col_sum, 1, 2, 6, None, None)
            .unwrap()
            .memorization_report(col_sum)
            .unwrap();
        assert!(e6.max_target_error <= e3.max_target_error);
        assert!(e6.max_label_error < 1e-3);
    }

    #[test]
    fn uat_two_dimensional_tokens() {
        let f = |z: &DMatrix<f64>| {
            let m = z.column_sum() / z.ncols() as f64;
            DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * m[i])
        };
        let net = assemble_uat(f, 2, 2, 2, None, None).unwrap();
        let rep = net.memorization_report(f).unwrap();
        assert_eq!(rep.duplicate_free, 12);
        assert!(rep.max_label_error < 1e-3, "{rep:?}");
    }
}
