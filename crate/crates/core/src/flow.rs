//! Affine autoregressive flow blocks, the visual-only shallow stack, the
//! Gaussian head of the deep stream and exact likelihood accounting.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Var};
use crate::backbone::{Backbone, BackboneConfig, KvCache, MaskMode};
use crate::error::{Error, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{linear, Matrix};

/// Hard bound on `|log σ|`.
pub const LOG_SIGMA_BOUND: f64 = 5.0;

/// Per-position affine parameters; `σ = exp(log_sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams<T> {
    pub mu: Matrix<T>,
    pub log_sigma: Matrix<T>,
}

impl<T: Scalar> FlowParams<T> {
    pub fn identity(n: usize, d: usize) -> Self {
        FlowParams {
            mu: Matrix::zeros(n, d),
            log_sigma: Matrix::zeros(n, d),
        }
    }

    /// Splits a `rows × 2D` head output into `μ` and a clamped `log σ`.
    pub fn from_head(raw: &Matrix<T>) -> Self {
        let d = raw.cols / 2;
        let mut mu = Matrix::zeros(raw.rows, d);
        let mut log_sigma = Matrix::zeros(raw.rows, d);
        let b = T::lit(LOG_SIGMA_BOUND);
        for r in 0..raw.rows {
            let row = raw.row(r);
            mu.row_mut(r).copy_from_slice(&row[..d]);
            for (o, &v) in log_sigma.row_mut(r).iter_mut().zip(&row[d..]) {
                *o = v.max(-b).min(b);
            }
        }
        FlowParams { mu, log_sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.shape() != self.log_sigma.shape() {
            return Err(Error::Shape("mu and log_sigma shapes differ".into()));
        }
        if !self.mu.is_finite() {
            return Err(Error::Numeric("non-finite mu".into()));
        }
        let b = T::lit(LOG_SIGMA_BOUND);
        if self.log_sigma.data.iter().any(|&v| !v.is_finite() || v < -b || v > b) {
            return Err(Error::Numeric(format!("log sigma outside [-{b}, {b}]")));
        }
        Ok(())
    }

    /// Fraction of entries sitting on the clamp boundary.
    pub fn clamp_rate(&self) -> f64 {
        if self.log_sigma.is_empty() {
            return 0.0;
        }
        let b = LOG_SIGMA_BOUND - 1e-6;
        let hits = self.log_sigma.data.iter().filter(|v| v.as_f64().abs() >= b).count();
        hits as f64 / self.log_sigma.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPassResult<T> {
    pub output: Matrix<T>,
    pub logdet: T,
}

/// `z = (x − μ)/σ` with `logdet = −Σ log σ`.
pub fn af_forward<T: Scalar>(x: &Matrix<T>, params: &FlowParams<T>) -> Result<FlowPassResult<T>> {
    params.validate()?;
    if x.shape() != params.mu.shape() {
        return Err(Error::Shape(format!("input {:?} vs params {:?}", x.shape(), params.mu.shape())));
    }
    let data = (0..x.len())
        .map(|i| (x.data[i] - params.mu.data[i]) * (-params.log_sigma.data[i]).exp())
        .collect();
    let logdet = -params.log_sigma.data.iter().copied().sum::<T>();
    Ok(FlowPassResult {
        output: Matrix { rows: x.rows, cols: x.cols, data },
        logdet,
    })
}

/// `x = μ + σ·z` for parameters already known (the non-sequential case).
pub fn af_inverse<T: Scalar>(z: &Matrix<T>, params: &FlowParams<T>) -> Result<Matrix<T>> {
    params.validate()?;
    if z.shape() != params.mu.shape() {
        return Err(Error::Shape(format!("input {:?} vs params {:?}", z.shape(), params.mu.shape())));
    }
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite z".into()));
    }
    let data = (0..z.len())
        .map(|i| params.mu.data[i] + params.log_sigma.data[i].exp() * z.data[i])
        .collect();
    Ok(Matrix { rows: z.rows, cols: z.cols, data })
}

/// Standard normal log-density summed over all entries.
pub fn log_prior<T: Scalar>(z: &Matrix<T>) -> T {
    let sq: T = z.data.iter().map(|&v| v * v).sum();
    let half_log_2pi = T::lit(0.5 * (2.0 * PI).ln());
    -T::lit(0.5) * sq - T::lit(z.len() as f64) * half_log_2pi
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nll {
    pub total: f64,
    pub per_dim: f64,
    pub clamp_rate: f64,
}

/// `Σ_n [½‖z_n‖² + Σ_d log σ + (D/2) log 2π] − logdet_S`.
pub fn nll_visual<T: Scalar>(u: &Matrix<T>, params: &FlowParams<T>, logdet_s: T) -> Result<Nll> {
    let pass = af_forward(u, params)?;
    let half_log_2pi = T::lit(0.5 * (2.0 * PI).ln());
    let mut total = T::zero();
    for i in 0..u.len() {
        let z = pass.output.data[i];
        total += T::lit(0.5) * z * z + params.log_sigma.data[i] + half_log_2pi;
    }
    total -= logdet_s;
    let total = total.as_f64();
    Ok(Nll {
        total,
        per_dim: total / u.len().max(1) as f64,
        clamp_rate: params.clamp_rate(),
    })
}

/// The same quantity assembled from the change-of-variables terms:
/// `−[log p₀(z) + logdet_D + logdet_S]`.
pub fn nll_from_terms<T: Scalar>(u: &Matrix<T>, params: &FlowParams<T>, logdet_s: T) -> Result<f64> {
    let pass = af_forward(u, params)?;
    Ok(-(log_prior(&pass.output) + pass.logdet + logdet_s).as_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    Raster,
    Reversed,
}

impl ScanOrder {
    /// Position visited at step `i` of an `n`-long scan.
    pub fn index(self, i: usize, n: usize) -> usize {
        match self {
            ScanOrder::Raster => i,
            ScanOrder::Reversed => n - 1 - i,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowConfig {
    pub blocks: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: f64,
}

#[derive(Clone, Debug)]
pub struct AfBlock {
    pub order: ScanOrder,
    in_w: ParamId,
    in_b: ParamId,
    backbone: Backbone,
    head_w: ParamId,
    head_b: ParamId,
}

/// Visual-only stack of affine AF blocks with alternating scan directions.
#[derive(Clone, Debug)]
pub struct ShallowStack {
    pub blocks: Vec<AfBlock>,
    pub n: usize,
    pub d: usize,
}

impl ShallowStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ShallowConfig,
        n: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bb = BackboneConfig {
            layers: cfg.layers,
            width: cfg.width,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            vocab: 1,
            max_seq: n,
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("shallow.block{i}");
            let g = Group::Shallow;
            blocks.push(AfBlock {
                order: if i % 2 == 0 { ScanOrder::Raster } else { ScanOrder::Reversed },
                in_w: store.normal(&format!("{p}.in.w"), g, d, cfg.width, 1.0 / (d as f64).sqrt(), rng),
                in_b: store.zeros(&format!("{p}.in.b"), g, 1, cfg.width),
                backbone: Backbone::new(store, &format!("{p}.tf"), g, &bb, rng)?,
                head_w: store.zeros(&format!("{p}.head.w"), g, cfg.width, 2 * d),
                head_b: store.zeros(&format!("{p}.head.b"), g, 1, 2 * d),
            });
        }
        Ok(ShallowStack { blocks, n, d })
    }

    fn check(&self, x: &Matrix<impl Scalar>) -> Result<()> {
        if x.shape() != (self.n, self.d) {
            return Err(Error::Shape(format!(
                "latent block is {:?}, expected ({}, {})",
                x.shape(),
                self.n,
                self.d
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite latent block".into()));
        }
        Ok(())
    }

    fn scan(&self, order: ScanOrder) -> Vec<usize> {
        (0..self.n).map(|i| order.index(i, self.n)).collect()
    }

    /// Affine parameters of block `b` for input `x`, in natural (unpermuted)
    /// position order.
    pub fn block_params<T: Scalar>(&self, store: &ParamStore<T>, b: usize, x: &Matrix<T>) -> Result<FlowParams<T>> {
        self.check(x)?;
        let blk = &self.blocks[b];
        let perm = self.scan(blk.order);
        let xp = x.select_rows(&perm);
        let h = linear(&xp, store.get(blk.in_w), Some(store.get(blk.in_b)));
        let y = blk.backbone.forward_full(store, &h, MaskMode::SelfExclusive)?;
        let raw = linear(&y, store.get(blk.head_w), Some(store.get(blk.head_b)));
        // `perm` is an involution for both scan orders.
        let raw = raw.select_rows(&perm);
        Ok(FlowParams::from_head(&raw))
    }

    pub fn block_forward<T: Scalar>(&self, store: &ParamStore<T>, b: usize, x: &Matrix<T>) -> Result<FlowPassResult<T>> {
        let params = self.block_params(store, b, x)?;
        af_forward(x, &params)
    }

    /// Sequential inverse of block `b`, one position at a time in scan order.
    pub fn block_inverse<T: Scalar>(&self, store: &ParamStore<T>, b: usize, z: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(z)?;
        let blk = &self.blocks[b];
        let mut cache = KvCache::new(&blk.backbone.cfg, MaskMode::SelfExclusive);
        let mut x = Matrix::zeros(self.n, self.d);
        let d = self.d;
        let bound = T::lit(LOG_SIGMA_BOUND);
        for i in 0..self.n {
            let pos = blk.order.index(i, self.n);
            let y = blk.backbone.predict_next(store, &mut cache)?;
            let y = Matrix { rows: 1, cols: y.len(), data: y };
            let raw = linear(&y, store.get(blk.head_w), Some(store.get(blk.head_b)));
            for c in 0..d {
                let ls = raw.data[d + c].max(-bound).min(bound);
                let v = raw.data[c] + ls.exp() * z.get(pos, c);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite inverse at position {pos}")));
                }
                x.set(pos, c, v);
            }
            let row = Matrix { rows: 1, cols: d, data: x.row(pos).to_vec() };
            let h = linear(&row, store.get(blk.in_w), Some(store.get(blk.in_b)));
            blk.backbone.commit_input(&h.data, &mut cache)?;
        }
        Ok(x)
    }

    /// `u = f_S(x)` and `logdet_S`.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Matrix<T>) -> Result<(Matrix<T>, T)> {
        self.check(x)?;
        let mut cur = x.clone();
        let mut logdet = T::zero();
        for b in 0..self.blocks.len() {
            let pass = self.block_forward(store, b, &cur)?;
            cur = pass.output;
            logdet += pass.logdet;
        }
        Ok((cur, logdet))
    }

    pub fn inverse<T: Scalar>(&self, store: &ParamStore<T>, u: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(u)?;
        let mut cur = u.clone();
        for b in (0..self.blocks.len()).rev() {
            cur = self.block_inverse(store, b, &cur)?;
        }
        Ok(cur)
    }

    /// Taped forward over `images` stacked blocks (`images·N × D`). Returns
    /// `u` and the summed `logdet_S` as a `1×1` node.
    pub fn forward_taped<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, images: usize) -> Result<(Var, Var)> {
        let (rows, cols) = ctx.value(x).shape();
        if rows != images * self.n || cols != self.d {
            return Err(Error::Shape(format!("stacked latents {rows}x{cols} for {images} images")));
        }
        let segments: Vec<Segment> = (0..images).map(|i| Segment::new(i * self.n, self.n)).collect();
        let mut cur = x;
        let mut logdet: Option<Var> = None;
        let b = T::lit(LOG_SIGMA_BOUND);
        for blk in &self.blocks {
            let perm: Vec<usize> = (0..images)
                .flat_map(|i| (0..self.n).map(move |j| i * self.n + blk.order.index(j, self.n)))
                .collect();
            let xp = ctx.tape.gather_rows(cur, &perm);
            let h = ctx.linear(xp, blk.in_w, Some(blk.in_b));
            let y = blk.backbone.forward(ctx, h, &segments, MaskMode::SelfExclusive)?;
            let raw = ctx.linear(y, blk.head_w, Some(blk.head_b));
            let mu = ctx.tape.slice_cols(raw, 0, self.d);
            let ls = ctx.tape.slice_cols(raw, self.d, self.d);
            let ls = ctx.tape.clamp(ls, -b, b);
            let zp = ctx.tape.affine_normalize(xp, mu, ls);
            cur = ctx.tape.gather_rows(zp, &perm);
            let s = ctx.tape.sum(ls);
            let ld = ctx.tape.scale(s, -T::one());
            logdet = Some(match logdet {
                Some(acc) => ctx.tape.add(acc, ld),
                None => ld,
            });
        }
        let logdet = match logdet {
            Some(v) => v,
            None => ctx.tape.constant(Matrix::scalar(T::zero())),
        };
        Ok((cur, logdet))
    }
}

/// Linear head mapping deep-stream states to Gaussian parameters.
#[derive(Clone, Debug)]
pub struct NgpHead {
    pub w: ParamId,
    pub b: ParamId,
    pub d: usize,
}

impl NgpHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, d: usize) -> Self {
        NgpHead {
            w: store.zeros("ngp.w", Group::NgpHead, width, 2 * d),
            b: store.zeros("ngp.b", Group::NgpHead, 1, 2 * d),
            d,
        }
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>, hidden: &Matrix<T>) -> FlowParams<T> {
        FlowParams::from_head(&linear(hidden, store.get(self.w), Some(store.get(self.b))))
    }

    /// Taped head: returns `(μ, clamped log σ)` nodes.
    pub fn taped<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, hidden: Var) -> (Var, Var) {
        let raw = ctx.linear(hidden, self.w, Some(self.b));
        let mu = ctx.tape.slice_cols(raw, 0, self.d);
        let ls = ctx.tape.slice_cols(raw, self.d, self.d);
        let b = T::lit(LOG_SIGMA_BOUND);
        (mu, ctx.tape.clamp(ls, -b, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    fn randomized_stack(seed: u64, n: usize, d: usize) -> (ParamStore<f64>, ShallowStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = ShallowConfig { blocks: 2, layers: 1, width: 8, heads: 2, ff_mult: 2.0 };
        let stack = ShallowStack::new(&mut store, &cfg, n, d, &mut rng).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * e;
            }
        }
        (store, stack)
    }

    fn random_block(seed: u64, n: usize, d: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn affine_arithmetic() {
        let p = FlowParams { mu: m(1, 1, &[0.5]), log_sigma: m(1, 1, &[2f64.ln()]) };
        let r = af_forward(&m(1, 1, &[2.0]), &p).unwrap();
        assert!((r.output.data[0] - 0.75).abs() < 1e-12);
        let x = af_inverse(&m(1, 1, &[0.75]), &p).unwrap();
        assert!((x.data[0] - 2.0).abs() < 1e-12);

        let p = FlowParams { mu: Matrix::zeros(2, 1), log_sigma: m(2, 1, &[2f64.ln(), 0.5f64.ln()]) };
        let r = af_forward(&m(2, 1, &[1.0, 1.0]), &p).unwrap();
        assert!(r.logdet.abs() < 1e-12);

        let x = random_block(1, 3, 2);
        let r = af_forward(&x, &FlowParams::identity(3, 2)).unwrap();
        assert_eq!(r.output, x);
        assert_eq!(r.logdet, 0.0);
    }

    #[test]
    fn out_of_range_sigma_is_rejected() {
        let p = FlowParams { mu: Matrix::zeros(1, 1), log_sigma: m(1, 1, &[5.5]) };
        assert!(matches!(af_forward(&m(1, 1, &[0.0]), &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn nll_closed_forms() {
        let u = Matrix::<f64>::zeros(16, 8);
        let nll = nll_visual(&u, &FlowParams::identity(16, 8), 0.0).unwrap();
        assert!((nll.total - 64.0 * (2.0 * PI).ln()).abs() < 1e-9);
        let doubled = FlowParams { mu: Matrix::zeros(16, 8), log_sigma: Matrix::filled(16, 8, 2f64.ln()) };
        let nll2 = nll_visual(&u, &doubled, 0.0).unwrap();
        assert!((nll2.total - nll.total - 128.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_paths_agree() {
        let u = random_block(2, 16, 8);
        let mu = random_block(3, 16, 8);
        let ls = random_block(4, 16, 8).map(|v| v.clamp(-2.0, 2.0));
        let p = FlowParams { mu, log_sigma: ls };
        let a = nll_visual(&u, &p, 1.7).unwrap().total;
        let b = nll_from_terms(&u, &p, 1.7).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn fresh_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = ShallowConfig { blocks: 2, layers: 1, width: 8, heads: 2, ff_mult: 2.0 };
        let stack = ShallowStack::new(&mut store, &cfg, 4, 3, &mut rng).unwrap();
        assert_eq!(stack.blocks[0].order, ScanOrder::Raster);
        assert_eq!(stack.blocks[1].order, ScanOrder::Reversed);
        let x = random_block(5, 4, 3);
        let (u, ld) = stack.forward(&store, &x).unwrap();
        assert_eq!(u, x);
        assert_eq!(ld, 0.0);
        assert_eq!(stack.inverse(&store, &x).unwrap(), x);
    }

    #[test]
    fn stack_round_trip() {
        let (store, stack) = randomized_stack(6, 5, 3);
        let x = random_block(7, 5, 3);
        let (u, _) = stack.forward(&store, &x).unwrap();
        assert!(u.max_abs_diff(&x) > 1e-3);
        let back = stack.inverse(&store, &u).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn block_params_respect_scan_order() {
        let (store, stack) = randomized_stack(8, 5, 2);
        let x = random_block(9, 5, 2);
        for (b, blk) in stack.blocks.iter().enumerate() {
            let base = stack.block_params(&store, b, &x).unwrap();
            for pos in 0..5 {
                let mut xp = x.clone();
                xp.set(pos, 0, xp.get(pos, 0) + 0.3);
                let p = stack.block_params(&store, b, &xp).unwrap();
                for other in 0..5 {
                    let step_other = (0..5).position(|i| blk.order.index(i, 5) == other).unwrap();
                    let step_pos = (0..5).position(|i| blk.order.index(i, 5) == pos).unwrap();
                    let same = (0..2).all(|c| {
                        p.mu.get(other, c) == base.mu.get(other, c)
                            && p.log_sigma.get(other, c) == base.log_sigma.get(other, c)
                    });
                    if step_other <= step_pos {
                        assert!(same, "block {b}: position {other} saw {pos}");
                    }
                }
            }
        }
    }

    #[test]
    fn taped_forward_matches_tape_free() {
        let (store, stack) = randomized_stack(10, 4, 2);
        let a = random_block(11, 4, 2);
        let b = random_block(12, 4, 2);
        let mut stacked = a.clone();
        stacked.rows += 4;
        stacked.data.extend_from_slice(&b.data);
        let mut ctx = Ctx::new(&store, &[]);
        let xv = ctx.tape.constant(stacked);
        let (u, ld) = stack.forward_taped(&mut ctx, xv, 2).unwrap();
        let (ua, la) = stack.forward(&store, &a).unwrap();
        let (ub, lb) = stack.forward(&store, &b).unwrap();
        let uv = ctx.value(u);
        assert!(uv.select_rows(&[0, 1, 2, 3]).max_abs_diff(&ua) < 1e-12);
        assert!(uv.select_rows(&[4, 5, 6, 7]).max_abs_diff(&ub) < 1e-12);
        assert!((ctx.tape.scalar(ld) - (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_unit_gaussian() {
        let mut store = ParamStore::<f64>::new();
        let head = NgpHead::new(&mut store, 6, 3);
        let p = head.params(&store, &Matrix::zeros(4, 6));
        assert_eq!(p, FlowParams::identity(4, 3));
    }
}
