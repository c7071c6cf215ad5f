//! Pre-norm causal Transformer shared by both streams.
//!
//! Three entry points compute the same function:
//! * [`Backbone::forward`] records onto a tape for training,
//! * [`Backbone::prefill`] runs a whole sequence without a tape and returns
//!   the filled [`KvCache`],
//! * [`Backbone::forward_step`] appends one position to a cache.
//!
//! The self-exclusive mode is a one-position shift with a learned start
//! vector: the transformer sees `[start, x₀, …, x_{T-2}]`, so output `t`
//! depends on inputs `< t` only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Ctx, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{attend_row, gelu, layer_norm, layer_norm_row, linear, HeadRows, Matrix};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: f64,
    pub vocab: usize,
    pub max_seq: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("backbone counts must all be at least 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.ff_mult > 0.0) {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ff_width(&self) -> usize {
        ((self.width as f64 * self.ff_mult).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    SelfExclusive,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pos: ParamId,
    start: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Per-layer key/value history for one generation session.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    filled: usize,
    width: usize,
    max_seq: usize,
    mode: MaskMode,
    pending: Option<Vec<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &BackboneConfig, mode: MaskMode) -> Self {
        KvCache {
            keys: vec![Vec::new(); cfg.layers],
            values: vec![Vec::new(); cfg.layers],
            filled: 0,
            width: cfg.width,
            max_seq: cfg.max_seq,
            mode,
            pending: None,
        }
    }

    pub fn filled_len(&self) -> usize {
        self.filled
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn remaining(&self) -> usize {
        self.max_seq - self.filled
    }

    /// Cached keys of `layer` as a `filled × width` matrix.
    pub fn keys(&self, layer: usize) -> Matrix<T> {
        Matrix {
            rows: self.filled,
            cols: self.width,
            data: self.keys[layer].clone(),
        }
    }

    pub fn values(&self, layer: usize) -> Matrix<T> {
        Matrix {
            rows: self.filled,
            cols: self.width,
            data: self.values[layer].clone(),
        }
    }

    /// Value-independent copy for branching generation.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn restore(&mut self, snapshot: &KvCache<T>) {
        *self = snapshot.clone();
    }
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: Group,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let ff = cfg.ff_width();
        let pos = store.normal(&format!("{prefix}.pos"), group, cfg.max_seq, w, INIT_STD, rng);
        let start = store.normal(&format!("{prefix}.start"), group, 1, w, INIT_STD, rng);
        // Residual-branch outputs get the usual depth-scaled init.
        let out_std = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                LayerIds {
                    ln1_g: store.ones(&format!("{p}.ln1.g"), group, 1, w),
                    ln1_b: store.zeros(&format!("{p}.ln1.b"), group, 1, w),
                    qkv_w: store.normal(&format!("{p}.qkv.w"), group, w, 3 * w, INIT_STD, rng),
                    qkv_b: store.zeros(&format!("{p}.qkv.b"), group, 1, 3 * w),
                    proj_w: store.normal(&format!("{p}.proj.w"), group, w, w, out_std, rng),
                    proj_b: store.zeros(&format!("{p}.proj.b"), group, 1, w),
                    ln2_g: store.ones(&format!("{p}.ln2.g"), group, 1, w),
                    ln2_b: store.zeros(&format!("{p}.ln2.b"), group, 1, w),
                    ff1_w: store.normal(&format!("{p}.ff1.w"), group, w, ff, INIT_STD, rng),
                    ff1_b: store.zeros(&format!("{p}.ff1.b"), group, 1, ff),
                    ff2_w: store.normal(&format!("{p}.ff2.w"), group, ff, w, out_std, rng),
                    ff2_b: store.zeros(&format!("{p}.ff2.b"), group, 1, w),
                }
            })
            .collect();
        Ok(Backbone {
            cfg: cfg.clone(),
            pos,
            start,
            layers,
            lnf_g: store.ones(&format!("{prefix}.lnf.g"), group, 1, w),
            lnf_b: store.zeros(&format!("{prefix}.lnf.b"), group, 1, w),
        })
    }

    pub fn start_vector<'s, T: Scalar>(&self, store: &'s ParamStore<T>) -> &'s Matrix<T> {
        store.get(self.start)
    }

    fn check_segments(&self, rows: usize, segments: &[Segment]) -> Result<()> {
        let mut next = 0;
        for s in segments {
            if s.start != next {
                return Err(Error::Shape("segments must tile the rows in order".into()));
            }
            if s.len > self.cfg.max_seq {
                return Err(Error::Capacity(format!(
                    "sequence of {} positions exceeds max_seq {}",
                    s.len, self.cfg.max_seq
                )));
            }
            next += s.len;
        }
        if next != rows {
            return Err(Error::Shape(format!("segments cover {next} rows, inputs have {rows}")));
        }
        Ok(())
    }

    /// Taped forward over packed sequences. `x` is `rows × width`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        segments: &[Segment],
        mode: MaskMode,
    ) -> Result<Var> {
        let (rows, cols) = ctx.value(x).shape();
        if cols != self.cfg.width {
            return Err(Error::Shape(format!("input width {cols}, backbone width {}", self.cfg.width)));
        }
        self.check_segments(rows, segments)?;
        let x = match mode {
            MaskMode::Causal => x,
            MaskMode::SelfExclusive => {
                let s = ctx.p(self.start);
                ctx.tape.shift_rows(x, s, segments)
            }
        };
        let pos_idx: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let pos = ctx.p(self.pos);
        let pe = ctx.tape.gather_rows(pos, &pos_idx);
        let mut h = ctx.tape.add(x, pe);
        for l in &self.layers {
            let g = ctx.p(l.ln1_g);
            let b = ctx.p(l.ln1_b);
            let a = ctx.tape.layer_norm(h, Some((g, b)));
            let qkv = ctx.linear(a, l.qkv_w, Some(l.qkv_b));
            let att = ctx.tape.causal_attention(qkv, segments, self.cfg.heads);
            let o = ctx.linear(att, l.proj_w, Some(l.proj_b));
            h = ctx.tape.add(h, o);
            let g = ctx.p(l.ln2_g);
            let b = ctx.p(l.ln2_b);
            let m = ctx.tape.layer_norm(h, Some((g, b)));
            let f = ctx.linear(m, l.ff1_w, Some(l.ff1_b));
            let f = ctx.tape.gelu(f);
            let f = ctx.linear(f, l.ff2_w, Some(l.ff2_b));
            h = ctx.tape.add(h, f);
        }
        let g = ctx.p(self.lnf_g);
        let b = ctx.p(self.lnf_b);
        Ok(ctx.tape.layer_norm(h, Some((g, b))))
    }

    /// Records a forward over a single sequence for later [`Recording::backward`].
    pub fn record<'a, T: Scalar>(
        &self,
        store: &'a ParamStore<T>,
        inputs: &Matrix<T>,
        mode: MaskMode,
        trainable: &[Group],
    ) -> Result<Recording<'a, T>> {
        let mut ctx = Ctx::new(store, trainable);
        let input = ctx.tape.param(inputs.clone());
        let output = self.forward(&mut ctx, input, &[Segment::new(0, inputs.rows)], mode)?;
        Ok(Recording { ctx, input, output })
    }

    /// Tape-free forward over one sequence; returns the output states and
    /// the cache a subsequent [`Backbone::forward_step`] continues from.
    pub fn prefill<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &Matrix<T>,
        mode: MaskMode,
    ) -> Result<(Matrix<T>, KvCache<T>)> {
        let w = self.cfg.width;
        if inputs.cols != w {
            return Err(Error::Shape(format!("input width {}, backbone width {w}", inputs.cols)));
        }
        if !inputs.is_finite() {
            return Err(Error::Numeric("non-finite backbone input".into()));
        }
        let t = inputs.rows;
        if t > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {t} positions exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let mut cache = KvCache::new(&self.cfg, mode);
        let mut fed = Matrix::zeros(t, w);
        for r in 0..t {
            let src = match mode {
                MaskMode::Causal => inputs.row(r),
                MaskMode::SelfExclusive if r == 0 => &store.get(self.start).data[..],
                MaskMode::SelfExclusive => inputs.row(r - 1),
            };
            fed.row_mut(r).copy_from_slice(src);
        }
        if mode == MaskMode::SelfExclusive && t > 0 {
            cache.pending = Some(inputs.row(t - 1).to_vec());
        }
        let pos = store.get(self.pos);
        let mut h = fed;
        for r in 0..t {
            for (v, &p) in h.row_mut(r).iter_mut().zip(pos.row(r)) {
                *v += p;
            }
        }
        let hd = self.cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut probs = vec![T::zero(); t.max(1)];
        for (li, l) in self.layers.iter().enumerate() {
            let a = layer_norm(&h, store.get(l.ln1_g), store.get(l.ln1_b));
            let qkv = linear(&a, store.get(l.qkv_w), Some(store.get(l.qkv_b)));
            let mut att = Matrix::zeros(t, w);
            for head in 0..self.cfg.heads {
                let keys = HeadRows { data: &qkv.data, stride: 3 * w, offset: w + head * hd };
                let values = HeadRows { data: &qkv.data, stride: 3 * w, offset: 2 * w + head * hd };
                for i in 0..t {
                    let q = &qkv.row(i)[head * hd..(head + 1) * hd];
                    let o = &mut att.row_mut(i)[head * hd..(head + 1) * hd];
                    attend_row(q, keys, values, i + 1, scale, &mut probs, o);
                }
            }
            for r in 0..t {
                let row = qkv.row(r);
                cache.keys[li].extend_from_slice(&row[w..2 * w]);
                cache.values[li].extend_from_slice(&row[2 * w..]);
            }
            let o = linear(&att, store.get(l.proj_w), Some(store.get(l.proj_b)));
            h.add_assign(&o);
            let m = layer_norm(&h, store.get(l.ln2_g), store.get(l.ln2_b));
            let f = linear(&m, store.get(l.ff1_w), Some(store.get(l.ff1_b))).map(gelu);
            let f = linear(&f, store.get(l.ff2_w), Some(store.get(l.ff2_b)));
            h.add_assign(&f);
        }
        cache.filled = t;
        let out = layer_norm(&h, store.get(self.lnf_g), store.get(self.lnf_b));
        Ok((out, cache))
    }

    pub fn forward_full<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        inputs: &Matrix<T>,
        mode: MaskMode,
    ) -> Result<Matrix<T>> {
        self.prefill(store, inputs, mode).map(|(out, _)| out)
    }

    /// Processes one more position. In self-exclusive mode the returned state
    /// does not depend on `input`; `input` becomes visible from the next step.
    pub fn forward_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        input: &[T],
        cache: &mut KvCache<T>,
    ) -> Result<Vec<T>> {
        let w = self.cfg.width;
        if input.len() != w {
            return Err(Error::Shape(format!("step input width {}, backbone width {w}", input.len())));
        }
        if cache.width != w || cache.keys.len() != self.layers.len() {
            return Err(Error::Shape("cache does not belong to this backbone".into()));
        }
        if cache.filled >= cache.max_seq {
            return Err(Error::Capacity(format!("cache full at {} positions", cache.max_seq)));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite step input".into()));
        }
        let fed = match cache.mode {
            MaskMode::Causal => input.to_vec(),
            MaskMode::SelfExclusive => cache
                .pending
                .replace(input.to_vec())
                .unwrap_or_else(|| store.get(self.start).data.clone()),
        };
        Ok(self.step_fed(store, fed, cache))
    }

    /// Self-exclusive lookahead: the state for the next position, which
    /// depends only on inputs already supplied. The cache is advanced; the
    /// caller then supplies that position's input with [`Self::commit_input`].
    pub fn predict_next<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut KvCache<T>) -> Result<Vec<T>> {
        if cache.mode != MaskMode::SelfExclusive {
            return Err(Error::State("predict_next requires a self-exclusive cache".into()));
        }
        if cache.filled >= cache.max_seq {
            return Err(Error::Capacity(format!("cache full at {} positions", cache.max_seq)));
        }
        let fed = cache
            .pending
            .take()
            .unwrap_or_else(|| store.get(self.start).data.clone());
        Ok(self.step_fed(store, fed, cache))
    }

    pub fn commit_input<T: Scalar>(&self, input: &[T], cache: &mut KvCache<T>) -> Result<()> {
        if input.len() != self.cfg.width {
            return Err(Error::Shape("committed input has the wrong width".into()));
        }
        if cache.pending.is_some() {
            return Err(Error::State("an input is already pending".into()));
        }
        cache.pending = Some(input.to_vec());
        Ok(())
    }

    fn step_fed<T: Scalar>(&self, store: &ParamStore<T>, fed: Vec<T>, cache: &mut KvCache<T>) -> Vec<T> {
        let w = self.cfg.width;
        let t = cache.filled;
        let hd = self.cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut h = Matrix { rows: 1, cols: w, data: fed };
        for (v, &p) in h.data.iter_mut().zip(store.get(self.pos).row(t)) {
            *v += p;
        }
        let mut probs = vec![T::zero(); t + 1];
        for (li, l) in self.layers.iter().enumerate() {
            let mut a = Matrix::zeros(1, w);
            layer_norm_row(&h.data, &store.get(l.ln1_g).data, &store.get(l.ln1_b).data, &mut a.data);
            let qkv = linear(&a, store.get(l.qkv_w), Some(store.get(l.qkv_b)));
            cache.keys[li].extend_from_slice(&qkv.data[w..2 * w]);
            cache.values[li].extend_from_slice(&qkv.data[2 * w..]);
            let mut att = Matrix::zeros(1, w);
            for head in 0..self.cfg.heads {
                let keys = HeadRows { data: &cache.keys[li], stride: w, offset: head * hd };
                let values = HeadRows { data: &cache.values[li], stride: w, offset: head * hd };
                let q = &qkv.data[head * hd..(head + 1) * hd];
                attend_row(q, keys, values, t + 1, scale, &mut probs, &mut att.data[head * hd..(head + 1) * hd]);
            }
            let o = linear(&att, store.get(l.proj_w), Some(store.get(l.proj_b)));
            h.add_assign(&o);
            let m = layer_norm(&h, store.get(l.ln2_g), store.get(l.ln2_b));
            let f = linear(&m, store.get(l.ff1_w), Some(store.get(l.ff1_b))).map(gelu);
            let f = linear(&f, store.get(l.ff2_w), Some(store.get(l.ff2_b)));
            h.add_assign(&f);
        }
        cache.filled = t + 1;
        layer_norm(&h, store.get(self.lnf_g), store.get(self.lnf_b)).data
    }
}

/// A recorded single-sequence forward pass awaiting an upstream gradient.
pub struct Recording<'a, T> {
    ctx: Ctx<'a, T>,
    input: Var,
    output: Var,
}

pub struct BackboneGrads<T> {
    pub params: Vec<(ParamId, Matrix<T>)>,
    pub inputs: Matrix<T>,
}

impl<'a, T: Scalar> Recording<'a, T> {
    pub fn outputs(&self) -> &Matrix<T> {
        self.ctx.value(self.output)
    }

    /// Gradients of `Σ upstream ⊙ outputs` with respect to the trainable
    /// parameters and the inputs.
    pub fn backward(&self, upstream: &Matrix<T>) -> Result<BackboneGrads<T>> {
        if upstream.shape() != self.outputs().shape() {
            return Err(Error::Shape("upstream gradient does not match outputs".into()));
        }
        let mut grads = self.ctx.tape.backward_with(self.output, upstream.clone());
        let (r, c) = self.ctx.value(self.input).shape();
        let inputs = grads.take(self.input).unwrap_or_else(|| Matrix::zeros(r, c));
        let params = self.ctx.binder.gradients(&mut grads);
        Ok(BackboneGrads { params, inputs })
    }

    pub fn binder(&self) -> &Binder<'a, T> {
        &self.ctx.binder
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny(layers: usize, width: usize, heads: usize, max_seq: usize) -> BackboneConfig {
        BackboneConfig { layers, width, heads, ff_mult: 2.0, vocab: 8, max_seq }
    }

    fn setup<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> (ParamStore<T>, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "bb", Group::Deep, cfg, &mut rng).unwrap();
        // Perturb the zero biases and unit gains so every parameter matters.
        for i in 0..store.len() {
            let id = store.iter().nth(i).unwrap().0;
            for v in store.get_mut(id).data.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += T::lit(0.05 * n);
            }
        }
        (store, bb)
    }

    fn random_inputs<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                T::lit(n)
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_width() {
        assert!(tiny(1, 10, 3, 4).validate().is_err());
        assert!(tiny(0, 8, 2, 4).validate().is_err());
        assert!(tiny(1, 8, 2, 4).validate().is_ok());
    }

    #[test]
    fn taped_and_tape_free_forward_agree() {
        let cfg = tiny(2, 8, 2, 10);
        let (store, bb) = setup::<f64>(&cfg, 1);
        let x = random_inputs::<f64>(6, 8, 2);
        for mode in [MaskMode::Causal, MaskMode::SelfExclusive] {
            let rec = bb.record(&store, &x, mode, &[]).unwrap();
            let full = bb.forward_full(&store, &x, mode).unwrap();
            assert!(rec.outputs().max_abs_diff(&full) < 1e-12);
        }
    }

    #[test]
    fn stepping_reproduces_full_forward() {
        let cfg = tiny(2, 8, 2, 10);
        let (store, bb) = setup::<f32>(&cfg, 3);
        let x = random_inputs::<f32>(7, 8, 4);
        for mode in [MaskMode::Causal, MaskMode::SelfExclusive] {
            let full = bb.forward_full(&store, &x, mode).unwrap();
            let mut cache = KvCache::new(&cfg, mode);
            for t in 0..x.rows {
                let out = bb.forward_step(&store, x.row(t), &mut cache).unwrap();
                let diff = out
                    .iter()
                    .zip(full.row(t))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(diff < 1e-5, "{mode:?} position {t}: {diff}");
                assert_eq!(cache.filled_len(), t + 1);
            }
        }
    }

    #[test]
    fn first_step_equals_length_one_forward_exactly() {
        let cfg = tiny(2, 8, 2, 10);
        let (store, bb) = setup::<f32>(&cfg, 5);
        let x = random_inputs::<f32>(1, 8, 6);
        let full = bb.forward_full(&store, &x, MaskMode::Causal).unwrap();
        let mut cache = KvCache::new(&cfg, MaskMode::Causal);
        let out = bb.forward_step(&store, x.row(0), &mut cache).unwrap();
        assert_eq!(out, full.data);
    }

    #[test]
    fn prefill_cache_continues_like_stepping() {
        let cfg = tiny(2, 8, 2, 10);
        let (store, bb) = setup::<f32>(&cfg, 7);
        let x = random_inputs::<f32>(6, 8, 8);
        let prefix = x.select_rows(&[0, 1, 2, 3]);
        for mode in [MaskMode::Causal, MaskMode::SelfExclusive] {
            let (_, mut cache) = bb.prefill(&store, &prefix, mode).unwrap();
            let mut stepped = KvCache::new(&cfg, mode);
            for t in 0..4 {
                bb.forward_step(&store, x.row(t), &mut stepped).unwrap();
            }
            for layer in 0..2 {
                assert!(cache.keys(layer).max_abs_diff(&stepped.keys(layer)) < 1e-5);
                assert!(cache.values(layer).max_abs_diff(&stepped.values(layer)) < 1e-5);
            }
            let full = bb.forward_full(&store, &x, mode).unwrap();
            let out = bb.forward_step(&store, x.row(4), &mut cache).unwrap();
            let diff = out.iter().zip(full.row(4)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5);
        }
    }

    #[test]
    fn stepping_past_capacity_fails() {
        let cfg = tiny(1, 4, 1, 2);
        let (store, bb) = setup::<f32>(&cfg, 9);
        let mut cache = KvCache::new(&cfg, MaskMode::Causal);
        bb.forward_step(&store, &[0.0; 4], &mut cache).unwrap();
        bb.forward_step(&store, &[0.0; 4], &mut cache).unwrap();
        let err = bb.forward_step(&store, &[0.0; 4], &mut cache).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        let long = Matrix::<f32>::zeros(3, 4);
        assert!(matches!(bb.forward_full(&store, &long, MaskMode::Causal), Err(Error::Capacity(_))));
    }

    #[test]
    fn snapshot_is_independent_of_original() {
        let cfg = tiny(1, 4, 1, 6);
        let (store, bb) = setup::<f32>(&cfg, 10);
        let empty = KvCache::<f32>::new(&cfg, MaskMode::Causal);
        assert_eq!(empty.snapshot().filled_len(), 0);
        let mut cache = KvCache::new(&cfg, MaskMode::Causal);
        bb.forward_step(&store, &[0.1, 0.2, 0.3, 0.4], &mut cache).unwrap();
        let snap = cache.snapshot();
        let mut copy = snap.clone();
        bb.forward_step(&store, &[1.0; 4], &mut copy).unwrap();
        assert_eq!(snap.filled_len(), 1);
        assert_eq!(cache, snap);
        // Restoring and replaying the same input reproduces the branch.
        let mut branch = cache.snapshot();
        let a = bb.forward_step(&store, &[1.0; 4], &mut branch).unwrap();
        branch.restore(&snap);
        let b = bb.forward_step(&store, &[1.0; 4], &mut branch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_exclusive_single_position_depends_only_on_start() {
        let cfg = tiny(1, 4, 2, 4);
        let (store, bb) = setup::<f64>(&cfg, 11);
        let a = bb.forward_full(&store, &random_inputs(1, 4, 1), MaskMode::SelfExclusive).unwrap();
        let b = bb.forward_full(&store, &random_inputs(1, 4, 2), MaskMode::SelfExclusive).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_then_commit_matches_forward_step() {
        let cfg = tiny(2, 8, 2, 8);
        let (store, bb) = setup::<f32>(&cfg, 12);
        let x = random_inputs::<f32>(5, 8, 13);
        let full = bb.forward_full(&store, &x, MaskMode::SelfExclusive).unwrap();
        let mut cache = KvCache::new(&cfg, MaskMode::SelfExclusive);
        for t in 0..5 {
            let out = bb.predict_next(&store, &mut cache).unwrap();
            let diff = out.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5);
            bb.commit_input(x.row(t), &mut cache).unwrap();
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let cfg = tiny(1, 4, 2, 4);
        let (store, bb) = setup::<f64>(&cfg, 14);
        let x = random_inputs::<f64>(3, 4, 15);
        let rec = bb.record(&store, &x, MaskMode::Causal, &[Group::Deep]).unwrap();
        let g = rec.backward(&Matrix::zeros(3, 4)).unwrap();
        assert!(!g.params.is_empty());
        assert!(g.params.iter().all(|(_, m)| m.data.iter().all(|&v| v == 0.0)));
        let frozen = bb.record(&store, &x, MaskMode::Causal, &[]).unwrap();
        let g = frozen.backward(&Matrix::filled(3, 4, 1.0)).unwrap();
        assert!(g.params.is_empty());
    }
}
