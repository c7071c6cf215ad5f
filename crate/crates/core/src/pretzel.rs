//! The dual-stream model: a frozen language stream and a flow stream over one
//! interleaved sequence, coupled by two zero-initialized projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Var};
use crate::backbone::{Backbone, BackboneConfig, KvCache, MaskMode, INIT_STD};
use crate::error::{Error, Result};
use crate::flow::{FlowParams, NgpHead, ShallowConfig, ShallowStack};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gelu, layer_norm_row, linear, log_sum_exp, Matrix};
use crate::vocab::{BOS, END_IMG, EOS, IMG, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latents: usize,
    pub latent_dim: usize,
    pub vlm: BackboneConfig,
    pub deep: BackboneConfig,
    pub shallow: ShallowConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vlm.validate()?;
        self.deep.validate()?;
        if self.latents == 0 || self.latent_dim == 0 {
            return Err(Error::Config("latent counts must be at least 1".into()));
        }
        if self.vlm.vocab != VOCAB_SIZE {
            return Err(Error::Config(format!("vlm vocab must be {VOCAB_SIZE}")));
        }
        if self.vlm.max_seq != self.deep.max_seq {
            return Err(Error::Config("both streams need the same max_seq".into()));
        }
        let s = &self.shallow;
        if s.width == 0 || s.heads == 0 || s.width % s.heads != 0 || s.layers == 0 {
            return Err(Error::Config("invalid shallow block shape".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Element {
    Text(usize),
    Visual(Vec<f32>),
}

/// Interleaved text tokens and visual latents. Every image is `<img>`,
/// exactly `N` visual elements, then `</img>`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub elements: Vec<Element>,
}

impl MultimodalSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens(tokens: &[usize]) -> Self {
        MultimodalSequence { elements: tokens.iter().map(|&t| Element::Text(t)).collect() }
    }

    pub fn push_text(&mut self, tokens: &[usize]) -> &mut Self {
        self.elements.extend(tokens.iter().map(|&t| Element::Text(t)));
        self
    }

    /// Appends `<img>`, the rows of `x`, and `</img>`.
    pub fn push_image(&mut self, x: &Matrix<f32>) -> &mut Self {
        self.elements.push(Element::Text(IMG));
        for r in 0..x.rows {
            self.elements.push(Element::Visual(x.row(r).to_vec()));
        }
        self.elements.push(Element::Text(END_IMG));
        self
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| matches!(self.elements[i], Element::Text(_))).collect()
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| matches!(self.elements[i], Element::Visual(_))).collect()
    }

    pub fn token(&self, i: usize) -> Option<usize> {
        match self.elements.get(i) {
            Some(Element::Text(t)) => Some(*t),
            _ => None,
        }
    }

    /// Start positions of image spans, checking the span contract.
    pub fn image_spans(&self, n: usize, d: usize) -> Result<Vec<usize>> {
        self.spans(n, d, false)
    }

    /// Like [`Self::image_spans`], but a final `<img>` awaiting its latents is
    /// allowed (a generation prompt).
    pub fn prompt_spans(&self, n: usize, d: usize) -> Result<Vec<usize>> {
        self.spans(n, d, true)
    }

    fn spans(&self, n: usize, d: usize, open_tail: bool) -> Result<Vec<usize>> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < self.len() {
            match &self.elements[i] {
                Element::Text(t) if *t == IMG && open_tail && i + 1 == self.len() => break,
                Element::Text(t) if *t == IMG => {
                    let start = i + 1;
                    for j in start..start + n {
                        match self.elements.get(j) {
                            Some(Element::Visual(v)) if v.len() == d => {}
                            Some(Element::Visual(v)) => {
                                return Err(Error::Shape(format!("latent at {j} has {} dims, expected {d}", v.len())))
                            }
                            _ => return Err(Error::Shape(format!("image at {i} has fewer than {n} latents"))),
                        }
                    }
                    if self.token(start + n) != Some(END_IMG) {
                        return Err(Error::Shape(format!("image at {i} is not closed after {n} latents")));
                    }
                    spans.push(start);
                    i = start + n + 1;
                }
                Element::Text(t) if *t == END_IMG => {
                    return Err(Error::Shape(format!("stray </img> at {i}")));
                }
                Element::Text(t) if *t >= VOCAB_SIZE => {
                    return Err(Error::Tokenization(format!("token id {t} outside the vocabulary")));
                }
                Element::Text(_) => i += 1,
                Element::Visual(_) => return Err(Error::Shape(format!("latent at {i} outside an image span"))),
            }
        }
        Ok(spans)
    }

    /// `N × D` latents of the image starting at `start`.
    pub fn image(&self, start: usize, n: usize, d: usize) -> Matrix<f32> {
        let mut m = Matrix::zeros(n, d);
        for r in 0..n {
            if let Element::Visual(v) = &self.elements[start + r] {
                m.row_mut(r).copy_from_slice(v);
            }
        }
        m
    }

    /// Text tokens in order, latents skipped.
    pub fn tokens(&self) -> Vec<usize> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Text(t) => Some(*t),
                Element::Visual(_) => None,
            })
            .collect()
    }
}

/// How visual positions enter the language stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualPath {
    /// The stub's own frozen linear map applied to raw latents `x`.
    Native,
    /// The trainable adapter applied to shallow-flow outputs `u`.
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOpts {
    pub path: VisualPath,
    pub deep: bool,
    pub skips: bool,
}

impl ForwardOpts {
    pub const STUB: ForwardOpts = ForwardOpts { path: VisualPath::Native, deep: false, skips: false };
    pub const UNDERSTAND: ForwardOpts = ForwardOpts { path: VisualPath::Adapter, deep: false, skips: false };
    pub const DECOUPLED: ForwardOpts = ForwardOpts { path: VisualPath::Adapter, deep: true, skips: false };
    pub const FUSED: ForwardOpts = ForwardOpts { path: VisualPath::Adapter, deep: true, skips: true };
}

#[derive(Clone, Debug)]
struct Stub {
    tok_emb: ParamId,
    native_w: ParamId,
    native_b: ParamId,
    /// Index of a latent within its image, added on both visual paths.
    patch_pos: ParamId,
    backbone: Backbone,
    lm_w: ParamId,
    lm_b: ParamId,
}

/// MLP followed by a parameter-free LayerNorm and a noise-conditioned
/// scale/shift.
#[derive(Clone, Debug)]
struct Adapter {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gamma_w: ParamId,
    gamma_b: ParamId,
    beta_w: ParamId,
    beta_b: ParamId,
}

#[derive(Clone, Debug)]
struct Deep {
    in_vis_w: ParamId,
    in_vis_b: ParamId,
    patch_pos: ParamId,
    in_txt_w: ParamId,
    in_txt_b: ParamId,
    backbone: Backbone,
}

#[derive(Clone, Debug)]
pub struct Pretzel {
    pub cfg: ModelConfig,
    stub: Stub,
    adapter: Adapter,
    pub shallow: ShallowStack,
    deep: Deep,
    pub ngp: NgpHead,
    w_vlm: ParamId,
    w_d: ParamId,
}

impl Pretzel {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Pretzel, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (wv, wf, d) = (cfg.vlm.width, cfg.deep.width, cfg.latent_dim);
        let stub = Stub {
            tok_emb: s.normal("stub.tok_emb", Group::Stub, VOCAB_SIZE, wv, INIT_STD, &mut rng),
            native_w: s.normal("stub.native.w", Group::Stub, d, wv, 1.0 / (d as f64).sqrt(), &mut rng),
            native_b: s.zeros("stub.native.b", Group::Stub, 1, wv),
            patch_pos: s.normal("stub.patch_pos", Group::Stub, cfg.latents, wv, INIT_STD, &mut rng),
            backbone: Backbone::new(&mut s, "stub.tf", Group::Stub, &cfg.vlm, &mut rng)?,
            lm_w: s.normal("stub.lm.w", Group::Stub, wv, VOCAB_SIZE, INIT_STD, &mut rng),
            lm_b: s.zeros("stub.lm.b", Group::Stub, 1, VOCAB_SIZE),
        };
        let g = Group::Adapter;
        let adapter = Adapter {
            w1: s.normal("adapter.w1", g, d, wv, 1.0 / (d as f64).sqrt(), &mut rng),
            b1: s.zeros("adapter.b1", g, 1, wv),
            w2: s.normal("adapter.w2", g, wv, wv, 1.0 / (wv as f64).sqrt(), &mut rng),
            b2: s.zeros("adapter.b2", g, 1, wv),
            gamma_w: s.zeros("adapter.gamma.w", g, 1, wv),
            gamma_b: s.zeros("adapter.gamma.b", g, 1, wv),
            beta_w: s.zeros("adapter.beta.w", g, 1, wv),
            beta_b: s.zeros("adapter.beta.b", g, 1, wv),
        };
        let shallow = ShallowStack::new(&mut s, &cfg.shallow, cfg.latents, d, &mut rng)?;
        let g = Group::Deep;
        let deep = Deep {
            in_vis_w: s.normal("deep.in_vis.w", g, d, wf, 1.0 / (d as f64).sqrt(), &mut rng),
            in_vis_b: s.zeros("deep.in_vis.b", g, 1, wf),
            patch_pos: s.normal("deep.patch_pos", g, cfg.latents, wf, INIT_STD, &mut rng),
            in_txt_w: s.normal("deep.in_txt.w", g, wv, wf, 1.0 / (wv as f64).sqrt(), &mut rng),
            in_txt_b: s.zeros("deep.in_txt.b", g, 1, wf),
            backbone: Backbone::new(&mut s, "deep.tf", g, &cfg.deep, &mut rng)?,
        };
        let ngp = NgpHead::new(&mut s, wf, d);
        let w_vlm = s.zeros("skip.w_vlm", Group::SkipVlm, wv, d);
        let w_d = s.zeros("skip.w_d", Group::SkipD, wf, wv);
        let model = Pretzel { cfg: cfg.clone(), stub, adapter, shallow, deep, ngp, w_vlm, w_d };
        Ok((model, s))
    }

    pub fn skip_ids(&self) -> (ParamId, ParamId) {
        (self.w_vlm, self.w_d)
    }

    fn n(&self) -> usize {
        self.cfg.latents
    }

    fn d(&self) -> usize {
        self.cfg.latent_dim
    }
}

/// Sequences packed into one row-stacked batch.
#[derive(Clone, Debug)]
pub struct Packed<T> {
    pub rows: usize,
    pub segments: Vec<Segment>,
    text_rows: Vec<usize>,
    text_ids: Vec<usize>,
    vis_rows: Vec<usize>,
    /// `images·N × D`, image-major.
    pub x: Matrix<T>,
    /// Per visual row: the adapter's noise-level input.
    noise: Vec<T>,
    pub images: usize,
    pred_rows: Vec<usize>,
    pub text_targets: Vec<usize>,
    /// Per visual row, the row whose deep state predicts it.
    ngp_rows: Vec<usize>,
    /// Set by callers that differentiate only the visual NLL.
    pub nf_only: bool,
    multi_image: bool,
}

/// One training sequence. Text tokens at positions `>= text_from` are
/// prediction targets (except `</img>`, which is always forced).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub seq: MultimodalSequence,
    pub text_from: usize,
}

impl<T: Scalar> Packed<T> {
    /// `noise[i]` is the noise level of the `i`-th image across the batch
    /// (0 when absent); it only feeds the adapter's modulation.
    pub fn new(model: &Pretzel, examples: &[Example], noise: &[f64], x_override: Option<Matrix<T>>) -> Result<Self> {
        let (n, d) = (model.n(), model.d());
        let mut p = Packed {
            rows: 0,
            segments: Vec::new(),
            text_rows: Vec::new(),
            text_ids: Vec::new(),
            vis_rows: Vec::new(),
            x: Matrix::zeros(0, d),
            noise: Vec::new(),
            images: 0,
            pred_rows: Vec::new(),
            text_targets: Vec::new(),
            ngp_rows: Vec::new(),
            nf_only: false,
            multi_image: false,
        };
        let mut xdata = Vec::new();
        for ex in examples {
            let seq = &ex.seq;
            if seq.len() > model.cfg.vlm.max_seq {
                return Err(Error::Capacity(format!(
                    "sequence of {} positions exceeds max_seq {}",
                    seq.len(),
                    model.cfg.vlm.max_seq
                )));
            }
            let spans = seq.image_spans(n, d)?;
            let base = p.rows;
            p.segments.push(Segment::new(base, seq.len()));
            for (i, e) in seq.elements.iter().enumerate() {
                match e {
                    Element::Text(t) => {
                        p.text_rows.push(base + i);
                        p.text_ids.push(*t);
                        if i >= ex.text_from.max(1) && *t != END_IMG && seq.token(i - 1).is_some() {
                            p.pred_rows.push(base + i - 1);
                            p.text_targets.push(*t);
                        }
                    }
                    Element::Visual(v) => {
                        p.vis_rows.push(base + i);
                        p.ngp_rows.push(base + i - 1);
                        xdata.extend(v.iter().map(|&a| T::lit(a as f64)));
                    }
                }
            }
            p.multi_image |= spans.len() > 1;
            for _ in &spans {
                let s = noise.get(p.images).copied().unwrap_or(0.0);
                p.noise.extend(std::iter::repeat_n(T::lit(s), n));
                p.images += 1;
            }
            p.rows += seq.len();
        }
        p.x = Matrix::from_vec(p.images * n, d, xdata)?;
        if let Some(x) = x_override {
            if x.shape() != p.x.shape() {
                return Err(Error::Shape("latent override has the wrong shape".into()));
            }
            p.x = x;
        }
        Ok(p)
    }
}

/// Nodes produced by a taped teacher-forced forward.
pub struct Taped {
    pub logits: Option<Var>,
    pub flow: Option<TapedFlow>,
    pub u: Option<Var>,
}

pub struct TapedFlow {
    pub u: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub logdet_s: Var,
}

impl Pretzel {
    fn adapter_taped<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, u: Var, noise: &[T]) -> Var {
        let a = &self.adapter;
        let h = ctx.linear(u, a.w1, Some(a.b1));
        let h = ctx.tape.gelu(h);
        let h = ctx.linear(h, a.w2, Some(a.b2));
        let h = ctx.tape.layer_norm(h, None);
        let s = ctx.tape.constant(Matrix { rows: noise.len(), cols: 1, data: noise.to_vec() });
        let gw = ctx.p(a.gamma_w);
        let gb = ctx.p(a.gamma_b);
        let gamma = ctx.tape.matmul(s, gw);
        let gamma = ctx.tape.add_row(gamma, gb);
        let bw = ctx.p(a.beta_w);
        let bb = ctx.p(a.beta_b);
        let beta = ctx.tape.matmul(s, bw);
        let beta = ctx.tape.add_row(beta, bb);
        let scaled = ctx.tape.mul(h, gamma);
        let out = ctx.tape.add(h, scaled);
        ctx.tape.add(out, beta)
    }

    /// Teacher-forced forward over a packed batch, recorded on `ctx`.
    pub fn forward_taped<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, b: &Packed<T>, opts: ForwardOpts) -> Result<Taped> {
        let rows = b.rows;
        let wv = self.cfg.vlm.width;
        let emb = ctx.p(self.stub.tok_emb);
        let te = ctx.tape.gather_rows(emb, &b.text_ids);
        let mut h = ctx.tape.scatter_rows(te, &b.text_rows, rows);
        let mut u = None;
        let mut logdet_s = None;
        if b.images > 0 {
            let x = ctx.tape.constant(b.x.clone());
            if opts.path == VisualPath::Adapter || opts.deep {
                let (uv, ld) = self.shallow.forward_taped(ctx, x, b.images)?;
                u = Some(uv);
                logdet_s = Some(ld);
            }
            let vis = match opts.path {
                VisualPath::Native => ctx.linear(x, self.stub.native_w, Some(self.stub.native_b)),
                VisualPath::Adapter => {
                    let mut uv = u.expect("shallow output");
                    // Without skips and with one image per sequence, the
                    // visual NLL does not depend on the language stream's
                    // view of `u`.
                    if b.nf_only && !opts.skips && !b.multi_image {
                        uv = ctx.tape.constant(ctx.value(uv).clone());
                    }
                    self.adapter_taped(ctx, uv, &b.noise)
                }
            };
            let patch: Vec<usize> = (0..b.x.rows).map(|r| r % self.n()).collect();
            let pp = ctx.p(self.stub.patch_pos);
            let pe = ctx.tape.gather_rows(pp, &patch);
            let vis = ctx.tape.add(vis, pe);
            let ve = ctx.tape.scatter_rows(vis, &b.vis_rows, rows);
            h = ctx.tape.add(h, ve);
        }
        let y_vlm = self.stub.backbone.forward(ctx, h, &b.segments, MaskMode::Causal)?;

        let mut y_d = None;
        let mut flow = None;
        if opts.deep {
            let yt = ctx.tape.gather_rows(y_vlm, &b.text_rows);
            let dt = ctx.linear(yt, self.deep.in_txt_w, Some(self.deep.in_txt_b));
            let mut c = ctx.tape.scatter_rows(dt, &b.text_rows, rows);
            if let Some(uv) = u {
                let mut uc = uv;
                if opts.skips {
                    let yv = ctx.tape.gather_rows(y_vlm, &b.vis_rows);
                    let w = ctx.p(self.w_vlm);
                    let proj = ctx.tape.matmul(yv, w);
                    uc = ctx.tape.add(uv, proj);
                }
                let dv = ctx.linear(uc, self.deep.in_vis_w, Some(self.deep.in_vis_b));
                let patch: Vec<usize> = (0..b.x.rows).map(|r| r % self.n()).collect();
                let pp = ctx.p(self.deep.patch_pos);
                let pe = ctx.tape.gather_rows(pp, &patch);
                let dv = ctx.tape.add(dv, pe);
                let dv = ctx.tape.scatter_rows(dv, &b.vis_rows, rows);
                c = ctx.tape.add(c, dv);
            }
            let yd = self.deep.backbone.forward(ctx, c, &b.segments, MaskMode::Causal)?;
            if let (Some(uv), Some(ld)) = (u, logdet_s) {
                let hid = ctx.tape.gather_rows(yd, &b.ngp_rows);
                let (mu, ls) = self.ngp.taped(ctx, hid);
                flow = Some(TapedFlow { u: uv, mu, log_sigma: ls, logdet_s: ld });
            }
            y_d = Some(yd);
        }

        let logits = if b.pred_rows.is_empty() {
            None
        } else {
            let mut base = ctx.tape.gather_rows(y_vlm, &b.pred_rows);
            if opts.skips {
                if let Some(yd) = y_d {
                    let g = ctx.tape.gather_rows(yd, &b.pred_rows);
                    let w = ctx.p(self.w_d);
                    let proj = ctx.tape.matmul(g, w);
                    base = ctx.tape.add(base, proj);
                }
            }
            debug_assert_eq!(ctx.value(base).cols, wv);
            Some(ctx.linear(base, self.stub.lm_w, Some(self.stub.lm_b)))
        };
        Ok(Taped { logits, flow, u })
    }
}

/// Per-position outputs of a tape-free pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutputs<T> {
    pub y_vlm: Matrix<T>,
    pub y_d: Option<Matrix<T>>,
    /// Logits at every position (the distribution over the next element
    /// when it is text).
    pub logits: Matrix<T>,
    /// Gaussian parameters for each visual position, in sequence order.
    pub flow: FlowParams<T>,
    /// Flow-stream inputs `u` per visual position.
    pub u: Matrix<T>,
    pub logdet_s: Vec<T>,
}

impl Pretzel {
    fn lm_row<T: Scalar>(&self, store: &ParamStore<T>, y_vlm: &[T], y_d: Option<&[T]>, skips: bool) -> Vec<T> {
        let wv = self.cfg.vlm.width;
        let mut base = Matrix { rows: 1, cols: wv, data: y_vlm.to_vec() };
        if skips {
            if let Some(yd) = y_d {
                let yd = Matrix { rows: 1, cols: yd.len(), data: yd.to_vec() };
                base.add_assign(&yd.matmul(store.get(self.w_d)));
            }
        }
        linear(&base, store.get(self.stub.lm_w), Some(store.get(self.stub.lm_b))).data
    }

    fn adapter_rows<T: Scalar>(&self, store: &ParamStore<T>, u: &Matrix<T>, noise: T) -> Matrix<T> {
        let a = &self.adapter;
        let h = linear(u, store.get(a.w1), Some(store.get(a.b1))).map(gelu);
        let h = linear(&h, store.get(a.w2), Some(store.get(a.b2)));
        let w = h.cols;
        let ones = vec![T::one(); w];
        let zeros = vec![T::zero(); w];
        let (gw, gb) = (store.get(a.gamma_w), store.get(a.gamma_b));
        let (bw, bb) = (store.get(a.beta_w), store.get(a.beta_b));
        let mut out = Matrix::zeros(h.rows, w);
        for r in 0..h.rows {
            let row = out.row_mut(r);
            layer_norm_row(h.row(r), &ones, &zeros, row);
            for j in 0..w {
                let gamma = noise * gw.data[j] + gb.data[j];
                let beta = noise * bw.data[j] + bb.data[j];
                row[j] = row[j] + row[j] * gamma + beta;
            }
        }
        out
    }

    /// Language-stream input for visual rows.
    /// Row `r` of `v` is latent `first + r` of the image stream.
    pub fn visual_embedding<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        path: VisualPath,
        v: &Matrix<T>,
        first: usize,
    ) -> Matrix<T> {
        let mut e = match path {
            VisualPath::Native => linear(v, store.get(self.stub.native_w), Some(store.get(self.stub.native_b))),
            VisualPath::Adapter => self.adapter_rows(store, v, T::zero()),
        };
        let pp = store.get(self.stub.patch_pos);
        for r in 0..e.rows {
            for (a, &b) in e.row_mut(r).iter_mut().zip(pp.row((first + r) % self.n())) {
                *a += b;
            }
        }
        e
    }

    /// Language-stream inputs for a whole sequence; visual rows take `vis`
    /// (`x` for the native path, `u` for the adapter path) in order.
    pub fn embed_sequence<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &MultimodalSequence,
        path: VisualPath,
        vis: &Matrix<T>,
    ) -> Result<Matrix<T>> {
        let vis_pos = seq.visual_positions();
        if vis.rows != vis_pos.len() || (vis.rows > 0 && vis.cols != self.d()) {
            return Err(Error::Shape(format!(
                "{} visual rows supplied for {} visual positions",
                vis.rows,
                vis_pos.len()
            )));
        }
        let wv = self.cfg.vlm.width;
        let mut h = Matrix::zeros(seq.len(), wv);
        let emb = store.get(self.stub.tok_emb);
        for (i, e) in seq.elements.iter().enumerate() {
            if let Element::Text(t) = e {
                if *t >= VOCAB_SIZE {
                    return Err(Error::Tokenization(format!("token id {t} outside the vocabulary")));
                }
                h.row_mut(i).copy_from_slice(emb.row(*t));
            }
        }
        if !vis_pos.is_empty() {
            let ve = self.visual_embedding(store, path, vis, 0);
            for (k, &i) in vis_pos.iter().enumerate() {
                h.row_mut(i).copy_from_slice(ve.row(k));
            }
        }
        Ok(h)
    }

    /// `ĉ_t`: `u_t + W_vlm·y_vlm,t` at visual positions, `y_vlm,t` at text.
    pub fn fuse_flow_input<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        u_t: Option<&[T]>,
        y_vlm_t: &[T],
        skips: bool,
    ) -> Vec<T> {
        match u_t {
            None => y_vlm_t.to_vec(),
            Some(u) => {
                let mut c = u.to_vec();
                if skips {
                    let y = Matrix { rows: 1, cols: y_vlm_t.len(), data: y_vlm_t.to_vec() };
                    for (a, b) in c.iter_mut().zip(y.matmul(store.get(self.w_vlm)).data) {
                        *a += b;
                    }
                }
                c
            }
        }
    }

    /// `patch` is the latent's index in the visual stream, `None` for text.
    fn deep_input<T: Scalar>(&self, store: &ParamStore<T>, fused: &[T], patch: Option<usize>) -> Vec<T> {
        let m = Matrix { rows: 1, cols: fused.len(), data: fused.to_vec() };
        let (w, b) = match patch {
            Some(_) => (self.deep.in_vis_w, self.deep.in_vis_b),
            None => (self.deep.in_txt_w, self.deep.in_txt_b),
        };
        let mut out = linear(&m, store.get(w), Some(store.get(b))).data;
        if let Some(k) = patch {
            for (a, &p) in out.iter_mut().zip(store.get(self.deep.patch_pos).row(k % self.n())) {
                *a += p;
            }
        }
        out
    }

    /// Text logits `LM(y_vlm,t + W_D·y_D,t)`.
    pub fn text_logits<T: Scalar>(&self, store: &ParamStore<T>, y_vlm_t: &[T], y_d_t: Option<&[T]>, skips: bool) -> Vec<T> {
        self.lm_row(store, y_vlm_t, y_d_t, skips)
    }

    /// Shallow-flow outputs for every image of `seq`, stacked in order.
    pub fn shallow_all<T: Scalar>(&self, store: &ParamStore<T>, seq: &MultimodalSequence) -> Result<(Matrix<T>, Vec<T>)> {
        let spans = seq.prompt_spans(self.n(), self.d())?;
        let mut u = Matrix::zeros(0, self.d());
        let mut lds = Vec::new();
        for s in spans {
            let x = seq.image(s, self.n(), self.d()).cast();
            let (ub, ld) = self.shallow.forward(store, &x)?;
            u.rows += ub.rows;
            u.data.extend(ub.data);
            lds.push(ld);
        }
        Ok((u, lds))
    }

    /// Tape-free teacher-forced pass, optionally with the flow-stream inputs
    /// `u` supplied directly instead of recomputed from the stored latents.
    pub fn forward_full<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        seq: &MultimodalSequence,
        opts: ForwardOpts,
        u_override: Option<&Matrix<T>>,
    ) -> Result<StreamOutputs<T>> {
        let spans = seq.image_spans(self.n(), self.d())?;
        let (u, logdet_s) = match u_override {
            Some(u) => (u.clone(), vec![T::zero(); spans.len()]),
            None if opts.path == VisualPath::Adapter || opts.deep => self.shallow_all(store, seq)?,
            None => (Matrix::zeros(0, self.d()), Vec::new()),
        };
        let vis_pos = seq.visual_positions();
        let vis_in = match opts.path {
            VisualPath::Adapter => u.clone(),
            VisualPath::Native => {
                let mut x = Matrix::zeros(0, self.d());
                for s in &spans {
                    let b = seq.image(*s, self.n(), self.d()).cast::<T>();
                    x.rows += b.rows;
                    x.data.extend(b.data);
                }
                x
            }
        };
        let h = self.embed_sequence(store, seq, opts.path, &vis_in)?;
        let y_vlm = self.stub.backbone.forward_full(store, &h, MaskMode::Causal)?;
        let mut y_d = None;
        if opts.deep {
            let wf = self.cfg.deep.width;
            let mut c = Matrix::zeros(seq.len(), wf);
            let mut k = 0;
            for i in 0..seq.len() {
                let row = if matches!(seq.elements[i], Element::Visual(_)) {
                    let f = self.fuse_flow_input(store, Some(u.row(k)), y_vlm.row(i), opts.skips);
                    k += 1;
                    self.deep_input(store, &f, Some(k - 1))
                } else {
                    self.deep_input(store, y_vlm.row(i), None)
                };
                c.row_mut(i).copy_from_slice(&row);
            }
            y_d = Some(self.deep.backbone.forward_full(store, &c, MaskMode::Causal)?);
        }
        let mut logits = Matrix::zeros(seq.len(), VOCAB_SIZE);
        for i in 0..seq.len() {
            let l = self.lm_row(store, y_vlm.row(i), y_d.as_ref().map(|m| m.row(i)), opts.skips);
            logits.row_mut(i).copy_from_slice(&l);
        }
        let flow = match &y_d {
            Some(yd) if !vis_pos.is_empty() => {
                let prev: Vec<usize> = vis_pos.iter().map(|p| p - 1).collect();
                self.ngp.params(store, &yd.select_rows(&prev))
            }
            _ => FlowParams::identity(0, self.d()),
        };
        Ok(StreamOutputs { y_vlm, y_d, logits, flow, u, logdet_s })
    }
}

/// Step counters for one generation session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub vlm_steps: usize,
    pub deep_steps: usize,
    pub full_prefix_forwards: usize,
}

/// An incremental decoding session owning both streams' caches.
#[derive(Clone, Debug)]
pub struct Session<'m, T> {
    model: &'m Pretzel,
    store: &'m ParamStore<T>,
    pub opts: ForwardOpts,
    vlm_cache: KvCache<T>,
    deep_cache: Option<KvCache<T>>,
    last_y_vlm: Option<Vec<T>>,
    last_y_d: Option<Vec<T>>,
    visual_fed: usize,
    pub counters: Counters,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Pretzel, store: &'m ParamStore<T>, opts: ForwardOpts) -> Self {
        Session {
            model,
            store,
            opts,
            vlm_cache: KvCache::new(&model.cfg.vlm, MaskMode::Causal),
            deep_cache: opts.deep.then(|| KvCache::new(&model.cfg.deep, MaskMode::Causal)),
            last_y_vlm: None,
            last_y_d: None,
            visual_fed: 0,
            counters: Counters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.vlm_cache.filled_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step(&mut self, vlm_in: &[T], u: Option<&[T]>) -> Result<()> {
        let m = self.model;
        let y = m.stub.backbone.forward_step(self.store, vlm_in, &mut self.vlm_cache)?;
        self.counters.vlm_steps += 1;
        if let Some(cache) = self.deep_cache.as_mut() {
            let fused = m.fuse_flow_input(self.store, u, &y, self.opts.skips);
            let c = m.deep_input(self.store, &fused, u.map(|_| self.visual_fed));
            let yd = m.deep.backbone.forward_step(self.store, &c, cache)?;
            self.counters.deep_steps += 1;
            self.last_y_d = Some(yd);
        }
        self.last_y_vlm = Some(y);
        Ok(())
    }

    pub fn feed_text(&mut self, token: usize) -> Result<()> {
        if token >= VOCAB_SIZE {
            return Err(Error::Tokenization(format!("token id {token} outside the vocabulary")));
        }
        let e = self.model.stub_embedding(self.store, token);
        self.step(&e, None)
    }

    /// Feeds one visual position. `v` is `u` on the adapter path and raw `x`
    /// on the native path.
    pub fn feed_visual(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.model.d() {
            return Err(Error::Shape(format!("latent has {} dims", v.len())));
        }
        let m = Matrix { rows: 1, cols: v.len(), data: v.to_vec() };
        let e = self.model.visual_embedding(self.store, self.opts.path, &m, self.visual_fed);
        let u = (self.opts.path == VisualPath::Adapter).then_some(v);
        self.step(&e.data, u)?;
        self.visual_fed += 1;
        Ok(())
    }

    /// Logits for the next element given everything fed so far.
    pub fn logits(&self) -> Result<Vec<T>> {
        let y = self.last_y_vlm.as_ref().ok_or_else(|| Error::State("nothing has been fed".into()))?;
        Ok(self.model.lm_row(self.store, y, self.last_y_d.as_deref(), self.opts.skips))
    }

    /// Gaussian parameters for the next visual latent.
    pub fn next_visual_params(&self) -> Result<FlowParams<T>> {
        let y = self
            .last_y_d
            .as_ref()
            .ok_or_else(|| Error::State("the flow stream has not been fed".into()))?;
        let m = Matrix { rows: 1, cols: y.len(), data: y.clone() };
        Ok(self.model.ngp.params(self.store, &m))
    }

    pub fn last_states(&self) -> (Option<&[T]>, Option<&[T]>) {
        (self.last_y_vlm.as_deref(), self.last_y_d.as_deref())
    }

    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Feeds a whole sequence; visual rows come from `vis` in order.
    pub fn feed_sequence(&mut self, seq: &MultimodalSequence, vis: &Matrix<T>) -> Result<()> {
        let mut k = 0;
        for e in &seq.elements {
            match e {
                Element::Text(t) => self.feed_text(*t)?,
                Element::Visual(_) => {
                    let row = vis.row(k).to_vec();
                    k += 1;
                    self.feed_visual(&row)?;
                }
            }
        }
        Ok(())
    }
}

impl Pretzel {
    fn stub_embedding<T: Scalar>(&self, store: &ParamStore<T>, token: usize) -> Vec<T> {
        store.get(self.stub.tok_emb).row(token).to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextSampling {
    Greedy,
    Temperature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOpts {
    pub max_tokens: usize,
    pub tau: f64,
    pub text: TextSampling,
    /// Stop right after this many images have been closed.
    pub stop_after_images: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Generation<T> {
    /// Prompt plus everything emitted; visual elements hold `x`.
    pub seq: MultimodalSequence,
    /// Flow-stream latents `u` for every visual position, in order.
    pub u: Matrix<T>,
    pub images: Vec<Matrix<T>>,
    pub truncated: bool,
    pub counters: Counters,
    /// Number of positions fed per image segment (latents plus `</img>`).
    pub image_segment_steps: Vec<usize>,
}

fn sample_token<R: Rng, T: Scalar>(logits: &[T], mode: TextSampling, rng: &mut R) -> usize {
    match mode {
        TextSampling::Greedy => crate::tensor::argmax(logits),
        TextSampling::Temperature(t) if t <= 0.0 => crate::tensor::argmax(logits),
        TextSampling::Temperature(t) => {
            let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / t).collect();
            let lse = log_sum_exp(&scaled);
            let mut r: f64 = rng.random();
            for (i, l) in scaled.iter().enumerate() {
                r -= (l - lse).exp();
                if r <= 0.0 {
                    return i;
                }
            }
            scaled.len() - 1
        }
    }
}

impl Pretzel {
    /// Samples one image's worth of `u` latents: each is drawn from the
    /// predicted Gaussian and fed back before the next is predicted.
    pub fn sample_visual<T: Scalar, R: Rng>(&self, session: &mut Session<'_, T>, rng: &mut R, tau: f64) -> Result<Matrix<T>> {
        if session.opts.path != VisualPath::Adapter || !session.opts.deep {
            return Err(Error::State("image sampling needs the adapter path and the flow stream".into()));
        }
        let (n, d) = (self.n(), self.d());
        if session.vlm_cache.remaining() < n {
            return Err(Error::Capacity("not enough room left for an image".into()));
        }
        let tau = T::lit(tau);
        let mut u = Matrix::zeros(n, d);
        for r in 0..n {
            let p = session.next_visual_params()?;
            for c in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                let v = p.mu.data[c] + p.log_sigma.data[c].exp() * tau * T::lit(z);
                u.set(r, c, v);
            }
            let row = u.row(r).to_vec();
            session.feed_visual(&row)?;
        }
        Ok(u)
    }

    /// Single-pass interleaved generation. Text is sampled from the text
    /// logits; an emitted `<img>` starts an image whose latents are sampled
    /// and fed back directly, then `</img>` is forced.
    pub fn generate_interleaved<T: Scalar, R: Rng>(
        &self,
        store: &ParamStore<T>,
        prompt: &MultimodalSequence,
        opts: ForwardOpts,
        gen: GenerateOpts,
        rng: &mut R,
    ) -> Result<Generation<T>> {
        if prompt.is_empty() {
            return Err(Error::Shape("empty prompt".into()));
        }
        let (n, d) = (self.n(), self.d());
        let (u0, _) = self.shallow_all(store, prompt)?;
        let mut session = Session::new(self, store, opts);
        session.feed_sequence(prompt, &u0)?;
        let mut seq = prompt.clone();
        let mut u_all = u0;
        let mut images = Vec::new();
        let mut segment_steps = Vec::new();
        let mut emitted = 0;
        let mut truncated = false;
        loop {
            if seq.token(seq.len() - 1) == Some(IMG) {
                let before = session.counters.vlm_steps;
                let u = self.sample_visual(&mut session, rng, gen.tau)?;
                let x = self.shallow.inverse(store, &u)?;
                for r in 0..n {
                    seq.elements.push(Element::Visual(x.row(r).iter().map(|v| v.as_f32()).collect()));
                }
                u_all.rows += n;
                u_all.data.extend_from_slice(&u.data);
                session.feed_text(END_IMG)?;
                seq.elements.push(Element::Text(END_IMG));
                segment_steps.push(session.counters.vlm_steps - before);
                images.push(x);
                emitted += n + 1;
                if gen.stop_after_images.is_some_and(|k| images.len() >= k) {
                    break;
                }
                continue;
            }
            if seq.token(seq.len() - 1) == Some(EOS) {
                break;
            }
            if emitted >= gen.max_tokens || session.len() >= self.cfg.vlm.max_seq {
                truncated = true;
                break;
            }
            let logits = session.logits()?;
            let mut tok = sample_token(&logits, gen.text, rng);
            if tok == END_IMG || tok == BOS {
                tok = EOS;
            }
            if tok == IMG && session.vlm_cache.remaining() < n + 2 {
                truncated = true;
                break;
            }
            seq.elements.push(Element::Text(tok));
            emitted += 1;
            if tok != EOS {
                session.feed_text(tok)?;
            }
        }
        debug_assert_eq!(u_all.cols, d);
        Ok(Generation {
            seq,
            u: u_all,
            images,
            truncated,
            counters: session.counters,
            image_segment_steps: segment_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;

    pub(crate) fn tiny_config() -> ModelConfig {
        let bb = |layers, width| BackboneConfig { layers, width, heads: 2, ff_mult: 2.0, vocab: VOCAB_SIZE, max_seq: 48 };
        ModelConfig {
            latents: 4,
            latent_dim: 3,
            vlm: bb(1, 8),
            deep: bb(1, 8),
            shallow: ShallowConfig { blocks: 2, layers: 1, width: 8, heads: 2, ff_mult: 2.0 },
        }
    }

    fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in store.get_mut(id).data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += T::lit(scale * e);
            }
        }
    }

    fn latents(seed: u64, n: usize, d: usize) -> Matrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn sample_seq() -> MultimodalSequence {
        let mut s = MultimodalSequence::new();
        s.push_text(&[BOS]).push_text(&tokenize("a red square at top").unwrap());
        s.push_image(&latents(1, 4, 3));
        s.push_text(&tokenize("what shape is at top ?").unwrap());
        s.push_image(&latents(2, 4, 3));
        s.push_text(&[EOS]);
        s
    }

    #[test]
    fn span_contract_is_enforced() {
        let s = sample_seq();
        assert_eq!(s.image_spans(4, 3).unwrap(), vec![7, 19]);
        assert!(s.image_spans(5, 3).is_err());
        let mut bad = s.clone();
        bad.elements.remove(10);
        assert!(matches!(bad.image_spans(4, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn session_matches_full_recompute() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f64>(&cfg, 1).unwrap();
        randomize(&mut store, 2, 0.2);
        let seq = sample_seq();
        for opts in [ForwardOpts::STUB, ForwardOpts::UNDERSTAND, ForwardOpts::DECOUPLED, ForwardOpts::FUSED] {
            let full = m.forward_full(&store, &seq, opts, None).unwrap();
            let vis = match opts.path {
                VisualPath::Adapter => full.u.clone(),
                VisualPath::Native => {
                    let mut x = Matrix::zeros(0, 3);
                    for s in seq.image_spans(4, 3).unwrap() {
                        let b = seq.image(s, 4, 3).cast::<f64>();
                        x.rows += 4;
                        x.data.extend(b.data);
                    }
                    x
                }
            };
            let mut sess = Session::new(&m, &store, opts);
            let mut k = 0;
            for (i, e) in seq.elements.iter().enumerate() {
                if let Element::Visual(_) = e {
                    if opts.deep {
                        let p = sess.next_visual_params().unwrap();
                        assert!((p.mu.data[0] - full.flow.mu.get(k, 0)).abs() < 1e-10);
                    }
                    sess.feed_visual(vis.row(k)).unwrap();
                    k += 1;
                } else {
                    sess.feed_text(seq.token(i).unwrap()).unwrap();
                }
                let l = sess.logits().unwrap();
                let diff = l.iter().zip(full.logits.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-10, "{opts:?} position {i}: {diff}");
            }
        }
    }

    #[test]
    fn taped_forward_matches_full_recompute() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f64>(&cfg, 3).unwrap();
        randomize(&mut store, 4, 0.2);
        let seq = sample_seq();
        let ex = Example { seq: seq.clone(), text_from: 0 };
        let packed = Packed::<f64>::new(&m, &[ex.clone(), ex], &[], None).unwrap();
        let full = m.forward_full(&store, &seq, ForwardOpts::FUSED, None).unwrap();
        let mut ctx = Ctx::new(&store, &[]);
        let out = m.forward_taped(&mut ctx, &packed, ForwardOpts::FUSED).unwrap();
        let logits = ctx.value(out.logits.unwrap()).clone();
        let pred: Vec<usize> = (1..seq.len())
            .filter(|&i| seq.token(i).is_some_and(|t| t != END_IMG) && seq.token(i - 1).is_some())
            .map(|i| i - 1)
            .collect();
        assert_eq!(logits.rows, 2 * pred.len());
        for (k, &r) in pred.iter().enumerate() {
            for c in 0..VOCAB_SIZE {
                assert!((logits.get(k, c) - full.logits.get(r, c)).abs() < 1e-10);
                assert!((logits.get(k + pred.len(), c) - full.logits.get(r, c)).abs() < 1e-10);
            }
        }
        let flow = out.flow.unwrap();
        let mu = ctx.value(flow.mu);
        assert!(mu.select_rows(&(0..8).collect::<Vec<_>>()).max_abs_diff(&full.flow.mu) < 1e-10);
        let ld: f64 = full.logdet_s.iter().sum();
        assert!((ctx.tape.scalar(flow.logdet_s) - 2.0 * ld).abs() < 1e-10);
    }

    #[test]
    fn zero_skips_decouple_the_streams() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f32>(&cfg, 5).unwrap();
        let (w_vlm, w_d) = m.skip_ids();
        let saved = (store.get(w_vlm).clone(), store.get(w_d).clone());
        randomize(&mut store, 6, 0.2);
        *store.get_mut(w_vlm) = saved.0;
        *store.get_mut(w_d) = saved.1;
        let seq = sample_seq();
        let fused = m.forward_full(&store, &seq, ForwardOpts::FUSED, None).unwrap();
        let decoupled = m.forward_full(&store, &seq, ForwardOpts::DECOUPLED, None).unwrap();
        let stub = m.forward_full(&store, &seq, ForwardOpts::UNDERSTAND, None).unwrap();
        assert_eq!(fused.logits, stub.logits);
        assert_eq!(fused.flow, decoupled.flow);
    }

    #[test]
    fn fuse_flow_input_cases() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f64>(&cfg, 7).unwrap();
        let u = [0.5, -1.0, 2.0];
        let y: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(m.fuse_flow_input(&store, Some(&u), &y, true), u.to_vec());
        randomize(&mut store, 8, 0.3);
        assert_eq!(m.fuse_flow_input(&store, None, &y, true), y);
        let proj = Matrix { rows: 1, cols: 8, data: y.clone() }.matmul(store.get(m.w_vlm));
        assert_eq!(m.fuse_flow_input(&store, Some(&[0.0; 3]), &y, true), proj.data);
    }

    #[test]
    fn adapter_with_zero_mlp_emits_shift() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f64>(&cfg, 9).unwrap();
        for id in [m.adapter.w2, m.adapter.b2, m.stub.patch_pos] {
            *store.get_mut(id) = Matrix::zeros(store.get(id).rows, store.get(id).cols);
        }
        let shift: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        store.get_mut(m.adapter.beta_b).data = shift.clone();
        let e = m.visual_embedding(&store, VisualPath::Adapter, &latents(3, 2, 3).cast(), 0);
        assert_eq!(e.row(0), &shift[..]);
        assert_eq!(e.row(1), &shift[..]);
    }

    #[test]
    fn generation_is_single_pass_and_deterministic() {
        let cfg = tiny_config();
        let (m, mut store) = Pretzel::init::<f32>(&cfg, 10).unwrap();
        randomize(&mut store, 11, 0.2);
        let prompt = MultimodalSequence::from_tokens(&[BOS, 5, 8, 12, 6, 15, IMG]);
        let opts = GenerateOpts { max_tokens: 20, tau: 0.0, text: TextSampling::Greedy, stop_after_images: None };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            m.generate_interleaved(&store, &prompt, ForwardOpts::FUSED, opts, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.seq, b.seq);
        assert_eq!(a.image_segment_steps[0], 5);
        let fed = a.seq.len() - usize::from(a.seq.token(a.seq.len() - 1) == Some(EOS));
        assert_eq!(a.counters.vlm_steps, fed);
        assert_eq!(a.counters.deep_steps, fed);
        assert_eq!(a.counters.full_prefix_forwards, 0);
    }
}
