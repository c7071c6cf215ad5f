//! Staged optimization: losses, AdamW with a cosine schedule, batch
//! assembly per stage, and the understanding evaluation used to check that
//! the frozen language stream keeps its abilities.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::dataset::{i2t_example, interleaved_example, qa_example, t2i_example, Record};
use crate::error::{Error, Result};
use crate::flow::LOG_SIGMA_BOUND;
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::pretzel::{Example, ForwardOpts, Packed, Pretzel, Taped, VisualPath};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Matrix};
use crate::vocab::{questions, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub min_lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub lambda_text: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Probability that an image is perturbed with Gaussian noise of
    /// standard deviation `noise_s_max` (the level is also fed to the
    /// adapter).
    pub noise_p: f64,
    pub noise_s_max: f64,
    /// Joint-stage mixture: text-to-image, image-to-text, interleaved.
    pub mix: [f64; 3],
    pub log_every: usize,
}

impl TrainConfig {
    pub fn for_stage(stage: u8) -> Self {
        let (lr, steps) = match stage {
            0 => (1e-3, 3000),
            1 => (1e-4, 5000),
            2 => (1e-4, 2000),
            _ => (5e-5, 5000),
        };
        let noise_p = if stage == 1 || stage == 3 { 1.0 } else { 0.0 };
        TrainConfig {
            stage,
            lr,
            min_lr: 1e-6,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 1e-4,
            batch: 64,
            steps,
            lambda_text: 0.25,
            seed: u64::from(stage),
            grad_clip: 1.0,
            noise_p,
            noise_s_max: 0.1,
            mix: [0.4, 0.3, 0.3],
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 3 {
            return Err(Error::Config(format!("stage {} does not exist", self.stage)));
        }
        if !(self.min_lr > 0.0 && self.lr >= self.min_lr) {
            return Err(Error::Config("need lr >= min_lr > 0".into()));
        }
        if self.lambda_text < 0.0 {
            return Err(Error::Config("lambda_text must be non-negative".into()));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("batch and log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_p) || self.noise_s_max < 0.0 {
            return Err(Error::Config("invalid noise hook settings".into()));
        }
        if self.mix.iter().any(|&m| m < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mix weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    pub fn trainable(&self) -> &'static [Group] {
        trainable_groups(self.stage)
    }
}

pub fn trainable_groups(stage: u8) -> &'static [Group] {
    match stage {
        0 => &[Group::Stub],
        1 => &[Group::Deep, Group::Shallow, Group::NgpHead],
        2 => &[Group::Adapter],
        _ => &[Group::Deep, Group::Shallow, Group::Adapter, Group::SkipVlm, Group::SkipD, Group::NgpHead],
    }
}

pub fn stage_opts(stage: u8) -> ForwardOpts {
    match stage {
        0 => ForwardOpts::STUB,
        1 => ForwardOpts::DECOUPLED,
        2 => ForwardOpts::UNDERSTAND,
        _ => ForwardOpts::FUSED,
    }
}

/// Cosine decay from `lr` at step 0 to `min_lr` at `steps`.
pub fn cosine_lr(lr: f64, min_lr: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return lr;
    }
    let t = (step.min(steps) as f64) / steps as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            moments: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Matrix<T>)], lr: f64) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let eps = T::lit(self.eps);
        let decay = T::one() - T::lit(lr * self.weight_decay);
        let lr = T::lit(lr);
        for (id, g) in grads {
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (Matrix::zeros(g.rows, g.cols), Matrix::zeros(g.rows, g.cols)));
            let p = store.get_mut(*id);
            for i in 0..g.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] = p.data[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Matrix<T>)], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|(_, g)| g.data.iter()).map(|v| v.as_f64().powi(2)).sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Loss nodes and their values for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Visual NLL in nats per latent dimension (`None` without images).
    pub nf: Option<Var>,
    pub ntp: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub loss: f64,
    pub nats_per_dim: f64,
    pub nll_per_image: f64,
    pub ntp: f64,
    pub clamp_rate: f64,
}

/// Visual NLL in nats per latent dimension:
/// `(Σ [½z² + log σ + ½ log 2π] − logdet_S) / (images·N·D)`.
pub fn loss_nf<T: Scalar>(ctx: &mut Ctx<'_, T>, taped: &Taped) -> Option<Var> {
    let f = taped.flow.as_ref()?;
    let z = ctx.tape.affine_normalize(f.u, f.mu, f.log_sigma);
    let count = ctx.value(f.u).len();
    let sq = ctx.tape.sum_squares(z);
    let half = ctx.tape.scale(sq, T::lit(0.5));
    let ls = ctx.tape.sum(f.log_sigma);
    let a = ctx.tape.add(half, ls);
    let a = ctx.tape.sub(a, f.logdet_s);
    let a = ctx.tape.add_scalar(a, T::lit(count as f64 * 0.5 * (2.0 * PI).ln()));
    Some(ctx.tape.scale(a, T::one() / T::lit(count as f64)))
}

/// Mean next-token cross-entropy over the supervised text targets.
pub fn loss_ntp<T: Scalar>(ctx: &mut Ctx<'_, T>, taped: &Taped, batch: &Packed<T>) -> Result<Var> {
    let logits = taped
        .logits
        .ok_or_else(|| Error::Shape("batch has no text targets".into()))?;
    Ok(ctx.tape.cross_entropy(logits, &batch.text_targets))
}

/// `L_NF + λ·L_NTP`, using whichever components the batch supports.
pub fn loss_joint<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    taped: &Taped,
    batch: &Packed<T>,
    use_nf: bool,
    lambda: Option<f64>,
) -> Result<LossParts> {
    let nf = if use_nf { loss_nf(ctx, taped) } else { None };
    let ntp = match lambda {
        Some(_) if taped.logits.is_some() => Some(loss_ntp(ctx, taped, batch)?),
        _ => None,
    };
    let total = match (nf, ntp) {
        (Some(a), Some(b)) => {
            let w = ctx.tape.scale(b, T::lit(lambda.unwrap_or(1.0)));
            ctx.tape.add(a, w)
        }
        (Some(a), None) => a,
        (None, Some(b)) => ctx.tape.scale(b, T::lit(lambda.unwrap_or(1.0))),
        (None, None) => return Err(Error::Shape("batch supports neither loss".into())),
    };
    Ok(LossParts { nf, ntp, total })
}

fn loss_values<T: Scalar>(ctx: &Ctx<'_, T>, parts: &LossParts, taped: &Taped, images: usize) -> LossValues {
    let nats = parts.nf.map(|v| ctx.tape.scalar(v).as_f64()).unwrap_or(f64::NAN);
    let clamp_rate = taped
        .flow
        .as_ref()
        .map(|f| {
            let ls = ctx.value(f.log_sigma);
            let b = LOG_SIGMA_BOUND - 1e-6;
            ls.data.iter().filter(|v| v.as_f64().abs() >= b).count() as f64 / ls.len().max(1) as f64
        })
        .unwrap_or(0.0);
    let per_image = taped
        .flow
        .as_ref()
        .map(|f| nats * ctx.value(f.u).len() as f64 / images.max(1) as f64)
        .unwrap_or(f64::NAN);
    LossValues {
        loss: ctx.tape.scalar(parts.total).as_f64(),
        nats_per_dim: nats,
        nll_per_image: per_image,
        ntp: parts.ntp.map(|v| ctx.tape.scalar(v).as_f64()).unwrap_or(f64::NAN),
        clamp_rate,
    }
}

/// The example mix of one stage.
pub fn sample_examples<R: Rng>(stage: u8, data: &[Record], count: usize, mix: [f64; 3], rng: &mut R) -> Vec<Example> {
    let mut out = Vec::with_capacity(count);
    let total: f64 = mix.iter().sum();
    for _ in 0..count {
        let rec = &data[rng.random_range(0..data.len())];
        let qs = questions(&rec.scene);
        let q = &qs[rng.random_range(0..qs.len())];
        let understand = |rng: &mut R| {
            if rng.random_bool(0.5) {
                i2t_example(rec)
            } else {
                qa_example(rec, q)
            }
        };
        let ex = match stage {
            0 => match rng.random_range(0..3) {
                0 => t2i_example(rec),
                1 => i2t_example(rec),
                _ => qa_example(rec, q),
            },
            1 => t2i_example(rec),
            2 => understand(rng),
            _ => {
                let r = rng.random::<f64>() * total;
                if r < mix[0] {
                    t2i_example(rec)
                } else if r < mix[0] + mix[1] {
                    understand(rng)
                } else {
                    interleaved_example(rec, q)
                }
            }
        };
        out.push(ex);
    }
    out
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub nats_per_dim: f64,
    pub ntp_nats: f64,
    pub lr: f64,
    pub sigma_clamp_rate: f64,
    pub wall_ms: u128,
}

pub fn write_metrics<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::format("metrics.csv", e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::io("metrics.csv", e))
}

/// Assembles a stage batch, applying the noise hook.
fn build_batch<R: Rng>(model: &Pretzel, cfg: &TrainConfig, data: &[Record], rng: &mut R) -> Result<Packed<f32>> {
    let examples = sample_examples(cfg.stage, data, cfg.batch, cfg.mix, rng);
    let images = examples.len();
    let mut noise = vec![0.0; images];
    let mut packed = if cfg.noise_p > 0.0 && cfg.stage > 0 {
        for s in noise.iter_mut() {
            if rng.random_bool(cfg.noise_p) {
                *s = cfg.noise_s_max;
            }
        }
        Packed::new(model, &examples, &noise, None)?
    } else {
        Packed::new(model, &examples, &[], None)?
    };
    if noise.iter().any(|&s| s > 0.0) {
        let per = model.cfg.latents * model.cfg.latent_dim;
        for (i, &s) in noise.iter().enumerate() {
            if s > 0.0 {
                for v in &mut packed.x.data[i * per..(i + 1) * per] {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += (s * e) as f32;
                }
            }
        }
    }
    packed.nf_only = cfg.stage == 1;
    Ok(packed)
}

/// Loss values and gradients for one packed batch.
pub fn batch_gradients<T: Scalar>(
    model: &Pretzel,
    store: &ParamStore<T>,
    stage: u8,
    lambda: f64,
    batch: &Packed<T>,
) -> Result<(LossValues, Vec<(ParamId, Matrix<T>)>)> {
    let mut ctx = Ctx::new(store, trainable_groups(stage));
    let taped = model.forward_taped(&mut ctx, batch, stage_opts(stage))?;
    let (use_nf, lam) = match stage {
        0 | 2 => (false, Some(1.0)),
        1 => (true, None),
        _ => (true, Some(lambda)),
    };
    let parts = loss_joint(&mut ctx, &taped, batch, use_nf, lam)?;
    let values = loss_values(&ctx, &parts, &taped, batch.images);
    let grads = ctx.gradients(parts.total);
    Ok((values, grads))
}

/// Runs one training stage in place. The caller is responsible for stage
/// prerequisites; see the checkpoint module.
pub fn run_stage(
    model: &Pretzel,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    data: &[Record],
    mut progress: Option<&mut dyn FnMut(&MetricRow)>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut rows = Vec::new();
    let start = Instant::now();
    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.lr, cfg.min_lr, step, cfg.steps);
        let batch = build_batch(model, cfg, data, &mut rng)?;
        let (values, mut grads) = batch_gradients(model, store, cfg.stage, cfg.lambda_text, &batch)?;
        if !values.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "stage {} step {step}: loss {} (nats/dim {}, ntp {}, clamp rate {})",
                cfg.stage, values.loss, values.nats_per_dim, values.ntp, values.clamp_rate
            )));
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(store, &grads, lr);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let row = MetricRow {
                step,
                stage: cfg.stage,
                loss: values.loss,
                nats_per_dim: values.nats_per_dim,
                ntp_nats: values.ntp,
                lr,
                sigma_clamp_rate: values.clamp_rate,
                wall_ms: start.elapsed().as_millis(),
            };
            if let Some(cb) = progress.as_mut() {
                cb(&row);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Held-out understanding: teacher-forced caption-token accuracy and
/// single-token QA accuracy; `score` is their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingScore {
    pub caption_acc: f64,
    pub qa_acc: f64,
    pub score: f64,
}

pub fn evaluate_understanding(
    model: &Pretzel,
    store: &ParamStore<f32>,
    records: &[Record],
    path: VisualPath,
    seed: u64,
) -> Result<UnderstandingScore> {
    let opts = match path {
        VisualPath::Native => ForwardOpts::STUB,
        VisualPath::Adapter => ForwardOpts::UNDERSTAND,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cap_ok, mut cap_n, mut qa_ok) = (0usize, 0usize, 0usize);
    for rec in records {
        let ex = i2t_example(rec);
        let out = model.forward_full(store, &ex.seq, opts, None)?;
        for i in ex.text_from..ex.seq.len() {
            let t = ex.seq.token(i).unwrap_or(EOS);
            if t == EOS {
                continue;
            }
            cap_n += 1;
            cap_ok += usize::from(argmax(out.logits.row(i - 1)) == t);
        }
        let qs = questions(&rec.scene);
        let q = &qs[rng.random_range(0..qs.len())];
        let ex = qa_example(rec, q);
        let out = model.forward_full(store, &ex.seq, opts, None)?;
        qa_ok += usize::from(argmax(out.logits.row(ex.text_from - 1)) == q.answer[0]);
    }
    let caption_acc = cap_ok as f64 / cap_n.max(1) as f64;
    let qa_acc = qa_ok as f64 / records.len().max(1) as f64;
    Ok(UnderstandingScore { caption_acc, qa_acc, score: 0.5 * (caption_acc + qa_acc) })
}

/// Mean visual NLL (nats per dimension) of `records` under text-to-image
/// teacher forcing, optionally pairing each image with another record's
/// caption.
pub fn evaluate_nll(
    model: &Pretzel,
    store: &ParamStore<f32>,
    records: &[Record],
    opts: ForwardOpts,
    caption_perm: Option<&[usize]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, rec) in records.iter().enumerate() {
        let mut r = rec.clone();
        if let Some(p) = caption_perm {
            r.caption_tokens = records[p[i]].caption_tokens.clone();
        }
        let ex = t2i_example(&r);
        let out = model.forward_full(store, &ex.seq, opts, None)?;
        let nll = crate::flow::nll_visual(&out.u, &out.flow, out.logdet_s[0])?;
        total += nll.per_dim;
    }
    Ok(total / records.len().max(1) as f64)
}
