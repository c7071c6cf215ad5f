//! Inference entry points, the generation-accuracy evaluator and the
//! single-pass vs re-encode decoding benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{detect, LatentCodec, SceneObject, ToyImage, ToyScene};
use crate::dataset::t2i_prompt;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pretzel::{Element, ForwardOpts, GenerateOpts, MultimodalSequence, Pretzel, Session, TextSampling, VisualPath};
use crate::tensor::{argmax, Matrix};
use crate::vocab::{caption, questions, tokenize, BOS, END_IMG, EOS, IMG};

/// One generated image.
#[derive(Clone, Debug)]
pub struct T2iOutput {
    pub image: ToyImage,
    /// Decoded latents `x`.
    pub latents: Matrix<f32>,
    /// Flow-stream latents `u` as sampled.
    pub u: Matrix<f32>,
}

/// Caption tokens to image: sample `u`, invert the shallow blocks, decode.
pub fn generate_t2i<R: Rng>(
    model: &Pretzel,
    store: &ParamStore<f32>,
    codec: &LatentCodec,
    caption_tokens: &[usize],
    opts: ForwardOpts,
    rng: &mut R,
    tau: f64,
) -> Result<T2iOutput> {
    let prompt = t2i_prompt(caption_tokens);
    let gen = GenerateOpts { max_tokens: 0, tau, text: TextSampling::Greedy, stop_after_images: Some(1) };
    let out = model.generate_interleaved(store, &prompt, opts, gen, rng)?;
    let latents = out.images.into_iter().next().ok_or_else(|| Error::State("no image was generated".into()))?;
    let image = codec.decode(&latents)?;
    Ok(T2iOutput { image, latents, u: out.u })
}

/// Same as [`generate_t2i`] from caption text.
pub fn generate_t2i_text<R: Rng>(
    model: &Pretzel,
    store: &ParamStore<f32>,
    codec: &LatentCodec,
    text: &str,
    opts: ForwardOpts,
    rng: &mut R,
    tau: f64,
) -> Result<T2iOutput> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(Error::Tokenization("empty prompt".into()));
    }
    generate_t2i(model, store, codec, &tokens, opts, rng, tau)
}

pub const MAX_ANSWER_TOKENS: usize = 4;

/// Greedy answer to `question` about `image`, stopping at `<eos>`.
pub fn answer_question(
    model: &Pretzel,
    store: &ParamStore<f32>,
    codec: &LatentCodec,
    image: &ToyImage,
    question: &[usize],
    path: VisualPath,
) -> Result<Vec<usize>> {
    if question.is_empty() || question.iter().any(|&t| t == BOS || t == EOS || t == IMG || t == END_IMG) {
        return Err(Error::Tokenization("malformed question".into()));
    }
    let mut seq = MultimodalSequence::new();
    seq.push_text(&[BOS]).push_image(&codec.encode(image)).push_text(question);
    let opts = match path {
        VisualPath::Native => ForwardOpts::STUB,
        VisualPath::Adapter => ForwardOpts::UNDERSTAND,
    };
    let vis = match path {
        VisualPath::Adapter => model.shallow_all(store, &seq)?.0,
        VisualPath::Native => seq.image(1, model.cfg.latents, model.cfg.latent_dim),
    };
    let mut session = Session::new(model, store, opts);
    session.feed_sequence(&seq, &vis)?;
    let mut answer = Vec::new();
    for _ in 0..MAX_ANSWER_TOKENS {
        let tok = argmax(&session.logits()?);
        if tok == EOS || tok == IMG || tok == END_IMG || tok == BOS {
            break;
        }
        answer.push(tok);
        session.feed_text(tok)?;
    }
    Ok(answer)
}

/// Attribute hits for one generated image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GenOutcome {
    pub shape: bool,
    pub color: bool,
    pub position: bool,
    pub detected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenAccuracy {
    pub prompts: usize,
    pub shape_acc: f64,
    pub color_acc: f64,
    pub position_acc: f64,
    pub outcomes: Vec<GenOutcome>,
}

impl GenAccuracy {
    pub fn mean(&self) -> f64 {
        (self.shape_acc + self.color_acc + self.position_acc) / 3.0
    }
}

/// The single-object prompt set for `seed`.
pub fn single_object_prompts(n: usize, seed: u64) -> Vec<ToyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ToyScene::random_single(&mut rng)).collect()
}

/// Per-prompt generator: prompt `i` always draws from the same stream so
/// two checkpoints can be compared pairwise.
pub fn prompt_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64 + 1);
    r
}

/// Scores the strongest detection in `image` against `target`.
pub fn score_image(image: &ToyImage, target: &SceneObject) -> GenOutcome {
    let best = detect(image)
        .into_iter()
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude));
    match best {
        Some(d) => GenOutcome {
            shape: d.object.shape == target.shape,
            color: d.object.color == target.color,
            position: d.object.cell == target.cell,
            detected: true,
        },
        None => GenOutcome { shape: false, color: false, position: false, detected: false },
    }
}

/// Classify-based attribute accuracy over `n` single-object prompts.
pub fn evaluate_generation(
    model: &Pretzel,
    store: &ParamStore<f32>,
    codec: &LatentCodec,
    opts: ForwardOpts,
    n: usize,
    seed: u64,
    tau: f64,
) -> Result<GenAccuracy> {
    let prompts = single_object_prompts(n, seed);
    let mut outcomes = Vec::with_capacity(n);
    for (i, scene) in prompts.iter().enumerate() {
        let mut rng = prompt_rng(seed, i);
        let out = generate_t2i(model, store, codec, &caption(scene)?, opts, &mut rng, tau)?;
        outcomes.push(score_image(&out.image, &scene.objects[0]));
    }
    let frac = |f: fn(&GenOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n.max(1) as f64;
    Ok(GenAccuracy {
        prompts: n,
        shape_acc: frac(|o| o.shape),
        color_acc: frac(|o| o.color),
        position_acc: frac(|o| o.position),
        outcomes,
    })
}

/// Teacher-forced incremental pass over `seq`: text logits at every position
/// and the Gaussian parameters predicted for each visual position, in the
/// layout of [`Pretzel::forward_full`].
pub fn cached_trace(
    model: &Pretzel,
    store: &ParamStore<f32>,
    seq: &MultimodalSequence,
    u: &Matrix<f32>,
    opts: ForwardOpts,
) -> Result<(Matrix<f32>, Matrix<f32>, Matrix<f32>)> {
    let mut session = Session::new(model, store, opts);
    let d = model.cfg.latent_dim;
    let mut logits = Matrix::zeros(0, model.cfg.vlm.vocab);
    let (mut mu, mut ls) = (Matrix::zeros(0, d), Matrix::zeros(0, d));
    let mut k = 0;
    for e in &seq.elements {
        match e {
            Element::Text(t) => session.feed_text(*t)?,
            Element::Visual(x) => {
                if opts.deep {
                    let p = session.next_visual_params()?;
                    mu.rows += 1;
                    mu.data.extend(p.mu.data);
                    ls.rows += 1;
                    ls.data.extend(p.log_sigma.data);
                }
                let v = match opts.path {
                    VisualPath::Adapter => u.row(k).to_vec(),
                    VisualPath::Native => x.clone(),
                };
                k += 1;
                session.feed_visual(&v)?;
            }
        }
        logits.rows += 1;
        logits.data.extend(session.logits()?);
    }
    Ok((logits, mu, ls))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Cached,
    Reencode,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Cached => "cached",
            BenchMode::Reencode => "reencode",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Workload {
    pub turns: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub turns: usize,
    pub images: usize,
    pub backbone_steps: usize,
    pub full_prefix_forwards: usize,
    pub codec_encode_calls: usize,
    pub wall_ms: u128,
    #[serde(skip)]
    pub output: MultimodalSequence,
}

/// Runs an interleaved multi-turn workload. Each turn is a user caption; the
/// first `images` turns ask for its image (`<img>` is appended and an image
/// is sampled), the others ask a question answered greedily with one token.
///
/// Cached mode keeps both KV caches across the whole conversation. The
/// re-encode baseline decodes every generated image to pixels, encodes it
/// again, and re-runs the full prefix before continuing.
pub fn bench_decode(
    model: &Pretzel,
    store: &ParamStore<f32>,
    codec: &LatentCodec,
    workload: Workload,
    mode: BenchMode,
    seed: u64,
    tau: f64,
) -> Result<BenchReport> {
    if workload.images > workload.turns {
        return Err(Error::Config("a workload cannot have more images than turns".into()));
    }
    let start = Instant::now();
    let encodes_before = codec.encode_calls();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = ForwardOpts::FUSED;
    let (n, d) = (model.cfg.latents, model.cfg.latent_dim);
    let mut session = Session::new(model, store, opts);
    let mut seq = MultimodalSequence::new();
    let mut u_all = Matrix::<f32>::zeros(0, d);
    let mut steps = 0;
    let mut prefix_forwards = 0;
    seq.push_text(&[BOS]);
    session.feed_text(BOS)?;
    for turn in 0..workload.turns {
        let scene = ToyScene::random(&mut rng);
        let mut text = caption(&scene)?;
        let wants_image = turn < workload.images;
        if wants_image {
            text.push(IMG);
        } else {
            let qs = questions(&scene);
            text.extend(&qs[rng.random_range(0..qs.len())].tokens);
        }
        if session.len() + text.len() + n + 2 > model.cfg.vlm.max_seq {
            return Err(Error::Capacity(format!("workload does not fit in {} positions", model.cfg.vlm.max_seq)));
        }
        for &t in &text {
            session.feed_text(t)?;
        }
        if wants_image {
            seq.push_text(&text[..text.len() - 1]);
            let u = model.sample_visual(&mut session, &mut rng, tau)?;
            let mut x = model.shallow.inverse(store, &u)?;
            if mode == BenchMode::Reencode {
                x = codec.encode(&codec.decode(&x)?);
                let (u2, _) = model.shallow.forward(store, &x)?;
                u_all.rows += n;
                u_all.data.extend(&u2.data);
            } else {
                u_all.rows += n;
                u_all.data.extend(&u.data);
            }
            seq.push_image(&x);
            if mode == BenchMode::Reencode {
                steps += session.counters.vlm_steps + session.counters.deep_steps;
                session = Session::new(model, store, opts);
                session.feed_sequence(&seq, &u_all)?;
                prefix_forwards += 1;
            } else {
                session.feed_text(END_IMG)?;
            }
        } else {
            seq.push_text(&text);
            let tok = argmax(&session.logits()?);
            seq.push_text(&[tok]);
            session.feed_text(tok)?;
        }
    }
    steps += session.counters.vlm_steps + session.counters.deep_steps;
    Ok(BenchReport {
        mode,
        turns: workload.turns,
        images: workload.images,
        backbone_steps: steps,
        full_prefix_forwards: prefix_forwards,
        codec_encode_calls: codec.encode_calls() - encodes_before,
        wall_ms: start.elapsed().as_millis(),
        output: seq,
    })
}

/// CSV of the reports and a short human-readable summary.
pub fn emit_report(reports: &[BenchReport]) -> Result<(String, String)> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["mode", "turns", "images", "backbone_steps", "full_prefix_forwards", "codec_encode_calls", "wall_ms"])
        .map_err(|e| Error::format("bench.csv", e.to_string()))?;
    let mut summary = String::new();
    for r in reports {
        w.serialize(r).map_err(|e| Error::format("bench.csv", e.to_string()))?;
        let _ = writeln!(
            summary,
            "{:<8} turns={} images={}: {} backbone steps, {} full-prefix forwards, {} codec encodes, {} ms",
            r.mode.name(),
            r.turns,
            r.images,
            r.backbone_steps,
            r.full_prefix_forwards,
            r.codec_encode_calls,
            r.wall_ms
        );
    }
    let bytes = w.into_inner().map_err(|e| Error::format("bench.csv", e.to_string()))?;
    Ok((String::from_utf8(bytes).expect("csv output is utf-8"), summary))
}
