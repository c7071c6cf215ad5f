//! Dataset records, their JSONL encoding, and the sequence layouts built
//! from them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_codec, save_codec};
use crate::codec::{render_scene, LatentCodec, ToyScene, LATENT_DIM, NUM_LATENTS};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::pretzel::{Example, MultimodalSequence};
use crate::tensor::Matrix;
use crate::vocab::{caption, Question, BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scene: ToyScene,
    pub caption_tokens: Vec<usize>,
    /// `N × D` codec latents of the rendered scene.
    pub latents: Matrix<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    scene: ToyScene,
    caption_tokens: Vec<usize>,
    latents: String,
}

impl Record {
    pub fn from_scene(codec: &LatentCodec, scene: ToyScene) -> Result<Self> {
        let img = render_scene(&scene)?;
        Ok(Record { caption_tokens: caption(&scene)?, latents: codec.encode(&img), scene })
    }

    fn to_raw(&self) -> RawRecord {
        let bytes: Vec<u8> = self.latents.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        RawRecord {
            scene: self.scene.clone(),
            caption_tokens: self.caption_tokens.clone(),
            latents: STANDARD.encode(bytes),
        }
    }

    fn from_raw(raw: RawRecord) -> std::result::Result<Self, String> {
        let bytes = STANDARD.decode(raw.latents.as_bytes()).map_err(|e| e.to_string())?;
        if bytes.len() != NUM_LATENTS * LATENT_DIM * 4 {
            return Err(format!("latents hold {} bytes", bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Record {
            scene: raw.scene,
            caption_tokens: raw.caption_tokens,
            latents: Matrix { rows: NUM_LATENTS, cols: LATENT_DIM, data },
        })
    }
}

/// `count` random scenes from `seed`, rendered and encoded.
pub fn generate_records(codec: &LatentCodec, count: usize, seed: u64) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Record::from_scene(codec, ToyScene::random(&mut rng)))
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(&r.to_raw()).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(Record::from_raw(raw).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Codec plus training and held-out records.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub codec: LatentCodec,
    pub train: Vec<Record>,
    pub heldout: Vec<Record>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const CODEC_DIR: &str = "codec";

impl Corpus {
    /// Fits the codec and draws both splits; each uses its own stream of
    /// `seed`.
    pub fn generate(train: usize, heldout: usize, codec_scenes: usize, seed: u64) -> Result<Self> {
        let codec = LatentCodec::fit_random(codec_scenes, seed)?;
        let train = generate_records(&codec, train, seed.wrapping_add(1))?;
        let heldout = generate_records(&codec, heldout, seed.wrapping_add(2))?;
        Ok(Corpus { codec, train, heldout })
    }

    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        if cfg.dir.is_empty() {
            Self::generate(cfg.train_scenes, cfg.heldout_scenes, cfg.codec_scenes, cfg.seed)
        } else {
            Self::load(Path::new(&cfg.dir))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(HELDOUT_FILE), &self.heldout)?;
        save_codec(&dir.join(CODEC_DIR), &self.codec)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Corpus {
            codec: load_codec(&dir.join(CODEC_DIR))?,
            train: read_jsonl(&dir.join(TRAIN_FILE))?,
            heldout: read_jsonl(&dir.join(HELDOUT_FILE))?,
        })
    }
}

/// `<bos> caption <img> x </img> <eos>`; text loss on the caption onward.
pub fn t2i_example(rec: &Record) -> Example {
    let mut s = MultimodalSequence::new();
    s.push_text(&[BOS]).push_text(&rec.caption_tokens).push_image(&rec.latents).push_text(&[EOS]);
    Example { seq: s, text_from: 1 }
}

/// `<bos> <img> x </img> caption <eos>`; loss on the caption and `<eos>`.
pub fn i2t_example(rec: &Record) -> Example {
    let mut s = MultimodalSequence::new();
    s.push_text(&[BOS]).push_image(&rec.latents);
    let from = s.len();
    s.push_text(&rec.caption_tokens).push_text(&[EOS]);
    Example { seq: s, text_from: from }
}

/// `<bos> <img> x </img> question answer <eos>`; loss on the answer and `<eos>`.
pub fn qa_example(rec: &Record, q: &Question) -> Example {
    let mut s = MultimodalSequence::new();
    s.push_text(&[BOS]).push_image(&rec.latents).push_text(&q.tokens);
    let from = s.len();
    s.push_text(&q.answer).push_text(&[EOS]);
    Example { seq: s, text_from: from }
}

/// Caption, then its image, then a question about it and the answer.
pub fn interleaved_example(rec: &Record, q: &Question) -> Example {
    let mut s = MultimodalSequence::new();
    s.push_text(&[BOS])
        .push_text(&rec.caption_tokens)
        .push_image(&rec.latents)
        .push_text(&q.tokens)
        .push_text(&q.answer)
        .push_text(&[EOS]);
    Example { seq: s, text_from: 1 }
}

/// Text-to-image prompt: `<bos> caption <img>`.
pub fn t2i_prompt(caption_tokens: &[usize]) -> MultimodalSequence {
    let mut s = MultimodalSequence::new();
    s.push_text(&[BOS]).push_text(caption_tokens).push_text(&[crate::vocab::IMG]);
    s
}
