use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pretzel_core::analysis::{analysis_prompts, skip_contributions, summarize};
use pretzel_core::checkpoint::Checkpoint;
use pretzel_core::codec::{ToyImage, IMAGE_SIZE};
use pretzel_core::config::RunConfig;
use pretzel_core::dataset::Corpus;
use pretzel_core::inference::{
    answer_question, bench_decode, emit_report, evaluate_generation, generate_t2i_text, BenchMode, Workload,
};
use pretzel_core::pipeline::{generation_opts, pretrain_stub, train_stage, understanding_path};
use pretzel_core::pretzel::{Pretzel, VisualPath};
use pretzel_core::training::{evaluate_understanding, write_metrics, MetricRow};
use pretzel_core::vocab::{detokenize, tokenize};
use pretzel_core::{Error, Result};

#[derive(Parser)]
#[command(name = "pretzel", version, about = "Toy interleaved text and image model: data, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the codec and write train/held-out records.
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        heldout: usize,
        /// Scenes used to fit the codec (defaults to --scenes).
        #[arg(long)]
        codec_scenes: Option<usize>,
    },
    /// Stage 0: train the language stream on the native visual pathway.
    PretrainStub {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stages 1 to 3.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Overrides for data and stage settings; the model section must
        /// match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an image from a caption.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer a question about a 24×24 PNG.
    Answer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, value_enum)]
        path: Option<PathArg>,
    },
    /// Accuracy table for generation and/or understanding.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Suite::Both)]
        suite: Suite,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temp: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-prompt generation outcomes, for paired comparisons.
        #[arg(long)]
        per_prompt: Option<PathBuf>,
    },
    /// Cached single-pass decoding vs the re-encode baseline.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        turns: usize,
        #[arg(long)]
        images: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Skip-connection statistics over generated samples.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Native,
    Adapter,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Gen,
    Und,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cached,
    Reencode,
    Both,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn progress(row: &MetricRow) {
    eprintln!(
        "stage {} step {:>5}  loss {:.4}  nats/dim {:.4}  ntp {:.4}  lr {:.2e}",
        row.stage, row.step, row.loss, row.nats_per_dim, row.ntp_nats, row.lr
    );
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_metrics(dir: &Path, stage: u8, rows: &[MetricRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows)?;
    write_file(&dir.join(format!("metrics_stage{stage}.csv")), &buf)
}

fn save_png(path: &Path, img: &ToyImage) -> Result<()> {
    let bytes: Vec<u8> = img.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, bytes).expect("pixel buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_file(path, out.get_ref())
}

fn load_png(path: &Path) -> Result<ToyImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    if rgb.dimensions() != (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
        return Err(Error::Shape(format!(
            "image is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
            rgb.width(),
            rgb.height()
        )));
    }
    ToyImage::from_pixels(rgb.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect())
}

fn load(path: &Path) -> Result<(Pretzel, Checkpoint)> {
    Checkpoint::load(path)
}

fn apply_config(ck: &mut Checkpoint, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        let cfg = RunConfig::load(p)?;
        if cfg.model != ck.config.model || cfg.seed != ck.config.seed {
            return Err(Error::Config(format!("{} describes a different model than the checkpoint", p.display())));
        }
        ck.config = cfg;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { scenes, seed, out, heldout, codec_scenes } => {
            let corpus = Corpus::generate(scenes, heldout, codec_scenes.unwrap_or(scenes), seed)?;
            corpus.save(&out)?;
            println!("wrote {} train and {} held-out records to {}", corpus.train.len(), corpus.heldout.len(), out.display());
        }
        Command::PretrainStub { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::from_config(&cfg.data)?;
            let (model, mut ck) = Checkpoint::init(cfg, corpus.codec.clone())?;
            let rows = pretrain_stub(&model, &mut ck, &corpus, Some(&mut progress))?;
            ck.save(&out)?;
            save_metrics(&out, 0, &rows)?;
            if let Some(s) = ck.stub_score {
                println!("stub caption_acc {:.4} qa_acc {:.4} score {:.4}", s.caption_acc, s.qa_acc, s.score);
            }
        }
        Command::Train { stage, config, from, flow, adapter, out } => {
            let (model, mut ck) = load(&from)?;
            apply_config(&mut ck, config.as_deref())?;
            if stage == 3 {
                let pick = |p: Option<PathBuf>, need: u8| -> Result<Option<Checkpoint>> {
                    match p {
                        Some(p) => Ok(Some(load(&p)?.1)),
                        None if ck.has_stage(need) => Ok(Some(ck.clone())),
                        None => Ok(None),
                    }
                };
                let f = pick(flow, 1)?;
                let a = pick(adapter, 2)?;
                let mut entry = ck.prepare_stage3(f.as_ref(), a.as_ref())?;
                entry.config = ck.config.clone();
                ck = entry;
            }
            let corpus = Corpus::from_config(&ck.config.data)?;
            if corpus.codec != ck.codec {
                return Err(Error::Config("the configured data was encoded with a different codec".into()));
            }
            let rows = train_stage(&model, &mut ck, stage, &corpus, Some(&mut progress))?;
            ck.save(&out)?;
            save_metrics(&out, stage, &rows)?;
            if let Some(last) = rows.last() {
                println!("stage {stage} done: loss {:.4} nats/dim {:.4}", last.loss, last.nats_per_dim);
            }
        }
        Command::Sample { ckpt, prompt, seed, temp, out } => {
            let (model, ck) = load(&ckpt)?;
            let opts = generation_opts(&ck)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = generate_t2i_text(&model, &ck.store, &ck.codec, &prompt, opts, &mut rng, temp)?;
            save_png(&out, &g.image)?;
            println!("wrote {}", out.display());
        }
        Command::Answer { ckpt, image, question, path } => {
            let (model, ck) = load(&ckpt)?;
            let q = tokenize(&question)?;
            let img = load_png(&image)?;
            let path = match path {
                Some(PathArg::Native) => VisualPath::Native,
                Some(PathArg::Adapter) => VisualPath::Adapter,
                None => understanding_path(&ck),
            };
            let a = answer_question(&model, &ck.store, &ck.codec, &img, &q, path)?;
            println!("{}", detokenize(&a));
        }
        Command::Eval { ckpt, suite, n, seed, temp, out, per_prompt } => {
            let (model, ck) = load(&ckpt)?;
            let seed = seed.unwrap_or(ck.config.eval.seed);
            let temp = temp.unwrap_or(ck.config.eval.temperature);
            let mut table = String::from("suite,path,metric,value,n\n");
            if suite != Suite::Und {
                let opts = generation_opts(&ck)?;
                let label = if opts.skips { "fused" } else { "decoupled" };
                let g = evaluate_generation(&model, &ck.store, &ck.codec, opts, n, seed, temp)?;
                for (m, v) in [
                    ("shape_acc", g.shape_acc),
                    ("color_acc", g.color_acc),
                    ("position_acc", g.position_acc),
                    ("mean_acc", g.mean()),
                ] {
                    table.push_str(&format!("gen,{label},{m},{v},{n}\n"));
                }
                if let Some(p) = per_prompt {
                    let mut s = String::from("prompt,shape,color,position,detected\n");
                    for (i, o) in g.outcomes.iter().enumerate() {
                        s.push_str(&format!("{i},{},{},{},{}\n", o.shape as u8, o.color as u8, o.position as u8, o.detected as u8));
                    }
                    write_file(&p, s.as_bytes())?;
                }
            }
            if suite != Suite::Gen {
                let corpus = Corpus::from_config(&ck.config.data)?;
                let held = &corpus.heldout[..n.min(corpus.heldout.len())];
                let mut paths = vec![("native", VisualPath::Native)];
                if ck.has_stage(2) {
                    paths.push(("adapter", VisualPath::Adapter));
                }
                for (label, p) in paths {
                    let s = evaluate_understanding(&model, &ck.store, held, p, seed)?;
                    for (m, v) in [("caption_acc", s.caption_acc), ("qa_acc", s.qa_acc), ("score", s.score)] {
                        table.push_str(&format!("und,{label},{m},{v},{}\n", held.len()));
                    }
                }
            }
            match out {
                Some(p) => write_file(&p, table.as_bytes())?,
                None => print!("{table}"),
            }
        }
        Command::Bench { ckpt, turns, images, mode, seed, out } => {
            let (model, ck) = load(&ckpt)?;
            let modes = match mode {
                ModeArg::Cached => vec![BenchMode::Cached],
                ModeArg::Reencode => vec![BenchMode::Reencode],
                ModeArg::Both => vec![BenchMode::Cached, BenchMode::Reencode],
            };
            let w = Workload { turns, images };
            let reports = modes
                .into_iter()
                .map(|m| bench_decode(&model, &ck.store, &ck.codec, w, m, seed, ck.config.eval.temperature))
                .collect::<Result<Vec<_>>>()?;
            let (csv, summary) = emit_report(&reports)?;
            print!("{summary}");
            match out {
                Some(p) => write_file(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Analyze { ckpt, prompts, seed, out } => {
            let (model, ck) = load(&ckpt)?;
            let ps = analysis_prompts(prompts, seed)?;
            let (vis, txt) = skip_contributions(&model, &ck.store, &ps, seed, ck.config.eval.temperature)?;
            for (name, st) in [("skip_vis.csv", &vis), ("skip_txt.csv", &txt)] {
                let mut buf = Vec::new();
                summarize(st, &mut buf)?;
                write_file(&out.join(name), &buf)?;
            }
            let mut stdout = std::io::stdout();
            let _ = writeln!(
                stdout,
                "vis: mean r {:.4} mean s {:.4} ({} positions)\ntxt: mean r {:.4} mean s {:.4} ({} positions)",
                vis.mean_r(),
                vis.mean_s(),
                vis.records.len(),
                txt.mean_r(),
                txt.mean_s(),
                txt.records.len()
            );
        }
    }
    Ok(())
}
