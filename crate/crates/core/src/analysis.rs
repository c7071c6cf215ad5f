//! Skip-connection diagnostics: how much of each fused vector comes from
//! the other stream (`r`) and how aligned it is with the base vector (`s`).

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::ToyScene;
use crate::dataset::t2i_prompt;
use crate::error::{Error, Result};
use crate::inference::prompt_rng;
use crate::params::ParamStore;
use crate::pretzel::{Element, ForwardOpts, GenerateOpts, Pretzel, TextSampling};
use crate::tensor::Matrix;
use crate::vocab::caption;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Vis,
    Txt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SkipRecord {
    pub position: usize,
    pub role: Role,
    pub r: f64,
    pub s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkipStats {
    pub records: Vec<SkipRecord>,
    /// Positions where both vectors had zero norm.
    pub skipped: usize,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt()
}

/// Contribution ratio `‖proj‖ / (‖base‖ + ‖proj‖)` and cosine between `base`
/// and `proj`. `None` when both are zero; the cosine is 0 when only one is.
pub fn ratio_and_cosine(base: &[f32], proj: &[f32]) -> Option<(f64, f64)> {
    let (nb, np) = (norm(base), norm(proj));
    if nb + np == 0.0 {
        return None;
    }
    let r = np / (nb + np);
    let s = if nb == 0.0 || np == 0.0 {
        0.0
    } else {
        let dot: f64 = base.iter().zip(proj).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        (dot / (nb * np)).clamp(-1.0, 1.0)
    };
    Some((r, s))
}

impl SkipStats {
    pub fn push(&mut self, position: usize, role: Role, base: &[f32], proj: &[f32]) {
        match ratio_and_cosine(base, proj) {
            Some((r, s)) => self.records.push(SkipRecord { position, role, r, s }),
            None => self.skipped += 1,
        }
    }

    pub fn mean_r(&self) -> f64 {
        self.records.iter().map(|x| x.r).sum::<f64>() / self.records.len().max(1) as f64
    }

    pub fn mean_s(&self) -> f64 {
        self.records.iter().map(|x| x.s).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Counts of `r` over equal-width bins of `[0, 1]`.
    pub fn histogram(&self) -> [usize; HISTOGRAM_BINS] {
        let mut h = [0; HISTOGRAM_BINS];
        for x in &self.records {
            h[((x.r * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        h
    }
}

/// `row · W` for a single row.
fn project(row: &[f32], w: &Matrix<f32>) -> Vec<f32> {
    Matrix { rows: 1, cols: row.len(), data: row.to_vec() }.matmul(w).data
}

/// Caption prompts drawn from the scene grammar.
pub fn analysis_prompts(n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| caption(&ToyScene::random(&mut rng))).collect()
}

/// Generates an image for every prompt with the fused model, re-runs the
/// emitted sequence, and measures both skip connections at every position.
pub fn skip_contributions(
    model: &Pretzel,
    store: &ParamStore<f32>,
    prompts: &[Vec<usize>],
    seed: u64,
    tau: f64,
) -> Result<(SkipStats, SkipStats)> {
    let (w_vlm, w_d) = model.skip_ids();
    let (w_vlm, w_d) = (store.get(w_vlm), store.get(w_d));
    let opts = ForwardOpts::FUSED;
    let gen = GenerateOpts { max_tokens: 0, tau, text: TextSampling::Greedy, stop_after_images: Some(1) };
    let (mut vis, mut txt) = (SkipStats::default(), SkipStats::default());
    for (i, p) in prompts.iter().enumerate() {
        let mut rng = prompt_rng(seed, i);
        let g = model.generate_interleaved(store, &t2i_prompt(p), opts, gen, &mut rng)?;
        let out = model.forward_full(store, &g.seq, opts, Some(&g.u))?;
        let y_d = out.y_d.as_ref().ok_or_else(|| Error::State("flow stream did not run".into()))?;
        let mut k = 0;
        for (t, e) in g.seq.elements.iter().enumerate() {
            let y = out.y_vlm.row(t);
            match e {
                Element::Visual(_) => {
                    vis.push(t, Role::Vis, g.u.row(k), &project(y, w_vlm));
                    k += 1;
                }
                Element::Text(_) => txt.push(t, Role::Txt, y, &project(y_d.row(t), w_d)),
            }
        }
    }
    Ok((vis, txt))
}

/// Per-position CSV followed by one summary row (`position = mean`); an
/// empty input produces only the header.
pub fn summarize<W: Write>(stats: &SkipStats, w: W) -> Result<()> {
    let path = "skip_stats.csv";
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let fmt_err = |e: csv::Error| Error::format(path, e.to_string());
    wr.write_record(["position", "role", "r", "s"]).map_err(fmt_err)?;
    for x in &stats.records {
        let role = match x.role {
            Role::Vis => "vis",
            Role::Txt => "txt",
        };
        wr.write_record([x.position.to_string(), role.into(), x.r.to_string(), x.s.to_string()])
            .map_err(fmt_err)?;
    }
    if let Some(first) = stats.records.first() {
        let role = match first.role {
            Role::Vis => "vis",
            Role::Txt => "txt",
        };
        wr.write_record(["mean".into(), role.into(), stats.mean_r().to_string(), stats.mean_s().to_string()])
            .map_err(fmt_err)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}
