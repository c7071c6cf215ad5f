//! Toy scenes, their renderer and classifier, and the linear patch codec
//! that maps 24×24 images to a 16×8 block of continuous latents.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IMAGE_SIZE: usize = 24;
pub const PATCH: usize = 6;
pub const GRID: usize = IMAGE_SIZE / PATCH;
pub const NUM_LATENTS: usize = GRID * GRID;
pub const LATENT_DIM: usize = 8;
pub const PATCH_LEN: usize = PATCH * PATCH * 3;
pub const MAX_OBJECTS: usize = 3;

/// Top-left pixel offset of the object footprint in each grid row/column.
/// Each offset keeps a footprint inside one 8-pixel cell and touching at
/// most one object per patch.
const CELL_OFFSET: [usize; 3] = [0, 9, 18];
const OBJECT_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    fn covers(self, x: usize, y: usize) -> bool {
        let cx = x as f64 + 0.5 - 3.0;
        let cy = y as f64 + 0.5 - 3.0;
        match self {
            // Outline only, so a square never looks like a filled circle.
            Shape::Square => cx.abs() > 1.9 || cy.abs() > 1.9,
            Shape::Circle => cx * cx + cy * cy < 9.0,
            Shape::Triangle => cx.abs() < (cy + 3.0) / 2.0 + 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyScene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl ToyScene {
    /// Builds a scene with objects sorted by cell. No validation.
    pub fn new(mut objects: Vec<SceneObject>, seed: u64) -> Self {
        objects.sort_by_key(|o| o.cell);
        ToyScene { objects, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidScene(format!(
                "scene has {} objects, expected 1 to {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        let mut seen = [false; 9];
        for o in &self.objects {
            if o.cell >= 9 {
                return Err(Error::InvalidScene(format!("cell {} is off the grid", o.cell)));
            }
            if std::mem::replace(&mut seen[o.cell], true) {
                return Err(Error::InvalidScene(format!("two objects share cell {}", o.cell)));
            }
        }
        Ok(())
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let k = rng.random_range(1..=MAX_OBJECTS);
        let cells = sample(rng, 9, k);
        let objects = cells
            .iter()
            .map(|cell| SceneObject {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: Color::ALL[rng.random_range(0..4)],
                cell,
            })
            .collect();
        ToyScene::new(objects, rng.random())
    }

    pub fn random_single<R: Rng>(rng: &mut R) -> Self {
        let o = SceneObject {
            shape: Shape::ALL[rng.random_range(0..3)],
            color: Color::ALL[rng.random_range(0..4)],
            cell: rng.random_range(0..9),
        };
        ToyScene::new(vec![o], rng.random())
    }

    /// Same objects regardless of seed.
    pub fn same_layout(&self, other: &ToyScene) -> bool {
        self.objects == other.objects
    }

    /// Per-object brightness in `[0.75, 1]`, derived from the seed.
    fn intensities(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.objects.iter().map(|_| rng.random_range(0.75f32..=1.0)).collect()
    }
}

/// `24×24×3` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pixels: Vec<f32>,
}

impl ToyImage {
    pub fn black() -> Self {
        ToyImage { pixels: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3] }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE * 3 {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}",
                pixels.len(),
                IMAGE_SIZE * IMAGE_SIZE * 3
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("pixel outside [0, 1]".into()));
        }
        Ok(ToyImage { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * IMAGE_SIZE + x) * 3 + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * IMAGE_SIZE + x) * 3 + c] = v;
    }

    pub fn mse(&self, other: &ToyImage) -> f64 {
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        s / self.pixels.len() as f64
    }

    /// Flattened `6×6×3` patch at grid position `n` (raster order).
    fn patch(&self, n: usize) -> [f64; PATCH_LEN] {
        let (py, px) = (n / GRID, n % GRID);
        let mut out = [0.0; PATCH_LEN];
        for y in 0..PATCH {
            for x in 0..PATCH {
                for c in 0..3 {
                    out[(y * PATCH + x) * 3 + c] = self.get(py * PATCH + y, px * PATCH + x, c) as f64;
                }
            }
        }
        out
    }

    /// Object footprint of a grid cell, flattened like a patch.
    fn footprint(&self, cell: usize) -> [f32; PATCH_LEN] {
        let (oy, ox) = (CELL_OFFSET[cell / 3], CELL_OFFSET[cell % 3]);
        let mut out = [0.0; PATCH_LEN];
        for y in 0..OBJECT_SIZE {
            for x in 0..OBJECT_SIZE {
                for c in 0..3 {
                    out[(y * OBJECT_SIZE + x) * 3 + c] = self.get(oy + y, ox + x, c);
                }
            }
        }
        out
    }
}

pub fn render_scene(scene: &ToyScene) -> Result<ToyImage> {
    scene.validate()?;
    let mut img = ToyImage::black();
    for (o, k) in scene.objects.iter().zip(scene.intensities()) {
        let (oy, ox) = (CELL_OFFSET[o.cell / 3], CELL_OFFSET[o.cell % 3]);
        let rgb = o.color.rgb();
        for y in 0..OBJECT_SIZE {
            for x in 0..OBJECT_SIZE {
                if o.shape.covers(x, y) {
                    for (c, v) in rgb.iter().enumerate() {
                        img.set(oy + y, ox + x, c, v * k);
                    }
                }
            }
        }
    }
    Ok(img)
}

fn template(shape: Shape, color: Color) -> [f32; PATCH_LEN] {
    let mut t = [0.0; PATCH_LEN];
    let rgb = color.rgb();
    for y in 0..OBJECT_SIZE {
        for x in 0..OBJECT_SIZE {
            if shape.covers(x, y) {
                t[(y * OBJECT_SIZE + x) * 3..][..3].copy_from_slice(&rgb);
            }
        }
    }
    t
}

/// A detected object with its fitted brightness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub object: SceneObject,
    pub amplitude: f32,
}

/// Minimum fitted brightness for a cell to count as occupied.
const MIN_AMPLITUDE: f32 = 0.4;

/// Per-cell least-squares fit against every (shape, color) template.
pub fn detect(image: &ToyImage) -> Vec<Detection> {
    let templates: Vec<(Shape, Color, [f32; PATCH_LEN], f32)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .map(|(s, c)| {
            let t = template(s, c);
            let tt = t.iter().map(|v| v * v).sum();
            (s, c, t, tt)
        })
        .collect();
    let mut out = Vec::new();
    for cell in 0..9 {
        let b = image.footprint(cell);
        let mut best_res: f32 = b.iter().map(|v| v * v).sum();
        let mut best = None;
        for (s, c, t, tt) in &templates {
            let bt: f32 = b.iter().zip(t).map(|(x, y)| x * y).sum();
            let a = (bt / tt).max(0.0);
            let res: f32 = b.iter().zip(t).map(|(x, y)| (x - a * y).powi(2)).sum();
            if res < best_res {
                best_res = res;
                best = Some((*s, *c, a));
            }
        }
        if let Some((shape, color, a)) = best {
            if a > MIN_AMPLITUDE {
                out.push(Detection { object: SceneObject { shape, color, cell }, amplitude: a });
            }
        }
    }
    out
}

/// Scene estimate from an image; the seed is always 0.
pub fn classify(image: &ToyImage) -> ToyScene {
    ToyScene::new(detect(image).into_iter().map(|d| d.object).collect(), 0)
}

/// Linear per-patch-position codec fit by PCA.
#[derive(Debug)]
pub struct LatentCodec {
    /// `16 × 108` per-position patch mean.
    mean: Matrix<f32>,
    /// `(16·8) × 108`: row `n·8 + k` is component `k` of position `n`.
    basis: Matrix<f32>,
    /// `16 × 8` per-position, per-channel standard deviation.
    scale: Matrix<f32>,
    encode_calls: AtomicUsize,
}

impl Clone for LatentCodec {
    fn clone(&self) -> Self {
        LatentCodec {
            mean: self.mean.clone(),
            basis: self.basis.clone(),
            scale: self.scale.clone(),
            encode_calls: AtomicUsize::new(self.encode_calls()),
        }
    }
}

impl PartialEq for LatentCodec {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.basis == other.basis && self.scale == other.scale
    }
}

impl LatentCodec {
    /// Fits on `count` random scenes drawn from `seed`.
    pub fn fit_random(count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Vec<ToyScene> = (0..count).map(|_| ToyScene::random(&mut rng)).collect();
        Self::fit(&scenes)
    }

    pub fn fit(scenes: &[ToyScene]) -> Result<Self> {
        if scenes.len() < 2 {
            return Err(Error::Config("codec fit needs at least two scenes".into()));
        }
        let mut sums = vec![[0.0f64; PATCH_LEN]; NUM_LATENTS];
        let mut grams = vec![DMatrix::<f64>::zeros(PATCH_LEN, PATCH_LEN); NUM_LATENTS];
        for s in scenes {
            let img = render_scene(s)?;
            for n in 0..NUM_LATENTS {
                let p = img.patch(n);
                for (a, v) in sums[n].iter_mut().zip(&p) {
                    *a += v;
                }
                let g = &mut grams[n];
                for (i, &pi) in p.iter().enumerate() {
                    if pi == 0.0 {
                        continue;
                    }
                    for (j, &pj) in p.iter().enumerate() {
                        g[(i, j)] += pi * pj;
                    }
                }
            }
        }
        let count = scenes.len() as f64;
        let mut mean = Matrix::zeros(NUM_LATENTS, PATCH_LEN);
        let mut basis = Matrix::zeros(NUM_LATENTS * LATENT_DIM, PATCH_LEN);
        let mut scale = Matrix::zeros(NUM_LATENTS, LATENT_DIM);
        for n in 0..NUM_LATENTS {
            let mu: Vec<f64> = sums[n].iter().map(|s| s / count).collect();
            let mut cov = grams[n].clone() / count;
            for i in 0..PATCH_LEN {
                for j in 0..PATCH_LEN {
                    cov[(i, j)] -= mu[i] * mu[j];
                }
            }
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..PATCH_LEN).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
            for (k, &col) in order.iter().take(LATENT_DIM).enumerate() {
                let v = eig.eigenvectors.column(col);
                // Deterministic sign: largest-magnitude entry positive.
                let pivot = (0..PATCH_LEN)
                    .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                    .unwrap_or(0);
                let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
                for j in 0..PATCH_LEN {
                    basis.set(n * LATENT_DIM + k, j, (sign * v[j]) as f32);
                }
                scale.set(n, k, eig.eigenvalues[col].max(1e-12).sqrt() as f32);
            }
            for (j, m) in mu.iter().enumerate() {
                mean.set(n, j, *m as f32);
            }
        }
        Ok(LatentCodec { mean, basis, scale, encode_calls: AtomicUsize::new(0) })
    }

    pub fn encode(&self, image: &ToyImage) -> Matrix<f32> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut z = Matrix::zeros(NUM_LATENTS, LATENT_DIM);
        for n in 0..NUM_LATENTS {
            let p = image.patch(n);
            let m = self.mean.row(n);
            for k in 0..LATENT_DIM {
                let w = self.basis.row(n * LATENT_DIM + k);
                let mut acc = 0.0f32;
                for j in 0..PATCH_LEN {
                    acc += w[j] * (p[j] as f32 - m[j]);
                }
                z.set(n, k, acc / self.scale.get(n, k));
            }
        }
        z
    }

    /// Encodes raw pixels, checking the image dimensions.
    pub fn encode_pixels(&self, pixels: &[f32], height: usize, width: usize) -> Result<Matrix<f32>> {
        if height != IMAGE_SIZE || width != IMAGE_SIZE {
            return Err(Error::Shape(format!("image is {height}x{width}, expected {IMAGE_SIZE}x{IMAGE_SIZE}")));
        }
        Ok(self.encode(&ToyImage::from_pixels(pixels.to_vec())?))
    }

    pub fn decode(&self, latents: &Matrix<f32>) -> Result<ToyImage> {
        if latents.shape() != (NUM_LATENTS, LATENT_DIM) {
            return Err(Error::Shape(format!(
                "latents are {:?}, expected ({NUM_LATENTS}, {LATENT_DIM})",
                latents.shape()
            )));
        }
        if !latents.is_finite() {
            return Err(Error::Numeric("non-finite latents".into()));
        }
        let mut img = ToyImage::black();
        for n in 0..NUM_LATENTS {
            let (py, px) = (n / GRID, n % GRID);
            let mut p: Vec<f32> = self.mean.row(n).to_vec();
            for k in 0..LATENT_DIM {
                let c = latents.get(n, k) * self.scale.get(n, k);
                for (v, w) in p.iter_mut().zip(self.basis.row(n * LATENT_DIM + k)) {
                    *v += c * w;
                }
            }
            for y in 0..PATCH {
                for x in 0..PATCH {
                    for ch in 0..3 {
                        let v = p[(y * PATCH + x) * 3 + ch].clamp(0.0, 1.0);
                        img.set(py * PATCH + y, px * PATCH + x, ch, v);
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn tensors(&self) -> Vec<(String, Matrix<f32>)> {
        vec![
            ("codec.mean".into(), self.mean.clone()),
            ("codec.basis".into(), self.basis.clone()),
            ("codec.scale".into(), self.scale.clone()),
        ]
    }

    pub fn from_tensors(mut tensors: Vec<(String, Matrix<f32>)>) -> Result<Self> {
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix<f32>> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("codec tensor {name} missing")))?;
            let m = tensors.swap_remove(i).1;
            if m.shape() != shape {
                return Err(Error::Shape(format!("codec tensor {name} is {:?}", m.shape())));
            }
            Ok(m)
        };
        let mean = take("codec.mean", (NUM_LATENTS, PATCH_LEN))?;
        let basis = take("codec.basis", (NUM_LATENTS * LATENT_DIM, PATCH_LEN))?;
        let scale = take("codec.scale", (NUM_LATENTS, LATENT_DIM))?;
        Ok(LatentCodec { mean, basis, scale, encode_calls: AtomicUsize::new(0) })
    }
}
