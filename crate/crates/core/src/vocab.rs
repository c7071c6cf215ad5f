//! The fixed 48-word vocabulary, caption template and scene questions.

use crate::codec::{Color, Shape, ToyScene};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const END_IMG: usize = 4;

const WORDS: [&str; 48] = [
    "<pad>", "<bos>", "<eos>", "<img>", "</img>", //
    "a", "at", "and", //
    "red", "green", "blue", "yellow", //
    "square", "circle", "triangle", //
    "top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom", "bottom-right", //
    "what", "color", "shape", "is", "the", "where", "how", "many", "objects", "are", "there", "?", //
    "one", "two", "three", "describe", "image", ":", "yes", "no", "nothing", "of", "object", "draw",
];

pub const VOCAB_SIZE: usize = WORDS.len();

const COLOR_BASE: usize = 8;
const SHAPE_BASE: usize = 12;
const CELL_BASE: usize = 15;

pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word)
}

fn must(word: &str) -> usize {
    id(word).expect("word is in the fixed vocabulary")
}

/// Whitespace tokenization; every word must be in the vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| id(w).ok_or_else(|| Error::Tokenization(format!("unknown word {w:?}"))))
        .collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| word(i).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn color_token(c: Color) -> usize {
    COLOR_BASE + c as usize
}

pub fn shape_token(s: Shape) -> usize {
    SHAPE_BASE + s as usize
}

pub fn cell_token(cell: usize) -> usize {
    CELL_BASE + cell
}

pub fn color_of(token: usize) -> Option<Color> {
    Color::ALL.get(token.wrapping_sub(COLOR_BASE)).copied()
}

pub fn shape_of(token: usize) -> Option<Shape> {
    Shape::ALL.get(token.wrapping_sub(SHAPE_BASE)).copied()
}

pub fn cell_of(token: usize) -> Option<usize> {
    let c = token.wrapping_sub(CELL_BASE);
    (c < 9).then_some(c)
}

fn count_token(n: usize) -> usize {
    must(["one", "two", "three"][n - 1])
}

/// `a {color} {shape} at {position}`, clauses joined by `and` in cell order.
pub fn caption(scene: &ToyScene) -> Result<Vec<usize>> {
    scene.validate()?;
    let mut out = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push(must("and"));
        }
        out.extend([must("a"), color_token(o.color), shape_token(o.shape), must("at"), cell_token(o.cell)]);
    }
    Ok(out)
}

/// Parses a caption back into `(shape, color, cell)` triples; `None` if the
/// tokens do not follow the template.
pub fn parse_caption(tokens: &[usize]) -> Option<Vec<(Shape, Color, usize)>> {
    let mut out = Vec::new();
    let mut rest = tokens;
    loop {
        let [a, c, s, at, p, tail @ ..] = rest else { return None };
        if *a != must("a") || *at != must("at") {
            return None;
        }
        out.push((shape_of(*s)?, color_of(*c)?, cell_of(*p)?));
        match tail {
            [] => return Some(out),
            [and, more @ ..] if *and == must("and") => rest = more,
            _ => return None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub tokens: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Every template question answerable about `scene`.
pub fn questions(scene: &ToyScene) -> Vec<Question> {
    let mut out = Vec::new();
    let q = |words: &[&str], extra: &[usize]| -> Vec<usize> {
        let mut t: Vec<usize> = words.iter().map(|w| must(w)).collect();
        t.extend_from_slice(extra);
        t
    };
    for o in &scene.objects {
        let unique = scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1;
        if unique {
            let mut tokens = q(&["what", "color", "is", "the"], &[shape_token(o.shape)]);
            tokens.push(must("?"));
            out.push(Question { tokens, answer: vec![color_token(o.color)] });
        }
        let mut tokens = q(&["where", "is", "the"], &[color_token(o.color), shape_token(o.shape)]);
        tokens.push(must("?"));
        out.push(Question { tokens, answer: vec![cell_token(o.cell)] });
    }
    for cell in 0..9 {
        let mut tokens = q(&["what", "shape", "is", "at"], &[cell_token(cell)]);
        tokens.push(must("?"));
        let answer = match scene.objects.iter().find(|o| o.cell == cell) {
            Some(o) => shape_token(o.shape),
            None => must("nothing"),
        };
        out.push(Question { tokens, answer: vec![answer] });
    }
    out.push(Question {
        tokens: q(&["how", "many", "objects", "are", "there", "?"], &[]),
        answer: vec![count_token(scene.objects.len())],
    });
    out
}
