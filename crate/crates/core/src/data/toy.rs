//! Deterministic toy datasets.
//!
//! Text comes from a small template grammar; images are flat-colored shapes on
//! a plain background with captions that name the colors, shape, size and
//! position. Everything is a pure function of the seed.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::encode_ppm;
use super::{write_atomic, word_count};
use crate::error::Result;

const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 220, 50]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 50, 170]),
];
const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
const NOUNS: [(&str, &str); 8] = [
    ("cat", "cats"),
    ("dog", "dogs"),
    ("bird", "birds"),
    ("child", "children"),
    ("farmer", "farmers"),
    ("teacher", "teachers"),
    ("fox", "foxes"),
    ("horse", "horses"),
];
const VERBS: [(&str, &str); 7] = [
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("sings", "sing"),
    ("walks", "walk"),
    ("waits", "wait"),
    ("jumps", "jump"),
    ("plays", "play"),
];
const ADJS: [&str; 8] = ["small", "old", "happy", "quiet", "bright", "tired", "young", "clever"];
const ADVS: [&str; 5] = ["slowly", "quickly", "quietly", "often", "sometimes"];
const PLACES: [&str; 6] = [
    "near the river",
    "in the garden",
    "under the old tree",
    "across the wide field",
    "behind the red barn",
    "on the green hill",
];
const THINGS: [&str; 5] = ["ball", "book", "kite", "boat", "lamp"];

pub const CLASS_NAMES: [&str; 2] = ["animals", "pictures"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub text_words: usize,
    pub caption_images: usize,
    pub unlabeled_images: usize,
    pub instruction_images: usize,
    pub eval_pairs: usize,
    pub eval_matching: usize,
    pub eval_ranking: usize,
    pub classification: usize,
    /// Side of the written PPM files; they are resized on load.
    pub image_side: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            text_words: 10_000,
            caption_images: 240,
            unlabeled_images: 120,
            instruction_images: 120,
            eval_pairs: 120,
            eval_matching: 40,
            eval_ranking: 40,
            classification: 100,
            image_side: 16,
        }
    }
}

/// Paths written by [`write_toy_data`], relative to its directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLayout {
    pub text: PathBuf,
    pub captions: PathBuf,
    pub unlabeled: PathBuf,
    pub instructions: PathBuf,
    pub classification: PathBuf,
    pub suite: PathBuf,
}

impl Default for ToyLayout {
    fn default() -> Self {
        Self {
            text: "text.jsonl".into(),
            captions: "captions.tsv".into(),
            unlabeled: "unlabeled.txt".into(),
            instructions: "instructions.tsv".into(),
            classification: "classify.jsonl".into(),
            suite: "eval/suite.toml".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scene {
    pub background: usize,
    pub color: usize,
    pub shape: usize,
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R, side: usize) -> Self {
        let background = rng.gen_range(0..COLORS.len());
        let mut color = rng.gen_range(0..COLORS.len() - 1);
        if color >= background {
            color += 1;
        }
        let radius = rng.gen_range(side / 6..=side / 3).max(1);
        Self {
            background,
            color,
            shape: rng.gen_range(0..SHAPES.len()),
            cx: rng.gen_range(radius..side - radius),
            cy: rng.gen_range(radius..side - radius),
            radius,
        }
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as i64 - self.cx as i64;
        let dy = y as i64 - self.cy as i64;
        let r = self.radius as i64;
        match SHAPES[self.shape] {
            "circle" => dx * dx + dy * dy <= r * r,
            "square" => dx.abs() <= r && dy.abs() <= r,
            "triangle" => dy.abs() <= r && 2 * dx.abs() <= dy + r,
            _ => (dx.abs() <= r / 3 && dy.abs() <= r) || (dy.abs() <= r / 3 && dx.abs() <= r),
        }
    }

    pub fn render(&self, side: usize) -> Vec<u8> {
        let mut rgb = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                let c = if self.covers(x, y) { self.color } else { self.background };
                rgb.extend_from_slice(&COLORS[c].1);
            }
        }
        rgb
    }

    fn size_word(&self, side: usize) -> &'static str {
        if self.radius * 4 >= side {
            "large"
        } else {
            "small"
        }
    }

    fn position(&self, side: usize) -> String {
        let v = ["top", "middle", "bottom"][(self.cy * 3 / side).min(2)];
        let h = ["left", "center", "right"][(self.cx * 3 / side).min(2)];
        match (v, h) {
            ("middle", "center") => "center".into(),
            _ => format!("{v} {h}"),
        }
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn background_name(&self) -> &'static str {
        COLORS[self.background].0
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }

    pub fn concise(&self) -> String {
        format!("a {} {} on a {} background", self.color_name(), self.shape_name(), self.background_name())
    }

    pub fn detailed(&self, side: usize) -> String {
        format!(
            "a {} {} {} near the {} of a {} picture",
            self.size_word(side),
            self.color_name(),
            self.shape_name(),
            self.position(side),
            self.background_name()
        )
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or_default()
}

/// One sentence of the toy grammar, lower case, no final period.
fn sentence<R: Rng>(rng: &mut R) -> String {
    let (sg, pl) = NOUNS[rng.gen_range(0..NOUNS.len())];
    let (vs, vp) = VERBS[rng.gen_range(0..VERBS.len())];
    let adj = pick(rng, &ADJS);
    let adv = pick(rng, &ADVS);
    let place = pick(rng, &PLACES);
    match rng.gen_range(0..5) {
        0 => format!("the {adj} {sg} {vs} {adv} {place}"),
        1 => format!("every morning the {pl} {vp} {place} and then {} {adv}", VERBS[rng.gen_range(0..VERBS.len())].1),
        2 => {
            let thing = pick(rng, &THINGS);
            let color = COLORS[rng.gen_range(0..COLORS.len())].0;
            format!("the {sg} with the {color} {thing} {vs} {place}")
        }
        3 => {
            let color = COLORS[rng.gen_range(0..COLORS.len())].0;
            let bg = COLORS[rng.gen_range(0..COLORS.len())].0;
            let shape = pick(rng, &SHAPES);
            format!("the {adj} {sg} draws a {color} {shape} on a {bg} page {adv}")
        }
        _ => format!("two {adj} {pl} {vp} {adv} {place} while the sun goes down"),
    }
}

fn finish(s: &str) -> String {
    format!("{}.", capitalize(s))
}

pub fn text_documents(seed: u64, target_words: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut words = 0;
    while words < target_words {
        let n = rng.gen_range(3..=6);
        let doc = (0..n).map(|_| finish(&sentence(&mut rng))).collect::<Vec<_>>().join(" ");
        words += word_count(&doc);
        docs.push(doc);
    }
    docs
}

fn write_image(dir: &Path, rel: &str, scene: &Scene, side: usize) -> Result<()> {
    write_atomic(&dir.join(rel), &encode_ppm(side, side, &scene.render(side)))
}

/// Writes `n` random scenes as `prefix-NNNNN.ppm` under `dir/images` and a
/// manifest listing them; returns the manifest path.
pub fn write_unlabeled_images(dir: &Path, n: usize, side: usize, seed: u64, prefix: &str) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for i in 0..n {
        let rel = format!("images/{prefix}-{i:05}.ppm");
        write_image(dir, &rel, &Scene::random(&mut rng, side), side)?;
        manifest.push_str(&rel);
        manifest.push('\n');
    }
    let path = dir.join(format!("{prefix}.txt"));
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

fn instruction<R: Rng>(rng: &mut R, scene: &Scene) -> String {
    match rng.gen_range(0..4) {
        0 => format!("question: what color is the shape? answer: {}", scene.color_name()),
        1 => format!("question: what shape is in the picture? answer: {}", scene.shape_name()),
        2 => format!("question: what color is the background? answer: {}", scene.background_name()),
        _ => format!("question: describe the picture. answer: {}", scene.concise()),
    }
}

fn jsonl<S: Serialize>(rows: &[S]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect()
}

/// Generates the complete toy bundle under `dir`.
pub fn write_toy_data(dir: &Path, cfg: &ToyConfig) -> Result<ToyLayout> {
    let layout = ToyLayout::default();
    let side = cfg.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let docs: Vec<_> = text_documents(cfg.seed, cfg.text_words)
        .into_iter()
        .enumerate()
        .map(|(i, text)| serde_json::json!({"id": format!("text-{i:05}"), "text": text}))
        .collect();
    write_atomic(&dir.join(&layout.text), jsonl(&docs).as_bytes())?;

    let mut tsv = String::new();
    for i in 0..cfg.caption_images {
        let scene = Scene::random(&mut rng, side);
        let rel = format!("images/cap-{i:05}.ppm");
        write_image(dir, &rel, &scene, side)?;
        let (caption, source) = if i % 2 == 0 {
            (scene.detailed(side), "detailed")
        } else {
            (scene.concise(), "concise")
        };
        tsv.push_str(&format!("{rel}\t{caption}\t{source}\n"));
    }
    write_atomic(&dir.join(&layout.captions), tsv.as_bytes())?;

    write_unlabeled_images(dir, cfg.unlabeled_images, side, cfg.seed ^ 0x0A11, "unlabeled")?;

    let mut tsv = String::new();
    for i in 0..cfg.instruction_images {
        let scene = Scene::random(&mut rng, side);
        let rel = format!("images/ins-{i:05}.ppm");
        write_image(dir, &rel, &scene, side)?;
        tsv.push_str(&format!("{rel}\t{}\tinstruction\n", instruction(&mut rng, &scene)));
    }
    write_atomic(&dir.join(&layout.instructions), tsv.as_bytes())?;

    write_eval(dir, cfg, &mut rng)?;

    let rows: Vec<_> = (0..cfg.classification)
        .map(|i| {
            let label = i % 2;
            let text = if label == 0 {
                let (sg, _) = NOUNS[rng.gen_range(0..NOUNS.len())];
                let (vs, _) = VERBS[rng.gen_range(0..VERBS.len())];
                format!("the {} {sg} {vs} {}.", pick(&mut rng, &ADJS), pick(&mut rng, &PLACES))
            } else {
                let s = Scene::random(&mut rng, side);
                format!("{}.", capitalize(&s.detailed(side)))
            };
            serde_json::json!({"text": capitalize(&text), "label": label})
        })
        .collect();
    write_atomic(&dir.join(&layout.classification), jsonl(&rows).as_bytes())?;

    let pipeline = crate::pipeline::PipelineConfig::toy_defaults();
    write_atomic(
        &dir.join("pipeline.toml"),
        toml::to_string_pretty(&pipeline).expect("pipeline config serializes").as_bytes(),
    )?;
    Ok(layout)
}

fn write_eval<R: Rng>(dir: &Path, cfg: &ToyConfig, rng: &mut R) -> Result<()> {
    let side = cfg.image_side;
    let mut pairs = Vec::with_capacity(cfg.eval_pairs);
    for i in 0..cfg.eval_pairs {
        let (sg, pl) = NOUNS[rng.gen_range(0..NOUNS.len())];
        let (vs, vp) = VERBS[rng.gen_range(0..VERBS.len())];
        let adj = pick(rng, &ADJS);
        let place = pick(rng, &PLACES);
        let (good, bad, cat) = match i % 3 {
            0 => (
                format!("the {adj} {sg} {vs} {place}"),
                format!("the {adj} {sg} {vp} {place}"),
                "agreement-singular",
            ),
            1 => (
                format!("two {adj} {pl} {vp} {place}"),
                format!("two {adj} {pl} {vs} {place}"),
                "agreement-plural",
            ),
            _ => (
                format!("the {adj} {sg} {vs} {place}"),
                format!("{adj} the {sg} {vs} {place}"),
                "word-order",
            ),
        };
        pairs.push(serde_json::json!({"good": finish(&good), "bad": finish(&bad), "category": cat}));
    }
    write_atomic(&dir.join("eval/pairs.jsonl"), jsonl(&pairs).as_bytes())?;

    let mut items = Vec::with_capacity(cfg.eval_matching);
    for i in 0..cfg.eval_matching {
        let a = Scene::random(rng, side);
        let mut b = Scene::random(rng, side);
        while b.concise() == a.concise() {
            b = Scene::random(rng, side);
        }
        let (p0, p1) = (format!("images/match-{i:04}-0.ppm"), format!("images/match-{i:04}-1.ppm"));
        write_image(&dir.join("eval"), &p0, &a, side)?;
        write_image(&dir.join("eval"), &p1, &b, side)?;
        items.push(serde_json::json!({
            "id": format!("match-{i:04}"),
            "image0": p0, "image1": p1,
            "caption0": a.concise(), "caption1": b.concise(),
        }));
    }
    write_atomic(&dir.join("eval/matching.jsonl"), jsonl(&items).as_bytes())?;

    let mut items = Vec::with_capacity(cfg.eval_ranking);
    for i in 0..cfg.eval_ranking {
        let s = Scene::random(rng, side);
        let p = format!("images/rank-{i:04}.ppm");
        write_image(&dir.join("eval"), &p, &s, side)?;
        let mut candidates: Vec<&str> = COLORS.iter().map(|c| c.0).filter(|&c| c != s.color_name()).collect();
        candidates.shuffle(rng);
        candidates.truncate(3);
        let gold = rng.gen_range(0..=candidates.len());
        candidates.insert(gold, s.color_name());
        items.push(serde_json::json!({
            "id": format!("rank-{i:04}"),
            "image": p,
            "question": "question: what color is the shape? answer:",
            "candidates": candidates,
            "gold": gold,
        }));
    }
    write_atomic(&dir.join("eval/ranking.jsonl"), jsonl(&items).as_bytes())?;

    let suite = "[[task]]\nname = \"grammar\"\nkind = \"minimal-pairs\"\npath = \"pairs.jsonl\"\n\n\
                 [[task]]\nname = \"matching\"\nkind = \"matching\"\npath = \"matching.jsonl\"\n\n\
                 [[task]]\nname = \"color-qa\"\nkind = \"ranking\"\npath = \"ranking.jsonl\"\n";
    write_atomic(&dir.join("eval/suite.toml"), suite.as_bytes())
}
