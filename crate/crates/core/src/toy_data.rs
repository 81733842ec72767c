//! Deterministic toy scenes with paired web-style and synthetic captions,
//! plus JSONL ingestion.
//!
//! A scene holds one to three coloured shapes on a plain background. The
//! synthetic caption spends one sentence per fact (count, each object's
//! position, sizes, background); the web caption is a single short phrase
//! naming one attribute, corrupted with probability `noise_rate`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClipsError, Result};

/// Every word the scene grammar can emit, in vocabulary order.
pub const GRAMMAR_WORDS: &[&str] = &[
    ".", ",", "a", "the", "there", "is", "are", "in", "at", "on", "of", "and", "with", "image", "photo", "picture",
    "object", "shape", "shapes", "background", "one", "two", "three", "small", "large", "top", "bottom", "left",
    "right", "center", "circle", "square", "triangle", "cross", "red", "green", "blue", "yellow", "purple", "orange",
    "black", "gray", "white", "brown",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [140, 60, 190],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    Gray,
    White,
    Brown,
}

impl Background {
    pub const ALL: [Background; 4] = [Background::Black, Background::Gray, Background::White, Background::Brown];

    pub fn word(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::Gray => "gray",
            Background::White => "white",
            Background::Brown => "brown",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Background::Black => [20, 20, 20],
            Background::Gray => [128, 128, 128],
            Background::White => [240, 240, 240],
            Background::Brown => [120, 80, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    fn radius_fraction(self) -> f32 {
        match self {
            Size::Small => 0.09,
            Size::Large => 0.14,
        }
    }
}

/// One shape in a 3×3 grid cell (`cell = row * 3 + col`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: u8,
    /// Sub-cell offset of the centre in base-image pixels.
    pub jitter: (i8, i8),
}

const CELL_NAMES: [&str; 9] =
    ["top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"];

impl SceneObject {
    pub fn position_words(&self) -> &'static str {
        CELL_NAMES[self.cell as usize]
    }
}

/// Generator ground truth for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

fn count_word(n: usize) -> &'static str {
    ["zero", "one", "two", "three"][n.min(3)]
}

impl SceneSpec {
    /// Renders the scene at `size × size` pixels using 4× supersampling.
    pub fn render(&self, size: u32) -> RgbImage {
        let bg = self.background.rgb();
        let mut img = RgbImage::from_pixel(size, size, Rgb(bg));
        let s = size as f32;
        let base = BASE_IMAGE_SIZE as f32;
        let cell = s / 3.0;
        for obj in &self.objects {
            let (row, col) = ((obj.cell / 3) as f32, (obj.cell % 3) as f32);
            let cx = (col + 0.5) * cell + obj.jitter.0 as f32 * s / base;
            let cy = (row + 0.5) * cell + obj.jitter.1 as f32 * s / base;
            let r = obj.size.radius_fraction() * s;
            let fg = obj.color.rgb();
            let x0 = ((cx - r - 1.0).floor().max(0.0)) as u32;
            let x1 = ((cx + r + 1.0).ceil().min(s - 1.0)) as u32;
            let y0 = ((cy - r - 1.0).floor().max(0.0)) as u32;
            let y1 = ((cy + r + 1.0).ceil().min(s - 1.0)) as u32;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let mut hits = 0u32;
                    for sy in 0..4 {
                        for sx in 0..4 {
                            let px = x as f32 + (sx as f32 + 0.5) / 4.0;
                            let py = y as f32 + (sy as f32 + 0.5) / 4.0;
                            if obj.shape.covers(px - cx, py - cy, r) {
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let p = img.get_pixel_mut(x, y);
                        let a = hits as f32 / 16.0;
                        for c in 0..3 {
                            p.0[c] = (fg[c] as f32 * a + p.0[c] as f32 * (1.0 - a)).round() as u8;
                        }
                    }
                }
            }
        }
        img
    }

    /// One sentence per fact: count, each object's placement, optional sizes, background.
    pub fn synthetic_sentences(&self, with_size: &[bool], alt_phrasing: &[bool]) -> Vec<String> {
        let n = self.objects.len();
        let mut s = Vec::new();
        s.push(if n == 1 {
            "there is one shape in the image.".to_string()
        } else {
            format!("there are {} shapes in the image.", count_word(n))
        });
        for (i, o) in self.objects.iter().enumerate() {
            let (c, sh, pos) = (o.color.word(), o.shape.word(), o.position_words());
            s.push(if alt_phrasing.get(i).copied().unwrap_or(false) {
                format!("there is a {c} {sh} at the {pos}.")
            } else {
                format!("a {c} {sh} is at the {pos}.")
            });
        }
        for (i, o) in self.objects.iter().enumerate() {
            if with_size.get(i).copied().unwrap_or(false) {
                s.push(format!("the {} {} is {}.", o.color.word(), o.shape.word(), o.size.word()));
            }
        }
        s.push(format!("the background is {}.", self.background.word()));
        s
    }

    fn object_list(&self) -> String {
        let parts: Vec<String> = self.objects.iter().map(|o| format!("a {} {}", o.color.word(), o.shape.word())).collect();
        match parts.len() {
            0 => String::new(),
            1 => parts[0].clone(),
            n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
        }
    }

    /// Short single-sentence descriptions used as retrieval ground truth.
    pub fn reference_captions(&self) -> Vec<String> {
        let list = self.object_list();
        let bg = self.background.word();
        vec![format!("{list} on a {bg} background."), format!("a {bg} picture with {list}.")]
    }

    /// Whether a web caption produced by [`web_caption`] is true of the scene.
    pub fn entails_web_caption(&self, caption: &str) -> bool {
        let words: Vec<&str> = caption.trim_end_matches('.').split_whitespace().collect();
        let colors: Vec<&str> = Color::ALL.iter().map(|c| c.word()).filter(|w| words.contains(w)).collect();
        let shapes: Vec<&str> = Shape::ALL.iter().map(|s| s.word()).filter(|w| words.contains(w)).collect();
        let bgs: Vec<&str> = Background::ALL.iter().map(|b| b.word()).filter(|w| words.contains(w)).collect();
        let obj_ok = self.objects.iter().any(|o| {
            colors.iter().all(|c| *c == o.color.word()) && shapes.iter().all(|s| *s == o.shape.word())
        });
        let bg_ok = bgs.iter().all(|b| *b == self.background.word());
        obj_ok && bg_ok
    }
}

/// Where a record's pixels come from; decoded on demand.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Pixels(RgbImage),
    File(PathBuf),
    Encoded(Vec<u8>),
}

impl ImageSource {
    pub fn load(&self) -> Result<RgbImage> {
        Ok(match self {
            ImageSource::Pixels(img) => img.clone(),
            ImageSource::File(p) => image::open(p)?.to_rgb8(),
            ImageSource::Encoded(bytes) => image::load_from_memory(bytes)?.to_rgb8(),
        })
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub image: ImageSource,
    pub web_caption: String,
    pub synthetic_caption: String,
    /// Clean short captions for retrieval evaluation; empty for external data.
    pub eval_captions: Vec<String>,
    pub scene: Option<SceneSpec>,
}

impl CaptionRecord {
    /// Retrieval texts: the clean captions when present, else the web caption.
    pub fn retrieval_texts(&self) -> Vec<String> {
        if self.eval_captions.is_empty() {
            vec![self.web_caption.clone()]
        } else {
            self.eval_captions.clone()
        }
    }
}

pub const BASE_IMAGE_SIZE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub noise_rate: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Lower bound on synthetic caption sentences (at least 3).
    pub min_sentences: usize,
    pub image_size: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { seed: 0, noise_rate: 0.3, min_objects: 1, max_objects: 3, min_sentences: 3, image_size: BASE_IMAGE_SIZE }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(ClipsError::invalid(format!("noise rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return Err(ClipsError::invalid("object count range must satisfy 1 <= min <= max <= 3"));
        }
        if self.min_sentences > 2 + 2 * self.max_objects {
            return Err(ClipsError::invalid(format!(
                "at most {} sentences are possible with {} objects",
                2 + 2 * self.max_objects,
                self.max_objects
            )));
        }
        Ok(())
    }
}

/// Generates `n` records with the default grammar settings.
pub fn generate_toy_dataset(n: usize, seed: u64, noise_rate: f64) -> Result<Vec<CaptionRecord>> {
    generate_with(n, &GeneratorConfig { seed, noise_rate, ..GeneratorConfig::default() })
}

pub fn generate_with(n: usize, cfg: &GeneratorConfig) -> Result<Vec<CaptionRecord>> {
    cfg.validate()?;
    if n == 0 {
        return Err(ClipsError::invalid("dataset size must be at least 1"));
    }
    Ok((0..n).map(|i| generate_record(i, cfg)).collect())
}

fn generate_record(i: usize, cfg: &GeneratorConfig) -> CaptionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    // objects need at least 2 + 2n >= min_sentences
    let min_objects = cfg.min_objects.max(cfg.min_sentences.saturating_sub(2).div_ceil(2));
    let n_obj = rng.gen_range(min_objects..=cfg.max_objects);
    let mut cells: Vec<u8> = (0..9).collect();
    cells.shuffle(&mut rng);
    let objects: Vec<SceneObject> = cells[..n_obj]
        .iter()
        .map(|&cell| SceneObject {
            shape: *Shape::ALL.choose(&mut rng).unwrap(),
            color: *Color::ALL.choose(&mut rng).unwrap(),
            size: if rng.gen_bool(0.5) { Size::Small } else { Size::Large },
            cell,
            jitter: (rng.gen_range(-2..=2), rng.gen_range(-2..=2)),
        })
        .collect();
    let scene = SceneSpec { background: *Background::ALL.choose(&mut rng).unwrap(), objects };

    let mut with_size: Vec<bool> = (0..n_obj).map(|_| rng.gen_bool(0.5)).collect();
    let mut count = 2 + n_obj + with_size.iter().filter(|&&b| b).count();
    for flag in with_size.iter_mut() {
        if count >= cfg.min_sentences.max(3) {
            break;
        }
        if !*flag {
            *flag = true;
            count += 1;
        }
    }
    let alt: Vec<bool> = (0..n_obj).map(|_| rng.gen_bool(0.5)).collect();
    let synthetic_caption = scene.synthetic_sentences(&with_size, &alt).join(" ");
    let web_caption = web_caption(&scene, cfg.noise_rate, &mut rng);

    CaptionRecord {
        id: format!("{i:06}"),
        image: ImageSource::Pixels(scene.render(cfg.image_size)),
        web_caption,
        synthetic_caption,
        eval_captions: scene.reference_captions(),
        scene: Some(scene),
    }
}

/// One short phrase about a single object or the background.
pub fn web_caption<R: Rng + ?Sized>(scene: &SceneSpec, noise_rate: f64, rng: &mut R) -> String {
    let obj = *scene.objects.choose(rng).expect("scene has objects");
    let noisy = rng.gen_bool(noise_rate);
    let mut color = obj.color;
    let mut shape = obj.shape;
    let mut bg = scene.background;
    let template = rng.gen_range(0..4);
    if noisy {
        // corrupt an attribute the template mentions
        let corrupt_color = match template {
            0 => rng.gen_bool(0.5),
            2 => true,
            _ => false,
        };
        if corrupt_color {
            let others: Vec<Color> = Color::ALL.iter().copied().filter(|c| *c != obj.color).collect();
            color = *others.choose(rng).unwrap();
        } else if template == 1 && rng.gen_bool(0.5) {
            let others: Vec<Background> = Background::ALL.iter().copied().filter(|b| *b != bg).collect();
            bg = *others.choose(rng).unwrap();
        } else {
            let others: Vec<Shape> = Shape::ALL.iter().copied().filter(|s| *s != obj.shape).collect();
            shape = *others.choose(rng).unwrap();
        }
    }
    match template {
        0 => format!("a photo of a {} {}.", color.word(), shape.word()),
        1 => format!("a {} on a {} background.", shape.word(), bg.word()),
        2 => format!("a picture of a {} object.", color.word()),
        _ => format!("a {}.", shape.word()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    web_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    eval_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneSpec>,
}

/// Records parsed from a JSONL file plus the count rejected for missing fields.
#[derive(Debug, Default)]
pub struct LoadedRecords {
    pub records: Vec<CaptionRecord>,
    pub rejected: usize,
}

/// Reads a JSONL corpus. `image_path` is resolved relative to the file's directory.
pub fn load_records(path: &Path) -> Result<LoadedRecords> {
    let file = File::open(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = LoadedRecords::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| ClipsError::Data {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let image = match (&rec.image_path, &rec.image_b64) {
            (Some(p), _) => Some(ImageSource::File(dir.join(p))),
            (None, Some(b)) => match base64::engine::general_purpose::STANDARD.decode(b) {
                Ok(bytes) => Some(ImageSource::Encoded(bytes)),
                Err(e) => {
                    return Err(ClipsError::Data { path: path.to_path_buf(), line: lineno + 1, msg: e.to_string() })
                }
            },
            (None, None) => None,
        };
        match (image, rec.web_caption, rec.synthetic_caption) {
            (Some(image), Some(web), Some(syn)) if !web.trim().is_empty() && !syn.trim().is_empty() => {
                out.records.push(CaptionRecord {
                    id: rec.id.unwrap_or_else(|| format!("line{:06}", lineno + 1)),
                    image,
                    web_caption: web,
                    synthetic_caption: syn,
                    eval_captions: rec.eval_captions,
                    scene: rec.scene,
                })
            }
            _ => {
                log::warn!("{}:{}: record missing image or caption, skipped", path.display(), lineno + 1);
                out.rejected += 1;
            }
        }
    }
    Ok(out)
}

/// Writes `records.jsonl` and one PNG per record under `images/` in `dir`.
pub fn save_records(records: &[CaptionRecord], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let jsonl = dir.join("records.jsonl");
    let mut w = BufWriter::new(File::create(&jsonl)?);
    for r in records {
        let rel = format!("images/{}.png", r.id);
        r.image.load()?.save_with_format(dir.join(&rel), image::ImageFormat::Png)?;
        let jr = JsonRecord {
            id: Some(r.id.clone()),
            image_path: Some(rel),
            image_b64: None,
            web_caption: Some(r.web_caption.clone()),
            synthetic_caption: Some(r.synthetic_caption.clone()),
            eval_captions: r.eval_captions.clone(),
            scene: r.scene.clone(),
        };
        serde_json::to_writer(&mut w, &jr)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(jsonl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Vocab, UNK_ID};

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(100, 7, 0.3).unwrap();
        let b = generate_toy_dataset(100, 7, 0.3).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(100, 8, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clean_web_captions_are_entailed() {
        for r in generate_toy_dataset(300, 3, 0.0).unwrap() {
            assert!(r.scene.as_ref().unwrap().entails_web_caption(&r.web_caption), "{}", r.web_caption);
        }
    }

    #[test]
    fn full_noise_corrupts_every_caption() {
        for r in generate_toy_dataset(200, 3, 1.0).unwrap() {
            let scene = r.scene.as_ref().unwrap();
            // a corrupted single-object caption can still match another object
            if scene.objects.len() == 1 {
                assert!(!scene.entails_web_caption(&r.web_caption), "{}", r.web_caption);
            }
        }
    }

    #[test]
    fn sentence_counts_in_range() {
        let v = Vocab::toy();
        let recs = generate_toy_dataset(200, 1, 0.2).unwrap();
        let mut total = 0;
        for r in &recs {
            let n = v.split_sentences(&r.synthetic_caption).len();
            assert!((3..=8).contains(&n), "{n} sentences");
            total += n;
        }
        let mean = total as f64 / recs.len() as f64;
        assert!((3.0..=8.0).contains(&mean));
        let cfg = GeneratorConfig { seed: 2, min_sentences: 4, ..GeneratorConfig::default() };
        for r in generate_with(200, &cfg).unwrap() {
            assert!(v.split_sentences(&r.synthetic_caption).len() >= 4);
        }
    }

    #[test]
    fn grammar_is_closed_under_vocab() {
        let v = Vocab::toy();
        for r in generate_toy_dataset(200, 5, 0.5).unwrap() {
            let mut all = vec![r.web_caption.clone(), r.synthetic_caption.clone()];
            all.extend(r.eval_captions.clone());
            for t in all {
                assert!(!v.tokenize(&t).contains(&UNK_ID), "{t}");
            }
        }
    }

    #[test]
    fn rendering_draws_objects() {
        let r = &generate_toy_dataset(1, 0, 0.0).unwrap()[0];
        let img = r.image.load().unwrap();
        assert_eq!(img.dimensions(), (BASE_IMAGE_SIZE, BASE_IMAGE_SIZE));
        let bg = r.scene.as_ref().unwrap().background.rgb();
        assert!(img.pixels().any(|p| p.0 != bg));
    }

    #[test]
    fn bad_generator_settings_rejected() {
        assert!(generate_toy_dataset(10, 0, 1.5).is_err());
        assert!(generate_toy_dataset(0, 0, 0.1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_toy_dataset(12, 4, 0.3).unwrap();
        let path = save_records(&recs, dir.path()).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded.rejected, 0);
        assert_eq!(loaded.records.len(), recs.len());
        for (a, b) in recs.iter().zip(&loaded.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.web_caption, b.web_caption);
            assert_eq!(a.synthetic_caption, b.synthetic_caption);
            assert_eq!(a.eval_captions, b.eval_captions);
            assert_eq!(a.scene, b.scene);
            assert_eq!(a.image.load().unwrap(), b.image.load().unwrap());
        }
    }

    #[test]
    fn jsonl_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "").unwrap();
        let l = load_records(&p).unwrap();
        assert!(l.records.is_empty());
        assert_eq!(l.rejected, 0);

        let mut png = Vec::new();
        RgbImage::new(4, 4).write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png).unwrap();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        let good = format!(r#"{{"image_b64":"{b64}","web_caption":"a circle.","synthetic_caption":"a red circle."}}"#);
        let missing = format!(r#"{{"image_b64":"{b64}","web_caption":"a circle."}}"#);
        fs::write(&p, format!("{good}\n{missing}\n")).unwrap();
        let l = load_records(&p).unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.rejected, 1);
        assert_eq!(l.records[0].image.load().unwrap().dimensions(), (4, 4));

        fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match load_records(&p) {
            Err(ClipsError::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
