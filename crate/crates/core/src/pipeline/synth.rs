//! Toy dataset: colored geometric shapes over textured, cluttered
//! backgrounds, with ground truth, jittered proposals and captions.

use std::f32::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    write_json, write_jsonl, Caption, DatasetManifest, VocabEntry, Vocabulary, CAPTIONS_FILE,
    EMBEDDINGS_DIR, EMBEDDING_TENSOR, GT_DIR, IMAGES_DIR, MANIFEST_FILE, PROPOSALS_DIR, VOCAB_FILE,
};
use crate::encoder::text::{default_templates, embed_text};
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, seeded, Rng};
use crate::numerics::{Bundle, Tensor};
use crate::pipeline::map::SegmentationMap;
use crate::preprocess::image_io::save_png_rgb;
use crate::preprocess::{rle, BinaryMask, ImageTensor, MaskedCrop};
use crate::tuning::TrainingPair;

/// Shape nouns, in vocabulary order.
pub const SHAPES: [&str; 10] = [
    "circle", "square", "triangle", "diamond", "cross", "ring", "star", "hexagon", "heart", "crescent",
];

/// The first `NUM_SEEN` shapes are marked seen in the vocabulary.
pub const NUM_SEEN: usize = 7;

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("white", [0.97, 0.97, 0.97]),
    ("pink", [0.98, 0.55, 0.75]),
    ("cyan", [0.1, 0.9, 0.9]),
];

/// Background surfaces and their base colors.
pub const SURFACES: [(&str, [f32; 3]); 5] = [
    ("wall", [0.75, 0.7, 0.6]),
    ("floor", [0.5, 0.35, 0.2]),
    ("grass", [0.3, 0.55, 0.2]),
    ("table", [0.6, 0.45, 0.3]),
    ("carpet", [0.55, 0.2, 0.25]),
];

/// Whether normalized point `(u, v)` lies inside shape `k`. The shape spans
/// roughly the unit disk; `v` points down.
pub fn shape_contains(k: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    match k {
        0 => r <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-0.9..=0.75).contains(&v) && u.abs() <= (v + 0.9) * 0.62,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        5 => (0.55..=1.0).contains(&r),
        6 => {
            let theta = v.atan2(u) + PI / 2.0;
            r <= 0.42 + 0.55 * (0.5 + 0.5 * (5.0 * theta).cos()).powf(2.0)
        }
        7 => v.abs() <= 0.85 && u.abs() * 0.85 + v.abs() * 0.5 <= 0.9,
        8 => {
            let (x, y) = (u * 1.15, -v * 1.15 + 0.25);
            let a = x * x + y * y - 0.6;
            a * a * a - x * x * y * y * y <= 0.0
        }
        9 => r <= 1.0 && ((u - 0.45).powi(2) + (v + 0.1).powi(2)).sqrt() > 0.75,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Maximum proposal perturbation in pixels; 0 gives exact GT masks.
    pub jitter: usize,
    pub captions_per_image: usize,
    /// Number of small unlabeled distractor blobs per image.
    pub clutter: usize,
    /// Dimension of the per-proposal embeddings; `None` writes none.
    pub embed_dim: Option<usize>,
    pub embed_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 16,
            side: 64,
            min_shapes: 2,
            max_shapes: 4,
            jitter: 1,
            captions_per_image: 5,
            clutter: 10,
            embed_dim: Some(32),
            embed_noise: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.count == 0 {
            return bad("count must be at least 1");
        }
        if self.side < 16 {
            return bad("side must be at least 16");
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > SHAPES.len() {
            return bad("need 1 <= min_shapes <= max_shapes <= 10");
        }
        if self.captions_per_image == 0 {
            return bad("captions per image must be at least 1");
        }
        if !(self.embed_noise >= 0.0) {
            return bad("embedding noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub class: usize,
    pub color: usize,
    pub row: f32,
    pub col: f32,
    pub radius: f32,
    pub angle: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: ImageTensor,
    pub gt: SegmentationMap,
    pub shapes: Vec<PlacedShape>,
    pub surface: usize,
    /// One per GT segment, in class order.
    pub proposals: Vec<BinaryMask>,
    pub captions: Vec<String>,
    /// `[N, E]`, row i for proposal i.
    pub embeddings: Option<Tensor<f32>>,
}

pub fn scene_id(index: usize) -> String {
    format!("img_{index:04}")
}

fn shape_mask(side: usize, s: &PlacedShape) -> BinaryMask {
    let (sin, cos) = s.angle.sin_cos();
    BinaryMask::from_fn(side, side, |r, c| {
        let dy = (r as f32 + 0.5 - s.row) / s.radius;
        let dx = (c as f32 + 0.5 - s.col) / s.radius;
        shape_contains(s.class, dx * cos + dy * sin, -dx * sin + dy * cos)
    })
}

fn jittered_color(rng: &mut Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Two-tone stripes; `contrast` is the darkening of the second tone.
fn paint_background(rng: &mut Rng, img: &mut ImageTensor, base: [f32; 3], contrast: f32) {
    let base = jittered_color(rng, base, 0.1);
    let alt = jittered_color(rng, base.map(|v| v * (1.0 - contrast)), 0.1);
    let period = rng.random_range(3.0f32..9.0);
    let theta = rng.random_range(0.0..PI);
    let (s, c) = theta.sin_cos();
    for r in 0..img.height() {
        for col in 0..img.width() {
            let t = (r as f32 * s + col as f32 * c) / period;
            let pick = if t.rem_euclid(1.0) < 0.5 { base } else { alt };
            let noise = rng.random_range(-0.06f32..0.06);
            img.set_pixel(r, col, pick.map(|v| (v + noise).clamp(0.0, 1.0)));
        }
    }
}

/// Small unlabeled blobs in random colors.
fn paint_clutter(rng: &mut Rng, img: &mut ImageTensor, count: usize, max_radius: f32) {
    let side = img.height() as f32;
    for _ in 0..count {
        let color = COLORS.choose(rng).expect("nonempty").1;
        let color = jittered_color(rng, color, 0.15);
        let cr = rng.random_range(0.0..side);
        let cc = rng.random_range(0.0..img.width() as f32);
        let rad = rng.random_range(1.0..max_radius.max(1.5));
        let square = rng.random_bool(0.5);
        for r in 0..img.height() {
            for c in 0..img.width() {
                let (dy, dx) = ((r as f32 + 0.5 - cr) / rad, (c as f32 + 0.5 - cc) / rad);
                let inside = if square { dy.abs().max(dx.abs()) <= 1.0 } else { dy * dy + dx * dx <= 1.0 };
                if inside {
                    img.set_pixel(r, c, color);
                }
            }
        }
    }
}

fn paint_shape(rng: &mut Rng, img: &mut ImageTensor, mask: &BinaryMask, color: [f32; 3]) {
    let color = jittered_color(rng, color, 0.08);
    for r in 0..img.height() {
        for c in 0..img.width() {
            if mask.get(r, c) {
                let shade = rng.random_range(-0.04f32..0.04);
                img.set_pixel(r, c, color.map(|v| (v + shade).clamp(0.0, 1.0)));
            }
        }
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn join_phrases(parts: &[String]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// A caption naming every shape, sometimes with colors and the surface.
fn caption(rng: &mut Rng, shapes: &[PlacedShape], surface: usize) -> String {
    let with_color = rng.random_bool(0.6);
    let mut order: Vec<&PlacedShape> = shapes.iter().collect();
    order.shuffle(rng);
    let parts: Vec<String> = order
        .iter()
        .map(|s| {
            let noun = SHAPES[s.class];
            if with_color {
                let adj = COLORS[s.color].0;
                format!("{} {adj} {noun}", article(adj))
            } else {
                format!("{} {noun}", article(noun))
            }
        })
        .collect();
    let prefix = ["", "there is ", "a photo of ", "this picture shows ", "we can see "]
        .choose(rng)
        .expect("nonempty");
    let surface = SURFACES[surface].0;
    let suffix = match rng.random_range(0..4) {
        0 => format!(" on the {surface}"),
        1 => format!(" in front of a {surface}"),
        _ => String::new(),
    };
    format!("{prefix}{}{suffix}", join_phrases(&parts))
}

fn jitter_mask(rng: &mut Rng, mask: &BinaryMask, jitter: usize) -> BinaryMask {
    if jitter == 0 {
        return mask.clone();
    }
    let amount = rng.random_range(0..=jitter);
    let out = match rng.random_range(0..3) {
        0 => mask.dilate(amount),
        1 => mask.erode(amount),
        _ => {
            let j = jitter as i64;
            mask.shift(rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
        }
    };
    if out.is_empty() {
        mask.clone()
    } else {
        out
    }
}

fn noisy_embedding(rng: &mut Rng, class: usize, dim: usize, noise: f64) -> Result<Vec<f32>> {
    let t = embed_text(SHAPES[class], &default_templates(), dim)?;
    let scale = noise / (dim as f64).sqrt();
    let v: Vec<f64> = t
        .iter()
        .map(|x| x + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.iter().map(|x| (x / n) as f32).collect())
}

/// Renders scene `index`. Each scene draws from its own seed stream, so
/// scenes can be produced in any order.
pub fn render_scene(cfg: &SynthConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = seeded(derive_seed(cfg.seed, &format!("scene.{index}")));
    let side = cfg.side;
    let sf = side as f32;
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut classes: Vec<usize> = (0..SHAPES.len()).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n);

    // Place shapes near each other so crops pick up neighbours; retry
    // until every shape keeps a decent visible area.
    let mut shapes = Vec::new();
    let mut masks = Vec::new();
    for _attempt in 0..50 {
        shapes.clear();
        for (i, &class) in classes.iter().enumerate() {
            let radius = rng.random_range(0.13 * sf..0.24 * sf);
            let (row, col) = if i == 0 {
                (rng.random_range(0.3 * sf..0.7 * sf), rng.random_range(0.3 * sf..0.7 * sf))
            } else {
                let anchor: &PlacedShape = shapes.choose(&mut rng).expect("nonempty");
                let dist = rng.random_range(1.1..1.7) * (anchor.radius + radius) * 0.75;
                let a = rng.random_range(0.0..2.0 * PI);
                (
                    (anchor.row + dist * a.sin()).clamp(radius * 0.7, sf - radius * 0.7),
                    (anchor.col + dist * a.cos()).clamp(radius * 0.7, sf - radius * 0.7),
                )
            };
            shapes.push(PlacedShape {
                class,
                color: rng.random_range(0..COLORS.len()),
                row,
                col,
                radius,
                angle: rng.random_range(-0.3f32..0.3),
            });
        }
        masks = shapes.iter().map(|s| shape_mask(side, s)).collect::<Vec<_>>();
        let mut visible = masks.clone();
        for i in 0..masks.len() {
            for later in &masks[i + 1..] {
                visible[i] = BinaryMask::from_fn(side, side, |r, c| visible[i].get(r, c) && !later.get(r, c));
            }
        }
        let ok = visible
            .iter()
            .zip(&masks)
            .all(|(v, m)| v.count() >= 40 && v.count() * 2 >= m.count());
        if ok {
            break;
        }
    }

    let mut image = ImageTensor::zeros(side, side);
    let surface = rng.random_range(0..SURFACES.len());
    paint_background(&mut rng, &mut image, SURFACES[surface].1, 0.3);
    paint_clutter(&mut rng, &mut image, cfg.clutter, sf * 0.05);
    let mut gt = SegmentationMap::unlabeled(side, side);
    for (s, m) in shapes.iter().zip(&masks) {
        paint_shape(&mut rng, &mut image, m, COLORS[s.color].1);
        for r in 0..side {
            for c in 0..side {
                if m.get(r, c) {
                    gt.set(r, c, Some(s.class));
                }
            }
        }
    }

    let segments = crate::dataset::segments_of(&gt);
    let proposals: Vec<BinaryMask> =
        segments.iter().map(|(_, m)| jitter_mask(&mut rng, m, cfg.jitter)).collect();
    let captions = (0..cfg.captions_per_image).map(|_| caption(&mut rng, &shapes, surface)).collect();
    let embeddings = match cfg.embed_dim {
        Some(dim) => {
            let mut data = Vec::with_capacity(segments.len() * dim);
            for (k, _) in &segments {
                data.extend(noisy_embedding(&mut rng, *k, dim, cfg.embed_noise)?);
            }
            Some(Tensor::new(vec![segments.len(), dim], data)?)
        }
        None => None,
    };
    Ok(Scene {
        id: scene_id(index),
        image,
        gt,
        shapes,
        surface,
        proposals,
        captions,
        embeddings,
    })
}

/// Scenes `0..count`, in order.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| render_scene(cfg, i)).collect()
}

pub fn shape_vocabulary() -> Vocabulary {
    Vocabulary::new(
        SHAPES
            .iter()
            .enumerate()
            .map(|(index, name)| VocabEntry { index, name: name.to_string(), seen: index < NUM_SEEN })
            .collect(),
    )
    .expect("static vocabulary is valid")
}

/// Writes scenes in the dataset layout.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, scenes: &[Scene]) -> Result<()> {
    let mut captions = Vec::new();
    for s in scenes {
        save_png_rgb(&dir.join(IMAGES_DIR).join(format!("{}.png", s.id)), &s.image)?;
        s.gt.save_png(&dir.join(GT_DIR).join(format!("{}.png", s.id)))?;
        rle::write_masks(
            &dir.join(PROPOSALS_DIR).join(format!("{}.rle", s.id)),
            cfg.side,
            cfg.side,
            &s.proposals,
        )?;
        if let Some(e) = &s.embeddings {
            let mut b = Bundle::new();
            b.insert(EMBEDDING_TENSOR, e.clone());
            b.save(&dir.join(EMBEDDINGS_DIR).join(&s.id))?;
        }
        captions.extend(s.captions.iter().map(|c| Caption { image_id: s.id.clone(), caption: c.clone() }));
    }
    write_jsonl(&dir.join(CAPTIONS_FILE), &captions)?;
    shape_vocabulary().save(&dir.join(VOCAB_FILE))?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &DatasetManifest {
            ids: scenes.iter().map(|s| s.id.clone()).collect(),
            image_side: cfg.side,
            seed: cfg.seed,
            jitter: cfg.jitter,
            has_embeddings: cfg.embed_dim.is_some(),
        },
    )
}

/// Share of object photos shot against a plain dark backdrop.
const PLAIN_BACKGROUND_P: f64 = 0.5;

/// Object-centric "natural" photo: one shape filling the frame over
/// a textured, cluttered or plain dark background. Used to give the toy encoder a
/// starting point that has never seen blank regions.
pub fn render_object(seed: u64, index: usize, side: usize, patch_size: usize) -> TrainingPair {
    let mut rng = seeded(derive_seed(seed, &format!("object.{index}")));
    let sf = side as f32;
    let class = rng.random_range(0..SHAPES.len());
    let radius = rng.random_range(0.45 * sf..0.49 * sf);
    let shape = PlacedShape {
        class,
        color: rng.random_range(0..COLORS.len()),
        row: sf / 2.0 + rng.random_range(-0.02 * sf..0.02 * sf),
        col: sf / 2.0 + rng.random_range(-0.02 * sf..0.02 * sf),
        radius,
        angle: rng.random_range(-0.3f32..0.3),
    };
    let mut image = ImageTensor::zeros(side, side);
    let surface = rng.random_range(0..SURFACES.len());
    if rng.random_bool(PLAIN_BACKGROUND_P) {
        let level = rng.random_range(0.02f32..0.15);
        let tint = jittered_color(&mut rng, [level; 3], 0.03);
        for r in 0..side {
            for c in 0..side {
                image.set_pixel(r, c, tint);
            }
        }
    } else {
        paint_background(&mut rng, &mut image, SURFACES[surface].1, 0.3);
        paint_clutter(&mut rng, &mut image, 3, sf * 0.06);
    }
    let mask = shape_mask(side, &shape);
    paint_shape(&mut rng, &mut image, &mask, COLORS[shape.color].1);
    let grid = side / patch_size;
    TrainingPair {
        crop: MaskedCrop {
            pixels: image,
            patch_mask: vec![true; grid * grid],
            resized_mask: BinaryMask::full(side, side),
            bbox: crate::preprocess::BBox { row0: 0, col0: 0, row1: side - 1, col1: side - 1 },
        },
        noun: SHAPES[class].to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::extract_nouns;

    #[test]
    fn every_shape_is_drawable() {
        for k in 0..SHAPES.len() {
            let s = PlacedShape { class: k, color: 0, row: 32.0, col: 32.0, radius: 14.0, angle: 0.0 };
            let n = shape_mask(64, &s).count();
            assert!(n > 150 && n < 900, "{} covers {n}", SHAPES[k]);
        }
        // Shapes are pairwise distinguishable at this size.
        let masks: Vec<BinaryMask> = (0..SHAPES.len())
            .map(|k| shape_mask(64, &PlacedShape { class: k, color: 0, row: 32.0, col: 32.0, radius: 14.0, angle: 0.0 }))
            .collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert!(masks[i].iou(&masks[j]) < 0.9, "{} vs {}", SHAPES[i], SHAPES[j]);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_consistent() {
        let cfg = SynthConfig { count: 6, jitter: 0, ..SynthConfig::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let segs = crate::dataset::segments_of(&s.gt);
            assert_eq!(segs.len(), s.shapes.len());
            let gt_masks: Vec<BinaryMask> = segs.into_iter().map(|(_, m)| m).collect();
            assert_eq!(s.proposals, gt_masks);
            for c in &s.captions {
                let nouns = extract_nouns(c);
                for sh in &s.shapes {
                    assert!(nouns.contains(&SHAPES[sh.class].to_string()), "{c}");
                }
            }
            assert_eq!(s.embeddings.as_ref().unwrap().shape(), &[s.proposals.len(), 32]);
        }
    }

    #[test]
    fn jitter_perturbs_but_keeps_masks_nonempty() {
        let cfg = SynthConfig { count: 4, jitter: 2, ..SynthConfig::default() };
        let scenes = synth_generate(&cfg).unwrap();
        let mut changed = false;
        for s in &scenes {
            for (p, (_, g)) in s.proposals.iter().zip(crate::dataset::segments_of(&s.gt)) {
                assert!(!p.is_empty());
                changed |= *p != g;
            }
        }
        assert!(changed);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { count: 0, ..SynthConfig::default() },
            SynthConfig { min_shapes: 3, max_shapes: 2, ..SynthConfig::default() },
            SynthConfig { max_shapes: 11, ..SynthConfig::default() },
        ] {
            assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn objects_fill_the_frame() {
        let p = render_object(1, 0, 32, 4);
        assert_eq!(p.crop.pixels.height(), 32);
        assert!(p.crop.patch_mask.iter().all(|&b| b));
        assert!(SHAPES.contains(&p.noun.as_str()));
        assert_eq!(render_object(1, 0, 32, 4), p);
    }
}
