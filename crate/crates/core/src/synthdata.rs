//! Seeded synthetic-shapes detection scenes and the label/box randomization
//! used by the data randomization test.
//!
//! Each scene is a `[3, H, W]` image in `[0, 1]`: a flat gray background with
//! low-amplitude uniform noise and one to four filled shapes (circle, square,
//! upward triangle) in a contrasting color. Annotation boxes are the exact
//! pixel extents of each rendered shape. Objects are placed by rejection
//! sampling so that no two boxes overlap with IoU above 0.3, and classes are
//! drawn from shuffled balanced blocks so every class is equally frequent
//! up to one block.
//!
//! # On-disk layout
//!
//! `export_dataset` writes, per scene `i`, `scene_{i:04}.png` (8-bit RGB) and
//! `scene_{i:04}.txt` with one line per object:
//!
//! ```text
//! class_id x_min y_min x_max y_max
//! ```
//!
//! Coordinates are pixels; `x_max`/`y_max` are exclusive edges.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{iou, Annotation, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const MAX_OVERLAP_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

/// Geometry of one rendered shape; `size` is the side (or diameter).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

impl ShapeObject {
    /// Whether the point `(x, y)` lies inside the shape.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        let half = self.size / 2.0;
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Triangle => {
                // Apex at (0, -half), base from (-half, half) to (half, half).
                if dy < -half || dy > half {
                    return false;
                }
                let t = (dy + half) / self.size; // 0 at apex, 1 at base
                dx.abs() <= t * half
            }
        }
    }

    /// Pixel mask (pixel-center sampling) of the shape on a `width x height` grid.
    pub fn mask(&self, width: usize, height: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| self.covers(x as f64 + 0.5, y as f64 + 0.5))
            .collect()
    }

    /// Tight pixel-extent box of the rendered mask, if any pixel is covered.
    pub fn pixel_box(&self, width: usize, height: usize) -> Option<BBox> {
        let mask = self.mask(width, height);
        let mut extent: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (i % width, i / width);
            extent = Some(match extent {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        extent.map(|(x0, y0, x1, y1)| {
            BBox::new(x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    /// Rendered geometry, parallel to `annotations`. Empty for scenes read
    /// back from disk. Randomization never touches it, so `objects[i].kind`
    /// stays the true shape class.
    pub objects: Vec<ShapeObject>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    pub min_size: f64,
    pub max_size: f64,
    pub max_objects: usize,
    /// Half-width of the uniform background noise.
    pub noise_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            count: 100,
            image_size: 64,
            seed: 0,
            min_size: 11.0,
            max_size: 20.0,
            max_objects: 4,
            noise_amplitude: 0.05,
        }
    }
}

const PLACEMENT_TRIES: usize = 200;

/// Generates `config.count` scenes; deterministic in `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<SyntheticScene>> {
    if config.count == 0 {
        return Err(Error::InvalidArgument("scene count must be at least 1".into()));
    }
    if !(config.min_size >= 4.0 && config.max_size >= config.min_size) {
        return Err(Error::InvalidConfig(format!(
            "shape sizes must satisfy 4 <= min ({}) <= max ({})",
            config.min_size, config.max_size
        )));
    }
    if (config.image_size as f64) < config.max_size + 2.0 {
        return Err(Error::InvalidConfig(format!(
            "image size {} too small for shapes up to {} px",
            config.image_size, config.max_size
        )));
    }
    if config.max_objects == 0 {
        return Err(Error::InvalidConfig("max_objects must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bag: Vec<usize> = Vec::new();
    (0..config.count)
        .map(|_| generate_scene(config, &mut rng, &mut bag))
        .collect()
}

fn next_class(rng: &mut ChaCha8Rng, bag: &mut Vec<usize>) -> usize {
    if bag.is_empty() {
        bag.extend(0..ShapeKind::ALL.len());
        bag.shuffle(rng);
    }
    bag.pop().expect("refilled")
}

fn generate_scene(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    bag: &mut Vec<usize>,
) -> Result<SyntheticScene> {
    let size = config.image_size;
    let background: f64 = rng.random_range(0.35..0.55);
    let mut pixels = vec![0.0; 3 * size * size];
    for v in pixels.iter_mut() {
        *v = background + rng.random_range(-config.noise_amplitude..=config.noise_amplitude);
    }

    let wanted = rng.random_range(1..=config.max_objects);
    let mut objects: Vec<ShapeObject> = Vec::new();
    let mut annotations: Vec<Annotation> = Vec::new();
    for _ in 0..wanted {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let side = rng.random_range(config.min_size..=config.max_size);
            let half = side / 2.0;
            let lo = half + 1.0;
            let hi = size as f64 - half - 1.0;
            let cx = rng.random_range(lo..=hi);
            let cy = rng.random_range(lo..=hi);
            // Geometry first; the class only changes the silhouette, so test
            // the bounding square for overlap.
            let probe = BBox::from_center(cx, cy, side, side);
            if annotations.iter().any(|a| iou(&a.bbox, &probe) > MAX_OVERLAP_IOU) {
                continue;
            }
            placed = Some((cx, cy, side));
            break;
        }
        let Some((cx, cy, side)) = placed else {
            continue;
        };
        let kind = ShapeKind::from_class_id(next_class(rng, bag)).expect("valid class");
        let color = contrasting_color(rng, background);
        let object = ShapeObject {
            kind,
            cx,
            cy,
            size: side,
            color,
        };
        let Some(bbox) = object.pixel_box(size, size) else {
            continue;
        };
        if annotations.iter().any(|a| iou(&a.bbox, &bbox) > MAX_OVERLAP_IOU) {
            continue;
        }
        objects.push(object);
        annotations.push(Annotation {
            bbox,
            class_id: kind.class_id(),
        });
    }
    if objects.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "could not place any shape in a {size}x{size} image"
        )));
    }

    for object in &objects {
        let mask = object.mask(size, size);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (c, &value) in object.color.iter().enumerate() {
                pixels[c * size * size + i] = value;
            }
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, size, size], pixels)?,
        annotations,
        objects,
    })
}

fn contrasting_color(rng: &mut ChaCha8Rng, background: f64) -> [f64; 3] {
    loop {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let mean = color.iter().sum::<f64>() / 3.0;
        if (mean - background).abs() >= 0.25 {
            return color;
        }
    }
}

/// How to corrupt a dataset's annotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationSpec {
    /// Shuffle class labels across all objects of the dataset.
    pub permute_labels: bool,
    /// Standard deviation (pixels) of the Gaussian noise added to each box
    /// coordinate.
    pub box_noise_stddev: f64,
    pub seed: u64,
}

impl RandomizationSpec {
    pub fn identity() -> Self {
        RandomizationSpec {
            permute_labels: false,
            box_noise_stddev: 0.0,
            seed: 0,
        }
    }
}

/// Minimum side of a noised box, in pixels.
pub const MIN_NOISY_BOX_SIDE: f64 = 2.0;

/// Ten percent of the mean box side over the dataset.
pub fn default_box_noise(dataset: &[SyntheticScene]) -> f64 {
    let sides: Vec<f64> = dataset
        .iter()
        .flat_map(|s| &s.annotations)
        .flat_map(|a| [a.bbox.width(), a.bbox.height()])
        .collect();
    if sides.is_empty() {
        return 0.0;
    }
    0.1 * sides.iter().sum::<f64>() / sides.len() as f64
}

/// Applies label permutation and box noise. Images and `objects` are
/// untouched; noisy boxes are clamped into the image with a minimum side of
/// [`MIN_NOISY_BOX_SIDE`].
pub fn randomize(dataset: &[SyntheticScene], spec: &RandomizationSpec) -> Result<Vec<SyntheticScene>> {
    if !(spec.box_noise_stddev >= 0.0 && spec.box_noise_stddev.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "box noise stddev must be finite and non-negative, got {}",
            spec.box_noise_stddev
        )));
    }
    let mut out = dataset.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.permute_labels {
        let mut labels: Vec<usize> = out
            .iter()
            .flat_map(|s| s.annotations.iter().map(|a| a.class_id))
            .collect();
        labels.shuffle(&mut rng);
        let mut it = labels.into_iter();
        for scene in &mut out {
            for a in &mut scene.annotations {
                a.class_id = it.next().expect("one label per annotation");
            }
        }
    }
    if spec.box_noise_stddev > 0.0 {
        let noise = Normal::new(0.0, spec.box_noise_stddev).expect("valid stddev");
        for scene in &mut out {
            let (w, h) = (scene.width() as f64, scene.height() as f64);
            for a in &mut scene.annotations {
                let b = a.bbox;
                let (x0, y0, x1, y1) = (
                    b.x_min + noise.sample(&mut rng),
                    b.y_min + noise.sample(&mut rng),
                    b.x_max + noise.sample(&mut rng),
                    b.y_max + noise.sample(&mut rng),
                );
                let x_min = x0.clamp(0.0, w - MIN_NOISY_BOX_SIDE);
                let y_min = y0.clamp(0.0, h - MIN_NOISY_BOX_SIDE);
                a.bbox = BBox::new(
                    x_min,
                    y_min,
                    x1.clamp(x_min + MIN_NOISY_BOX_SIDE, w),
                    y1.clamp(y_min + MIN_NOISY_BOX_SIDE, h),
                );
            }
        }
    }
    Ok(out)
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Writes PNG + annotation text per scene; returns the written paths.
pub fn export_dataset(scenes: &[SyntheticScene], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(2 * scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let png = dir.join(format!("{}.png", scene_stem(i)));
        write_rgb_png(&scene.image, &png)?;
        let txt = dir.join(format!("{}.txt", scene_stem(i)));
        fs::write(&txt, format_annotations(&scene.annotations)).map_err(|e| Error::io(&txt, e))?;
        written.push(png);
        written.push(txt);
    }
    Ok(written)
}

pub fn format_annotations(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| {
            format!(
                "{} {} {} {} {}\n",
                a.class_id, a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max
            )
        })
        .collect()
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 1));
            if fields.len() != 5 {
                return Err(bad("expected `class_id x_min y_min x_max y_max`"));
            }
            let class_id = fields[0].parse().map_err(|_| bad("bad class id"))?;
            let c: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad coordinate"))?;
            let bbox = BBox::new(c[0], c[1], c[2], c[3]);
            if bbox.is_degenerate() {
                return Err(bad("degenerate box"));
            }
            Ok(Annotation { bbox, class_id })
        })
        .collect()
}

/// Reads every `scene_*.png` with its annotation file, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let mut pngs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "png")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    pngs.sort();
    if pngs.is_empty() {
        return Err(Error::format(dir, "no scene_*.png files"));
    }
    pngs.iter()
        .map(|png| {
            let image = read_rgb_png(png)?;
            let txt = png.with_extension("txt");
            let text = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
            let annotations = parse_annotations(&text, &txt)?;
            let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
            if let Some(a) = annotations.iter().find(|a| !a.bbox.is_valid_in(w, h)) {
                return Err(Error::format(&txt, format!("box {:?} outside the image", a.bbox)));
            }
            Ok(SyntheticScene {
                image,
                annotations,
                objects: Vec::new(),
            })
        })
        .collect()
}

pub fn write_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape(format!("expected [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| {
            (image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> Vec<SyntheticScene> {
        generate(&GeneratorConfig {
            count,
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(8, 3), small(8, 3));
        assert_ne!(small(8, 3), small(8, 4));
    }

    #[test]
    fn scenes_hold_one_to_four_valid_objects() {
        for scene in small(50, 1) {
            let n = scene.annotations.len();
            assert!((1..=4).contains(&n));
            assert_eq!(scene.objects.len(), n);
            for a in &scene.annotations {
                assert!(a.bbox.is_valid_in(64.0, 64.0));
            }
            for (i, a) in scene.annotations.iter().enumerate() {
                for b in &scene.annotations[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= MAX_OVERLAP_IOU);
                }
            }
            assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_are_balanced() {
        let scenes = small(100, 0);
        let mut counts = [0usize; 3];
        for a in scenes.iter().flat_map(|s| &s.annotations) {
            counts[a.class_id] += 1;
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let share = c as f64 / total as f64;
            assert!((share - 1.0 / 3.0).abs() <= 0.10, "{counts:?}");
        }
    }

    #[test]
    fn boxes_contain_their_shapes() {
        for scene in small(40, 5) {
            for (a, o) in scene.annotations.iter().zip(&scene.objects) {
                let mask = o.mask(64, 64);
                let total = mask.iter().filter(|&&m| m).count();
                let inside = mask
                    .iter()
                    .enumerate()
                    .filter(|(i, &m)| m && a.bbox.contains_pixel(i % 64, i / 64))
                    .count();
                assert!(total > 0);
                assert!(inside as f64 >= 0.6 * total as f64);
                // Tight within a pixel on every side.
                let tight = o.pixel_box(64, 64).unwrap();
                for c in crate::detector::Coord::ALL {
                    assert!((tight.coord(c) - a.bbox.coord(c)).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate(&GeneratorConfig {
            count: 0,
            ..GeneratorConfig::default()
        })
        .is_err());
        assert!(generate(&GeneratorConfig {
            image_size: 12,
            ..GeneratorConfig::default()
        })
        .is_err());
    }

    #[test]
    fn identity_randomization_is_a_no_op() {
        let scenes = small(10, 2);
        assert_eq!(randomize(&scenes, &RandomizationSpec::identity()).unwrap(), scenes);
    }

    #[test]
    fn noisy_boxes_stay_valid() {
        let scenes = small(30, 9);
        let noisy = randomize(
            &scenes,
            &RandomizationSpec {
                permute_labels: true,
                box_noise_stddev: 25.0,
                seed: 1,
            },
        )
        .unwrap();
        for (s, n) in scenes.iter().zip(&noisy) {
            assert_eq!(s.image, n.image);
            assert_eq!(s.objects, n.objects);
            for a in &n.annotations {
                assert!(a.bbox.is_valid_in(64.0, 64.0));
                assert!(a.bbox.width() >= MIN_NOISY_BOX_SIDE - 1e-12);
                assert!(a.bbox.height() >= MIN_NOISY_BOX_SIDE - 1e-12);
            }
        }
    }

    #[test]
    fn export_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = small(3, 4);
        let written = export_dataset(&scenes, dir.path()).unwrap();
        assert_eq!(written.len(), 6);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.annotations, b.annotations);
            // 8-bit quantization.
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn annotation_parse_errors_are_reported() {
        let p = Path::new("x.txt");
        assert!(parse_annotations("0 1 2 3", p).is_err());
        assert!(parse_annotations("0 5 5 5 9", p).is_err());
        assert!(parse_annotations("a 1 2 3 4", p).is_err());
        assert_eq!(parse_annotations("\n1 1 2 3 4\n", p).unwrap().len(), 1);
    }
}
