//! Seeded procedural detection scenes.
//!
//! Eight categories: four shapes (circle, square, triangle, bar) in two color
//! families (warm, cool). Shapes share colors across a family and
//! silhouettes across families, so neither cue alone separates the classes.
//! Every object carries its pixel mask; its box is the tight bound of that
//! mask.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::ppm;
use crate::tensor::Tensor;

pub const NUM_CATEGORIES: usize = 8;

/// Category ids run `1..=NUM_CATEGORIES`; 0 is background.
pub fn category_name(class_id: usize) -> &'static str {
    const NAMES: [&str; NUM_CATEGORIES] = [
        "warm-circle",
        "warm-square",
        "warm-triangle",
        "warm-bar",
        "cool-circle",
        "cool-square",
        "cool-triangle",
        "cool-bar",
    ];
    NAMES.get(class_id.wrapping_sub(1)).copied().unwrap_or("background")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

/// Binary object mask at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive pixel bounds `(y0, x0, y1, x1)` of the set pixels.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bounds = Some(match bounds {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bounds
    }

    /// Tight normalized box around the set pixels.
    pub fn tight_box(&self) -> Option<BBox> {
        let (y0, x0, y1, x1) = self.pixel_bounds()?;
        let (w, h) = (self.width as f64, self.height as f64);
        BBox::from_corners(
            x0 as f64 / w,
            y0 as f64 / h,
            (x1 + 1) as f64 / w,
            (y1 + 1) as f64 / h,
        )
        .ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub annotated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn annotated(&self) -> impl Iterator<Item = &SceneObject> {
        self.objects.iter().filter(|o| o.annotated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent range in pixels (the long side for bars).
    pub min_size: usize,
    pub max_size: usize,
    /// Pairwise IoU cap between object boxes.
    pub max_iou: f64,
    pub allow_empty: bool,
    /// Placement attempts per object before the scene is declared infeasible.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 28,
            max_iou: 0.3,
            allow_empty: false,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.max_objects == 0 && !self.allow_empty {
            return Err(Error::Config("max_objects = 0 requires allow_empty".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.image_size {
            return Err(Error::Config(format!(
                "object size range {}..={} invalid for {} px images",
                self.min_size, self.max_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let mut image = background(&mut rng, n);

    let lo = if cfg.allow_empty { cfg.min_objects } else { cfg.min_objects.max(1) };
    let count = rng.gen_range(lo..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(1..=NUM_CATEGORIES);
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let mask = draw_mask(&mut rng, class_id, cfg);
            let Some(bbox) = mask.tight_box() else { continue };
            if objects.iter().all(|o| crate::detector::iou(&o.bbox, &bbox) <= cfg.max_iou) {
                placed = Some((mask, bbox));
                break;
            }
        }
        let Some((mask, bbox)) = placed else {
            return Err(Error::Config(format!(
                "could not place object {} under IoU cap {} after {} attempts",
                objects.len() + 1,
                cfg.max_iou,
                cfg.max_retries
            )));
        };
        paint(&mut rng, &mut image, &mask, class_id);
        objects.push(SceneObject {
            class_id,
            bbox,
            mask,
            annotated: true,
        });
    }
    Ok(Scene {
        seed,
        image: Tensor::new(vec![3, n, n], image)?,
        objects,
    })
}

fn background(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.55));
    // A few low-frequency waves plus fine grain.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            for (c, b) in base.iter().enumerate() {
                let grain = rng.gen_range(-0.03..0.03);
                img[(c * n + y) * n + x] = (b + tex + grain).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn shape_of(class_id: usize) -> Shape {
    match (class_id - 1) % 4 {
        0 => Shape::Circle,
        1 => Shape::Square,
        2 => Shape::Triangle,
        _ => Shape::Bar,
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, class_id: usize, cfg: &SceneConfig) -> Mask {
    let n = cfg.image_size;
    let size = rng.gen_range(cfg.min_size..=cfg.max_size);
    let (w, h) = match shape_of(class_id) {
        Shape::Bar => {
            let short = (size * 2 / 5).max(3);
            if rng.gen_bool(0.5) {
                (size, short)
            } else {
                (short, size)
            }
        }
        _ => (size, size),
    };
    let x0 = rng.gen_range(0..=n - w);
    let y0 = rng.gen_range(0..=n - h);
    let mut bits = vec![false; n * n];
    for dy in 0..h {
        for dx in 0..w {
            let inside = match shape_of(class_id) {
                Shape::Square | Shape::Bar => true,
                Shape::Circle => {
                    let r = w as f64 / 2.0;
                    let (px, py) = (dx as f64 + 0.5 - r, dy as f64 + 0.5 - r);
                    px * px + py * py <= r * r
                }
                Shape::Triangle => {
                    // Apex at top center, base along the bottom row.
                    let half = (dy as f64 + 1.0) / h as f64 * w as f64 / 2.0;
                    let c = dx as f64 + 0.5 - w as f64 / 2.0;
                    c.abs() <= half
                }
            };
            if inside {
                bits[(y0 + dy) * n + x0 + dx] = true;
            }
        }
    }
    Mask {
        height: n,
        width: n,
        bits,
    }
}

fn paint(rng: &mut ChaCha8Rng, image: &mut [f64], mask: &Mask, class_id: usize) {
    let warm = class_id <= 4;
    let base: [f64; 3] = if warm { [0.85, 0.35, 0.2] } else { [0.2, 0.45, 0.85] };
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
    let n = mask.width;
    for y in 0..mask.height {
        for x in 0..n {
            if !mask.get(y, x) {
                continue;
            }
            for c in 0..3 {
                let grain = rng.gen_range(-0.04..0.04);
                image[(c * mask.height + y) * n + x] = (base[c] + jitter[c] + grain).clamp(0.0, 1.0);
            }
        }
    }
}

/// One of the three fixed base/novel partitions of the categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split: u8,
    pub categories: Vec<usize>,
    pub novel: Vec<usize>,
}

impl SplitSpec {
    pub fn new(split: u8) -> Result<Self> {
        let novel = match split {
            1 => vec![3, 6],
            2 => vec![1, 8],
            3 => vec![4, 7],
            _ => return Err(Error::Config(format!("split must be 1, 2 or 3, got {split}"))),
        };
        Ok(SplitSpec {
            split,
            categories: (1..=NUM_CATEGORIES).collect(),
            novel,
        })
    }

    pub fn base(&self) -> Vec<usize> {
        self.categories
            .iter()
            .copied()
            .filter(|c| !self.novel.contains(c))
            .collect()
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel.contains(&class_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSizes {
    pub base_train: usize,
    pub novel_pool: usize,
    pub test: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes {
            base_train: 400,
            novel_pool: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub split: SplitSpec,
    /// Novel-class objects present but unannotated.
    pub base_train: Vec<Scene>,
    /// Fully annotated; support sets are sampled from here.
    pub novel_pool: Vec<Scene>,
    /// Fully annotated.
    pub test: Vec<Scene>,
}

pub fn build_benchmark(
    seed: u64,
    split: &SplitSpec,
    sizes: BenchmarkSizes,
    cfg: &SceneConfig,
) -> Result<Benchmark> {
    let gen = |stream: u64, count: usize| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| generate_scene(derive_seed(seed, stream, i as u64), cfg))
            .collect()
    };
    let mut base_train = gen(1, sizes.base_train)?;
    for scene in &mut base_train {
        for obj in &mut scene.objects {
            obj.annotated = !split.is_novel(obj.class_id);
        }
    }
    Ok(Benchmark {
        split: split.clone(),
        base_train,
        novel_pool: gen(2, sizes.novel_pool)?,
        test: gen(3, sizes.test)?,
    })
}

#[derive(Serialize)]
struct SidecarObject {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    annotated: bool,
}

#[derive(Serialize)]
struct Sidecar {
    objects: Vec<SidecarObject>,
}

/// Writes `<stem>.ppm` and a `<stem>.json` annotation sidecar.
pub fn dump_scene(dir: &Path, stem: &str, scene: &Scene) -> Result<()> {
    ppm::write_rgb(&dir.join(format!("{stem}.ppm")), &scene.image)?;
    let sidecar = Sidecar {
        objects: scene
            .objects
            .iter()
            .map(|o| SidecarObject {
                class: o.class_id,
                bbox: o.bbox.to_array(),
                annotated: o.annotated,
            })
            .collect(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string(&sidecar)?)?;
    Ok(())
}
