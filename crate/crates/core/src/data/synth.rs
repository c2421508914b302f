//! Synthetic bare-board images with short, open and hole-deviation defects.
//!
//! Boards are drawn on a fixed 8-pixel cell grid: copper traces six pixels
//! wide repeat every 16 rows over a dark substrate, and drilled pads sit in
//! the gaps between traces. Half of the boards are transposed so the traces
//! run vertically. Defects:
//!
//! * `short`: a copper bridge filling the gap between two adjacent traces;
//! * `open`: a substrate-coloured cut through a trace;
//! * `circle`: a pad whose copper ring is displaced from its drill hole.
//!
//! Concentric pads are drawn as distractors. Each annotation is the tight
//! bounding box of the pixels its defect painted.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::manifest::{split, Annotation, Manifest, Record, Split, MANIFEST_FILE};
use super::pnm::Image;

pub const CLASSES: [&str; 3] = ["short", "open", "circle"];

/// Reference dataset: images, images containing each class, defects per class.
pub const REFERENCE_IMAGES: usize = 800;
pub const REFERENCE_IMAGES_PER_CLASS: [usize; 3] = [541, 660, 228];
pub const REFERENCE_DEFECTS_PER_CLASS: [usize; 3] = [1867, 1926, 571];

const CELL: usize = 8;
const PITCH: usize = 16;
const TRACE_TOP: usize = 1;
const TRACE_WIDTH: usize = 6;
const PAD_RADIUS: f64 = 4.5;
const DRILL_RADIUS: f64 = 1.8;

const SUBSTRATE: [f64; 3] = [22.0, 68.0, 38.0];
const COPPER: [f64; 3] = [196.0, 150.0, 72.0];
const DRILL: [f64; 3] = [12.0, 12.0, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    /// Square image side; a multiple of 16, at least 32.
    pub size: usize,
    pub seed: u64,
    pub train_frac: f64,
    /// Fraction of images containing each class.
    pub image_freq: [f64; 3],
    /// Mean defects of a class on an image that contains it.
    pub defects_per_image: [f64; 3],
    /// Upper bound on defects of one class on one image.
    pub max_per_class: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        let n = REFERENCE_IMAGES as f64;
        GenConfig {
            count: REFERENCE_IMAGES,
            size: 64,
            seed: 0,
            train_frac: 0.8,
            image_freq: REFERENCE_IMAGES_PER_CLASS.map(|c| c as f64 / n),
            defects_per_image: [0, 1, 2]
                .map(|c| REFERENCE_DEFECTS_PER_CLASS[c] as f64 / REFERENCE_IMAGES_PER_CLASS[c] as f64),
            max_per_class: 6,
        }
    }
}

impl GenConfig {
    /// Full-resolution boards.
    pub fn large() -> Self {
        GenConfig {
            size: 640,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 || self.size % PITCH != 0 {
            return Err(Error::Config(format!(
                "image size must be a multiple of {PITCH} and at least 32, got {}",
                self.size
            )));
        }
        if self.image_freq.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("class frequencies must lie in [0, 1]: {:?}", self.image_freq)));
        }
        if self.defects_per_image.iter().any(|&d| d < 1.0) || self.max_per_class == 0 {
            return Err(Error::Config("each chosen image carries at least one defect of its class".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config(format!("train_frac must lie in [0, 1], got {}", self.train_frac)));
        }
        Ok(())
    }

    /// Per-image defect counts `[short, open, circle]`. Each class appears on
    /// exactly `round(freq * count)` images chosen by a seeded shuffle, and
    /// its total is spread over those images one defect at a time.
    pub fn plan(&self) -> Vec<[usize; 3]> {
        // Stream 0 belongs to the split and streams 1.. to the images.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let mut plan = vec![[0usize; 3]; self.count];
        for c in 0..3 {
            let n_c = ((self.image_freq[c] * self.count as f64).round() as usize).min(self.count);
            let mut order: Vec<usize> = (0..self.count).collect();
            order.shuffle(&mut rng);
            let chosen = &order[..n_c];
            for &i in chosen {
                plan[i][c] = 1;
            }
            let total = (self.defects_per_image[c] * n_c as f64).round() as usize;
            let mut open: Vec<usize> = chosen.to_vec();
            for _ in n_c..total {
                open.retain(|&i| plan[i][c] < self.max_per_class);
                if open.is_empty() {
                    break;
                }
                let i = open[rng.gen_range(0..open.len())];
                plan[i][c] += 1;
            }
        }
        plan
    }
}

/// One painted defect: its class and the pixels it changed.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedDefect {
    pub class_id: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl RenderedDefect {
    /// Tight pixel-edge box `[x1, y1, x2, y2]`.
    pub fn bbox(&self) -> [f64; 4] {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
        [x1 as f64, y1 as f64, x2 as f64, y2 as f64]
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.rgb[y * self.size + x] = c;
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Item {
    Short,
    Open,
    Circle,
    Pad,
}

fn tint(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| v * k)
}

/// Draws one board. `counts` is the number of defects per class; defects that
/// find no free slot are skipped.
pub fn render(size: usize, counts: [usize; 3], rng: &mut ChaCha8Rng) -> (Image, Vec<RenderedDefect>) {
    let light = rng.gen_range(0.9..1.1);
    let substrate = tint(SUBSTRATE, light);
    let copper = tint(COPPER, light);
    let mut canvas = Canvas {
        size,
        rgb: vec![substrate; size * size],
    };
    let traces: Vec<usize> = (0..).take_while(|j| PITCH * j + TRACE_TOP + TRACE_WIDTH <= size).collect();
    for &j in &traces {
        let c = tint(copper, rng.gen_range(0.93..1.07));
        for y in PITCH * j + TRACE_TOP..PITCH * j + TRACE_TOP + TRACE_WIDTH {
            for x in 0..size {
                canvas.paint(x, y, c);
            }
        }
    }
    // Gaps whose both neighbouring traces exist can hold bridges and pads.
    let gaps: Vec<usize> = traces.iter().copied().filter(|j| traces.contains(&(j + 1))).collect();
    let cols = size / CELL;

    let mut items: Vec<Item> = Vec::new();
    items.extend(std::iter::repeat(Item::Circle).take(counts[2]));
    items.extend(std::iter::repeat(Item::Short).take(counts[0]));
    items.extend(std::iter::repeat(Item::Open).take(counts[1]));
    items.extend(std::iter::repeat(Item::Pad).take(rng.gen_range(0..=3)));

    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut defects = Vec::new();
    for item in items {
        let rows: Vec<usize> = match item {
            Item::Open => traces.iter().map(|j| 2 * j).collect(),
            _ => gaps.iter().map(|j| 2 * j + 1).collect(),
        };
        let free: Vec<(usize, usize)> = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |k| (r, k)))
            .filter(|&(r, k)| {
                taken
                    .iter()
                    .all(|&(r2, k2)| !((r2 == r && k2.abs_diff(k) <= 1) || (k2 == k && r2.abs_diff(r) <= 1)))
            })
            .collect();
        let Some(&(r, k)) = free.choose(rng) else { continue };
        taken.push((r, k));
        let cx = CELL * k + CELL / 2;
        let mut pixels = Vec::new();
        match item {
            Item::Short | Item::Open => {
                let w = rng.gen_range(3..=5);
                let x0 = cx - w / 2;
                let (y0, y1, colour) = if item == Item::Short {
                    let top = PITCH * (r / 2) + TRACE_TOP + TRACE_WIDTH;
                    (top, top + PITCH - TRACE_WIDTH, copper)
                } else {
                    let top = PITCH * (r / 2) + TRACE_TOP;
                    (top, top + TRACE_WIDTH, substrate)
                };
                for y in y0..y1 {
                    for x in x0..x0 + w {
                        canvas.paint(x, y, colour);
                        pixels.push((x, y));
                    }
                }
            }
            Item::Circle | Item::Pad => {
                let hole = (cx as f64, (CELL * r + CELL / 2) as f64);
                let pad = if item == Item::Circle {
                    let dx = rng.gen_range(2.0..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (hole.0 + dx, hole.1 + rng.gen_range(-0.7..0.7))
                } else {
                    hole
                };
                let reach = (PAD_RADIUS + 4.0).ceil() as isize;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let (x, y) = (hole.0 as isize + dx, hole.1 as isize + dy);
                        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let in_hole = (px - hole.0).hypot(py - hole.1) <= DRILL_RADIUS;
                        let in_pad = (px - pad.0).hypot(py - pad.1) <= PAD_RADIUS;
                        if in_hole || in_pad {
                            let (x, y) = (x as usize, y as usize);
                            canvas.paint(x, y, if in_hole { DRILL } else { copper });
                            pixels.push((x, y));
                        }
                    }
                }
            }
        }
        let class_id = match item {
            Item::Short => 0,
            Item::Open => 1,
            Item::Circle => 2,
            Item::Pad => continue,
        };
        defects.push(RenderedDefect { class_id, pixels });
    }

    let transpose = rng.gen_bool(0.5);
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let src = if transpose { canvas.rgb[x * size + y] } else { canvas.rgb[y * size + x] };
            for (o, v) in img.pixel_mut(x, y).iter_mut().zip(src) {
                *o = (v + rng.gen_range(-8.0..8.0)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    if transpose {
        for d in &mut defects {
            for p in &mut d.pixels {
                *p = (p.1, p.0);
            }
        }
    }
    (img, defects)
}

/// Per-image generator stream, independent of generation order.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Writes `images/NNNNNN.ppm` and `manifest.jsonl` under `out`. The manifest
/// is written last and atomically.
pub fn generate(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir)?;
    let probe = out.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;

    let plan = cfg.plan();
    let mut records = Vec::with_capacity(cfg.count);
    for (i, counts) in plan.into_iter().enumerate() {
        let (img, defects) = render(cfg.size, counts, &mut image_rng(cfg.seed, i));
        let name = format!("images/{i:06}.ppm");
        img.write(&out.join(&name))?;
        records.push(Record {
            image: name,
            width: cfg.size,
            height: cfg.size,
            split: Split::Train,
            annotations: defects
                .iter()
                .map(|d| Annotation {
                    class: CLASSES[d.class_id].to_string(),
                    bbox: d.bbox(),
                })
                .collect(),
        });
    }
    split(&mut records, cfg.train_frac, cfg.seed);
    let manifest = Manifest {
        classes: CLASSES.map(String::from).to_vec(),
        seed: cfg.seed,
        records,
    };
    let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, manifest.to_jsonl())?;
    fs::rename(&tmp, out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
