use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskbias_tensor::Tensor;

use super::font::{glyph, GLYPH_H, GLYPH_W};
use super::{CaptionPolicy, MultiTaskExample, TaskId, TaskLabels, Vocabulary};
use crate::{CoreError, Result};

/// 8-bit RGB square image, row-major, channel-last.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    size: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({0}x{0})", self.size)
    }
}

impl Image {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(CoreError::Dimension {
                what: "image pixels",
                expected: size * size * 3,
                got: pixels.len(),
            });
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, rgb: [u8; 3]) -> Self {
        Self {
            size,
            pixels: rgb.repeat(size * size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.size + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[size, size, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let s = self.size;
        Tensor::new([s, s, 3], self.pixels.iter().map(|&p| p as f64 / 255.0).collect())
            .expect("image size is positive")
    }

    /// Quantizes a `[size, size, 3]` tensor in `[0, 1]` back to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 3 {
            return Err(CoreError::Dimension {
                what: "image tensor",
                expected: 3,
                got: shape.len(),
            });
        }
        let pixels = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(shape[0], pixels)
    }
}

/// Which generator region a pixel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    TextBand,
    Object,
    Action,
}

impl Region {
    pub fn task(self) -> TaskId {
        match self {
            Region::TextBand => TaskId::SceneText,
            Region::Object => TaskId::Object,
            Region::Action => TaskId::Action,
        }
    }
}

/// Placement of the three regions on a square canvas: the text band is the
/// top quarter, the object column is the middle half of the remaining rows,
/// and the action strips fill both sides below the band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLayout {
    pub size: usize,
}

impl RegionLayout {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn band_height(&self) -> usize {
        self.size / 4
    }

    pub fn object_cols(&self) -> std::ops::Range<usize> {
        self.size / 4..self.size - self.size / 4
    }

    pub fn region_of(&self, row: usize, col: usize) -> Region {
        if row < self.band_height() {
            Region::TextBand
        } else if self.object_cols().contains(&col) {
            Region::Object
        } else {
            Region::Action
        }
    }

    /// Region of each patch of a `grid × grid` patch layout, row-major.
    ///
    /// A patch is attributed to a region only when it lies wholly inside it.
    pub fn patch_regions(&self, patch: usize) -> Vec<Option<Region>> {
        let grid = self.size / patch;
        (0..grid * grid)
            .map(|p| {
                let (pr, pc) = (p / grid, p % grid);
                let first = self.region_of(pr * patch, pc * patch);
                let uniform = (0..patch).all(|dr| {
                    (0..patch).all(|dc| self.region_of(pr * patch + dr, pc * patch + dc) == first)
                });
                uniform.then_some(first)
            })
            .collect()
    }
}

pub(super) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const LABEL_STREAM: u64 = 0;
const TEXT_STREAM: u64 = 1;
const OBJECT_STREAM: u64 = 2;
const ACTION_STREAM: u64 = 3;
pub(super) const CAPTION_STREAM: u64 = 4;

/// Light background and dark ink with random hues.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> ([u8; 3], [u8; 3]) {
    let bg = [rng.gen_range(150..=255), rng.gen_range(150..=255), rng.gen_range(150..=255)];
    let ink = [rng.gen_range(0..=100), rng.gen_range(0..=100), rng.gen_range(0..=100)];
    (bg, ink)
}

fn object_mask(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    let d2 = dx * dx + dy * dy;
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        "circle" => d2 <= r * r,
        "ring" => d2 <= r * r && d2 >= (r - 2.2) * (r - 2.2),
        "square" => ax <= 0.8 * r && ay <= 0.8 * r,
        "frame" => (ax <= 0.8 * r && ay <= 0.8 * r) && !(ax <= 0.8 * r - 2.0 && ay <= 0.8 * r - 2.0),
        "triangle" => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) * 0.55,
        "diamond" => ax + ay <= r,
        "plus" => (ax <= r / 3.5 && ay <= r) || (ay <= r / 3.5 && ax <= r),
        "hourglass" => ax <= ay + 0.5 && ay <= r,
        "crescent" => d2 <= r * r && (dx - 0.55 * r).powi(2) + dy * dy > (0.8 * r) * (0.8 * r),
        "arrow" => (ay <= 1.2 && dx >= -r && dx <= 0.2 * r) || (dx >= 0.0 && dx <= r && ay <= (r - dx) * 0.9),
        "bowtie" => ay <= ax + 0.5 && ax <= r,
        "pillar" => ax <= 0.35 * r && ay <= r,
        // unknown names still render something deterministic
        _ => ((dx + dy).round() as i64).rem_euclid(3) == 0 && d2 <= r * r,
    }
}

fn action_mask(motif: &str, x: usize, y: usize, phase: usize) -> bool {
    let (xi, yi, p) = (x as i64, y as i64, phase as i64);
    match motif {
        "lift" => (xi + p).rem_euclid(4) == 0,
        "run" => (yi + p).rem_euclid(4) == 0,
        "throw" => (xi + yi + p).rem_euclid(4) == 0,
        "fall" => (xi - yi + p).rem_euclid(4) == 0,
        "jump" => (yi + (2 * xi - 7).abs() / 2 + p).rem_euclid(5) == 0,
        "wave" => {
            let centre = 3.5 + 2.5 * ((y as f64) * 0.8 + phase as f64).sin();
            (x as f64 - centre).abs() < 0.9
        }
        "spin" => (xi + p).rem_euclid(3) == 0 && (yi + p).rem_euclid(3) == 0,
        "swing" => {
            let yy = (yi + p).rem_euclid(8) as f64;
            ((x as f64).hypot(yy).round() as i64).rem_euclid(3) == 0
        }
        _ => ((xi * 7 + yi * 3 + p) % 5) == 0,
    }
}

fn draw_text(img: &mut Image, layout: RegionLayout, word: &str, rng: &mut ChaCha8Rng) {
    let (bg, ink) = contrasting_pair(rng);
    let band = layout.band_height();
    for r in 0..band {
        for c in 0..layout.size {
            img.set(r, c, bg);
        }
    }
    let n = word.chars().count();
    let width = (n * (GLYPH_W + 1)).saturating_sub(1);
    let x0 = layout.size.saturating_sub(width) / 2;
    let y0 = band.saturating_sub(GLYPH_H) / 2;
    for (i, ch) in word.chars().enumerate() {
        let Some(pts) = glyph(ch) else { continue };
        for (gr, gc) in pts {
            let (r, c) = (y0 + gr, x0 + i * (GLYPH_W + 1) + gc);
            if r < band && c < layout.size {
                img.set(r, c, ink);
            }
        }
    }
}

fn draw_object(img: &mut Image, layout: RegionLayout, shape: &str, rng: &mut ChaCha8Rng) {
    let (bg, ink) = contrasting_pair(rng);
    let cols = layout.object_cols();
    let rows = layout.band_height()..layout.size;
    let cx = (cols.start + cols.end) as f64 / 2.0 - 0.5;
    let cy = (rows.start + rows.end) as f64 / 2.0 - 0.5;
    let radius = rng.gen_range(6.0..7.0);
    for r in rows {
        for c in cols.clone() {
            let on = object_mask(shape, c as f64 - cx, r as f64 - cy, radius);
            img.set(r, c, if on { ink } else { bg });
        }
    }
}

fn draw_action(img: &mut Image, layout: RegionLayout, motif: &str, rng: &mut ChaCha8Rng) {
    let (bg, ink) = contrasting_pair(rng);
    let phase = rng.gen_range(0..2);
    let cols = layout.object_cols();
    for r in layout.band_height()..layout.size {
        for c in (0..cols.start).chain(cols.end..layout.size) {
            let x = if c < cols.start { c } else { c - cols.end };
            let y = r - layout.band_height();
            let on = action_mask(motif, x, y, phase);
            img.set(r, c, if on { ink } else { bg });
        }
    }
}

/// Renders the image for a fixed label triple.
///
/// Each region draws from its own random stream derived from `seed`, so
/// changing one label leaves the pixels of the other two regions untouched.
pub fn render_image(labels: &TaskLabels, seed: u64, size: usize) -> Image {
    let layout = RegionLayout::new(size);
    let mut img = Image::filled(size, [0, 0, 0]);
    draw_text(&mut img, layout, &labels.scene_text, &mut stream(seed, TEXT_STREAM));
    draw_object(&mut img, layout, &labels.object, &mut stream(seed, OBJECT_STREAM));
    draw_action(&mut img, layout, &labels.action, &mut stream(seed, ACTION_STREAM));
    img
}

/// Samples a label triple from `seed`, renders it, and attaches a caption.
pub fn render_example(
    vocab: &Vocabulary,
    image_id: u64,
    seed: u64,
    size: usize,
    policy: &CaptionPolicy,
) -> Result<MultiTaskExample> {
    vocab.validate()?;
    let mut rng = stream(seed, LABEL_STREAM);
    let mut pick = |task| {
        let pool = vocab.labels(task);
        pool[rng.gen_range(0..pool.len())].clone()
    };
    let labels = TaskLabels {
        object: pick(TaskId::Object),
        action: pick(TaskId::Action),
        scene_text: pick(TaskId::SceneText),
    };
    let image = render_image(&labels, seed, size);
    let task = policy.pick_task(image_id, seed)?;
    let caption = super::wrap_caption(labels.get(task));
    Ok(MultiTaskExample {
        image_id,
        image,
        labels,
        caption,
        seed,
    })
}
