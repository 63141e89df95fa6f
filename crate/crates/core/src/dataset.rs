//! Synthetic clarity/segmentation dataset.
//!
//! Each scene is a textured background with one to three coloured sprites and
//! an exact binary mask. Every scene is emitted clean (level 0) and blurred at
//! levels 1..=9 (optionally 10) with a separable Gaussian whose sigma grows
//! linearly with the level; the clarity label decreases linearly from 10.
//!
//! On disk:
//!
//! ```text
//! <dir>/images/<id>.png    RGB8
//! <dir>/masks/<scene>.png  L8, 0 = background, 255 = foreground
//! <dir>/manifest.csv       id,image,mask,clarity_score,blur_level,split
//! <dir>/meta.json
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GENERATOR_VERSION: &str = "covernet-synth/1";
pub const MAX_LEVEL: u8 = 10;
pub const DEFAULT_CANVAS: usize = 128;
pub const MANIFEST_HEADER: [&str; 6] = ["id", "image", "mask", "clarity_score", "blur_level", "split"];
const MASK_THRESHOLD: u8 = 128;
const MIN_PROPORTION: f64 = 0.01;
const MAX_PROPORTION: f64 = 0.4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("record {id}: missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("record {id}: mask is not an 8-bit grayscale image")]
    NonBinaryMask { id: String },
    #[error("manifest line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("manifest has {rows} rows but metadata declares {declared}")]
    CountMismatch { rows: usize, declared: usize },
    #[error("metadata: {0}")]
    Meta(String),
    #[error("blur level {0} outside 0..=10")]
    LevelOutOfRange(u8),
    #[error("crop {size} larger than {width}x{height} canvas")]
    CropTooLarge { size: usize, width: usize, height: usize },
    #[error("need at least 2 scenes, got {0}")]
    TooFewScenes(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Blur strength and label quantization per distortion level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionMaps {
    /// `sigma(level) = sigma_per_level * level`.
    pub sigma_per_level: f64,
    /// `score(level) = score_max - score_step * level`.
    pub score_max: f64,
    pub score_step: f64,
}

impl Default for DistortionMaps {
    fn default() -> Self {
        DistortionMaps {
            sigma_per_level: 0.5,
            score_max: 10.0,
            score_step: 0.9,
        }
    }
}

impl DistortionMaps {
    pub fn sigma(&self, level: u8) -> Result<f64, DatasetError> {
        check_level(level)?;
        Ok(self.sigma_per_level * level as f64)
    }

    pub fn score(&self, level: u8) -> Result<f64, DatasetError> {
        check_level(level)?;
        Ok(self.score_max - self.score_step * level as f64)
    }
}

fn check_level(level: u8) -> Result<(), DatasetError> {
    if level > MAX_LEVEL {
        Err(DatasetError::LevelOutOfRange(level))
    } else {
        Ok(())
    }
}

/// Clarity score of a blur level under the default map.
pub fn clarity_label(level: u8) -> Result<f64, DatasetError> {
    DistortionMaps::default().score(level)
}

/// One output of the splitmix64 generator: the `index`-th value of the
/// stream started at `seed`. Used to derive per-scene seeds.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ----------------------------------------------------------------------
// Scenes
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpriteShape {
    Ellipse { rx: f64, ry: f64 },
    /// Vertices in sprite-local coordinates, counter-clockwise by angle.
    Polygon { vertices: Vec<(f64, f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    /// Centre as `(x, y)` in pixels.
    pub center: (f64, f64),
    /// Radius of the bounding circle in pixels.
    pub scale: f64,
    pub orientation: f64,
    pub shape: SpriteShape,
    pub color: [u8; 3],
}

impl Sprite {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.orientation.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        match &self.shape {
            SpriteShape::Ellipse { rx, ry } => (lx / rx).powi(2) + (ly / ry).powi(2) <= 1.0,
            SpriteShape::Polygon { vertices } => point_in_polygon(lx, ly, vertices),
        }
    }
}

/// Even-odd ray casting test.
pub fn point_in_polygon(x: f64, y: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub seed: u64,
    pub size: usize,
    pub sprites: Vec<Sprite>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub layout: SceneLayout,
    pub image: RgbImage,
    /// 0 = background, 255 = foreground.
    pub mask: GrayImage,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn random_sprite(rng: &mut ChaCha8Rng, size: f64) -> Sprite {
    let scale = rng.random_range(0.09..0.2) * size;
    let margin = scale + 1.0;
    let center = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
    let orientation = rng.random_range(0.0..std::f64::consts::TAU);
    let shape = if rng.random_bool(0.5) {
        SpriteShape::Ellipse {
            rx: scale,
            ry: scale * rng.random_range(0.6..1.0),
        }
    } else {
        let n = rng.random_range(3..=7usize);
        let vertices = (0..n)
            .map(|i| {
                let angle = (i as f64 + rng.random_range(-0.3..0.3)) * std::f64::consts::TAU / n as f64;
                let r = scale * rng.random_range(0.7..1.0);
                (r * angle.cos(), r * angle.sin())
            })
            .collect();
        SpriteShape::Polygon { vertices }
    };
    let hue = rng.random_range(0.0..360.0);
    let rgb = hsv_to_rgb(hue, rng.random_range(0.8..1.0), rng.random_range(0.75..1.0));
    Sprite {
        center,
        scale,
        orientation,
        shape,
        color: rgb.map(|v| v.round() as u8),
    }
}

fn rasterize_mask(sprites: &[Sprite], size: usize) -> GrayImage {
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        Luma([if sprites.iter().any(|s| s.contains(px, py)) { 255 } else { 0 }])
    })
}

fn foreground_fraction(mask: &GrayImage) -> f64 {
    mask.pixels().filter(|p| p[0] != 0).count() as f64 / (mask.width() * mask.height()) as f64
}

/// Piecewise-constant luminance offsets on a square grid of random pitch
/// and phase. Hard tile edges give blur a measurable edge width everywhere.
struct TileLayer {
    cell: f64,
    offset: (f64, f64),
    cols: usize,
    values: Vec<f64>,
}

impl TileLayer {
    fn random(rng: &mut ChaCha8Rng, size: usize, cell: std::ops::Range<f64>, amplitude: f64) -> Self {
        let cell = rng.random_range(cell);
        let offset = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
        let cols = (size as f64 / cell).ceil() as usize + 2;
        let values = (0..cols * cols).map(|_| rng.random_range(-amplitude..amplitude)).collect();
        TileLayer {
            cell,
            offset,
            cols,
            values,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let tx = ((x as f64 + self.offset.0) / self.cell) as usize;
        let ty = ((y as f64 + self.offset.1) / self.cell) as usize;
        self.values[ty * self.cols + tx]
    }
}

/// Deterministic procedural scene of a `size x size` canvas.
pub fn generate_scene(seed: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;

    // Smooth low-frequency field: muted colours on a coarse grid, bilinearly
    // interpolated.
    const GRID: usize = 5;
    let grid: Vec<[f64; 3]> = (0..GRID * GRID)
        .map(|_| {
            let gray = rng.random_range(70.0..170.0);
            [0, 1, 2].map(|_| gray + rng.random_range(-15.0..15.0))
        })
        .collect();
    let tiles = [
        TileLayer::random(&mut rng, size, 4.0..7.0, 16.0),
        TileLayer::random(&mut rng, size, 10.0..16.0, 14.0),
    ];
    let freq = rng.random_range(1.6..2.5);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let (sprites, mask) = loop {
        let count = rng.random_range(1..=3usize);
        let sprites: Vec<Sprite> = (0..count).map(|_| random_sprite(&mut rng, sz)).collect();
        let mask = rasterize_mask(&sprites, size);
        let frac = foreground_fraction(&mask);
        if (MIN_PROPORTION..=MAX_PROPORTION).contains(&frac) {
            break (sprites, mask);
        }
    };

    let (ca, sa) = (angle.cos(), angle.sin());
    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f64 + 0.5) / sz * (GRID - 1) as f64;
            let gy = (y as f64 + 0.5) / sz * (GRID - 1) as f64;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(GRID - 1), (y0 + 1).min(GRID - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let grating = (((x as f64) * ca + (y as f64) * sa) * freq + phase).sin();
            let (fine, coarse) = (tiles[0].at(x, y), tiles[1].at(x, y));
            let mut px = [0.0f64; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let top = grid[y0 * GRID + x0][ch] * (1.0 - fx) + grid[y0 * GRID + x1][ch] * fx;
                let bot = grid[y1 * GRID + x0][ch] * (1.0 - fx) + grid[y1 * GRID + x1][ch] * fx;
                *v = top * (1.0 - fy) + bot * fy + 12.0 * grating + fine + coarse;
            }
            let noise = rng.random_range(-10.0..10.0);
            px.iter_mut().for_each(|v| *v += noise);

            // Sprites in painter's order, edges softened by 4x4 supersampling.
            for sprite in &sprites {
                if ((x as f64 + 0.5 - sprite.center.0).hypot(y as f64 + 0.5 - sprite.center.1)) > sprite.scale + 1.0 {
                    continue;
                }
                let mut covered = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let (qx, qy) = (x as f64 + (sx as f64 + 0.5) / 4.0, y as f64 + (sy as f64 + 0.5) / 4.0);
                        covered += usize::from(sprite.contains(qx, qy));
                    }
                }
                if covered == 0 {
                    continue;
                }
                let alpha = covered as f64 / 16.0;
                let texture = 10.0 * grating + 0.8 * (fine + noise);
                for (ch, v) in px.iter_mut().enumerate() {
                    *v = *v * (1.0 - alpha) + (sprite.color[ch] as f64 + texture) * alpha;
                }
            }
            image.put_pixel(x as u32, y as u32, Rgb(px.map(quantize)));
        }
    }

    Scene {
        layout: SceneLayout { seed, size, sprites },
        image,
        mask,
    }
}

/// Round half away from zero and saturate to 8 bits.
fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

// ----------------------------------------------------------------------
// Distortion
// ----------------------------------------------------------------------

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge clamping at `sigma`.
pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let raw = image.as_raw();
    let at = |x: i64, y: i64, ch: usize| raw[((y * w + x) * 3) as usize + ch] as f64;

    let mut horizontal = vec![0.0f64; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x + i as i64 - radius).clamp(0, w - 1);
                    acc += k * at(sx, y, ch);
                }
                horizontal[((y * w + x) * 3) as usize + ch] = acc;
            }
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0f64; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y + i as i64 - radius).clamp(0, h - 1);
                    *v += k * horizontal[((sy * w + x) * 3) as usize + ch];
                }
            }
            out.put_pixel(x as u32, y as u32, Rgb(px.map(quantize)));
        }
    }
    out
}

/// Blurs `image` to distortion `level` (1..=10).
pub fn distort(image: &RgbImage, level: u8, maps: &DistortionMaps) -> Result<RgbImage, DatasetError> {
    if level == 0 {
        return Err(DatasetError::LevelOutOfRange(level));
    }
    Ok(gaussian_blur(image, maps.sigma(level)?))
}

/// Mean squared response of the 4-neighbour Laplacian over interior pixels,
/// averaged across channels.
pub fn high_frequency_energy(image: &RgbImage) -> f64 {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw = image.as_raw();
    let at = |x: usize, y: usize, ch: usize| raw[(y * w + x) * 3 + ch] as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for ch in 0..3 {
                let lap = 4.0 * at(x, y, ch) - at(x - 1, y, ch) - at(x + 1, y, ch) - at(x, y - 1, ch) - at(x, y + 1, ch);
                total += lap * lap;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// ----------------------------------------------------------------------
// Samples and manifests
// ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scene: String,
    pub image: RgbImage,
    /// 0 = background, 255 = foreground.
    pub mask: GrayImage,
    pub clarity_score: f64,
    pub blur_level: u8,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub clarity_score: f64,
    pub blur_level: u8,
    pub split: Split,
}

impl Record {
    /// Scene identifier, the stem of the shared mask file.
    pub fn scene(&self) -> &str {
        Path::new(&self.mask)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.mask)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub train: usize,
    pub test: usize,
    pub clean: usize,
    pub distorted: usize,
}

impl Counts {
    fn of(records: &[Record]) -> Self {
        let mut c = Counts {
            total: records.len(),
            ..Counts::default()
        };
        for r in records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Test => c.test += 1,
            }
            if r.blur_level == 0 {
                c.clean += 1;
            } else {
                c.distorted += 1;
            }
        }
        c
    }

    /// `distorted:clean` reduced to lowest terms, e.g. `"9:1"`.
    pub fn ratio(&self) -> String {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(self.distorted, self.clean).max(1);
        format!("{}:{}", self.distorted / g, self.clean / g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator_version: String,
    pub master_seed: u64,
    pub n_scenes: usize,
    pub canvas_size: usize,
    pub include_level_10: bool,
    pub scene_seed_mixer: String,
    pub maps: DistortionMaps,
    pub counts: Counts,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub n_scenes: usize,
    pub master_seed: u64,
    pub canvas_size: usize,
    pub include_level_10: bool,
    pub maps: DistortionMaps,
}

impl DatasetOptions {
    pub fn new(n_scenes: usize, master_seed: u64) -> Self {
        DatasetOptions {
            n_scenes,
            master_seed,
            canvas_size: DEFAULT_CANVAS,
            include_level_10: false,
            maps: DistortionMaps::default(),
        }
    }

    fn levels(&self) -> std::ops::RangeInclusive<u8> {
        0..=if self.include_level_10 { MAX_LEVEL } else { MAX_LEVEL - 1 }
    }
}

/// Test-split membership per scene: a seeded permutation puts
/// `max(1, round(n / 10))` scenes in the test split.
pub fn scene_splits(n_scenes: usize, master_seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master_seed, u64::MAX));
    order.shuffle(&mut rng);
    let n_test = ((n_scenes as f64 / 10.0).round() as usize).max(1);
    let mut splits = vec![Split::Train; n_scenes];
    for &i in &order[..n_test.min(n_scenes)] {
        splits[i] = Split::Test;
    }
    splits
}

pub fn scene_name(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates every sample of the dataset in memory, ordered by scene then
/// level.
pub fn generate_samples(options: &DatasetOptions) -> Result<Vec<Sample>, DatasetError> {
    if options.n_scenes < 2 {
        return Err(DatasetError::TooFewScenes(options.n_scenes));
    }
    let splits = scene_splits(options.n_scenes, options.master_seed);
    let mut samples = Vec::with_capacity(options.n_scenes * 11);
    for (index, &split) in splits.iter().enumerate() {
        let scene = generate_scene(splitmix64(options.master_seed, index as u64), options.canvas_size);
        let name = scene_name(index);
        for level in options.levels() {
            let image = if level == 0 {
                scene.image.clone()
            } else {
                distort(&scene.image, level, &options.maps)?
            };
            samples.push(Sample {
                id: format!("{name}_l{level:02}"),
                scene: name.clone(),
                image,
                mask: scene.mask.clone(),
                clarity_score: options.maps.score(level)?,
                blur_level: level,
                split,
            });
        }
    }
    Ok(samples)
}

fn format_score(score: f64) -> String {
    format!("{score:.4}")
}

/// Generates the dataset and writes images, masks, manifest and metadata
/// under `out_dir`.
pub fn build_dataset(options: &DatasetOptions, out_dir: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let dir = out_dir.as_ref();
    let samples = generate_samples(options)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }

    let mut records = Vec::with_capacity(samples.len());
    let mut written_masks = HashSet::new();
    for s in &samples {
        let image_rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.scene);
        let image_path = dir.join(&image_rel);
        s.image.save(&image_path).map_err(|source| DatasetError::Image {
            path: image_path.clone(),
            source,
        })?;
        if written_masks.insert(s.scene.clone()) {
            let mask_path = dir.join(&mask_rel);
            s.mask.save(&mask_path).map_err(|source| DatasetError::Image {
                path: mask_path.clone(),
                source,
            })?;
        }
        records.push(Record {
            id: s.id.clone(),
            image: image_rel,
            mask: mask_rel,
            // Stored at the precision the manifest carries.
            clarity_score: format_score(s.clarity_score).parse().expect("formatted float"),
            blur_level: s.blur_level,
            split: s.split,
        });
    }

    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&manifest_path)
        .map_err(|e| csv_err(&manifest_path, e))?;
    writer.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&manifest_path, e))?;
    for r in &records {
        writer
            .write_record([
                r.id.as_str(),
                r.image.as_str(),
                r.mask.as_str(),
                &format_score(r.clarity_score),
                &r.blur_level.to_string(),
                &r.split.to_string(),
            ])
            .map_err(|e| csv_err(&manifest_path, e))?;
    }
    writer.flush().map_err(io_err(&manifest_path))?;

    let meta = DatasetMeta {
        generator_version: GENERATOR_VERSION.into(),
        master_seed: options.master_seed,
        n_scenes: options.n_scenes,
        canvas_size: options.canvas_size,
        include_level_10: options.include_level_10,
        scene_seed_mixer: "splitmix64".into(),
        maps: options.maps,
        counts: Counts::of(&records),
    };
    let meta_path = dir.join("meta.json");
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;

    Ok(Manifest {
        dir: dir.to_path_buf(),
        meta,
        records,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Reads `manifest.csv` and `meta.json`, checking that every referenced file
/// exists.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| DatasetError::Meta(e.to_string()))?;

    let manifest_path = dir.join("manifest.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&manifest_path)
        .map_err(|e| csv_err(&manifest_path, e))?;
    let header = reader.headers().map_err(|e| csv_err(&manifest_path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DatasetError::MalformedRow {
            line: 1,
            reason: format!("header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| DatasetError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(DatasetError::MalformedRow {
                line,
                reason: format!("expected 6 fields, found {}", row.len()),
            });
        }
        let malformed = |reason: String| DatasetError::MalformedRow { line, reason };
        let clarity_score: f64 = row[3].parse().map_err(|_| malformed(format!("bad clarity_score {:?}", &row[3])))?;
        let blur_level: u8 = row[4].parse().map_err(|_| malformed(format!("bad blur_level {:?}", &row[4])))?;
        if blur_level > MAX_LEVEL {
            return Err(malformed(format!("blur_level {blur_level} out of range")));
        }
        let split: Split = row[5].parse().map_err(malformed)?;
        let record = Record {
            id: row[0].to_string(),
            image: row[1].to_string(),
            mask: row[2].to_string(),
            clarity_score,
            blur_level,
            split,
        };
        for rel in [&record.image, &record.mask] {
            let path = dir.join(rel);
            if !path.is_file() {
                return Err(DatasetError::MissingFile { id: record.id, path });
            }
        }
        records.push(record);
    }
    if records.len() != meta.counts.total {
        return Err(DatasetError::CountMismatch {
            rows: records.len(),
            declared: meta.counts.total,
        });
    }
    Ok(Manifest {
        dir: dir.to_path_buf(),
        meta,
        records,
    })
}

/// Decodes one record's image and mask; the mask is binarized at 128.
pub fn load_sample(manifest: &Manifest, record: &Record) -> Result<Sample, DatasetError> {
    let open = |rel: &str| {
        let path = manifest.dir.join(rel);
        if !path.is_file() {
            return Err(DatasetError::MissingFile {
                id: record.id.clone(),
                path,
            });
        }
        image::open(&path).map_err(|source| DatasetError::Image { path, source })
    };
    let image = open(&record.image)?.to_rgb8();
    let mask = match open(&record.mask)? {
        image::DynamicImage::ImageLuma8(m) => m,
        _ => return Err(DatasetError::NonBinaryMask { id: record.id.clone() }),
    };
    let mask = GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        Luma([if mask.get_pixel(x, y)[0] >= MASK_THRESHOLD { 255 } else { 0 }])
    });
    if mask.dimensions() != image.dimensions() {
        return Err(DatasetError::NonBinaryMask { id: record.id.clone() });
    }
    Ok(Sample {
        id: record.id.clone(),
        scene: record.scene().to_string(),
        image,
        mask,
        clarity_score: record.clarity_score,
        blur_level: record.blur_level,
        split: record.split,
    })
}

/// Loads every sample of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>, DatasetError> {
    manifest.split(split).map(|r| load_sample(manifest, r)).collect()
}

fn crop(sample: &Sample, x: u32, y: u32, w: u32, h: u32) -> Sample {
    Sample {
        image: image::imageops::crop_imm(&sample.image, x, y, w, h).to_image(),
        mask: image::imageops::crop_imm(&sample.mask, x, y, w, h).to_image(),
        ..sample.clone()
    }
}

/// Square crop at an offset drawn uniformly from the valid range; image and
/// mask share the offset.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample, DatasetError> {
    let (w, h) = sample.image.dimensions();
    if size as u32 > w || size as u32 > h || size == 0 {
        return Err(DatasetError::CropTooLarge {
            size,
            width: w as usize,
            height: h as usize,
        });
    }
    let x = rng.random_range(0..=w - size as u32);
    let y = rng.random_range(0..=h - size as u32);
    Ok(crop(sample, x, y, size as u32, size as u32))
}

/// Centre crop to the largest extents divisible by `multiple`.
pub fn center_crop_to_multiple(sample: &Sample, multiple: usize) -> Result<Sample, DatasetError> {
    let (w, h) = sample.image.dimensions();
    let m = multiple as u32;
    let (cw, ch) = (w / m * m, h / m * m);
    if cw == 0 || ch == 0 {
        return Err(DatasetError::CropTooLarge {
            size: multiple,
            width: w as usize,
            height: h as usize,
        });
    }
    Ok(crop(sample, (w - cw) / 2, (h - ch) / 2, cw, ch))
}
