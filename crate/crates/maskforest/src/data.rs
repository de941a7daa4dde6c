//! Class masks, PGM/PPM image I/O, block padding and the two toy dataset
//! generators.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mask value marking pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// A 2-D grid of class indices (0..classes), with 255 = ignore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn filled(width: usize, height: usize, value: u8) -> Result<ClassMask> {
        if width == 0 || height == 0 {
            return Err(Error::contract("mask dimensions must be >= 1"));
        }
        Ok(ClassMask {
            width,
            height,
            data: vec![value; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<ClassMask> {
        if width == 0 || height == 0 {
            return Err(Error::contract("mask dimensions must be >= 1"));
        }
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "{} bytes for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(ClassMask {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Every value must be a class index below `classes` or the ignore
    /// marker.
    pub fn validate_classes(&self, classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE && v as usize >= classes {
                return Err(Error::contract(format!(
                    "mask value {v} at pixel {} exceeds class count {classes}",
                    i
                )));
            }
        }
        Ok(())
    }

    /// Smallest class count covering the mask (ignoring 255); at least 1.
    pub fn observed_classes(&self) -> usize {
        self.data
            .iter()
            .filter(|v| **v != IGNORE)
            .map(|&v| v as usize + 1)
            .max()
            .unwrap_or(1)
    }

    /// Pad right/bottom with the ignore value to the next block multiple.
    pub fn pad_to_blocks(&self, block_size: usize) -> Result<ClassMask> {
        if block_size == 0 {
            return Err(Error::contract("block_size must be >= 1"));
        }
        let pw = self.width.div_ceil(block_size) * block_size;
        let ph = self.height.div_ceil(block_size) * block_size;
        if pw == self.width && ph == self.height {
            return Ok(self.clone());
        }
        let mut out = ClassMask::filled(pw, ph, IGNORE)?;
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, y));
            }
        }
        Ok(out)
    }
}

// --- PNM I/O ------------------------------------------------------------

/// Skip whitespace and `#` comments, returning the next token start.
fn skip_pnm_separators(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_pnm_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let start = skip_pnm_separators(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::parse(format!(
            "expected {what} at byte offset {start}"
        )));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("digits are ascii");
    let value: usize = text
        .parse()
        .map_err(|_| Error::parse(format!("bad {what} '{text}' at byte offset {start}")))?;
    Ok((value, end))
}

/// Parse a binary PGM (P5, maxval 255); pixel values are class indices.
pub fn load_pgm(bytes: &[u8]) -> Result<ClassMask> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::parse("not a binary PGM: missing P5 magic"));
    }
    let (width, pos) = read_pnm_number(bytes, 2, "width")?;
    let (height, pos) = read_pnm_number(bytes, pos, "height")?;
    let (maxval, pos) = read_pnm_number(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::parse(format!("PGM maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(format!(
            "missing raster separator at byte offset {pos}"
        )));
    }
    let start = pos + 1;
    let need = width * height;
    let got = bytes.len() - start;
    if got < need {
        return Err(Error::parse(format!(
            "raster truncated at byte offset {}: need {need} bytes, have {got}",
            bytes.len()
        )));
    }
    ClassMask::from_vec(width, height, bytes[start..start + need].to_vec())
}

/// Encode as binary PGM (P5, maxval 255). Round-trips [`load_pgm`] exactly.
pub fn save_pgm(mask: &ClassMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

pub fn read_pgm_file(path: &std::path::Path) -> Result<ClassMask> {
    load_pgm(&std::fs::read(path)?)
}

pub fn write_pgm_file(path: &std::path::Path, mask: &ClassMask) -> Result<()> {
    Ok(std::fs::write(path, save_pgm(mask))?)
}

/// An 8-bit RGB raster, written as binary PPM (P6).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> RgbImage {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let base = (y * self.width + x) * 3;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let base = (y * self.width + x) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

pub fn save_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn write_ppm_file(path: &std::path::Path, img: &RgbImage) -> Result<()> {
    Ok(std::fs::write(path, save_ppm(img))?)
}

// --- Palette ------------------------------------------------------------

/// Class color: the bits of the class index select the RGB cube corner
/// (bit 0 -> red, bit 1 -> green, bit 2 -> blue), so class 0 is black and
/// class 7 white. The ignore value renders mid-gray.
pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE {
        return [128, 128, 128];
    }
    let bits = class & 7;
    [
        if bits & 1 != 0 { 255 } else { 0 },
        if bits & 2 != 0 { 255 } else { 0 },
        if bits & 4 != 0 { 255 } else { 0 },
    ]
}

pub fn mask_to_rgb(mask: &ClassMask) -> RgbImage {
    let mut img = RgbImage::new(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            img.set(x, y, class_color(mask.get(x, y)));
        }
    }
    img
}

// --- Toy dataset generators ----------------------------------------------

/// Configuration of the toy generators.
#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub image_size: usize,
    /// Number of classes; the palette supports up to 8 (RGB cube corners).
    pub classes: usize,
    /// Inclusive range for the number of circles per image.
    pub circle_count: (usize, usize),
    /// Range for circle radii in pixels.
    pub circle_radius: (f64, f64),
    /// Split positions are drawn from this fraction range of the extent.
    pub split_range: (f64, f64),
    /// Minimum vertical distance between the two horizontal splits of the
    /// partition toy, in pixels. Keeping them at least one block row apart
    /// keeps every block exactly representable by the depth-2 trees.
    pub min_split_gap: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            image_size: 128,
            classes: 8,
            circle_count: (5, 12),
            circle_radius: (8.0, 32.0),
            split_range: (0.25, 0.75),
            min_split_gap: 8.0,
        }
    }
}

/// Paint a disk: pixels whose centers lie within radius `r` of (cx, cy).
pub fn draw_circle(mask: &mut ClassMask, cx: f64, cy: f64, r: f64, class: u8) {
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(mask.width as f64)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(mask.height as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                mask.set(x, y, class);
            }
        }
    }
}

/// Random circles over a class-0 background; later circles overdraw earlier
/// ones and the background class is never used for a circle.
pub fn gen_circles_toy(config: &ToyConfig, seed: u64) -> Result<(ClassMask, RgbImage)> {
    if config.classes < 2 {
        return Err(Error::contract("circle toy needs at least 2 classes"));
    }
    let size = config.image_size;
    let mut mask = ClassMask::filled(size, size, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(config.circle_count.0..=config.circle_count.1);
    for _ in 0..count {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(config.circle_radius.0..config.circle_radius.1);
        let class = rng.random_range(1..config.classes) as u8;
        draw_circle(&mut mask, cx, cy, r, class);
    }
    let vis = mask_to_rgb(&mask);
    Ok((mask, vis))
}

/// The split positions and region classes behind a partition-toy mask.
/// Exposed so tests can rebuild the mask with a hand-constructed tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionToySample {
    /// Vertical boundary in pixels.
    pub x_split: f64,
    /// Horizontal boundary of the left segment.
    pub y_split_left: f64,
    /// Horizontal boundary of the right segment.
    pub y_split_right: f64,
    /// Classes of the four regions: [left-top, left-bottom, right-top,
    /// right-bottom].
    pub region_classes: [u8; 4],
}

/// One vertical split, then an independent horizontal split per side.
/// Neighboring regions always get distinct classes, so each image shows 3
/// or 4 distinct classes and every boundary is visible. Classes meeting at
/// a T-junction corner are kept distinct as well: with a shared class
/// across a junction the soft region blending cannot reproduce the corner
/// exactly, which would break the dataset's exact-representability
/// guarantee.
pub fn gen_partition_toy(config: &ToyConfig, seed: u64) -> Result<(ClassMask, PartitionToySample)> {
    if config.classes < 4 {
        return Err(Error::contract("partition toy needs at least 4 classes"));
    }
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = size as f64;
    let (lo, hi) = config.split_range;
    if config.min_split_gap >= (hi - lo) * extent {
        return Err(Error::contract(format!(
            "min_split_gap {} cannot be met within the split range",
            config.min_split_gap
        )));
    }
    let x_split = rng.random_range(lo * extent..hi * extent);
    let y_split_left = rng.random_range(lo * extent..hi * extent);
    let y_split_right = loop {
        let y = rng.random_range(lo * extent..hi * extent);
        if (y - y_split_left).abs() >= config.min_split_gap {
            break y;
        }
    };
    let classes = config.classes as u8;
    let lt = rng.random_range(0..classes);
    let rt = loop {
        let c = rng.random_range(0..classes);
        if c != lt {
            break c;
        }
    };
    let lb = loop {
        let c = rng.random_range(0..classes);
        // left-bottom touches right-top at the corner of the left split
        // when the left split sits above the right one
        if c != lt && (y_split_left > y_split_right || c != rt) {
            break c;
        }
    };
    let rb = loop {
        let c = rng.random_range(0..classes);
        // right-bottom touches left-top when the right split sits above
        if c != rt && c != lb && (y_split_left < y_split_right || c != lt) {
            break c;
        }
    };
    let sample = PartitionToySample {
        x_split,
        y_split_left,
        y_split_right,
        region_classes: [lt, lb, rt, rb],
    };
    let mut mask = ClassMask::filled(size, size, 0)?;
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let class = if px < x_split {
                if py < y_split_left {
                    lt
                } else {
                    lb
                }
            } else if py < y_split_right {
                rt
            } else {
                rb
            };
            mask.set(x, y, class);
        }
    }
    Ok((mask, sample))
}
