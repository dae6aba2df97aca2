//! Grayscale micrograph representation, file I/O, neighborhood windows,
//! label masks, 4-connected region extraction and patch harvesting.
//!
//! Two on-disk formats are understood: binary PGM (`P5`, maxval ≤ 255) and
//! 8-bit grayscale PNG. Anything else (RGB, palette, 16-bit) is rejected.
//! Label masks are stored as PGM with class ids `0..k` and 255 marking
//! unlabeled pixels.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// A row-major grayscale image with values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Micrograph {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub id: String,
    /// Physical length per pixel relative to the catalog's reference scale.
    pub scale: f64,
}

impl Micrograph {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("micrograph dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel count {} does not match {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 255]")));
        }
        Ok(Micrograph {
            width,
            height,
            pixels,
            id: id.into(),
            scale: 1.0,
        })
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8], id: impl Into<String>) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64).collect(), id)
    }

    /// Pixel values clamped and rounded to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Copy of the `size`×`size` window with top-left corner at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Micrograph> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({row},{col}) exceeds {}x{} image",
                height, width, self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for r in row..row + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + width]);
        }
        Ok(Micrograph {
            width,
            height,
            pixels,
            id: self.id.clone(),
            scale: self.scale,
        })
    }

    /// Bilinear resampling by `factor` (> 1 enlarges). Sample positions use
    /// pixel-center alignment.
    pub fn resample(&self, factor: f64) -> Result<Micrograph> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::invalid("resample factor must be positive"));
        }
        let width = ((self.width as f64) * factor).round().max(1.0) as usize;
        let height = ((self.height as f64) * factor).round().max(1.0) as usize;
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = y - y0 as f64;
            for c in 0..width {
                let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = x - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                pixels.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Ok(Micrograph {
            width,
            height,
            pixels,
            id: self.id.clone(),
            scale: self.scale / factor,
        })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Reads a PGM (P5) or 8-bit grayscale PNG file.
pub fn load_micrograph(path: impl AsRef<Path>) -> Result<Micrograph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (width, height, data) = decode_gray8(&bytes)?;
    Micrograph::from_bytes(width, height, &data, id)
}

/// Writes the micrograph as PGM or PNG depending on the extension
/// (`.png` → PNG, anything else → PGM).
pub fn save_micrograph(m: &Micrograph, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(path.as_ref(), m.width, m.height, &m.to_bytes())
}

pub(crate) fn decode_gray8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        Err(Error::UnsupportedFormat("color PPM images are not accepted".into()))
    } else {
        Err(Error::UnsupportedFormat("expected binary PGM (P5) or PNG".into()))
    }
}

pub(crate) fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let is_png = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    let bytes = if is_png {
        encode_png(width, height, data)?
    } else {
        encode_pgm(width, height, data)
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Malformed("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed("bad PGM header field".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}; only 8-bit images are accepted"
        )));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Malformed("missing whitespace after PGM header".into()));
    }
    pos += 1;
    let n = width * height;
    if width == 0 || height == 0 || bytes.len() < pos + n {
        return Err(Error::Malformed("PGM pixel data truncated".into()));
    }
    Ok((width, height, bytes[pos..pos + n].to_vec()))
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        other => Err(Error::UnsupportedFormat(format!(
            "png color type {:?}; only 8-bit grayscale is accepted",
            other.color()
        ))),
    }
}

pub fn encode_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::invalid("png buffer size mismatch"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Malformed(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// One interior pixel and the pixels of its `(2·l_s+1)²` window, center
/// excluded, in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSample {
    pub target: f64,
    pub neighbors: Vec<f64>,
    pub row: usize,
    pub col: usize,
}

/// Number of neighbors in a window of half-width `half_width`.
pub fn neighbor_count(half_width: usize) -> usize {
    (2 * half_width + 1).pow(2) - 1
}

/// Window offsets (dr, dc) in the fixed neighbor order: row-major over the
/// window, center skipped.
pub fn neighbor_offsets(half_width: usize) -> Vec<(isize, isize)> {
    let l = half_width as isize;
    let mut out = Vec::with_capacity(neighbor_count(half_width));
    for dr in -l..=l {
        for dc in -l..=l {
            if dr != 0 || dc != 0 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Fills `out` with the neighbors of (`row`, `col`); the pixel must be interior.
pub(crate) fn fill_neighbors(m: &Micrograph, half_width: usize, row: usize, col: usize, out: &mut Vec<f64>) {
    out.clear();
    for r in row - half_width..=row + half_width {
        let base = r * m.width;
        for c in col - half_width..=col + half_width {
            if r != row || c != col {
                out.push(m.pixels[base + c]);
            }
        }
    }
}

pub fn extract_neighborhoods(m: &Micrograph, half_width: usize) -> Result<Vec<NeighborhoodSample>> {
    check_window(m, half_width)?;
    let l = half_width;
    let mut out = Vec::with_capacity((m.width - 2 * l) * (m.height - 2 * l));
    for row in l..m.height - l {
        for col in l..m.width - l {
            let mut neighbors = Vec::with_capacity(neighbor_count(l));
            fill_neighbors(m, l, row, col, &mut neighbors);
            out.push(NeighborhoodSample {
                target: m.get(row, col),
                neighbors,
                row,
                col,
            });
        }
    }
    Ok(out)
}

pub(crate) fn check_window(m: &Micrograph, half_width: usize) -> Result<()> {
    if half_width < 1 {
        return Err(Error::invalid("neighborhood half-width must be at least 1"));
    }
    if m.width <= 2 * half_width || m.height <= 2 * half_width {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than a {}x{} window",
            m.width,
            m.height,
            2 * half_width + 1,
            2 * half_width + 1
        )));
    }
    Ok(())
}

/// Label value for pixels that carry no class.
pub const UNLABELED: u32 = u32::MAX;
/// Byte used for [`UNLABELED`] in mask files.
pub const UNLABELED_BYTE: u8 = 255;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn filled(width: usize, height: usize, label: u32) -> Self {
        LabelMask {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid("label count does not match mask dimensions"));
        }
        Ok(LabelMask { width, height, labels })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        self.labels[row * self.width + col] = label;
    }

    /// Checks that every labeled pixel is below `class_count`.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.labels.len() != self.width * self.height {
            return Err(Error::invalid("label count does not match mask dimensions"));
        }
        match self
            .labels
            .iter()
            .find(|&&l| l != UNLABELED && l as usize >= class_count)
        {
            Some(l) => Err(Error::invalid(format!("label {l} >= class count {class_count}"))),
            None => Ok(()),
        }
    }

    /// Pixel counts per class id `0..class_count`.
    pub fn class_counts(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for &l in &self.labels {
            if l != UNLABELED && (l as usize) < class_count {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Distinct labeled ids in ascending order.
    pub fn distinct_labels(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != UNLABELED).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|&l| match l {
                UNLABELED => Ok(UNLABELED_BYTE),
                l if l < UNLABELED_BYTE as u32 => Ok(l as u8),
                l => Err(Error::invalid(format!("label {l} cannot be stored in a mask file"))),
            })
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let labels = bytes
            .iter()
            .map(|&b| if b == UNLABELED_BYTE { UNLABELED } else { b as u32 })
            .collect();
        Self::new(width, height, labels)
    }
}

pub fn save_label_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_gray8(path.as_ref(), mask.width, mask.height, &mask.to_bytes()?)
}

pub fn load_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = decode_gray8(&bytes)?;
    LabelMask::from_bytes(w, h, &data)
}

/// A maximal 4-connected set of equally labeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
    /// (top, left, bottom, right), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

impl Region {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Extracts 4-connected components of size ≥ `min_size`, largest first.
/// Equal sizes keep raster order of their first pixel.
pub fn connected_regions(mask: &LabelMask, min_size: usize) -> Result<Vec<Region>> {
    if mask.labels.len() != mask.width * mask.height {
        return Err(Error::invalid("label count does not match mask dimensions"));
    }
    let min_size = min_size.max(1);
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        let label = mask.labels[start];
        if seen[start] || label == UNLABELED {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            top = top.min(r);
            bottom = bottom.max(r);
            left = left.min(c);
            right = right.max(c);
            let mut visit = |n: usize| {
                if !seen[n] && mask.labels[n] == label {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(idx - w);
            }
            if r + 1 < h {
                visit(idx + w);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < w {
                visit(idx + 1);
            }
        }
        if pixels.len() >= min_size {
            pixels.sort_unstable();
            regions.push(Region {
                label,
                pixels,
                bbox: (top, left, bottom, right),
            });
        }
    }
    regions.sort_by(|a, b| b.len().cmp(&a.len()));
    Ok(regions)
}

/// A square window cut from a micrograph.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Patch {
    pub fn to_micrograph(&self, id: impl Into<String>) -> Micrograph {
        Micrograph {
            width: self.size,
            height: self.size,
            pixels: self.pixels.clone(),
            id: id.into(),
            scale: 1.0,
        }
    }
}

/// All `patch_size`² windows on a `stride` lattice (anchored at the region's
/// bounding-box corner) lying entirely inside `region`.
pub fn harvest_patches(m: &Micrograph, region: &Region, patch_size: usize, stride: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 || patch_size > m.width.min(m.height) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {}x{} image",
            m.width, m.height
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let (w, h) = (m.width, m.height);
    // summed-area table of region membership
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    let mut member = vec![0u32; w * h];
    for &(r, c) in &region.pixels {
        if r >= h || c >= w {
            return Err(Error::invalid("region pixel outside image"));
        }
        member[r * w + c] = 1;
    }
    for r in 0..h {
        let mut run = 0;
        for c in 0..w {
            run += member[r * w + c];
            sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + run;
        }
    }
    let inside = |r: usize, c: usize| {
        let (r1, c1) = (r + patch_size, c + patch_size);
        let total = sat[r1 * (w + 1) + c1] + sat[r * (w + 1) + c] - sat[r * (w + 1) + c1] - sat[r1 * (w + 1) + c];
        total as usize == patch_size * patch_size
    };
    let (top, left, bottom, right) = region.bbox;
    let mut out = Vec::new();
    let mut r = top;
    while r + patch_size <= (bottom + 1).min(h) {
        let mut c = left;
        while c + patch_size <= (right + 1).min(w) {
            if inside(r, c) {
                let crop = m.crop(r, c, patch_size, patch_size)?;
                out.push(Patch {
                    row: r,
                    col: c,
                    size: patch_size,
                    pixels: crop.pixels,
                });
            }
            c += stride;
        }
        r += stride;
    }
    Ok(out)
}
