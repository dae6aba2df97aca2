//! Labeled multiphase collages built from homogeneous texture exemplars.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{connected_regions, save_label_mask, save_micrograph, LabelMask, Micrograph};

pub const MAX_REGIONS: usize = 8;
const SPLIT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryStyle {
    Straight,
    Curved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub width: usize,
    pub height: usize,
    pub n_regions: usize,
    pub boundary_style: BoundaryStyle,
    pub seed: u64,
}

/// Splits the image into `n_regions` 4-connected regions with ids
/// `0..n_regions`. Each step cuts one existing region (largest first among
/// random tries) along a random chord; curved style bends the chord into a
/// quadratic Bézier curve.
pub fn make_partition(spec: &PartitionSpec) -> Result<LabelMask> {
    let (w, h, n) = (spec.width, spec.height, spec.n_regions);
    if n == 0 || n > MAX_REGIONS {
        return Err(Error::invalid(format!("n_regions must be in 1..={MAX_REGIONS}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::invalid("partition dimensions must be positive"));
    }
    let mut mask = LabelMask::filled(w, h, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // every region keeps at least this many pixels
    let min_area = (w * h / (4 * n)).max(1);
    for new_id in 1..n as u32 {
        let mut done = false;
        for _ in 0..SPLIT_ATTEMPTS {
            let areas = mask.class_counts(new_id as usize);
            let target = weighted_region(&areas, &mut rng);
            let cut = Cut::random(w, h, spec.boundary_style, &mut rng);
            let mut trial = mask.clone();
            let mut moved = 0;
            for r in 0..h {
                for c in 0..w {
                    if trial.get(r, c) == target && cut.side(r as f64 + 0.5, c as f64 + 0.5) {
                        trial.set(r, c, new_id);
                        moved += 1;
                    }
                }
            }
            if moved < min_area || areas[target as usize] - moved < min_area {
                continue;
            }
            if connected_regions(&trial, 1)?.len() == new_id as usize + 1 {
                mask = trial;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::invalid(format!(
                "could not split a {w}x{h} image into {n} connected regions"
            )));
        }
    }
    Ok(mask)
}

/// Region index drawn with probability proportional to its area.
fn weighted_region(areas: &[usize], rng: &mut ChaCha8Rng) -> u32 {
    let total: usize = areas.iter().sum();
    let mut x = rng.random_range(0..total);
    for (i, &a) in areas.iter().enumerate() {
        if x < a {
            return i as u32;
        }
        x -= a;
    }
    (areas.len() - 1) as u32
}

/// A chord from `a` along unit direction `dir` of length `len`, bowed by
/// `bow` along the normal at its midpoint.
struct Cut {
    a: (f64, f64),
    dir: (f64, f64),
    len: f64,
    bow: f64,
}

impl Cut {
    fn random(w: usize, h: usize, style: BoundaryStyle, rng: &mut ChaCha8Rng) -> Self {
        let (w, h) = (w as f64, h as f64);
        let center = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let dir = (theta.sin(), theta.cos());
        // long enough to cross the whole image from any center
        let half = h.hypot(w);
        let a = (center.0 - dir.0 * half, center.1 - dir.1 * half);
        let bow = match style {
            BoundaryStyle::Straight => 0.0,
            // a Bézier control point offset h puts the curve's apex at h/2
            BoundaryStyle::Curved => rng.random_range(-0.5..0.5) * w.min(h),
        };
        Cut {
            a,
            dir,
            len: 2.0 * half,
            bow,
        }
    }

    /// Quadratic Bézier `A→C→B` with `C` above the chord midpoint sits at
    /// normal offset `2t(1−t)·bow` when the chord coordinate is `t`.
    fn side(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.a.0, x - self.a.1);
        let along = dy * self.dir.0 + dx * self.dir.1;
        let normal = dx * self.dir.0 - dy * self.dir.1;
        let t = (along / self.len).clamp(0.0, 1.0);
        normal > 2.0 * t * (1.0 - t) * self.bow
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    None,
    H,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    /// Counter-clockwise rotation in degrees, a multiple of 90.
    pub rotation: u32,
    pub flip: Flip,
    pub scale: f64,
    /// Top-left corner in the transformed source that maps onto the top-left
    /// of the region's bounding box.
    pub crop: (usize, usize),
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            rotation: 0,
            flip: Flip::None,
            scale: 1.0,
            crop: (0, 0),
        }
    }

    /// Applies rotation, flip and scale (in that order) to `m`.
    pub fn apply(&self, m: &Micrograph) -> Result<Micrograph> {
        if self.rotation % 90 != 0 {
            return Err(Error::invalid("collage rotations must be multiples of 90 degrees"));
        }
        if !(self.scale.is_finite() && self.scale >= 1.0) {
            return Err(Error::invalid("collage scale must be at least 1"));
        }
        let mut out = m.clone();
        for _ in 0..(self.rotation / 90) % 4 {
            out = rot90(&out);
        }
        out = match self.flip {
            Flip::None => out,
            Flip::H => remap(&out, out.width, out.height, |r, c| (r, out.width - 1 - c)),
            Flip::V => remap(&out, out.width, out.height, |r, c| (out.height - 1 - r, c)),
        };
        if self.scale != 1.0 {
            out = out.resample(self.scale)?;
        }
        Ok(out)
    }
}

fn remap(m: &Micrograph, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Micrograph {
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (sr, sc) = src(r, c);
            pixels.push(m.get(sr, sc));
        }
    }
    Micrograph {
        width,
        height,
        pixels,
        id: m.id.clone(),
        scale: m.scale,
    }
}

/// Counter-clockwise quarter turn.
fn rot90(m: &Micrograph) -> Micrograph {
    remap(m, m.height, m.width, |r, c| (c, m.width - 1 - r))
}

/// Pastes region `j` of `partition` from `sources[j]` under `transforms[j]`.
/// The returned mask carries the sources' class ids.
pub fn make_collage(
    sources: &[(u32, Micrograph)],
    partition: &LabelMask,
    transforms: &[TransformSpec],
) -> Result<(Micrograph, LabelMask)> {
    let n = partition.distinct_labels().len();
    if partition.labels.iter().any(|&l| l as usize >= sources.len()) || n != sources.len() {
        return Err(Error::invalid(format!(
            "partition has {n} regions but {} sources were given",
            sources.len()
        )));
    }
    if transforms.len() != sources.len() {
        return Err(Error::invalid("one transform per region is required"));
    }
    let (w, h) = (partition.width, partition.height);
    let bbox = region_bboxes(partition, n);
    let mut layers = Vec::with_capacity(n);
    for (j, ((_, src), t)) in sources.iter().zip(transforms).enumerate() {
        let layer = t.apply(src)?;
        let (top, left, bottom, right) = bbox[j];
        if t.crop.0 + bottom - top >= layer.height || t.crop.1 + right - left >= layer.width {
            return Err(Error::invalid(format!(
                "transformed source {j} ({}x{}) does not cover its region",
                layer.width, layer.height
            )));
        }
        layers.push(layer);
    }
    let mut pixels = Vec::with_capacity(w * h);
    let mut mask = LabelMask::filled(w, h, 0);
    for r in 0..h {
        for c in 0..w {
            let j = partition.get(r, c) as usize;
            let (top, left, ..) = bbox[j];
            let crop = transforms[j].crop;
            pixels.push(layers[j].get(crop.0 + r - top, crop.1 + c - left));
            mask.set(r, c, sources[j].0);
        }
    }
    Ok((Micrograph::new(w, h, pixels, "collage")?, mask))
}

/// Nearest-neighbor rotation of the `size`×`size` window centered on the
/// source center by `degrees` counter-clockwise. The source must contain the
/// whole rotated window, so no padding enters the result.
pub fn rotated_patch(m: &Micrograph, size: usize, degrees: f64) -> Result<Micrograph> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = (m.height as f64 / 2.0, m.width as f64 / 2.0);
    let half = size as f64 / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for col in 0..size {
            let (y, x) = (r as f64 + 0.5 - half, col as f64 + 0.5 - half);
            // inverse rotation back into the source frame
            let sy = cy + y * c - x * s;
            let sx = cx + y * s + x * c;
            let (ry, rx) = (sy.floor(), sx.floor());
            if ry < 0.0 || rx < 0.0 || ry >= m.height as f64 || rx >= m.width as f64 {
                return Err(Error::invalid(format!(
                    "a {size}-pixel window rotated by {degrees} degrees does not fit in {}x{}",
                    m.width, m.height
                )));
            }
            pixels.push(m.get(ry as usize, rx as usize));
        }
    }
    Micrograph::new(size, size, pixels, m.id.clone())
}

/// Source side needed for a `size` window at any rotation.
pub fn rotation_margin(size: usize) -> usize {
    (size as f64 * std::f64::consts::SQRT_2).ceil() as usize + 2
}

/// The 12 in-plane rotations at 30° steps of the centered `size` window.
pub fn rotation_set(m: &Micrograph, size: usize) -> Result<Vec<Micrograph>> {
    (0..12).map(|i| rotated_patch(m, size, 30.0 * i as f64)).collect()
}

/// Replaces every labeled source with its 12 rotated `size` windows.
pub fn rotation_augment(sources: &[(u32, Micrograph)], size: usize) -> Result<Vec<(u32, Micrograph)>> {
    let mut out = Vec::with_capacity(sources.len() * 12);
    for (label, m) in sources {
        out.extend(rotation_set(m, size)?.into_iter().map(|r| (*label, r)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExemplars {
    pub class: u32,
    pub exemplars: Vec<Micrograph>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryChoice {
    Straight,
    Curved,
    /// Straight or curved with equal probability per collage.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollageConfig {
    pub size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub boundary: BoundaryChoice,
    /// Per-region scale drawn uniformly from this interval.
    pub scale_range: (f64, f64),
    /// Chance that a region is scaled at all; unscaled regions keep the
    /// exemplar's pixel-level texture, which resampling blurs.
    pub scale_prob: f64,
    pub rotate: bool,
    pub flip: bool,
}

impl Default for CollageConfig {
    fn default() -> Self {
        CollageConfig {
            size: 64,
            min_regions: 2,
            max_regions: 5,
            boundary: BoundaryChoice::Mixed,
            scale_range: (1.0, 1.0),
            scale_prob: 1.0,
            rotate: true,
            flip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collage {
    pub image: Micrograph,
    pub mask: LabelMask,
    pub classes: Vec<u32>,
}

/// One seeded collage. Regions take distinct classes while there are enough.
pub fn generate_collage(classes: &[ClassExemplars], cfg: &CollageConfig, seed: u64) -> Result<Collage> {
    if classes.is_empty() || classes.iter().any(|c| c.exemplars.is_empty()) {
        return Err(Error::invalid("every class needs at least one exemplar"));
    }
    if cfg.min_regions < 1 || cfg.min_regions > cfg.max_regions {
        return Err(Error::invalid("region range must satisfy 1 <= min <= max"));
    }
    let (lo, hi) = cfg.scale_range;
    if !(1.0 <= lo && lo <= hi) {
        return Err(Error::invalid("scale range must satisfy 1 <= lo <= hi"));
    }
    if !(0.0..=1.0).contains(&cfg.scale_prob) {
        return Err(Error::invalid("scale probability must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_regions..=cfg.max_regions);
    let style = match cfg.boundary {
        BoundaryChoice::Straight => BoundaryStyle::Straight,
        BoundaryChoice::Curved => BoundaryStyle::Curved,
        BoundaryChoice::Mixed if rng.random_bool(0.5) => BoundaryStyle::Curved,
        BoundaryChoice::Mixed => BoundaryStyle::Straight,
    };
    let partition = make_partition(&PartitionSpec {
        width: cfg.size,
        height: cfg.size,
        n_regions: n,
        boundary_style: style,
        seed: rng.random(),
    })?;

    let mut order: Vec<usize> = Vec::with_capacity(n);
    while order.len() < n {
        let mut round: Vec<usize> = (0..classes.len()).collect();
        round.shuffle(&mut rng);
        order.extend(round);
    }
    order.truncate(n);

    let mut sources = Vec::with_capacity(n);
    let mut transforms = Vec::with_capacity(n);
    let extents: Vec<(usize, usize)> = region_bboxes(&partition, n)
        .iter()
        .map(|b| (b.2 - b.0 + 1, b.3 - b.1 + 1))
        .collect();
    for (j, &ci) in order.iter().enumerate() {
        let class = &classes[ci];
        let exemplar = &class.exemplars[rng.random_range(0..class.exemplars.len())];
        let mut t = TransformSpec {
            rotation: if cfg.rotate { 90 * rng.random_range(0..4) } else { 0 },
            flip: match (cfg.flip, rng.random_range(0..3)) {
                (false, _) | (_, 0) => Flip::None,
                (_, 1) => Flip::H,
                _ => Flip::V,
            },
            scale: if hi > lo && rng.random_bool(cfg.scale_prob) {
                rng.random_range(lo..=hi)
            } else {
                lo
            },
            crop: (0, 0),
        };
        let (th, tw) = transformed_size(exemplar, &t);
        let (bh, bw) = extents[j];
        if th < bh || tw < bw {
            return Err(Error::invalid(format!(
                "exemplar of class {} ({}x{}) is too small for a {}x{} collage",
                class.class, exemplar.width, exemplar.height, cfg.size, cfg.size
            )));
        }
        t.crop = (rng.random_range(0..=th - bh), rng.random_range(0..=tw - bw));
        sources.push((class.class, exemplar.clone()));
        transforms.push(t);
    }
    let (image, mask) = make_collage(&sources, &partition, &transforms)?;
    Ok(Collage {
        image,
        mask,
        classes: sources.iter().map(|s| s.0).collect(),
    })
}

/// (top, left, bottom, right) of each region, inclusive.
fn region_bboxes(partition: &LabelMask, n: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut bbox = vec![(usize::MAX, usize::MAX, 0, 0); n];
    for r in 0..partition.height {
        for c in 0..partition.width {
            let b = &mut bbox[partition.get(r, c) as usize];
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
    }
    bbox
}

fn transformed_size(m: &Micrograph, t: &TransformSpec) -> (usize, usize) {
    let (h, w) = if (t.rotation / 90) % 2 == 1 {
        (m.width, m.height)
    } else {
        (m.height, m.width)
    };
    if t.scale == 1.0 {
        (h, w)
    } else {
        let s = |v: usize| ((v as f64) * t.scale).round().max(1.0) as usize;
        (s(h), s(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seed of item `index` in `split`. The split tag enters the mix, so the
/// three seed streams never share a value in practice.
pub fn item_seed(base: u64, split: Split, index: usize) -> u64 {
    let mut z = base ^ ((split as u64 + 1) << 56) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub split: Split,
    pub seed: u64,
    pub collage: Collage,
}

/// Item counts per split; rounding leftovers go to the training split.
pub fn split_counts(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split ratios must be in [0, 1] and sum to 1"));
    }
    let val = (count as f64 * ratios[1]).round() as usize;
    let test = ((count as f64 * ratios[2]).round() as usize).min(count - val);
    Ok([count - val - test, val, test])
}

pub fn build_dataset(
    classes: &[ClassExemplars],
    count: usize,
    cfg: &CollageConfig,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    let counts = split_counts(count, ratios)?;
    let mut items = Vec::with_capacity(count);
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        for i in 0..n {
            let s = item_seed(seed, *split, i);
            items.push(DatasetItem {
                split: *split,
                seed: s,
                collage: generate_collage(classes, cfg, s)?,
            });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub classes: Vec<u32>,
}

/// Writes every item as `<split>/<index>.pgm` plus `<index>.mask.pgm` under
/// `dir`, and `manifest.json` listing them with relative paths.
pub fn write_dataset(items: &[DatasetItem], dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut manifest = Vec::with_capacity(items.len());
    let mut index = [0usize; 3];
    for item in items {
        let sub = item.split.name();
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        let i = &mut index[item.split as usize];
        let image = PathBuf::from(sub).join(format!("{i:05}.pgm"));
        let mask = PathBuf::from(sub).join(format!("{i:05}.mask.pgm"));
        *i += 1;
        save_micrograph(&item.collage.image, dir.join(&image))?;
        save_label_mask(&item.collage.mask, dir.join(&mask))?;
        manifest.push(ManifestEntry {
            image,
            mask,
            split: item.split,
            seed: item.seed,
            classes: item.collage.classes.clone(),
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads the items of one split listed in `dir/manifest.json`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(Micrograph, LabelMask)>> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
    manifest
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok((
                crate::imagecore::load_micrograph(dir.join(&e.image))?,
                crate::imagecore::load_label_mask(dir.join(&e.mask))?,
            ))
        })
        .collect()
}
