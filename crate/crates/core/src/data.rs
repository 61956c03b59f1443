//! Synthetic shape-classification dataset and its packed binary format.
//!
//! Each image is uniform background noise in `[0, 60]` plus one filled shape
//! (disk, square, annulus, cross) of a random intensity in `[140, 255]`,
//! centered in the middle half of the frame. The shape alone decides the label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digest::fnv1a;
use crate::error::{invalid, Error, Result};
use crate::nn::init;
use crate::tensor::{FeatureMap, Scalar};

pub const MAGIC: &[u8; 8] = b"SLCADS01";
pub const HEADER_LEN: usize = 32;
pub const MAX_CLASSES: usize = 4;
const BG_MAX: u8 = 60;
const FG_RANGE: (u8, u8) = (140, 255);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub image_size: u32,
    pub channels: u32,
    pub num_classes: u32,
    pub num_samples: u32,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn sample_bytes(&self) -> usize {
        (self.channels * self.image_size * self.image_size) as usize
    }

    /// Total file length.
    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.num_samples as usize * (self.sample_bytes() + 1)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for v in [self.image_size, self.channels, self.num_classes, self.num_samples] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
    }

    fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("dataset truncated: {} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let h = Self {
            image_size: u32_at(8),
            channels: u32_at(12),
            num_classes: u32_at(16),
            num_samples: u32_at(20),
            seed: u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")),
        };
        if h.image_size == 0 || h.channels != 3 || h.num_classes == 0 || h.num_samples == 0 {
            return Err(Error::Format(format!("invalid dataset header {h:?}")));
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Annulus,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Annulus, Shape::Cross];

    /// Whether the pixel at offset `(dx, dy)` from the center lies inside.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d = (dx * dx + dy * dy).sqrt();
        match self {
            Shape::Disk => d <= r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Annulus => d <= r && d >= 0.55 * r,
            Shape::Cross => {
                let w = (r / 4.0).max(1.0);
                (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
            }
        }
    }
}

/// Generation-time description of one sample; not stored in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInfo {
    pub shape: Shape,
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: u8,
    /// Row-major `S×S` foreground mask.
    pub mask: Vec<bool>,
}

impl ShapeInfo {
    /// Mean foreground and background intensity of `pixels` under the mask.
    pub fn mean_intensities(&self, pixels: &[u8]) -> (f64, f64) {
        let plane = self.mask.len();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (i, &p) in pixels.iter().enumerate() {
            if self.mask[i % plane] {
                fg += p as f64;
                nf += 1;
            } else {
                bg += p as f64;
                nb += 1;
            }
        }
        (fg / nf.max(1) as f64, bg / nb.max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::Horizontal, Flip::Vertical, Flip::Both];

    pub fn from_bits(h: bool, v: bool) -> Self {
        match (h, v) {
            (false, false) => Flip::None,
            (true, false) => Flip::Horizontal,
            (false, true) => Flip::Vertical,
            (true, true) => Flip::Both,
        }
    }

    fn bits(self) -> (bool, bool) {
        match self {
            Flip::None => (false, false),
            Flip::Horizontal => (true, false),
            Flip::Vertical => (false, true),
            Flip::Both => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    header: DatasetHeader,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Contents are immutable after construction, so the digest is taken once.
    digest: u64,
}

/// `(x/255 − 0.5)/0.5`.
pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - 0.5) / 0.5
}

impl Dataset {
    /// Generates the dataset; sample `i` has label `i mod num_classes`.
    pub fn generate(num_samples: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self::generate_with_info(num_samples, image_size, num_classes, seed)?.0)
    }

    pub fn generate_with_info(
        num_samples: usize,
        image_size: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<(Self, Vec<ShapeInfo>)> {
        if !(1..=MAX_CLASSES).contains(&num_classes) {
            return Err(invalid!("num_classes must be in 1..={MAX_CLASSES} (one shape per class), got {num_classes}"));
        }
        if num_samples == 0 || num_samples % num_classes != 0 {
            return Err(invalid!(
                "num_samples {num_samples} must be a positive multiple of num_classes {num_classes}"
            ));
        }
        if image_size < 8 {
            return Err(invalid!("image_size must be at least 8, got {image_size}"));
        }
        if num_samples > u32::MAX as usize || image_size > u16::MAX as usize {
            return Err(invalid!("dataset too large for the file format"));
        }
        let header = DatasetHeader {
            image_size: image_size as u32,
            channels: 3,
            num_classes: num_classes as u32,
            num_samples: num_samples as u32,
            seed,
        };
        let mut rng = init::stream(seed, "synth");
        let s = image_size;
        let sf = s as f64;
        let plane = s * s;
        let mut pixels = Vec::with_capacity(num_samples * 3 * plane);
        let mut labels = Vec::with_capacity(num_samples);
        let mut infos = Vec::with_capacity(num_samples);
        for i in 0..num_samples {
            let label = i % num_classes;
            let shape = Shape::ALL[label];
            let center = (rng.gen_range(0.25 * sf..0.75 * sf), rng.gen_range(0.25 * sf..0.75 * sf));
            let radius = rng.gen_range(sf / 8.0..=sf / 4.0);
            let intensity = rng.gen_range(FG_RANGE.0..=FG_RANGE.1);
            let mask: Vec<bool> = (0..plane)
                .map(|p| {
                    let (y, x) = ((p / s) as f64 + 0.5, (p % s) as f64 + 0.5);
                    shape.contains(x - center.0, y - center.1, radius)
                })
                .collect();
            for _ in 0..3 {
                for &m in &mask {
                    let noise = rng.gen_range(0..=BG_MAX);
                    pixels.push(if m { intensity } else { noise });
                }
            }
            labels.push(label as u8);
            infos.push(ShapeInfo { shape, center, radius, intensity, mask });
        }
        Ok((Self::assemble(header, pixels, labels), infos))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.header.image_size as usize
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes as usize
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let b = self.header.sample_bytes();
        &self.pixels[i * b..(i + 1) * b]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.file_len());
        self.header.write(&mut out);
        let b = self.header.sample_bytes();
        for (img, &label) in self.pixels.chunks_exact(b).zip(&self.labels) {
            out.extend_from_slice(img);
            out.push(label);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DatasetHeader::read(bytes)?;
        if bytes.len() != header.file_len() {
            return Err(Error::Format(format!(
                "dataset length {} does not match header (expected {})",
                bytes.len(),
                header.file_len()
            )));
        }
        let b = header.sample_bytes();
        let n = header.num_samples as usize;
        let mut pixels = Vec::with_capacity(n * b);
        let mut labels = Vec::with_capacity(n);
        for rec in bytes[HEADER_LEN..].chunks_exact(b + 1) {
            pixels.extend_from_slice(&rec[..b]);
            let label = rec[b];
            if label as u32 >= header.num_classes {
                return Err(Error::Format(format!("label {label} out of range for {} classes", header.num_classes)));
            }
            labels.push(label);
        }
        Ok(Self::assemble(header, pixels, labels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// FNV-1a digest of the serialized file.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn assemble(header: DatasetHeader, pixels: Vec<u8>, labels: Vec<u8>) -> Self {
        let mut d = Self { header, pixels, labels, digest: 0 };
        d.digest = fnv1a(&d.to_bytes());
        d
    }

    /// Normalized `[N, 3, S, S]` batch of the given samples, each with its flip.
    pub fn to_feature_map<T: Scalar>(&self, indices: &[usize], flips: Option<&[Flip]>) -> FeatureMap<T> {
        let s = self.image_size();
        let plane = s * s;
        let lut: Vec<T> = (0..=255u8).map(|p| T::of(normalize_pixel(p))).collect();
        let mut out = FeatureMap::zeros(indices.len(), 3, s, s);
        for (k, &i) in indices.iter().enumerate() {
            let (fh, fv) = flips.map(|f| f[k].bits()).unwrap_or((false, false));
            let img = self.image(i);
            for c in 0..3 {
                let src = &img[c * plane..(c + 1) * plane];
                let dst = out.plane_mut(k, c);
                for y in 0..s {
                    let sy = if fv { s - 1 - y } else { y };
                    for x in 0..s {
                        let sx = if fh { s - 1 - x } else { x };
                        dst[y * s + x] = lut[src[sy * s + sx] as usize];
                    }
                }
            }
        }
        out
    }
}

/// Contiguous train/val/test ranges of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Seed of the stratified training-fraction selection.
    #[serde(default)]
    pub seed: u64,
}

impl Split {
    /// First `train` samples, the next `val`, then the next `test`. Counts that
    /// are multiples of the class count keep every part exactly balanced.
    pub fn contiguous(n: usize, train: usize, val: usize, test: usize) -> Result<Self> {
        if train == 0 || val == 0 || test == 0 || train + val + test > n {
            return Err(invalid!("split {train}/{val}/{test} does not fit {n} samples"));
        }
        Ok(Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
            seed: 0,
        })
    }

    /// `val = test = n/6` rounded down to a multiple of `k`, the rest for training.
    pub fn standard(n: usize, k: usize) -> Result<Self> {
        let held = n / 6 / k * k;
        Self::contiguous(n, n.saturating_sub(2 * held), held, held)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Stratified subset of `indices` (with labels from `labels[i]`) of overall
/// size `round(p·N)`, apportioned across classes by largest remainder.
///
/// Within a class the selection is a prefix of one seeded permutation, so
/// smaller fractions are subsets of larger ones. Returned in ascending order.
pub fn stratified_fraction(indices: &[usize], labels: &[usize], num_classes: usize, p: f64, seed: u64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid!("fraction must lie in (0, 1], got {p}"));
    }
    if p == 1.0 {
        return Ok(indices.to_vec());
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for &i in indices {
        let l = labels[i];
        if l >= num_classes {
            return Err(invalid!("label {l} out of range"));
        }
        by_class[l].push(i);
    }
    let n = indices.len();
    let total = (p * n as f64).round() as usize;
    let exact: Vec<f64> = by_class.iter().map(|c| p * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    // largest remainder first, ties to the lower class index
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(quota.iter().sum());
    for &k in &order {
        if left == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            left -= 1;
        }
    }
    let mut out = Vec::with_capacity(total);
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if quota[k] == 0 {
            return Err(invalid!("fraction {p} leaves class {k} empty ({} samples)", members.len()));
        }
        let mut rng = init::stream(seed, &format!("fraction.class{k}"));
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..quota[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Decodes the shape from its generation-time mask alone.
pub fn oracle_classify(info: &ShapeInfo, image_size: usize) -> Shape {
    let s = image_size;
    let (mut x0, mut y0, mut x1, mut y1, mut area) = (s, s, 0, 0, 0usize);
    for (p, _) in info.mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (p / s, p % s);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        area += 1;
    }
    let (cx, cy) = ((x0 + x1) / 2, (y0 + y1) / 2);
    if !info.mask[cy * s + cx] {
        return Shape::Annulus;
    }
    let fill = area as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    if fill > 0.9 {
        Shape::Square
    } else if fill > 0.6 {
        Shape::Disk
    } else {
        Shape::Cross
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = Dataset::generate(40, 32, 4, 7).unwrap();
        let b = Dataset::generate(40, 32, 4, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.class_histogram(), vec![10; 4]);
        assert_ne!(a.to_bytes(), Dataset::generate(40, 32, 4, 8).unwrap().to_bytes());
        assert_eq!(a.to_bytes().len(), HEADER_LEN + 40 * (3 * 32 * 32 + 1));
    }

    #[test]
    fn indivisible_count_rejected() {
        assert!(matches!(Dataset::generate(101, 32, 4, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn foreground_brighter_and_oracle_exact() {
        let (d, infos) = Dataset::generate_with_info(200, 64, 4, 3).unwrap();
        for (i, info) in infos.iter().enumerate() {
            let (fg, bg) = info.mean_intensities(d.image(i));
            assert!(fg > bg, "sample {i}");
            assert_eq!(oracle_classify(info, 64), Shape::ALL[d.label(i)], "sample {i}");
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let d = Dataset::generate(8, 16, 4, 1).unwrap();
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.header, DatasetHeader { image_size: 16, channels: 3, num_classes: 4, num_samples: 8, seed: 1 });
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn flips_reverse_axes() {
        let d = Dataset::generate(4, 8, 4, 2).unwrap();
        let plain = d.to_feature_map::<f32>(&[1], None);
        let h = d.to_feature_map::<f32>(&[1], Some(&[Flip::Horizontal]));
        let v = d.to_feature_map::<f32>(&[1], Some(&[Flip::Vertical]));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(h.at(0, 2, y, x), plain.at(0, 2, y, 7 - x));
                assert_eq!(v.at(0, 1, y, x), plain.at(0, 1, 7 - y, x));
            }
        }
    }

    #[test]
    fn fraction_apportionment() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let idx: Vec<usize> = (0..100).collect();
        let half = stratified_fraction(&idx, &labels, 4, 0.5, 1).unwrap();
        assert_eq!(half.len(), 50);
        let mut counts = [0; 4];
        for &i in &half {
            counts[labels[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 12 || c == 13), "{counts:?}");
        assert_eq!(stratified_fraction(&idx, &labels, 4, 1.0, 1).unwrap(), idx);
        assert_ne!(half, stratified_fraction(&idx, &labels, 4, 0.5, 2).unwrap());
        assert!(stratified_fraction(&idx, &labels, 4, 0.01, 1).is_err());
    }

    #[test]
    fn standard_split() {
        let s = Split::standard(3000, 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 500, 500));
    }
}
