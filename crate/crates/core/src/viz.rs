//! Grayscale PGM heatmaps of attention grids and encoder taps.

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::tensor::{FeatureMap, Scalar};

pub const HEATMAP_SIZE: usize = 128;
/// Emitted for every pixel of a constant map.
pub const DEGENERATE_GRAY: u8 = 128;

/// Mean over channels of sample `n`, row-major `[h·w]`.
pub fn channel_mean<T: Scalar>(x: &FeatureMap<T>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.h * x.w];
    for c in 0..x.c {
        for (o, v) in out.iter_mut().zip(x.plane(n, c)) {
            *o += v.f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= x.c as f64);
    out
}

/// Nearest upsampling of an `h×w` map to `size×size`, min–max scaled to 0..=255.
pub fn to_gray(map: &[f64], h: usize, w: usize, size: usize) -> Vec<u8> {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y * h / size;
        for x in 0..size {
            let v = map[sy * w + x * w / size];
            out.push(if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { DEGENERATE_GRAY });
        }
    }
    out
}

/// Binary P5 with maxval 255.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// One heatmap per fusion point plus the neck tap's channel mean, as
/// `(file name, PGM bytes)`.
pub fn attention_heatmaps<T: Scalar>(model: &Model<T>, data: &Dataset, index: usize) -> Result<Vec<(String, Vec<u8>)>> {
    if index >= data.len() {
        return Err(invalid!("image index {index} out of range for {} samples", data.len()));
    }
    if !model.spec.variant.uses_encoder() || model.fusions.iter().any(|f| matches!(f.fusion, crate::model::Fusion::Add(_))) {
        return Err(invalid!("variant {} produces no attention maps", model.spec.variant.as_str()));
    }
    let trace = model.trace(&data.to_feature_map::<T>(&[index], None))?;
    let mut files = Vec::new();
    for (i, (att, fp)) in trace.attention.iter().zip(&model.fusions).enumerate() {
        let att = att.as_ref().expect("attention variants record every point");
        let gray = to_gray(&channel_mean(att, 0), att.h, att.w, HEATMAP_SIZE);
        files.push((format!("attention_{i}_{}.pgm", fp.tap.as_str()), pgm(HEATMAP_SIZE, HEATMAP_SIZE, &gray)));
    }
    let neck = &trace.taps.as_ref().expect("encoder variant").neck;
    let gray = to_gray(&channel_mean(neck, 0), neck.h, neck.w, HEATMAP_SIZE);
    files.push(("neck_mean.pgm".to_string(), pgm(HEATMAP_SIZE, HEATMAP_SIZE, &gray)));
    Ok(files)
}
