//! Brute-force oracles and random instance generators shared by the property
//! tests and the acceptance harness. Each `*_case` draws one random instance
//! and returns the max abs deviation between the library and its oracle.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slca_core::nn::{resize_bilinear, slap, upsample_nearest, ConvBlock};
use slca_core::slca::SlcaBlock;
use slca_core::train::metrics::auc_macro_ovr_rows;
use slca_core::{FeatureMap, SlcaConfig};

pub const SLAP_TOL: f64 = 1e-9;
pub const CONV_TOL: f64 = 1e-9;
pub const RESIZE_TOL: f64 = 1e-9;
pub const AUC_TOL: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, n: usize, c: usize, h: usize, w: usize, scale: f64) -> FeatureMap<f64> {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-scale..scale)).collect();
    FeatureMap::from_vec(n, c, h, w, data).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cell of pixel `p` along an axis of length `len` split into `g` parts:
/// the largest `i` with `floor(i·len/g) ≤ p`.
fn cell_of(p: usize, len: usize, g: usize) -> usize {
    (0..g).filter(|&i| i * len / g <= p).max().unwrap()
}

pub fn slap_oracle(x: &FeatureMap<f64>, g: usize) -> Vec<f64> {
    let mut sum = vec![0.0; x.n * x.c * g * g];
    let mut count = vec![0usize; x.n * x.c * g * g];
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let k = ((n * x.c + c) * g + cell_of(y, x.h, g)) * g + cell_of(xx, x.w, g);
                    sum[k] += x.at(n, c, y, xx);
                    count[k] += 1;
                }
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect()
}

pub fn slap_case(rng: &mut impl Rng) -> f64 {
    let (h, w) = (rng.gen_range(1..=13), rng.gen_range(1..=13));
    let g = rng.gen_range(1..=h.min(w));
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let x = random_map(rng, n, c, h, w, 5.0);
    max_diff(&slap(&x, g).unwrap().data, &slap_oracle(&x, g))
}

/// Direct summation over the receptive field, optional ReLU.
pub fn conv_oracle(
    x: &FeatureMap<f64>,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Vec<f64> {
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(x.n * c_out * ho * wo);
    for n in 0..x.n {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += weight[((o * x.c + ci) * k + ky) * k + kx] * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(if relu { acc.max(0.0) } else { acc });
                }
            }
        }
    }
    out
}

pub fn conv_case(rng: &mut impl Rng) -> f64 {
    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
    let pad = rng.gen_range(0..=k / 2);
    let stride = rng.gen_range(1..=2);
    let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(k..=9), rng.gen_range(k..=9));
    let relu = rng.gen_bool(0.5);
    let mut block = ConvBlock::<f64>::new(c_in, c_out, k, stride, pad, false, relu).unwrap();
    block.weight.value = (0..block.weight.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    block.bias.value = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = rng.gen_range(1..=2);
    let x = random_map(rng, n, c_in, h, w, 2.0);
    let got = block.forward_eval(&x).unwrap();
    max_diff(&got.data, &conv_oracle(&x, &block.weight.value, &block.bias.value, c_out, k, stride, pad, relu))
}

/// Tent-kernel form of half-pixel bilinear sampling: every source pixel
/// contributes `max(0, 1 − |s − y|)·max(0, 1 − |t − x|)`.
pub fn resize_oracle(x: &FeatureMap<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |d: usize, src: usize, dst: usize| {
        ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
    };
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = Vec::with_capacity(x.n * x.c * oh * ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                let s = coord(oy, x.h, oh);
                for ox in 0..ow {
                    let t = coord(ox, x.w, ow);
                    let mut acc = 0.0;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            acc += tent(s - y as f64) * tent(t - xx as f64) * x.at(n, c, y, xx);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn resize_case(rng: &mut impl Rng) -> f64 {
    let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = random_map(rng, n, c, h, w, 3.0);
    let (oh, ow) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    max_diff(&resize_bilinear(&x, oh, ow).data, &resize_oracle(&x, oh, ow))
}

pub fn upsample_oracle(x: &FeatureMap<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(x.at(n, c, oy * x.h / oh, ox * x.w / ow));
                }
            }
        }
    }
    out
}

pub fn upsample_case(rng: &mut impl Rng) -> f64 {
    let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
    let x = random_map(rng, n, c, h, w, 3.0);
    let (oh, ow) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    max_diff(&upsample_nearest(&x, oh, ow).data, &upsample_oracle(&x, oh, ow))
}

/// Macro one-vs-rest AUC by counting every positive/negative pair (ties ½),
/// averaging over classes that have both positives and negatives.
pub fn auc_oracle(scores: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let k = scores[0].len();
    let mut per_class = Vec::new();
    for c in 0..k {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == c && lj != c {
                    pairs += 1.0;
                    let (a, b) = (scores[i][c], scores[j][c]);
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        if pairs > 0.0 {
            per_class.push(wins / pairs);
        }
    }
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Scores are drawn from a coarse grid so ties are common.
pub fn auc_case(rng: &mut impl Rng) -> f64 {
    let n = rng.gen_range(2..=200);
    let k = rng.gen_range(2..=4);
    let levels = rng.gen_range(2..=50);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let scores: Vec<Vec<f64>> =
        (0..n).map(|_| (0..k).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect()).collect();
    match (auc_macro_ovr_rows(&scores, &labels), auc_oracle(&scores, &labels)) {
        (Ok(r), Some(o)) => (r.value - o).abs(),
        (Err(_), None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Random SLCA block in eval mode; perturbs the input inside one SLAP cell and
/// returns the max abs change of attention entries at every *other* grid
/// position (expected to be exactly zero) together with the change at the
/// perturbed cell.
pub fn locality_case(rng: &mut impl Rng) -> (f64, f64) {
    let g = rng.gen_range(1..=4);
    let (h, w) = (rng.gen_range(g..=12), rng.gen_range(g..=12));
    let (c_in, c_out) = (4 * rng.gen_range(1..=3), rng.gen_range(1..=6));
    let block = SlcaBlock::<f64>::init(rng, c_in, c_out, SlcaConfig { r: 4, g }).unwrap();
    let x = random_map(rng, 1, c_in, h, w, 2.0);
    let (ci, cj) = (rng.gen_range(0..g), rng.gen_range(0..g));
    let mut y = x.clone();
    for c in 0..c_in {
        for yy in ci * h / g..(ci + 1) * h / g {
            for xx in cj * w / g..(cj + 1) * w / g {
                let k = y.index(0, c, yy, xx);
                y.data[k] += rng.gen_range(-3.0..3.0);
            }
        }
    }
    let (a, b) = (block.forward_eval(&x).unwrap(), block.forward_eval(&y).unwrap());
    let (mut outside, mut inside) = (0.0f64, 0.0f64);
    for c in 0..c_out {
        for i in 0..g {
            for j in 0..g {
                let d = (a.at(0, c, i, j) - b.at(0, c, i, j)).abs();
                if (i, j) == (ci, cj) {
                    inside = inside.max(d);
                } else {
                    outside = outside.max(d);
                }
            }
        }
    }
    (outside, inside)
}

/// 32-bit SLCA attention on inputs spanning several orders of magnitude;
/// returns `(min, max)` entry.
pub fn range_case(rng: &mut impl Rng) -> (f32, f32) {
    let g = rng.gen_range(1..=4);
    let c_in = 4 * rng.gen_range(1..=2);
    let c_out = rng.gen_range(1..=8);
    let block = SlcaBlock::<f32>::init(rng, c_in, c_out, SlcaConfig { r: 4, g }).unwrap();
    let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
    let x = random_map(rng, 2, c_in, 8, 8, scale).cast::<f32>();
    let a = block.forward_eval(&x).unwrap();
    a.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}
