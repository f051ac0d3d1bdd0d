//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code under test except to read
//! its outputs.

#![allow(dead_code, clippy::needless_range_loop)]

use flowadapt_core::segmodel::{loss_and_grad, Dataset, Model};
use flowadapt_core::{LabelMap, ProbMap, IGNORE};
use rand::Rng;

/// Middlebury wheel written as explicit (length, from, to) segments.
pub fn wheel_table() -> Vec<[f64; 3]> {
    let segs: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [255.0, 0.0, 0.0], [255.0, 255.0, 0.0]),
        (6, [255.0, 255.0, 0.0], [0.0, 255.0, 0.0]),
        (4, [0.0, 255.0, 0.0], [0.0, 255.0, 255.0]),
        (11, [0.0, 255.0, 255.0], [0.0, 0.0, 255.0]),
        (13, [0.0, 0.0, 255.0], [255.0, 0.0, 255.0]),
        (6, [255.0, 0.0, 255.0], [255.0, 0.0, 0.0]),
    ];
    let mut out = Vec::new();
    for (n, from, to) in segs {
        for i in 0..n {
            let step = (255 * i / n) as f64;
            let mut col = [0.0; 3];
            for c in 0..3 {
                col[c] = if to[c] > from[c] {
                    step
                } else if to[c] < from[c] {
                    255.0 - step
                } else {
                    from[c]
                };
            }
            out.push(col);
        }
    }
    out
}

/// Color of flow `(u, v)` normalized by `max_mag`, in f64, unquantized.
pub fn wheel_color(u: f64, v: f64, max_mag: f64) -> [f64; 3] {
    let wheel = wheel_table();
    let n = wheel.len() as f64;
    let (u, v) = (u / max_mag, v / max_mag);
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1.0);
    let k0 = fk.floor() as usize % wheel.len();
    let k1 = (k0 + 1) % wheel.len();
    let f = fk - fk.floor();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col
        };
        out[c] = 255.0 * col;
    }
    out
}

/// Confusion counts by a plain double loop over pixels and class pairs.
pub fn naive_confusion(pred: &LabelMap, gt: &LabelMap, k: usize) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; k]; k];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let g = gt.get(x, y);
            if g == IGNORE {
                continue;
            }
            for (i, row) in cm.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    if g as usize == i && pred.get(x, y) as usize == j {
                        *cell += 1;
                    }
                }
            }
        }
    }
    cm
}

pub fn random_labels(rng: &mut impl Rng, w: usize, h: usize, k: u8, ignore_rate: f64) -> LabelMap {
    let data = (0..w * h)
        .map(|_| {
            if rng.random_bool(ignore_rate) {
                IGNORE
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    LabelMap::from_vec(w, h, data).unwrap()
}

/// Probability maps with class-dependent skew so classes differ in both
/// pool size and confidence.
pub fn random_probmap(rng: &mut impl Rng, w: usize, h: usize, k: usize) -> ProbMap {
    let mut data = Vec::with_capacity(w * h * k);
    for _ in 0..w * h {
        let raw: Vec<f32> = (0..k)
            .map(|c| rng.random::<f32>().powf(1.0 + 0.5 * c as f32) + 1e-6)
            .collect();
        let s: f32 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbMap::from_vec(w, h, k, data).unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences, per parameter tensor (w1, b1, w2, b2). The relative error
/// is `|a − n| / max(|a| + |n|, floor)`.
pub fn gradient_check(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    l2: f64,
    eps: f64,
) -> [f64; 4] {
    let (_, g) = loss_and_grad(model, data, batch, l2).unwrap();
    let analytic = [&g.w1, &g.b1, &g.w2, &g.b2];
    let mut worst = [0f64; 4];
    for t in 0..4 {
        let n = analytic[t].len();
        for i in 0..n {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let hi = bump(&mut plus, t, i, eps);
            let lo = bump(&mut minus, t, i, -eps);
            let lp = loss_and_grad(&plus, data, batch, l2).unwrap().0;
            let lm = loss_and_grad(&minus, data, batch, l2).unwrap().0;
            let numeric = (lp - lm) / (hi - lo);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst[t] = worst[t].max(rel);
        }
    }
    worst
}

/// Perturbs one parameter and returns its new value. Parameters are
/// stored as f32, so the caller divides by the step actually taken.
fn bump(model: &mut Model, tensor: usize, i: usize, eps: f64) -> f64 {
    let p = &mut model.params_mut()[tensor][i];
    *p = (*p as f64 + eps) as f32;
    *p as f64
}

/// Two Gaussian blobs per class on a ring; linearly separable with margin.
pub fn separable_toy(rng: &mut impl Rng, classes: usize, per_class: usize, dim: usize) -> Dataset {
    let mut set = Dataset::new(dim);
    for c in 0..classes {
        let ang = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        for _ in 0..per_class {
            let mut f = vec![0f32; dim];
            f[0] = (3.0 * ang.cos() + rng.random_range(-0.5..0.5)) as f32;
            f[1] = (3.0 * ang.sin() + rng.random_range(-0.5..0.5)) as f32;
            for v in f.iter_mut().skip(2) {
                *v = rng.random_range(-0.1..0.1);
            }
            set.push(&f, c as u8).unwrap();
        }
    }
    set
}

/// Mean of `values` (row-major `w × h`) over the centered crop covering
/// `frac` of each side.
pub fn central_mean(values: &[f32], w: usize, h: usize, frac: f64) -> f64 {
    let mx = ((1.0 - frac) / 2.0 * w as f64).round() as usize;
    let my = ((1.0 - frac) / 2.0 * h as f64).round() as usize;
    let (mut s, mut n) = (0f64, 0usize);
    for y in my..h - my {
        for x in mx..w - mx {
            s += values[y * w + x] as f64;
            n += 1;
        }
    }
    s / n as f64
}

pub fn median(mut v: Vec<f32>) -> f32 {
    assert!(!v.is_empty());
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
