//! Quadratic polynomial expansion and the per-level displacement solve.
//!
//! Each pixel neighbourhood is modelled as `f(p) ≈ pᵀAp + bᵀp + c` in local
//! coordinates `p = (x, y)` centred on the pixel. The fit is a Gaussian
//! weighted least-squares problem over the basis `{1, x, y, x², y², xy}`;
//! because the weights are separable and the image border is replicated,
//! the Gram matrix is identical at every pixel and the right-hand side
//! moments come from one horizontal and one vertical correlation pass.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::imagecore::{gaussian_kernel, separable_convolve_f64, FlowField, Image};

/// Singular-system guard for the 2x2 displacement solve.
pub const DET_EPSILON: f64 = 1e-9;

/// Local quadratic model at one pixel. `A` is stored as `(a11, a12, a22)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolyCoeffs {
    pub a11: f32,
    pub a12: f32,
    pub a22: f32,
    pub b1: f32,
    pub b2: f32,
    pub c: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyExpansionField {
    width: usize,
    height: usize,
    coeffs: Vec<PolyCoeffs>,
}

impl PolyExpansionField {
    pub fn from_vec(width: usize, height: usize, coeffs: Vec<PolyCoeffs>) -> Result<Self> {
        if width == 0 || height == 0 || coeffs.len() != width * height {
            return invalid("polynomial field dims do not match coefficient count");
        }
        Ok(Self {
            width,
            height,
            coeffs,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> PolyCoeffs {
        self.coeffs[y * self.width + x]
    }

    pub fn coeffs(&self) -> &[PolyCoeffs] {
        &self.coeffs
    }
}

/// Unnormalized Gaussian applicability weights over `-radius..=radius`.
fn applicability(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Inverse of the 6x6 Gram matrix of the basis under the separable weights.
fn inverse_gram(weights: &[f64]) -> [[f64; 6]; 6] {
    let r = (weights.len() / 2) as isize;
    let mut gram = [[0f64; 6]; 6];
    for (j, wj) in weights.iter().enumerate() {
        for (i, wi) in weights.iter().enumerate() {
            let x = (i as isize - r) as f64;
            let y = (j as isize - r) as f64;
            let phi = [1.0, x, y, x * x, y * y, x * y];
            let w = wi * wj;
            for k in 0..6 {
                for l in 0..6 {
                    gram[k][l] += w * phi[k] * phi[l];
                }
            }
        }
    }
    invert6(gram)
}

/// Gauss-Jordan inversion with partial pivoting. The Gram matrix is SPD
/// for any radius >= 1, so pivots never vanish.
fn invert6(mut m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut inv = [[0f64; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty range");
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for k in 0..6 {
            m[col][k] /= p;
            inv[col][k] /= p;
        }
        for row in 0..6 {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for k in 0..6 {
                        m[row][k] -= f * m[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

/// Fits the local quadratic model at every pixel of a 1-channel image.
pub fn poly_expansion(
    gray: &Image,
    poly_sigma: f64,
    poly_radius: usize,
) -> Result<PolyExpansionField> {
    if gray.channels() != 1 {
        return invalid(format!(
            "polynomial expansion needs 1 channel, got {}",
            gray.channels()
        ));
    }
    if poly_radius < 1 {
        return invalid("polynomial expansion radius must be at least 1");
    }
    if !(poly_sigma > 0.0) {
        return invalid(format!(
            "polynomial sigma must be positive, got {poly_sigma}"
        ));
    }
    let (w, h) = gray.dims();
    let weights = applicability(poly_sigma, poly_radius);
    let ginv = inverse_gram(&weights);
    let r = poly_radius as isize;

    // Horizontal pass: R_p(x, y) = Σ_i g(i) i^p f(x + i, y), p = 0, 1, 2.
    let mut rows = vec![[0f64; 3]; w * h];
    rows.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        for (x, acc) in out.iter_mut().enumerate() {
            for (k, &g) in weights.iter().enumerate() {
                let i = k as isize - r;
                let v = g * gray.get_clamped(x as isize + i, y as isize, 0) as f64;
                let fi = i as f64;
                acc[0] += v;
                acc[1] += v * fi;
                acc[2] += v * fi * fi;
            }
        }
    });

    // Vertical pass to the six basis moments, then project with G⁻¹.
    let mut coeffs = vec![PolyCoeffs::default(); w * h];
    coeffs.par_chunks_mut(w).enumerate().for_each(|(y, out)| {
        for (x, px) in out.iter_mut().enumerate() {
            let mut m = [0f64; 6];
            for (k, &g) in weights.iter().enumerate() {
                let j = k as isize - r;
                let sy = (y as isize + j).clamp(0, h as isize - 1) as usize;
                let rp = rows[sy * w + x];
                let fj = j as f64;
                m[0] += g * rp[0];
                m[1] += g * rp[1];
                m[2] += g * rp[0] * fj;
                m[3] += g * rp[2];
                m[4] += g * rp[0] * fj * fj;
                m[5] += g * rp[1] * fj;
            }
            let mut theta = [0f64; 6];
            for (t, row) in theta.iter_mut().zip(ginv.iter()) {
                *t = row.iter().zip(m.iter()).map(|(a, b)| a * b).sum();
            }
            *px = PolyCoeffs {
                c: theta[0] as f32,
                b1: theta[1] as f32,
                b2: theta[2] as f32,
                a11: theta[3] as f32,
                a22: theta[4] as f32,
                a12: (theta[5] / 2.0) as f32,
            };
        }
    });
    PolyExpansionField::from_vec(w, h, coeffs)
}

/// One displacement update from the expansions of frame 1 and of frame 2
/// warped by `prior`.
///
/// With `Ā = (A1 + A2)/2` and `Δb = -(b2 - b1)/2 + Ā·prior`, the products
/// `ĀᵀĀ` and `ĀᵀΔb` are averaged over a Gaussian window and the 2x2
/// system is solved for the new displacement. Pixels whose windowed system
/// has determinant below [`DET_EPSILON`] keep their prior.
pub fn flow_increment(
    exp1: &PolyExpansionField,
    exp2: &PolyExpansionField,
    prior: &FlowField,
    win_sigma: f64,
    win_radius: usize,
) -> Result<FlowField> {
    if exp1.dims() != exp2.dims() || exp1.dims() != prior.dims() {
        return invalid(format!(
            "shape mismatch: {:?}, {:?}, prior {:?}",
            exp1.dims(),
            exp2.dims(),
            prior.dims()
        ));
    }
    let (w, h) = exp1.dims();
    let kernel = gaussian_kernel(win_sigma, win_radius)?;

    // Per-pixel normal-equation terms: g11, g12, g22, h1, h2.
    let mut terms = vec![0f64; w * h * 5];
    terms.par_chunks_mut(5).enumerate().for_each(|(i, t)| {
        let p1 = exp1.coeffs[i];
        let p2 = exp2.coeffs[i];
        let (du, dv) = (prior.data()[2 * i] as f64, prior.data()[2 * i + 1] as f64);
        let a11 = 0.5 * (p1.a11 as f64 + p2.a11 as f64);
        let a12 = 0.5 * (p1.a12 as f64 + p2.a12 as f64);
        let a22 = 0.5 * (p1.a22 as f64 + p2.a22 as f64);
        let db1 = -0.5 * (p2.b1 as f64 - p1.b1 as f64) + a11 * du + a12 * dv;
        let db2 = -0.5 * (p2.b2 as f64 - p1.b2 as f64) + a12 * du + a22 * dv;
        t[0] = a11 * a11 + a12 * a12;
        t[1] = a11 * a12 + a12 * a22;
        t[2] = a12 * a12 + a22 * a22;
        t[3] = a11 * db1 + a12 * db2;
        t[4] = a12 * db1 + a22 * db2;
    });
    let summed = separable_convolve_f64(&terms, w, h, 5, &kernel)?;

    let mut out = vec![0f32; w * h * 2];
    out.par_chunks_mut(2).enumerate().for_each(|(i, d)| {
        let t = &summed[i * 5..i * 5 + 5];
        let (g11, g12, g22, h1, h2) = (t[0], t[1], t[2], t[3], t[4]);
        let det = g11 * g22 - g12 * g12;
        if det < DET_EPSILON {
            d[0] = prior.data()[2 * i];
            d[1] = prior.data()[2 * i + 1];
        } else {
            d[0] = ((g22 * h1 - g12 * h2) / det) as f32;
            d[1] = ((g11 * h2 - g12 * h1) / det) as f32;
        }
    });
    FlowField::from_vec(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interior(r: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
        (r..h - r).flat_map(move |y| (r..w - r).map(move |x| (x, y)))
    }

    #[test]
    fn rejects_bad_arguments() {
        let img = Image::new(8, 8, 1).unwrap();
        assert!(poly_expansion(&img, 1.1, 0).is_err());
        assert!(poly_expansion(&Image::new(8, 8, 3).unwrap(), 1.1, 2).is_err());
        let e = poly_expansion(&img, 1.1, 2).unwrap();
        let e2 = poly_expansion(&Image::new(9, 8, 1).unwrap(), 1.1, 2).unwrap();
        let prior = FlowField::zeros(8, 8).unwrap();
        assert!(flow_increment(&e, &e2, &prior, 1.0, 2).is_err());
        assert!(flow_increment(&e, &e, &FlowField::zeros(8, 7).unwrap(), 1.0, 2).is_err());
    }

    #[test]
    fn constant_image_fit() {
        let img = Image::filled(12, 10, 1, 42.0).unwrap();
        let e = poly_expansion(&img, 1.1, 3).unwrap();
        for p in e.coeffs() {
            assert!(p.a11.abs() < 1e-4 && p.a12.abs() < 1e-4 && p.a22.abs() < 1e-4);
            assert!(p.b1.abs() < 1e-4 && p.b2.abs() < 1e-4);
            assert!((p.c - 42.0).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_ramp_fit() {
        let img = Image::from_fn(16, 12, 1, |x, y, _| 3.0 * x as f32 + 0.0 * y as f32).unwrap();
        let e = poly_expansion(&img, 1.1, 3).unwrap();
        for (x, y) in interior(3, 16, 12) {
            let p = e.get(x, y);
            assert!((p.b1 - 3.0).abs() < 1e-4, "{p:?}");
            assert!(p.b2.abs() < 1e-4);
            assert!(p.a11.abs() < 1e-6 && p.a12.abs() < 1e-6 && p.a22.abs() < 1e-6);
            assert!((p.c - 3.0 * x as f32).abs() < 1e-3);
        }
    }

    /// Dense oracle: assemble and solve the 6x6 normal equations at a pixel
    /// directly from the 2-D window.
    fn dense_fit(img: &Image, x: usize, y: usize, sigma: f64, r: usize) -> [f64; 6] {
        let ri = r as isize;
        let mut ata = [[0f64; 6]; 6];
        let mut atb = [0f64; 6];
        for j in -ri..=ri {
            for i in -ri..=ri {
                let w = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
                let (fx, fy) = (i as f64, j as f64);
                let phi = [1.0, fx, fy, fx * fx, fy * fy, fx * fy];
                let f = img.get_clamped(x as isize + i, y as isize + j, 0) as f64;
                for k in 0..6 {
                    atb[k] += w * phi[k] * f;
                    for l in 0..6 {
                        ata[k][l] += w * phi[k] * phi[l];
                    }
                }
            }
        }
        // plain Gaussian elimination
        let mut aug: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                let mut row = ata[k].to_vec();
                row.push(atb[k]);
                row
            })
            .collect();
        for col in 0..6 {
            let piv = (col..6)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            for row in col + 1..6 {
                let pivot = aug[col].clone();
                let f = aug[row][col] / pivot[col];
                for (v, p) in aug[row].iter_mut().zip(pivot).skip(col) {
                    *v -= f * p;
                }
            }
        }
        let mut sol = [0f64; 6];
        for row in (0..6).rev() {
            let mut s = aug[row][6];
            for k in row + 1..6 {
                s -= aug[row][k] * sol[k];
            }
            sol[row] = s / aug[row][row];
        }
        sol
    }

    #[test]
    fn quadratic_matches_dense_normal_equations() {
        let img = Image::from_fn(14, 14, 1, |x, _, _| (x * x) as f32).unwrap();
        let e = poly_expansion(&img, 1.1, 3).unwrap();
        for (x, y) in interior(3, 14, 14) {
            let p = e.get(x, y);
            // local expansion of (x0 + i)^2 = x0^2 + 2 x0 i + i^2
            assert!((p.a11 - 1.0).abs() < 1e-4);
            assert!((p.b1 - 2.0 * x as f32).abs() < 1e-3);
            assert!((p.c - (x * x) as f32).abs() < 1e-2);
        }
        // arbitrary texture, every pixel including borders
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tex = Image::from_fn(11, 9, 1, |_, _, _| rng.random_range(0.0..255.0)).unwrap();
        let e = poly_expansion(&tex, 1.5, 2).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                let o = dense_fit(&tex, x, y, 1.5, 2);
                let p = e.get(x, y);
                let got = [p.c, p.b1, p.b2, p.a11, p.a22, 2.0 * p.a12];
                for k in 0..6 {
                    assert!(
                        (got[k] as f64 - o[k]).abs() < 1e-3 * (1.0 + o[k].abs()),
                        "k={k} at ({x},{y}): {} vs {}",
                        got[k],
                        o[k]
                    );
                }
            }
        }
    }

    #[test]
    fn linear_images_have_no_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (a, b, c) = (
                rng.random_range(-5.0..5.0f32),
                rng.random_range(-5.0..5.0f32),
                rng.random_range(0.0..100.0f32),
            );
            let img = Image::from_fn(15, 13, 1, |x, y, _| a * x as f32 + b * y as f32 + c).unwrap();
            let e = poly_expansion(&img, 1.1, 3).unwrap();
            for (x, y) in interior(3, 15, 13) {
                let p = e.get(x, y);
                let max = p.a11.abs().max(p.a12.abs()).max(p.a22.abs());
                assert!(max < 1e-6, "{max}");
            }
        }
    }

    fn uniform_field(w: usize, h: usize, p: PolyCoeffs) -> PolyExpansionField {
        PolyExpansionField::from_vec(w, h, vec![p; w * h]).unwrap()
    }

    #[test]
    fn identity_system_solves_directly() {
        let p1 = PolyCoeffs {
            a11: 1.0,
            a22: 1.0,
            ..Default::default()
        };
        let p2 = PolyCoeffs { b1: -2.0, ..p1 };
        let prior = FlowField::zeros(9, 9).unwrap();
        let d = flow_increment(
            &uniform_field(9, 9, p1),
            &uniform_field(9, 9, p2),
            &prior,
            1.5,
            3,
        )
        .unwrap();
        for px in d.data().chunks(2) {
            assert!((px[0] - 1.0).abs() < 1e-6 && px[1].abs() < 1e-6);
        }
    }

    #[test]
    fn singular_system_keeps_prior() {
        let e = uniform_field(8, 8, PolyCoeffs::default());
        let prior = FlowField::constant(8, 8, 0.75, -1.25).unwrap();
        let d = flow_increment(&e, &e, &prior, 1.0, 2).unwrap();
        assert_eq!(d, prior);
    }

    #[test]
    fn spd_system_matches_cramer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // random SPD Ā
            let (l11, l21, l22) = (
                rng.random_range(0.5..3.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(0.5..3.0f64),
            );
            let a11 = l11 * l11;
            let a12 = l11 * l21;
            let a22 = l21 * l21 + l22 * l22;
            let db = (
                rng.random_range(-4.0..4.0f64),
                rng.random_range(-4.0..4.0f64),
            );
            let prior = (
                rng.random_range(-2.0..2.0f32),
                rng.random_range(-2.0..2.0f32),
            );
            let p1 = PolyCoeffs {
                a11: a11 as f32,
                a12: a12 as f32,
                a22: a22 as f32,
                ..Default::default()
            };
            let p2 = PolyCoeffs {
                b1: (-2.0 * db.0) as f32,
                b2: (-2.0 * db.1) as f32,
                ..p1
            };
            let d = flow_increment(
                &uniform_field(7, 7, p1),
                &uniform_field(7, 7, p2),
                &FlowField::constant(7, 7, prior.0, prior.1).unwrap(),
                1.0,
                2,
            )
            .unwrap();
            // Oracle: G = ĀᵀĀ, h = ĀᵀΔb with Δb including the prior term,
            // solved by Cramer's rule.
            let (a11, a12, a22) = (p1.a11 as f64, p1.a12 as f64, p1.a22 as f64);
            let (du, dv) = (prior.0 as f64, prior.1 as f64);
            let b1 = db.0 + a11 * du + a12 * dv;
            let b2 = db.1 + a12 * du + a22 * dv;
            let g = [
                [a11 * a11 + a12 * a12, a11 * a12 + a12 * a22],
                [a11 * a12 + a12 * a22, a12 * a12 + a22 * a22],
            ];
            let hv = [a11 * b1 + a12 * b2, a12 * b1 + a22 * b2];
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            let x = (hv[0] * g[1][1] - g[0][1] * hv[1]) / det;
            let y = (g[0][0] * hv[1] - hv[0] * g[1][0]) / det;
            let (u, v) = d.get(3, 3);
            let scale = 1.0 + x.abs().max(y.abs());
            assert!(((u as f64) - x).abs() < 1e-6 * scale, "{u} vs {x}");
            assert!(((v as f64) - y).abs() < 1e-6 * scale, "{v} vs {y}");
        }
    }
}
