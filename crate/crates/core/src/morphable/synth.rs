//! Deterministic synthetic stand-in for a licensed face model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{MorphableModel, NUM_EXP, NUM_ID, NUM_LANDMARKS, NUM_PARAMS, NUM_POSE};
use crate::error::{Error, Result};
use crate::rng::Rng as ChaCha;

const MODES: usize = 6;

/// A 68-point face layout in face-normalized coordinates (`x` right, `y`
/// down, roughly `[-0.8, 0.8] × [-0.5, 0.85]`) following the usual
/// jaw/brows/nose/eyes/mouth ordering.
pub fn landmark_template() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    // jaw, left ear to right ear through the chin
    for i in 0..17 {
        let a = PI - PI * i as f64 / 16.0;
        pts.push([0.78 * a.cos(), -0.15 + 0.95 * a.sin()]);
    }
    // brows
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { -0.62 + 0.5 * s } else { 0.12 + 0.5 * s };
            let arc = (PI * s).sin();
            pts.push([x, -0.45 - 0.08 * arc]);
        }
    }
    // nose bridge and base
    for i in 0..4 {
        pts.push([0.0, -0.3 + 0.11 * i as f64]);
    }
    for i in 0..5 {
        let s = i as f64 / 4.0;
        pts.push([-0.16 + 0.32 * s, 0.14 + 0.04 * (PI * s).sin()]);
    }
    // eyes, clockwise from the outer corner
    for cx in [-0.35, 0.35] {
        for i in 0..6 {
            let a = PI - PI * i as f64 / 3.0;
            pts.push([cx + 0.13 * a.cos(), -0.25 - 0.05 * a.sin()]);
        }
    }
    // outer and inner lips
    for i in 0..12 {
        let a = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push([0.3 * a.cos(), 0.45 - 0.12 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push([0.2 * a.cos(), 0.45 - 0.05 * a.sin()]);
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

struct Grid {
    cols: usize,
    full_rows: usize,
    partial: usize,
}

impl Grid {
    fn new(n: usize) -> Self {
        let full_rows = (n as f64).sqrt().floor() as usize;
        let cols = n / full_rows;
        Self { cols, full_rows, partial: n - full_rows * cols }
    }

    fn rows(&self) -> usize {
        self.full_rows + usize::from(self.partial > 0)
    }

    /// `(u, v)` in `[-1, 1]²` of every vertex in row-major order.
    fn coords(&self) -> Vec<(f64, f64)> {
        let rows = self.rows();
        let mut out = Vec::new();
        for r in 0..rows {
            let width = if r < self.full_rows { self.cols } else { self.partial };
            for c in 0..width {
                out.push((-1.0 + 2.0 * c as f64 / (self.cols - 1) as f64, -1.0 + 2.0 * r as f64 / (rows - 1) as f64));
            }
        }
        out
    }

    /// Triangles wound so the front surface normal points toward `+z`.
    fn triangles(&self) -> Vec<[u32; 3]> {
        let id = |r: usize, c: usize| (r * self.cols + c) as u32;
        let mut tris = Vec::new();
        for r in 0..self.full_rows - 1 {
            for c in 0..self.cols - 1 {
                tris.push([id(r, c), id(r, c + 1), id(r + 1, c)]);
                tris.push([id(r, c + 1), id(r + 1, c + 1), id(r + 1, c)]);
            }
        }
        let r = self.full_rows - 1;
        match self.partial {
            0 => {}
            1 => tris.push([id(r, 0), id(r, 1), id(r + 1, 0)]),
            k => {
                for c in 0..k - 1 {
                    tris.push([id(r, c), id(r, c + 1), id(r + 1, c)]);
                    tris.push([id(r, c + 1), id(r + 1, c + 1), id(r + 1, c)]);
                }
            }
        }
        tris
    }
}

fn round_f32(x: f64) -> f64 {
    f64::from(x as f32)
}

/// Builds a face-like model with `n` vertices, deterministically from `seed`.
///
/// The mean shape is a partial ellipsoid with a nose ridge, scaled into
/// `[-1, 1]³`. Basis columns are smooth random fields, orthonormalized
/// jointly, with per-component standard deviations decaying with index.
/// Every stored value is representable in `f32` so the model file round
/// trips exactly.
pub fn generate_synthetic_model(seed: u64, n: usize) -> Result<MorphableModel> {
    if n < NUM_LANDMARKS {
        return Err(Error::Config(format!("synthetic model needs at least {NUM_LANDMARKS} vertices, got {n}")));
    }
    let mut rng = ChaCha::seed_from_u64(seed);
    let grid = Grid::new(n);
    let uv = grid.coords();

    let mut mean = Vec::with_capacity(3 * n);
    for &(u, v) in &uv {
        let theta = 1.45 * u;
        let phi = 1.2 * v;
        let x = 0.8 * theta.sin() * phi.cos();
        let y = phi.sin();
        let mut z = 0.75 * theta.cos() * phi.cos();
        z += 0.22 * (-(x * x + 0.6 * (y + 0.05) * (y + 0.05)) / 0.015).exp();
        mean.extend_from_slice(&[x, y, z]);
    }
    normalize_into_unit_box(&mut mean);

    let mut columns: Vec<Vec<f64>> = (0..NUM_ID + NUM_EXP).map(|k| smooth_field(&mut rng, &uv, k >= NUM_ID)).collect();
    orthonormalize(&mut columns)?;
    let mut id_basis = Vec::with_capacity(3 * n * NUM_ID);
    let mut exp_basis = Vec::with_capacity(3 * n * NUM_EXP);
    for (k, col) in columns.iter().enumerate() {
        let dst = if k < NUM_ID { &mut id_basis } else { &mut exp_basis };
        dst.extend(col.iter().map(|&x| round_f32(x)));
    }

    let root = (3.0 * n as f64).sqrt();
    let mut param_std = vec![1.0; 9];
    param_std.extend([0.25; 3]);
    param_std.extend((0..NUM_ID).map(|k| 0.025 * root * 0.92f64.powi(k as i32)));
    param_std.extend((0..NUM_EXP).map(|k| 0.02 * root * 0.85f64.powi(k as i32)));
    let param_std: Vec<f64> = param_std.into_iter().map(round_f32).collect();
    debug_assert_eq!(param_std.len(), NUM_PARAMS);
    debug_assert_eq!(NUM_POSE, 12);

    let landmark_indices = snap_landmarks(&mean);
    let mean_texture = paint_texture(&mean);
    let mean_shape: Vec<f64> = mean.into_iter().map(round_f32).collect();

    let model = MorphableModel {
        mean_shape,
        id_basis,
        exp_basis,
        triangles: grid.triangles(),
        landmark_indices,
        param_std,
        mean_texture,
    };
    model.validate()?;
    Ok(model)
}

fn normalize_into_unit_box(shape: &mut [f64]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in shape.chunks_exact(3) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    for p in shape.chunks_exact_mut(3) {
        for a in 0..3 {
            p[a] = (p[a] - center[a]) / half;
        }
    }
}

/// Low-frequency cosine field per axis. With `3·MODES²` modes there is
/// room for every basis column without adding noise.
fn smooth_field(rng: &mut ChaCha, uv: &[(f64, f64)], expression: bool) -> Vec<f64> {
    let mut coef = [[[0.0; MODES]; MODES]; 3];
    for axis in &mut coef {
        for (p, row) in axis.iter_mut().enumerate() {
            for (q, c) in row.iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                *c = g / (1.0 + (p + q) as f64);
            }
        }
    }
    let mut out = Vec::with_capacity(3 * uv.len());
    for &(u, v) in uv {
        // expressions concentrate on the lower face
        let gate = if expression { 0.3 + 0.7 * (1.0 / (1.0 + (-4.0 * v).exp())) } else { 1.0 };
        for axis in &coef {
            let mut s = 0.0;
            for (p, row) in axis.iter().enumerate() {
                let cu = (p as f64 * PI * (u + 1.0) / 2.0).cos();
                for (q, c) in row.iter().enumerate() {
                    s += c * cu * (q as f64 * PI * (v + 1.0) / 2.0).cos();
                }
            }
            out.push(gate * s);
        }
    }
    out
}

/// Modified Gram-Schmidt, applied twice for numerical orthogonality.
fn orthonormalize(columns: &mut [Vec<f64>]) -> Result<()> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for k in 0..columns.len() {
        for _ in 0..2 {
            for j in 0..k {
                let (done, rest) = columns.split_at_mut(k);
                let proj = dot(&rest[0], &done[j]);
                rest[0].iter_mut().zip(&done[j]).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = dot(&columns[k], &columns[k]).sqrt();
        if norm < 1e-9 {
            return Err(Error::Config("degenerate basis: columns are linearly dependent".into()));
        }
        columns[k].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

/// Nearest front-facing vertex (in the image plane) to each template point.
fn snap_landmarks(mean: &[f64]) -> Vec<u32> {
    let (ext_x, ext_y) =
        mean.chunks_exact(3).fold((0.0f64, 0.0f64), |(ex, ey), p| (ex.max(p[0].abs()), ey.max(p[1].abs())));
    landmark_template()
        .iter()
        .map(|t| {
            let target = [t[0] * ext_x / 0.8, t[1] * ext_y];
            let mut best = (f64::INFINITY, 0u32);
            for (i, p) in mean.chunks_exact(3).enumerate() {
                if p[2] < 0.0 {
                    continue;
                }
                let d = (p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Skin tone with darker brows and eyes, reddish lips and shaded nostrils,
/// so the rendered face carries visible structure.
fn paint_texture(mean: &[f64]) -> Vec<f64> {
    let template = landmark_template();
    let (ext_x, ext_y) =
        mean.chunks_exact(3).fold((0.0f64, 0.0f64), |(ex, ey), p| (ex.max(p[0].abs()), ey.max(p[1].abs())));
    let regions: [(std::ops::Range<usize>, [f64; 3], f64); 4] = [
        (17..27, [0.30, 0.22, 0.18], 0.045),
        (31..36, [0.45, 0.30, 0.27], 0.04),
        (36..48, [0.12, 0.10, 0.10], 0.05),
        (48..68, [0.72, 0.28, 0.30], 0.06),
    ];
    let skin = [0.87, 0.70, 0.60];
    let mut out = Vec::with_capacity(mean.len());
    for p in mean.chunks_exact(3) {
        let mut color = skin;
        for (range, tint, sigma) in &regions {
            let d2 = template[range.clone()]
                .iter()
                .map(|t| (p[0] - t[0] * ext_x / 0.8).powi(2) + (p[1] - t[1] * ext_y).powi(2))
                .fold(f64::INFINITY, f64::min);
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                color[c] = color[c] * (1.0 - w) + tint[c] * w;
            }
        }
        out.extend(color.iter().map(|&c| round_f32(c.clamp(0.0, 1.0))));
    }
    out
}
