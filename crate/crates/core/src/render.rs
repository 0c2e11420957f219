//! Z-buffer rasterization of the posed mean-texture mesh and landmark
//! overlays.
//!
//! Pixel `(i, j)` is sampled at its center `(i + 0.5, j + 0.5)`. Larger `z`
//! is closer to the viewer. Shared edges follow a top-left fill rule and
//! exact depth ties go to the lower triangle index, so the result does not
//! depend on triangle order.

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::morphable::{reconstruct_vertices, MorphableModel, ParamVector};

/// Ambient term of the headlight shading `ambient + (1 − ambient)·max(0, n_z)`.
pub const AMBIENT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub color: RgbImage,
    /// Per-pixel depth, `−∞` where nothing was drawn.
    pub depth: Vec<f64>,
    /// Index of the triangle that owns each pixel.
    pub owner: Vec<Option<u32>>,
    /// Zero-area triangles skipped so far.
    pub degenerate: usize,
}

impl Framebuffer {
    pub fn new(background: RgbImage) -> Self {
        let n = background.width() * background.height();
        Self { color: background, depth: vec![f64::NEG_INFINITY; n], owner: vec![None; n], degenerate: 0 }
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// What untouched pixels show.
#[derive(Debug, Clone)]
pub enum Background<'a> {
    Flat([f32; 3]),
    Image(&'a RgbImage),
}

/// Signed edge function; positive on the interior side of a positively
/// oriented triangle (`y` down).
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top and left edges own the pixels lying exactly on them.
fn owns_boundary(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Coverage and barycentric weights of a pixel center, or `None` when the
/// pixel is outside (or on a boundary the triangle does not own). The
/// triangle must be positively oriented.
fn cover(v: [[f64; 2]; 3], area: f64, p: [f64; 2]) -> Option<[f64; 3]> {
    let mut w = [0.0; 3];
    for k in 0..3 {
        let (a, b) = (v[(k + 1) % 3], v[(k + 2) % 3]);
        let e = edge(a, b, p);
        if e < 0.0 || (e == 0.0 && !owns_boundary(a, b)) {
            return None;
        }
        w[k] = e / area;
    }
    Some(w)
}

/// Vertex order making the screen-space triangle positively oriented,
/// with its area; `None` for zero area.
fn oriented(v: &[[f64; 3]; 3]) -> Option<([usize; 3], f64)> {
    let area = edge([v[0][0], v[0][1]], [v[1][0], v[1][1]], [v[2][0], v[2][1]]);
    if area > 0.0 {
        Some(([0, 1, 2], area))
    } else if area < 0.0 {
        Some(([0, 2, 1], -area))
    } else {
        None
    }
}

/// Rasterizes screen-space triangles (`x`, `y` in pixels, `z` depth) with
/// per-vertex colors into `fb`.
pub fn rasterize_triangles(
    fb: &mut Framebuffer,
    vertices: &[[f64; 3]],
    colors: &[[f64; 3]],
    triangles: &[[u32; 3]],
) -> Result<()> {
    if colors.len() != vertices.len() {
        return Err(Error::dim("rasterize", "one color per vertex required"));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= vertices.len())) {
        return Err(Error::dim("rasterize", format!("triangle {t:?} indexes past {} vertices", vertices.len())));
    }
    let (w, h) = (fb.width(), fb.height());
    for (ti, tri) in triangles.iter().enumerate() {
        let pts = tri.map(|i| vertices[i as usize]);
        if pts.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("triangle {ti} has non-finite vertices")));
        }
        let Some((order, area)) = oriented(&pts) else {
            fb.degenerate += 1;
            continue;
        };
        let p = order.map(|k| pts[k]);
        let cols = order.map(|k| colors[tri[k] as usize]);
        // the mesh winding makes outward normals point to +z when facing
        // the viewer; back faces get only the ambient term
        let n = face_normal(&pts);
        let shade = AMBIENT + (1.0 - AMBIENT) * n[2].max(0.0);
        let xy = p.map(|q| [q[0], q[1]]);
        let lo = |k: usize| p.iter().map(|q| q[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| p.iter().map(|q| q[k]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (lo(0) - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo(1) - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi(0) - 0.5).floor()).min(w as f64 - 1.0);
        let y1 = ((hi(1) - 0.5).floor()).min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for py in y0..=y1 as usize {
            for px in x0..=x1 as usize {
                let Some(b) = cover(xy, area, [px as f64 + 0.5, py as f64 + 0.5]) else { continue };
                let z = b[0] * p[0][2] + b[1] * p[1][2] + b[2] * p[2][2];
                let i = py * w + px;
                let wins = z > fb.depth[i] || (z == fb.depth[i] && fb.owner[i].is_some_and(|o| (ti as u32) < o));
                if !wins {
                    continue;
                }
                fb.depth[i] = z;
                fb.owner[i] = Some(ti as u32);
                let rgb =
                    [0, 1, 2].map(|c| ((b[0] * cols[0][c] + b[1] * cols[1][c] + b[2] * cols[2][c]) * shade) as f32);
                fb.color.set(px, py, rgb);
            }
        }
    }
    Ok(())
}

fn face_normal(p: &[[f64; 3]; 3]) -> [f64; 3] {
    let u = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
    let v = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        return [0.0; 3];
    }
    n.map(|c| c / len)
}

/// Renders the posed mean-texture mesh of `p` over `background`.
pub fn rasterize(
    model: &MorphableModel,
    p: &ParamVector,
    width: usize,
    height: usize,
    background: Background<'_>,
) -> Result<Framebuffer> {
    if width == 0 || height == 0 {
        return Err(Error::Config("framebuffer needs positive dimensions".into()));
    }
    let bg = match background {
        Background::Flat(c) => RgbImage::new(width, height, c),
        Background::Image(img) => {
            if img.width() != width || img.height() != height {
                return Err(Error::dim("rasterize", "background size differs from the framebuffer"));
            }
            img.clone()
        }
    };
    let posed = reconstruct_vertices(model, p)?;
    let verts: Vec<[f64; 3]> = posed.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
    let colors: Vec<[f64; 3]> = model.mean_texture.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut fb = Framebuffer::new(bg);
    rasterize_triangles(&mut fb, &verts, &colors, &model.triangles)?;
    Ok(fb)
}

pub const VISIBLE_COLOR: [f32; 3] = [0.1, 1.0, 0.2];
pub const HIDDEN_COLOR: [f32; 3] = [1.0, 0.2, 0.1];
pub const LANDMARK_RADIUS: f64 = 2.0;

/// Draws a filled disc of radius 2 px per landmark: green when visible,
/// red otherwise. Pixels whose centers are within the radius are painted.
pub fn overlay_landmarks(image: &mut RgbImage, landmarks: &[[f64; 2]], visibility: &[bool]) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    for (j, l) in landmarks.iter().enumerate() {
        if !l[0].is_finite() || !l[1].is_finite() {
            continue;
        }
        let color = if visibility.get(j).copied().unwrap_or(true) { VISIBLE_COLOR } else { HIDDEN_COLOR };
        let r = LANDMARK_RADIUS;
        let (x0, x1) = ((l[0] - r - 0.5).floor() as i64, (l[0] + r).ceil() as i64);
        let (y0, y1) = ((l[1] - r - 0.5).floor() as i64, (l[1] + r).ceil() as i64);
        for y in y0.max(0)..=y1.min(h - 1) {
            for x in x0.max(0)..=x1.min(w - 1) {
                let (dx, dy) = (x as f64 + 0.5 - l[0], y as f64 + 0.5 - l[1]);
                if dx * dx + dy * dy <= r * r {
                    image.set(x as usize, y as usize, color);
                }
            }
        }
    }
}
