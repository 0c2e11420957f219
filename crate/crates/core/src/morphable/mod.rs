//! The morphable face model: linear shape synthesis, Euler rotations, the
//! 62-entry parameter vector and weak-perspective projection.
//!
//! Coordinates are image-aligned: `x` right, `y` down, `z` toward the
//! viewer. A projected point is `f·Pr·R·(S + t)` with `Pr` dropping `z`.

mod io;
mod synth;

pub use io::{read_model, write_model, MODEL_MAGIC};
pub use synth::{generate_synthetic_model, landmark_template};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const NUM_ID: usize = 40;
pub const NUM_EXP: usize = 10;
pub const NUM_POSE: usize = 12;
pub const NUM_PARAMS: usize = NUM_POSE + NUM_ID + NUM_EXP;
pub const NUM_LANDMARKS: usize = 68;

/// Mean shape plus identity and expression bases.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    /// `3N` interleaved `x, y, z`.
    pub mean_shape: Vec<f64>,
    /// Column-major `3N × 40`.
    pub id_basis: Vec<f64>,
    /// Column-major `3N × 10`.
    pub exp_basis: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
    pub landmark_indices: Vec<u32>,
    pub param_std: Vec<f64>,
    /// Per-vertex RGB in `[0, 1]`, interleaved like `mean_shape`.
    pub mean_texture: Vec<f64>,
}

impl MorphableModel {
    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        let bad = |what: String| Err(Error::Config(format!("morphable model: {what}")));
        if self.mean_shape.len() != 3 * n || n < NUM_LANDMARKS {
            return bad(format!("need at least {NUM_LANDMARKS} vertices, have {n}"));
        }
        if self.id_basis.len() != 3 * n * NUM_ID {
            return bad(format!("identity basis has {} entries, expected {}", self.id_basis.len(), 3 * n * NUM_ID));
        }
        if self.exp_basis.len() != 3 * n * NUM_EXP {
            return bad(format!("expression basis has {} entries, expected {}", self.exp_basis.len(), 3 * n * NUM_EXP));
        }
        if self.mean_texture.len() != 3 * n {
            return bad("mean texture length differs from 3N".into());
        }
        if self.landmark_indices.len() != NUM_LANDMARKS {
            return bad(format!("{} landmark indices, expected {NUM_LANDMARKS}", self.landmark_indices.len()));
        }
        if let Some(i) = self.landmark_indices.iter().find(|&&i| i as usize >= n) {
            return bad(format!("landmark index {i} out of range"));
        }
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return bad(format!("triangle {t:?} out of range"));
        }
        if self.param_std.len() != NUM_PARAMS || self.param_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("param_std must hold 62 positive finite values".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.mean_shape) || !finite(&self.id_basis) || !finite(&self.exp_basis) {
            return bad("non-finite shape data".into());
        }
        Ok(())
    }

    fn id_column(&self, k: usize) -> &[f64] {
        let len = self.mean_shape.len();
        &self.id_basis[k * len..(k + 1) * len]
    }

    fn exp_column(&self, k: usize) -> &[f64] {
        let len = self.mean_shape.len();
        &self.exp_basis[k * len..(k + 1) * len]
    }

    /// `S̄ + A_id·α_id + A_exp·α_exp`.
    pub fn synthesize_shape(&self, alpha_id: &[f64], alpha_exp: &[f64]) -> Result<Vec<f64>> {
        check_len("synthesize_shape", "alpha_id", alpha_id.len(), NUM_ID)?;
        check_len("synthesize_shape", "alpha_exp", alpha_exp.len(), NUM_EXP)?;
        let mut s = self.mean_shape.clone();
        for (k, &a) in alpha_id.iter().enumerate() {
            if a != 0.0 {
                s.iter_mut().zip(self.id_column(k)).for_each(|(v, &b)| *v += a * b);
            }
        }
        for (k, &a) in alpha_exp.iter().enumerate() {
            if a != 0.0 {
                s.iter_mut().zip(self.exp_column(k)).for_each(|(v, &b)| *v += a * b);
            }
        }
        Ok(s)
    }

    /// Synthesized positions of the given vertices only.
    pub fn synthesize_vertices(&self, indices: &[u32], alpha_id: &[f64], alpha_exp: &[f64]) -> Result<Vec<[f64; 3]>> {
        check_len("synthesize_vertices", "alpha_id", alpha_id.len(), NUM_ID)?;
        check_len("synthesize_vertices", "alpha_exp", alpha_exp.len(), NUM_EXP)?;
        let n3 = self.mean_shape.len();
        Ok(indices
            .iter()
            .map(|&vi| {
                let base = 3 * vi as usize;
                let mut p = [self.mean_shape[base], self.mean_shape[base + 1], self.mean_shape[base + 2]];
                for (k, &a) in alpha_id.iter().enumerate() {
                    let col = &self.id_basis[k * n3 + base..][..3];
                    (0..3).for_each(|c| p[c] += a * col[c]);
                }
                for (k, &a) in alpha_exp.iter().enumerate() {
                    let col = &self.exp_basis[k * n3 + base..][..3];
                    (0..3).for_each(|c| p[c] += a * col[c]);
                }
                p
            })
            .collect())
    }

    /// Basis entry `(A_id | A_exp)[3·vertex + axis, k]` for `k < 50`.
    #[cfg(test)]
    pub(crate) fn shape_basis(&self, k: usize, row: usize) -> f64 {
        let n3 = self.mean_shape.len();
        if k < NUM_ID {
            self.id_basis[k * n3 + row]
        } else {
            self.exp_basis[(k - NUM_ID) * n3 + row]
        }
    }
}

fn check_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::dim(op, format!("{what} has length {got}, expected {want}")))
    }
}

/// Pose as scale, Euler angles (radians) and model-space translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerPose {
    pub f: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub t3d: [f64; 3],
}

impl EulerPose {
    /// Unit scale, no rotation, no translation.
    pub fn identity() -> Self {
        Self { f: 1.0, pitch: 0.0, yaw: 0.0, roll: 0.0, t3d: [0.0; 3] }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.pitch, self.yaw, self.roll)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::InvalidPose(format!("scale must be positive, got {}", self.f)));
        }
        if ![self.pitch, self.yaw, self.roll].iter().chain(&self.t3d).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite angle or translation".into()));
        }
        Ok(())
    }
}

/// `Rz(roll)·Ry(yaw)·Rx(pitch)`.
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Rotation about the camera `y` axis (a lateral head turn).
pub fn yaw_rotation(angle: f64) -> Matrix3<f64> {
    rotation_from_euler(0.0, angle, 0.0)
}

/// Angles `(pitch, yaw, roll)` of a rotation under the
/// [`rotation_from_euler`] convention. At gimbal lock (`|yaw| = π/2`) roll
/// is pinned to zero.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let cy = r[(0, 0)].hypot(r[(1, 0)]);
    let yaw = (-r[(2, 0)]).atan2(cy);
    if cy > 1e-9 {
        let pitch = r[(2, 1)].atan2(r[(2, 2)]);
        let roll = r[(1, 0)].atan2(r[(0, 0)]);
        (pitch, yaw, roll)
    } else {
        // R = Ry(±π/2)·Rx(pitch): the middle row is (0, cos p, −sin p)
        let pitch = (-r[(1, 2)]).atan2(r[(1, 1)]);
        (pitch, yaw, 0.0)
    }
}

/// `f·Pr·R·(S + t)` for an interleaved `3N` shape.
pub fn project(shape: &[f64], pose: &EulerPose) -> Result<Vec<[f64; 2]>> {
    pose.validate()?;
    project_affine(shape, &(pose.rotation() * pose.f), &Vector3::from(pose.t3d))
}

/// `Pr·M·(S + t)` for a general `M`.
pub fn project_affine(shape: &[f64], m: &Matrix3<f64>, t: &Vector3<f64>) -> Result<Vec<[f64; 2]>> {
    if !shape.len().is_multiple_of(3) {
        return Err(Error::dim("project", format!("shape length {} not a multiple of 3", shape.len())));
    }
    if !shape.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("shape passed to project".into()));
    }
    Ok(shape
        .chunks_exact(3)
        .map(|p| {
            let v = m * (Vector3::new(p[0], p[1], p[2]) + t);
            [v.x, v.y]
        })
        .collect())
}

/// `f·R` flattened row-major, then `t_3d`.
pub fn pose_encode(pose: &EulerPose) -> [f64; NUM_POSE] {
    let m = pose.rotation() * pose.f;
    let mut out = [0.0; NUM_POSE];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out[9..].copy_from_slice(&pose.t3d);
    out
}

/// Inverse of [`pose_encode`]: `f = ∛det M`, `R` the rotation nearest to
/// `M/f` (orthogonal Procrustes), angles recovered from `R`.
pub fn pose_decode(pose12: &[f64]) -> Result<EulerPose> {
    check_len("pose_decode", "pose vector", pose12.len(), NUM_POSE)?;
    if !pose12.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite pose entries".into()));
    }
    let m = Matrix3::from_row_slice(&pose12[..9]);
    let det = m.determinant();
    if det <= 0.0 {
        return Err(Error::InvalidPose(format!("det(M) = {det} is not positive")));
    }
    let f = det.cbrt();
    let r = nearest_rotation(&(m / f));
    let (pitch, yaw, roll) = euler_from_rotation(&r);
    Ok(EulerPose { f, pitch, yaw, roll, t3d: [pose12[9], pose12[10], pose12[11]] })
}

fn nearest_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// The 62-entry regression target: pose (`f·R` row-major, `t_3d`), 40
/// identity and 10 expression coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector(pub [f64; NUM_PARAMS]);

impl ParamVector {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        check_len("param_vector", "parameters", values.len(), NUM_PARAMS)?;
        let mut out = [0.0; NUM_PARAMS];
        out.copy_from_slice(values);
        Ok(Self(out))
    }

    pub fn from_parts(pose: &EulerPose, alpha_id: &[f64], alpha_exp: &[f64]) -> Result<Self> {
        check_len("param_vector", "alpha_id", alpha_id.len(), NUM_ID)?;
        check_len("param_vector", "alpha_exp", alpha_exp.len(), NUM_EXP)?;
        let mut out = [0.0; NUM_PARAMS];
        out[..NUM_POSE].copy_from_slice(&pose_encode(pose));
        out[NUM_POSE..NUM_POSE + NUM_ID].copy_from_slice(alpha_id);
        out[NUM_POSE + NUM_ID..].copy_from_slice(alpha_exp);
        Ok(Self(out))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn pose12(&self) -> &[f64] {
        &self.0[..NUM_POSE]
    }

    pub fn alpha_id(&self) -> &[f64] {
        &self.0[NUM_POSE..NUM_POSE + NUM_ID]
    }

    pub fn alpha_exp(&self) -> &[f64] {
        &self.0[NUM_POSE + NUM_ID..]
    }

    /// `M = f·R`.
    pub fn pose_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0[..9])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[9], self.0[10], self.0[11])
    }

    pub fn decode_pose(&self) -> Result<EulerPose> {
        pose_decode(self.pose12())
    }

    /// Parameters of the same face seen through the image map
    /// `image = scale·crop + offset`, i.e. expressed in crop coordinates.
    pub fn to_crop_frame(&self, scale: f64, offset: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("crop scale must be positive, got {scale}")));
        }
        let m = self.pose_matrix() / scale;
        let inv = m.try_inverse().ok_or_else(|| Error::InvalidPose("singular pose matrix".into()))?;
        let shift = inv * Vector3::new(-offset[0] / scale, -offset[1] / scale, 0.0);
        let t = self.translation() + shift;
        let mut out = self.0;
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = m[(r, c)];
            }
        }
        out[9..12].copy_from_slice(t.as_slice());
        Ok(Self(out))
    }
}

/// `M·(S + t)` for every vertex: the 3D positions before the orthographic
/// drop of `z`. Fails on a pose whose determinant is not positive.
pub fn reconstruct_vertices(model: &MorphableModel, p: &ParamVector) -> Result<Vec<f64>> {
    validate_pose_matrix(p)?;
    let shape = model.synthesize_shape(p.alpha_id(), p.alpha_exp())?;
    let (m, t) = (p.pose_matrix(), p.translation());
    Ok(shape
        .chunks_exact(3)
        .flat_map(|v| {
            let w = m * (Vector3::new(v[0], v[1], v[2]) + t);
            [w.x, w.y, w.z]
        })
        .collect())
}

/// Reconstructed positions of the 68 landmark vertices.
pub fn reconstruct_landmarks(model: &MorphableModel, p: &ParamVector) -> Result<Vec<[f64; 3]>> {
    validate_pose_matrix(p)?;
    landmark_vertices(model, p)
}

/// As [`reconstruct_landmarks`] without the pose validity check; used on
/// raw network predictions during training.
pub(crate) fn landmark_vertices(model: &MorphableModel, p: &ParamVector) -> Result<Vec<[f64; 3]>> {
    let local = model.synthesize_vertices(&model.landmark_indices, p.alpha_id(), p.alpha_exp())?;
    let (m, t) = (p.pose_matrix(), p.translation());
    Ok(local
        .into_iter()
        .map(|v| {
            let w = m * (Vector3::from(v) + t);
            [w.x, w.y, w.z]
        })
        .collect())
}

/// 2D landmarks `Pr·V(P)`.
pub fn project_landmarks(model: &MorphableModel, p: &ParamVector) -> Result<Vec<[f64; 2]>> {
    Ok(reconstruct_landmarks(model, p)?.into_iter().map(|v| [v[0], v[1]]).collect())
}

fn validate_pose_matrix(p: &ParamVector) -> Result<()> {
    if !p.0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite parameters".into()));
    }
    let det = p.pose_matrix().determinant();
    if det <= 0.0 {
        return Err(Error::InvalidPose(format!("det(M) = {det} is not positive")));
    }
    Ok(())
}

/// Area-weighted unit vertex normals; isolated vertices get `(0, 0, 0)`.
pub fn vertex_normals(vertices: &[f64], triangles: &[[u32; 3]]) -> Vec<[f64; 3]> {
    let n = vertices.len() / 3;
    let mut acc = vec![Vector3::zeros(); n];
    let at = |i: u32| {
        let b = 3 * i as usize;
        Vector3::new(vertices[b], vertices[b + 1], vertices[b + 2])
    };
    for tri in triangles {
        let (a, b, c) = (at(tri[0]), at(tri[1]), at(tri[2]));
        let face = (b - a).cross(&(c - a));
        for &i in tri {
            acc[i as usize] += face;
        }
    }
    acc.into_iter()
        .map(|v| {
            let norm = v.norm();
            if norm > 0.0 {
                let u = v / norm;
                [u.x, u.y, u.z]
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// A landmark is visible when its vertex normal faces the viewer (`+z`)
/// after the pose is applied.
pub fn landmark_visibility(model: &MorphableModel, p: &ParamVector) -> Result<Vec<bool>> {
    let posed = reconstruct_vertices(model, p)?;
    let normals = vertex_normals(&posed, &model.triangles);
    Ok(model.landmark_indices.iter().map(|&i| normals[i as usize][2] > 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(rotation_from_euler(0.0, 0.0, 0.0), Matrix3::identity());
    }

    #[test]
    fn quarter_yaw_sends_x_to_minus_z() {
        let r = rotation_from_euler(0.0, FRAC_PI_2, 0.0);
        let v = r * Vector3::x();
        assert!((v - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn euler_round_trip_including_gimbal_lock() {
        for &(p, y, r) in &[(0.3, -0.7, 1.2), (-1.0, 1.4, -2.9), (2.0, 0.0, 0.1)] {
            let (p2, y2, r2) = euler_from_rotation(&rotation_from_euler(p, y, r));
            assert!((p - p2).abs() < 1e-12 && (y - y2).abs() < 1e-12 && (r - r2).abs() < 1e-12);
        }
        let locked = rotation_from_euler(0.4, FRAC_PI_2, 0.0);
        let (p, y, r) = euler_from_rotation(&locked);
        assert_eq!(r, 0.0);
        assert!((rotation_from_euler(p, y, r) - locked).norm() < 1e-9);
    }

    #[test]
    fn decode_identity_and_scaled_identity() {
        let pose = EulerPose { f: 1.0, pitch: 0.0, yaw: 0.0, roll: 0.0, t3d: [0.0; 3] };
        let enc = pose_encode(&pose);
        assert_eq!(&enc[..9], Matrix3::<f64>::identity().transpose().as_slice());
        assert_eq!(&enc[9..], &[0.0; 3]);
        let mut twice = [0.0; 12];
        for i in 0..3 {
            twice[4 * i] = 2.0;
        }
        let d = pose_decode(&twice).unwrap();
        assert!((d.f - 2.0).abs() < 1e-15);
        assert!(d.rotation().relative_eq(&Matrix3::identity(), 1e-12, 1e-12));
    }

    #[test]
    fn decode_rejects_reflections() {
        let mut m = [0.0; 12];
        m[0] = -1.0;
        m[4] = 1.0;
        m[8] = 1.0;
        assert!(matches!(pose_decode(&m), Err(Error::InvalidPose(_))));
    }

    #[test]
    fn crop_frame_maps_projection() {
        let model = generate_synthetic_model(3, 200).unwrap();
        let pose = EulerPose { f: 40.0, pitch: 0.1, yaw: -0.4, roll: 0.2, t3d: [1.0, 1.5, 0.0] };
        let p = ParamVector::from_parts(&pose, &[0.5; NUM_ID], &[0.1; NUM_EXP]).unwrap();
        let (scale, offset) = (0.8, [7.0, -3.0]);
        let q = p.to_crop_frame(scale, offset).unwrap();
        let a = project_landmarks(&model, &p).unwrap();
        let b = project_landmarks(&model, &q).unwrap();
        for (src, crop) in a.iter().zip(&b) {
            assert!((scale * crop[0] + offset[0] - src[0]).abs() < 1e-9);
            assert!((scale * crop[1] + offset[1] - src[1]).abs() < 1e-9);
        }
    }
}
