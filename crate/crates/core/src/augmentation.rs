//! Face cropping, profile rotation and virtual-sample synthesis, plus the
//! JSON-lines annotation format.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::morphable::{
    landmark_visibility, project_landmarks, reconstruct_vertices, yaw_rotation, EulerPose, MorphableModel, ParamVector,
    NUM_EXP, NUM_ID, NUM_LANDMARKS, NUM_PARAMS, NUM_POSE,
};
use crate::render::{rasterize, Background};

/// Side of the network input crop.
pub const CROP_SIZE: usize = 120;
/// Fraction by which a detected box is enlarged before squaring.
pub const BBOX_ENLARGE: f64 = 0.25;
/// Face box of rendered virtual samples; its enlarged square is exactly
/// the 120×120 frame, so cropping them is the identity.
pub const VIRTUAL_BBOX: [f64; 4] = [12.0, 12.0, 96.0, 96.0];
const VIRTUAL_BACKGROUND: [f32; 3] = [0.12, 0.12, 0.14];

/// A square crop resampled to `CROP_SIZE²` with its map back to the source:
/// `source = origin + scale·crop`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    pub image: RgbImage,
    pub bbox: [f64; 4],
    pub origin: [f64; 2],
    pub scale: f64,
}

impl FaceCrop {
    pub fn to_source(&self, p: [f64; 2]) -> [f64; 2] {
        [self.origin[0] + self.scale * p[0], self.origin[1] + self.scale * p[1]]
    }

    pub fn to_crop(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.origin[0]) / self.scale, (p[1] - self.origin[1]) / self.scale]
    }

    /// Network input `[3, 120, 120]` in `[-1, 1]`.
    pub fn planar(&self) -> Vec<f32> {
        self.image.to_planar_signed()
    }
}

/// Square region `(origin, side)` around `bbox = [x, y, w, h]` after
/// enlarging each side by 25%.
pub fn crop_square(bbox: [f64; 4]) -> Result<([f64; 2], f64)> {
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0) || !bbox.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!("bounding box {bbox:?} needs positive finite width and height")));
    }
    let side = (1.0 + BBOX_ENLARGE) * w.max(h);
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    Ok(([cx - side / 2.0, cy - side / 2.0], side))
}

/// Enlarges `bbox` by 25%, squares it about its center and bilinearly
/// resamples it to 120×120. Pixels beyond the frame are black.
pub fn crop_face(image: &RgbImage, bbox: [f64; 4]) -> Result<FaceCrop> {
    let [x, y, w, h] = bbox;
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    if !(w > 0.0 && h > 0.0) || x >= iw || y >= ih || x + w <= 0.0 || y + h <= 0.0 {
        return Err(Error::Config(format!(
            "bounding box {bbox:?} does not intersect the {}×{} image",
            image.width(),
            image.height()
        )));
    }
    let (origin, side) = crop_square(bbox)?;
    let scale = side / CROP_SIZE as f64;
    let mut out = RgbImage::new(CROP_SIZE, CROP_SIZE, [0.0; 3]);
    for v in 0..CROP_SIZE {
        for u in 0..CROP_SIZE {
            let sx = origin[0] + scale * (u as f64 + 0.5);
            let sy = origin[1] + scale * (v as f64 + 0.5);
            out.set(u, v, image.sample(sx, sy));
        }
    }
    Ok(FaceCrop { image: out, bbox, origin, scale })
}

/// Everything the trainer needs about one face, in crop coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: RgbImage,
    pub params: ParamVector,
    pub landmarks: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    pub yaw_deg: f64,
    /// Face box in crop coordinates (the NME normalizer).
    pub bbox: [f64; 4],
}

impl TrainingSample {
    /// Builds labels from `params` so they are consistent by construction.
    pub fn from_params(model: &MorphableModel, image: RgbImage, params: ParamVector, bbox: [f64; 4]) -> Result<Self> {
        let pose = params.decode_pose()?;
        Ok(Self {
            image,
            params,
            landmarks: project_landmarks(model, &params)?,
            visibility: landmark_visibility(model, &params)?,
            yaw_deg: pose.yaw.to_degrees(),
            bbox,
        })
    }

    /// Largest distance in pixels between the stored landmarks and the
    /// projection of the stored parameters.
    pub fn reprojection_error(&self, model: &MorphableModel) -> Result<f64> {
        let proj = project_landmarks(model, &self.params)?;
        if proj.len() != self.landmarks.len() {
            return Err(Error::dim("reprojection_error", "landmark count differs"));
        }
        Ok(proj.iter().zip(&self.landmarks).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).fold(0.0, f64::max))
    }
}

/// Turns the head by an extra `delta_deg` of yaw about its own model
/// origin: `R' = Ry(δ)·R`, with the translation re-expressed so the face
/// stays in place. Labels are recomputed; the image is left as is.
pub fn rotate_profile(sample: &TrainingSample, model: &MorphableModel, delta_deg: f64) -> Result<TrainingSample> {
    if !(delta_deg.abs() <= 90.0) {
        return Err(Error::Config(format!("profile rotation must be within ±90°, got {delta_deg}")));
    }
    let pose = sample.params.decode_pose()?;
    if delta_deg == 0.0 {
        return Ok(sample.clone());
    }
    let m = sample.params.pose_matrix();
    let r = m / pose.f;
    let r_new = yaw_rotation(delta_deg.to_radians()) * r;
    let t_new = r_new.transpose() * r * sample.params.translation();
    let m_new = r_new * pose.f;
    let mut p = sample.params;
    for row in 0..3 {
        for col in 0..3 {
            p.0[3 * row + col] = m_new[(row, col)];
        }
    }
    p.0[9..12].copy_from_slice(t_new.as_slice());
    TrainingSample::from_params(model, sample.image.clone(), p, sample.bbox)
}

/// Random face with shape coefficients `α ~ N(0, std²)`, yaw uniform in
/// `[-90°, 90°]` and pitch, roll uniform in `[-30°, 30°]`, scaled and
/// centered so the posed mesh spans 80% of the 120×120 frame, rendered
/// with the mean texture.
pub fn synthesize_virtual_sample(model: &MorphableModel, seed: u64) -> Result<TrainingSample> {
    let mut rng = crate::rng::Rng::seed_from_u64(seed);
    let mut coeffs = [0.0; NUM_ID + NUM_EXP];
    for (k, c) in coeffs.iter_mut().enumerate() {
        *c = model.param_std[NUM_POSE + k] * rng.sample::<f64, _>(StandardNormal);
    }
    let angle = |rng: &mut crate::rng::Rng, limit: f64| rng.random_range(-limit..=limit);
    let mut pose = EulerPose {
        f: 1.0,
        pitch: angle(&mut rng, 30f64.to_radians()),
        yaw: angle(&mut rng, FRAC_PI_2),
        roll: angle(&mut rng, 30f64.to_radians()),
        t3d: [0.0; 3],
    };
    let unit = ParamVector::from_parts(&pose, &coeffs[..NUM_ID], &coeffs[NUM_ID..])?;
    let posed = reconstruct_vertices(model, &unit)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in posed.chunks_exact(3) {
        for a in 0..2 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    pose.f = 0.8 * CROP_SIZE as f64 / extent;
    let center = CROP_SIZE as f64 / 2.0;
    // shift in the camera frame, then express it in the model frame
    let shift = Vector3::new(center / pose.f - 0.5 * (lo[0] + hi[0]), center / pose.f - 0.5 * (lo[1] + hi[1]), 0.0);
    let t = pose.rotation().transpose() * shift;
    pose.t3d = [t.x, t.y, t.z];
    let params = ParamVector::from_parts(&pose, &coeffs[..NUM_ID], &coeffs[NUM_ID..])?;
    let fb = rasterize(model, &params, CROP_SIZE, CROP_SIZE, Background::Flat(VIRTUAL_BACKGROUND))?;
    TrainingSample::from_params(model, fb.color, params, VIRTUAL_BBOX)
}

/// One JSON-lines annotation record. Coordinates are in source-image
/// pixels; `params`, when present, maps the model into the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_path: String,
    pub bbox: [f64; 4],
    pub landmarks: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    pub yaw_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}

impl Annotation {
    fn check(&self) -> std::result::Result<(), String> {
        if self.landmarks.len() != NUM_LANDMARKS {
            return Err(format!("expected {NUM_LANDMARKS} landmarks, got {}", self.landmarks.len()));
        }
        if self.visibility.len() != NUM_LANDMARKS {
            return Err(format!("expected {NUM_LANDMARKS} visibility flags, got {}", self.visibility.len()));
        }
        if let Some(p) = &self.params {
            if p.len() != NUM_PARAMS {
                return Err(format!("expected {NUM_PARAMS} params, got {}", p.len()));
            }
        }
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return Err(format!("bbox {:?} has nonpositive size", self.bbox));
        }
        Ok(())
    }

    /// Annotation of a sample whose crop frame is its image frame.
    pub fn from_sample(sample: &TrainingSample, image_path: impl Into<String>) -> Self {
        Self {
            image_path: image_path.into(),
            bbox: sample.bbox,
            landmarks: sample.landmarks.clone(),
            visibility: sample.visibility.clone(),
            yaw_deg: sample.yaw_deg,
            params: Some(sample.params.0.to_vec()),
        }
    }
}

/// Reads JSON-lines records of type `T`, reporting the 1-based line of the
/// first malformed one. Blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.into(), line: i + 1, detail: e.to_string() })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Annotations with schema checks, errors carrying the line number.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |detail: String| Error::Parse { path: path.into(), line: i + 1, detail };
        let a: Annotation = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        a.check().map_err(parse)?;
        out.push(a);
    }
    Ok(out)
}

/// Resolves an annotation's image path against the annotation file.
pub fn resolve_image_path(annotations: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        annotations.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads an annotated image as a training sample in crop coordinates.
/// Requires `params`.
pub fn load_sample(annotations: &Path, a: &Annotation) -> Result<TrainingSample> {
    let params =
        a.params.as_ref().ok_or_else(|| Error::Config(format!("annotation for {} has no params", a.image_path)))?;
    let image = RgbImage::read_ppm(&resolve_image_path(annotations, &a.image_path))?;
    let crop = crop_face(&image, a.bbox)?;
    let p = ParamVector::from_slice(params)?.to_crop_frame(crop.scale, crop.origin)?;
    let [x, y, w, h] = a.bbox;
    let corner = crop.to_crop([x, y]);
    let bbox = [corner[0], corner[1], w / crop.scale, h / crop.scale];
    let landmarks = a.landmarks.iter().map(|&l| crop.to_crop(l)).collect();
    Ok(TrainingSample {
        image: crop.image,
        params: p,
        landmarks,
        visibility: a.visibility.clone(),
        yaw_deg: a.yaw_deg,
        bbox,
    })
}
