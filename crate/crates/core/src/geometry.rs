//! Pinhole cameras, similarity transforms, skeleton alignment and Procrustes
//! analysis.
//!
//! All coordinates are in meters unless stated otherwise. Camera frames follow
//! the usual optical convention: `x` right, `y` down, `z` along the optical
//! axis.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Skeleton3D, Topology, NUM_KEYPOINTS};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("depth {depth} outside valid range ({min}, {max}]")]
    InvalidDepth { depth: f64, min: f64, max: f64 },
    #[error("all skeleton keypoints coincide")]
    DegenerateSkeleton,
    #[error("point configuration is degenerate (rank below 2)")]
    DegenerateConfiguration,
    #[error("point sets differ in size ({0} vs {1}) or have fewer than 3 points")]
    SizeMismatch(usize, usize),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot read calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed calibration JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid calibration field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

impl CalibrationError {
    fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CalibrationError::Field {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Pinhole intrinsics of one RGB-D camera. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |field: &str, reason: String| GeometryError::InvalidField {
            field: field.to_string(),
            reason,
        };
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return Err(bad("fx", format!("must be finite and > 0, got {}", self.fx)));
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(bad("fy", format!("must be finite and > 0, got {}", self.fy)));
        }
        if self.width == 0 {
            return Err(bad("width", "must be > 0".into()));
        }
        if self.height == 0 {
            return Err(bad("height", "must be > 0".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(bad("cx", format!("must lie in [0, {}), got {}", self.width, self.cx)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(bad("cy", format!("must lie in [0, {}), got {}", self.height, self.cy)));
        }
        if !(self.depth_min.is_finite() && self.depth_min >= 0.0) {
            return Err(bad(
                "depth_min",
                format!("must be finite and >= 0, got {}", self.depth_min),
            ));
        }
        if !(self.depth_max.is_finite() && self.depth_max > self.depth_min) {
            return Err(bad(
                "depth_max",
                format!(
                    "must be finite and > depth_min ({}), got {}",
                    self.depth_min, self.depth_max
                ),
            ));
        }
        Ok(())
    }

    /// Whether a pixel lies inside the image.
    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    pub fn depth_is_valid(&self, depth: f64) -> bool {
        depth.is_finite() && depth > self.depth_min && depth <= self.depth_max
    }
}

/// Perspective projection of a camera-frame point to pixels. The result may
/// fall outside the image; callers check visibility.
pub fn project(point: &Vec3, cam: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    let z = point.z;
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(Vec2::new(cam.fx * point.x / z + cam.cx, cam.fy * point.y / z + cam.cy))
}

/// Inverse of [`project`] given the depth along the optical axis.
pub fn backproject(pixel: &Vec2, depth: f64, cam: &CameraIntrinsics) -> Result<Vec3, GeometryError> {
    if !cam.depth_is_valid(depth) {
        return Err(GeometryError::InvalidDepth {
            depth,
            min: cam.depth_min,
            max: cam.depth_max,
        });
    }
    Ok(Vec3::new(
        (pixel.x - cam.cx) * depth / cam.fx,
        (pixel.y - cam.cy) * depth / cam.fy,
        depth,
    ))
}

/// Similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
    scale: f64,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3, scale: f64) -> Result<Self, GeometryError> {
        check_rotation(&rotation, "rotation")?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidField {
                field: "scale".into(),
                reason: format!("must be finite and > 0, got {scale}"),
            });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidField {
                field: "translation".into(),
                reason: "must be finite".into(),
            });
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_rotation(rotation: Mat3) -> Result<Self, GeometryError> {
        Self::new(rotation, Vec3::zeros(), 1.0)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, point: &Vec3) -> Vec3 {
        self.scale * (self.rotation * point) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }
}

pub fn apply_transform(t: &RigidTransform, point: &Vec3) -> Vec3 {
    t.apply(point)
}

pub fn compose(t1: &RigidTransform, t2: &RigidTransform) -> RigidTransform {
    t1.compose(t2)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

/// Rotation about `axis` (need not be normalized) by `angle` radians.
pub fn rotation_about(axis: &Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}

fn check_rotation(r: &Mat3, field: &str) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidField {
            field: field.into(),
            reason: "must be finite".into(),
        });
    }
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    if ortho > ROTATION_TOLERANCE {
        return Err(GeometryError::InvalidField {
            field: field.into(),
            reason: format!("not orthonormal (max |RᵀR − I| = {ortho:e})"),
        });
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(GeometryError::InvalidField {
            field: field.into(),
            reason: format!("determinant {det} is not +1"),
        });
    }
    Ok(())
}

/// The walker's two cameras and the extrinsic linking them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub posture: CameraIntrinsics,
    pub gait: CameraIntrinsics,
    /// Maps gait-camera coordinates into the posture-camera frame.
    pub gait_to_posture: RigidTransform,
}

impl CameraRig {
    pub fn new(
        posture: CameraIntrinsics,
        gait: CameraIntrinsics,
        gait_to_posture: RigidTransform,
    ) -> Result<Self, GeometryError> {
        let rig = Self {
            posture,
            gait,
            gait_to_posture,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        prefix_field(self.posture.validate(), "posture")?;
        prefix_field(self.gait.validate(), "gait")?;
        if self.posture.width != self.gait.width || self.posture.height != self.gait.height {
            return Err(GeometryError::InvalidField {
                field: "gait.width".into(),
                reason: "both cameras must share the same frame size".into(),
            });
        }
        if (self.gait_to_posture.scale - 1.0).abs() > 0.0 {
            return Err(GeometryError::InvalidField {
                field: "gait_to_posture.scale".into(),
                reason: format!(
                    "must be exactly 1 for a rigid extrinsic, got {}",
                    self.gait_to_posture.scale
                ),
            });
        }
        Ok(())
    }

    pub fn camera(&self, which: CameraId) -> &CameraIntrinsics {
        match which {
            CameraId::Posture => &self.posture,
            CameraId::Gait => &self.gait,
        }
    }

    /// Posture-frame point expressed in the given camera's frame.
    pub fn to_camera(&self, which: CameraId, posture_point: &Vec3) -> Vec3 {
        match which {
            CameraId::Posture => *posture_point,
            CameraId::Gait => self.gait_to_posture.invert().apply(posture_point),
        }
    }

    /// Camera-frame point expressed in the posture frame.
    pub fn to_posture(&self, which: CameraId, camera_point: &Vec3) -> Vec3 {
        match which {
            CameraId::Posture => *camera_point,
            CameraId::Gait => self.gait_to_posture.apply(camera_point),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Parses and validates a calibration document, naming the offending
    /// field on failure.
    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let root = value
            .as_object()
            .ok_or_else(|| CalibrationError::field("<root>", "expected a JSON object"))?;
        for key in root.keys() {
            if !matches!(key.as_str(), "posture" | "gait" | "gait_to_posture") {
                return Err(CalibrationError::field(key.clone(), "unknown key"));
            }
        }
        let posture = parse_intrinsics(root.get("posture"), "posture")?;
        let gait = parse_intrinsics(root.get("gait"), "gait")?;
        let extrinsic = parse_extrinsic(root.get("gait_to_posture"))?;
        let rig = CameraRig {
            posture,
            gait,
            gait_to_posture: extrinsic,
        };
        rig.validate().map_err(|e| match e {
            GeometryError::InvalidField { field, reason } => CalibrationError::Field { field, reason },
            other => CalibrationError::field("<rig>", other.to_string()),
        })?;
        Ok(rig)
    }

    pub fn to_json(&self) -> String {
        let r = self.gait_to_posture.rotation;
        let rotation: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
        let t = self.gait_to_posture.translation;
        let doc = serde_json::json!({
            "posture": self.posture,
            "gait": self.gait,
            "gait_to_posture": {
                "rotation": rotation,
                "translation": [t.x, t.y, t.z],
                "scale": self.gait_to_posture.scale,
            }
        });
        serde_json::to_string_pretty(&doc).expect("calibration serializes")
    }
}

fn prefix_field(result: Result<(), GeometryError>, prefix: &str) -> Result<(), GeometryError> {
    result.map_err(|e| match e {
        GeometryError::InvalidField { field, reason } => GeometryError::InvalidField {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    })
}

const DISTORTION_KEYS: &[&str] = &[
    "k1",
    "k2",
    "k3",
    "k4",
    "k5",
    "k6",
    "p1",
    "p2",
    "distortion",
    "dist_coeffs",
    "distortion_coefficients",
];

fn parse_intrinsics(value: Option<&serde_json::Value>, name: &str) -> Result<CameraIntrinsics, CalibrationError> {
    let value = value.ok_or_else(|| CalibrationError::field(name, "missing"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CalibrationError::field(name, "expected an object"))?;
    for key in obj.keys() {
        if DISTORTION_KEYS.contains(&key.as_str()) {
            return Err(CalibrationError::field(
                format!("{name}.{key}"),
                "lens distortion is not supported by the pinhole model",
            ));
        }
    }
    serde_json::from_value(value.clone()).map_err(|e| CalibrationError::field(name, e.to_string()))
}

fn parse_extrinsic(value: Option<&serde_json::Value>) -> Result<RigidTransform, CalibrationError> {
    const NAME: &str = "gait_to_posture";
    let value = value.ok_or_else(|| CalibrationError::field(NAME, "missing"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CalibrationError::field(NAME, "expected an object"))?;
    for key in obj.keys() {
        match key.as_str() {
            "rotation" | "translation" | "scale" => {}
            "quaternion" | "quat" | "q" => {
                return Err(CalibrationError::field(
                    format!("{NAME}.{key}"),
                    "quaternions are not accepted; use a row-major 3x3 rotation",
                ))
            }
            _ => return Err(CalibrationError::field(format!("{NAME}.{key}"), "unknown key")),
        }
    }
    let numbers = |key: &str, len: usize| -> Result<Vec<f64>, CalibrationError> {
        let field = format!("{NAME}.{key}");
        let arr = obj
            .get(key)
            .ok_or_else(|| CalibrationError::field(&field, "missing"))?
            .as_array()
            .ok_or_else(|| CalibrationError::field(&field, "expected an array of numbers"))?;
        if arr.len() != len {
            let hint = if key == "rotation" && arr.len() == 4 {
                " (quaternions are not accepted)"
            } else {
                ""
            };
            return Err(CalibrationError::field(
                &field,
                format!("expected {len} numbers, got {}{hint}", arr.len()),
            ));
        }
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| CalibrationError::field(&field, "non-numeric entry"))
            })
            .collect()
    };
    let r = numbers("rotation", 9)?;
    let t = numbers("translation", 3)?;
    let scale = obj
        .get("scale")
        .ok_or_else(|| CalibrationError::field(format!("{NAME}.scale"), "missing"))?
        .as_f64()
        .ok_or_else(|| CalibrationError::field(format!("{NAME}.scale"), "expected a number"))?;
    RigidTransform::new(Mat3::from_row_slice(&r), Vec3::new(t[0], t[1], t[2]), scale).map_err(|e| match e {
        GeometryError::InvalidField { field, reason } => CalibrationError::Field {
            field: format!("{NAME}.{field}"),
            reason,
        },
        other => CalibrationError::field(NAME, other.to_string()),
    })
}

/// Which camera a keypoint is observed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Posture,
    Gait,
}

/// Reference point subtracted before rotating a world-frame skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    #[default]
    Centroid,
    Pelvis,
}

/// Moves a world-frame skeleton into the posture-camera frame: center it,
/// rotate by the body orientation, then translate so the wrist midpoint sits
/// on the midpoint of the two handle anchors.
pub fn align_skeleton_to_camera(
    skel: &Skeleton3D,
    topo: &Topology,
    orientation: &Mat3,
    handles: (Vec3, Vec3),
    centering: Centering,
) -> Result<Skeleton3D, GeometryError> {
    check_rotation(orientation, "imu_orientation")?;
    let first = skel.coords[0];
    if skel.coords.iter().all(|p| *p == first) {
        return Err(GeometryError::DegenerateSkeleton);
    }
    let center = match centering {
        Centering::Centroid => skel.coords.iter().sum::<Vec3>() / NUM_KEYPOINTS as f64,
        Centering::Pelvis => skel.coords[topo.root_index],
    };
    let mut coords = skel.coords;
    for p in coords.iter_mut() {
        *p = orientation * (*p - center);
    }
    let (lw, rw) = topo.wrist_indices();
    let wrist_mid = (coords[lw] + coords[rw]) * 0.5;
    let handle_mid = (handles.0 + handles.1) * 0.5;
    let shift = handle_mid - wrist_mid;
    for p in coords.iter_mut() {
        *p += shift;
    }
    Ok(Skeleton3D {
        coords,
        timestamp: skel.timestamp,
    })
}

/// Similarity or rigid fit selector for [`procrustes_fit_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcrustesMode {
    Similarity,
    Rigid,
}

/// Closed-form least-squares similarity transform mapping `source` onto
/// `target` (Umeyama).
pub fn procrustes_fit(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform, GeometryError> {
    procrustes_fit_with(source, target, ProcrustesMode::Similarity)
}

pub fn procrustes_fit_with(
    source: &[Vec3],
    target: &[Vec3],
    mode: ProcrustesMode,
) -> Result<RigidTransform, GeometryError> {
    let n = source.len();
    if n != target.len() || n < 3 {
        return Err(GeometryError::SizeMismatch(n, target.len()));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vec3>() * inv_n;
    let mu_t = target.iter().sum::<Vec3>() * inv_n;

    let mut cov = Mat3::zeros();
    let mut src_scatter = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        src_scatter += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    // Rank of the centered source cloud.
    let sv = SVD::new(src_scatter, false, false).singular_values;
    let mut sv_sorted = [sv[0], sv[1], sv[2]];
    sv_sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sv_sorted[0] > 0.0) || sv_sorted[1] <= 1e-12 * sv_sorted[0] {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = svd.singular_values;
    let reflect = if (u.determinant() * v_t.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    // Flip the axis with the smallest singular value when a reflection appears.
    let smallest = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
    let mut s = Vec3::new(1.0, 1.0, 1.0);
    s[smallest] = reflect;
    let rotation = u * Mat3::from_diagonal(&s) * v_t;
    let scale = match mode {
        ProcrustesMode::Similarity => (d[0] * s[0] + d[1] * s[1] + d[2] * s[2]) / var_s,
        ProcrustesMode::Rigid => 1.0,
    };
    let translation = mu_t - scale * (rotation * mu_s);
    RigidTransform::new(rotation, translation, scale)
}

/// Root-mean-square residual of `t(source)` against `target`.
pub fn procrustes_residual(t: &RigidTransform, source: &[Vec3], target: &[Vec3]) -> f64 {
    let sum: f64 = source
        .iter()
        .zip(target)
        .map(|(s, g)| (t.apply(s) - g).norm_squared())
        .sum();
    (sum / source.len().max(1) as f64).sqrt()
}
