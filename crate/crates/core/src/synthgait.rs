//! Synthetic walker-assisted gait and its dual-camera observations.
//!
//! The gait model is deliberately simple: sagittal leg swing with a knee
//! flex, a vertical pelvis bob at twice the cadence, a small lateral sway,
//! and wrists pinned to the walker handles with elbows placed by two-link
//! IK. It exists to exercise geometry, lifting and filtering code paths.
//! None of its numbers are biomechanical or clinical.
//!
//! World frame: x to the subject's left, y up, z in the walking direction.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    align_skeleton_to_camera, project, rotation_about, CameraId, CameraIntrinsics, CameraRig, Centering, GeometryError,
    Mat3, RigidTransform, Vec2, Vec3,
};
use crate::preprocess::{
    downsample_sequence, CoordScale, DepthImage, FramePair, Image8, PreprocessError, MODEL_HEIGHT, MODEL_WIDTH,
};
use crate::skeleton::{kp, stack_concat_coords, Skeleton2D, Skeleton3D, Topology, NUM_CONNECTIONS, NUM_KEYPOINTS};

pub const SPEEDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const MIN_RATE_HZ: f64 = 19.0;

/// Nominal adult segment lengths in connection order, meters.
pub const NOMINAL_SEGMENTS: [f64; NUM_CONNECTIONS] = [
    0.25, 0.28, // pelvis-spine, spine-neck
    0.18, 0.18, // neck-shoulders
    0.29, 0.29, // upper arms
    0.26, 0.26, // forearms
    0.10, 0.10, // pelvis-hips
    0.44, 0.44, // thighs
    0.45, 0.45, // knee-heel
    0.20, 0.20, // heel-toe
];

/// Handle anchors in the posture-camera frame (left, right), meters.
pub const DEFAULT_HANDLES: (Vec3, Vec3) = (Vec3::new(0.25, 0.10, 0.35), Vec3::new(-0.25, 0.10, 0.35));

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid gait parameters: {0}")]
    InvalidParams(String),
    #[error("frame {frame}: keypoint {keypoint} ({name}) is outside the {camera:?} camera frustum")]
    OutOfFrustum {
        frame: usize,
        keypoint: usize,
        name: &'static str,
        camera: CameraId,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Observation noise. Pixel noise is in native camera pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub pixel_sigma: f64,
    /// Meters.
    pub depth_sigma: f64,
    pub dead_rate: f64,
    pub occlusion_rate: f64,
    /// Add the per-subject body-thickness depth offsets.
    pub body_thickness: bool,
}

impl NoiseModel {
    pub fn clean() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_sigma: 0.0,
            dead_rate: 0.0,
            occlusion_rate: 0.0,
            body_thickness: false,
        }
    }

    pub fn paper_like() -> Self {
        Self {
            pixel_sigma: 1.5,
            depth_sigma: 0.010,
            dead_rate: 0.05,
            occlusion_rate: 0.01,
            body_thickness: true,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "clean" => Some(Self::clean()),
            "paper-like" => Some(Self::paper_like()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.pixel_sigma >= 0.0
            && self.depth_sigma >= 0.0
            && (0.0..=1.0).contains(&self.dead_rate)
            && (0.0..=1.0).contains(&self.occlusion_rate);
        if !ok {
            return Err(SynthError::InvalidParams(format!("bad noise model {self:?}")));
        }
        Ok(())
    }
}

/// One synthetic subject: body, posture and sensor quirks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u32,
    pub segments: [f64; NUM_CONNECTIONS],
    /// Depth offset of each keypoint's visible surface from the joint center, meters.
    pub body_thickness: [f64; NUM_KEYPOINTS],
    /// Forward torso lean, radians.
    pub lean: f64,
}

impl Subject {
    /// Deterministic subject `id` under `seed`: overall scale in [0.9, 1.1],
    /// ±5% per segment, thickness offsets of random sign in [10, 40] mm.
    pub fn generate(id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5u64 << 60) ^ ((id as u64 + 1) * 0x9E37_79B9));
        let scale = rng.random_range(0.9..=1.1);
        let mut segments = NOMINAL_SEGMENTS;
        for s in segments.iter_mut() {
            *s *= scale * rng.random_range(0.95..=1.05);
        }
        let mut body_thickness = [0.0; NUM_KEYPOINTS];
        for t in body_thickness.iter_mut() {
            let mag = rng.random_range(0.010..=0.040);
            *t = if rng.random_bool(0.5) { mag } else { -mag };
        }
        let lean = rng.random_range(0.08..0.22);
        Self {
            id,
            segments,
            body_thickness,
            lean,
        }
    }
}

/// Default cadence (strides per second) for a walking speed.
pub fn default_cadence(speed: f64) -> f64 {
    if speed <= 0.0 {
        0.0
    } else {
        0.6 + 0.5 * speed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitParams {
    pub subject: Subject,
    /// m/s.
    pub speed: f64,
    /// Hz.
    pub cadence: f64,
    /// Wrist anchors in the posture-camera frame (left, right).
    pub handles: (Vec3, Vec3),
    /// World-to-posture-camera rotation.
    pub orientation: Mat3,
    pub noise: NoiseModel,
    /// Seconds.
    pub duration: f64,
    pub rate_hz: f64,
    pub seed: u64,
}

impl GaitParams {
    pub fn new(subject: Subject, speed: f64, seed: u64) -> Self {
        Self {
            subject,
            speed,
            cadence: default_cadence(speed),
            handles: DEFAULT_HANDLES,
            orientation: default_orientation(),
            noise: NoiseModel::paper_like(),
            duration: 10.0,
            rate_hz: 30.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if let Some(i) = self.subject.segments.iter().position(|s| !(*s > 0.0)) {
            return bad(format!("segment {i} length must be > 0"));
        }
        if !(self.rate_hz >= MIN_RATE_HZ) {
            return bad(format!("rate {} Hz is below {MIN_RATE_HZ} Hz", self.rate_hz));
        }
        if !(self.duration > 0.0) || !(self.speed >= 0.0) || !(self.cadence >= 0.0) {
            return bad("duration must be > 0, speed and cadence >= 0".into());
        }
        self.noise.validate()
    }
}

/// Ground truth of one generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub params: GaitParams,
    /// Posture-camera frame.
    pub gt_3d: Vec<Skeleton3D>,
}

/// Camera facing the subject (looking along −z world) with y down.
pub fn facing_rotation() -> Mat3 {
    Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))
}

/// Camera pitched up by `angle` radians (negative looks down).
pub fn pitched(angle: f64) -> Mat3 {
    rotation_about(&Vec3::x(), -angle) * facing_rotation()
}

pub fn default_orientation() -> Mat3 {
    pitched(POSTURE_PITCH)
}

const POSTURE_PITCH: f64 = 0.0;
const GAIT_PITCH: f64 = -0.40;
/// Gait camera center relative to the posture camera, world axes.
const GAIT_OFFSET: Vec3 = Vec3::new(0.0, -0.55, 0.25);

/// The shipped rig: two 640×480 cameras, the gait one 0.55 m lower, set
/// back and pitched down towards the feet.
pub fn default_rig() -> CameraRig {
    let posture = CameraIntrinsics {
        fx: 380.0,
        fy: 380.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
        depth_min: 0.1,
        depth_max: 10.0,
    };
    let gait = CameraIntrinsics {
        fx: 260.0,
        fy: 260.0,
        ..posture
    };
    let r_p = pitched(POSTURE_PITCH);
    let r_g = pitched(GAIT_PITCH);
    let extr = RigidTransform::new(r_p * r_g.transpose(), r_p * GAIT_OFFSET, 1.0).expect("rotation is orthonormal");
    CameraRig::new(posture, gait, extr).expect("default rig is valid")
}

/// Elbow from two-link IK; lengths are kept exactly.
fn elbow_ik(shoulder: &Vec3, wrist: &Vec3, upper: f64, fore: f64, hint: &Vec3) -> Vec3 {
    let axis = wrist - shoulder;
    let d = axis.norm().clamp((upper - fore).abs() + 1e-9, upper + fore - 1e-9);
    let e = axis / axis.norm();
    let along = (upper * upper - fore * fore + d * d) / (2.0 * d);
    let height = (upper * upper - along * along).max(0.0).sqrt();
    let perp = (hint - e * hint.dot(&e)).normalize();
    shoulder + e * along + perp * height
}

/// Stride amplitude (radians) of the thigh swing.
pub fn swing_amplitude(speed: f64, cadence: f64, leg_len: f64) -> f64 {
    if cadence <= 0.0 || speed <= 0.0 {
        return 0.0;
    }
    (speed / (4.0 * cadence * leg_len)).clamp(0.0, 0.6).asin()
}

struct Body<'a> {
    s: &'a Subject,
    handles_world: (Vec3, Vec3),
    amplitude: f64,
    cadence: f64,
    phase: f64,
}

impl<'a> Body<'a> {
    fn new(params: &'a GaitParams, phase: f64) -> Self {
        let s = &params.subject;
        let seg = &s.segments;
        let leg = seg[10].min(seg[11]) + seg[12].min(seg[13]);
        // Wrist offsets that land exactly on the handles after alignment.
        let r = params.orientation;
        let (hl, hr) = params.handles;
        let half = r.transpose() * ((hl - hr) * 0.5);
        let neutral = Self::torso(s, 0.0, 0.0);
        let sh_mid = (neutral.l_shoulder + neutral.r_shoulder) * 0.5;
        let dir = Vec3::new(0.0, -0.6, 0.8).normalize();
        let mut reach = 0.0;
        for (shoulder, offset, arm) in [
            (neutral.l_shoulder, half, seg[4] + seg[6]),
            (neutral.r_shoulder, -half, seg[5] + seg[7]),
        ] {
            let q = offset - (shoulder - sh_mid);
            let target = 0.85 * arm;
            let dq = dir.dot(&q);
            reach += -dq + (dq * dq - q.norm_squared() + target * target).max(0.0).sqrt();
        }
        let mid = sh_mid + dir * (reach / 2.0);
        Self {
            s,
            handles_world: (mid + half, mid - half),
            amplitude: swing_amplitude(params.speed, params.cadence, leg),
            cadence: params.cadence,
            phase,
        }
    }

    fn torso(s: &Subject, bob: f64, sway: f64) -> Torso {
        let seg = &s.segments;
        let pelvis = Vec3::new(sway, bob, 0.0);
        let up = Vec3::new(0.0, s.lean.cos(), s.lean.sin());
        let spine = pelvis + up * seg[0];
        let neck = spine + up * seg[1];
        let l_dir = Vec3::new(1.0, -0.15, 0.0).normalize();
        let r_dir = Vec3::new(-1.0, -0.15, 0.0).normalize();
        Torso {
            pelvis,
            spine,
            neck,
            l_shoulder: neck + l_dir * seg[2],
            r_shoulder: neck + r_dir * seg[3],
        }
    }

    fn leg(&self, hip: Vec3, theta: f64, flex: f64, thigh: f64, shank: f64, foot: f64) -> (Vec3, Vec3, Vec3) {
        let knee = hip + Vec3::new(0.0, -theta.cos(), theta.sin()) * thigh;
        let a = theta - flex;
        let heel = knee + Vec3::new(0.0, -a.cos(), a.sin()) * shank;
        let toe = heel + Vec3::new(0.0, a.sin(), a.cos()) * foot;
        (knee, heel, toe)
    }

    fn at(&self, t: f64) -> [Vec3; NUM_KEYPOINTS] {
        let seg = &self.s.segments;
        let w = 2.0 * PI * self.cadence * t + self.phase;
        let leg = seg[10].min(seg[11]) + seg[12].min(seg[13]);
        let bob = 0.5 * leg * (1.0 - self.amplitude.cos()) * (2.0 * w).cos();
        let sway = 0.01 * w.sin() * (self.cadence > 0.0) as u8 as f64;
        let torso = Self::torso(self.s, bob, sway);
        let mut c = [Vec3::zeros(); NUM_KEYPOINTS];
        c[kp::PELVIS] = torso.pelvis;
        c[kp::SPINE_MID] = torso.spine;
        c[kp::NECK] = torso.neck;
        c[kp::L_SHOULDER] = torso.l_shoulder;
        c[kp::R_SHOULDER] = torso.r_shoulder;
        let (lw, rw) = self.handles_world;
        c[kp::L_WRIST] = lw;
        c[kp::R_WRIST] = rw;
        c[kp::L_ELBOW] = elbow_ik(&torso.l_shoulder, &lw, seg[4], seg[6], &Vec3::new(0.6, -0.5, -0.6));
        c[kp::R_ELBOW] = elbow_ik(&torso.r_shoulder, &rw, seg[5], seg[7], &Vec3::new(-0.6, -0.5, -0.6));
        c[kp::L_HIP] = torso.pelvis + Vec3::x() * seg[8];
        c[kp::R_HIP] = torso.pelvis - Vec3::x() * seg[9];
        let flex = |p: f64| 1.2 * self.amplitude * 0.5 * (1.0 + (p + PI / 2.0).sin());
        let (lk, lh, lt) = self.leg(
            c[kp::L_HIP],
            self.amplitude * w.sin(),
            flex(w),
            seg[10],
            seg[12],
            seg[14],
        );
        let wr = w + PI;
        let (rk, rh, rt) = self.leg(
            c[kp::R_HIP],
            self.amplitude * wr.sin(),
            flex(wr),
            seg[11],
            seg[13],
            seg[15],
        );
        c[kp::L_KNEE] = lk;
        c[kp::L_HEEL] = lh;
        c[kp::L_TOE] = lt;
        c[kp::R_KNEE] = rk;
        c[kp::R_HEEL] = rh;
        c[kp::R_TOE] = rt;
        c
    }
}

struct Torso {
    pelvis: Vec3,
    spine: Vec3,
    neck: Vec3,
    l_shoulder: Vec3,
    r_shoulder: Vec3,
}

/// Ground-truth gait in the posture-camera frame.
pub fn generate_sequence(params: &GaitParams) -> Result<SyntheticSequence, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let body = Body::new(params, phase);
    let topo = Topology::walker17();
    let n = (params.duration * params.rate_hz).round().max(1.0) as usize;
    let mut gt_3d = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / params.rate_hz;
        let world = Skeleton3D::new(body.at(t), t);
        gt_3d.push(align_skeleton_to_camera(
            &world,
            &topo,
            &params.orientation,
            params.handles,
            Centering::Centroid,
        )?);
    }
    Ok(SyntheticSequence {
        params: params.clone(),
        gt_3d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointObservation {
    pub camera: CameraId,
    /// Native pixels of `camera`.
    pub pixel: Vec2,
    /// Meters; 0 for a dead depth pixel.
    pub depth: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameObservation {
    pub timestamp: f64,
    pub keypoints: [KeypointObservation; NUM_KEYPOINTS],
}

/// Exact projection of every keypoint through its assigned camera.
pub fn project_frame(
    skel: &Skeleton3D,
    rig: &CameraRig,
    topo: &Topology,
    frame: usize,
) -> Result<[(CameraId, Vec2, f64); NUM_KEYPOINTS], SynthError> {
    let mut out = [(CameraId::Posture, Vec2::zeros(), 0.0); NUM_KEYPOINTS];
    for (k, o) in out.iter_mut().enumerate() {
        let cam = topo.camera_assignment[k];
        let intr = rig.camera(cam);
        let p = rig.to_camera(cam, &skel.coords[k]);
        let outside = SynthError::OutOfFrustum {
            frame,
            keypoint: k,
            name: topo.names[k],
            camera: cam,
        };
        if p.z < intr.depth_min || p.z > intr.depth_max {
            return Err(outside);
        }
        let px = project(&p, intr)?;
        if !intr.contains(&px) {
            return Err(outside);
        }
        *o = (cam, px, p.z);
    }
    Ok(out)
}

/// Noisy per-camera keypoints and depth readings.
pub fn render_observations(
    seq: &SyntheticSequence,
    rig: &CameraRig,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<FrameObservation>, SynthError> {
    noise.validate()?;
    let topo = Topology::walker17();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px_noise = Normal::new(0.0, noise.pixel_sigma).expect("sigma >= 0");
    let d_noise = Normal::new(0.0, noise.depth_sigma).expect("sigma >= 0");
    let mut out = Vec::with_capacity(seq.gt_3d.len());
    for (i, skel) in seq.gt_3d.iter().enumerate() {
        let exact = project_frame(skel, rig, &topo, i)?;
        let mut keypoints = [KeypointObservation {
            camera: CameraId::Posture,
            pixel: Vec2::zeros(),
            depth: 0.0,
            visible: true,
        }; NUM_KEYPOINTS];
        for (k, (cam, px, z)) in exact.into_iter().enumerate() {
            let intr = rig.camera(cam);
            let mut pixel = px;
            if noise.pixel_sigma > 0.0 {
                pixel.x += px_noise.sample(&mut rng);
                pixel.y += px_noise.sample(&mut rng);
            }
            let max_u = intr.width as f64 - 1e-6;
            let max_v = intr.height as f64 - 1e-6;
            pixel = Vec2::new(pixel.x.clamp(0.0, max_u), pixel.y.clamp(0.0, max_v));
            let mut depth = z;
            if noise.depth_sigma > 0.0 {
                depth += d_noise.sample(&mut rng);
            }
            if noise.body_thickness {
                depth += seq.params.subject.body_thickness[k];
            }
            let dead = noise.dead_rate > 0.0 && rng.random::<f64>() < noise.dead_rate;
            let occluded = noise.occlusion_rate > 0.0 && rng.random::<f64>() < noise.occlusion_rate;
            keypoints[k] = KeypointObservation {
                camera: cam,
                pixel,
                depth: if dead { 0.0 } else { depth },
                visible: !occluded,
            };
        }
        out.push(FrameObservation {
            timestamp: skel.timestamp,
            keypoints,
        });
    }
    Ok(out)
}

/// Reference detector: repackages observations as model-resolution
/// concatenated-frame skeletons. Occluded keypoints get confidence 0 and
/// hold their last visible position and depth (the current observation if
/// there is none yet).
pub fn synthetic_detector(
    obs: &[FrameObservation],
    rig: &CameraRig,
    model_w: usize,
    model_h: usize,
) -> Vec<Skeleton2D> {
    let (w, h) = (rig.posture.width as usize, rig.posture.height as usize);
    let scale = CoordScale::new((w, 2 * h), (model_w, model_h));
    let mut held: [Option<(Vec2, f64)>; NUM_KEYPOINTS] = [None; NUM_KEYPOINTS];
    obs.iter()
        .map(|f| {
            let per_cam = f.keypoints.map(|k| (k.camera, k.pixel));
            let concat = stack_concat_coords(&per_cam, h as f64);
            let mut s = Skeleton2D::zeros();
            s.timestamp = f.timestamp;
            for k in 0..NUM_KEYPOINTS {
                let here = (scale.apply(&concat[k]), f.keypoints[k].depth);
                let (p, d) = if f.keypoints[k].visible {
                    held[k] = Some(here);
                    s.confidence[k] = 1.0;
                    here
                } else {
                    held[k].unwrap_or(here)
                };
                s.coords[k] = p;
                s.depth_at_kp[k] = d;
            }
            s
        })
        .collect()
}

/// Default-resolution variant of [`synthetic_detector`].
pub fn detect_model_space(obs: &[FrameObservation], rig: &CameraRig) -> Vec<Skeleton2D> {
    synthetic_detector(obs, rig, MODEL_WIDTH, MODEL_HEIGHT)
}

pub const DISC_RADIUS: f64 = 7.0;
const BACKGROUND_GRAY: u8 = 40;
const BACKGROUND_DEPTH_MM: u16 = 3000;

/// Paints each keypoint as a disc over a flat background: RGB discs in the
/// color images, the observed depth in the depth images. Nearer discs are
/// drawn last.
pub fn render_frame_pair(obs: &FrameObservation, rig: &CameraRig) -> FramePair {
    let (w, h) = (rig.posture.width as usize, rig.posture.height as usize);
    let mut rgb = [
        Image8::filled(w, h, 3, BACKGROUND_GRAY),
        Image8::filled(w, h, 3, BACKGROUND_GRAY),
    ];
    let mut depth = [
        DepthImage::filled(w, h, BACKGROUND_DEPTH_MM),
        DepthImage::filled(w, h, BACKGROUND_DEPTH_MM),
    ];
    let mut order: Vec<usize> = (0..NUM_KEYPOINTS).collect();
    order.sort_by(|&a, &b| obs.keypoints[b].depth.total_cmp(&obs.keypoints[a].depth));
    let r = DISC_RADIUS;
    for k in order {
        let o = &obs.keypoints[k];
        let slot = match o.camera {
            CameraId::Posture => 0,
            CameraId::Gait => 1,
        };
        let mm = (o.depth * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
        let color = [120 + 7 * k as u8, 200 - 5 * k as u8, 60 + 11 * k as u8];
        let u0 = (o.pixel.x - r).floor().max(0.0) as usize;
        let u1 = ((o.pixel.x + r).ceil() as usize).min(w - 1);
        let v0 = (o.pixel.y - r).floor().max(0.0) as usize;
        let v1 = ((o.pixel.y + r).ceil() as usize).min(h - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let (du, dv) = (u as f64 - o.pixel.x, v as f64 - o.pixel.y);
                if du * du + dv * dv <= r * r {
                    let i = v * w + u;
                    rgb[slot].data[3 * i..3 * i + 3].copy_from_slice(&color);
                    depth[slot].data[i] = mm;
                }
            }
        }
    }
    let [posture_rgb, gait_rgb] = rgb;
    let [posture_depth, gait_depth] = depth;
    FramePair {
        posture_rgb,
        posture_depth,
        gait_rgb,
        gait_depth,
        timestamp: obs.timestamp,
    }
}

/// Subject ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SubjectSplit {
    /// 60/20/20 by subject id (6/2/2 for ten subjects), at least one each.
    pub fn for_subjects(n: u32) -> Self {
        assert!(n >= 3, "need at least three subjects");
        let val = ((n as f64 * 0.2).round() as u32).max(1);
        let test = val;
        let train = n - val - test;
        Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..n).collect(),
        }
    }

    pub fn role(&self, subject: u32) -> Option<&'static str> {
        if self.train.contains(&subject) {
            Some("train")
        } else if self.val.contains(&subject) {
            Some("val")
        } else if self.test.contains(&subject) {
            Some("test")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub subjects: u32,
    pub speeds: Vec<f64>,
    /// Seconds per sequence.
    pub duration: f64,
    /// Generation rate, Hz.
    pub source_rate: f64,
    /// Rate after downsampling, Hz.
    pub target_rate: f64,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            speeds: SPEEDS.to_vec(),
            duration: 112.0,
            source_rate: 30.0,
            target_rate: 10.0,
            noise: NoiseModel::paper_like(),
            seed: 0,
        }
    }
}

/// One subject at one speed, downsampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub subject: u32,
    pub speed: f64,
    pub gt: Vec<Skeleton3D>,
    pub observations: Vec<FrameObservation>,
    /// Model-resolution detections.
    pub detections: Vec<Skeleton2D>,
}

impl SequenceRecord {
    pub fn name(&self) -> String {
        format!("s{:02}_v{:02}", self.subject, (self.speed * 10.0).round() as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: SubjectSplit,
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn subset<'a>(&'a self, ids: &'a [u32]) -> impl Iterator<Item = &'a SequenceRecord> + 'a {
        self.sequences.iter().filter(move |s| ids.contains(&s.subject))
    }
}

/// Sequence seed for one subject and speed.
pub fn sequence_seed(seed: u64, subject: u32, speed_index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(subject as u64 * 1009 + speed_index as u64 * 7919 + 1)
}

/// Generates, renders, downsamples and detects every subject × speed.
pub fn generate_dataset(cfg: &DatasetConfig, rig: &CameraRig) -> Result<Dataset, SynthError> {
    let split = SubjectSplit::for_subjects(cfg.subjects);
    let mut sequences = Vec::new();
    for subject in 0..cfg.subjects {
        let body = Subject::generate(subject, cfg.seed);
        for (si, &speed) in cfg.speeds.iter().enumerate() {
            let seq_seed = sequence_seed(cfg.seed, subject, si);
            let mut params = GaitParams::new(body.clone(), speed, seq_seed);
            params.duration = cfg.duration;
            params.rate_hz = cfg.source_rate;
            params.noise = cfg.noise;
            let seq = generate_sequence(&params)?;
            let obs = render_observations(&seq, rig, &cfg.noise, seq_seed ^ 0xA5A5)?;
            let ts: Vec<f64> = seq.gt_3d.iter().map(|s| s.timestamp).collect();
            let idx = downsample_sequence(&ts, cfg.source_rate, cfg.target_rate)?;
            let gt: Vec<Skeleton3D> = idx.iter().map(|&i| seq.gt_3d[i]).collect();
            let observations: Vec<FrameObservation> = idx.iter().map(|&i| obs[i]).collect();
            let detections = detect_model_space(&observations, rig);
            sequences.push(SequenceRecord {
                subject,
                speed,
                gt,
                observations,
                detections,
            });
        }
    }
    Ok(Dataset { split, sequences })
}
