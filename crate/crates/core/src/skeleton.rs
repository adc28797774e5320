//! Keypoint topology, 2D/3D skeleton containers and the skeleton sequence
//! file format.
//!
//! The 2D skeleton lives in the concatenated dual-camera frame: the posture
//! image on top, the gait image stacked below it, so a frame of `W x H_cam`
//! per camera becomes `W x 2*H_cam`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geometry::{CameraId, Vec2, Vec3};

pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_CONNECTIONS: usize = 16;

/// Canonical keypoint order: root first, then proximal before distal, left
/// before right.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "pelvis",
    "spine_mid",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_heel",
    "right_heel",
    "left_toe",
    "right_toe",
];

pub mod kp {
    pub const PELVIS: usize = 0;
    pub const SPINE_MID: usize = 1;
    pub const NECK: usize = 2;
    pub const L_SHOULDER: usize = 3;
    pub const R_SHOULDER: usize = 4;
    pub const L_ELBOW: usize = 5;
    pub const R_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_WRIST: usize = 8;
    pub const L_HIP: usize = 9;
    pub const R_HIP: usize = 10;
    pub const L_KNEE: usize = 11;
    pub const R_KNEE: usize = 12;
    pub const L_HEEL: usize = 13;
    pub const R_HEEL: usize = 14;
    pub const L_TOE: usize = 15;
    pub const R_TOE: usize = 16;
}

/// Limb segments as (parent, child) pairs.
pub const CONNECTIONS: [(usize, usize); NUM_CONNECTIONS] = [
    (kp::PELVIS, kp::SPINE_MID),
    (kp::SPINE_MID, kp::NECK),
    (kp::NECK, kp::L_SHOULDER),
    (kp::NECK, kp::R_SHOULDER),
    (kp::L_SHOULDER, kp::L_ELBOW),
    (kp::R_SHOULDER, kp::R_ELBOW),
    (kp::L_ELBOW, kp::L_WRIST),
    (kp::R_ELBOW, kp::R_WRIST),
    (kp::PELVIS, kp::L_HIP),
    (kp::PELVIS, kp::R_HIP),
    (kp::L_HIP, kp::L_KNEE),
    (kp::R_HIP, kp::R_KNEE),
    (kp::L_KNEE, kp::L_HEEL),
    (kp::R_KNEE, kp::R_HEEL),
    (kp::L_HEEL, kp::L_TOE),
    (kp::R_HEEL, kp::R_TOE),
];

pub const TOPOLOGY_NAME: &str = "walker17";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("keypoint {keypoint} ({name}) at v={v} lies in the wrong camera band")]
    WrongHalf {
        keypoint: usize,
        name: &'static str,
        v: f64,
    },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("expected a {expected} sequence, found {found}")]
    WrongSpace { expected: &'static str, found: String },
}

/// Keypoint names, the limb tree, the root and the per-keypoint camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub names: [&'static str; NUM_KEYPOINTS],
    pub connections: [(usize, usize); NUM_CONNECTIONS],
    pub root_index: usize,
    pub camera_assignment: [CameraId; NUM_KEYPOINTS],
}

impl Default for Topology {
    fn default() -> Self {
        Self::walker17()
    }
}

impl Topology {
    /// Torso and arms are seen by the posture camera, hips and legs by the
    /// gait camera.
    pub fn walker17() -> Self {
        let mut camera_assignment = [CameraId::Posture; NUM_KEYPOINTS];
        for c in camera_assignment.iter_mut().skip(kp::L_HIP) {
            *c = CameraId::Gait;
        }
        Self {
            names: KEYPOINT_NAMES,
            connections: CONNECTIONS,
            root_index: kp::PELVIS,
            camera_assignment,
        }
    }

    pub fn with_camera_assignment(mut self, assignment: [CameraId; NUM_KEYPOINTS]) -> Self {
        self.camera_assignment = assignment;
        self
    }

    pub fn wrist_indices(&self) -> (usize, usize) {
        (kp::L_WRIST, kp::R_WRIST)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    /// Adjacency lists of the connection graph.
    pub fn neighbors(&self) -> [Vec<usize>; NUM_KEYPOINTS] {
        let mut adj: [Vec<usize>; NUM_KEYPOINTS] = Default::default();
        for &(a, b) in &self.connections {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Graph distance from `start` to every keypoint.
    pub fn hop_distances(&self, start: usize) -> [Option<usize>; NUM_KEYPOINTS] {
        let adj = self.neighbors();
        let mut dist = [None; NUM_KEYPOINTS];
        dist[start] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n].unwrap();
            for &m in &adj[n] {
                if dist[m].is_none() {
                    dist[m] = Some(d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    /// Checks index bounds, the tree property and the root.
    pub fn validate(&self) -> Result<(), SkeletonError> {
        for &(a, b) in &self.connections {
            if a >= NUM_KEYPOINTS || b >= NUM_KEYPOINTS || a == b {
                return Err(SkeletonError::InvalidTopology(format!("bad connection ({a}, {b})")));
            }
        }
        if self.hop_distances(0).iter().any(Option::is_none) {
            return Err(SkeletonError::InvalidTopology(
                "connection graph is not connected".into(),
            ));
        }
        // Connected with n-1 edges means tree.
        if self.names[self.root_index] != "pelvis" {
            return Err(SkeletonError::InvalidTopology("root must be the pelvis".into()));
        }
        Ok(())
    }
}

/// 17 keypoints in concatenated-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton2D {
    pub coords: [Vec2; NUM_KEYPOINTS],
    pub confidence: [f64; NUM_KEYPOINTS],
    /// Meters; 0.0 marks a dead depth pixel.
    pub depth_at_kp: [f64; NUM_KEYPOINTS],
    pub timestamp: f64,
}

impl Skeleton2D {
    pub fn zeros() -> Self {
        Self {
            coords: [Vec2::zeros(); NUM_KEYPOINTS],
            confidence: [0.0; NUM_KEYPOINTS],
            depth_at_kp: [0.0; NUM_KEYPOINTS],
            timestamp: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.coords.iter().all(|c| c.x.is_finite() && c.y.is_finite())
            && self.confidence.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

/// 17 keypoints in meters, normally in the posture-camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skeleton3D {
    pub coords: [Vec3; NUM_KEYPOINTS],
    pub timestamp: f64,
}

impl Skeleton3D {
    pub fn new(coords: [Vec3; NUM_KEYPOINTS], timestamp: f64) -> Self {
        Self { coords, timestamp }
    }

    pub fn zeros() -> Self {
        Self::new([Vec3::zeros(); NUM_KEYPOINTS], 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        let mut out = *self;
        for c in out.coords.iter_mut() {
            *c += offset;
        }
        out
    }

    /// Row-major flattening `[x0, y0, z0, x1, ...]`.
    pub fn flatten(&self) -> [f64; NUM_KEYPOINTS * 3] {
        let mut out = [0.0; NUM_KEYPOINTS * 3];
        for (k, c) in self.coords.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(c.as_slice());
        }
        out
    }

    pub fn from_flat(values: &[f64], timestamp: f64) -> Self {
        assert_eq!(values.len(), NUM_KEYPOINTS * 3, "expected 51 values");
        let mut coords = [Vec3::zeros(); NUM_KEYPOINTS];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = Vec3::new(values[3 * k], values[3 * k + 1], values[3 * k + 2]);
        }
        Self { coords, timestamp }
    }
}

/// Subtracts the root keypoint from every keypoint.
pub fn root_relative(skel: &Skeleton3D, topo: &Topology) -> Skeleton3D {
    let root = skel.coords[topo.root_index];
    let mut out = *skel;
    for c in out.coords.iter_mut() {
        *c -= root;
    }
    out
}

/// Per-keypoint camera and pixel within that camera's image.
pub fn split_concat_coords(
    skel: &Skeleton2D,
    topo: &Topology,
    cam_height: f64,
) -> Result<[(CameraId, Vec2); NUM_KEYPOINTS], SkeletonError> {
    let mut out = [(CameraId::Posture, Vec2::zeros()); NUM_KEYPOINTS];
    for (k, slot) in out.iter_mut().enumerate() {
        let p = skel.coords[k];
        let cam = topo.camera_assignment[k];
        let in_gait_band = p.y >= cam_height;
        let ok = match cam {
            CameraId::Posture => !in_gait_band,
            CameraId::Gait => in_gait_band,
        };
        if !ok {
            return Err(SkeletonError::WrongHalf {
                keypoint: k,
                name: topo.names[k],
                v: p.y,
            });
        }
        *slot = match cam {
            CameraId::Posture => (cam, p),
            CameraId::Gait => (cam, Vec2::new(p.x, p.y - cam_height)),
        };
    }
    Ok(out)
}

/// Inverse of [`split_concat_coords`]: re-stacks per-camera pixels.
pub fn stack_concat_coords(per_camera: &[(CameraId, Vec2); NUM_KEYPOINTS], cam_height: f64) -> [Vec2; NUM_KEYPOINTS] {
    let mut out = [Vec2::zeros(); NUM_KEYPOINTS];
    for (o, (cam, p)) in out.iter_mut().zip(per_camera) {
        *o = match cam {
            CameraId::Posture => *p,
            CameraId::Gait => Vec2::new(p.x, p.y + cam_height),
        };
    }
    out
}

/// Euclidean length of every connection, in topology order.
pub fn limb_lengths(skel: &Skeleton3D, topo: &Topology) -> [f64; NUM_CONNECTIONS] {
    let mut out = [0.0; NUM_CONNECTIONS];
    for (o, &(a, b)) in out.iter_mut().zip(&topo.connections) {
        *o = (skel.coords[a] - skel.coords[b]).norm();
    }
    out
}

/// Coordinate space of a skeleton sequence file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceSpace {
    ThreeD,
    /// Concatenated-frame pixels with the frame size.
    TwoD {
        width: u32,
        height: u32,
    },
}

/// Header of a skeleton sequence file.
///
/// ```text
/// #skeleton-seq topology=walker17 space=2d frame=128x224 subject=3 columns=timestamp,pelvis.u,...
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceHeader {
    pub topology: String,
    pub space: SequenceSpace,
    /// Free-form `key=value` metadata (subject id, speed, ...).
    pub meta: BTreeMap<String, String>,
}

impl SequenceHeader {
    pub fn new(space: SequenceSpace) -> Self {
        Self {
            topology: TOPOLOGY_NAME.to_string(),
            space,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn columns(&self) -> String {
        let axes: &[&str] = match self.space {
            SequenceSpace::ThreeD => &["x", "y", "z"],
            SequenceSpace::TwoD { .. } => &["u", "v", "conf", "depth"],
        };
        let mut cols = String::from("timestamp");
        for name in KEYPOINT_NAMES {
            for a in axes {
                let _ = write!(cols, ",{name}.{a}");
            }
        }
        cols
    }

    pub fn to_line(&self) -> String {
        let mut line = format!("#skeleton-seq topology={}", self.topology);
        match self.space {
            SequenceSpace::ThreeD => line.push_str(" space=3d"),
            SequenceSpace::TwoD { width, height } => {
                let _ = write!(line, " space=2d frame={width}x{height}");
            }
        }
        for (k, v) in &self.meta {
            let _ = write!(line, " {k}={v}");
        }
        let _ = write!(line, " columns={}", self.columns());
        line
    }

    pub fn parse(line: &str) -> Result<Self, SequenceError> {
        let err = |reason: String| SequenceError::Parse { line: 1, reason };
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("#skeleton-seq") {
            return Err(err("missing `#skeleton-seq` header".into()));
        }
        let mut topology = None;
        let mut space = None;
        let mut frame = None;
        let mut columns = None;
        let mut meta = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| err(format!("malformed header token `{tok}`")))?;
            match k {
                "topology" => topology = Some(v.to_string()),
                "space" => space = Some(v.to_string()),
                "frame" => {
                    let (w, h) = v
                        .split_once('x')
                        .ok_or_else(|| err(format!("malformed frame size `{v}`")))?;
                    let w: u32 = w.parse().map_err(|_| err(format!("bad frame width `{w}`")))?;
                    let h: u32 = h.parse().map_err(|_| err(format!("bad frame height `{h}`")))?;
                    frame = Some((w, h));
                }
                "columns" => columns = Some(v.to_string()),
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let topology = topology.ok_or_else(|| err("missing topology".into()))?;
        if topology != TOPOLOGY_NAME {
            return Err(err(format!("unsupported topology `{topology}`")));
        }
        let space = match space.as_deref() {
            Some("3d") => SequenceSpace::ThreeD,
            Some("2d") => {
                let (width, height) = frame.ok_or_else(|| err("2d sequence needs frame=WxH".into()))?;
                SequenceSpace::TwoD { width, height }
            }
            other => return Err(err(format!("unknown space {other:?}"))),
        };
        let header = Self { topology, space, meta };
        if columns.as_deref() != Some(header.columns().as_str()) {
            return Err(err("column schema does not match the topology".into()));
        }
        Ok(header)
    }
}

/// Nine significant digits, scientific notation.
fn fmt_num(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.8e}");
}

pub fn write_sequence_3d<W: Write>(
    mut w: W,
    header: &SequenceHeader,
    frames: &[Skeleton3D],
) -> Result<(), SequenceError> {
    debug_assert_eq!(header.space, SequenceSpace::ThreeD);
    writeln!(w, "{}", header.to_line())?;
    let mut line = String::new();
    for s in frames {
        format_record_3d(&mut line, s);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// One 3D record without the trailing newline.
pub fn format_record_3d(line: &mut String, s: &Skeleton3D) {
    line.clear();
    fmt_num(line, s.timestamp);
    for c in &s.coords {
        for v in c.iter() {
            line.push(',');
            fmt_num(line, *v);
        }
    }
}

pub fn write_sequence_2d<W: Write>(
    mut w: W,
    header: &SequenceHeader,
    frames: &[Skeleton2D],
) -> Result<(), SequenceError> {
    writeln!(w, "{}", header.to_line())?;
    let mut line = String::new();
    for s in frames {
        format_record_2d(&mut line, s);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// One 2D record without the trailing newline.
pub fn format_record_2d(line: &mut String, s: &Skeleton2D) {
    line.clear();
    fmt_num(line, s.timestamp);
    for k in 0..NUM_KEYPOINTS {
        for v in [s.coords[k].x, s.coords[k].y, s.confidence[k], s.depth_at_kp[k]] {
            line.push(',');
            fmt_num(line, v);
        }
    }
}

fn parse_record(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>, SequenceError> {
    let values: Vec<f64> = line
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| SequenceError::Parse {
                line: lineno,
                reason: format!("not a number: `{t}`"),
            })
        })
        .collect::<Result<_, _>>()?;
    if values.len() != expected {
        return Err(SequenceError::Parse {
            line: lineno,
            reason: format!("expected {expected} columns, got {}", values.len()),
        });
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(SequenceError::Parse {
            line: lineno,
            reason: format!("non-finite value {bad}"),
        });
    }
    Ok(values)
}

/// Parses one 2D record line.
pub fn parse_record_2d(line: &str, lineno: usize) -> Result<Skeleton2D, SequenceError> {
    let v = parse_record(line, lineno, 1 + NUM_KEYPOINTS * 4)?;
    let mut s = Skeleton2D::zeros();
    s.timestamp = v[0];
    for k in 0..NUM_KEYPOINTS {
        let base = 1 + 4 * k;
        s.coords[k] = Vec2::new(v[base], v[base + 1]);
        s.confidence[k] = v[base + 2];
        s.depth_at_kp[k] = v[base + 3];
    }
    if !s.is_valid() {
        return Err(SequenceError::Parse {
            line: lineno,
            reason: "confidence outside [0, 1]".into(),
        });
    }
    Ok(s)
}

fn read_header<R: BufRead>(r: &mut R) -> Result<SequenceHeader, SequenceError> {
    let mut first = String::new();
    if r.read_line(&mut first)? == 0 {
        return Err(SequenceError::Parse {
            line: 1,
            reason: "empty file".into(),
        });
    }
    SequenceHeader::parse(first.trim_end())
}

pub fn read_sequence_3d<R: BufRead>(mut r: R) -> Result<(SequenceHeader, Vec<Skeleton3D>), SequenceError> {
    let header = read_header(&mut r)?;
    if header.space != SequenceSpace::ThreeD {
        return Err(SequenceError::WrongSpace {
            expected: "3d",
            found: "2d".into(),
        });
    }
    let mut frames = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_record(&line, i + 2, 1 + NUM_KEYPOINTS * 3)?;
        frames.push(Skeleton3D::from_flat(&v[1..], v[0]));
    }
    Ok((header, frames))
}

pub fn read_sequence_2d<R: BufRead>(mut r: R) -> Result<(SequenceHeader, Vec<Skeleton2D>), SequenceError> {
    let header = read_header(&mut r)?;
    if header.space == SequenceSpace::ThreeD {
        return Err(SequenceError::WrongSpace {
            expected: "2d",
            found: "3d".into(),
        });
    }
    let mut frames = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(parse_record_2d(&line, i + 2)?);
    }
    Ok((header, frames))
}
