//! Gaussian keypoint and connection heatmaps, and coordinate decoding.
//!
//! Pixel `(row i, column j)` of a map sits at coordinate `(u, v) = (j, i)`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::Vec2;
use crate::skeleton::{Skeleton2D, Topology, NUM_CONNECTIONS, NUM_KEYPOINTS};

/// Gaussians are evaluated out to this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

pub const DUMP_MAGIC: [u8; 4] = *b"WPHM";

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("heatmap has no positive value")]
    EmptyMap,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad heatmap dump: {0}")]
    BadDump(String),
}

/// A single-channel map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[v * self.width + u] = value;
    }

    fn contains(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Fills the map with `exp(-dist(p)^2 / 2σ^2)` inside the 4σ band of the
    /// segment `a`–`b` (a point when `a == b`).
    fn paint_segment(&mut self, a: &Vec2, b: &Vec2, sigma: f64) {
        let reach = TRUNCATION_SIGMAS * sigma;
        let inv_two_var = 1.0 / (2.0 * sigma * sigma);
        let u0 = (a.x.min(b.x) - reach).floor().max(0.0) as usize;
        let v0 = (a.y.min(b.y) - reach).floor().max(0.0) as usize;
        let u1 = ((a.x.max(b.x) + reach).ceil().max(0.0) as usize).min(self.width.saturating_sub(1));
        let v1 = ((a.y.max(b.y) + reach).ceil().max(0.0) as usize).min(self.height.saturating_sub(1));
        let ab = b - a;
        let len2 = ab.norm_squared();
        let reach2 = reach * reach;
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = Vec2::new(u as f64, v as f64);
                let d2 = segment_distance_sq(&p, a, &ab, len2);
                if d2 <= reach2 {
                    self.set(u, v, (-d2 * inv_two_var).exp() as f32);
                }
            }
        }
    }
}

fn segment_distance_sq(p: &Vec2, a: &Vec2, ab: &Vec2, len2: f64) -> f64 {
    let ap = p - a;
    if len2 == 0.0 {
        return ap.norm_squared();
    }
    let t = (ap.dot(ab) / len2).clamp(0.0, 1.0);
    (ap - ab * t).norm_squared()
}

/// 17 keypoint maps plus 16 connection maps at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub keypoint_maps: Vec<Heatmap>,
    pub connection_maps: Vec<Heatmap>,
}

impl HeatmapStack {
    pub fn maps(&self) -> impl Iterator<Item = &Heatmap> {
        self.keypoint_maps.iter().chain(self.connection_maps.iter())
    }

    /// Little-endian dump: magic, then K, C, H, W as u32, then every map as
    /// f32 in declaration order.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), HeatmapError> {
        w.write_all(&DUMP_MAGIC)?;
        for n in [
            self.keypoint_maps.len(),
            self.connection_maps.len(),
            self.height,
            self.width,
        ] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for m in self.maps() {
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump; sigma is not stored in the file.
    pub fn read_dump<R: Read>(mut r: R, sigma: f64) -> Result<Self, HeatmapError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != DUMP_MAGIC {
            return Err(HeatmapError::BadDump("wrong magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [k, c, height, width] = dims;
        let mut read_map = || -> Result<Heatmap, HeatmapError> {
            let mut bytes = vec![0u8; width * height * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Heatmap { width, height, data })
        };
        let keypoint_maps = (0..k).map(|_| read_map()).collect::<Result<Vec<_>, _>>()?;
        let connection_maps = (0..c).map(|_| read_map()).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            width,
            height,
            sigma,
            keypoint_maps,
            connection_maps,
        })
    }
}

/// Unit-peak Gaussian at every keypoint; off-frame keypoints give an all-zero
/// map. Coordinates are in map pixels.
pub fn encode_keypoint_maps(coords: &[Vec2; NUM_KEYPOINTS], sigma: f64, width: usize, height: usize) -> Vec<Heatmap> {
    coords
        .iter()
        .map(|p| encode_keypoint_map(p, sigma, width, height))
        .collect()
}

pub fn encode_keypoint_map(p: &Vec2, sigma: f64, width: usize, height: usize) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = Heatmap::zeros(width, height);
    if map.contains(p) {
        map.paint_segment(p, p, sigma);
    }
    map
}

/// Gaussian ridge along each limb segment. A connection with an off-frame
/// endpoint gives an all-zero map.
pub fn encode_connection_maps(
    coords: &[Vec2; NUM_KEYPOINTS],
    topo: &Topology,
    sigma: f64,
    width: usize,
    height: usize,
) -> Vec<Heatmap> {
    topo.connections
        .iter()
        .map(|&(a, b)| encode_connection_map(&coords[a], &coords[b], sigma, width, height))
        .collect()
}

pub fn encode_connection_map(a: &Vec2, b: &Vec2, sigma: f64, width: usize, height: usize) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = Heatmap::zeros(width, height);
    if map.contains(a) && map.contains(b) {
        map.paint_segment(a, b, sigma);
    }
    map
}

/// Builds the full stack from concatenated-frame coordinates, rescaling them
/// from `input` size to the map size.
pub fn encode_stack(
    skel: &Skeleton2D,
    topo: &Topology,
    sigma: f64,
    input: (usize, usize),
    map: (usize, usize),
) -> HeatmapStack {
    let coords = rescale_coords(&skel.coords, input, map);
    HeatmapStack {
        width: map.0,
        height: map.1,
        sigma,
        keypoint_maps: encode_keypoint_maps(&coords, sigma, map.0, map.1),
        connection_maps: encode_connection_maps(&coords, topo, sigma, map.0, map.1),
    }
}

/// Same as [`encode_stack`] with maps split across scoped worker threads.
pub fn encode_stack_parallel(
    skel: &Skeleton2D,
    topo: &Topology,
    sigma: f64,
    input: (usize, usize),
    map: (usize, usize),
    workers: usize,
) -> HeatmapStack {
    let coords = rescale_coords(&skel.coords, input, map);
    let jobs: Vec<(Vec2, Vec2)> = coords
        .iter()
        .map(|p| (*p, *p))
        .chain(topo.connections.iter().map(|&(a, b)| (coords[a], coords[b])))
        .collect();
    let mut maps: Vec<Heatmap> = vec![Heatmap::zeros(0, 0); jobs.len()];
    let chunk = jobs.len().div_ceil(workers.max(1));
    std::thread::scope(|scope| {
        for (out, job) in maps.chunks_mut(chunk).zip(jobs.chunks(chunk)) {
            scope.spawn(move || {
                for (m, (a, b)) in out.iter_mut().zip(job) {
                    *m = encode_connection_map(a, b, sigma, map.0, map.1);
                }
            });
        }
    });
    let connection_maps = maps.split_off(NUM_KEYPOINTS);
    HeatmapStack {
        width: map.0,
        height: map.1,
        sigma,
        keypoint_maps: maps,
        connection_maps,
    }
}

fn rescale_coords(coords: &[Vec2; NUM_KEYPOINTS], from: (usize, usize), to: (usize, usize)) -> [Vec2; NUM_KEYPOINTS] {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    let mut out = *coords;
    for p in out.iter_mut() {
        *p = Vec2::new(p.x * sx, p.y * sy);
    }
    out
}

/// Expected pixel coordinate under the sum-normalized, non-negative map.
/// Confidence is the peak raw value clamped to `[0, 1]`.
pub fn soft_argmax(map: &Heatmap) -> Result<(f64, f64, f64), HeatmapError> {
    let mut total = 0.0f64;
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    let mut peak = f32::NEG_INFINITY;
    for v in 0..map.height {
        let row = &map.data[v * map.width..(v + 1) * map.width];
        let mut row_total = 0.0f64;
        let mut row_u = 0.0f64;
        for (u, &x) in row.iter().enumerate() {
            peak = peak.max(x);
            if x > 0.0 {
                let x = x as f64;
                row_total += x;
                row_u += x * u as f64;
            }
        }
        total += row_total;
        su += row_u;
        sv += row_total * v as f64;
    }
    if !(total > 0.0) {
        return Err(HeatmapError::EmptyMap);
    }
    Ok((su / total, sv / total, (peak as f64).clamp(0.0, 1.0)))
}

/// Integer location of the maximum; ties resolve to the first in row-major
/// order.
pub fn hard_argmax(map: &Heatmap) -> Result<(usize, usize), HeatmapError> {
    let mut best = 0usize;
    for (i, &x) in map.data.iter().enumerate() {
        if x > map.data[best] {
            best = i;
        }
    }
    if map.data.is_empty() || !(map.data[best] > 0.0) {
        return Err(HeatmapError::EmptyMap);
    }
    Ok((best % map.width, best / map.width))
}

/// Decodes all keypoint maps and rescales to `input` resolution. Depth is
/// left at zero for the caller to fill.
pub fn decode_keypoints(stack: &HeatmapStack, input: (usize, usize)) -> Result<Skeleton2D, HeatmapError> {
    if stack.keypoint_maps.len() != NUM_KEYPOINTS {
        return Err(HeatmapError::ShapeMismatch(format!(
            "expected {NUM_KEYPOINTS} keypoint maps, got {}",
            stack.keypoint_maps.len()
        )));
    }
    let sx = input.0 as f64 / stack.width as f64;
    let sy = input.1 as f64 / stack.height as f64;
    let mut out = Skeleton2D::zeros();
    for (k, m) in stack.keypoint_maps.iter().enumerate() {
        let (u, v, c) = soft_argmax(m)?;
        out.coords[k] = Vec2::new(u * sx, v * sy);
        out.confidence[k] = c;
    }
    Ok(out)
}

/// Mean absolute error over the 34 keypoint coordinates.
pub fn integral_loss(pred: &Skeleton2D, gt: &Skeleton2D) -> f64 {
    let sum: f64 = pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(p, g)| (p.x - g.x).abs() + (p.y - g.y).abs())
        .sum();
    sum / (2 * NUM_KEYPOINTS) as f64
}

/// Mean squared error over every pixel of all 33 maps.
pub fn heatmap_mse(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64, HeatmapError> {
    if pred.width != gt.width
        || pred.height != gt.height
        || pred.keypoint_maps.len() != gt.keypoint_maps.len()
        || pred.connection_maps.len() != gt.connection_maps.len()
    {
        return Err(HeatmapError::ShapeMismatch("heatmap stacks differ in shape".into()));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, g) in pred.maps().zip(gt.maps()) {
        for (a, b) in p.data.iter().zip(&g.data) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        count += p.data.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Sanity bound: stacks built by [`encode_stack`] always have this many maps.
pub const MAPS_PER_STACK: usize = NUM_KEYPOINTS + NUM_CONNECTIONS;
