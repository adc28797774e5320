//! Turning synchronized RGB-D frame pairs into the model input, plus
//! sequence downsampling and label rescaling.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec2;

/// Native per-camera frame size.
pub const CAMERA_WIDTH: usize = 640;
pub const CAMERA_HEIGHT: usize = 480;
/// Concatenated frame: posture on top of gait.
pub const CONCAT_WIDTH: usize = CAMERA_WIDTH;
pub const CONCAT_HEIGHT: usize = 2 * CAMERA_HEIGHT;
/// Default model input size.
pub const MODEL_WIDTH: usize = 128;
pub const MODEL_HEIGHT: usize = 224;
/// Depth normalization range in meters.
pub const DEFAULT_DEPTH_MAX: f64 = 10.0;

/// ITU-R BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("frame shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("timestamps are not monotone at index {0}")]
    NonMonotonic(usize),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad frame directory: {0}")]
    BadDirectory(String),
}

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    fn check(&self) -> Result<(), PreprocessError> {
        if !(self.channels == 1 || self.channels == 3) || self.data.len() != self.width * self.height * self.channels {
            return Err(PreprocessError::ShapeMismatch(format!(
                "image buffer of {} bytes does not match {}x{}x{}",
                self.data.len(),
                self.width,
                self.height,
                self.channels
            )));
        }
        Ok(())
    }
}

/// 16-bit depth in millimeters; 0 is a dead pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

/// Four synchronized frames from the two RGB-D cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub posture_rgb: Image8,
    pub posture_depth: DepthImage,
    pub gait_rgb: Image8,
    pub gait_depth: DepthImage,
    pub timestamp: f64,
}

impl FramePair {
    pub fn validate(&self) -> Result<(usize, usize), PreprocessError> {
        self.posture_rgb.check()?;
        self.gait_rgb.check()?;
        let (w, h) = (self.posture_rgb.width, self.posture_rgb.height);
        let shapes = [
            ("gait_rgb", self.gait_rgb.width, self.gait_rgb.height, w * h),
            (
                "posture_depth",
                self.posture_depth.width,
                self.posture_depth.height,
                self.posture_depth.data.len(),
            ),
            (
                "gait_depth",
                self.gait_depth.width,
                self.gait_depth.height,
                self.gait_depth.data.len(),
            ),
        ];
        for (name, fw, fh, len) in shapes {
            if fw != w || fh != h || len != w * h {
                return Err(PreprocessError::ShapeMismatch(format!(
                    "{name} is {fw}x{fh} ({len} px), posture_rgb is {w}x{h}"
                )));
            }
        }
        Ok((w, h))
    }
}

/// Model input: gray and normalized depth planes, each `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub width: usize,
    pub height: usize,
    pub gray: Vec<f32>,
    pub depth: Vec<f32>,
}

impl ModelInput {
    /// Normalized depth at the pixel nearest to `(u, v)`, or `None` outside
    /// the frame.
    pub fn depth_at(&self, u: f64, v: f64) -> Option<f32> {
        if !(u.is_finite() && v.is_finite()) {
            return None;
        }
        let (iu, iv) = (u.round(), v.round());
        if iu < 0.0 || iv < 0.0 || iu >= self.width as f64 || iv >= self.height as f64 {
            return None;
        }
        Some(self.depth[iv as usize * self.width + iu as usize])
    }
}

fn gray_rows(img: &Image8, out: &mut Vec<f32>) {
    match img.channels {
        1 => out.extend(img.data.iter().map(|&g| g as f32 / 255.0)),
        _ => out.extend(
            img.data
                .chunks_exact(3)
                .map(|px| (LUMA[0] * px[0] as f32 + LUMA[1] * px[1] as f32 + LUMA[2] * px[2] as f32) / 255.0),
        ),
    }
}

/// Grayscale + depth normalization, stacking posture over gait, then
/// resizing to the model resolution (area for gray, nearest for depth).
pub fn preprocess(
    fp: &FramePair,
    target_w: usize,
    target_h: usize,
    depth_max: f64,
) -> Result<ModelInput, PreprocessError> {
    let (w, h) = fp.validate()?;
    if target_w == 0 || target_h == 0 {
        return Err(PreprocessError::ShapeMismatch("target size must be non-zero".into()));
    }
    let mut gray = Vec::with_capacity(w * h * 2);
    gray_rows(&fp.posture_rgb, &mut gray);
    gray_rows(&fp.gait_rgb, &mut gray);
    let gray = resize_area(&gray, w, 2 * h, target_w, target_h);

    let scale = 1.0 / (1000.0 * depth_max);
    let mut depth = Vec::with_capacity(target_w * target_h);
    let cols = nearest_indices(w, target_w);
    for src_row in nearest_indices(2 * h, target_h) {
        let row = if src_row < h {
            &fp.posture_depth.data[src_row * w..(src_row + 1) * w]
        } else {
            &fp.gait_depth.data[(src_row - h) * w..(src_row - h + 1) * w]
        };
        depth.extend(cols.iter().map(|&c| ((row[c] as f64 * scale).min(1.0)) as f32));
    }
    Ok(ModelInput {
        width: target_w,
        height: target_h,
        gray,
        depth,
    })
}

/// Source index sampled by each target index under nearest-neighbor
/// resizing (pixel-center aligned).
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * ratio).floor() as usize).min(src - 1))
        .collect()
}

/// Per target index: first source index and the overlap weight of each
/// source pixel in its footprint `[i*ratio, (i+1)*ratio)`.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f32>)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * ratio;
            let hi = ((i + 1) as f64 * ratio).min(src as f64);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src).max(first + 1);
            let weights = (first..last)
                .map(|s| {
                    let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (overlap / (hi - lo)) as f32
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// Mean over the exact source footprint of every target pixel.
pub fn resize_area(src: &[f32], sw: usize, sh: usize, tw: usize, th: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh);
    let wx = area_weights(sw, tw);
    let wy = area_weights(sh, th);
    let mut horiz = vec![0.0f32; tw * sh];
    for (row, out) in src.chunks_exact(sw).zip(horiz.chunks_exact_mut(tw)) {
        for (o, (first, ws)) in out.iter_mut().zip(&wx) {
            *o = row[*first..*first + ws.len()].iter().zip(ws).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0f32; tw * th];
    for (dst_row, (first, ws)) in out.chunks_exact_mut(tw).zip(&wy) {
        for (k, w) in ws.iter().enumerate() {
            let src_row = &horiz[(first + k) * tw..(first + k + 1) * tw];
            for (o, s) in dst_row.iter_mut().zip(src_row) {
                *o += w * s;
            }
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Indices of the frames nearest each tick of the target rate, starting at
/// the first timestamp. Duplicates are skipped; ties go to the earlier frame.
pub fn downsample_sequence(timestamps: &[f64], source_hz: f64, target_hz: f64) -> Result<Vec<usize>, PreprocessError> {
    if timestamps.is_empty() {
        return Err(PreprocessError::EmptySequence);
    }
    if !(target_hz > 0.0 && source_hz > 0.0 && target_hz <= source_hz) {
        return Err(PreprocessError::InvalidRate(format!(
            "need 0 < target ({target_hz}) <= source ({source_hz})"
        )));
    }
    if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(PreprocessError::NonMonotonic(i + 1));
    }
    let t0 = timestamps[0];
    let last = *timestamps.last().unwrap();
    let period = 1.0 / target_hz;
    // Allow the final tick to land a hair past the last frame.
    let slack = 0.5 / source_hz;
    let mut out: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut k = 0u64;
    loop {
        let tick = t0 + k as f64 * period;
        if tick > last + slack {
            break;
        }
        while cursor + 1 < timestamps.len() && timestamps[cursor + 1] <= tick {
            cursor += 1;
        }
        let mut best = cursor;
        if cursor + 1 < timestamps.len() && (timestamps[cursor + 1] - tick) < (tick - timestamps[cursor]) {
            best = cursor + 1;
        }
        if out.last() != Some(&best) {
            out.push(best);
        }
        k += 1;
    }
    Ok(out)
}

/// Linear pixel rescaling between two frame sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordScale {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

impl CoordScale {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        Self {
            from: (from.0 as f64, from.1 as f64),
            to: (to.0 as f64, to.1 as f64),
        }
    }

    /// Native concatenated frame to the given model size.
    pub fn concat_to(target_w: usize, target_h: usize) -> Self {
        Self::new((CONCAT_WIDTH, CONCAT_HEIGHT), (target_w, target_h))
    }

    pub fn apply(&self, p: &Vec2) -> Vec2 {
        Vec2::new(p.x * self.to.0 / self.from.0, p.y * self.to.1 / self.from.1)
    }

    pub fn inverse(&self, p: &Vec2) -> Vec2 {
        Vec2::new(p.x * self.from.0 / self.to.0, p.y * self.from.1 / self.to.1)
    }
}

/// Native concatenated-frame pixel to model-resolution pixel.
pub fn coord_rescale(p: &Vec2, target_w: usize, target_h: usize) -> Vec2 {
    CoordScale::concat_to(target_w, target_h).apply(p)
}

pub fn coord_unscale(p: &Vec2, target_w: usize, target_h: usize) -> Vec2 {
    CoordScale::concat_to(target_w, target_h).inverse(p)
}

const BLOB_KINDS: [&str; 4] = ["pgray", "pdepth", "ggray", "gdepth"];

fn io_err(path: &Path, source: std::io::Error) -> PreprocessError {
    PreprocessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes frames as `<dir>/<index>_{pgray|pdepth|ggray|gdepth}.bin` plus a
/// `manifest.csv` of timestamps. RGB frames are stored as grayscale.
pub fn write_frame_dir(dir: &Path, frames: &[FramePair]) -> Result<(), PreprocessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (w, h) = match frames.first() {
        Some(f) => f.validate()?,
        None => (CAMERA_WIDTH, CAMERA_HEIGHT),
    };
    let mut manifest = format!("# width={w} height={h}\nindex,timestamp\n");
    for (i, f) in frames.iter().enumerate() {
        if f.validate()? != (w, h) {
            return Err(PreprocessError::ShapeMismatch(format!("frame {i} differs in size")));
        }
        let gray = |img: &Image8| -> Vec<u8> {
            if img.channels == 1 {
                return img.data.clone();
            }
            let mut tmp = Vec::with_capacity(w * h);
            gray_rows(img, &mut tmp);
            tmp.iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        };
        let depth = |d: &DepthImage| -> Vec<u8> { d.data.iter().flat_map(|v| v.to_le_bytes()).collect() };
        let blobs = [
            gray(&f.posture_rgb),
            depth(&f.posture_depth),
            gray(&f.gait_rgb),
            depth(&f.gait_depth),
        ];
        for (kind, bytes) in BLOB_KINDS.iter().zip(blobs) {
            let path = dir.join(format!("{i}_{kind}.bin"));
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        manifest.push_str(&format!("{i},{:.9e}\n", f.timestamp));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))
}

pub fn read_frame_dir(dir: &Path) -> Result<Vec<FramePair>, PreprocessError> {
    let path = dir.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PreprocessError::BadDirectory("empty manifest".into()))?;
    let mut w = None;
    let mut h = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("width", v)) => w = v.parse::<usize>().ok(),
            Some(("height", v)) => h = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (w, h) = w
        .zip(h)
        .ok_or_else(|| PreprocessError::BadDirectory("manifest header needs width= and height=".into()))?;
    let mut frames = Vec::new();
    for line in lines.skip(1).filter(|l| !l.trim().is_empty()) {
        let (idx, ts) = line
            .split_once(',')
            .ok_or_else(|| PreprocessError::BadDirectory(format!("bad manifest row `{line}`")))?;
        let ts: f64 = ts
            .trim()
            .parse()
            .map_err(|_| PreprocessError::BadDirectory(format!("bad timestamp `{ts}`")))?;
        let read = |kind: &str| -> Result<Vec<u8>, PreprocessError> {
            let p = dir.join(format!("{}_{kind}.bin", idx.trim()));
            fs::read(&p).map_err(|e| io_err(&p, e))
        };
        let gray = |bytes: Vec<u8>| Image8 {
            width: w,
            height: h,
            channels: 1,
            data: bytes,
        };
        let depth = |bytes: Vec<u8>| DepthImage {
            width: w,
            height: h,
            data: bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
        };
        let frame = FramePair {
            posture_rgb: gray(read("pgray")?),
            posture_depth: depth(read("pdepth")?),
            gait_rgb: gray(read("ggray")?),
            gait_depth: depth(read("gdepth")?),
            timestamp: ts,
        };
        frame.validate()?;
        frames.push(frame);
    }
    Ok(frames)
}
