//! MPJPE family, PCK, per-joint error distributions and latency summaries.
//!
//! 3D skeletons are in meters; reported 3D errors are in millimeters.
//! "±" values are standard errors over frames (population std / √n).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{procrustes_fit, GeometryError, Vec3};
use crate::skeleton::{Skeleton2D, Skeleton3D, Topology, NUM_KEYPOINTS};

pub const DEFAULT_PCK_3D_MM: f64 = 75.0;
pub const DEFAULT_PCK_2D_PX: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sequence lengths differ: {pred} predictions vs {gt} ground truth")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no samples")]
    EmptySamples,
    #[error("pck threshold must be > 0, got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How predictions are aligned to ground truth before measuring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Both skeletons root-centered.
    Root,
    /// Similarity Procrustes fit of prediction onto ground truth.
    Procrustes,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_err: f64,
}

fn check_len(pred: usize, gt: usize) -> Result<(), MetricsError> {
    if pred != gt {
        return Err(MetricsError::LengthMismatch { pred, gt });
    }
    if pred == 0 {
        return Err(MetricsError::EmptySamples);
    }
    Ok(())
}

/// Per-frame, per-joint Euclidean errors in meters after alignment.
pub fn joint_errors_3d(
    pred: &[Skeleton3D],
    gt: &[Skeleton3D],
    topo: &Topology,
    alignment: Alignment,
) -> Result<Vec<[f64; NUM_KEYPOINTS]>, MetricsError> {
    check_len(pred.len(), gt.len())?;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let aligned: [Vec3; NUM_KEYPOINTS] = match alignment {
                Alignment::None => p.coords,
                Alignment::Root => {
                    let offset = g.coords[topo.root_index] - p.coords[topo.root_index];
                    p.coords.map(|c| c + offset)
                }
                Alignment::Procrustes => {
                    let t = procrustes_fit(&p.coords, &g.coords)?;
                    p.coords.map(|c| t.apply(&c))
                }
            };
            let mut e = [0.0; NUM_KEYPOINTS];
            for k in 0..NUM_KEYPOINTS {
                e[k] = (aligned[k] - g.coords[k]).norm();
            }
            Ok(e)
        })
        .collect()
}

/// Per-frame, per-joint pixel errors.
pub fn joint_errors_2d(pred: &[Skeleton2D], gt: &[Skeleton2D]) -> Result<Vec<[f64; NUM_KEYPOINTS]>, MetricsError> {
    check_len(pred.len(), gt.len())?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut e = [0.0; NUM_KEYPOINTS];
            for k in 0..NUM_KEYPOINTS {
                e[k] = (p.coords[k] - g.coords[k]).norm();
            }
            e
        })
        .collect())
}

/// Mean over frames of the per-frame joint mean, with its standard error.
pub fn mean_se(errors: &[[f64; NUM_KEYPOINTS]], scale: f64) -> MeanSe {
    let per_frame: Vec<f64> = errors
        .iter()
        .map(|e| e.iter().sum::<f64>() / NUM_KEYPOINTS as f64 * scale)
        .collect();
    let n = per_frame.len() as f64;
    let mean = per_frame.iter().sum::<f64>() / n;
    let var = per_frame.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanSe {
        mean,
        std_err: var.sqrt() / n.sqrt(),
    }
}

/// Root-aligned mean per-joint position error, mm.
pub fn mpjpe(pred: &[Skeleton3D], gt: &[Skeleton3D], topo: &Topology) -> Result<f64, MetricsError> {
    Ok(mean_se(&joint_errors_3d(pred, gt, topo, Alignment::Root)?, 1000.0).mean)
}

/// Procrustes-aligned MPJPE, mm.
pub fn pa_mpjpe(pred: &[Skeleton3D], gt: &[Skeleton3D], topo: &Topology) -> Result<f64, MetricsError> {
    Ok(mean_se(&joint_errors_3d(pred, gt, topo, Alignment::Procrustes)?, 1000.0).mean)
}

/// Unaligned (absolute) MPJPE, mm.
pub fn a_mpjpe(pred: &[Skeleton3D], gt: &[Skeleton3D]) -> Result<f64, MetricsError> {
    let topo = Topology::walker17();
    Ok(mean_se(&joint_errors_3d(pred, gt, &topo, Alignment::None)?, 1000.0).mean)
}

/// Unaligned 2D error, pixels.
pub fn mpjpe_2d(pred: &[Skeleton2D], gt: &[Skeleton2D]) -> Result<f64, MetricsError> {
    Ok(mean_se(&joint_errors_2d(pred, gt)?, 1.0).mean)
}

/// Percent of joint errors `<= threshold` (inclusive).
pub fn pck_from_errors(errors: &[[f64; NUM_KEYPOINTS]], threshold: f64) -> Result<f64, MetricsError> {
    if !(threshold > 0.0) {
        return Err(MetricsError::BadThreshold(threshold));
    }
    if errors.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let total = errors.len() * NUM_KEYPOINTS;
    let hits = errors.iter().flatten().filter(|&&e| e <= threshold).count();
    Ok(100.0 * hits as f64 / total as f64)
}

/// 3D PCK with the threshold in millimeters.
pub fn pck(
    pred: &[Skeleton3D],
    gt: &[Skeleton3D],
    topo: &Topology,
    threshold_mm: f64,
    alignment: Alignment,
) -> Result<f64, MetricsError> {
    let errors = joint_errors_3d(pred, gt, topo, alignment)?;
    let mm: Vec<[f64; NUM_KEYPOINTS]> = errors.iter().map(|e| e.map(|v| v * 1000.0)).collect();
    pck_from_errors(&mm, threshold_mm)
}

pub fn pck_2d(pred: &[Skeleton2D], gt: &[Skeleton2D], threshold_px: f64) -> Result<f64, MetricsError> {
    pck_from_errors(&joint_errors_2d(pred, gt)?, threshold_px)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub std_err: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

pub fn latency_stats(samples_ms: &[f64]) -> Result<LatencyStats, MetricsError> {
    if samples_ms.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let n = samples_ms.len() as f64;
    let mean = samples_ms.iter().sum::<f64>() / n;
    let std = (samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        n: samples_ms.len(),
        mean,
        std,
        std_err: std / n.sqrt(),
        p50: quantile(&sorted, 0.5),
        p95: quantile(&sorted, 0.95),
        max: *sorted.last().unwrap(),
    })
}

/// Box-plot numbers for one joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub joint: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme samples within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

pub fn joint_distributions(errors: &[[f64; NUM_KEYPOINTS]], topo: &Topology, scale: f64) -> Vec<JointDistribution> {
    (0..NUM_KEYPOINTS)
        .map(|k| {
            let mut col: Vec<f64> = errors.iter().map(|e| e[k] * scale).collect();
            col.sort_by(f64::total_cmp);
            let q1 = quantile(&col, 0.25);
            let q3 = quantile(&col, 0.75);
            let iqr = q3 - q1;
            let lo_fence = q1 - 1.5 * iqr;
            let hi_fence = q3 + 1.5 * iqr;
            JointDistribution {
                joint: topo.names[k].to_string(),
                median: quantile(&col, 0.5),
                q1,
                q3,
                whisker_low: col.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1),
                whisker_high: col.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3),
            }
        })
        .collect()
}

/// Everything `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub mpjpe_mm: Option<MeanSe>,
    pub pa_mpjpe_mm: Option<MeanSe>,
    pub a_mpjpe_mm: Option<MeanSe>,
    pub pck_3d_pct: Option<f64>,
    pub pck_3d_threshold_mm: Option<f64>,
    pub mpjpe_2d_px: Option<MeanSe>,
    pub pck_2d_pct: Option<f64>,
    pub pck_2d_threshold_px: Option<f64>,
    /// Per-joint errors (mm in 3D, px in 2D).
    pub per_joint: Vec<JointDistribution>,
}

impl MetricsReport {
    pub fn evaluate_3d(
        pred: &[Skeleton3D],
        gt: &[Skeleton3D],
        topo: &Topology,
        pck_threshold_mm: f64,
    ) -> Result<Self, MetricsError> {
        let root = joint_errors_3d(pred, gt, topo, Alignment::Root)?;
        let pa = joint_errors_3d(pred, gt, topo, Alignment::Procrustes)?;
        let abs = joint_errors_3d(pred, gt, topo, Alignment::None)?;
        let root_mm: Vec<[f64; NUM_KEYPOINTS]> = root.iter().map(|e| e.map(|v| v * 1000.0)).collect();
        Ok(Self {
            samples: pred.len(),
            mpjpe_mm: Some(mean_se(&root, 1000.0)),
            pa_mpjpe_mm: Some(mean_se(&pa, 1000.0)),
            a_mpjpe_mm: Some(mean_se(&abs, 1000.0)),
            pck_3d_pct: Some(pck_from_errors(&root_mm, pck_threshold_mm)?),
            pck_3d_threshold_mm: Some(pck_threshold_mm),
            mpjpe_2d_px: None,
            pck_2d_pct: None,
            pck_2d_threshold_px: None,
            per_joint: joint_distributions(&root, topo, 1000.0),
        })
    }

    pub fn evaluate_2d(
        pred: &[Skeleton2D],
        gt: &[Skeleton2D],
        topo: &Topology,
        pck_threshold_px: f64,
    ) -> Result<Self, MetricsError> {
        let errors = joint_errors_2d(pred, gt)?;
        Ok(Self {
            samples: pred.len(),
            mpjpe_mm: None,
            pa_mpjpe_mm: None,
            a_mpjpe_mm: None,
            pck_3d_pct: None,
            pck_3d_threshold_mm: None,
            mpjpe_2d_px: Some(mean_se(&errors, 1.0)),
            pck_2d_pct: Some(pck_from_errors(&errors, pck_threshold_px)?),
            pck_2d_threshold_px: Some(pck_threshold_px),
            per_joint: joint_distributions(&errors, topo, 1.0),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = format!("samples: {}\n", self.samples);
        let line = |s: &mut String, name: &str, v: &Option<MeanSe>, unit: &str| {
            if let Some(m) = v {
                let _ = writeln!(
                    s,
                    "{name:<12} {:>9.3} ± {:.3} {unit} (± = standard error)",
                    m.mean, m.std_err
                );
            }
        };
        line(&mut s, "MPJPE", &self.mpjpe_mm, "mm");
        line(&mut s, "PA_MPJPE", &self.pa_mpjpe_mm, "mm");
        line(&mut s, "A_MPJPE", &self.a_mpjpe_mm, "mm");
        if let (Some(p), Some(t)) = (self.pck_3d_pct, self.pck_3d_threshold_mm) {
            let _ = writeln!(s, "{:<12} {p:>9.3} % @ {t} mm", "PCK");
        }
        line(&mut s, "MPJPE_2D", &self.mpjpe_2d_px, "px");
        if let (Some(p), Some(t)) = (self.pck_2d_pct, self.pck_2d_threshold_px) {
            let _ = writeln!(s, "{:<12} {p:>9.3} % @ {t} px", "PCK_2D");
        }
        s
    }

    /// Whitespace-separated per-joint table suitable for gnuplot's
    /// `candlesticks` style.
    pub fn joint_table(&self) -> String {
        let mut s = String::from("# index joint whisker_low q1 median q3 whisker_high\n");
        for (i, j) in self.per_joint.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
                j.joint, j.whisker_low, j.q1, j.median, j.q3, j.whisker_high
            );
        }
        s
    }
}
