//! One-euro filter: a first-order low-pass whose cutoff rises with the
//! signal's speed, applied independently to every coordinate channel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Skeleton2D, Skeleton3D, NUM_KEYPOINTS};

pub const NUM_CHANNELS: usize = NUM_KEYPOINTS * 3;

/// A gap longer than this (seconds) restarts a channel from scratch.
pub const RESET_GAP: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("timestamp {t} does not advance past {prev}")]
    NonMonotonicTime { t: f64, prev: f64 },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneEuroConfig {
    /// Minimum cutoff frequency, Hz.
    pub fc_min: f64,
    /// Cutoff slope per unit of speed.
    pub beta: f64,
    /// Cutoff of the derivative low-pass, Hz.
    pub d_cutoff: f64,
}

impl Default for OneEuroConfig {
    fn default() -> Self {
        Self {
            fc_min: 1.5,
            beta: 0.15,
            d_cutoff: 1.0,
        }
    }
}

impl OneEuroConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.fc_min > 0.0 && self.fc_min.is_finite()) {
            return Err(FilterError::InvalidConfig(format!(
                "fc_min must be > 0, got {}",
                self.fc_min
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FilterError::InvalidConfig(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.d_cutoff > 0.0 && self.d_cutoff.is_finite()) {
            return Err(FilterError::InvalidConfig(format!(
                "d_cutoff must be > 0, got {}",
                self.d_cutoff
            )));
        }
        Ok(())
    }
}

/// Smoothing factor of an exponential low-pass with cutoff `fc` sampled at
/// interval `dt`.
#[inline]
pub fn alpha(fc: f64, dt: f64) -> f64 {
    let tau = 1.0 / (2.0 * PI * fc);
    1.0 / (1.0 + tau / dt)
}

/// Memory of one scalar channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelState {
    pub value: f64,
    pub derivative: f64,
    pub timestamp: f64,
    pub initialized: bool,
}

/// One filter step on a single channel.
pub fn filter_step(state: &mut ChannelState, value: f64, t: f64, cfg: &OneEuroConfig) -> Result<f64, FilterError> {
    if state.initialized {
        if !(t > state.timestamp) {
            return Err(FilterError::NonMonotonicTime {
                t,
                prev: state.timestamp,
            });
        }
        if t - state.timestamp > RESET_GAP {
            state.initialized = false;
        }
    }
    if !state.initialized {
        *state = ChannelState {
            value,
            derivative: 0.0,
            timestamp: t,
            initialized: true,
        };
        return Ok(value);
    }
    let dt = t - state.timestamp;
    let raw_derivative = (value - state.value) / dt;
    let a_d = alpha(cfg.d_cutoff, dt);
    let derivative = state.derivative + a_d * (raw_derivative - state.derivative);
    let fc = cfg.fc_min + cfg.beta * derivative.abs();
    let a = alpha(fc, dt);
    let filtered = state.value + a * (value - state.value);
    state.value = filtered;
    state.derivative = derivative;
    state.timestamp = t;
    Ok(filtered)
}

/// Per-channel state for a 17-keypoint 3D stream.
#[derive(Debug, Clone, PartialEq)]
pub struct OneEuroState {
    pub channels: [ChannelState; NUM_CHANNELS],
}

impl Default for OneEuroState {
    fn default() -> Self {
        Self {
            channels: [ChannelState::default(); NUM_CHANNELS],
        }
    }
}

impl OneEuroState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Filters every coordinate of a skeleton at its timestamp.
pub fn filter_skeleton_stream(
    state: &mut OneEuroState,
    skel: &Skeleton3D,
    cfg: &OneEuroConfig,
) -> Result<Skeleton3D, FilterError> {
    check_advances(&state.channels, skel.timestamp)?;
    let mut out = *skel;
    for (k, c) in out.coords.iter_mut().enumerate() {
        for axis in 0..3 {
            c[axis] = filter_step(&mut state.channels[3 * k + axis], c[axis], skel.timestamp, cfg)?;
        }
    }
    Ok(out)
}

// Reject before touching any channel so a bad timestamp leaves the state intact.
fn check_advances(channels: &[ChannelState], t: f64) -> Result<(), FilterError> {
    match channels.iter().find(|c| c.initialized) {
        Some(first) if !(t > first.timestamp) => Err(FilterError::NonMonotonicTime {
            t,
            prev: first.timestamp,
        }),
        _ => Ok(()),
    }
}

/// Per-channel state for the pixel coordinates of a 2D stream.
#[derive(Debug, Clone, PartialEq)]
pub struct OneEuroState2D {
    pub channels: [ChannelState; NUM_KEYPOINTS * 2],
}

impl Default for OneEuroState2D {
    fn default() -> Self {
        Self {
            channels: [ChannelState::default(); NUM_KEYPOINTS * 2],
        }
    }
}

/// Filters the (u, v) of every keypoint. Confidence and depth pass through.
pub fn filter_skeleton_2d_stream(
    state: &mut OneEuroState2D,
    skel: &Skeleton2D,
    cfg: &OneEuroConfig,
) -> Result<Skeleton2D, FilterError> {
    check_advances(&state.channels, skel.timestamp)?;
    let mut out = *skel;
    for (k, c) in out.coords.iter_mut().enumerate() {
        for axis in 0..2 {
            c[axis] = filter_step(&mut state.channels[2 * k + axis], c[axis], skel.timestamp, cfg)?;
        }
    }
    Ok(out)
}

/// Filters a whole sequence with a fresh state.
pub fn filter_sequence(frames: &[Skeleton3D], cfg: &OneEuroConfig) -> Result<Vec<Skeleton3D>, FilterError> {
    cfg.validate()?;
    let mut state = OneEuroState::new();
    frames
        .iter()
        .map(|s| filter_skeleton_stream(&mut state, s, cfg))
        .collect()
}
