//! Image resizing onto the vision merge grid and the resolution-cap schedule.
//!
//! The encoder uses 14x14 patches and merges each 2x2 window into one LLM
//! token, so one vision token covers a 28x28 pixel cell.

use serde::{Deserialize, Serialize};

use crate::example::ImageSpec;
use crate::{Error, Result};

pub const PATCH_PX: u32 = 14;
pub const MERGE: u32 = 2;
/// Side of the pixel cell covered by one vision token.
pub const CELL_PX: u32 = PATCH_PX * MERGE;
const CELL_AREA: f64 = (CELL_PX * CELL_PX) as f64;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ResolutionCap {
    pub megapixels: f64,
}

impl ResolutionCap {
    pub const UNLIMITED: ResolutionCap = ResolutionCap {
        megapixels: f64::INFINITY,
    };

    pub fn mp(megapixels: f64) -> Self {
        ResolutionCap { megapixels }
    }

    pub fn pixels(&self) -> f64 {
        self.megapixels * 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: u32,
    pub cols: u32,
}

impl PatchGrid {
    pub fn height_px(&self) -> u32 {
        self.rows * CELL_PX
    }

    pub fn width_px(&self) -> u32 {
        self.cols * CELL_PX
    }

    pub fn area_px(&self) -> u64 {
        self.height_px() as u64 * self.width_px() as u64
    }
}

/// Resizes to multiples of 28 px under the cap, keeping the aspect ratio as
/// closely as the grid allows.
///
/// Sides are rounded to the nearest cell. If that overshoots the cap, both
/// sides are rescaled by `sqrt(h*w / cap)` and floored to whole cells; a final
/// loop trims the longer side for extreme aspect ratios where the one-cell
/// minimum still overshoots.
pub fn resize_to_patch_grid(spec: &ImageSpec, cap: ResolutionCap) -> Result<PatchGrid> {
    spec.validate()?;
    let cap_px = cap.pixels();
    if !(cap_px >= CELL_AREA) {
        return Err(Error::CapTooSmall { cap_px });
    }
    let (h, w) = (spec.height_px as f64, spec.width_px as f64);
    let cell = CELL_PX as f64;
    let fits = |r: u32, c: u32| r as f64 * c as f64 * CELL_AREA <= cap_px;

    let mut rows = ((h / cell).round() as u32).max(1);
    let mut cols = ((w / cell).round() as u32).max(1);
    if !fits(rows, cols) {
        let beta = (h * w / cap_px).sqrt();
        rows = ((h / beta / cell).floor() as u32).max(1);
        cols = ((w / beta / cell).floor() as u32).max(1);
        while !fits(rows, cols) {
            if rows >= cols {
                rows -= 1;
            } else {
                cols -= 1;
            }
        }
    }
    Ok(PatchGrid { rows, cols })
}

/// Number of LLM vision tokens: one per 28x28 cell.
pub fn vision_token_count(grid: &PatchGrid) -> usize {
    let patches = (grid.height_px() / PATCH_PX) as usize * (grid.width_px() / PATCH_PX) as usize;
    patches / (MERGE * MERGE) as usize
}

/// Stepwise geometric ramp of the resolution cap over the start of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapSchedule {
    pub start_mp: f64,
    pub end_mp: f64,
    pub ramp_fraction: f64,
    pub n_steps: u32,
}

impl Default for CapSchedule {
    fn default() -> Self {
        CapSchedule {
            start_mp: 0.8,
            end_mp: 6.3,
            ramp_fraction: 0.35,
            n_steps: 4,
        }
    }
}

impl CapSchedule {
    /// Cap at `progress` in `[0, 1]` of training.
    pub fn cap_at(&self, progress: f64) -> ResolutionCap {
        let progress = progress.clamp(0.0, 1.0);
        if progress >= self.ramp_fraction {
            return ResolutionCap::mp(self.end_mp);
        }
        if self.n_steps <= 1 {
            return ResolutionCap::mp(self.start_mp);
        }
        let width = self.ramp_fraction / self.n_steps as f64;
        let step = ((progress / width).floor() as u32).min(self.n_steps - 1);
        let t = step as f64 / (self.n_steps - 1) as f64;
        ResolutionCap::mp(self.start_mp * (self.end_mp / self.start_mp).powf(t))
    }
}

pub fn resolution_cap_at(progress: f64) -> ResolutionCap {
    CapSchedule::default().cap_at(progress)
}
