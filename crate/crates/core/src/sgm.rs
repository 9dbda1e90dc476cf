//! Semiglobal smoothness optimization: scanline dynamic programming along
//! the two horizontal and the two vertical directions, averaged.
//!
//! Along a direction `r` the recurrence charges a small penalty `P1` for a
//! one-level disparity change between neighboring pixels, a large penalty
//! `P2` for bigger jumps, and subtracts the previous pixel's minimum so
//! values stay bounded without affecting the per-pixel argmin. `P1` and
//! `P2` adapt to the image gradient so disparity jumps line up with
//! intensity edges; `P1` is halved on the vertical directions.

use alloc::format;
use alloc::vec;

use crate::cost::CostVolume;
use crate::imaging::{GrayImage, PixelPos};
use crate::{Error, Result};

/// One scanline step; the recurrence at `p` looks back to `p - r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDirection {
    pub dx: i32,
    pub dy: i32,
}

impl ScanDirection {
    pub fn is_vertical(&self) -> bool {
        self.dy != 0
    }
}

/// The four optimization directions: left-to-right, right-to-left,
/// top-to-bottom, bottom-to-top.
pub const DIRECTIONS: [ScanDirection; 4] = [
    ScanDirection { dx: 1, dy: 0 },
    ScanDirection { dx: -1, dy: 0 },
    ScanDirection { dx: 0, dy: 1 },
    ScanDirection { dx: 0, dy: -1 },
];

/// Smoothness penalties and the gradient threshold steering them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgmParams {
    pub pi1: f32,
    pub pi2: f32,
    pub tau_so: f32,
}

impl Default for SgmParams {
    fn default() -> Self {
        SgmParams {
            pi1: 1.0,
            pi2: 32.0,
            tau_so: 0.0625,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi1 > 0.0 && self.pi2 >= self.pi1) {
            return Err(Error::InvalidParam(format!(
                "penalties must satisfy P2 >= P1 > 0, got P1={}, P2={}",
                self.pi1, self.pi2
            )));
        }
        if !(self.tau_so > 0.0) {
            return Err(Error::InvalidParam(format!(
                "gradient threshold must be positive, got {}",
                self.tau_so
            )));
        }
        Ok(())
    }
}

fn gradient_high(
    img: &GrayImage,
    x: i64,
    y: i64,
    px: i64,
    py: i64,
    tau_so: f32,
) -> bool {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && x < w && y >= 0 && y < h;
    if !inside(x, y) || !inside(px, py) {
        // Samples leaving the image count as a flat gradient.
        return false;
    }
    let d = (img.get(x as usize, y as usize) - img.get(px as usize, py as usize)).abs();
    d >= tau_so
}

/// Gradient-adaptive penalties at `(p, d)` for a step in direction `r`.
///
/// With `D1` the left-image gradient between `p` and `p - r` and `D2` the
/// right-image gradient between `pd` and `pd - r`: both below the
/// threshold keeps the base penalties, exactly one at or above it divides
/// both by 4, both at or above it divides both by 10. `P1` is then halved
/// for vertical directions. Samples outside either image count as flat.
pub fn adaptive_penalties(
    left: &GrayImage,
    right: &GrayImage,
    p: PixelPos,
    d: usize,
    dir: ScanDirection,
    params: &SgmParams,
) -> (f32, f32) {
    let (x, y) = (p.x as i64, p.y as i64);
    let (dx, dy) = (dir.dx as i64, dir.dy as i64);
    let d1_high = gradient_high(left, x, y, x - dx, y - dy, params.tau_so);
    let d2_high = gradient_high(right, x - d as i64, y, x - d as i64 - dx, y - dy, params.tau_so);
    let (mut p1, p2) = match (d1_high, d2_high) {
        (false, false) => (params.pi1, params.pi2),
        (true, false) | (false, true) => (params.pi1 / 4.0, params.pi2 / 4.0),
        (true, true) => (params.pi1 / 10.0, params.pi2 / 10.0),
    };
    if dir.is_vertical() {
        p1 /= 2.0;
    }
    (p1, p2)
}

/// One dynamic-programming pass along direction `r`.
///
/// At scanline starts (where `p - r` leaves the image) the output equals
/// the input. `normalize` controls the subtraction of the previous
/// pixel's minimum; the production path keeps it on, and switching it off
/// changes values but never the per-pixel argmin.
pub fn direction_cost(
    volume: &CostVolume,
    dir: ScanDirection,
    left: &GrayImage,
    right: &GrayImage,
    params: &SgmParams,
    normalize: bool,
) -> Result<CostVolume> {
    params.validate()?;
    if !DIRECTIONS.contains(&dir) {
        return Err(Error::InvalidParam(format!(
            "direction ({}, {}) is not one of the four scanline directions",
            dir.dx, dir.dy
        )));
    }
    if left.width() != volume.width()
        || left.height() != volume.height()
        || right.width() != volume.width()
        || right.height() != volume.height()
    {
        return Err(Error::Shape(format!(
            "images {}x{} do not match the {}x{} cost volume",
            left.width(),
            left.height(),
            volume.width(),
            volume.height()
        )));
    }

    let (w, h, d_max) = (volume.width(), volume.height(), volume.d_max());
    let slices = d_max + 1;
    let mut out = volume.clone();

    // Scanlines are rows for horizontal directions and columns for
    // vertical ones; the recurrence runs in f64 end to end so the sentinel
    // arithmetic at invalid cells cannot erode neighboring real costs.
    let lines = if dir.is_vertical() { w } else { h };
    let steps = if dir.is_vertical() { h } else { w };
    let mut prev = vec![0.0f64; slices];
    let mut cur = vec![0.0f64; slices];

    for line in 0..lines {
        for step in 0..steps {
            let along = if (dir.dx + dir.dy) > 0 {
                step
            } else {
                steps - 1 - step
            };
            let (x, y) = if dir.is_vertical() {
                (line, along)
            } else {
                (along, line)
            };
            if step == 0 {
                for d in 0..slices {
                    cur[d] = volume.cost(x, y, d) as f64;
                }
            } else {
                let mut prev_min = f64::INFINITY;
                for &v in prev.iter() {
                    if v < prev_min {
                        prev_min = v;
                    }
                }
                let p = PixelPos::new(x, y);
                for d in 0..slices {
                    let (p1, p2) = adaptive_penalties(left, right, p, d, dir, params);
                    let mut best = prev[d];
                    if d > 0 {
                        let c = prev[d - 1] + p1 as f64;
                        if c < best {
                            best = c;
                        }
                    }
                    if d < d_max {
                        let c = prev[d + 1] + p1 as f64;
                        if c < best {
                            best = c;
                        }
                    }
                    let c = prev_min + p2 as f64;
                    if c < best {
                        best = c;
                    }
                    let norm = if normalize { prev_min } else { 0.0 };
                    cur[d] = volume.cost(x, y, d) as f64 - norm + best;
                }
            }
            for d in 0..slices {
                out.set_cost_keep_validity(x, y, d, cur[d] as f32);
            }
            core::mem::swap(&mut prev, &mut cur);
        }
    }
    Ok(out)
}

/// Averages the four directional passes: `C(p,d) = 1/4 * sum_r C_r(p,d)`.
pub fn sgm(
    volume: &CostVolume,
    left: &GrayImage,
    right: &GrayImage,
    params: &SgmParams,
) -> Result<CostVolume> {
    let mut out = volume.clone();
    let passes: [CostVolume; 4] = [
        direction_cost(volume, DIRECTIONS[0], left, right, params, true)?,
        direction_cost(volume, DIRECTIONS[1], left, right, params, true)?,
        direction_cost(volume, DIRECTIONS[2], left, right, params, true)?,
        direction_cost(volume, DIRECTIONS[3], left, right, params, true)?,
    ];
    let (w, h, d_max) = (volume.width(), volume.height(), volume.d_max());
    for y in 0..h {
        for x in 0..w {
            for d in 0..=d_max {
                let sum = passes[0].cost(x, y, d)
                    + passes[1].cost(x, y, d)
                    + passes[2].cost(x, y, d)
                    + passes[3].cost(x, y, d);
                out.set_cost_keep_validity(x, y, d, sum * 0.25);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postproc::wta;

    fn flat_images(w: usize, h: usize) -> (GrayImage, GrayImage) {
        (GrayImage::filled(w, h, 0.5), GrayImage::filled(w, h, 0.5))
    }

    fn full_volume(w: usize, h: usize, d_max: usize, f: impl Fn(usize, usize, usize) -> f32) -> CostVolume {
        let mut vol = CostVolume::new_invalid(w, h, d_max);
        for y in 0..h {
            for x in 0..w {
                for d in 0..=d_max {
                    vol.set(x, y, d, f(x, y, d));
                }
            }
        }
        vol
    }

    #[test]
    fn penalties_follow_gradient_rules() {
        let flat = GrayImage::filled(4, 4, 0.5);
        let steep = GrayImage::from_fn(4, 4, |x, _| x as f32 * 0.1);
        let params = SgmParams::default();
        let p = PixelPos::new(2, 2);
        let east = DIRECTIONS[0];
        let south = DIRECTIONS[2];

        // both gradients flat
        assert_eq!(
            adaptive_penalties(&flat, &flat, p, 0, east, &params),
            (1.0, 32.0)
        );
        // left image steep (0.1 >= 0.0625), right flat
        assert_eq!(
            adaptive_penalties(&steep, &flat, p, 0, east, &params),
            (0.25, 8.0)
        );
        // both steep, vertical direction halves P1
        let steep_v = GrayImage::from_fn(4, 4, |_, y| y as f32 * 0.1);
        let (p1, p2) = adaptive_penalties(&steep_v, &steep_v, p, 0, south, &params);
        assert!((p1 - 0.05).abs() < 1e-7);
        assert!((p2 - 3.2).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_gradient_counts_as_flat() {
        let steep = GrayImage::from_fn(4, 4, |x, _| x as f32 * 0.1);
        let params = SgmParams::default();
        // p at the left edge: p - r leaves the image for the east direction
        let (p1, p2) =
            adaptive_penalties(&steep, &steep, PixelPos::new(0, 1), 0, DIRECTIONS[0], &params);
        assert_eq!((p1, p2), (1.0, 32.0));
    }

    #[test]
    fn single_column_east_pass_is_identity() {
        let (l, r) = flat_images(1, 5);
        let vol = full_volume(1, 5, 3, |_, y, d| (y * 4 + d) as f32 * 0.25);
        let out = direction_cost(&vol, DIRECTIONS[0], &l, &r, &SgmParams::default(), true).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn one_by_one_image_sgm_is_identity() {
        let (l, r) = flat_images(1, 1);
        let vol = full_volume(1, 1, 2, |_, _, d| d as f32 + 0.5);
        let out = sgm(&vol, &l, &r, &SgmParams::default()).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn zero_penalties_keep_wta_unchanged() {
        let (l, r) = flat_images(7, 5);
        let vol = full_volume(7, 5, 3, |x, y, d| {
            (((x * 31 + y * 17 + d * 101) % 23) as f32) * 0.125
        });
        let params = SgmParams {
            pi1: 1e-30,
            pi2: 1e-30,
            tau_so: 0.0625,
        };
        let out = sgm(&vol, &l, &r, &params).unwrap();
        let before = wta(&vol);
        let after = wta(&out);
        assert_eq!(before.values(), after.values());
    }

    #[test]
    fn smooth_volume_is_argmin_fixed_point() {
        let (l, r) = flat_images(6, 6);
        // disparity 1 wins everywhere
        let vol = full_volume(6, 6, 3, |_, _, d| if d == 1 { 0.0 } else { 1.0 });
        let out = sgm(&vol, &l, &r, &SgmParams::default()).unwrap();
        let before = wta(&vol);
        let after = wta(&out);
        assert_eq!(before.values(), after.values());
    }

    #[test]
    fn average_of_four_directions() {
        let (l, r) = flat_images(6, 4);
        let vol = full_volume(6, 4, 2, |x, y, d| ((x + 2 * y + 3 * d) % 7) as f32);
        let params = SgmParams::default();
        let expect_from_passes = {
            let a = direction_cost(&vol, DIRECTIONS[0], &l, &r, &params, true).unwrap();
            let b = direction_cost(&vol, DIRECTIONS[1], &l, &r, &params, true).unwrap();
            let c = direction_cost(&vol, DIRECTIONS[2], &l, &r, &params, true).unwrap();
            let e = direction_cost(&vol, DIRECTIONS[3], &l, &r, &params, true).unwrap();
            move |x: usize, y: usize, d: usize| {
                (a.cost(x, y, d) + b.cost(x, y, d) + c.cost(x, y, d) + e.cost(x, y, d)) * 0.25
            }
        };
        let out = sgm(&vol, &l, &r, &params).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                for d in 0..=2 {
                    assert!((out.cost(x, y, d) - expect_from_passes(x, y, d)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_direction_and_params() {
        let (l, r) = flat_images(3, 3);
        let vol = CostVolume::new_invalid(3, 3, 1);
        let bad_dir = ScanDirection { dx: 1, dy: 1 };
        assert!(direction_cost(&vol, bad_dir, &l, &r, &SgmParams::default(), true).is_err());
        let bad = SgmParams {
            pi1: 2.0,
            pi2: 1.0,
            tau_so: 0.0625,
        };
        assert!(bad.validate().is_err());
    }
}
