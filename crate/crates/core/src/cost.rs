//! Matching-cost volume construction.
//!
//! A [`CostVolume`] stores one cost per `(row, column, disparity)` cell in
//! a fixed `(y, x, d)` layout: cell `(x, y, d)` lives at index
//! `(y * width + x) * (d_max + 1) + d`. Iteration everywhere in the crate
//! follows that order, so identical inputs produce bit-identical volumes.
//!
//! Cells whose right-image counterpart is out of range (or outside the
//! network's valid border) are invalid and carry [`INVALID_COST`], a
//! sentinel large enough that winner-take-all and the scanline optimizer
//! never select them over a real match.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::imaging::GrayImage;
use crate::net::{forward_features, score_pair_maps, NetworkParams};
use crate::{Error, Result};

/// Sentinel stored in invalid cells.
pub const INVALID_COST: f32 = 1e10;

/// Dense `(height x width x (d_max+1))` matching-cost array with a
/// per-cell validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    costs: Vec<f32>,
    valid: Vec<bool>,
}

impl CostVolume {
    /// All-invalid volume.
    pub fn new_invalid(width: usize, height: usize, d_max: usize) -> Self {
        let len = width * height * (d_max + 1);
        CostVolume {
            width,
            height,
            d_max,
            costs: vec![INVALID_COST; len],
            valid: vec![false; len],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Largest disparity under consideration; the volume has `d_max + 1`
    /// disparity slices.
    pub fn d_max(&self) -> usize {
        self.d_max
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, d: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && d <= self.d_max);
        (y * self.width + x) * (self.d_max + 1) + d
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize, d: usize) -> f32 {
        self.costs[self.index(x, y, d)]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize, d: usize) -> bool {
        self.valid[self.index(x, y, d)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: usize, cost: f32) {
        let i = self.index(x, y, d);
        self.costs[i] = cost;
        self.valid[i] = true;
    }

    #[inline]
    pub fn set_invalid(&mut self, x: usize, y: usize, d: usize) {
        let i = self.index(x, y, d);
        self.costs[i] = INVALID_COST;
        self.valid[i] = false;
    }

    /// Overwrites the cost without touching the validity flag; used by
    /// transforms that propagate the input volume's validity.
    #[inline]
    pub fn set_cost_keep_validity(&mut self, x: usize, y: usize, d: usize, cost: f32) {
        let i = self.index(x, y, d);
        self.costs[i] = cost;
    }

    pub fn costs(&self) -> &[f32] {
        &self.costs
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Copy with the same dimensions and validity but all valid cells reset
    /// to zero; scratch for synchronous per-iteration updates.
    pub(crate) fn like(&self) -> CostVolume {
        CostVolume {
            width: self.width,
            height: self.height,
            d_max: self.d_max,
            costs: self
                .valid
                .iter()
                .map(|&v| if v { 0.0 } else { INVALID_COST })
                .collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Sum-of-absolute-differences cost over a square window:
/// `C(p, d) = sum over q in N_p of |left(q) - right(qd)|`.
///
/// A cell is valid only when the window around `p` lies inside the left
/// image and the window around `pd = (x-d, y)` lies inside the right image.
/// This is the network-free baseline backend; it runs on raw intensities.
pub fn sad_cost_volume(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    window: usize,
) -> Result<CostVolume> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Shape(format!(
            "left {}x{} and right {}x{} images differ in size",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    if window % 2 == 0 || window == 0 {
        return Err(Error::InvalidParam(format!(
            "window must be odd and positive, got {window}"
        )));
    }
    let (w, h) = (left.width(), left.height());
    let r = window / 2;
    let mut volume = CostVolume::new_invalid(w, h, d_max);
    if w < window || h < window {
        return Ok(volume);
    }
    for y in r..h - r {
        for x in r..w - r {
            let d_hi = d_max.min(x.saturating_sub(r));
            for d in 0..=d_hi {
                if x - d < r {
                    break;
                }
                let mut sum = 0.0f32;
                for wy in 0..window {
                    for wx in 0..window {
                        let qy = y - r + wy;
                        let ql = x - r + wx;
                        sum += (left.get(ql, qy) - right.get(ql - d, qy)).abs();
                    }
                }
                volume.set(x, y, d, sum);
            }
        }
    }
    Ok(volume)
}

/// Matching cost from the trained network: `C(p, d)` is the bad-match
/// probability for the patch pair at `(p, pd)`.
///
/// Feature maps for both images are computed once and the head is swept
/// over every disparity, so the volume dimensions are the feature-map
/// dimensions — the images shrink by `patch_size - 1` in each axis.
pub fn cnn_cost_volume(
    params: &NetworkParams<f32>,
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
) -> Result<CostVolume> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Shape(format!(
            "left {}x{} and right {}x{} images differ in size",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    let feat_left = forward_features(params, left)?;
    let feat_right = forward_features(params, right)?;
    let (w, h) = (feat_left.width(), feat_left.height());
    let mut volume = CostVolume::new_invalid(w, h, d_max);
    for d in 0..=d_max {
        if d >= w {
            break;
        }
        let scores = score_pair_maps(params, &feat_left, &feat_right, d)?;
        for y in 0..h {
            for x in d..w {
                volume.set(x, y, d, scores.get(x, y).unwrap());
            }
        }
    }
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;

    fn noise(w: usize, h: usize, k: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let v = (x as u32)
                .wrapping_mul(1103515245)
                .wrapping_add((y as u32).wrapping_mul(12345))
                .wrapping_add(k);
            (v % 1000) as f32 / 1000.0
        })
    }

    #[test]
    fn identical_images_zero_cost_at_d0() {
        let img = noise(8, 8, 1);
        let vol = sad_cost_volume(&img, &img, 3, 3).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!(vol.is_valid(x, y, 0));
                assert_eq!(vol.cost(x, y, 0), 0.0);
            }
        }
    }

    #[test]
    fn shifted_pair_zero_cost_at_true_shift() {
        let left = noise(16, 8, 2);
        // right(x - 3, y) = left(x, y)
        let right = GrayImage::from_fn(16, 8, |x, y| {
            if x + 3 < 16 {
                left.get(x + 3, y)
            } else {
                0.77
            }
        });
        let vol = sad_cost_volume(&left, &right, 5, 3).unwrap();
        for y in 1..7 {
            for x in 4..14 {
                assert!(vol.is_valid(x, y, 3));
                assert!(vol.cost(x, y, 3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn window_leaving_image_is_invalid() {
        let img = noise(8, 8, 3);
        let vol = sad_cost_volume(&img, &img, 4, 3).unwrap();
        assert!(!vol.is_valid(0, 4, 0)); // left window clipped
        assert!(!vol.is_valid(4, 0, 0)); // top window clipped
        assert!(!vol.is_valid(4, 4, 4)); // x - d = 0 < r
        assert!(vol.is_valid(5, 4, 4));
    }

    #[test]
    fn sad_costs_nonnegative() {
        let left = noise(10, 6, 4);
        let right = noise(10, 6, 5);
        let vol = sad_cost_volume(&left, &right, 4, 5).unwrap();
        for (i, &c) in vol.costs().iter().enumerate() {
            if vol.validity()[i] {
                assert!(c >= 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_window_and_sizes() {
        let a = noise(8, 8, 6);
        let b = noise(9, 8, 7);
        assert!(sad_cost_volume(&a, &b, 3, 3).is_err());
        assert!(sad_cost_volume(&a, &a, 3, 4).is_err());
    }

    #[test]
    fn volume_layout_is_d_fastest() {
        let vol = CostVolume::new_invalid(4, 3, 2);
        assert_eq!(vol.index(0, 0, 0), 0);
        assert_eq!(vol.index(0, 0, 2), 2);
        assert_eq!(vol.index(1, 0, 0), 3);
        assert_eq!(vol.index(0, 1, 0), 12);
    }
}
