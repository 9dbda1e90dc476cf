//! Cross-based cost aggregation: averaging matching costs over adaptive
//! support regions built from intensity-similar cross arms.
//!
//! Every pixel grows four arms (left, right, top, bottom). An arm extends
//! to the next pixel `q` while `|I(p) - I(q)| < tau` and the distance to
//! `q` stays below `eta` (both strict), stopping at the image border; arm
//! lengths count pixels beyond the center, so the longest possible arm is
//! `eta - 1`. The support region of `p` is the union of the horizontal
//! arms of every pixel on `p`'s vertical arm, and aggregation intersects
//! the left-image support with the disparity-shifted right-image support
//! before averaging.
//!
//! Arms are built on the raw `[0, 1]` intensity image, not the normalized
//! one: the similarity threshold is an absolute intensity gap, and a
//! per-scene rescaling would change its meaning.

use alloc::format;
use alloc::vec::Vec;

use crate::cost::CostVolume;
use crate::imaging::{GrayImage, PixelPos};
use crate::{Error, Result};

/// Per-pixel arm lengths of the aggregation crosses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossArms {
    width: usize,
    height: usize,
    left: Vec<u16>,
    right: Vec<u16>,
    up: Vec<u16>,
    down: Vec<u16>,
}

impl CrossArms {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Arm lengths `(left, right, up, down)` at a pixel.
    pub fn arms(&self, p: PixelPos) -> (usize, usize, usize, usize) {
        let i = p.y * self.width + p.x;
        (
            self.left[i] as usize,
            self.right[i] as usize,
            self.up[i] as usize,
            self.down[i] as usize,
        )
    }
}

/// Builds the cross skeleton for every pixel of an image.
pub fn build_crosses(img: &GrayImage, tau: f32, eta: usize) -> Result<CrossArms> {
    if tau <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "intensity threshold must be positive, got {tau}"
        )));
    }
    if eta < 1 {
        return Err(Error::InvalidParam("arm reach must be at least 1".into()));
    }
    let (w, h) = (img.width(), img.height());
    let len = w * h;
    let mut arms = CrossArms {
        width: w,
        height: h,
        left: Vec::with_capacity(len),
        right: Vec::with_capacity(len),
        up: Vec::with_capacity(len),
        down: Vec::with_capacity(len),
    };
    let grow = |center: f32, mut next: impl FnMut(usize) -> Option<f32>| -> u16 {
        let mut len = 0usize;
        while len + 1 < eta {
            match next(len + 1) {
                Some(v) if (center - v).abs() < tau => len += 1,
                _ => break,
            }
        }
        len as u16
    };
    for y in 0..h {
        for x in 0..w {
            let c = img.get(x, y);
            arms.left
                .push(grow(c, |step| (x >= step).then(|| img.get(x - step, y))));
            arms.right
                .push(grow(c, |step| (x + step < w).then(|| img.get(x + step, y))));
            arms.up
                .push(grow(c, |step| (y >= step).then(|| img.get(x, y - step))));
            arms.down
                .push(grow(c, |step| (y + step < h).then(|| img.get(x, y + step))));
        }
    }
    Ok(arms)
}

/// Support region of `p`: the union of horizontal arms (center included)
/// of all pixels on `p`'s vertical arm, `p` included. Pixels are returned
/// in row-major order.
pub fn support_region(crosses: &CrossArms, p: PixelPos) -> Vec<PixelPos> {
    let (_, _, up, down) = crosses.arms(p);
    let mut out = Vec::new();
    for y in p.y - up..=p.y + down {
        let q = PixelPos::new(p.x, y);
        let (l, r, _, _) = crosses.arms(q);
        for x in p.x - l..=p.x + r {
            out.push(PixelPos::new(x, y));
        }
    }
    out
}

/// Combined support region at disparity `d`: the pixels `q` of the left
/// support whose shifted counterpart `qd` lies in the right support of
/// `pd`. Empty when `pd` itself is out of range; otherwise always
/// contains `p`. Row-major order.
pub fn combined_support(
    left: &CrossArms,
    right: &CrossArms,
    p: PixelPos,
    d: usize,
) -> Vec<PixelPos> {
    let mut out = Vec::new();
    if p.x < d {
        return out;
    }
    let pd = PixelPos::new(p.x - d, p.y);
    let (_, _, up_l, down_l) = left.arms(p);
    let (_, _, up_r, down_r) = right.arms(pd);
    let up = up_l.min(up_r);
    let down = down_l.min(down_r);
    for y in p.y - up..=p.y + down {
        // Membership in both supports decomposes per row: the only pixel
        // of p's column on row y is (p.x, y), and its horizontal arm is
        // clipped by the arm of the shifted pixel in the right image.
        let (l_l, r_l, _, _) = left.arms(PixelPos::new(p.x, y));
        let (l_r, r_r, _, _) = right.arms(PixelPos::new(pd.x, y));
        let l = l_l.min(l_r);
        let r = r_l.min(r_r);
        for x in p.x - l..=p.x + r {
            out.push(PixelPos::new(x, y));
        }
    }
    out
}

/// Iterated cost averaging over combined support regions.
///
/// Each iteration reads the previous volume and writes a fresh one
/// (synchronous update). Invalid cells of the support are dropped from
/// the average; invalid cells of the volume stay invalid.
pub fn cbca(
    volume: &CostVolume,
    left: &CrossArms,
    right: &CrossArms,
    iterations: usize,
) -> Result<CostVolume> {
    if left.width != volume.width()
        || left.height != volume.height()
        || right.width != volume.width()
        || right.height != volume.height()
    {
        return Err(Error::Shape(format!(
            "cross arms {}x{} / {}x{} do not match the {}x{} cost volume",
            left.width,
            left.height,
            right.width,
            right.height,
            volume.width(),
            volume.height()
        )));
    }
    let (w, h, d_max) = (volume.width(), volume.height(), volume.d_max());
    let mut current = volume.clone();
    for _ in 0..iterations {
        let mut next = current.like();
        for y in 0..h {
            for x in 0..w {
                for d in 0..=d_max.min(x) {
                    if !current.is_valid(x, y, d) {
                        continue;
                    }
                    let p = PixelPos::new(x, y);
                    let pd_x = x - d;
                    let (_, _, up_l, down_l) = left.arms(p);
                    let (_, _, up_r, down_r) = right.arms(PixelPos::new(pd_x, y));
                    let up = up_l.min(up_r);
                    let down = down_l.min(down_r);
                    let mut sum = 0.0f32;
                    let mut count = 0usize;
                    for qy in y - up..=y + down {
                        let (l_l, r_l, _, _) = left.arms(PixelPos::new(x, qy));
                        let (l_r, r_r, _, _) = right.arms(PixelPos::new(pd_x, qy));
                        let l = l_l.min(l_r);
                        let r = r_l.min(r_r);
                        for qx in x - l..=x + r {
                            if current.is_valid(qx, qy, d) {
                                sum += current.cost(qx, qy, d);
                                count += 1;
                            }
                        }
                    }
                    // (p, d) is valid, so the region contributes at least p.
                    next.set(x, y, d, sum / count as f32);
                }
            }
        }
        current = next;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_interior_arms_reach_eta_minus_one() {
        let img = GrayImage::filled(9, 9, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        assert_eq!(arms.arms(PixelPos::new(4, 4)), (3, 3, 3, 3));
    }

    #[test]
    fn high_contrast_neighbors_give_zero_arms() {
        // checkerboard with unit steps, threshold below the step
        let img = GrayImage::from_fn(6, 6, |x, y| ((x + y) % 2) as f32);
        let arms = build_crosses(&img, 0.5, 4).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(arms.arms(PixelPos::new(x, y)), (0, 0, 0, 0));
            }
        }
    }

    #[test]
    fn corner_pixel_clamps_to_border() {
        let img = GrayImage::filled(5, 5, 0.2);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        let (l, r, u, d) = arms.arms(PixelPos::new(0, 0));
        assert_eq!((l, u), (0, 0));
        assert_eq!((r, d), (3, 3));
    }

    #[test]
    fn singleton_cross_supports_only_center() {
        let img = GrayImage::from_fn(6, 6, |x, y| ((x + y) % 2) as f32);
        let arms = build_crosses(&img, 0.5, 4).unwrap();
        let p = PixelPos::new(3, 2);
        assert_eq!(support_region(&arms, p), alloc::vec![p]);
    }

    #[test]
    fn constant_image_center_support_is_full_square() {
        let img = GrayImage::filled(9, 9, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        let region = support_region(&arms, PixelPos::new(4, 4));
        assert_eq!(region.len(), 49);
        for q in &region {
            assert!((1..=7).contains(&q.x) && (1..=7).contains(&q.y));
        }
    }

    #[test]
    fn combined_support_singleton_left() {
        let left_img = GrayImage::from_fn(6, 6, |x, y| ((x + y) % 2) as f32);
        let right_img = GrayImage::filled(6, 6, 0.5);
        let left = build_crosses(&left_img, 0.5, 4).unwrap();
        let right = build_crosses(&right_img, 0.5, 4).unwrap();
        let p = PixelPos::new(3, 3);
        assert_eq!(combined_support(&left, &right, p, 1), alloc::vec![p]);
    }

    #[test]
    fn combined_support_constant_pair_clips_at_shifted_border() {
        let img = GrayImage::filled(9, 9, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        // p near the left edge: pd = (1, 4) has only one pixel of left arm
        let region = combined_support(&arms, &arms, PixelPos::new(3, 4), 2);
        for q in &region {
            assert!(q.x >= 2, "x-d must stay in range, got {}", q.x);
        }
        assert!(region.contains(&PixelPos::new(3, 4)));
    }

    #[test]
    fn combined_support_out_of_range_is_empty() {
        let img = GrayImage::filled(5, 5, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        assert!(combined_support(&arms, &arms, PixelPos::new(1, 1), 2).is_empty());
    }

    #[test]
    fn zero_iterations_is_identity() {
        let img = GrayImage::filled(5, 5, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        let mut vol = CostVolume::new_invalid(5, 5, 2);
        for y in 0..5 {
            for x in 0..5 {
                for d in 0..=2.min(x) {
                    vol.set(x, y, d, (x * 7 + y * 3 + d) as f32);
                }
            }
        }
        let out = cbca(&vol, &arms, &arms, 0).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn constant_volume_is_fixed_point() {
        let img = GrayImage::filled(6, 6, 0.5);
        let arms = build_crosses(&img, 0.1, 4).unwrap();
        let mut vol = CostVolume::new_invalid(6, 6, 1);
        for y in 0..6 {
            for x in 0..6 {
                for d in 0..=1.min(x) {
                    vol.set(x, y, d, 2.5);
                }
            }
        }
        let out = cbca(&vol, &arms, &arms, 4).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                for d in 0..=1.min(x) {
                    assert_eq!(out.cost(x, y, d), 2.5);
                }
            }
        }
    }

    #[test]
    fn singleton_supports_make_cbca_identity() {
        let img = GrayImage::from_fn(7, 7, |x, y| ((x + y) % 2) as f32);
        let arms = build_crosses(&img, 0.5, 4).unwrap();
        let mut vol = CostVolume::new_invalid(7, 7, 2);
        for y in 0..7 {
            for x in 0..7 {
                for d in 0..=2.min(x) {
                    vol.set(x, y, d, ((x * 13 + y * 5 + d * 3) % 11) as f32);
                }
            }
        }
        let out = cbca(&vol, &arms, &arms, 3).unwrap();
        assert_eq!(out, vol);
    }
}
