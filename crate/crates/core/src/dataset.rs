//! Construction of the binary patch-pair classification training set.
//!
//! For every ground-truth pixel of a rectified pair, one positive example
//! (right patch centered within `pos_hi` columns of the true match) and one
//! negative example (right patch offset by 4..8 columns, corrupting the
//! match) are extracted, so the two classes are exactly balanced.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imaging::{DisparityMap, GrayImage, PixelPos};
use crate::{Error, Result};

/// Square window of image intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T = f32> {
    size: usize,
    values: Vec<T>,
}

impl<T: Copy> Patch<T> {
    pub fn new(size: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape(format!(
                "patch data length {} does not match {size}x{size}",
                values.len()
            )));
        }
        Ok(Patch { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.size + x]
    }
}

/// Class of a training example: does the patch pair depict the same scene
/// point or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

/// One supervised example: a left patch, a right patch, and whether they
/// match. Patches are taken from normalized images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T = f32> {
    pub left: Patch<T>,
    pub right: Patch<T>,
    pub label: Label,
}

/// Hyperparameters of dataset extraction.
///
/// Negative offsets are drawn uniformly from
/// `{-neg_hi..-neg_lo} ∪ {neg_lo..neg_hi}`, positive offsets uniformly from
/// `{-pos_hi..pos_hi}`; keeping `pos_hi < neg_lo` keeps the two offset sets
/// disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingParams {
    /// Patch side length, odd.
    pub patch_size: usize,
    pub neg_lo: u32,
    pub neg_hi: u32,
    pub pos_hi: u32,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            patch_size: 9,
            neg_lo: 4,
            neg_hi: 8,
            pos_hi: 1,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(Error::InvalidParam(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.neg_lo < 1 || self.neg_lo > self.neg_hi {
            return Err(Error::InvalidParam(format!(
                "negative offset band requires 1 <= lo <= hi, got [{}, {}]",
                self.neg_lo, self.neg_hi
            )));
        }
        if self.pos_hi >= self.neg_lo {
            return Err(Error::InvalidParam(format!(
                "positive band {} must stay below negative band start {}",
                self.pos_hi, self.neg_lo
            )));
        }
        Ok(())
    }
}

/// Copies the `n`x`n` window centered at `center`. The center must be at
/// least `n/2` pixels from every border.
pub fn extract_patch(img: &GrayImage, center: PixelPos, n: usize) -> Result<Patch> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::InvalidParam(format!(
            "patch size must be odd and positive, got {n}"
        )));
    }
    let r = n / 2;
    if center.x < r || center.y < r || center.x + r >= img.width() || center.y + r >= img.height()
    {
        return Err(Error::Range(format!(
            "{n}x{n} patch at ({}, {}) leaves the {}x{} image",
            center.x,
            center.y,
            img.width(),
            img.height()
        )));
    }
    let mut values = Vec::with_capacity(n * n);
    for dy in 0..n {
        for dx in 0..n {
            values.push(img.get(center.x - r + dx, center.y - r + dy));
        }
    }
    Patch::new(n, values)
}

/// Draws one `(o_pos, o_neg)` offset pair: `o_pos` uniform over
/// `{-pos_hi..pos_hi}`, `o_neg` uniform over the two-sided negative band.
pub fn sample_offsets<R: Rng>(params: &SamplingParams, rng: &mut R) -> (i64, i64) {
    let pos_hi = params.pos_hi as i64;
    let o_pos = rng.gen_range(-pos_hi..=pos_hi);
    let band = (params.neg_hi - params.neg_lo + 1) as i64;
    let pick = rng.gen_range(0..2 * band);
    let o_neg = if pick < band {
        params.neg_lo as i64 + pick
    } else {
        -(params.neg_lo as i64 + (pick - band))
    };
    (o_pos, o_neg)
}

fn center_fits(x: i64, y: i64, r: i64, width: i64, height: i64) -> bool {
    x >= r && y >= r && x + r < width && y + r < height
}

/// Extracts one positive and one negative example per usable ground-truth
/// pixel, scanning pixels in row-major order.
///
/// A pixel is usable when its ground truth is valid and the left patch as
/// well as both sampled right patches lie fully inside their images; pixels
/// failing any bound are skipped entirely so the classes stay balanced.
/// The output is deterministic for a given seed.
pub fn extract_examples(
    left: &GrayImage,
    right: &GrayImage,
    ground_truth: &DisparityMap,
    params: &SamplingParams,
) -> Result<Vec<TrainingExample>> {
    params.validate()?;
    if left.width() != right.width() || left.height() != right.height() {
        return Err(Error::Shape(format!(
            "left {}x{} and right {}x{} images differ in size",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    if ground_truth.width() != left.width() || ground_truth.height() != left.height() {
        return Err(Error::Shape(format!(
            "ground truth {}x{} is not aligned to the {}x{} left image",
            ground_truth.width(),
            ground_truth.height(),
            left.width(),
            left.height()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.patch_size;
    let r = (n / 2) as i64;
    let (w, h) = (left.width() as i64, left.height() as i64);
    let mut examples = Vec::new();

    for y in 0..left.height() {
        for x in 0..left.width() {
            if !ground_truth.is_valid(x, y) {
                continue;
            }
            if !center_fits(x as i64, y as i64, r, w, h) {
                continue;
            }
            // Ground truth from LIDAR is fractional; patch centers are
            // integral, so round to the nearest pixel.
            let d = num_traits::Float::round(ground_truth.get(x, y)) as i64;
            let (o_pos, o_neg) = sample_offsets(params, &mut rng);
            let pos_x = x as i64 - d + o_pos;
            let neg_x = x as i64 - d + o_neg;
            if !center_fits(pos_x, y as i64, r, w, h) || !center_fits(neg_x, y as i64, r, w, h) {
                continue;
            }
            let center = PixelPos::new(x, y);
            let left_patch = extract_patch(left, center, n)?;
            examples.push(TrainingExample {
                left: left_patch.clone(),
                right: extract_patch(right, PixelPos::new(pos_x as usize, y), n)?,
                label: Label::Positive,
            });
            examples.push(TrainingExample {
                left: left_patch,
                right: extract_patch(right, PixelPos::new(neg_x as usize, y), n)?,
                label: Label::Negative,
            });
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_one_by_one_is_single_pixel() {
        let img = GrayImage::from_fn(4, 4, |x, y| (x + 10 * y) as f32);
        let p = extract_patch(&img, PixelPos::new(2, 3), 1).unwrap();
        assert_eq!(p.values(), &[32.0]);
    }

    #[test]
    fn patch_full_cover() {
        let img = GrayImage::from_fn(3, 3, |x, y| (x + 10 * y) as f32);
        let p = extract_patch(&img, PixelPos::new(1, 1), 3).unwrap();
        assert_eq!(p.values(), img.data());
    }

    #[test]
    fn patch_nine_by_nine_ramp() {
        let img = GrayImage::from_fn(9, 9, |x, y| (x + 9 * y) as f32);
        let p = extract_patch(&img, PixelPos::new(4, 4), 9).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(p.get(x, y), (x + 9 * y) as f32);
            }
        }
    }

    #[test]
    fn patch_border_violation() {
        let img = GrayImage::filled(9, 9, 0.0);
        assert!(matches!(
            extract_patch(&img, PixelPos::new(3, 4), 9),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn offsets_stay_in_bands() {
        let params = SamplingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let (o_pos, o_neg) = sample_offsets(&params, &mut rng);
            assert!((-1..=1).contains(&o_pos), "o_pos {o_pos}");
            assert!(
                (4..=8).contains(&o_neg.abs()),
                "o_neg {o_neg} outside band"
            );
        }
    }

    #[test]
    fn offsets_pos_hi_zero_is_always_zero() {
        let params = SamplingParams {
            pos_hi: 0,
            ..SamplingParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_offsets(&params, &mut rng).0, 0);
        }
    }

    #[test]
    fn offsets_cover_both_negative_sides() {
        let params = SamplingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut saw_left, mut saw_right) = (false, false);
        for _ in 0..200 {
            let (_, o_neg) = sample_offsets(&params, &mut rng);
            saw_left |= o_neg < 0;
            saw_right |= o_neg > 0;
        }
        assert!(saw_left && saw_right);
    }

    #[test]
    fn empty_ground_truth_gives_no_examples() {
        let left = GrayImage::filled(16, 16, 0.5);
        let right = left.clone();
        let gt = DisparityMap::new_invalid(16, 16);
        let out = extract_examples(&left, &right, &gt, &SamplingParams::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn single_valid_pixel_gives_one_example_per_class() {
        let left = GrayImage::from_fn(32, 32, |x, y| ((x * 31 + y * 17) % 97) as f32 / 97.0);
        let right = GrayImage::from_fn(32, 32, |x, y| ((x * 13 + y * 7) % 89) as f32 / 89.0);
        let mut gt = DisparityMap::new_invalid(32, 32);
        gt.set(16, 16, 3.0);
        let out = extract_examples(&left, &right, &gt, &SamplingParams::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].label, Label::Positive);
        assert_eq!(out[1].label, Label::Negative);
    }

    #[test]
    fn classes_exactly_balanced_and_deterministic() {
        let left = GrayImage::from_fn(32, 32, |x, y| ((x * 31 + y * 17) % 97) as f32 / 97.0);
        let right = GrayImage::from_fn(32, 32, |x, y| ((x * 13 + y * 7) % 89) as f32 / 89.0);
        let mut gt = DisparityMap::new_invalid(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                gt.set(x, y, (x % 5) as f64);
            }
        }
        let params = SamplingParams::default();
        let a = extract_examples(&left, &right, &gt, &params).unwrap();
        let b = extract_examples(&left, &right, &gt, &params).unwrap();
        assert_eq!(a, b);
        let pos = a.iter().filter(|e| e.label == Label::Positive).count();
        assert_eq!(pos * 2, a.len());
        assert!(!a.is_empty());
    }

    #[test]
    fn border_pixels_skipped() {
        let left = GrayImage::filled(12, 12, 0.25);
        let right = left.clone();
        let mut gt = DisparityMap::new_invalid(12, 12);
        gt.set(0, 0, 1.0); // left patch cannot fit
        gt.set(5, 5, 4.0); // x - d - neg_hi can fall outside
        let out = extract_examples(&left, &right, &gt, &SamplingParams::default()).unwrap();
        // (5,5) with d=4: positive center x in {0,1,2} < r=4 -> skipped too.
        assert!(out.is_empty());
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let left = GrayImage::filled(10, 10, 0.0);
        let right = GrayImage::filled(11, 10, 0.0);
        let gt = DisparityMap::new_invalid(10, 10);
        assert!(matches!(
            extract_examples(&left, &right, &gt, &SamplingParams::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn params_validation() {
        let mut p = SamplingParams::default();
        p.patch_size = 8;
        assert!(p.validate().is_err());
        let mut p = SamplingParams::default();
        p.neg_lo = 0;
        assert!(p.validate().is_err());
        let mut p = SamplingParams::default();
        p.pos_hi = 4;
        assert!(p.validate().is_err());
        assert!(SamplingParams::default().validate().is_ok());
    }
}
