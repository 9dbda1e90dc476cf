//! Core raster types, intensity normalization, and the depth relation.
//!
//! A [`GrayImage`] holds single-channel floating-point intensities in
//! row-major order. Images are in `[0, 1]` directly after decoding (8-bit
//! value / 255) and have zero mean and unit standard deviation after
//! [`normalize_image`]; intensity thresholds elsewhere in the crate
//! (cross construction, smoothness penalties, bilateral filtering) are
//! calibrated for the raw `[0, 1]` scale.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A pixel coordinate, `x` column and `y` row, inside its owning raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelPos {
    pub x: usize,
    pub y: usize,
}

impl PixelPos {
    pub fn new(x: usize, y: usize) -> Self {
        PixelPos { x, y }
    }
}

/// Single-channel floating-point raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    /// Wraps row-major intensity data. Fails unless
    /// `data.len() == width * height` and both dimensions are at least 1.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds an image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    pub fn contains(&self, p: PixelPos) -> bool {
        p.x < self.width && p.y < self.height
    }

    /// Horizontally mirrored copy (column `x` maps to `width-1-x`).
    pub fn mirrored(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Copy with `border` pixels removed from every side.
    pub fn cropped(&self, border: usize) -> Result<GrayImage> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::Shape(format!(
                "cannot crop border {border} from {}x{} image",
                self.width, self.height
            )));
        }
        Ok(GrayImage::from_fn(
            self.width - 2 * border,
            self.height - 2 * border,
            |x, y| self.get(x + border, y + border),
        ))
    }
}

/// Per-pixel disparity values with a validity mask (ground truth from sparse
/// sensors leaves holes; pipeline stages mark pixels they cannot resolve).
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// Assembles a map from parallel value/validity buffers.
    pub fn from_parts(
        width: usize,
        height: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "disparity map dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape(format!(
                "value/validity lengths {}/{} do not match {width}x{height}",
                values.len(),
                valid.len()
            )));
        }
        Ok(DisparityMap {
            width,
            height,
            values,
            valid,
        })
    }

    /// All-invalid map of the given size.
    pub fn new_invalid(width: usize, height: usize) -> Self {
        DisparityMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// All-valid map with a constant disparity.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        DisparityMap {
            width,
            height,
            values: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.values[y * self.width + x] = value;
        self.valid[y * self.width + x] = true;
    }

    #[inline]
    pub fn set_invalid(&mut self, x: usize, y: usize) {
        debug_assert!(x < self.width && y < self.height);
        self.values[y * self.width + x] = 0.0;
        self.valid[y * self.width + x] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Horizontally mirrored copy (values and validity).
    pub fn mirrored(&self) -> DisparityMap {
        let mut out = DisparityMap::new_invalid(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = self.width - 1 - x;
                if self.is_valid(sx, y) {
                    out.set(x, y, self.get(sx, y));
                }
            }
        }
        out
    }
}

/// Depth of a scene point from its disparity: `z = f * B / d`, with the
/// focal length `f` in pixels and the camera baseline `B` in meters.
///
/// Zero disparity means infinite depth, so `d <= 0` is a domain error, as
/// are non-positive `f` or `B`.
pub fn depth_from_disparity(disparity_px: f64, focal_px: f64, baseline_m: f64) -> Result<f64> {
    if disparity_px <= 0.0 {
        return Err(Error::Domain(format!(
            "disparity must be positive, got {disparity_px}"
        )));
    }
    if focal_px <= 0.0 || baseline_m <= 0.0 {
        return Err(Error::Domain(format!(
            "focal length and baseline must be positive, got f={focal_px}, B={baseline_m}"
        )));
    }
    Ok(focal_px * baseline_m / disparity_px)
}

/// Shifts and scales an image to zero mean and unit population standard
/// deviation over all pixels.
///
/// Constant images have no spread to normalize by and map to all zeros.
pub fn normalize_image(img: &GrayImage) -> GrayImage {
    let n = img.data.len() as f64;
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in &img.data {
        min = if v < min { v } else { min };
        max = if v > max { v } else { max };
        sum += v as f64;
    }
    if min == max {
        return GrayImage::filled(img.width, img.height, 0.0);
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for &v in &img.data {
        let d = v as f64 - mean;
        sq += d * d;
    }
    let std = num_traits::Float::sqrt(sq / n);
    GrayImage {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| ((v as f64 - mean) / std) as f32)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_identity_and_halving() {
        assert_eq!(depth_from_disparity(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(depth_from_disparity(2.0, 1.0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn depth_direct_arithmetic() {
        // f * B / d = 721.0 * 0.54 / 100 = 3.8934
        let z = depth_from_disparity(100.0, 721.0, 0.54).unwrap();
        assert!((z - 3.8934).abs() < 1e-12);
    }

    #[test]
    fn depth_rejects_nonpositive_disparity() {
        assert!(matches!(
            depth_from_disparity(0.0, 1.0, 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            depth_from_disparity(-1.0, 1.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn depth_strictly_decreasing_in_disparity() {
        let mut prev = f64::INFINITY;
        for d in 1..200 {
            let z = depth_from_disparity(d as f64, 721.0, 0.54).unwrap();
            assert!(z < prev);
            prev = z;
        }
    }

    #[test]
    fn normalize_constant_image_is_all_zeros() {
        let img = GrayImage::filled(4, 3, 7.0);
        let out = normalize_image(&img);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_two_by_two() {
        // [0,2;2,4]: mean 2, population std sqrt(2) -> [-sqrt2, 0; 0, sqrt2]
        let img = GrayImage::new(2, 2, vec![0.0, 2.0, 2.0, 4.0]).unwrap();
        let out = normalize_image(&img);
        let s2 = core::f32::consts::SQRT_2;
        let expect = [-s2, 0.0, 0.0, s2];
        for (got, want) in out.data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn normalize_already_normalized_unchanged() {
        let img = GrayImage::new(2, 2, vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let out = normalize_image(&img);
        for (a, b) in out.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_output_has_zero_mean_unit_std() {
        let img = GrayImage::from_fn(7, 5, |x, y| (x * 3 + y * y) as f32 * 0.01);
        let out = normalize_image(&img);
        let n = out.data().len() as f64;
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = out
            .data()
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_shape_validation() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn mirror_round_trips() {
        let img = GrayImage::from_fn(5, 4, |x, y| (x + 10 * y) as f32);
        assert_eq!(img.mirrored().mirrored(), img);
        assert_eq!(img.mirrored().get(0, 1), img.get(4, 1));
    }

    #[test]
    fn crop_removes_border() {
        let img = GrayImage::from_fn(6, 5, |x, y| (x + 10 * y) as f32);
        let c = img.cropped(2).unwrap();
        assert_eq!((c.width(), c.height()), (2, 1));
        assert_eq!(c.get(0, 0), img.get(2, 2));
        assert!(img.cropped(3).is_err());
    }
}
