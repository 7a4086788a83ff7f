//! RGB image tensors with values in `[0, 1]`.

use std::path::Path;

use ndarray::{s, Array3};

use crate::error::{IqaError, Result};

/// Tolerance on the `[0, 1]` range check, absorbing rounding from resampling.
const RANGE_SLACK: f64 = 1e-9;

/// A `3 x height x width` image in RGB channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(IqaError::validation(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(IqaError::validation("image has zero extent"));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(IqaError::validation(format!(
                "image contains non-finite value {v}"
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|&&v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v))
        {
            return Err(IqaError::validation(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image by evaluating `f(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, height, width), f))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Copies the `size x size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(IqaError::validation(format!(
                "crop {height}x{width}+{top}+{left} exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self {
            data: self
                .data
                .slice(s![.., top..top + height, left..left + width])
                .to_owned(),
        })
    }

    /// Decodes a PNG, JPEG or BMP file; 8-bit samples are divided by 255.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| IqaError::io(path, e))?;
        let decoded = image::load_from_memory(&bytes).map_err(|e| IqaError::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::new(data)
    }

    /// Writes an 8-bit PNG, rounding to the nearest code value.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = (self.height() as u32, self.width() as u32);
        let buf = image::RgbImage::from_fn(w, h, |x, y| {
            let px = |c: usize| {
                (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => IqaError::io(path, io),
                other => IqaError::ImageDecode {
                    path: path.to_path_buf(),
                    message: other.to_string(),
                },
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(ImageTensor::new(Array3::zeros((1, 4, 4))).is_err());
        let mut nan = Array3::zeros((3, 4, 4));
        nan[[0, 1, 1]] = f64::NAN;
        assert!(ImageTensor::new(nan).is_err());
        assert!(ImageTensor::filled(4, 4, 1.5).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_code_values() {
        let img = ImageTensor::from_fn(5, 7, |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_bounds() {
        let img = ImageTensor::filled(10, 12, 0.5).unwrap();
        assert_eq!(img.crop(2, 3, 8, 9).unwrap().height(), 8);
        assert!(img.crop(3, 0, 8, 4).is_err());
    }
}
