//! Floating-point image buffers tagged with color state and geometry.

use std::path::Path;

use ::image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorState {
    Srgb,
    LinearRgb,
    MosaicedRaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    PerspectiveUnfolded,
    Annular,
}

/// Row-major, channel-interleaved `height x width x channels` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    pub color: ColorState,
    pub geometry: Geometry,
}

impl ImagePlane {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        color: ColorState,
        geometry: Geometry,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images carry 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            color,
            geometry,
        })
    }

    pub fn filled(
        height: usize,
        width: usize,
        channels: usize,
        value: f64,
        color: ColorState,
        geometry: Geometry,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
            color,
            geometry,
        )
    }

    /// Builds an image by evaluating `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        color: ColorState,
        geometry: Geometry,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data, color, geometry)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Copy of one channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Replaces the buffer while keeping the tags; used by stage functions.
    pub(crate) fn with_data(&self, data: Vec<f64>, channels: usize, color: ColorState) -> Self {
        debug_assert_eq!(data.len(), self.height * self.width * channels);
        Self {
            height: self.height,
            width: self.width,
            channels,
            data,
            color,
            geometry: self.geometry,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Luminance plane (Rec. 709 weights) or the single channel.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
            .collect()
    }

    /// Quantizes to 8 bits per sample (round half up) and back.
    pub fn quantized_u8(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| f64::from(to_u8(v)) / 255.0)
            .collect();
        self.with_data(data, self.channels, self.color)
    }

    pub fn from_dynamic(img: &::image::DynamicImage, color: ColorState) -> Result<(Self, bool)> {
        let grayscale = !img.color().has_color();
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        let plane = Self::new(
            h as usize,
            w as usize,
            3,
            data,
            color,
            Geometry::PerspectiveUnfolded,
        )?;
        Ok((plane, grayscale))
    }

    /// Loads an 8- or 16-bit image file as a 3-channel sRGB plane.
    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?;
        let is_16 = matches!(
            img.color(),
            ::image::ColorType::Rgb16 | ::image::ColorType::L16 | ::image::ColorType::Rgba16
        );
        if is_16 {
            let rgb = img.to_rgb16();
            let (w, h) = rgb.dimensions();
            let data = rgb
                .as_raw()
                .iter()
                .map(|&v| f64::from(v) / 65535.0)
                .collect();
            return Self::new(
                h as usize,
                w as usize,
                3,
                data,
                ColorState::Srgb,
                Geometry::PerspectiveUnfolded,
            );
        }
        Ok(Self::from_dynamic(&img, ColorState::Srgb)?.0)
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        if self.channels == 3 {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path)?;
        } else {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path)?;
        }
        Ok(())
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let words: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16)
            .collect();
        if self.channels == 3 {
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, words)
                .expect("buffer size checked at construction")
                .save(path)?;
        } else {
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, words)
                .expect("buffer size checked at construction")
                .save(path)?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        let err = ImagePlane::new(
            2,
            2,
            3,
            vec![0.0; 5],
            ColorState::Srgb,
            Geometry::PerspectiveUnfolded,
        );
        assert!(err.is_err());
        let err = ImagePlane::new(
            2,
            2,
            2,
            vec![0.0; 8],
            ColorState::Srgb,
            Geometry::PerspectiveUnfolded,
        );
        assert!(err.is_err());
    }

    #[test]
    fn png8_round_trip_is_exact_on_quantized_data() {
        let img = ImagePlane::from_fn(
            5,
            7,
            3,
            ColorState::Srgb,
            Geometry::PerspectiveUnfolded,
            |y, x, c| ((y * 31 + x * 17 + c * 5) % 256) as f64 / 255.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png8(&p).unwrap();
        let back = ImagePlane::load(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
