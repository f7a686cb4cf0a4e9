//! Dense float images with interleaved channels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channels interleaved.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single channel `c` as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn scaled(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    pub fn add_assign_scaled(&mut self, other: &Image, k: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    /// Stacks an RGB and an alpha image into RGBA.
    pub fn rgba(rgb: &Image, alpha: &Image) -> Result<Image> {
        if rgb.channels != 3
            || alpha.channels != 1
            || rgb.width != alpha.width
            || rgb.height != alpha.height
        {
            return Err(Error::shape(
                "rgba needs a 3-channel and a matching 1-channel image",
            ));
        }
        let mut out = Image::new(rgb.width, rgb.height, 4);
        for i in 0..rgb.width * rgb.height {
            out.data[4 * i..4 * i + 3].copy_from_slice(&rgb.data[3 * i..3 * i + 3]);
            out.data[4 * i + 3] = alpha.data[i];
        }
        Ok(out)
    }

    /// First three channels of an image with at least three channels.
    pub fn rgb_part(&self) -> Result<Image> {
        if self.channels < 3 {
            return Err(Error::shape("image has fewer than three channels"));
        }
        let mut out = Image::new(self.width, self.height, 3);
        for i in 0..self.width * self.height {
            out.data[3 * i..3 * i + 3]
                .copy_from_slice(&self.data[self.channels * i..self.channels * i + 3]);
        }
        Ok(out)
    }
}
