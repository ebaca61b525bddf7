use crate::error::{Error, Result};
use crate::real::Real;

/// Interleaved RGB image, row-major, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Per-pixel RGB gradient of a scalar with respect to an image.
pub type GradBuffer<T> = ImageBuffer<T>;

impl<T: Real> ImageBuffer<T> {
    pub fn filled(width: usize, height: usize, rgb: [T; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [T::zero(); 3])
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape<U>(&self, other: &ImageBuffer<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}
