use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Height x width x channels image, row-major with interleaved channels.
/// Pixel values live in `[0, 1]` for real data; reconstructions may leave it.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("image", "zero-sized image"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: S) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copy with every pixel clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|&v| v.max(S::zero()).min(S::one()))
                .collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }
}
