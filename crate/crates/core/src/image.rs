//! Channel-major image tensors carrying their normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel normalization applied when pixels are loaded: `(x/255 - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn uniform(channels: usize, mean: f32, std: f32) -> Self {
        Self {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} channels, got mean {} / std {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::uniform(3, 0.5, 0.5)
    }
}

/// A normalized image stored as `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pub data: Tensor<T>,
    pub normalization: Normalization,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Tensor<T>, normalization: Normalization) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "image tensor must be C×H×W, got {:?}",
                data.shape()
            )));
        }
        normalization.validate(data.shape()[0])?;
        Ok(Self {
            data,
            normalization,
        })
    }

    /// Builds a normalized image from interleaved 8-bit RGB(-like) pixels.
    pub fn from_interleaved_u8(
        width: usize,
        height: usize,
        channels: usize,
        pixels: &[u8],
        normalization: Normalization,
    ) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        normalization.validate(channels)?;
        let data = Tensor::from_fn(&[channels, height, width], |k| {
            let c = k / (height * width);
            let yx = k % (height * width);
            let raw = pixels[yx * channels + c] as f64 / 255.0;
            T::lit((raw - normalization.mean[c] as f64) / normalization.std[c] as f64)
        });
        Ok(Self {
            data,
            normalization,
        })
    }

    /// Undoes normalization and quantizes to interleaved 8-bit pixels.
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut out = vec![0u8; c * h * w];
        for ch in 0..c {
            let (m, s) = (self.normalization.mean[ch] as f64, self.normalization.std[ch] as f64);
            for yx in 0..h * w {
                let v = self.data.data()[ch * h * w + yx].as_f64() * s + m;
                out[yx * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Mean of each channel, summed in row-major order.
    pub fn channel_means(&self) -> Vec<T> {
        let plane = self.height() * self.width();
        let n = T::from_usize(plane).unwrap();
        self.data
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v) / n)
            .collect()
    }

    /// Image of the same shape filled with each channel's mean.
    pub fn channel_mean_image(&self) -> Self {
        let means = self.channel_means();
        let plane = self.height() * self.width();
        Self {
            data: Tensor::from_fn(self.data.shape(), |k| means[k / plane]),
            normalization: self.normalization.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: Tensor::zeros(self.data.shape()),
            normalization: self.normalization.clone(),
        }
    }

    pub fn with_data(&self, data: Tensor<T>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::Dimension {
                op: "image data",
                left: self.data.shape().to_vec(),
                right: data.shape().to_vec(),
            });
        }
        Ok(Self {
            data,
            normalization: self.normalization.clone(),
        })
    }

    /// Value range `max - min` over all channels.
    pub fn value_range(&self) -> T {
        let (lo, hi) = self
            .data
            .data()
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            data: self.data.cast(),
            normalization: self.normalization.clone(),
        }
    }
}
