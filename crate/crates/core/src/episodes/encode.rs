//! Deterministic, training-free encoders from small raster images to features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::FeatureMap;
use crate::{Error, Result};

/// Row-major `height x width x channels` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Channel values at a position, with coordinates clamped to the border.
    pub fn clamped(&self, row: isize, col: isize) -> &[f64] {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        let start = (r * self.width + c) * self.channels;
        &self.values[start..start + self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Encoder {
    /// Channels become feature dimensions unchanged.
    #[default]
    Identity,
    /// Fixed random linear map of each `kernel x kernel` neighborhood to
    /// `out_dim` channels. Borders replicate the edge pixels.
    Projection { kernel: usize, out_dim: usize, seed: u64 },
}

impl Encoder {
    pub fn projection(out_dim: usize, seed: u64) -> Self {
        Encoder::Projection {
            kernel: 3,
            out_dim,
            seed,
        }
    }

    /// Projection matrix, `out_dim` rows of `kernel * kernel * channels`
    /// weights ordered by (row offset, column offset, channel).
    pub fn projection_weights(&self, channels: usize) -> Option<Vec<f64>> {
        match *self {
            Encoder::Identity => None,
            Encoder::Projection { kernel, out_dim, seed } => {
                let fan_in = kernel * kernel * channels;
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(
                    (0..out_dim * fan_in)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
        }
    }
}

pub fn encode(image: &Image, encoder: &Encoder) -> Result<FeatureMap> {
    match *encoder {
        Encoder::Identity => FeatureMap::new(image.height, image.width, image.channels, image.values.clone()),
        Encoder::Projection { kernel, out_dim, .. } => {
            if kernel == 0 || kernel % 2 == 0 || out_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "projection needs an odd kernel and positive out_dim, got kernel {kernel}, out_dim {out_dim}"
                )));
            }
            let weights = encoder.projection_weights(image.channels).unwrap_or_default();
            let half = (kernel / 2) as isize;
            let fan_in = kernel * kernel * image.channels;
            let mut patch = Vec::with_capacity(fan_in);
            FeatureMap::from_pixels(image.height, image.width, out_dim, |r, c| {
                patch.clear();
                for dr in -half..=half {
                    for dc in -half..=half {
                        patch.extend_from_slice(image.clamped(r as isize + dr, c as isize + dc));
                    }
                }
                weights
                    .chunks_exact(fan_in)
                    .map(|row| row.iter().zip(&patch).map(|(w, x)| w * x).sum())
                    .collect()
            })
        }
    }
}
