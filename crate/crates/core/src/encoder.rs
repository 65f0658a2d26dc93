//! Deterministic stand-in for a learned backbone.
//!
//! Per pixel the encoder computes nine handcrafted channels (RGB scaled to
//! `[0, 1]`, then `|Gx|` and `|Gy|` Sobel responses of each colour channel
//! scaled by `1 / (4 * 255)`), average-pools them over 4x4 blocks, and runs
//! a short stack of seeded 3x3 convolutions with ReLU. A parallel 3x3
//! convolution over the pooled channels yields the low-level features.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::layers::{conv_specs, reflect101, Conv2d};
use crate::num::Real;
use crate::tensor::{FeatureMap, Image};
use crate::weights::{init_weights, ParamSpec, WeightBundle};

pub const STRIDE: usize = 4;
pub const HANDCRAFTED_CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub output_channels: usize,
    pub low_level_channels: usize,
    pub seed: u64,
    pub num_random_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            output_channels: 32,
            low_level_channels: 8,
            seed: 0,
            num_random_layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_channels < 4 {
            return Err(VosError::config("encoder output_channels must be at least 4"));
        }
        if self.low_level_channels == 0 {
            return Err(VosError::config("encoder low_level_channels must be positive"));
        }
        if self.num_random_layers == 0 {
            return Err(VosError::config("encoder needs at least one random layer"));
        }
        Ok(())
    }

    pub fn param_table(&self) -> Vec<ParamSpec> {
        let mut t = conv_specs("encoder.conv0", HANDCRAFTED_CHANNELS, self.output_channels, 3);
        for i in 1..self.num_random_layers {
            t.extend(conv_specs(
                &format!("encoder.conv{i}"),
                self.output_channels,
                self.output_channels,
                3,
            ));
        }
        t.extend(conv_specs(
            "encoder.low",
            HANDCRAFTED_CHANNELS,
            self.low_level_channels,
            3,
        ));
        t
    }

    /// Encoder arrays drawn from `self.seed`.
    pub fn synthesize_weights(&self) -> Result<WeightBundle> {
        init_weights(self.seed, &self.param_table())
    }
}

/// Feature grid size for an image side of `n` pixels.
pub fn feature_size(n: usize) -> usize {
    n.div_ceil(STRIDE)
}

/// The pooled handcrafted channels, before any learned-style layer.
pub fn handcrafted_features<T: Real>(x: &Image) -> Result<FeatureMap<T>> {
    let (h, w) = (x.height(), x.width());
    if h == 0 || w == 0 {
        return Err(VosError::arg("cannot encode an empty image"));
    }
    let (fh, fw) = (feature_size(h), feature_size(w));
    let mut acc = vec![0f64; fh * fw * HANDCRAFTED_CHANNELS];
    let px = |y: isize, xx: isize, c: usize| -> f64 {
        let yy = reflect101(y, h);
        let xr = reflect101(xx, w);
        x.data()[(yy * w + xr) * 3 + c] as f64
    };
    for y in 0..h {
        for xx in 0..w {
            let (yi, xi) = (y as isize, xx as isize);
            let cell = ((y / STRIDE) * fw + xx / STRIDE) * HANDCRAFTED_CHANNELS;
            for c in 0..3 {
                let gx = (px(yi - 1, xi + 1, c) + 2.0 * px(yi, xi + 1, c) + px(yi + 1, xi + 1, c))
                    - (px(yi - 1, xi - 1, c) + 2.0 * px(yi, xi - 1, c) + px(yi + 1, xi - 1, c));
                let gy = (px(yi + 1, xi - 1, c) + 2.0 * px(yi + 1, xi, c) + px(yi + 1, xi + 1, c))
                    - (px(yi - 1, xi - 1, c) + 2.0 * px(yi - 1, xi, c) + px(yi - 1, xi + 1, c));
                acc[cell + c] += px(yi, xi, c) / 255.0;
                acc[cell + 3 + c] += gx.abs() / (4.0 * 255.0);
                acc[cell + 6 + c] += gy.abs() / (4.0 * 255.0);
            }
        }
    }
    let mut data = Vec::with_capacity(acc.len());
    for cy in 0..fh {
        let rows = (h - cy * STRIDE).min(STRIDE);
        for cx in 0..fw {
            let cols = (w - cx * STRIDE).min(STRIDE);
            let n = (rows * cols) as f64;
            let base = (cy * fw + cx) * HANDCRAFTED_CHANNELS;
            for v in &acc[base..base + HANDCRAFTED_CHANNELS] {
                data.push(T::narrow(v / n));
            }
        }
    }
    FeatureMap::new(fh, fw, HANDCRAFTED_CHANNELS, data)
}

/// Encoder with its layers materialised for repeated use.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    layers: Vec<Conv2d<T>>,
    low: Conv2d<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, weights: &WeightBundle) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.num_random_layers);
        layers.push(Conv2d::load(
            weights,
            "encoder.conv0",
            HANDCRAFTED_CHANNELS,
            cfg.output_channels,
            3,
        )?);
        for i in 1..cfg.num_random_layers {
            layers.push(Conv2d::load(
                weights,
                &format!("encoder.conv{i}"),
                cfg.output_channels,
                cfg.output_channels,
                3,
            )?);
        }
        let low = Conv2d::load(weights, "encoder.low", HANDCRAFTED_CHANNELS, cfg.low_level_channels, 3)?;
        Ok(Self { layers, low })
    }

    /// Returns `(features, low_level)`, both at stride 4.
    pub fn encode(&self, x: &Image) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let base = handcrafted_features::<T>(x)?;
        let low = self.low.forward(&base)?.relu();
        let mut f = base;
        for layer in &self.layers {
            f = layer.forward(&f)?.relu();
        }
        Ok((f, low))
    }
}

/// One-shot encode; builds the layers from `weights` each call.
pub fn encode<T: Real>(
    x: &Image,
    cfg: &EncoderConfig,
    weights: &WeightBundle,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    Encoder::new(cfg, weights)?.encode(x)
}
