//! Convolution and fully connected layers backed by a [`WeightBundle`].
//!
//! Weights are stored as `f32` in the bundle and converted to the map's
//! scalar type when a layer is built. Convolutions use reflect padding
//! (the edge sample is not repeated).

use rayon::prelude::*;

use crate::error::{Result, VosError};
use crate::num::Real;
use crate::tensor::{ConditionCode, FeatureMap};
use crate::weights::{Param, ParamSpec, WeightBundle};

/// Maps a possibly out-of-range index into `0..n` by mirror reflection
/// about the first and last samples.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Parameter specs for a `k x k` convolution named `prefix`.
pub fn conv_specs(prefix: &str, in_ch: usize, out_ch: usize, k: usize) -> Vec<ParamSpec> {
    let fan_in = in_ch * k * k;
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![out_ch, in_ch, k, k], fan_in),
        ParamSpec::new(format!("{prefix}.bias"), vec![out_ch], fan_in),
    ]
}

/// Parameter specs for a dense layer named `prefix`.
pub fn linear_specs(prefix: &str, in_dim: usize, out_dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![out_dim, in_dim], in_dim),
        ParamSpec::new(format!("{prefix}.bias"), vec![out_dim], in_dim),
    ]
}

fn fetch<'a>(bundle: &'a WeightBundle, path: &str, shape: &[usize]) -> Result<&'a Param> {
    let p = bundle.get(path)?;
    if p.shape != shape {
        return Err(VosError::config(format!(
            "weight array `{path}` has shape {:?}, expected {:?}",
            p.shape, shape
        )));
    }
    Ok(p)
}

/// Square convolution with odd kernel size, stride 1, reflect padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    // laid out [ky][kx][out][in] so each tap is a contiguous dot product
    taps: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn load(bundle: &WeightBundle, prefix: &str, in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        let w = fetch(bundle, &format!("{prefix}.weight"), &[out_ch, in_ch, k, k])?;
        let b = fetch(bundle, &format!("{prefix}.bias"), &[out_ch])?;
        Self::from_oihw(&w.data, &b.data, in_ch, out_ch, k)
    }

    /// Builds from weights in `[out][in][ky][kx]` order.
    pub fn from_oihw(weight: &[f32], bias: &[f32], in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) || weight.len() != out_ch * in_ch * k * k || bias.len() != out_ch {
            return Err(VosError::config("inconsistent convolution weights"));
        }
        let mut taps = vec![T::zero(); weight.len()];
        for o in 0..out_ch {
            for i in 0..in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = ((o * in_ch + i) * k + ky) * k + kx;
                        let dst = ((ky * k + kx) * out_ch + o) * in_ch + i;
                        taps[dst] = T::from_f32_lossless(weight[src]);
                    }
                }
            }
        }
        Ok(Self {
            in_ch,
            out_ch,
            k,
            taps,
            bias: bias.iter().map(|&v| T::from_f32_lossless(v)).collect(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.in_ch {
            return Err(VosError::dim(format!(
                "convolution expects {} channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let r = (self.k / 2) as isize;
        let oc = self.out_ch;
        let ic = self.in_ch;
        let mut out = vec![T::zero(); h * w * oc];
        out.par_chunks_mut(w * oc).enumerate().for_each(|(y, row)| {
            for xx in 0..w {
                let acc = &mut row[xx * oc..(xx + 1) * oc];
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.k {
                    let sy = reflect101(y as isize + ky as isize - r, h);
                    for kx in 0..self.k {
                        let sx = reflect101(xx as isize + kx as isize - r, w);
                        let src = x.cell(sy * w + sx);
                        let base = (ky * self.k + kx) * oc * ic;
                        for (o, a) in acc.iter_mut().enumerate() {
                            let wt = &self.taps[base + o * ic..base + (o + 1) * ic];
                            let mut s = T::zero();
                            for (wv, xv) in wt.iter().zip(src) {
                                s = s + *wv * *xv;
                            }
                            *a = *a + s;
                        }
                    }
                }
            }
        });
        FeatureMap::new(h, w, oc, out)
    }
}

/// Dense layer `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn load(bundle: &WeightBundle, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = fetch(bundle, &format!("{prefix}.weight"), &[out_dim, in_dim])?;
        let b = fetch(bundle, &format!("{prefix}.bias"), &[out_dim])?;
        Ok(Self {
            in_dim,
            out_dim,
            weight: w.data.iter().map(|&v| T::from_f32_lossless(v)).collect(),
            bias: b.data.iter().map(|&v| T::from_f32_lossless(v)).collect(),
        })
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim {
            return Err(VosError::dim(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).fold(self.bias[o], |s, (w, v)| s + *w * *v)
            })
            .collect())
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    first: Linear<T>,
    second: Linear<T>,
}

impl<T: Real> Mlp<T> {
    pub fn specs(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Vec<ParamSpec> {
        let mut v = linear_specs(&format!("{prefix}.0"), in_dim, hidden);
        v.extend(linear_specs(&format!("{prefix}.1"), hidden, out_dim));
        v
    }

    pub fn load(bundle: &WeightBundle, prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::load(bundle, &format!("{prefix}.0"), in_dim, hidden)?,
            second: Linear::load(bundle, &format!("{prefix}.1"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, x: &ConditionCode<T>) -> Result<ConditionCode<T>> {
        let h: Vec<T> = self
            .first
            .forward(x.values())?
            .into_iter()
            .map(|v| v.max(T::zero()))
            .collect();
        Ok(ConditionCode(self.second.forward(&h)?))
    }
}
