//! Dense images, feature maps and label masks.
//!
//! All maps are row-major and channel-last: the value of channel `c` at
//! `(y, x)` lives at `(y * width + x) * channels + c`.

use crate::error::{Result, VosError};
use crate::num::Real;

/// An 8-bit RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(VosError::dim(format!(
                "image data has {} bytes, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A dense `height x width x channels` real-valued map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(VosError::dim(format!(
                "feature data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a map by evaluating `f(y, x, c)` for every entry.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
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

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn same_spatial(&self, other: &FeatureMap<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel vector of one cell, addressed by flat cell index.
    #[inline]
    pub fn cell(&self, idx: usize) -> &[T] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, idx: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    /// Channels `[start, start + len)` as a new map.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.channels || len == 0 {
            return Err(VosError::arg(format!(
                "channel range {}..{} outside 0..{}",
                start,
                start + len,
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.cells() * len);
        for idx in 0..self.cells() {
            data.extend_from_slice(&self.cell(idx)[start..start + len]);
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: len,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(mut self) -> Self {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self
    }

    /// Elementwise sum; both maps must share every dimension.
    pub fn add(&self, other: &FeatureMap<T>) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
            ..self.clone()
        })
    }

    /// Elementwise difference `self - other`.
    pub fn sub(&self, other: &FeatureMap<T>) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
            ..self.clone()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureMap<T>) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(VosError::dim(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    /// Converts the storage type.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }
}

/// Per-pixel object labels; `0` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_objects: u8,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_objects: u8, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(VosError::dim(format!(
                "mask has {} labels, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_objects) {
            return Err(VosError::data(format!(
                "label {bad} exceeds object count {num_objects}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_objects,
            labels,
        })
    }

    /// Mask whose object count is the largest label present.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let n = labels.iter().copied().max().unwrap_or(0);
        Self::new(height, width, n, labels)
    }

    pub fn background(height: usize, width: usize, num_objects: u8) -> Self {
        Self {
            height,
            width,
            num_objects,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_objects(&self) -> u8 {
        self.num_objects
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        assert!(label <= self.num_objects);
        self.labels[y * self.width + x] = label;
    }

    /// Flat indices of the cells holding `object`.
    pub fn support(&self, object: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == object)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, object: u8) -> usize {
        self.labels.iter().filter(|&&l| l == object).count()
    }
}

/// Channel weights used to modulate a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionCode<T>(pub Vec<T>);

impl<T: Real> ConditionCode<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }
}

/// Stacks maps along the channel axis, in list order.
pub fn channel_concat<T: Real>(maps: &[&FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let first = maps
        .first()
        .ok_or_else(|| VosError::arg("channel_concat needs at least one map"))?;
    if let Some(bad) = maps.iter().find(|m| !m.same_spatial(first)) {
        return Err(VosError::dim(format!(
            "cannot concatenate {}x{} with {}x{}",
            first.height, first.width, bad.height, bad.width
        )));
    }
    let channels: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(first.cells() * channels);
    for idx in 0..first.cells() {
        for m in maps {
            data.extend_from_slice(m.cell(idx));
        }
    }
    Ok(FeatureMap {
        height: first.height,
        width: first.width,
        channels,
        data,
    })
}

/// `out[y, x, m] = w[m] * z[y, x, m]`.
pub fn channelwise_modulate<T: Real>(z: &FeatureMap<T>, w: &ConditionCode<T>) -> Result<FeatureMap<T>> {
    if w.len() != z.channels {
        return Err(VosError::dim(format!(
            "condition code of length {} for a {}-channel map",
            w.len(),
            z.channels
        )));
    }
    let c = z.channels;
    let data = z.data.iter().enumerate().map(|(i, &v)| v * w.0[i % c]).collect();
    Ok(FeatureMap { data, ..z.clone() })
}

/// Keeps `f` where the indicator holds `object`, zero elsewhere.
pub fn elementwise_mask<T: Real>(f: &FeatureMap<T>, indicator: &LabelMask, object: u8) -> Result<FeatureMap<T>> {
    if indicator.height != f.height || indicator.width != f.width {
        return Err(VosError::dim(format!(
            "mask {}x{} vs features {}x{}",
            indicator.height, indicator.width, f.height, f.width
        )));
    }
    if object > indicator.num_objects {
        return Err(VosError::arg(format!(
            "object {object} outside 0..={}",
            indicator.num_objects
        )));
    }
    let mut out = FeatureMap::zeros(f.height, f.width, f.channels);
    for (idx, &l) in indicator.labels.iter().enumerate() {
        if l == object {
            out.cell_mut(idx).copy_from_slice(f.cell(idx));
        }
    }
    Ok(out)
}

/// Nearest-neighbour downsampling anchored at the top-left pixel of each
/// block. Output size is `ceil(h / factor) x ceil(w / factor)`.
pub fn downsample_mask(y: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 {
        return Err(VosError::arg("downsample factor must be at least 1"));
    }
    let oh = y.height.div_ceil(factor);
    let ow = y.width.div_ceil(factor);
    let mut labels = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            labels.push(y.get(oy * factor, ox * factor));
        }
    }
    Ok(LabelMask {
        height: oh,
        width: ow,
        num_objects: y.num_objects,
        labels,
    })
}

/// Block replication back to `out_h x out_w`, the inverse geometry of
/// [`downsample_mask`].
pub fn upsample_mask(y: &LabelMask, factor: usize, out_h: usize, out_w: usize) -> Result<LabelMask> {
    if factor == 0 || out_h.div_ceil(factor) != y.height || out_w.div_ceil(factor) != y.width {
        return Err(VosError::dim(format!(
            "{}x{} mask cannot cover {out_h}x{out_w} at factor {factor}",
            y.height, y.width
        )));
    }
    let labels = (0..out_h * out_w)
        .map(|i| y.get(i / out_w / factor, i % out_w / factor))
        .collect();
    Ok(LabelMask {
        height: out_h,
        width: out_w,
        num_objects: y.num_objects,
        labels,
    })
}

/// Source index pair and blend weight for align-corners-false sampling.
#[inline]
fn bilinear_axis(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, t)
}

/// Bilinear resampling with half-pixel centres (align_corners = false).
pub fn bilinear_resize<T: Real>(f: &FeatureMap<T>, out_h: usize, out_w: usize) -> Result<FeatureMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(VosError::arg("resize target must be non-empty"));
    }
    if f.cells() == 0 {
        return Err(VosError::arg("cannot resize an empty map"));
    }
    if out_h == f.height && out_w == f.width {
        return Ok(f.clone());
    }
    let c = f.channels;
    let cols: Vec<_> = (0..out_w).map(|ox| bilinear_axis(ox, f.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, ty) = bilinear_axis(oy, f.height, out_h);
        for &(x0, x1, tx) in &cols {
            let a = f.cell(y0 * f.width + x0);
            let b = f.cell(y0 * f.width + x1);
            let d = f.cell(y1 * f.width + x0);
            let e = f.cell(y1 * f.width + x1);
            for ch in 0..c {
                let top = a[ch].widen() * (1.0 - tx) + b[ch].widen() * tx;
                let bot = d[ch].widen() * (1.0 - tx) + e[ch].widen() * tx;
                data.push(T::narrow(top * (1.0 - ty) + bot * ty));
            }
        }
    }
    Ok(FeatureMap {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// Per-channel mean over all cells, accumulated in `f64`.
pub fn global_avg_pool<T: Real>(z: &FeatureMap<T>) -> Result<ConditionCode<T>> {
    if z.cells() == 0 || z.channels == 0 {
        return Err(VosError::arg("cannot pool an empty map"));
    }
    let mut acc = vec![0f64; z.channels];
    for idx in 0..z.cells() {
        for (a, v) in acc.iter_mut().zip(z.cell(idx)) {
            *a += v.widen();
        }
    }
    let n = z.cells() as f64;
    Ok(ConditionCode(acc.into_iter().map(|a| T::narrow(a / n)).collect()))
}
