//! Discriminative object calibration: condition codes computed from each
//! object's own map, an order-invariant aggregate of every object's map and
//! the object's reference proxies, then used to modulate a shared decoder.
//!
//! Stage indices are 1-based throughout, matching [`CascadeConfig`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{elementwise_max, entry_references, slot_layout};
use crate::error::{Result, VosError};
use crate::layers::{conv_specs, Conv2d, Mlp};
use crate::num::Real;
use crate::proxy::ProxySet;
use crate::tensor::{
    bilinear_resize, channel_concat, channelwise_modulate, global_avg_pool, ConditionCode, FeatureMap, LabelMask,
};
use crate::weights::{init_weights, ParamSpec, WeightBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub num_stages: usize,
    pub beta: f64,
    /// Stages whose output is bilinearly upsampled by 2.
    pub upsample_stages: Vec<usize>,
    /// Stage that fuses the encoder's low-level features.
    pub lowlevel_stage: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self::with_stages(6)
    }
}

impl CascadeConfig {
    /// Default layout for `n` stages: upsample after stages `n-2` and `n-1`,
    /// low-level fusion at `n-1`.
    pub fn with_stages(n: usize) -> Self {
        let upsample_stages = [n.saturating_sub(2), n.saturating_sub(1)]
            .into_iter()
            .filter(|&s| s >= 1)
            .collect::<Vec<_>>();
        let mut upsample_stages = upsample_stages;
        upsample_stages.dedup();
        Self {
            num_stages: n,
            beta: 0.3,
            upsample_stages,
            lowlevel_stage: n.saturating_sub(1).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(VosError::config("cascade needs at least one stage"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(VosError::config(format!("beta {} outside [0, 1)", self.beta)));
        }
        let range = 1..=self.num_stages;
        if let Some(s) = self.upsample_stages.iter().find(|s| !range.contains(s)) {
            return Err(VosError::config(format!(
                "upsample stage {s} outside 1..={}",
                self.num_stages
            )));
        }
        if !range.contains(&self.lowlevel_stage) {
            return Err(VosError::config(format!(
                "low-level stage {} outside 1..={}",
                self.lowlevel_stage, self.num_stages
            )));
        }
        Ok(())
    }

    /// Resolution multiplier after stage `l`.
    pub fn scale_after(&self, l: usize) -> usize {
        1 << self.upsample_stages.iter().filter(|&&s| s <= l).count()
    }
}

/// Channel widths the cascade is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CascadeWidths {
    pub proto_channels: usize,
    pub proxy_channels: usize,
    pub low_level_channels: usize,
}

fn stage_prefix(l: usize) -> String {
    format!("cascade.{l}")
}

/// Scale applied to freshly drawn arrays that close a residual branch
/// (decoder `conv2`, fusion MLP output layer). Without trained weights the
/// cubic dependence of `m * c` on `m` diverges over six stages otherwise.
pub const RESIDUAL_SCALE: f32 = 0.1;

fn closes_residual(path: &str) -> bool {
    path.starts_with("cascade.") && (path.contains(".dec.conv2.") || path.contains(".fuse.1."))
}

/// Scales the residual-closing cascade arrays of a seeded bundle by
/// [`RESIDUAL_SCALE`].
pub fn quiet_residuals(bundle: &mut WeightBundle) {
    let paths: Vec<String> = bundle
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| closes_residual(k))
        .collect();
    for p in paths {
        if let Ok(param) = bundle.get_mut(&p) {
            param.data.iter_mut().for_each(|v| *v *= RESIDUAL_SCALE);
        }
    }
}

/// Seeded cascade weights, with [`quiet_residuals`] applied.
pub fn synthesize_cascade_weights(seed: u64, widths: &CascadeWidths, cfg: &CascadeConfig) -> Result<WeightBundle> {
    let mut b = init_weights(seed, &cascade_param_table(widths, cfg))?;
    quiet_residuals(&mut b);
    Ok(b)
}

pub fn cascade_param_table(widths: &CascadeWidths, cfg: &CascadeConfig) -> Vec<ParamSpec> {
    let cm = widths.proto_channels;
    let mut t = Vec::new();
    for l in 1..=cfg.num_stages {
        let p = stage_prefix(l);
        t.extend(ConditioningLayer::<f32>::specs(&format!("{p}.cl1"), cm, cm));
        t.extend(ConditioningLayer::<f32>::specs(&format!("{p}.cl2"), cm, cm));
        t.extend(ConditioningLayer::<f32>::specs(
            &format!("{p}.cl3"),
            widths.proxy_channels,
            cm,
        ));
        t.extend(conv_specs(&format!("{p}.agg"), cm, cm, 1));
        t.extend(Mlp::<f32>::specs(&format!("{p}.fuse"), 3 * cm, cm, cm));
        t.extend(conv_specs(&format!("{p}.dec.conv1"), cm, cm, 3));
        t.extend(conv_specs(&format!("{p}.dec.conv2"), cm, cm, 3));
        if l == cfg.lowlevel_stage {
            t.extend(conv_specs(
                &format!("{p}.lowlevel"),
                cm + widths.low_level_channels,
                cm,
                1,
            ));
        }
    }
    t.extend(conv_specs("cascade.head", cm, 1, 1));
    t
}

/// Zeroes values below the `floor(beta * M)`-th smallest one (1-indexed).
/// A rank of zero disables the gate.
pub fn confidence_gate<T: Real>(values: &FeatureMap<T>, beta: f64) -> Result<FeatureMap<T>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(VosError::arg(format!("beta {beta} outside [0, 1)")));
    }
    let m = values.data().len();
    let rank = (beta * m as f64 + 1e-9).floor() as usize;
    if rank == 0 {
        return Ok(values.clone());
    }
    let mut sorted = values.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let threshold = sorted[rank - 1];
    Ok(values.map(|v| if v >= threshold { v } else { T::zero() }))
}

/// Confidence-gated global pooling followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct ConditioningLayer<T> {
    phi: Conv2d<T>,
    mlp: Mlp<T>,
}

impl<T: Real> ConditioningLayer<T> {
    pub fn specs(prefix: &str, in_ch: usize, out: usize) -> Vec<ParamSpec> {
        let mut t = conv_specs(&format!("{prefix}.phi"), in_ch, 1, 1);
        t.extend(Mlp::<f32>::specs(&format!("{prefix}.mlp"), in_ch, out, out));
        t
    }

    pub fn load(bundle: &WeightBundle, prefix: &str, in_ch: usize, out: usize) -> Result<Self> {
        Ok(Self {
            phi: Conv2d::load(bundle, &format!("{prefix}.phi"), in_ch, 1, 1)?,
            mlp: Mlp::load(bundle, &format!("{prefix}.mlp"), in_ch, out, out)?,
        })
    }

    pub fn forward(&self, z: &FeatureMap<T>, beta: f64) -> Result<ConditionCode<T>> {
        let confidence = self.phi.forward(z)?.relu();
        let gate = confidence_gate(&confidence, beta)?;
        let c = z.channels();
        let mut weighted = z.clone();
        for (i, v) in weighted.data_mut().iter_mut().enumerate() {
            *v = *v * gate.data()[i / c];
        }
        self.mlp.forward(&global_avg_pool(&weighted)?)
    }
}

/// Free-function form of [`ConditioningLayer::forward`].
pub fn conditioning_layer<T: Real>(
    z: &FeatureMap<T>,
    layer: &ConditioningLayer<T>,
    beta: f64,
) -> Result<ConditionCode<T>> {
    layer.forward(z, beta)
}

/// Elementwise max over every map followed by a 1x1 convolution.
pub fn aggregate_all<T: Real>(maps: &[FeatureMap<T>], agg: &Conv2d<T>) -> Result<FeatureMap<T>> {
    let first = maps
        .first()
        .ok_or_else(|| VosError::arg("aggregation needs at least one map"))?;
    let mut pooled = first.clone();
    for m in &maps[1..] {
        pooled.check_same_shape(m)?;
        for (p, v) in pooled.data_mut().iter_mut().zip(m.data()) {
            *p = p.max(*v);
        }
    }
    agg.forward(&pooled)
}

/// `A({m_j}) - m_target`, with `A` the max-then-1x1-conv aggregation.
pub fn aggregate_others<T: Real>(maps: &[FeatureMap<T>], target: usize, agg: &Conv2d<T>) -> Result<FeatureMap<T>> {
    let own = maps
        .get(target)
        .ok_or_else(|| VosError::arg(format!("target {target} outside {} maps", maps.len())))?;
    aggregate_all(maps, agg)?.sub(own)
}

/// Weights of one calibrator + decoder stage.
#[derive(Clone, Debug)]
pub struct StageWeights<T> {
    pub cl1: ConditioningLayer<T>,
    pub cl2: ConditioningLayer<T>,
    pub cl3: ConditioningLayer<T>,
    pub agg: Conv2d<T>,
    pub fuse: Mlp<T>,
    pub dec1: Conv2d<T>,
    pub dec2: Conv2d<T>,
    pub lowlevel: Option<Conv2d<T>>,
}

impl<T: Real> StageWeights<T> {
    pub fn load(bundle: &WeightBundle, l: usize, widths: &CascadeWidths, cfg: &CascadeConfig) -> Result<Self> {
        let p = stage_prefix(l);
        let cm = widths.proto_channels;
        Ok(Self {
            cl1: ConditioningLayer::load(bundle, &format!("{p}.cl1"), cm, cm)?,
            cl2: ConditioningLayer::load(bundle, &format!("{p}.cl2"), cm, cm)?,
            cl3: ConditioningLayer::load(bundle, &format!("{p}.cl3"), widths.proxy_channels, cm)?,
            agg: Conv2d::load(bundle, &format!("{p}.agg"), cm, cm, 1)?,
            fuse: Mlp::load(bundle, &format!("{p}.fuse"), 3 * cm, cm, cm)?,
            dec1: Conv2d::load(bundle, &format!("{p}.dec.conv1"), cm, cm, 3)?,
            dec2: Conv2d::load(bundle, &format!("{p}.dec.conv2"), cm, cm, 3)?,
            lowlevel: if l == cfg.lowlevel_stage {
                Some(Conv2d::load(
                    bundle,
                    &format!("{p}.lowlevel"),
                    cm + widths.low_level_channels,
                    cm,
                    1,
                )?)
            } else {
                None
            },
        })
    }
}

/// Condition code of `target` from every object's current map and the
/// target's proxy summary (already at the maps' resolution).
pub fn discriminative_condition_code<T: Real>(
    maps: &[FeatureMap<T>],
    proxy_summary: &FeatureMap<T>,
    target: usize,
    stage: &StageWeights<T>,
    beta: f64,
) -> Result<ConditionCode<T>> {
    let others = aggregate_others(maps, target, &stage.agg)?;
    code_from_parts(&maps[target], &others, proxy_summary, stage, beta)
}

fn code_from_parts<T: Real>(
    own: &FeatureMap<T>,
    others: &FeatureMap<T>,
    proxy_summary: &FeatureMap<T>,
    stage: &StageWeights<T>,
    beta: f64,
) -> Result<ConditionCode<T>> {
    let mut joined = stage.cl1.forward(own, beta)?.0;
    joined.extend(stage.cl2.forward(others, beta)?.0);
    joined.extend(stage.cl3.forward(proxy_summary, beta)?.0);
    stage.fuse.forward(&ConditionCode(joined))
}

/// `theta_dec(m + m * c)`, with optional low-level fusion before the
/// decoder and x2 upsampling after it.
pub fn conditional_decode<T: Real>(
    m_in: &FeatureMap<T>,
    c: &ConditionCode<T>,
    stage: &StageWeights<T>,
    cfg: &CascadeConfig,
    l: usize,
    low_level: Option<&FeatureMap<T>>,
) -> Result<FeatureMap<T>> {
    let mut h = m_in.add(&channelwise_modulate(m_in, c)?)?;
    match (l == cfg.lowlevel_stage, low_level, &stage.lowlevel) {
        (true, Some(low), Some(fuse)) => {
            let low = bilinear_resize(low, h.height(), h.width())?;
            h = fuse.forward(&channel_concat(&[&h, &low])?)?;
        }
        (true, None, _) => {
            return Err(VosError::arg(format!("stage {l} requires low-level features")));
        }
        (true, Some(_), None) => {
            return Err(VosError::config(format!("stage {l} has no low-level fusion weights")));
        }
        (false, Some(_), _) => {
            return Err(VosError::arg(format!("stage {l} does not take low-level features")));
        }
        (false, None, _) => {}
    }
    let residual = stage.dec2.forward(&stage.dec1.forward(&h)?.relu())?;
    let out = h.add(&residual)?;
    if cfg.upsample_stages.contains(&l) {
        bilinear_resize(&out, out.height() * 2, out.width() * 2)
    } else {
        Ok(out)
    }
}

/// All stage weights plus the per-object scoring head.
#[derive(Clone, Debug)]
pub struct Cascade<T> {
    cfg: CascadeConfig,
    widths: CascadeWidths,
    stages: Vec<StageWeights<T>>,
    head: Conv2d<T>,
}

impl<T: Real> Cascade<T> {
    pub fn new(cfg: CascadeConfig, widths: CascadeWidths, bundle: &WeightBundle) -> Result<Self> {
        cfg.validate()?;
        let stages = (1..=cfg.num_stages)
            .map(|l| StageWeights::load(bundle, l, &widths, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::load(bundle, "cascade.head", widths.proto_channels, 1, 1)?;
        Ok(Self {
            cfg,
            widths,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.cfg
    }

    pub fn widths(&self) -> &CascadeWidths {
        &self.widths
    }

    /// Refines every object's proto-map through all stages and returns one
    /// score map per object at `out_h x out_w`.
    ///
    /// `proto_maps[i]` and `proxy_summaries[i]` belong to object `i`
    /// (background first); summaries are at proto-map resolution.
    pub fn calibrate(
        &self,
        proto_maps: &[FeatureMap<T>],
        proxy_summaries: &[FeatureMap<T>],
        low_level: &FeatureMap<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Vec<FeatureMap<T>>> {
        if proto_maps.is_empty() || proto_maps.len() != proxy_summaries.len() {
            return Err(VosError::arg(format!(
                "{} proto-maps for {} proxy summaries",
                proto_maps.len(),
                proxy_summaries.len()
            )));
        }
        let mut maps = proto_maps.to_vec();
        for (l, stage) in (1..).zip(&self.stages) {
            let aggregate = aggregate_all(&maps, &stage.agg)?;
            let (h, w) = (maps[0].height(), maps[0].width());
            let low = (l == self.cfg.lowlevel_stage).then_some(low_level);
            maps = maps
                .par_iter()
                .zip(proxy_summaries.par_iter())
                .map(|(m, p)| -> Result<FeatureMap<T>> {
                    let p = bilinear_resize(p, h, w)?;
                    let others = aggregate.sub(m)?;
                    let code = code_from_parts(m, &others, &p, stage, self.cfg.beta)?;
                    conditional_decode(m, &code, stage, &self.cfg, l, low)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        maps.par_iter()
            .map(|m| bilinear_resize(&self.head.forward(m)?, out_h, out_w))
            .collect()
    }
}

/// One-shot [`Cascade::calibrate`].
pub fn cascade_calibrate<T: Real>(
    proto_maps: &[FeatureMap<T>],
    proxy_summaries: &[FeatureMap<T>],
    low_level: &FeatureMap<T>,
    weights: &WeightBundle,
    widths: CascadeWidths,
    cfg: &CascadeConfig,
    out_size: (usize, usize),
) -> Result<Vec<FeatureMap<T>>> {
    Cascade::new(cfg.clone(), widths, weights)?.calibrate(
        proto_maps,
        proxy_summaries,
        low_level,
        out_size.0,
        out_size.1,
    )
}

/// Proxy maps of one object folded into the fixed reference-slot layout and
/// concatenated along channels.
pub fn proxy_summary<T: Real>(proxies: &ProxySet<T>, granularities: usize) -> Result<FeatureMap<T>> {
    let first = proxies
        .entries
        .first()
        .ok_or_else(|| VosError::arg("proxy set has no entries"))?;
    let like = &first.proxy.map;
    let refs = entry_references(proxies);
    let maps: Vec<FeatureMap<T>> = proxies.entries.iter().map(|e| e.proxy.map.clone()).collect();
    let zero = FeatureMap::zeros(like.height(), like.width(), like.channels());
    let slots = slot_layout(&refs, granularities, &maps, &zero, elementwise_max)?;
    let views: Vec<&FeatureMap<T>> = slots.iter().collect();
    channel_concat(&views)
}

/// Per-pixel argmax over object score maps; ties go to the lower index.
pub fn merge_masks<T: Real>(scores: &[FeatureMap<T>]) -> Result<LabelMask> {
    let first = scores
        .first()
        .ok_or_else(|| VosError::arg("merge needs at least the background score"))?;
    if scores.len() > 256 {
        return Err(VosError::arg("at most 255 objects plus background"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.same_spatial(first) || s.channels() != 1) {
        return Err(VosError::dim(format!(
            "score map {}x{}x{} vs {}x{}x1",
            bad.height(),
            bad.width(),
            bad.channels(),
            first.height(),
            first.width()
        )));
    }
    let labels = (0..first.cells())
        .map(|idx| {
            let mut best = 0usize;
            for (i, s) in scores.iter().enumerate().skip(1) {
                if s.data()[idx] > scores[best].data()[idx] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(first.height(), first.width(), (scores.len() - 1) as u8, labels)
}
