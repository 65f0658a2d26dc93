//! Reference-to-target similarity and initial proto-map synthesis.

use rayon::prelude::*;

use crate::calibration::merge_masks;
use crate::error::{Result, VosError};
use crate::layers::{conv_specs, Conv2d};
use crate::num::Real;
use crate::proxy::ProxySet;
use crate::tensor::{channel_concat, FeatureMap, LabelMask};
use crate::weights::{ParamSpec, WeightBundle};

/// Reference roles a similarity channel can come from. A frame history
/// of any length is folded into these three slots per granularity so the
/// projection after them has a fixed input width.
pub const REFERENCE_SLOTS: usize = 3;

/// `1 / (1 + ||a - b||^2)`, evaluated in `f64`.
pub fn l2_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(VosError::dim(format!(
            "similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sim_unchecked(a, b))
}

#[inline]
fn sim_unchecked<T: Real>(a: &[T], b: &[T]) -> f64 {
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.widen() - y.widen();
            d * d
        })
        .sum();
    1.0 / (1.0 + d2)
}

/// Per target cell, the best similarity to any centroid. No centroids
/// gives an all-zero map.
pub fn similarity_map<T: Real>(f_t: &FeatureMap<T>, centroids: &[Vec<T>]) -> Result<FeatureMap<T>> {
    if let Some(c) = centroids.iter().find(|c| c.len() != f_t.channels()) {
        return Err(VosError::dim(format!(
            "centroid of length {} against {}-channel features",
            c.len(),
            f_t.channels()
        )));
    }
    let data: Vec<T> = (0..f_t.cells())
        .into_par_iter()
        .map(|idx| {
            let q = f_t.cell(idx);
            let best = centroids.iter().map(|c| sim_unchecked(q, c)).fold(0.0, f64::max);
            T::narrow(best)
        })
        .collect();
    FeatureMap::new(f_t.height(), f_t.width(), 1, data)
}

/// One similarity map per proxy entry, in the proxy set's order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack<T> {
    pub object: u8,
    pub maps: Vec<FeatureMap<T>>,
}

pub fn similarity_stack<T: Real>(f_t: &FeatureMap<T>, proxies: &ProxySet<T>) -> Result<SimilarityStack<T>> {
    let maps = proxies
        .entries
        .iter()
        .map(|e| similarity_map(f_t, &e.proxy.centroids))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityStack {
        object: proxies.object,
        maps,
    })
}

pub(crate) fn elementwise_max<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = o.max(*v);
    }
    out
}

/// Groups per-entry maps by reference role.
///
/// Channel `slot * granularities + g` holds, for granularity `g`: the first
/// reference (slot 0), the elementwise max over intermediate references
/// (slot 1, zero when there are none) and the latest reference (slot 2).
/// With a single reference, slots 0 and 2 coincide.
pub fn slot_layout<M: Clone>(
    references: &[usize],
    granularities: usize,
    items: &[M],
    zero: &M,
    fold: impl Fn(&M, &M) -> M,
) -> Result<Vec<M>> {
    if granularities == 0 || items.len() != references.len() * granularities || references.is_empty() {
        return Err(VosError::dim(format!(
            "{} entries do not split into {} references x {} granularities",
            items.len(),
            references.len(),
            granularities
        )));
    }
    let last = references.len() - 1;
    let mut out = Vec::with_capacity(REFERENCE_SLOTS * granularities);
    out.extend(items[..granularities].iter().cloned());
    for g in 0..granularities {
        let mut acc: Option<M> = None;
        for r in 1..last {
            let v = &items[r * granularities + g];
            acc = Some(match acc {
                None => v.clone(),
                Some(a) => fold(&a, v),
            });
        }
        out.push(acc.unwrap_or_else(|| zero.clone()));
    }
    out.extend(items[last * granularities..].iter().cloned());
    Ok(out)
}

pub(crate) fn entry_references<T: Real>(proxies: &ProxySet<T>) -> Vec<usize> {
    let mut refs: Vec<usize> = proxies.entries.iter().map(|e| e.reference).collect();
    refs.dedup();
    refs
}

/// Similarity maps of `proxies` folded into the fixed slot layout.
pub fn slotted_similarity<T: Real>(
    f_t: &FeatureMap<T>,
    proxies: &ProxySet<T>,
    granularities: usize,
) -> Result<Vec<FeatureMap<T>>> {
    let stack = similarity_stack(f_t, proxies)?;
    let refs = entry_references(proxies);
    let zero = FeatureMap::zeros(f_t.height(), f_t.width(), 1);
    slot_layout(&refs, granularities, &stack.maps, &zero, elementwise_max)
}

/// Widths of the proto-map generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtoConfig {
    pub feature_channels: usize,
    pub granularities: usize,
    pub sim_channels: usize,
    pub proto_channels: usize,
}

impl ProtoConfig {
    pub fn similarity_inputs(&self) -> usize {
        REFERENCE_SLOTS * self.granularities
    }

    pub fn param_table(&self) -> Vec<ParamSpec> {
        let mut t = conv_specs("proto.phi_s", self.similarity_inputs(), self.sim_channels, 1);
        let cat = self.sim_channels + self.feature_channels;
        t.extend(Bottleneck::<f32>::specs("proto.ens.0", cat, self.proto_channels, true));
        t.extend(Bottleneck::<f32>::specs(
            "proto.ens.1",
            self.proto_channels,
            self.proto_channels,
            false,
        ));
        t
    }
}

/// 1x1 -> ReLU -> 3x3 -> ReLU -> 1x1 with an additive skip (projected by a
/// 1x1 convolution when the widths differ).
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    reduce: Conv2d<T>,
    spatial: Conv2d<T>,
    expand: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Real> Bottleneck<T> {
    pub fn specs(prefix: &str, in_ch: usize, width: usize, project: bool) -> Vec<ParamSpec> {
        let mut t = conv_specs(&format!("{prefix}.conv1"), in_ch, width, 1);
        t.extend(conv_specs(&format!("{prefix}.conv2"), width, width, 3));
        t.extend(conv_specs(&format!("{prefix}.conv3"), width, width, 1));
        if project {
            t.extend(conv_specs(&format!("{prefix}.skip"), in_ch, width, 1));
        }
        t
    }

    pub fn load(bundle: &WeightBundle, prefix: &str, in_ch: usize, width: usize, project: bool) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::load(bundle, &format!("{prefix}.conv1"), in_ch, width, 1)?,
            spatial: Conv2d::load(bundle, &format!("{prefix}.conv2"), width, width, 3)?,
            expand: Conv2d::load(bundle, &format!("{prefix}.conv3"), width, width, 1)?,
            skip: if project {
                Some(Conv2d::load(bundle, &format!("{prefix}.skip"), in_ch, width, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let h = self.reduce.forward(x)?.relu();
        let h = self.spatial.forward(&h)?.relu();
        let h = self.expand.forward(&h)?;
        match &self.skip {
            Some(p) => h.add(&p.forward(x)?),
            None => h.add(x),
        }
    }
}

/// Similarity projection followed by the two-block ensembler.
#[derive(Clone, Debug)]
pub struct ProtoMapGenerator<T> {
    cfg: ProtoConfig,
    phi_s: Conv2d<T>,
    blocks: [Bottleneck<T>; 2],
}

impl<T: Real> ProtoMapGenerator<T> {
    pub fn new(cfg: ProtoConfig, weights: &WeightBundle) -> Result<Self> {
        let cat = cfg.sim_channels + cfg.feature_channels;
        Ok(Self {
            cfg,
            phi_s: Conv2d::load(weights, "proto.phi_s", cfg.similarity_inputs(), cfg.sim_channels, 1)?,
            blocks: [
                Bottleneck::load(weights, "proto.ens.0", cat, cfg.proto_channels, true)?,
                Bottleneck::load(weights, "proto.ens.1", cfg.proto_channels, cfg.proto_channels, false)?,
            ],
        })
    }

    pub fn config(&self) -> &ProtoConfig {
        &self.cfg
    }

    /// Proto-map from already slotted similarity channels.
    pub fn from_similarities(&self, f_t: &FeatureMap<T>, sims: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
        if sims.len() != self.cfg.similarity_inputs() {
            return Err(VosError::dim(format!(
                "expected {} similarity channels, got {}",
                self.cfg.similarity_inputs(),
                sims.len()
            )));
        }
        let refs: Vec<&FeatureMap<T>> = sims.iter().collect();
        let stacked = channel_concat(&refs)?;
        let projected = self.phi_s.forward(&stacked)?;
        let x = channel_concat(&[&projected, f_t])?;
        let x = self.blocks[0].forward(&x)?;
        self.blocks[1].forward(&x)
    }

    pub fn generate(&self, f_t: &FeatureMap<T>, proxies: &ProxySet<T>) -> Result<FeatureMap<T>> {
        let sims = slotted_similarity(f_t, proxies, self.cfg.granularities)?;
        self.from_similarities(f_t, &sims)
    }
}

/// One-shot proto-map generation from a weight bundle.
pub fn generate_proto_map<T: Real>(
    f_t: &FeatureMap<T>,
    proxies: &ProxySet<T>,
    cfg: ProtoConfig,
    weights: &WeightBundle,
) -> Result<FeatureMap<T>> {
    ProtoMapGenerator::new(cfg, weights)?.generate(f_t, proxies)
}

/// Per object, the best similarity of each target cell to any of its centroids.
pub fn nearest_proxy_scores<T: Real>(f_t: &FeatureMap<T>, all_proxies: &[ProxySet<T>]) -> Result<Vec<FeatureMap<T>>> {
    if all_proxies.is_empty() {
        return Err(VosError::arg("nearest-proxy matching needs at least one object"));
    }
    all_proxies
        .iter()
        .map(|set| {
            let centroids: Vec<Vec<T>> = set
                .entries
                .iter()
                .flat_map(|e| e.proxy.centroids.iter().cloned())
                .collect();
            similarity_map(f_t, &centroids)
        })
        .collect()
}

/// Labels each target cell with the object owning its most similar centroid.
/// `all_proxies[i]` must describe object `i`; ties go to the lower index.
pub fn nearest_proxy_classify<T: Real>(f_t: &FeatureMap<T>, all_proxies: &[ProxySet<T>]) -> Result<LabelMask> {
    merge_masks(&nearest_proxy_scores(f_t, all_proxies)?)
}
