//! Sequential mask propagation, configuration and the robustness harness.
//!
//! Frame indices in reference schedules are 1-based; frame 1 carries the
//! given annotation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    cascade_param_table, merge_masks, proxy_summary, quiet_residuals, Cascade, CascadeConfig, CascadeWidths,
};
use crate::correlation::{nearest_proxy_classify, ProtoConfig, ProtoMapGenerator, REFERENCE_SLOTS};
use crate::dataset::{read_mask, save_predictions, SequenceRecord};
use crate::encoder::{Encoder, EncoderConfig, STRIDE};
use crate::error::{Result, VosError};
use crate::metrics::{jf_mean, score_sequence, RobustnessReport, RobustnessRow, SequenceScore};
use crate::perturbation::{Perturbation, PerturbationSpec};
use crate::proxy::{build_adaptive_proxy, ClusterSchedule, KMeansConfig, ProxySet, ReferenceView};
use crate::tensor::{downsample_mask, upsample_mask, FeatureMap, Image, LabelMask};
use crate::weights::{init_weights, load_weights, ParamSpec, WeightBundle};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    #[default]
    Base,
    #[serde(alias = "mf")]
    MultiFrame,
}

impl FromStr for ReferenceMode {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ReferenceMode::Base),
            "mf" | "multi_frame" | "multi-frame" => Ok(ReferenceMode::MultiFrame),
            _ => Err(VosError::arg(format!("unknown reference mode `{s}` (base or mf)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceSchedule {
    pub mode: ReferenceMode,
    pub delta: usize,
}

impl Default for ReferenceSchedule {
    fn default() -> Self {
        Self {
            mode: ReferenceMode::Base,
            delta: 5,
        }
    }
}

/// Reference frames for target frame `t` (1-based), strictly increasing.
pub fn select_references(schedule: &ReferenceSchedule, t: usize) -> Result<Vec<usize>> {
    if t < 2 {
        return Err(VosError::arg(format!("target frame {t} has no earlier frame")));
    }
    let mut refs = match schedule.mode {
        ReferenceMode::Base => vec![1],
        ReferenceMode::MultiFrame => {
            if schedule.delta == 0 {
                return Err(VosError::arg("multi-frame delta must be positive"));
            }
            (1..t).step_by(schedule.delta).collect()
        }
    };
    if refs.last() != Some(&(t - 1)) {
        refs.push(t - 1);
    }
    Ok(refs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    #[serde(alias = "matching-only")]
    MatchingOnly,
}

impl FromStr for Mode {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "matching-only" | "matching_only" => Ok(Mode::MatchingOnly),
            _ => Err(VosError::arg(format!("unknown mode `{s}` (full or matching-only)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::MatchingOnly => "matching-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Seed for clustering.
    pub seed: u64,
    pub clusters: ClusterSchedule,
    pub kmeans: KMeansConfig,
    pub references: ReferenceSchedule,
    /// Proto-map width `C_m`.
    pub proto_channels: usize,
    /// Width of the projected similarity channels.
    pub sim_channels: usize,
    pub encoder: EncoderConfig,
    pub cascade: CascadeConfig,
    /// Weight manifest; when unset, weights are drawn from `encoder.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seed: 0,
            clusters: ClusterSchedule::default(),
            kmeans: KMeansConfig::default(),
            references: ReferenceSchedule::default(),
            proto_channels: 32,
            sim_channels: 8,
            encoder: EncoderConfig::default(),
            cascade: CascadeConfig::default(),
            weights: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VosError::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| VosError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cascade.validate()?;
        if self.clusters.is_empty() {
            return Err(VosError::config("cluster schedule is empty"));
        }
        if self.proto_channels == 0 || self.sim_channels == 0 {
            return Err(VosError::config("proto_channels and sim_channels must be positive"));
        }
        if self.references.delta == 0 {
            return Err(VosError::config("reference delta must be positive"));
        }
        if self.kmeans.max_iter == 0 || self.kmeans.restarts == 0 {
            return Err(VosError::config("k-means needs at least one iteration and one restart"));
        }
        Ok(())
    }

    pub fn proto_config(&self) -> ProtoConfig {
        ProtoConfig {
            feature_channels: self.encoder.output_channels,
            granularities: self.clusters.len(),
            sim_channels: self.sim_channels,
            proto_channels: self.proto_channels,
        }
    }

    pub fn cascade_widths(&self) -> CascadeWidths {
        CascadeWidths {
            proto_channels: self.proto_channels,
            proxy_channels: REFERENCE_SLOTS * self.clusters.len() * self.encoder.output_channels,
            low_level_channels: self.encoder.low_level_channels,
        }
    }

    /// Every array the configured model reads. Matching-only runs read only
    /// the encoder's.
    pub fn param_table(&self) -> Vec<ParamSpec> {
        let mut t = self.encoder.param_table();
        if self.mode == Mode::Full {
            t.extend(self.full_model_table());
        }
        t
    }

    fn full_model_table(&self) -> Vec<ParamSpec> {
        let mut t = self.proto_config().param_table();
        t.extend(cascade_param_table(&self.cascade_widths(), &self.cascade));
        t
    }

    /// Seeded weights for the whole model, regardless of mode.
    pub fn synthesize_weights(&self, seed: u64) -> Result<WeightBundle> {
        let mut table = self.encoder.param_table();
        table.extend(self.full_model_table());
        let mut b = init_weights(seed, &table)?;
        quiet_residuals(&mut b);
        Ok(b)
    }

    /// Weights from the configured file, or seeded from `encoder.seed`.
    pub fn resolve_weights(&self) -> Result<WeightBundle> {
        match &self.weights {
            Some(p) => {
                let b = load_weights(p, None)?;
                b.check_table(&self.param_table())?;
                Ok(b)
            }
            None => self.synthesize_weights(self.encoder.seed),
        }
    }
}

/// A configured model with layers materialised.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: PipelineConfig,
    encoder: Encoder<f32>,
    proto: Option<ProtoMapGenerator<f32>>,
    cascade: Option<Cascade<f32>>,
}

impl Model {
    pub fn new(cfg: PipelineConfig, weights: &WeightBundle) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.encoder, weights)?;
        let (proto, cascade) = match cfg.mode {
            Mode::MatchingOnly => (None, None),
            Mode::Full => (
                Some(ProtoMapGenerator::new(cfg.proto_config(), weights)?),
                Some(Cascade::new(cfg.cascade.clone(), cfg.cascade_widths(), weights)?),
            ),
        };
        Ok(Self {
            cfg,
            encoder,
            proto,
            cascade,
        })
    }

    pub fn from_config(cfg: PipelineConfig) -> Result<Self> {
        let w = cfg.resolve_weights()?;
        Self::new(cfg, &w)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn predict(
        &self,
        t: usize,
        image: &Image,
        feats: &[(FeatureMap<f32>, FeatureMap<f32>)],
        small_masks: &[LabelMask],
        num_objects: u8,
    ) -> Result<LabelMask> {
        let (h, w) = (image.height(), image.width());
        let refs = select_references(&self.cfg.references, t)?;
        let views: Vec<ReferenceView<'_, f32>> = refs
            .iter()
            .map(|&r| ReferenceView {
                index: r,
                features: &feats[r - 1].0,
                mask: &small_masks[r - 1],
            })
            .collect();
        let proxies: Vec<ProxySet<f32>> = (0..=num_objects)
            .into_par_iter()
            .map(|obj| build_adaptive_proxy(&views, obj, &self.cfg.clusters, self.cfg.seed, &self.cfg.kmeans))
            .collect::<Result<_>>()?;
        let (f_t, low_t) = &feats[t - 1];
        match (&self.proto, &self.cascade) {
            (Some(proto), Some(cascade)) => {
                let protos: Vec<FeatureMap<f32>> = proxies
                    .par_iter()
                    .map(|p| proto.generate(f_t, p))
                    .collect::<Result<_>>()?;
                let summaries: Vec<FeatureMap<f32>> = proxies
                    .iter()
                    .map(|p| proxy_summary(p, self.cfg.clusters.len()))
                    .collect::<Result<_>>()?;
                merge_masks(&cascade.calibrate(&protos, &summaries, low_t, h, w)?)
            }
            _ => upsample_mask(&nearest_proxy_classify(f_t, &proxies)?, STRIDE, h, w),
        }
    }

    /// Predicts masks for every frame given only the first annotation;
    /// later predictions serve as references for the frames after them.
    pub fn propagate(&self, frames: &[Image], first_mask: &LabelMask) -> Result<Vec<LabelMask>> {
        let first = frames.first().ok_or_else(|| VosError::arg("sequence has no frames"))?;
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| (f.height(), f.width()) != (first.height(), first.width()))
        {
            return Err(VosError::data(format!(
                "frame {} is {}x{}, frame 1 is {}x{}",
                i + 1,
                f.height(),
                f.width(),
                first.height(),
                first.width()
            )));
        }
        if (first_mask.height(), first_mask.width()) != (first.height(), first.width()) {
            return Err(VosError::data(format!(
                "first annotation is {}x{}, frames are {}x{}",
                first_mask.height(),
                first_mask.width(),
                first.height(),
                first.width()
            )));
        }
        let n = first_mask.num_objects();
        let mut feats = Vec::with_capacity(frames.len());
        let mut small = Vec::with_capacity(frames.len());
        let mut preds = Vec::with_capacity(frames.len());
        feats.push(self.encoder.encode(first)?);
        small.push(downsample_mask(first_mask, STRIDE)?);
        preds.push(first_mask.clone());
        for (i, frame) in frames.iter().enumerate().skip(1) {
            let t = i + 1;
            feats.push(self.encoder.encode(frame)?);
            let pred = self
                .predict(t, frame, &feats, &small, n)
                .map_err(|e| with_frame_context(e, t))?;
            small.push(downsample_mask(&pred, STRIDE)?);
            preds.push(pred);
        }
        Ok(preds)
    }
}

fn with_frame_context(e: VosError, t: usize) -> VosError {
    match e {
        VosError::Dimension(m) => VosError::Dimension(format!("frame {t}: {m}")),
        VosError::Data(m) => VosError::Data(format!("frame {t}: {m}")),
        VosError::Argument(m) => VosError::Argument(format!("frame {t}: {m}")),
        other => other,
    }
}

/// Runs `model` over one dataset sequence.
pub fn propagate_sequence(record: &SequenceRecord, model: &Model) -> Result<Vec<LabelMask>> {
    let frames = record.load_frames()?;
    let first = record.load_first_mask()?;
    model.propagate(&frames, &first).map_err(|e| match e {
        VosError::Data(m) => VosError::Data(format!("sequence `{}`: {m}", record.id)),
        VosError::Dimension(m) => VosError::Dimension(format!("sequence `{}`: {m}", record.id)),
        other => other,
    })
}

/// Predicts every sequence (in parallel) and writes the masks under `out`.
pub fn infer_dataset(records: &[SequenceRecord], model: &Model, out: &Path) -> Result<()> {
    records.par_iter().try_for_each(|rec| {
        let preds = propagate_sequence(rec, model)?;
        save_predictions(out, rec, &preds)
    })
}

/// Ground truth of every frame that has it on disk.
pub fn load_ground_truth(record: &SequenceRecord) -> Result<Vec<Option<LabelMask>>> {
    record
        .annotations
        .iter()
        .map(|a| a.as_deref().map(read_mask).transpose())
        .collect()
}

/// Frames, first mask and ground truth of one sequence, read once.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub id: String,
    pub frames: Vec<Image>,
    pub ground_truth: Vec<Option<LabelMask>>,
    pub num_objects: u8,
}

impl LoadedSequence {
    pub fn load(record: &SequenceRecord) -> Result<Self> {
        Ok(Self {
            id: record.id.clone(),
            frames: record.load_frames()?,
            ground_truth: load_ground_truth(record)?,
            num_objects: record.num_objects,
        })
    }

    pub fn first_mask(&self) -> &LabelMask {
        self.ground_truth[0].as_ref().expect("first annotation is required")
    }
}

/// Predicts and scores every sequence after applying `perturbation`.
pub fn evaluate_under(
    sequences: &[LoadedSequence],
    model: &Model,
    perturbation: &PerturbationSpec,
) -> Result<Vec<SequenceScore>> {
    sequences
        .par_iter()
        .map(|s| {
            let frames = if perturbation.kind == Perturbation::Identity {
                s.frames.clone()
            } else {
                perturbation.apply_sequence(&s.id, &s.frames)?
            };
            let preds = model.propagate(&frames, s.first_mask())?;
            score_sequence(&s.id, &preds, &s.ground_truth, s.num_objects, None)
        })
        .collect()
}

/// Clean run, an identity control and the six benchmark perturbations.
pub fn run_robustness(sequences: &[LoadedSequence], model: &Model, seed: u64) -> Result<RobustnessReport> {
    let clean = jf_mean(&evaluate_under(
        sequences,
        model,
        &PerturbationSpec::new(Perturbation::Identity, seed),
    )?)?;
    let control_spec = PerturbationSpec::new(Perturbation::Identity, seed);
    let control = vec![RobustnessRow {
        perturbation: control_spec.kind.label(),
        score: jf_mean(&evaluate_under(sequences, model, &control_spec)?)?,
    }];
    let rows = Perturbation::benchmark_suite()
        .iter()
        .map(|&kind| {
            let spec = PerturbationSpec::new(kind, seed);
            Ok(RobustnessRow {
                perturbation: kind.label(),
                score: jf_mean(&evaluate_under(sequences, model, &spec)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RobustnessReport::new(clean, control, rows)
}
