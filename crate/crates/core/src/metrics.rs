//! Region (J) and boundary (F) accuracy, their aggregates, the robustness
//! summary and the temporal decay curve.
//!
//! All scores are fractions in `[0, 1]`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::tensor::LabelMask;

fn check_sizes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(VosError::dim(format!(
            "mask {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Intersection over union of object `obj`.
pub fn region_j(pred: &LabelMask, gt: &LabelMask, obj: u8) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == obj, g == obj);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with at least one 4-neighbour outside the object; the
/// image border counts as outside.
pub fn boundary_pixels(mask: &LabelMask, obj: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let l = mask.labels();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && l[y as usize * w + x as usize] == obj
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) {
                out[y as usize * w + x as usize] =
                    !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1));
            }
        }
    }
    out
}

/// `ceil(0.008 * diagonal)`.
pub fn default_tolerance(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Dilation of `bits` by the closed Euclidean disk of radius `r`.
pub fn disk_dilate(bits: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !bits[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of object `obj` with matching radius `tolerance`
/// (default [`default_tolerance`]).
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, obj: u8, tolerance: Option<usize>) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (h, w) = (gt.height(), gt.width());
    let r = tolerance.unwrap_or_else(|| default_tolerance(h, w));
    let pb = boundary_pixels(pred, obj);
    let gb = boundary_pixels(gt, obj);
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = disk_dilate(&gb, h, w, r);
    let pd = disk_dilate(&pb, h, w, r);
    let matched_p = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let matched_g = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let p = matched_p as f64 / np as f64;
    let rc = matched_g as f64 / ng as f64;
    Ok(if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) })
}

/// Per-frame scores of one object; `None` where the frame is not scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    pub object: u8,
    pub j: Vec<Option<f64>>,
    pub f: Vec<Option<f64>>,
}

fn mean_of(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl ObjectScore {
    pub fn mean_j(&self) -> Option<f64> {
        mean_of(&self.j)
    }

    pub fn mean_f(&self) -> Option<f64> {
        mean_of(&self.f)
    }

    pub fn mean_jf(&self) -> Option<f64> {
        Some((self.mean_j()? + self.mean_f()?) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub id: String,
    pub frames: usize,
    pub objects: Vec<ObjectScore>,
}

impl SequenceScore {
    fn object_means(&self, pick: impl Fn(&ObjectScore) -> Option<f64>) -> Option<f64> {
        mean(&self.objects.iter().filter_map(pick).collect::<Vec<_>>())
    }

    pub fn mean_j(&self) -> Option<f64> {
        self.object_means(ObjectScore::mean_j)
    }

    pub fn mean_f(&self) -> Option<f64> {
        self.object_means(ObjectScore::mean_f)
    }

    pub fn mean_jf(&self) -> Option<f64> {
        self.object_means(ObjectScore::mean_jf)
    }

    /// Per-frame `(J + F) / 2` averaged over the objects scored in that
    /// frame, for frames where at least one object is scored.
    pub fn frame_series(&self) -> Vec<f64> {
        (0..self.frames)
            .filter_map(|t| {
                let vals: Vec<f64> = self
                    .objects
                    .iter()
                    .filter_map(|o| Some((o.j[t]? + o.f[t]?) / 2.0))
                    .collect();
                mean(&vals)
            })
            .collect()
    }
}

/// Scores predictions against whatever ground truth exists. The first frame
/// is never scored, nor are frames where an object is absent from the
/// ground truth.
pub fn score_sequence(
    id: &str,
    preds: &[LabelMask],
    gts: &[Option<LabelMask>],
    num_objects: u8,
    tolerance: Option<usize>,
) -> Result<SequenceScore> {
    if preds.len() != gts.len() {
        return Err(VosError::data(format!(
            "`{id}`: {} predictions for {} frames",
            preds.len(),
            gts.len()
        )));
    }
    let frames = preds.len();
    let mut objects = Vec::with_capacity(num_objects as usize);
    for obj in 1..=num_objects {
        let mut j = vec![None; frames];
        let mut f = vec![None; frames];
        for t in 1..frames {
            let Some(gt) = &gts[t] else { continue };
            if gt.count(obj) == 0 {
                continue;
            }
            j[t] = Some(region_j(&preds[t], gt, obj)?);
            f[t] = Some(boundary_f(&preds[t], gt, obj, tolerance)?);
        }
        objects.push(ObjectScore { object: obj, j, f });
    }
    Ok(SequenceScore {
        id: id.to_owned(),
        frames,
        objects,
    })
}

fn over_sequences(scores: &[SequenceScore], pick: impl Fn(&SequenceScore) -> Option<f64>) -> Result<f64> {
    if scores.is_empty() {
        return Err(VosError::arg("no sequence scores"));
    }
    mean(&scores.iter().filter_map(pick).collect::<Vec<_>>())
        .ok_or_else(|| VosError::arg("no scored objects in any sequence"))
}

/// Frames -> object -> objects -> sequences.
pub fn jf_mean(scores: &[SequenceScore]) -> Result<f64> {
    over_sequences(scores, SequenceScore::mean_jf)
}

pub fn j_mean(scores: &[SequenceScore]) -> Result<f64> {
    over_sequences(scores, SequenceScore::mean_j)
}

pub fn f_mean(scores: &[SequenceScore]) -> Result<f64> {
    over_sequences(scores, SequenceScore::mean_f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Seen,
    Unseen,
}

/// Object -> category, keyed by `(sequence, object)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryManifest(pub BTreeMap<(String, u8), Category>);

#[derive(Deserialize)]
struct ManifestRow {
    sequence: String,
    object: u8,
    category: Category,
}

impl CategoryManifest {
    /// CSV with header `sequence,object,category`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| VosError::format(path, e.to_string()))?;
        let mut map = BTreeMap::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| VosError::format(path, e.to_string()))?;
            map.insert((row.sequence, row.object), row.category);
        }
        Ok(Self(map))
    }
}

/// Seen/unseen means; a partition without objects is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitScores {
    pub j_seen: Option<f64>,
    pub j_unseen: Option<f64>,
    pub f_seen: Option<f64>,
    pub f_unseen: Option<f64>,
}

/// Means over objects within each partition.
pub fn split_scores(scores: &[SequenceScore], manifest: &CategoryManifest) -> Result<SplitScores> {
    let (mut js, mut ju, mut fs, mut fu) = (vec![], vec![], vec![], vec![]);
    for s in scores {
        for o in &s.objects {
            let (Some(j), Some(f)) = (o.mean_j(), o.mean_f()) else {
                continue;
            };
            let cat = manifest.0.get(&(s.id.clone(), o.object)).ok_or_else(|| {
                VosError::data(format!(
                    "object {} of `{}` missing from category manifest",
                    o.object, s.id
                ))
            })?;
            match cat {
                Category::Seen => {
                    js.push(j);
                    fs.push(f);
                }
                Category::Unseen => {
                    ju.push(j);
                    fu.push(f);
                }
            }
        }
    }
    Ok(SplitScores {
        j_seen: mean(&js),
        j_unseen: mean(&ju),
        f_seen: mean(&fs),
        f_unseen: mean(&fu),
    })
}

/// `Q_p`: mean score over perturbations.
pub fn after_perturbation_accuracy(q_eps: &[f64]) -> Result<f64> {
    mean(q_eps).ok_or_else(|| VosError::arg("no perturbation scores"))
}

/// `R_p = Q_c - Q_p`.
pub fn perturbation_robustness(q_c: f64, q_p: f64) -> f64 {
    q_c - q_p
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub score: f64,
}

/// Clean score, per-perturbation scores and their summary. `control` rows
/// are reported alongside but stay out of `Q_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub q_c: f64,
    pub control: Vec<RobustnessRow>,
    pub rows: Vec<RobustnessRow>,
    pub q_p: f64,
    pub r_p: f64,
}

impl RobustnessReport {
    pub fn new(q_c: f64, control: Vec<RobustnessRow>, rows: Vec<RobustnessRow>) -> Result<Self> {
        let q_p = after_perturbation_accuracy(&rows.iter().map(|r| r.score).collect::<Vec<_>>())?;
        Ok(Self {
            q_c,
            control,
            rows,
            q_p,
            r_p: perturbation_robustness(q_c, q_p),
        })
    }

    /// Columns `row,score,r_p`; the drop column is `Q_c` minus the row score.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| VosError::format(path, e.to_string()))?;
        let err = |e: csv::Error| VosError::format(path, e.to_string());
        w.write_record(["row", "score", "r_p"]).map_err(err)?;
        w.write_record(["clean".into(), fmt_score(self.q_c), fmt_score(0.0)])
            .map_err(err)?;
        for r in self.control.iter().chain(&self.rows) {
            w.write_record([
                r.perturbation.clone(),
                fmt_score(r.score),
                fmt_score(self.q_c - r.score),
            ])
            .map_err(err)?;
        }
        w.write_record(["Q_p".into(), fmt_score(self.q_p), fmt_score(self.r_p)])
            .map_err(err)?;
        w.flush().map_err(|e| VosError::io(path, e))
    }
}

fn fmt_score(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayBin {
    /// Bin centre as a percentage of sequence length.
    pub center: f64,
    pub mean: Option<f64>,
    pub frames: usize,
}

/// Buckets per-frame scores by normalised position `i / (len - 1)` into
/// `bins` equal intervals (last one closed) and averages each bucket over
/// all sequences.
pub fn temporal_decay_curve(series: &[Vec<f64>], bins: usize) -> Result<Vec<DecayBin>> {
    if bins == 0 {
        return Err(VosError::arg("decay curve needs at least one bin"));
    }
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for s in series {
        let len = s.len();
        if len == 0 {
            return Err(VosError::arg("decay curve needs at least one frame per sequence"));
        }
        for (i, v) in s.iter().enumerate() {
            // integer floor(i * B / (len - 1)) avoids float bin edges
            let b = if len == 1 {
                0
            } else {
                (i * bins / (len - 1)).min(bins - 1)
            };
            sum[b] += v;
            count[b] += 1;
        }
    }
    Ok((0..bins)
        .map(|b| DecayBin {
            center: 100.0 * (b as f64 + 0.5) / bins as f64,
            mean: (count[b] > 0).then(|| sum[b] / count[b] as f64),
            frames: count[b],
        })
        .collect())
}

pub fn write_decay_csv(path: &Path, curve: &[DecayBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| VosError::format(path, e.to_string()))?;
    let err = |e: csv::Error| VosError::format(path, e.to_string());
    w.write_record(["position_pct", "jf", "frames"]).map_err(err)?;
    for b in curve {
        w.write_record([
            format!("{:.2}", b.center),
            b.mean.map(|m| format!("{m:.6}")).unwrap_or_default(),
            b.frames.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| VosError::io(path, e))
}

/// Per-object rows, one summary row per sequence and a final overall row.
pub fn write_scores_csv(path: &Path, scores: &[SequenceScore], split: Option<&SplitScores>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| VosError::format(path, e.to_string()))?;
    let err = |e: csv::Error| VosError::format(path, e.to_string());
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    w.write_record(["sequence", "object", "J", "F", "J&F"]).map_err(err)?;
    for s in scores {
        for o in &s.objects {
            w.write_record([
                s.id.clone(),
                o.object.to_string(),
                opt(o.mean_j()),
                opt(o.mean_f()),
                opt(o.mean_jf()),
            ])
            .map_err(err)?;
        }
        w.write_record([
            s.id.clone(),
            "mean".into(),
            opt(s.mean_j()),
            opt(s.mean_f()),
            opt(s.mean_jf()),
        ])
        .map_err(err)?;
    }
    w.write_record([
        "ALL".into(),
        "mean".into(),
        opt(j_mean(scores).ok()),
        opt(f_mean(scores).ok()),
        opt(jf_mean(scores).ok()),
    ])
    .map_err(err)?;
    if let Some(sp) = split {
        for (name, v) in [
            ("J_seen", sp.j_seen),
            ("J_unseen", sp.j_unseen),
            ("F_seen", sp.f_seen),
            ("F_unseen", sp.f_unseen),
        ] {
            w.write_record(["ALL".into(), name.into(), opt(v), String::new(), String::new()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| VosError::io(path, e))
}
