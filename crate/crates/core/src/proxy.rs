//! Object proxies: cluster an object's pixel embeddings at several
//! granularities and paint each centroid back over its member cells.
//!
//! A granularity of `1` yields the object-level proxy (masked mean), the
//! `full` sentinel yields the pixel-level proxy (the embedding itself), and
//! anything in between is an adaptive part-level proxy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::num::Real;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{elementwise_mask, FeatureMap, LabelMask};

/// Number of clusters for one proxy granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClusterCount {
    Fixed(usize),
    /// One cluster per support pixel.
    Full,
}

impl ClusterCount {
    /// Word fed into sub-seed derivation.
    pub fn seed_word(self) -> u64 {
        match self {
            ClusterCount::Fixed(k) => k as u64,
            ClusterCount::Full => u64::MAX,
        }
    }
}

impl fmt::Display for ClusterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterCount::Fixed(k) => write!(f, "{k}"),
            ClusterCount::Full => f.write_str("full"),
        }
    }
}

impl FromStr for ClusterCount {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(ClusterCount::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(ClusterCount::Fixed(k)),
            _ => Err(VosError::arg(format!(
                "cluster count `{s}` must be a positive integer or `full`"
            ))),
        }
    }
}

/// Ordered list of granularities; the order fixes the channel layout of
/// everything built from the proxies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClusterSchedule(Vec<ClusterCount>);

impl ClusterSchedule {
    pub fn new(counts: Vec<ClusterCount>) -> Result<Self> {
        if counts.is_empty() {
            return Err(VosError::arg("cluster schedule must not be empty"));
        }
        Ok(Self(counts))
    }

    pub fn counts(&self) -> &[ClusterCount] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ClusterSchedule {
    fn default() -> Self {
        Self(vec![
            ClusterCount::Fixed(1),
            ClusterCount::Fixed(16),
            ClusterCount::Full,
        ])
    }
}

impl fmt::Display for ClusterSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for ClusterSchedule {
    type Err = VosError;

    fn from_str(s: &str) -> Result<Self> {
        let counts = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }
}

impl TryFrom<String> for ClusterSchedule {
    type Error = VosError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClusterSchedule> for String {
    fn from(s: ClusterSchedule) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Independent seedings; the lowest final inertia wins (first on ties).
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-4,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult<T> {
    pub centroids: Vec<Vec<T>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Assigns every point to its nearest centroid (lowest index on ties) and
/// returns the assignment with its inertia.
pub fn assign_step(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (assignment, inertia)
}

/// Coordinate-wise mean of each cluster's members; `None` for empty clusters.
pub fn update_step(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.below(n as u64) as usize].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                cum += d;
                if d > 0.0 && cum > target {
                    pick = i;
                    break;
                }
            }
            // floating drift can leave the last candidate at zero weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.below(n as u64) as usize
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Centroids, assignment, final inertia and inertia history.
type LloydRun = (Vec<Vec<f64>>, Vec<usize>, f64, Vec<f64>);

fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> LloydRun {
    let mut rng = SeededRng::new(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iter = 0;
    loop {
        let (assignment, inertia) = assign_step(points, &centroids);
        history.push(inertia);
        if converged || iter == cfg.max_iter {
            return (centroids, assignment, inertia, history);
        }
        iter += 1;
        let means = update_step(points, &assignment, k);
        // distance of each point to its (updated) centroid, for re-seeding
        let mut used = vec![false; points.len()];
        let mut next: Vec<Option<Vec<f64>>> = means;
        let dist_to_own: Vec<f64> = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| next[a].as_ref().map_or(0.0, |c| sq_dist(p, c)))
            .collect();
        for slot in next.iter_mut() {
            if slot.is_none() {
                let mut far = None;
                let mut far_d = -1.0;
                for (i, &d) in dist_to_own.iter().enumerate() {
                    if !used[i] && d > far_d {
                        far = Some(i);
                        far_d = d;
                    }
                }
                let i = far.unwrap_or(0);
                used[i] = true;
                *slot = Some(points[i].clone());
            }
        }
        let next: Vec<Vec<f64>> = next.into_iter().map(|c| c.unwrap_or_default()).collect();
        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < cfg.tol {
            converged = true;
        }
    }
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// When `k` is at least the number of points every point becomes its own
/// centroid. `k = 1` returns the coordinate-wise mean directly.
pub fn kmeans<T: Real>(points: &[&[T]], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterResult<T>> {
    if k == 0 {
        return Err(VosError::arg("k-means needs k >= 1"));
    }
    let first = points
        .first()
        .ok_or_else(|| VosError::arg("k-means needs at least one point"))?;
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(VosError::dim("k-means points differ in dimension"));
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v.widen()).collect()).collect();
    let narrow =
        |cs: Vec<Vec<f64>>| -> Vec<Vec<T>> { cs.into_iter().map(|c| c.into_iter().map(T::narrow).collect()).collect() };

    if k >= pts.len() {
        return Ok(ClusterResult {
            centroids: points.iter().map(|p| p.to_vec()).collect(),
            assignment: (0..pts.len()).collect(),
            inertia: 0.0,
            inertia_history: vec![0.0],
        });
    }
    if k == 1 {
        let mean = update_step(&pts, &vec![0; pts.len()], 1)
            .pop()
            .flatten()
            .unwrap_or_default();
        let (assignment, inertia) = assign_step(&pts, std::slice::from_ref(&mean));
        return Ok(ClusterResult {
            centroids: narrow(vec![mean]),
            assignment,
            inertia,
            inertia_history: vec![inertia],
        });
    }

    let mut best: Option<LloydRun> = None;
    for restart in 0..cfg.restarts.max(1) {
        let run_seed = if restart == 0 {
            seed
        } else {
            derive_seed(&[seed, restart as u64])
        };
        let run = lloyd(&pts, k, run_seed, cfg);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignment, inertia, inertia_history) = best.expect("at least one restart");
    Ok(ClusterResult {
        centroids: narrow(centroids),
        assignment,
        inertia,
        inertia_history,
    })
}

/// A proxy map with the distinct centroids painted into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Proxy<T> {
    pub map: FeatureMap<T>,
    pub centroids: Vec<Vec<T>>,
    /// Flat cell indices belonging to each centroid.
    pub members: Vec<Vec<usize>>,
}

impl<T: Real> Proxy<T> {
    fn absent(like: &FeatureMap<T>) -> Self {
        Self {
            map: FeatureMap::zeros(like.height(), like.width(), like.channels()),
            centroids: Vec::new(),
            members: Vec::new(),
        }
    }

    pub fn is_absent(&self) -> bool {
        self.centroids.is_empty()
    }

    fn paint(like: &FeatureMap<T>, centroids: Vec<Vec<T>>, members: Vec<Vec<usize>>) -> Self {
        let mut map = FeatureMap::zeros(like.height(), like.width(), like.channels());
        for (c, cells) in centroids.iter().zip(&members) {
            for &idx in cells {
                map.cell_mut(idx).copy_from_slice(c);
            }
        }
        Self {
            map,
            centroids,
            members,
        }
    }
}

fn check_support<T: Real>(e: &FeatureMap<T>, support: &[usize]) -> Result<()> {
    if let Some(&bad) = support.iter().find(|&&i| i >= e.cells()) {
        return Err(VosError::dim(format!(
            "support cell {bad} outside a {}x{} map",
            e.height(),
            e.width()
        )));
    }
    Ok(())
}

/// Clusters the support cells of `e` into `k` parts and paints each cell
/// with its centroid. An empty support yields an absent (all-zero) proxy.
pub fn build_proxy_entry<T: Real>(
    e: &FeatureMap<T>,
    support: &[usize],
    k: ClusterCount,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Proxy<T>> {
    check_support(e, support)?;
    if support.is_empty() {
        return Ok(Proxy::absent(e));
    }
    match k {
        ClusterCount::Full => Ok(Proxy {
            map: e.clone(),
            centroids: support.iter().map(|&i| e.cell(i).to_vec()).collect(),
            members: support.iter().map(|&i| vec![i]).collect(),
        }),
        ClusterCount::Fixed(k) => {
            let points: Vec<&[T]> = support.iter().map(|&i| e.cell(i)).collect();
            let result = kmeans(&points, k, seed, cfg)?;
            let mut members = vec![Vec::new(); result.centroids.len()];
            for (&cell, &a) in support.iter().zip(&result.assignment) {
                members[a].push(cell);
            }
            let (centroids, members): (Vec<_>, Vec<_>) = result
                .centroids
                .into_iter()
                .zip(members)
                .filter(|(_, m)| !m.is_empty())
                .unzip();
            Ok(Proxy::paint(e, centroids, members))
        }
    }
}

/// Grid-sampled proxies: the support's bounding box is split into
/// `grid x grid` equal cells and each non-empty cell contributes the mean of
/// its support embeddings.
pub fn build_grid_proxy<T: Real>(e: &FeatureMap<T>, support: &[usize], grid: usize) -> Result<Proxy<T>> {
    if grid == 0 {
        return Err(VosError::arg("grid size must be at least 1"));
    }
    check_support(e, support)?;
    if support.is_empty() {
        return Ok(Proxy::absent(e));
    }
    let w = e.width();
    let ys = support.iter().map(|&i| i / w);
    let xs = support.iter().map(|&i| i % w);
    let (y0, y1) = (ys.clone().min().unwrap_or(0), ys.max().unwrap_or(0));
    let (x0, x1) = (xs.clone().min().unwrap_or(0), xs.max().unwrap_or(0));
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut sums = vec![vec![0f64; e.channels()]; grid * grid];
    let mut members = vec![Vec::new(); grid * grid];
    for &i in support {
        let gy = (i / w - y0) * grid / bh;
        let gx = (i % w - x0) * grid / bw;
        let g = gy * grid + gx;
        for (s, v) in sums[g].iter_mut().zip(e.cell(i)) {
            *s += v.widen();
        }
        members[g].push(i);
    }
    let (centroids, members): (Vec<Vec<T>>, Vec<Vec<usize>>) = sums
        .into_iter()
        .zip(members)
        .filter(|(_, m)| !m.is_empty())
        .map(|(s, m)| {
            let n = m.len() as f64;
            (s.into_iter().map(|v| T::narrow(v / n)).collect(), m)
        })
        .unzip();
    Ok(Proxy::paint(e, centroids, members))
}

/// How one proxy entry was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Clusters(ClusterCount),
    Grid(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyEntry<T> {
    /// 1-based frame index of the reference.
    pub reference: usize,
    pub granularity: Granularity,
    pub proxy: Proxy<T>,
}

/// All proxies of one object, ordered by reference then granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySet<T> {
    pub object: u8,
    pub entries: Vec<ProxyEntry<T>>,
}

impl<T: Real> ProxySet<T> {
    pub fn centroid_count(&self) -> usize {
        self.entries.iter().map(|e| e.proxy.centroids.len()).sum()
    }
}

/// Features and mask of one reference frame at feature resolution.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceView<'a, T> {
    /// 1-based frame index.
    pub index: usize,
    pub features: &'a FeatureMap<T>,
    pub mask: &'a LabelMask,
}

fn embedding_and_support<T: Real>(r: &ReferenceView<'_, T>, object: u8) -> Result<(FeatureMap<T>, Vec<usize>)> {
    let e = object_embedding(r.features, r.mask, object)?;
    Ok((e, r.mask.support(object)))
}

/// `f_r` restricted to the cells labelled `object`.
pub fn object_embedding<T: Real>(f_r: &FeatureMap<T>, y_r: &LabelMask, object: u8) -> Result<FeatureMap<T>> {
    elementwise_mask(f_r, y_r, object)
}

/// Sub-seed for one proxy entry.
pub fn entry_seed(seed: u64, reference: usize, k: ClusterCount, object: u8) -> u64 {
    derive_seed(&[seed, reference as u64, k.seed_word(), object as u64])
}

/// Adaptive proxy set of `object` over every reference and granularity.
pub fn build_adaptive_proxy<T: Real>(
    refs: &[ReferenceView<'_, T>],
    object: u8,
    schedule: &ClusterSchedule,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ProxySet<T>> {
    if refs.is_empty() {
        return Err(VosError::arg("at least one reference frame is required"));
    }
    let mut entries = Vec::with_capacity(refs.len() * schedule.len());
    for r in refs {
        let (e, support) = embedding_and_support(r, object)?;
        for &k in schedule.counts() {
            let proxy = build_proxy_entry(&e, &support, k, entry_seed(seed, r.index, k, object), cfg)?;
            entries.push(ProxyEntry {
                reference: r.index,
                granularity: Granularity::Clusters(k),
                proxy,
            });
        }
    }
    Ok(ProxySet { object, entries })
}

/// Grid-sampled counterpart of [`build_adaptive_proxy`].
pub fn build_grid_proxy_set<T: Real>(
    refs: &[ReferenceView<'_, T>],
    object: u8,
    grids: &[usize],
) -> Result<ProxySet<T>> {
    if refs.is_empty() || grids.is_empty() {
        return Err(VosError::arg("grid proxies need references and grid sizes"));
    }
    let mut entries = Vec::with_capacity(refs.len() * grids.len());
    for r in refs {
        let (e, support) = embedding_and_support(r, object)?;
        for &g in grids {
            entries.push(ProxyEntry {
                reference: r.index,
                granularity: Granularity::Grid(g),
                proxy: build_grid_proxy(&e, &support, g)?,
            });
        }
    }
    Ok(ProxySet { object, entries })
}
