//! Named parameter arrays and their on-disk format.
//!
//! A bundle is stored as two files: a TOML manifest listing every parameter
//! path with its shape and byte offset, and a raw blob of little-endian `f32`
//! values laid out in manifest order. The blob path is recorded in the
//! manifest relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VosError};
use crate::rng::SeededRng;

const FORMAT_TAG: &str = "vos-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VosError::config(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Declared shape of one parameter and the fan-in of the layer consuming it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            path: path.into(),
            shape,
            fan_in,
        }
    }
}

pub type ParamTable = Vec<ParamSpec>;

/// Immutable-after-construction collection of parameter arrays keyed by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightBundle {
    params: BTreeMap<String, Param>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param) -> Option<Param> {
        self.params.insert(path.into(), param)
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params
            .get(path)
            .ok_or_else(|| VosError::config(format!("missing weight array `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params
            .get_mut(path)
            .ok_or_else(|| VosError::config(format!("missing weight array `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Copies every array of `other` into `self`, replacing existing paths.
    pub fn merge(&mut self, other: WeightBundle) {
        self.params.extend(other.params);
    }

    /// Fails unless every declared parameter is present with its declared shape.
    pub fn check_table(&self, table: &[ParamSpec]) -> Result<()> {
        for spec in table {
            let p = self.get(&spec.path)?;
            if p.shape != spec.shape {
                return Err(VosError::config(format!(
                    "weight array `{}` has shape {:?}, expected {:?}",
                    spec.path, p.shape, spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Fills every declared array i.i.d. uniform on `(-a, a)`, `a = sqrt(6 / fan_in)`.
///
/// Arrays are drawn from one stream in ascending path order, so the result
/// depends only on the seed and the set of declared specs.
pub fn init_weights(seed: u64, table: &[ParamSpec]) -> Result<WeightBundle> {
    if table.is_empty() {
        return Err(VosError::config("empty parameter table"));
    }
    let mut sorted: Vec<&ParamSpec> = table.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for pair in sorted.windows(2) {
        if pair[0].path == pair[1].path {
            return Err(VosError::config(format!("duplicate parameter path `{}`", pair[0].path)));
        }
    }
    let mut rng = SeededRng::new(seed);
    let mut bundle = WeightBundle::new();
    for spec in sorted {
        if spec.fan_in == 0 {
            return Err(VosError::config(format!("`{}` has zero fan-in", spec.path)));
        }
        let a = (6.0 / spec.fan_in as f64).sqrt();
        let n: usize = spec.shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // rounding to f32 can land on ±a; clamp back inside
                let v = rng.symmetric(a) as f32;
                if (v as f64).abs() >= a {
                    (v as f64 * (1.0 - 1e-7)) as f32
                } else {
                    v
                }
            })
            .collect();
        bundle.insert(spec.path.clone(), Param::new(spec.shape.clone(), data)?);
    }
    Ok(bundle)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    #[serde(default, rename = "param")]
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: Vec<usize>,
    offset: u64,
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `bundle` as `<path>` (manifest) plus `<path>.bin` with the extension replaced.
pub fn save_weights(bundle: &WeightBundle, path: &Path) -> Result<()> {
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| VosError::arg(format!("bad weight path {}", path.display())))?
        .to_string();
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(bundle.len());
    for (name, p) in bundle.iter() {
        params.push(ManifestEntry {
            path: name.clone(),
            shape: p.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        blob: blob_name,
        params,
    };
    let text =
        toml::to_string(&manifest).map_err(|e| VosError::format(path, format!("cannot encode manifest: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| VosError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| VosError::io(path, e))?;
    fs::write(&blob_path, blob).map_err(|e| VosError::io(&blob_path, e))?;
    Ok(())
}

/// Reads a bundle written by [`save_weights`]. When `expected` is given,
/// every manifest path must be declared there with a matching shape.
pub fn load_weights(path: &Path, expected: Option<&[ParamSpec]>) -> Result<WeightBundle> {
    let text = fs::read_to_string(path).map_err(|e| VosError::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| VosError::format(path, e.to_string()))?;
    if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
        return Err(VosError::format(
            path,
            format!("unsupported manifest {} v{}", manifest.format, manifest.version),
        ));
    }
    let declared: Option<BTreeMap<&str, &ParamSpec>> =
        expected.map(|t| t.iter().map(|s| (s.path.as_str(), s)).collect());
    let blob_path = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| VosError::io(&blob_path, e))?;

    let mut seen = BTreeSet::new();
    let mut bundle = WeightBundle::new();
    for entry in &manifest.params {
        if !seen.insert(entry.path.as_str()) {
            return Err(VosError::config(format!(
                "duplicate parameter path `{}` in {}",
                entry.path,
                path.display()
            )));
        }
        if let Some(decl) = &declared {
            let spec = decl.get(entry.path.as_str()).ok_or_else(|| {
                VosError::config(format!("unknown parameter path `{}` in {}", entry.path, path.display()))
            })?;
            if spec.shape != entry.shape {
                return Err(VosError::config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.path, entry.shape, spec.shape
                )));
            }
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        let bytes = blob.get(start..end).ok_or_else(|| {
            VosError::format(
                &blob_path,
                format!("parameter `{}` runs past the end of the blob", entry.path),
            )
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bundle.insert(entry.path.clone(), Param::new(entry.shape.clone(), data)?);
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ParamTable {
        vec![
            ParamSpec::new("b.weight", vec![4, 3, 3, 3], 27),
            ParamSpec::new("a.weight", vec![2, 6], 6),
            ParamSpec::new("a.bias", vec![2], 6),
        ]
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_weights(11, &table()).unwrap();
        let b = init_weights(11, &table()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(12, &table()).unwrap());
        assert!(a.get("a.weight").unwrap().data.iter().all(|v| v.abs() < 1.0));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(a.get("b.weight").unwrap().data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn init_ignores_declaration_order() {
        let mut rev = table();
        rev.reverse();
        assert_eq!(init_weights(5, &table()).unwrap(), init_weights(5, &rev).unwrap());
    }

    #[test]
    fn init_mean_is_near_zero() {
        let t = vec![ParamSpec::new("x", vec![10_000], 6)];
        let b = init_weights(99, &t).unwrap();
        let mean: f64 = b.get("x").unwrap().data.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        // std of the mean for U(-1, 1) is sqrt(1/3)/100 ~ 0.0058
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn init_rejects_duplicates() {
        let mut t = table();
        t.push(ParamSpec::new("a.bias", vec![2], 6));
        assert!(matches!(init_weights(1, &t), Err(VosError::Config(_))));
        assert!(init_weights(1, &[]).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.toml");
        let mut bundle = init_weights(3, &table()).unwrap();
        bundle.get_mut("a.bias").unwrap().data[0] = f32::from_bits(0x0000_0001);
        save_weights(&bundle, &path).unwrap();
        let back = load_weights(&path, Some(&table())).unwrap();
        for ((ka, a), (kb, b)) in bundle.iter().zip(back.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn unknown_path_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.toml");
        let mut bundle = init_weights(3, &table()).unwrap();
        bundle.insert("mystery.weight", Param::zeros(vec![1]));
        save_weights(&bundle, &path).unwrap();
        let err = load_weights(&path, Some(&table())).unwrap_err();
        assert!(matches!(err, VosError::Config(_)));
        assert!(err.to_string().contains("mystery.weight"));
        // without a declared table the extra array loads fine
        assert_eq!(load_weights(&path, None).unwrap().len(), 4);
    }

    #[test]
    fn check_table_reports_missing_arrays() {
        let b = init_weights(3, &table()).unwrap();
        assert!(b.check_table(&table()).is_ok());
        let mut t = table();
        t.push(ParamSpec::new("c.weight", vec![1], 1));
        assert!(b.check_table(&t).unwrap_err().to_string().contains("c.weight"));
    }
}
