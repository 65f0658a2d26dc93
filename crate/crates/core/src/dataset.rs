//! Dataset layout and file formats.
//!
//! ```text
//! <root>/JPEGImages/<seq>/<stem>.png|jpg
//! <root>/Annotations/<seq>/<stem>.png    indexed PNG, pixel value = label
//! ```
//!
//! Stems sort numerically when they parse as integers.

use std::cmp::Ordering;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Result, VosError};
use crate::tensor::{Image, LabelMask};

pub const FRAMES_DIR: &str = "JPEGImages";
pub const ANNOTATIONS_DIR: &str = "Annotations";
const FRAME_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One video: ordered frames, with whatever annotations exist on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub id: String,
    pub stems: Vec<String>,
    pub frames: Vec<PathBuf>,
    /// Per-frame ground truth; entry 0 is always present.
    pub annotations: Vec<Option<PathBuf>>,
    pub num_objects: u8,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first_annotation(&self) -> &Path {
        self.annotations[0].as_deref().expect("validated at load")
    }

    pub fn load_frames(&self) -> Result<Vec<Image>> {
        self.frames.iter().map(|p| read_image(p)).collect()
    }

    pub fn load_first_mask(&self) -> Result<LabelMask> {
        read_mask(self.first_annotation())
    }
}

fn stem_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| VosError::io(dir, e))? {
        out.push(entry.map_err(|e| VosError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn stem_of(p: &Path) -> Option<String> {
    p.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
}

fn ext_of(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// Frame files of one sequence directory as `(stem, path)`, numerically ordered.
pub fn list_frames(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut frames: Vec<(String, PathBuf)> = sorted_dir(dir)?
        .into_iter()
        .filter(|p| p.is_file() && FRAME_EXTS.contains(&ext_of(p).as_str()))
        .filter_map(|p| stem_of(&p).map(|s| (s, p)))
        .collect();
    frames.sort_by(|a, b| stem_order(&a.0, &b.0));
    if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(VosError::data(format!(
            "frame `{}` appears twice in {}",
            w[0].0,
            dir.display()
        )));
    }
    Ok(frames)
}

/// Scans `root`; a root without a frames directory holds no sequences.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    if !root.exists() {
        return Err(VosError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let frames_root = root.join(FRAMES_DIR);
    if !frames_root.is_dir() {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for seq_dir in sorted_dir(&frames_root)?.into_iter().filter(|p| p.is_dir()) {
        let id = seq_dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| VosError::data(format!("non-UTF-8 sequence name {}", seq_dir.display())))?
            .to_owned();
        let frames = list_frames(&seq_dir)?;
        if frames.len() < 2 {
            return Err(VosError::data(format!("sequence `{id}` has fewer than 2 frames")));
        }
        let ann_dir = root.join(ANNOTATIONS_DIR).join(&id);
        let annotations: Vec<Option<PathBuf>> = frames
            .iter()
            .map(|(stem, _)| {
                let p = ann_dir.join(format!("{stem}.png"));
                p.is_file().then_some(p)
            })
            .collect();
        let first = annotations[0].as_ref().ok_or_else(|| {
            VosError::data(format!(
                "sequence `{id}` has no annotation for its first frame `{}`",
                frames[0].0
            ))
        })?;
        let num_objects = read_mask(first)?.num_objects();
        let (stems, frames) = frames.into_iter().unzip();
        records.push(SequenceRecord {
            id,
            stems,
            frames,
            annotations,
            num_objects,
        });
    }
    Ok(records)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .map_err(|e| VosError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| VosError::io(path, e))?
        .decode()
        .map_err(|e| VosError::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(h as usize, w as usize, img.into_raw())
}

/// Writes an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| VosError::format(path, e.to_string()))?;
    w.write_image_data(img.data())
        .map_err(|e| VosError::format(path, e.to_string()))?;
    w.finish().map_err(|e| VosError::format(path, e.to_string()))
}

/// Reads an indexed-palette PNG; palette indices are object labels and
/// `num_objects` is the largest index present.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let file = File::open(path).map_err(|e| VosError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| VosError::format(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Indexed {
        return Err(VosError::format(
            path,
            format!("mask must be indexed PNG, found {color:?}"),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VosError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| VosError::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = depth as usize;
    let mut labels = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size).take(h) {
        for x in 0..w {
            let v = match bits {
                8 => row[x],
                1 | 2 | 4 => {
                    let per = 8 / bits;
                    let byte = row[x / per];
                    let shift = 8 - bits * (x % per + 1);
                    (byte >> shift) & ((1u8 << bits) - 1)
                }
                _ => return Err(VosError::format(path, format!("unsupported bit depth {bits}"))),
            };
            labels.push(v);
        }
    }
    let n = labels.iter().copied().max().unwrap_or(0);
    LabelMask::new(h, w, n, labels)
}

/// Colour for label `i`, using the bit-interleaved palette common to VOS
/// benchmarks.
pub fn palette_color(i: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = i;
    for bit in 0..8 {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << (7 - bit);
        }
        c >>= 3;
        if c == 0 {
            break;
        }
    }
    rgb
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..=255u8).flat_map(palette_color).collect();
    enc.set_palette(palette);
    let mut w = enc.write_header().map_err(|e| VosError::format(path, e.to_string()))?;
    w.write_image_data(mask.labels())
        .map_err(|e| VosError::format(path, e.to_string()))?;
    w.finish().map_err(|e| VosError::format(path, e.to_string()))
}

fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VosError::io(parent, e))?;
    }
    File::create(path).map_err(|e| VosError::io(path, e))
}

/// Writes `<out>/<seq>/<stem>.png` for every predicted frame.
pub fn save_predictions(out: &Path, record: &SequenceRecord, masks: &[LabelMask]) -> Result<()> {
    if masks.len() != record.len() {
        return Err(VosError::arg(format!(
            "{} predictions for {} frames of `{}`",
            masks.len(),
            record.len(),
            record.id
        )));
    }
    for (stem, m) in record.stems.iter().zip(masks) {
        write_mask(&out.join(&record.id).join(format!("{stem}.png")), m)?;
    }
    Ok(())
}

/// Copies a file, creating parent directories.
pub fn copy_file(from: &Path, to: &Path) -> Result<()> {
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent).map_err(|e| VosError::io(parent, e))?;
    }
    fs::copy(from, to).map_err(|e| VosError::io(from, e))?;
    Ok(())
}
