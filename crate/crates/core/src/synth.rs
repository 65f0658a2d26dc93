//! Synthetic fixture: saturated squares sliding over a gray background.
//!
//! Each object owns a horizontal lane, so objects never overlap. Squares are
//! 16 px and start on the 4 px grid; they move 4 px per frame and bounce off
//! the side margins. Margins and lane gaps are wide enough that no
//! background cell near the border sees a mirrored square through the
//! encoder's reflect padding.

use std::path::Path;

use crate::dataset::{write_image, write_mask, ANNOTATIONS_DIR, FRAMES_DIR};
use crate::error::{Result, VosError};
use crate::rng::SeededRng;
use crate::tensor::{Image, LabelMask};

pub const SQUARE: usize = 16;
pub const STEP: usize = 4;
pub const WIDTH: usize = 96;
const LANE: usize = 32;
const MARGIN: usize = 16;
const BACKGROUND: [u8; 3] = [128, 128, 128];
const COLORS: [[u8; 3]; 6] = [
    [230, 20, 20],
    [20, 200, 40],
    [30, 60, 230],
    [240, 220, 10],
    [220, 30, 220],
    [20, 220, 230],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSequence {
    pub id: String,
    pub frames: Vec<Image>,
    pub masks: Vec<LabelMask>,
}

pub fn max_objects() -> usize {
    COLORS.len()
}

/// Frame height for `objects` lanes.
pub fn height_for(objects: usize) -> usize {
    2 * MARGIN + (objects - 1) * LANE + SQUARE
}

pub fn generate(frames: usize, objects: usize, seed: u64) -> Result<SynthSequence> {
    if frames < 2 {
        return Err(VosError::arg("synthetic sequences need at least 2 frames"));
    }
    if objects == 0 || objects > COLORS.len() {
        return Err(VosError::arg(format!("objects must be in 1..={}", COLORS.len())));
    }
    let h = height_for(objects);
    let mut rng = SeededRng::new(seed);
    let positions = (WIDTH - SQUARE - 2 * MARGIN) / STEP + 1;
    let mut state: Vec<(usize, bool)> = (0..objects)
        .map(|_| (MARGIN + STEP * rng.below(positions as u64) as usize, rng.coin()))
        .collect();
    let mut out = SynthSequence {
        id: "synth".into(),
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
    };
    for _ in 0..frames {
        let mut img = Image::filled(h, WIDTH, BACKGROUND);
        let mut labels = vec![0u8; h * WIDTH];
        for (i, &(x0, _)) in state.iter().enumerate() {
            let y0 = MARGIN + i * LANE;
            for y in y0..y0 + SQUARE {
                for x in x0..x0 + SQUARE {
                    img.set_pixel(y, x, COLORS[i]);
                    labels[y * WIDTH + x] = i as u8 + 1;
                }
            }
        }
        out.frames.push(img);
        out.masks.push(LabelMask::new(h, WIDTH, objects as u8, labels)?);
        for (x, right) in state.iter_mut() {
            let max_x = WIDTH - MARGIN - SQUARE;
            if *right && *x + STEP > max_x {
                *right = false;
            } else if !*right && *x < MARGIN + STEP {
                *right = true;
            }
            *x = if *right { *x + STEP } else { *x - STEP };
        }
    }
    Ok(out)
}

/// Writes the sequence in dataset layout, with ground truth for every frame.
pub fn write_dataset(root: &Path, seq: &SynthSequence) -> Result<()> {
    for (i, (img, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let stem = format!("{:05}", i);
        write_image(&root.join(FRAMES_DIR).join(&seq.id).join(format!("{stem}.png")), img)?;
        write_mask(
            &root.join(ANNOTATIONS_DIR).join(&seq.id).join(format!("{stem}.png")),
            mask,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_and_motion() {
        let s = generate(6, 2, 3).unwrap();
        assert_eq!(s.frames.len(), 6);
        let h = height_for(2);
        assert_eq!(h % 4, 0);
        for m in &s.masks {
            assert_eq!((m.height(), m.width()), (h, WIDTH));
            assert_eq!(m.count(1), SQUARE * SQUARE);
            assert_eq!(m.count(2), SQUARE * SQUARE);
        }
        for pair in s.masks.windows(2) {
            let left = |m: &LabelMask, o: u8| m.support(o)[0] % WIDTH;
            let d = left(&pair[1], 1) as isize - left(&pair[0], 1) as isize;
            assert_eq!(d.abs(), STEP as isize);
            assert_eq!(left(&pair[0], 1) % 4, 0);
        }
        assert_eq!(s, generate(6, 2, 3).unwrap());
        assert!(generate(1, 2, 0).is_err());
        assert!(generate(3, 7, 0).is_err());
    }
}
