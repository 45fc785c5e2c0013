//! Image pairs, aligned patch sampling with augmentation, dataset
//! directory I/O, and the teacher-prediction cache.
//!
//! Directory layout: `<root>/hr/*.png`, `<root>/lr/*.png` with matching
//! stems, plus an optional `<root>/teacher/*.png` holding one HR-shaped
//! prediction per image id.

pub mod bicubic;
pub mod png;
pub mod synth;

pub use bicubic::bicubic_resize;
pub use png::{load_png, save_png};
pub use synth::{make_synthetic_dataset, SynthKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// 8-bit RGB image in planar channel-major (CHW) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb8Image {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    /// Normalizes to a `(1, 3, H, W)` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f32::from(v) / 255.0).collect();
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("consistent image buffer")
    }

    /// Denormalizes a `(1, 3, H, W)` tensor: `round_half_even(v * 255)`,
    /// clamped to the 8-bit range.
    pub fn from_tensor(t: &Tensor) -> Result<Rgb8Image> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 {
            return Err(Error::invalid_argument(format!(
                "expected a (1, 3, H, W) tensor, got {:?}",
                t.shape()
            )));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| (f64::from(v) * 255.0).round_ties_even().clamp(0.0, 255.0) as u8)
            .collect();
        Ok(Rgb8Image {
            width: w,
            height: h,
            data,
        })
    }
}

/// A low-resolution image with its 3x-size ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub id: String,
    pub lr: Rgb8Image,
    pub hr: Rgb8Image,
}

impl ImagePair {
    pub fn validate(&self) -> Result<()> {
        if self.hr.width != 3 * self.lr.width || self.hr.height != 3 * self.lr.height {
            return Err(Error::invalid_argument(format!(
                "pair '{}': HR {}x{} is not 3x the LR {}x{}",
                self.id, self.hr.width, self.hr.height, self.lr.width, self.lr.height
            )));
        }
        Ok(())
    }
}

/// Flip/transpose record; each field applied with independent probability
/// one half, identically to the LR, HR, and teacher crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub transpose: bool,
}

/// Applies an augmentation to a square `(1, C, S, S)` tensor in the order
/// hflip, vflip, transpose.
pub fn augment(t: &Tensor, aug: Augmentation) -> Tensor {
    let [n, c, h, w] = t.shape();
    debug_assert_eq!(h, w, "augmentation requires square patches");
    let mut out = Tensor::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (mut sy, mut sx) = (y, x);
                    // inverse mapping, applied in reverse order
                    if aug.transpose {
                        std::mem::swap(&mut sy, &mut sx);
                    }
                    if aug.vflip {
                        sy = h - 1 - sy;
                    }
                    if aug.hflip {
                        sx = w - 1 - sx;
                    }
                    let src = ((ni * c + ci) * h + sy) * w + sx;
                    let dst = ((ni * c + ci) * h + y) * w + x;
                    out.data_mut()[dst] = t.data()[src];
                }
            }
        }
    }
    out
}

/// One aligned training sample in the normalized domain.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub lr_patch: Tensor,
    pub hr_patch: Tensor,
    pub teacher_patch: Option<Tensor>,
    pub augmentation: Augmentation,
}

fn crop(img: &Rgb8Image, x0: usize, y0: usize, size: usize) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut out = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = img.data[c * h * w + (y0 + y) * w + (x0 + x)];
                out.data_mut()[(c * size + y) * size + x] = f32::from(v) / 255.0;
            }
        }
    }
    out
}

/// Samples an aligned LR/HR (and teacher) patch: LR crop of size `p` at a
/// uniform position `(u, v)`, HR crop `[3v..3(v+p), 3u..3(u+p)]`, shared
/// random flips/transpose.
pub fn sample_patch(
    pair: &ImagePair,
    teacher: Option<&Rgb8Image>,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSample> {
    let (lw, lh) = (pair.lr.width, pair.lr.height);
    if p == 0 || p > lw.min(lh) {
        return Err(Error::invalid_argument(format!(
            "patch size {p} exceeds LR size {lw}x{lh} of pair '{}'",
            pair.id
        )));
    }
    let u = rng.gen_range(0..=lw - p);
    let v = rng.gen_range(0..=lh - p);
    let augmentation = Augmentation {
        hflip: rng.gen::<bool>(),
        vflip: rng.gen::<bool>(),
        transpose: rng.gen::<bool>(),
    };
    let lr_patch = augment(&crop(&pair.lr, u, v, p), augmentation);
    let hr_patch = augment(&crop(&pair.hr, 3 * u, 3 * v, 3 * p), augmentation);
    let teacher_patch = teacher
        .map(|t| augment(&crop(t, 3 * u, 3 * v, 3 * p), augmentation));
    Ok(PatchSample {
        lr_patch,
        hr_patch,
        teacher_patch,
        augmentation,
    })
}

/// Stacks `(1, C, H, W)` samples into one `(N, C, H, W)` batch.
pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid_argument("cannot stack an empty batch"))?;
    let [_, c, h, w] = first.shape();
    let mut out = Tensor::zeros([samples.len(), c, h, w]);
    let stride = c * h * w;
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != [1, c, h, w] {
            return Err(Error::invalid_argument(format!(
                "inconsistent sample shapes in batch: {:?} vs {:?}",
                s.shape(),
                first.shape()
            )));
        }
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(s.data());
    }
    Ok(out)
}

/// What to do when an image id has no cached teacher prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingTeacher {
    /// Train that sample without the distillation term.
    SkipSample,
    Error,
}

/// An in-memory dataset with an optional teacher cache.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub teacher: BTreeMap<String, Rgb8Image>,
}

impl Dataset {
    pub fn new(pairs: Vec<ImagePair>) -> Result<Self> {
        for p in &pairs {
            p.validate()?;
        }
        Ok(Dataset {
            pairs,
            teacher: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn teacher_for(&self, id: &str) -> Option<&Rgb8Image> {
        self.teacher.get(id)
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid_argument(format!("unreadable file name {path:?}")))?
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `<root>/hr`, `<root>/lr`, and (when present) `<root>/teacher`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let hr_files = png_stems(&root.join("hr"))?;
    let lr_files = png_stems(&root.join("lr"))?;
    if hr_files.is_empty() {
        return Err(Error::invalid_argument(format!(
            "no PNG files under {:?}",
            root.join("hr")
        )));
    }
    let lr_map: BTreeMap<_, _> = lr_files.into_iter().collect();
    let mut pairs = Vec::new();
    for (id, hr_path) in hr_files {
        let lr_path = lr_map.get(&id).ok_or_else(|| {
            Error::invalid_argument(format!("image '{id}' has an HR file but no LR file"))
        })?;
        let pair = ImagePair {
            hr: load_png(&hr_path)?,
            lr: load_png(lr_path)?,
            id,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    let mut ds = Dataset::new(pairs)?;
    let teacher_dir = root.join("teacher");
    if teacher_dir.is_dir() {
        for pair in &ds.pairs {
            if let Some(t) = teacher_cache_lookup(root, pair)? {
                ds.teacher.insert(pair.id.clone(), t);
            }
        }
    }
    Ok(ds)
}

/// Loads the cached teacher prediction for one image id, shape-checking it
/// against the HR image. Returns `None` when the file does not exist.
pub fn teacher_cache_lookup(root: &Path, pair: &ImagePair) -> Result<Option<Rgb8Image>> {
    let path = root.join("teacher").join(format!("{}.png", pair.id));
    if !path.exists() {
        return Ok(None);
    }
    let img = load_png(&path)?;
    if img.width != pair.hr.width || img.height != pair.hr.height {
        return Err(Error::invalid_argument(format!(
            "teacher prediction for '{}' is {}x{}, HR is {}x{}",
            pair.id, img.width, img.height, pair.hr.width, pair.hr.height
        )));
    }
    Ok(Some(img))
}

/// Writes the dataset directory layout. Refuses to touch a non-empty
/// directory unless `force` is set.
pub fn save_dataset(root: &Path, pairs: &[ImagePair], force: bool) -> Result<()> {
    if root.exists() {
        let non_empty = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::invalid_state(format!(
                "output directory {root:?} is not empty (use force to overwrite)"
            )));
        }
    }
    let hr_dir = root.join("hr");
    let lr_dir = root.join("lr");
    std::fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    std::fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
    for p in pairs {
        save_png(&p.hr, &hr_dir.join(format!("{}.png", p.id)))?;
        save_png(&p.lr, &lr_dir.join(format!("{}.png", p.id)))?;
    }
    Ok(())
}

/// Writes one teacher prediction into the cache directory.
pub fn save_teacher(root: &Path, id: &str, img: &Rgb8Image) -> Result<()> {
    let dir = root.join("teacher");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_png(img, &dir.join(format!("{id}.png")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn coord_pair(lw: usize, lh: usize) -> ImagePair {
        // HR pixels encode their absolute coordinates so crop alignment is
        // checkable exactly: R = x mod 256, G = y mod 256, B = 7
        let (hw, hh) = (3 * lw, 3 * lh);
        let mut hr = Rgb8Image::new(hw, hh);
        for y in 0..hh {
            for x in 0..hw {
                hr.data[y * hw + x] = (x % 256) as u8;
                hr.data[hw * hh + y * hw + x] = (y % 256) as u8;
                hr.data[2 * hw * hh + y * hw + x] = 7;
            }
        }
        let mut lr = Rgb8Image::new(lw, lh);
        for y in 0..lh {
            for x in 0..lw {
                lr.data[y * lw + x] = (x % 256) as u8;
                lr.data[lw * lh + y * lw + x] = (y % 256) as u8;
                lr.data[2 * lw * lh + y * lw + x] = 7;
            }
        }
        ImagePair {
            id: "coords".into(),
            lr,
            hr,
        }
    }

    #[test]
    fn normalization_roundtrip_exact() {
        let img = Rgb8Image {
            width: 16,
            height: 1,
            data: (0..48).map(|i| (i * 5 + 3) as u8).collect(),
        };
        let t = img.to_tensor();
        let back = Rgb8Image::from_tensor(&t).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn whole_image_patch_is_the_image() {
        let pair = coord_pair(6, 6);
        let mut rng = derive_rng(1, "patch-test", 0);
        let s = sample_patch(&pair, None, 6, &mut rng).unwrap();
        assert_eq!(s.lr_patch.shape(), [1, 3, 6, 6]);
        assert_eq!(s.hr_patch.shape(), [1, 3, 18, 18]);
    }

    #[test]
    fn crops_satisfy_coordinate_relation_under_augmentation() {
        let pair = coord_pair(12, 10);
        for i in 0..40 {
            let mut rng = derive_rng(7, "patch-test", i);
            let p = 5;
            let s = sample_patch(&pair, None, p, &mut rng).unwrap();
            // undo the augmentation, then check the index relation
            let undo = |t: &Tensor, a: Augmentation| {
                let t = if a.transpose {
                    augment(t, Augmentation { transpose: true, ..Default::default() })
                } else {
                    t.clone()
                };
                let t = if a.vflip {
                    augment(&t, Augmentation { vflip: true, ..Default::default() })
                } else {
                    t
                };
                if a.hflip {
                    augment(&t, Augmentation { hflip: true, ..Default::default() })
                } else {
                    t
                }
            };
            let lr = undo(&s.lr_patch, s.augmentation);
            let hr = undo(&s.hr_patch, s.augmentation);
            // LR coordinates of the crop origin
            let u = (lr.at(0, 0, 0, 0) * 255.0).round() as usize;
            let v = (lr.at(0, 1, 0, 0) * 255.0).round() as usize;
            for y in 0..3 * p {
                for x in 0..3 * p {
                    let rx = (hr.at(0, 0, y, x) * 255.0).round() as usize;
                    let ry = (hr.at(0, 1, y, x) * 255.0).round() as usize;
                    assert_eq!(rx, 3 * u + x, "sample {i}");
                    assert_eq!(ry, 3 * v + y, "sample {i}");
                }
            }
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let pair = coord_pair(6, 6);
        let t = crop(&pair.lr, 0, 0, 6);
        let tt = augment(
            &t,
            Augmentation {
                transpose: true,
                ..Default::default()
            },
        );
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(tt.at(0, 0, y, x), t.at(0, 0, x, y));
            }
        }
    }

    #[test]
    fn augmentation_is_involutive() {
        let pair = coord_pair(8, 8);
        let t = crop(&pair.hr, 3, 6, 12);
        for bits in 0..8u8 {
            let aug = Augmentation {
                hflip: bits & 1 != 0,
                vflip: bits & 2 != 0,
                transpose: bits & 4 != 0,
            };
            // transpose and flips commute only as an involution when the
            // same composite order is replayed in reverse
            let once = augment(&t, aug);
            let undo_t = if aug.transpose {
                augment(&once, Augmentation { transpose: true, ..Default::default() })
            } else {
                once.clone()
            };
            let undo_v = if aug.vflip {
                augment(&undo_t, Augmentation { vflip: true, ..Default::default() })
            } else {
                undo_t
            };
            let undo_h = if aug.hflip {
                augment(&undo_v, Augmentation { hflip: true, ..Default::default() })
            } else {
                undo_v
            };
            assert_eq!(undo_h.data(), t.data(), "bits {bits:03b}");
        }
    }

    #[test]
    fn patch_too_large_is_rejected() {
        let pair = coord_pair(4, 4);
        let mut rng = derive_rng(1, "patch-test", 0);
        assert!(sample_patch(&pair, None, 5, &mut rng).is_err());
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth::make_synthetic_dataset(SynthKind::Gradients, 3, 24, 3).unwrap();
        save_dataset(dir.path(), &pairs, false).unwrap();
        // teacher cache: ground truth for the first image
        save_teacher(dir.path(), &pairs[0].id, &pairs[0].hr).unwrap();

        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.pairs, pairs);
        assert_eq!(ds.teacher.len(), 1);
        assert_eq!(ds.teacher_for(&pairs[0].id).unwrap(), &pairs[0].hr);

        // refusal on non-empty dir without force
        assert!(save_dataset(dir.path(), &pairs, false).is_err());
        save_dataset(dir.path(), &pairs, true).unwrap();
    }

    #[test]
    fn wrong_shape_teacher_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth::make_synthetic_dataset(SynthKind::Gradients, 1, 24, 4).unwrap();
        save_dataset(dir.path(), &pairs, false).unwrap();
        save_teacher(dir.path(), &pairs[0].id, &pairs[0].lr).unwrap(); // wrong size
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&pairs[0].id), "{err}");
    }
}
