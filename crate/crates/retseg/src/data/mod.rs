//! Image/mask loading, dataset manifests, batching, and PNG mask output.
//!
//! Directory layout for real datasets: `<root>/images/<id>.png` with a
//! matching `<root>/masks/<id>.png` per image. Images may be grayscale or
//! RGB; masks are read as grayscale and binarized.

mod synthetic;

pub use synthetic::{generate_synthetic_dataset, synthesize_sample, BlobParams, Ellipse};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::{mix_seed, STREAM_SHUFFLE};
use crate::tensor::Tensor;

/// One image/mask pair, resized and scaled: image in `[0,1]`, mask in `{0,1}`.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, S, S]`
    pub image: Tensor,
    /// `[1, S, S]`
    pub mask: Tensor,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub id: String,
}

/// Ordered list of image/mask pairs under one root, lexicographic by id.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    split: SplitTag,
}

impl DatasetManifest {
    /// Scans `<root>/images` and pairs every image with its mask by stem.
    pub fn from_directory(root: impl AsRef<Path>, split: SplitTag) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let images_dir = root.join("images");
        let masks_dir = root.join("masks");
        if !images_dir.is_dir() {
            return Err(Error::Data(format!(
                "{} is not a directory (expected <root>/images)",
                images_dir.display()
            )));
        }
        let mut entries = Vec::new();
        let listing = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for entry in listing {
            let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
            let image_path = entry.path();
            if image_path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let id = image_path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    Error::Data(format!("unusable file name {}", image_path.display()))
                })?
                .to_string();
            let mask_path = masks_dir.join(format!("{id}.png"));
            if !mask_path.is_file() {
                return Err(Error::Data(format!(
                    "image '{id}' has no mask at {}",
                    mask_path.display()
                )));
            }
            entries.push(ManifestEntry {
                image_path,
                mask_path,
                id,
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "no PNG images found under {}",
                images_dir.display()
            )));
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(DatasetManifest {
            root,
            entries,
            split,
        })
    }

    fn from_entries(root: PathBuf, mut entries: Vec<ManifestEntry>, split: SplitTag) -> Self {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        DatasetManifest {
            root,
            entries,
            split,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, index: usize, target_size: usize) -> Result<Sample> {
        let e = &self.entries[index];
        let mut sample = load_sample(&e.image_path, &e.mask_path, target_size)?;
        sample.id = e.id.clone();
        Ok(sample)
    }
}

/// Bilinear resize with half-pixel centers, identical convention to the
/// network's upsampling layer.
fn resize_bilinear_plane(src: &[f64], w: usize, h: usize, out: usize) -> Vec<f64> {
    let xt = crate::tensor::bilinear_taps_for(out, w);
    let yt = crate::tensor::bilinear_taps_for(out, h);
    let mut dst = vec![0.0f64; out * out];
    for (y, &(y0, y1, wy)) in yt.iter().enumerate() {
        for (x, &(x0, x1, wx)) in xt.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            dst[y * out + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    dst
}

/// Nearest-neighbour index map with the same half-pixel convention.
fn nearest_taps(out_len: usize, in_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// Loads one image/mask pair: the image is resized bilinearly and scaled by
/// 1/255; the mask is resized nearest-neighbour and thresholded at 128.
/// Image and mask may differ in size before resizing.
pub fn load_sample(
    image_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
    target_size: usize,
) -> Result<Sample> {
    let image_path = image_path.as_ref();
    let mask_path = mask_path.as_ref();
    for p in [image_path, mask_path] {
        if !p.is_file() {
            return Err(Error::Data(format!("missing file {}", p.display())));
        }
    }
    let img = image::open(image_path).map_err(|source| Error::ImageDecode {
        path: image_path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image_data = Vec::with_capacity(3 * target_size * target_size);
    for c in 0..3 {
        let plane: Vec<f64> = rgb.pixels().map(|px| px.0[c] as f64 / 255.0).collect();
        image_data.extend_from_slice(&resize_bilinear_plane(&plane, w, h, target_size));
    }
    let image = Tensor::new(vec![3, target_size, target_size], image_data)?;

    let mask_img = image::open(mask_path).map_err(|source| Error::ImageDecode {
        path: mask_path.to_path_buf(),
        source,
    })?;
    let gray = mask_img.to_luma8();
    let (mw, mh) = (gray.width() as usize, gray.height() as usize);
    let xt = nearest_taps(target_size, mw);
    let yt = nearest_taps(target_size, mh);
    let raw = gray.as_raw();
    let mut mask_data = Vec::with_capacity(target_size * target_size);
    for &sy in &yt {
        for &sx in &xt {
            mask_data.push(if raw[sy * mw + sx] >= 128 { 1.0 } else { 0.0 });
        }
    }
    let mask = Tensor::new(vec![1, target_size, target_size], mask_data)?;

    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok(Sample { image, mask, id })
}

/// Deterministic shuffled split: `round(n * train_fraction)` entries go to
/// the train manifest, the rest to validation; no overlap, union preserved.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param(
            "split_dataset",
            format!("train_fraction must be in (0,1), got {train_fraction}"),
        ));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SHUFFLE, 0));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let train_count = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let train_entries = order[..train_count]
        .iter()
        .map(|&i| manifest.entries[i].clone())
        .collect();
    let val_entries = order[train_count..]
        .iter()
        .map(|&i| manifest.entries[i].clone())
        .collect();
    Ok((
        DatasetManifest::from_entries(manifest.root.clone(), train_entries, SplitTag::Train),
        DatasetManifest::from_entries(manifest.root.clone(), val_entries, SplitTag::Val),
    ))
}

/// In-memory variant of [`split_dataset`] with the same shuffle and
/// rounding rules.
pub fn split_samples(
    samples: Vec<Sample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot split an empty sample set".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param(
            "split_samples",
            format!("train_fraction must be in (0,1), got {train_fraction}"),
        ));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SHUFFLE, 0));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let train_count = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<Sample>>, idx: &[usize]| -> Vec<Sample> {
        let mut out: Vec<Sample> = idx
            .iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    };
    let train = take(&mut slots, &order[..train_count]);
    let val = take(&mut slots, &order[train_count..]);
    Ok((train, val))
}

/// Writes samples to `<dir>/images` and `<dir>/masks` as 8-bit PNGs, the
/// same layout [`DatasetManifest::from_directory`] reads.
pub fn export_samples(samples: &[Sample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for sample in samples {
        let s = sample.image.shape()[1];
        let data = sample.image.data();
        let plane = s * s;
        let img = image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let i = y as usize * s + x as usize;
            image::Rgb([
                (data[i].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[plane + i].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[2 * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8,
            ])
        });
        let ipath = images.join(format!("{}.png", sample.id));
        img.save(&ipath)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", ipath.display())))?;
        write_mask_png(
            &sample.mask,
            masks.join(format!("{}.png", sample.id)),
            MaskPngMode::Threshold(0.5),
        )?;
    }
    Ok(())
}

/// Decodes and bilinearly resizes an image alone (no mask); used by
/// inference.
pub fn load_image_tensor(path: impl AsRef<Path>, target_size: usize) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::Data(format!("missing file {}", path.display())));
    }
    let img = image::open(path).map_err(|source| Error::ImageDecode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Vec::with_capacity(3 * target_size * target_size);
    for c in 0..3 {
        let plane: Vec<f64> = rgb.pixels().map(|px| px.0[c] as f64 / 255.0).collect();
        data.extend_from_slice(&resize_bilinear_plane(&plane, w, h, target_size));
    }
    Tensor::new(vec![3, target_size, target_size], data)
}

/// Original pixel dimensions of an image file.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::ImageDecode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((w as usize, h as usize))
}

/// How probabilities become pixels in [`write_mask_png`].
#[derive(Clone, Copy, Debug)]
pub enum MaskPngMode {
    /// `p >= threshold` becomes 255, everything else 0.
    Threshold(f64),
    /// `round(p * 255)` (half away from zero).
    Raw,
}

/// Writes a `[1,S,S]` (or `[S,S]`) probability map as an 8-bit grayscale PNG.
pub fn write_mask_png(map: &Tensor, path: impl AsRef<Path>, mode: MaskPngMode) -> Result<()> {
    let path = path.as_ref();
    let shape = map.shape();
    let (h, w) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 if shape[0] == 1 => (shape[1], shape[2]),
        4 if shape[0] == 1 && shape[1] == 1 => (shape[2], shape[3]),
        _ => {
            return Err(Error::shape(
                "write_mask_png",
                format!("expected one grayscale plane, got {shape:?}"),
            ))
        }
    };
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|&p| match mode {
            MaskPngMode::Threshold(t) => {
                if p >= t {
                    255
                } else {
                    0
                }
            }
            MaskPngMode::Raw => (p.clamp(0.0, 1.0) * 255.0).round() as u8,
        })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("cannot write {}: {other}", path.display())),
    })
}

/// A batching source: either in-memory samples (synthetic) or a manifest
/// loaded lazily from disk at a fixed target size.
pub enum Dataset {
    Memory(Vec<Sample>),
    Disk {
        manifest: DatasetManifest,
        target_size: usize,
    },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Memory(v) => v.len(),
            Dataset::Disk { manifest, .. } => manifest.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        match self {
            Dataset::Memory(v) => Ok(v[index].clone()),
            Dataset::Disk {
                manifest,
                target_size,
            } => manifest.load(index, *target_size),
        }
    }
}

/// Stacks samples into `([B,3,S,S], [B,1,S,S])` batch tensors.
pub fn stack_batch(samples: &[Sample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let s = samples[0].image.shape()[1];
    let mut images = Vec::with_capacity(samples.len() * 3 * s * s);
    let mut masks = Vec::with_capacity(samples.len() * s * s);
    for sample in samples {
        if sample.image.shape() != [3, s, s] || sample.mask.shape() != [1, s, s] {
            return Err(Error::shape(
                "stack_batch",
                format!(
                    "sample '{}' has image {:?} / mask {:?}, expected [3,{s},{s}] / [1,{s},{s}]",
                    sample.id,
                    sample.image.shape(),
                    sample.mask.shape()
                ),
            ));
        }
        images.extend_from_slice(sample.image.data());
        masks.extend_from_slice(sample.mask.data());
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, s, s], images)?,
        Tensor::new(vec![samples.len(), 1, s, s], masks)?,
    ))
}

/// Per-epoch deterministic shuffle keyed by `(seed, epoch)`; the final short
/// batch is included.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIterator<'_>> {
    if batch_size == 0 {
        return Err(Error::param("batch_iterator", "batch_size must be >= 1"));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SHUFFLE, epoch + 1));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Ok(BatchIterator {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

impl BatchIterator<'_> {
    /// Sample indices in iteration order; tests use this for epoch coverage.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<(Tensor, Tensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = &self.order[self.pos..end];
        self.pos = end;
        let samples: Result<Vec<Sample>> = indices.iter().map(|&i| self.dataset.get(i)).collect();
        Some(samples.and_then(|s| stack_batch(&s)))
    }
}
