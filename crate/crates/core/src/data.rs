//! Dataset ingestion (CIFAR-10 binary batches, image folders, in-memory sets)
//! and per-sample augmentation with RNG derived from `(seed, epoch, index)`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CvsError, Result};
use crate::tensor::{Shape, Tensor4D};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10Binary,
    ImageFolder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub split: Split,
}

impl DatasetSource {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSource { kind, root: root.into(), split }
    }
}

/// Decodes one 3073-byte CIFAR record: label byte then R, G, B planes of
/// 32×32 row-major bytes. Pixels are scaled by 1/255.
pub fn decode_cifar_record(record: &[u8]) -> Option<(Vec<f32>, u8)> {
    if record.len() != CIFAR_RECORD {
        return None;
    }
    let pixels = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
    Some((pixels, record[0]))
}

/// Inverse of [`decode_cifar_record`] for byte-valued pixels.
pub fn encode_cifar_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), CIFAR_PIXELS, "CIFAR record needs 3072 pixel bytes");
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

#[derive(Clone, Debug)]
enum Storage {
    /// Raw bytes per item (CHW, one byte per channel value).
    Bytes { side: usize, pixels: Vec<u8> },
    Floats { images: Tensor4D<f32> },
}

/// A fully decoded, in-memory split.
#[derive(Clone, Debug)]
pub struct Dataset {
    storage: Storage,
    labels: Vec<usize>,
    classes: usize,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn open(src: &DatasetSource, resolution: usize) -> Result<Self> {
        let ds = match src.kind {
            DatasetKind::Cifar10Binary => Self::open_cifar(&src.root, src.split)?,
            DatasetKind::ImageFolder => Self::open_image_folder(&src.root, src.split, resolution)?,
        };
        if ds.side() != resolution {
            return Err(CvsError::Dataset(format!("images are {0}x{0}, model expects {resolution}x{resolution}", ds.side())));
        }
        Ok(ds)
    }

    pub fn open_cifar(root: &Path, split: Split) -> Result<Self> {
        let files: Vec<&str> = match split {
            Split::Train => CIFAR_TRAIN_FILES.to_vec(),
            Split::Val => vec![CIFAR_TEST_FILE],
        };
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = root.join(f);
            let bytes = std::fs::read(&path).map_err(|e| CvsError::io(&path, e))?;
            let (p, l) = parse_cifar_bytes(&bytes, &path)?;
            pixels.extend(p);
            labels.extend(l);
        }
        let class_names = (0..CIFAR_CLASSES).map(|c| c.to_string()).collect();
        Ok(Dataset { storage: Storage::Bytes { side: CIFAR_SIDE, pixels }, labels, classes: CIFAR_CLASSES, class_names })
    }

    /// `root/<class>/<image>.{png,ppm}`, or `root/<split>/<class>/...` when the
    /// split directory exists. Classes are sorted by name; images are resized
    /// to `resolution` with a triangle filter.
    pub fn open_image_folder(root: &Path, split: Split, resolution: usize) -> Result<Self> {
        let split_dir = root.join(split.dir_name());
        let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
        let mut class_dirs: Vec<PathBuf> = read_dir_sorted(&base)?.into_iter().filter(|p| p.is_dir()).collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(CvsError::Dataset(format!("{} has no class subdirectories", base.display())));
        }
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut class_names = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            for file in read_dir_sorted(dir)? {
                let ext = file.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
                if !matches!(ext.as_deref(), Some("png") | Some("ppm")) {
                    continue;
                }
                pixels.extend(load_image_chw(&file, resolution)?);
                labels.push(label);
            }
        }
        let classes = class_names.len();
        Ok(Dataset { storage: Storage::Bytes { side: resolution, pixels }, labels, classes, class_names })
    }

    pub fn from_tensor(images: Tensor4D<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.c != 3 || s.h != s.w || s.n != labels.len() {
            return Err(CvsError::Dataset(format!("images {s} with {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CvsError::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        let class_names = (0..classes).map(|c| c.to_string()).collect();
        Ok(Dataset { storage: Storage::Floats { images }, labels, classes, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn side(&self) -> usize {
        match &self.storage {
            Storage::Bytes { side, .. } => *side,
            Storage::Floats { images } => images.shape().h,
        }
    }

    /// Images in `[0, 1]` and labels for the given indices, in order.
    pub fn load_batch(&self, indices: &[usize]) -> Result<(Tensor4D<f32>, Vec<usize>)> {
        let side = self.side();
        let item = 3 * side * side;
        let mut data = Vec::with_capacity(indices.len() * item);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CvsError::Dataset(format!("index {i} out of range for {} items", self.len())));
            }
            match &self.storage {
                Storage::Bytes { pixels, .. } => {
                    data.extend(pixels[i * item..(i + 1) * item].iter().map(|&b| b as f32 / 255.0))
                }
                Storage::Floats { images } => data.extend_from_slice(images.item(i)),
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor4D::from_vec(Shape::new(indices.len(), 3, side, side), data)?, labels))
    }
}

fn parse_cifar_bytes(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(CvsError::MalformedRecord {
            path: path.to_path_buf(),
            offset,
            detail: format!("partial record of {} bytes (records are {CIFAR_RECORD})", bytes.len() % CIFAR_RECORD),
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(CvsError::MalformedRecord {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label byte {} outside 0..{CIFAR_CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Reads a CIFAR binary file into (images, labels).
pub fn read_cifar_file(path: &Path) -> Result<(Tensor4D<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| CvsError::io(path, e))?;
    let (pixels, labels) = parse_cifar_bytes(&bytes, path)?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((Tensor4D::from_vec(Shape::new(labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE), data)?, labels))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CvsError::io(dir, e))? {
        out.push(entry.map_err(|e| CvsError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn load_image_chw(path: &Path, side: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| CvsError::Image { path: path.to_path_buf(), detail: e.to_string() })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == side && rgb.height() as usize == side {
        rgb
    } else {
        image::imageops::resize(&rgb, side as u32, side as u32, image::imageops::FilterType::Triangle)
    };
    let plane = side * side;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px.0[c];
        }
    }
    Ok(out)
}

/// Loads a PNG or PPM file as a `1×3×side×side` tensor in `[0, 1]`.
pub fn load_image_tensor(path: &Path, side: usize) -> Result<Tensor4D<f32>> {
    let bytes = load_image_chw(path, side)?;
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor4D::from_vec(Shape::new(1, 3, side, side), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    /// Zero-pad by `pad` pixels then crop back at a random offset.
    PadCrop { pad: usize },
    /// Random area/aspect crop resized back to full size.
    ResizedCrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    pub crop: Option<CropKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, flip: true, crop: Some(CropKind::PadCrop { pad: 4 }) }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig { enabled: false, flip: false, crop: None }
    }

    pub fn for_kind(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Cifar10Binary => Self::default(),
            DatasetKind::ImageFolder => AugmentConfig { crop: Some(CropKind::ResizedCrop), ..Self::default() },
        }
    }
}

/// RNG for one sample; depends only on `(seed, epoch, index)`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng.set_word_pos(index as u128 * 1024);
    rng
}

/// Mirrors every plane left to right.
pub fn hflip(img: &Tensor4D<f32>) -> Tensor4D<f32> {
    let s = img.shape();
    let mut out = img.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = out.plane_mut(n, c);
            for row in plane.chunks_exact_mut(s.w) {
                row.reverse();
            }
        }
    }
    out
}

fn pad_crop(img: &Tensor4D<f32>, pad: usize, dy: usize, dx: usize) -> Tensor4D<f32> {
    let s = img.shape();
    let mut out = Tensor4D::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let sy = (y + dy) as isize - pad as isize;
                if sy < 0 || sy >= s.h as isize {
                    continue;
                }
                for x in 0..s.w {
                    let sx = (x + dx) as isize - pad as isize;
                    if sx >= 0 && sx < s.w as isize {
                        out.set(n, c, y, x, img.at(n, c, sy as usize, sx as usize));
                    }
                }
            }
        }
    }
    out
}

fn bilinear_crop(img: &Tensor4D<f32>, top: f64, left: f64, ch: f64, cw: f64) -> Tensor4D<f32> {
    let s = img.shape();
    let mut out = Tensor4D::zeros(s);
    let sample = |n: usize, c: usize, y: f64, x: f64| -> f32 {
        let y = y.clamp(0.0, (s.h - 1) as f64);
        let x = x.clamp(0.0, (s.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = img.at(n, c, y0, x0) * (1.0 - fx) + img.at(n, c, y0, x1) * fx;
        let bot = img.at(n, c, y1, x0) * (1.0 - fx) + img.at(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let sy = top + (y as f64 + 0.5) * ch / s.h as f64 - 0.5;
                for x in 0..s.w {
                    let sx = left + (x as f64 + 0.5) * cw / s.w as f64 - 0.5;
                    out.set(n, c, y, x, sample(n, c, sy, sx));
                }
            }
        }
    }
    out
}

/// Augments one image (batch of 1) reproducibly.
pub fn augment(img: &Tensor4D<f32>, cfg: &AugmentConfig, seed: u64, epoch: u64, index: u64) -> Tensor4D<f32> {
    if !cfg.enabled {
        return img.clone();
    }
    let mut rng = sample_rng(seed, epoch, index);
    let flip = rng.gen_bool(0.5);
    let s = img.shape();
    let mut out = match cfg.crop {
        None => img.clone(),
        Some(CropKind::PadCrop { pad }) => {
            let dy = rng.gen_range(0..=2 * pad);
            let dx = rng.gen_range(0..=2 * pad);
            pad_crop(img, pad, dy, dx)
        }
        Some(CropKind::ResizedCrop) => {
            let area = (s.h * s.w) as f64;
            let mut chosen = (0.0, 0.0, s.h as f64, s.w as f64);
            for _ in 0..10 {
                let target = area * rng.gen_range(0.35..=1.0);
                let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
                let ratio = log_ratio.exp();
                let cw = (target * ratio).sqrt();
                let ch = (target / ratio).sqrt();
                if cw <= s.w as f64 && ch <= s.h as f64 {
                    let top = rng.gen_range(0.0..=(s.h as f64 - ch));
                    let left = rng.gen_range(0.0..=(s.w as f64 - cw));
                    chosen = (top, left, ch, cw);
                    break;
                }
            }
            bilinear_crop(img, chosen.0, chosen.1, chosen.2, chosen.3)
        }
    };
    if cfg.flip && flip {
        out = hflip(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_255_record_decodes_to_ones() {
        let rec = encode_cifar_record(7, &[255u8; CIFAR_PIXELS]);
        let (px, label) = decode_cifar_record(&rec).unwrap();
        assert_eq!(label, 7);
        assert!(px.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor4D::<f32>::random_uniform(Shape::new(1, 3, 5, 6), 0.0, 1.0, &mut rng);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn augmentation_is_reproducible_and_toggleable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor4D::<f32>::random_uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng);
        for cfg in [AugmentConfig::default(), AugmentConfig::for_kind(DatasetKind::ImageFolder)] {
            assert_eq!(augment(&img, &cfg, 3, 1, 9), augment(&img, &cfg, 3, 1, 9));
        }
        assert_eq!(augment(&img, &AugmentConfig::off(), 3, 1, 9), img);
        let differs = (0..20).any(|i| augment(&img, &AugmentConfig::default(), 3, 1, i) != img);
        assert!(differs);
    }

    #[test]
    fn pad_crop_at_centre_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor4D::<f32>::random_uniform(Shape::new(1, 3, 6, 6), 0.0, 1.0, &mut rng);
        assert_eq!(pad_crop(&img, 4, 4, 4), img);
        let shifted = pad_crop(&img, 4, 5, 4);
        assert_eq!(shifted.at(0, 0, 0, 0), img.at(0, 0, 1, 0));
        assert_eq!(shifted.at(0, 0, 5, 0), 0.0);
    }
}
