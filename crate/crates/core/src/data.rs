//! Datasets: IDX ingestion, a synthetic two-class fixture and center crops.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::STRIDE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Channels produced from grayscale input.
pub const CHANNELS: usize = 3;

/// Normalized images (`channels×H×W` each) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 || !shape[1].is_multiple_of(STRIDE) || !shape[2].is_multiple_of(STRIDE) {
            return Err(Error::Dataset(format!(
                "images must be channels x H x W with H, W divisible by {STRIDE}; got {shape:?}"
            )));
        }
        if let Some(i) = images.iter().position(|im| im.shape() != &shape[..]) {
            return Err(Error::Dataset(format!(
                "image {i} has shape {:?}, expected {shape:?}",
                images[i].shape()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {l} of sample {i} is outside {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(channels, H, W)` shared by every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    /// Center-crops every image to `size×size` when larger.
    pub fn center_cropped(&self, size: usize) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|im| center_crop(im, size))
            .collect::<Result<_>>()?;
        Self::new(images, self.labels.clone(), self.num_classes)
    }
}

// ---------------------------------------------------------------------------
// IDX

/// Parsed IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32, what: &str) -> Result<IdxArray> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format(format!("{what}: truncated IDX header")))
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 * (ndim + 1);
    let count: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != count {
        return Err(Error::Format(format!(
            "{what}: header promises {count} bytes of data, file holds {}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn encode_idx_images(images: &[Vec<u8>], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + images.len() * height * width);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), height, width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for (i, im) in images.iter().enumerate() {
        if im.len() != height * width {
            return Err(Error::Dataset(format!(
                "image {i} has {} pixels, expected {}",
                im.len(),
                height * width
            )));
        }
        out.extend_from_slice(im);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Smallest replication factor in {1, 2, 4} making both sides divisible by
/// the backbone stride.
pub fn replication_factor(height: usize, width: usize) -> usize {
    [1, 2, 4]
        .into_iter()
        .find(|k| (height * k).is_multiple_of(STRIDE) && (width * k).is_multiple_of(STRIDE))
        .expect("factor 4 always works")
}

/// `(b/255 − 0.5)/0.5` on one grayscale image, copied to every channel
/// and upsampled by pixel replication.
pub fn normalize_gray(pixels: &[u8], height: usize, width: usize) -> Result<Tensor<f32>> {
    let k = replication_factor(height, width);
    let (h, w) = (height * k, width * k);
    let mut plane = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let b = pixels[(y / k) * width + x / k];
            plane.push((f32::from(b) / 255.0 - 0.5) / 0.5);
        }
    }
    let data = plane.iter().copied().cycle().take(CHANNELS * h * w).collect();
    Tensor::new(&[CHANNELS, h, w], data)
}

pub fn dataset_from_idx(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let im = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let lb = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    let (count, h, w) = (im.dims[0], im.dims[1], im.dims[2]);
    if count != lb.dims[0] {
        return Err(Error::Dataset(format!(
            "count mismatch: {count} images but {} labels",
            lb.dims[0]
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Dataset(format!("degenerate image size {h}x{w}")));
    }
    let tensors = im
        .data
        .chunks(h * w)
        .map(|px| normalize_gray(px, h, w))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lb.data.iter().map(|&b| usize::from(b)).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(tensors, labels, classes)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    dataset_from_idx(&fs::read(images)?, &fs::read(labels)?, num_classes)
}

// ---------------------------------------------------------------------------
// synthetic blobs

pub const SYNTHETIC_SAMPLES: usize = 64;
pub const SYNTHETIC_SIZE: usize = 16;
const BLOB_SIDE: usize = 4;

/// Two-class fixture: one bright `4×4` block per image whose position is a
/// Gaussian draw around a class-specific center (upper-left vs lower-right),
/// over low-amplitude noise. Classes alternate, so the set is balanced.
pub fn synthetic_blobs(samples: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 2 * BLOB_SIDE || !size.is_multiple_of(STRIDE) {
        return Err(Error::Config(format!(
            "synthetic image size must be a multiple of {STRIDE} and at least {}",
            2 * BLOB_SIDE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, size as f64 / 16.0).expect("positive std");
    let noise = Normal::new(0.0f32, 0.1).expect("positive std");
    let max_origin = (size - BLOB_SIDE) as f64;
    let centers = [size as f64 * 0.25, size as f64 * 0.75];
    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 2;
        let c = centers[label] - BLOB_SIDE as f64 / 2.0;
        let oy = (c + jitter.sample(&mut rng)).round().clamp(0.0, max_origin) as usize;
        let ox = (c + jitter.sample(&mut rng)).round().clamp(0.0, max_origin) as usize;
        let tint: f32 = rng.random_range(0.6..1.0);
        let mut data = Vec::with_capacity(CHANNELS * size * size);
        for _ in 0..CHANNELS {
            for y in 0..size {
                for x in 0..size {
                    let inside = (oy..oy + BLOB_SIDE).contains(&y) && (ox..ox + BLOB_SIDE).contains(&x);
                    let base = if inside { tint } else { -0.5 };
                    data.push(base + noise.sample(&mut rng));
                }
            }
        }
        images.push(Tensor::new(&[CHANNELS, size, size], data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, 2)
}

// ---------------------------------------------------------------------------
// cropping

/// Central `size×size` window; images no larger than `size` pass through.
pub fn center_crop(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (ch, h, w) = image.dims3()?;
    if h <= size && w <= size {
        return Ok(image.clone());
    }
    let (th, tw) = (h.min(size), w.min(size));
    let (y0, x0) = ((h - th) / 2, (w - tw) / 2);
    let mut data = Vec::with_capacity(ch * th * tw);
    for c in 0..ch {
        for y in y0..y0 + th {
            let row = c * h * w + y * w;
            data.extend_from_slice(&image.data()[row + x0..row + x0 + tw]);
        }
    }
    Tensor::new(&[ch, th, tw], data)
}
