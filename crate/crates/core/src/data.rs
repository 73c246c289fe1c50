//! IDX ingestion (MNIST / FashionMNIST), batching and splits.
//!
//! IDX files are a big-endian container: a 4-byte magic whose low byte is the
//! rank (`0x00000803` for image stacks, `0x00000801` for label vectors), one
//! 4-byte extent per dimension, then the unsigned-byte payload. Gzipped files
//! (as distributed) are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileProvenance {
    pub path: PathBuf,
    /// SHA-256 of the file bytes as stored on disk.
    pub sha256: String,
}

/// Images `[N, 1, H, W]` with pixels in `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub provenance: Vec<FileProvenance>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for image stack {:?}", labels.len(), images.shape()),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            provenance: vec![],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Ok(Dataset {
            images,
            labels,
            provenance: self.provenance.clone(),
        })
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

fn read_maybe_gz(path: &Path) -> Result<(Vec<u8>, String)> {
    let raw = fs::read(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let sha = hex::encode(Sha256::digest(&raw));
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                reason: format!("gzip: {e}"),
            })?;
        Ok((out, sha))
    } else {
        Ok((raw, sha))
    }
}

/// Parsed IDX header: magic, extents and byte offset of the payload.
fn parse_idx_header(bytes: &[u8], expected_magic: u32) -> std::result::Result<(Vec<usize>, usize), String> {
    let word = |i: usize| -> std::result::Result<u32, String> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| "truncated header".to_string())
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let offset = 4 * (rank + 1);
    let payload: usize = dims.iter().product();
    if bytes.len() < offset + payload {
        return Err(format!(
            "truncated payload: header declares {payload} bytes, file has {}",
            bytes.len() - offset
        ));
    }
    if bytes.len() > offset + payload {
        return Err(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset - payload
        ));
    }
    Ok((dims, offset))
}

/// Load an image/label IDX pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ingest = |path: &Path, reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };

    let (img_bytes, img_sha) = read_maybe_gz(ip)?;
    let (dims, off) = parse_idx_header(&img_bytes, IDX_IMAGES_MAGIC).map_err(|r| ingest(ip, r))?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(ingest(ip, format!("empty image stack {n}x{h}x{w}")));
    }
    let pixels: Vec<f64> = img_bytes[off..].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;

    let (lbl_bytes, lbl_sha) = read_maybe_gz(lp)?;
    let (ldims, loff) = parse_idx_header(&lbl_bytes, IDX_LABELS_MAGIC).map_err(|r| ingest(lp, r))?;
    if ldims[0] != n {
        return Err(ingest(lp, format!("{} labels for {n} images", ldims[0])));
    }
    let labels: Vec<usize> = lbl_bytes[loff..].iter().map(|&b| b as usize).collect();

    let mut ds = Dataset::new(images, labels)?;
    ds.provenance = vec![
        FileProvenance {
            path: ip.to_path_buf(),
            sha256: img_sha,
        },
        FileProvenance {
            path: lp.to_path_buf(),
            sha256: lbl_sha,
        },
    ];
    Ok(ds)
}

/// Serialize images (`[N, 1, H, W]` or `[N, H, W]` with values in `[0, 1]`) and
/// labels as an uncompressed IDX pair.
pub fn encode_idx(images: &Tensor, labels: &[usize]) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = images.shape();
    let (n, h, w) = match s.len() {
        4 => (s[0], s[2], s[3]),
        3 => (s[0], s[1], s[2]),
        _ => return Err(Error::shape("encode_idx", format!("unsupported image shape {s:?}"))),
    };
    if n != labels.len() {
        return Err(Error::shape("encode_idx", "image/label count mismatch"));
    }
    let mut img = Vec::with_capacity(16 + images.len());
    for word in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend(
        images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lbl = Vec::with_capacity(8 + n);
    for word in [IDX_LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&word.to_be_bytes());
    }
    lbl.extend(labels.iter().map(|&l| l as u8));
    Ok((img, lbl))
}

/// The image repeated unchanged at each of `steps` steps: `[T, ...image.shape]`.
pub fn static_encode(image: &Tensor, steps: usize) -> Result<Tensor> {
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    let data = image.data().repeat(steps);
    Tensor::new(shape, data)
}

/// Shuffled minibatch index lists for one epoch; the final batch may be short.
/// The order depends only on `(seed, epoch)`.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, epoch as u32));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Disjoint, exhaustive, seeded split. The validation part holds
/// `round(len · fraction)` samples.
pub fn split(dataset: &Dataset, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, val_idx) = split_indices(dataset.len(), validation_fraction, seed)?;
    Ok((dataset.subset(&train_idx)?, dataset.subset(&val_idx)?))
}

pub fn split_indices(len: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, Stream::Split, 0));
    let n_val = (len as f64 * validation_fraction).round() as usize;
    let val = order.split_off(len - n_val);
    Ok((order, val))
}
