//! Dataset ingestion, preprocessing and checkpoint persistence.
//!
//! Datasets are directories with an `images/` and optional `masks/` folder
//! plus a `manifest.csv` table (columns `image,mask,label,split`). Images are
//! lossless PNG; masks encode class `c` in colour channel `c`. Checkpoints
//! are a single binary file with a version header, a JSON metadata snapshot,
//! the named weight arrays and a SHA-256 digest over the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{resize_bilinear_array, Arr, ParamSet};
use crate::error::{Error, Result};

/// Sample counts of the public benchmark datasets this layout is meant to
/// host (fundus/glaucoma, thyroid ultrasound, dermoscopy), kept as
/// documentation; no downloader is provided.
pub const REFERENCE_DATASET_SIZES: [(&str, usize); 3] =
    [("REFUGE-2", 1200), ("TNMIX", 8046), ("ISIC", 1600)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One decoded sample: image `H x W x 3` in [0, 1] (or standardized), an
/// optional `H x W x K` binary mask, and the disease label.
#[derive(Clone)]
pub struct Sample {
    pub image: Arr,
    pub mask: Option<Arr>,
    pub label: u8,
    pub split: Split,
}

/// In-memory dataset with per-channel normalization bookkeeping.
#[derive(Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub image_size: usize,
    pub seg_classes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in &self.samples {
            match s.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    /// Per-channel mean and standard deviation over the training split.
    pub fn normalization_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let train = self.split(Split::Train);
        let channels = 3;
        let mut mean = vec![0.0; channels];
        let mut count = 0usize;
        for s in &train {
            let shape = s.image.shape();
            count += shape[0] * shape[1];
            for c in 0..channels {
                mean[c] += s.image.index_axis(ndarray::Axis(2), c).sum();
            }
        }
        for m in &mut mean {
            *m /= count.max(1) as f64;
        }
        let mut var = vec![0.0; channels];
        for s in &train {
            for c in 0..channels {
                var[c] += s
                    .image
                    .index_axis(ndarray::Axis(2), c)
                    .iter()
                    .map(|&v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&v| (v / count.max(1) as f64).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }

    /// Standardize every image in place with the given per-channel stats.
    pub fn apply_normalization(&mut self, mean: &[f64], std: &[f64]) {
        for s in &mut self.samples {
            for c in 0..3 {
                s.image
                    .index_axis_mut(ndarray::Axis(2), c)
                    .mapv_inplace(|v| (v - mean[c]) / std[c]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Image files
// ---------------------------------------------------------------------------

/// Save an `H x W x 3` array in [0, 1] as an 8-bit PNG.
pub fn save_image_png(path: &Path, image: &Arr) -> Result<()> {
    let shape = image.shape();
    let (h, w) = (shape[0], shape[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

/// Save an `H x W x K` binary mask (K <= 3) as PNG with class `c` in
/// colour channel `c`.
pub fn save_mask_png(path: &Path, mask: &Arr) -> Result<()> {
    let shape = mask.shape();
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    if k > 3 {
        return Err(Error::Config(format!(
            "mask PNG encoding supports at most 3 classes, got {k}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate().take(k) {
                *slot = if mask[[y, x, c]] >= 0.5 { 255 } else { 0 };
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn load_png(path: &Path) -> Result<Arr> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Arr::zeros(IxDyn(&[h as usize, w as usize, 3]));
    for y in 0..h as usize {
        for x in 0..w as usize {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[y, x, c]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize for masks (labels must stay crisp).
pub fn resize_nearest(x: &Arr, oh: usize, ow: usize) -> Arr {
    let shape = x.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = Arr::zeros(IxDyn(&[oh, ow, c]));
    for oy in 0..oh {
        for ox in 0..ow {
            let iy = (((oy as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
            let ix = (((ox as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            for ch in 0..c {
                out[[oy, ox, ch]] = x[[iy, ix, ch]];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Load a dataset through its manifest. Paths in the manifest are relative
/// to the manifest's directory. Images resize bilinearly and masks by
/// nearest neighbour to `target_size`.
pub fn load_dataset(manifest: &Path, seg_classes: usize, target_size: usize) -> Result<Dataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest)
        .map_err(|e| Error::Manifest {
            row: 0,
            reason: format!("cannot open {}: {e}", manifest.display()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            row: 0,
            reason: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Manifest {
                row: 0,
                reason: format!("missing column {name:?}"),
            })
    };
    let (ci, cm, cl, cs) = (col("image")?, col("mask")?, col("label")?, col("split")?);

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Manifest {
            row,
            reason: e.to_string(),
        })?;
        let image_rel = &record[ci];
        let image_path = dir.join(image_rel);
        if !image_path.exists() {
            return Err(Error::Manifest {
                row,
                reason: format!("image file missing: {}", image_path.display()),
            });
        }
        let raw = load_png(&image_path).map_err(|e| Error::Manifest {
            row,
            reason: format!("undecodable image: {e}"),
        })?;
        let image = if raw.shape()[0] != target_size || raw.shape()[1] != target_size {
            resize_bilinear_array(&raw, target_size, target_size)
        } else {
            raw
        };

        let mask_rel = record[cm].trim();
        let mask = if mask_rel.is_empty() {
            None
        } else {
            let mask_path = dir.join(mask_rel);
            if !mask_path.exists() {
                return Err(Error::Manifest {
                    row,
                    reason: format!("mask file missing: {}", mask_path.display()),
                });
            }
            let raw_mask = load_png(&mask_path).map_err(|e| Error::Manifest {
                row,
                reason: format!("undecodable mask: {e}"),
            })?;
            if raw_mask.shape()[0] * target_size != raw_mask.shape()[1] * target_size
                && raw_mask.shape()[0] != raw_mask.shape()[1]
            {
                return Err(Error::Manifest {
                    row,
                    reason: "mask is not square while image is".into(),
                });
            }
            let resized = if raw_mask.shape()[0] != target_size {
                resize_nearest(&raw_mask, target_size, target_size)
            } else {
                raw_mask
            };
            // keep only the first K channels, re-binarized
            let mut mask = Arr::zeros(IxDyn(&[target_size, target_size, seg_classes]));
            for y in 0..target_size {
                for x in 0..target_size {
                    for c in 0..seg_classes {
                        mask[[y, x, c]] = if resized[[y, x, c]] >= 0.5 { 1.0 } else { 0.0 };
                    }
                }
            }
            Some(mask)
        };

        let label: i64 = record[cl].trim().parse().map_err(|_| Error::Manifest {
            row,
            reason: format!("label {:?} is not an integer", &record[cl]),
        })?;
        if label != 0 && label != 1 {
            return Err(Error::Manifest {
                row,
                reason: format!("label must be 0 or 1, got {label}"),
            });
        }
        let split = Split::parse(record[cs].trim()).ok_or_else(|| Error::Manifest {
            row,
            reason: format!("unknown split {:?}", &record[cs]),
        })?;
        samples.push(Sample {
            image,
            mask,
            label: label as u8,
            split,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        samples,
        image_size: target_size,
        seg_classes,
    })
}

/// Write a dataset directory: `images/`, `masks/`, `manifest.csv`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(masks.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path).map_err(|e| Error::Manifest {
        row: 0,
        reason: format!("cannot create manifest: {e}"),
    })?;
    w.write_record(["image", "mask", "label", "split"])
        .map_err(|e| Error::Manifest {
            row: 0,
            reason: e.to_string(),
        })?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let image_rel = format!("images/{i:05}.png");
        save_image_png(&dir.join(&image_rel), &s.image)?;
        let mask_rel = match &s.mask {
            Some(mask) => {
                let rel = format!("masks/{i:05}.png");
                save_mask_png(&dir.join(&rel), mask)?;
                rel
            }
            None => String::new(),
        };
        w.write_record([
            image_rel.as_str(),
            mask_rel.as_str(),
            &s.label.to_string(),
            s.split.as_str(),
        ])
        .map_err(|e| Error::Manifest {
            row: i + 1,
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SEATCKPT";
const CKPT_VERSION: u32 = 1;

/// Checkpoint metadata persisted alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// Snapshot of the model/experiment configuration (JSON text).
    pub config_json: String,
    pub seed: u64,
    pub step: u64,
    /// Per-channel normalization applied to inputs at train time.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Serialize every parameter (bitwise) plus metadata and a digest.
pub fn checkpoint_bytes(params: &ParamSet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let v = p.value();
        out.extend_from_slice(&(v.ndim() as u64).to_le_bytes());
        for &d in v.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(params: &ParamSet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params, meta);
    let mut f = BufWriter::new(
        File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    f.write_all(&bytes)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct ByteCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint into an existing parameter set. Every stored array must
/// resolve to a registered parameter of the same shape; the digest and
/// version are verified first.
pub fn load_checkpoint(params: &ParamSet, path: &Path) -> Result<CheckpointMeta> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint_bytes(params, &bytes)
}

pub fn load_checkpoint_bytes(params: &ParamSet, bytes: &[u8]) -> Result<CheckpointMeta> {
    if bytes.len() < 32 + 12 {
        return Err(Error::Checkpoint("file truncated".into()));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(payload);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("digest mismatch; file corrupted".into()));
    }
    let mut cur = ByteCursor {
        data: payload,
        pos: 0,
    };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CKPT_VERSION}"
        )));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let count = cur.u64()? as usize;
    let mut staged: Vec<(String, Arr)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad weight name".into()))?;
        let ndim = cur.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(8 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad array {name}: {e}")))?;
        let target = params.get(&name).ok_or_else(|| {
            Error::Checkpoint(format!("array {name:?} has no matching parameter"))
        })?;
        if target.value().shape() != arr.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {:?} vs model {:?}",
                arr.shape(),
                target.value().shape()
            )));
        }
        staged.push((name, arr));
    }
    // All arrays validated; commit.
    for (name, arr) in staged {
        params.get(&name).unwrap().set_value(arr);
    }
    Ok(meta)
}

/// Recorded per-run artifacts live under a run directory owned by exactly
/// one process, guarded by a lock file created exclusively.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<RunDir> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let lock = path.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(_) => Ok(RunDir {
                path: path.to_path_buf(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is already owned by another invocation (lock file present)",
                path.display()
            ))),
            Err(e) => Err(Error::io(lock.display().to_string(), e)),
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(".lock"));
    }
}
