//! Datasets: the CIFAR-10 binary format, synthetic image tasks, augmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{Rng, Tensor};
use crate::error::{Error, Result};
use crate::model::Batch;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized NCHW images held as one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<f32>> {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} outside dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::from_vec(&[idx.len(), self.channels, self.size, self.size], data)?;
        Batch::new(
            images,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// The first `k` samples of every class, in dataset order.
    pub fn subset_per_class(&self, k: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes];
        let mut out = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            ..self.clone()
        };
        for i in 0..self.len() {
            let l = self.labels[i];
            if seen[l] < k {
                seen[l] += 1;
                out.images.extend_from_slice(self.image(i));
                out.labels.push(l);
            }
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Decodes concatenated CIFAR-10 records: one label byte, then 1024 bytes each of
/// the R, G and B planes. Pixels are scaled to [0, 1] and normalized per channel.
pub fn parse_cifar_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!(
                "record {r} has label byte {}",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(
                plane
                    .iter()
                    .map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]),
            );
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        size: 32,
        num_classes: 10,
        split,
    })
}

fn read_records(path: &Path, split: Split, into: &mut Option<Dataset>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let part = parse_cifar_records(&bytes, split)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    match into {
        None => *into = Some(part),
        Some(d) => {
            d.images.extend(part.images);
            d.labels.extend(part.labels);
        }
    }
    Ok(())
}

/// Loads the five training batches and the test batch from `dir`. `subset` keeps
/// the first `k` training images of each class.
pub fn load_cifar10(dir: &Path, subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let mut train = None;
    for f in CIFAR_TRAIN_FILES {
        read_records(&dir.join(f), Split::Train, &mut train)?;
    }
    let mut test = None;
    read_records(&dir.join(CIFAR_TEST_FILE), Split::Test, &mut test)?;
    let (mut train, test) = (
        train.expect("five files read"),
        test.expect("test file read"),
    );
    if let Some(k) = subset {
        train = train.subset_per_class(k);
    }
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Each class is a colour: constant per-channel means plus pixel noise.
    Blobs,
    /// Each class is a ring of its own radius around a jittered centre.
    Rings,
}

/// Deterministic image task with `n` samples of `3 x size x size`; labels are
/// balanced to within one sample per class.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    num_classes: usize,
    seed: u64,
    size: usize,
    split: Split,
) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least one sample per class, got {n} for {num_classes}"
        )));
    }
    if size < 4 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} too small"
        )));
    }
    // Class definitions come from a stream shared by every split of one seed.
    let mut class_rng = Rng::with_stream(seed, 1);
    let mut rng = Rng::with_stream(seed, if split == Split::Train { 2 } else { 3 });
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(num_classes);
    while centers.len() < num_classes {
        let c = [
            1.5 * class_rng.normal(),
            1.5 * class_rng.normal(),
            1.5 * class_rng.normal(),
        ];
        if centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= 1.0)
        {
            centers.push(c);
        }
    }
    let tints: Vec<[f64; 3]> = (0..num_classes)
        .map(|_| {
            [
                0.5 + class_rng.uniform(),
                0.5 + class_rng.uniform(),
                0.5 + class_rng.uniform(),
            ]
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let plane = size * size;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let half = size as f64 / 2.0;
    for &l in &labels {
        match kind {
            SyntheticKind::Blobs => {
                for mean in centers[l] {
                    images.extend((0..plane).map(|_| (mean + 0.5 * rng.normal()) as f32));
                }
            }
            SyntheticKind::Rings => {
                let r = if num_classes == 1 {
                    half / 2.0
                } else {
                    1.5 + l as f64 * (half - 3.0) / (num_classes - 1) as f64
                };
                let (cx, cy) = (
                    half - 0.5 + rng.uniform() * 2.0 - 1.0,
                    half - 0.5 + rng.uniform() * 2.0 - 1.0,
                );
                let ring: Vec<f64> = (0..plane)
                    .map(|p| {
                        let (y, x) = ((p / size) as f64, (p % size) as f64);
                        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                        (-(d - r).powi(2) / 2.0).exp()
                    })
                    .collect();
                for tint in tints[l] {
                    images.extend(ring.iter().map(|&v| (tint * v + 0.2 * rng.normal()) as f32));
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        size,
        num_classes,
        split,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub flip: bool,
    pub pad_crop: bool,
}

pub const CROP_PAD: usize = 4;

fn flip_image(img: &mut [f32], c: usize, s: usize) {
    for row in img.chunks_exact_mut(s).take(c * s) {
        row.reverse();
    }
}

fn crop_image(img: &[f32], c: usize, s: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0f32; c * s * s];
    for ch in 0..c {
        for i in 0..s {
            let y = (i + dy) as isize - CROP_PAD as isize;
            if y < 0 || y >= s as isize {
                continue;
            }
            for j in 0..s {
                let x = (j + dx) as isize - CROP_PAD as isize;
                if x >= 0 && x < s as isize {
                    out[(ch * s + i) * s + j] = img[(ch * s + y as usize) * s + x as usize];
                }
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) and zero-pad-4 random crop, per sample. Each
/// sample draws the flip coin first, then the row and column offsets.
pub fn augment(
    batch: &Batch<f32>,
    flags: AugmentFlags,
    split: Split,
    rng: &mut Rng,
) -> Result<Batch<f32>> {
    if split != Split::Train {
        return Err(Error::InvalidArgument(
            "augmentation applies to the training split only".into(),
        ));
    }
    if !flags.flip && !flags.pad_crop {
        return Ok(batch.clone());
    }
    let (n, c, h, w) = batch.images.dims4()?;
    if h != w {
        return Err(Error::InvalidArgument(
            "augmentation expects square images".into(),
        ));
    }
    let mut out = batch.clone();
    for i in 0..n {
        let img = out.images.outer_mut(i);
        if flags.flip && rng.bernoulli(0.5) {
            flip_image(img, c, h);
        }
        if flags.pad_crop {
            let dy = rng.below(2 * CROP_PAD + 1);
            let dx = rng.below(2 * CROP_PAD + 1);
            let cropped = crop_image(img, c, h, dy, dx);
            img.copy_from_slice(&cropped);
        }
    }
    Ok(out)
}
