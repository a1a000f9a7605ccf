//! Image datasets: the CIFAR-10 binary format and a seeded synthetic stand-in.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Normalized images `[N, 3, H, W]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    h: usize,
    w: usize,
    num_classes: usize,
}

impl Dataset {
    pub const CHANNELS: usize = 3;

    pub fn new(images: Vec<f32>, labels: Vec<usize>, h: usize, w: usize, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() * Self::CHANNELS * h * w {
            return Err(Error::dim(
                "dataset",
                format!("{} values for {} images of 3x{h}x{w}", images.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            h,
            w,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image_len(&self) -> usize {
        Self::CHANNELS * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            h: self.h,
            w: self.w,
            num_classes: self.num_classes,
        }
    }

    /// Pixels and labels of `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Reads one CIFAR-10 binary batch file: raw pixel bytes and labels.
pub fn read_cifar_file(path: &Path, records: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (records * CIFAR_RECORD) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Scales bytes to [0, 1], then normalizes each channel with the fixed
/// CIFAR-10 constants.
fn normalize_bytes(pixels: &[u8], plane: usize) -> Vec<f32> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let c = (i / plane) % 3;
            (b as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]
        })
        .collect()
}

fn cifar_dataset(files: &[std::path::PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (px, lb) = read_cifar_file(f, CIFAR_RECORDS_PER_FILE)?;
        images.extend(normalize_bytes(&px, CIFAR_SIDE * CIFAR_SIDE));
        for l in lb {
            if l >= 10 {
                return Err(Error::Input(format!("{}: label byte {l} outside [0, 10)", f.display())));
            }
            labels.push(l as usize);
        }
    }
    Dataset::new(images, labels, CIFAR_SIDE, CIFAR_SIDE, 10)
}

/// The standard 50000-image train and 10000-image test sets from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<_> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let train = cifar_dataset(&train)?;
    let test = cifar_dataset(&[dir.join(CIFAR_TEST_FILE)])?;
    Ok((train, test))
}

/// Class-conditional images: each class is a coloured Gaussian blob at its own
/// position on a ring, jittered by up to a pixel, over per-pixel noise.
pub fn synthetic_dataset(seed: u64, num_classes: usize, n: usize, h: usize, w: usize) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::Config(format!(
            "synthetic dataset needs n >= num_classes > 0 (n={n}, classes={num_classes})"
        )));
    }
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("synthetic images must be at least 4x4, got {h}x{w}")));
    }
    // Class prototypes depend on the seed's stream 0 only, so two datasets
    // drawn with different sample seeds but the same class seed agree on classes.
    let mut proto_rng = seeded(derive_seed(seed, 0));
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let radius = 0.3 * h.min(w) as f32;
    let protos: Vec<([f32; 2], [f32; 3])> = (0..num_classes)
        .map(|c| {
            let angle = std::f32::consts::TAU * c as f32 / num_classes as f32;
            let colour = [
                proto_rng.random_range(0.0..1.0),
                proto_rng.random_range(0.0..1.0),
                proto_rng.random_range(0.0..1.0),
            ];
            ([cy + radius * angle.sin(), cx + radius * angle.cos()], colour)
        })
        .collect();

    let mut rng = seeded(derive_seed(seed, 1));
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let sigma = 0.2 * h.min(w) as f32;
    let plane = h * w;
    let mut images = Vec::with_capacity(n * 3 * plane);
    for &label in &labels {
        let ([py, px], colour) = protos[label];
        let jy = py + rng.random_range(-1.0f32..1.0);
        let jx = px + rng.random_range(-1.0f32..1.0);
        let mut img = vec![0u8; 3 * plane];
        for (c, &col) in colour.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - jy).powi(2) + (x as f32 - jx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    let noise: f32 = rng.sample(StandardNormal);
                    let v = (0.5 + (col - 0.5) * blob + 0.15 * noise).clamp(0.0, 1.0);
                    img[c * plane + y * w + x] = (v * 255.0).round() as u8;
                }
            }
        }
        images.extend(normalize_bytes(&img, plane));
    }
    Dataset::new(images, labels, h, w, num_classes)
}

/// Seeded permutation split into consecutive parts with the given fractions.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seeded(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut acc = 0.0;
    for (i, &f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() {
            ds.len()
        } else {
            (acc * ds.len() as f64).round() as usize
        };
        parts.push(ds.subset(&idx[start..end]));
        start = end;
    }
    Ok(parts)
}

/// Random crop from a zero-padded copy plus horizontal flip, per image, in place.
pub fn augment(batch: &mut [f32], n: usize, h: usize, w: usize, pad: usize, rng: &mut Rng) {
    let plane = h * w;
    let len = Dataset::CHANNELS * plane;
    debug_assert_eq!(batch.len(), n * len);
    let mut src = vec![0.0f32; len];
    for img in batch.chunks_exact_mut(len) {
        src.copy_from_slice(img);
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for c in 0..Dataset::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    img[c * plane + y * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        src[c * plane + sy as usize * w + sx as usize]
                    };
                }
            }
        }
    }
}

/// Every split a search-then-train pipeline touches.
#[derive(Debug, Clone)]
pub struct Splits {
    /// θ stream during search.
    pub search_train: Dataset,
    /// α stream during search.
    pub search_val: Dataset,
    /// Training set for from-scratch runs (the union of the two search halves).
    pub train: Dataset,
    /// Where from-scratch validation error is measured.
    pub val: Dataset,
    /// Held out from everything above.
    pub test: Dataset,
}

pub const DESK_TRAIN: usize = 2560;
pub const DESK_VAL: usize = 1280;
pub const DESK_TEST: usize = 1280;
pub const DESK_SIDE: usize = 8;

impl Splits {
    /// Halves `train` into the two search streams.
    pub fn from_parts(train: Dataset, val: Dataset, test: Dataset, seed: u64) -> Result<Self> {
        let halves = split(&train, &[0.5, 0.5], derive_seed(seed, 11))?;
        let [search_train, search_val]: [Dataset; 2] = halves.try_into().expect("two halves");
        Ok(Splits {
            search_train,
            search_val,
            train,
            val,
            test,
        })
    }

    /// The desk-scale synthetic task: 2560 train / 1280 val / 1280 test at 8×8.
    pub fn synthetic(seed: u64, num_classes: usize) -> Result<Self> {
        let n = DESK_TRAIN + DESK_VAL + DESK_TEST;
        let all = synthetic_dataset(seed, num_classes, n, DESK_SIDE, DESK_SIDE)?;
        let t = DESK_TRAIN as f64 / n as f64;
        let v = DESK_VAL as f64 / n as f64;
        let parts = split(&all, &[t, v, 1.0 - t - v], derive_seed(seed, 10))?;
        let [train, val, test]: [Dataset; 3] = parts.try_into().expect("three parts");
        Splits::from_parts(train, val, test, seed)
    }

    /// CIFAR-10: search on halves of the 50000 training images; the 10000
    /// test images serve as the validation set for from-scratch training.
    pub fn cifar10(dir: &Path, seed: u64) -> Result<Self> {
        let (train, test) = load_cifar10(dir)?;
        Splits::from_parts(train, test.clone(), test, seed)
    }
}

/// Seeded shuffled mini-batches over one dataset, reshuffled each epoch.
#[derive(Debug)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    rng: Rng,
}

impl Batches {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Batches {
            order,
            batch_size: batch_size.min(len).max(1),
            pos: 0,
            rng,
        }
    }

    /// Full batches per pass.
    pub fn per_epoch(&self) -> usize {
        (self.order.len() / self.batch_size).max(1)
    }

    /// Next batch of indices; wraps with a reshuffle when a pass is exhausted.
    pub fn next_indices(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let s = self.pos;
        self.pos += self.batch_size;
        &self.order[s..s + self.batch_size]
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_arithmetic_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![0u8; CIFAR_RECORDS_PER_FILE * CIFAR_RECORD];
        for (i, rec) in bytes.chunks_exact_mut(CIFAR_RECORD).enumerate() {
            rec[0] = (i * 7 % 10) as u8;
            rec[1] = (i % 256) as u8;
        }
        assert_eq!(bytes.len(), 30_730_000);
        std::fs::write(&path, &bytes).unwrap();
        let (px, labels) = read_cifar_file(&path, CIFAR_RECORDS_PER_FILE).unwrap();
        assert_eq!(labels.len(), 10_000);
        assert_eq!(px.len(), 10_000 * 3072);
        let ds = cifar_dataset(&[path.clone()]).unwrap();
        assert_eq!(ds.len(), 10_000);
        // Re-read the raw bytes independently.
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(ds.labels()[0], raw[0] as usize);
        assert_eq!(ds.labels()[3], raw[3 * CIFAR_RECORD] as usize);
        let first = (raw[1] as f32 / 255.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert_eq!(ds.image(0)[0], first);

        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match read_cifar_file(&path, CIFAR_RECORDS_PER_FILE) {
            Err(Error::Format { expected, actual, .. }) => {
                assert_eq!(expected, 30_730_000);
                assert_eq!(actual, 30_729_900);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = synthetic_dataset(3, 10, 1003, 8, 8).unwrap();
        let b = synthetic_dataset(3, 10, 1003, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(4, 10, 1003, 8, 8).unwrap();
        assert_ne!(a, c);
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert!(synthetic_dataset(0, 10, 5, 8, 8).is_err());
    }

    /// Multinomial logistic regression on raw pixels, plain gradient descent.
    fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let d = train.image_len();
        let k = train.num_classes();
        let mut w = vec![0.0f64; k * (d + 1)];
        for _ in 0..200 {
            let mut grad = vec![0.0f64; w.len()];
            for i in 0..train.len() {
                let x = train.image(i);
                let logits: Vec<f64> = (0..k)
                    .map(|c| w[c * (d + 1) + d] + x.iter().enumerate().map(|(j, &v)| w[c * (d + 1) + j] * v as f64).sum::<f64>())
                    .collect();
                let p = crate::cost::softmax_f64(&logits);
                for c in 0..k {
                    let g = p[c] - if c == train.labels()[i] { 1.0 } else { 0.0 };
                    for (j, &v) in x.iter().enumerate() {
                        grad[c * (d + 1) + j] += g * v as f64;
                    }
                    grad[c * (d + 1) + d] += g;
                }
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= 0.5 * gi / train.len() as f64;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.image(i);
                let score = |c: usize| w[c * (d + 1) + d] + x.iter().enumerate().map(|(j, &v)| w[c * (d + 1) + j] * v as f64).sum::<f64>();
                let best = (0..k).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
                best == test.labels()[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn synthetic_is_linearly_separable_enough() {
        let all = synthetic_dataset(1, 10, 800, 8, 8).unwrap();
        let parts = split(&all, &[0.75, 0.25], 2).unwrap();
        let acc = linear_probe_accuracy(&parts[0], &parts[1]);
        assert!(acc > 0.6, "linear probe accuracy {acc}");
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synthetic_dataset(0, 10, 200, 4, 4).unwrap();
        let parts = split(&ds, &[0.5, 0.5], 1).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (100, 100));
        assert!(split(&ds, &[0.5, 0.6], 1).is_err());
        let s = Splits::synthetic(5, 10).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2560, 1280, 1280));
        assert_eq!((s.search_train.len(), s.search_val.len()), (1280, 1280));
        // Disjoint halves: every training image lands in exactly one half.
        let mut all: Vec<&[f32]> = (0..1280).map(|i| s.search_train.image(i)).collect();
        all.extend((0..1280).map(|i| s.search_val.image(i)));
        let mut train: Vec<&[f32]> = (0..2560).map(|i| s.train.image(i)).collect();
        let key = |a: &&[f32], b: &&[f32]| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal);
        all.sort_by(key);
        train.sort_by(key);
        assert_eq!(all, train);
    }

    #[test]
    fn fifty_thousand_split_halves() {
        let ds = Dataset::new(vec![0.0; 50_000 * 3], vec![0; 50_000], 1, 1, 1).unwrap();
        let parts = split(&ds, &[0.5, 0.5], 9).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (25_000, 25_000));
    }

    #[test]
    fn augmentation_preserves_shape_and_zero_pad_is_identity() {
        let ds = synthetic_dataset(0, 10, 20, 8, 8).unwrap();
        let (mut batch, labels) = ds.gather(&[0, 1, 2, 3]);
        let orig = batch.clone();
        let mut rng = seeded(0);
        augment(&mut batch, 4, 8, 8, 2, &mut rng);
        assert_eq!(batch.len(), orig.len());
        assert_eq!(labels, ds.labels()[..4].to_vec());
        assert_ne!(batch, orig);
        // With no padding the only change is an optional mirror; flipping twice restores.
        let mut once = orig.clone();
        augment(&mut once, 4, 8, 8, 0, &mut seeded(1));
        for (img, src) in once.chunks(192).zip(orig.chunks(192)) {
            let mirrored: Vec<f32> = (0..192).map(|i| src[(i / 8) * 8 + 7 - i % 8]).collect();
            assert!(img == src || img == mirrored.as_slice());
        }
    }

    #[test]
    fn batches_cover_then_reshuffle() {
        let mut b = Batches::new(10, 4, 0);
        assert_eq!(b.per_epoch(), 2);
        let mut seen: Vec<usize> = b.next_indices().to_vec();
        seen.extend(b.next_indices());
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(b.next_indices().len(), 4);
    }

    #[test]
    #[ignore = "needs CIFAR-10 binaries in $CIFAR10_DIR"]
    fn cifar_normalization_statistics() {
        let dir = std::env::var("CIFAR10_DIR").expect("CIFAR10_DIR");
        let (train, _) = load_cifar10(Path::new(&dir)).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            let vals: Vec<f64> = (0..train.len())
                .flat_map(|i| train.image(i)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 0.02, "channel {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.02, "channel {c} std {}", var.sqrt());
        }
    }
}
